//! Seeded, single-threaded training of the offset regressor on synthetic
//! scenes.

use super::checkpoint::Checkpoint;
use super::features::featurize;
use super::optim::{adam_step, poly_lr, AdamState};
use super::{expand, DeformNet, FeatureMatrix};
use crate::assignment::{contour_loss, LossKind};
use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::synth::SynthScene;
use serde::{Deserialize, Serialize};

/// Hyper-parameters for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Base learning rate.
    pub lr0: f64,
    /// Exponent of the polynomial decay schedule.
    pub poly_power: f64,
    /// Weight of the regression term in a joint objective. Kept for
    /// configuration compatibility; with the fixed surrogate segmenter used
    /// here the regression loss is the whole objective.
    pub lambda: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Kernel shrink ratio applied to ground-truth boundaries.
    pub shrink_ratio: f64,
    /// Samples per contour.
    pub n_vertices: usize,
    /// Expansion passes used at inference time with this net.
    pub dce_iterations: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr0: 2e-4,
            poly_power: 0.9,
            lambda: 0.25,
            batch_size: 1,
            max_steps: 2000,
            shrink_ratio: 0.4,
            n_vertices: 128,
            dce_iterations: 1,
            loss_kind: LossKind::Obgml,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::InvalidParam {
                name: "lr0",
                reason: format!("must be finite and positive, got {}", self.lr0),
            });
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return Err(Error::InvalidParam {
                name: "poly_power",
                reason: format!("must be finite and positive, got {}", self.poly_power),
            });
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidParam {
                name: "lambda",
                reason: format!("must be finite and non-negative, got {}", self.lambda),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam {
                name: "batch_size",
                reason: "batches need at least one example".into(),
            });
        }
        if self.n_vertices < 4 {
            return Err(Error::InvalidParam {
                name: "n_vertices",
                reason: format!("need at least 4 contour samples, got {}", self.n_vertices),
            });
        }
        if self.dce_iterations == 0 {
            return Err(Error::InvalidParam {
                name: "dce_iterations",
                reason: "need at least one expansion pass".into(),
            });
        }
        if !(self.shrink_ratio > 0.0 && self.shrink_ratio <= 1.0) {
            return Err(Error::InvalidParam {
                name: "shrink_ratio",
                reason: format!("must be in (0, 1], got {}", self.shrink_ratio),
            });
        }
        Ok(())
    }
}

/// Per-step loss history of a (partial) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Global step index of `history[0]`.
    pub start_step: usize,
    /// Mean batch loss per step, in step order.
    pub history: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }

    /// Mean of the `window` losses ending at global step `step` (exclusive).
    /// `None` when that range is not covered by this report.
    pub fn smoothed_at(&self, step: usize, window: usize) -> Option<f64> {
        if window == 0 || step < self.start_step + window {
            return None;
        }
        let end = step.checked_sub(self.start_step)?;
        if end > self.history.len() {
            return None;
        }
        let slice = &self.history[end - window..end];
        Some(slice.iter().sum::<f64>() / window as f64)
    }
}

/// One precomputed training example: the sampled kernel ring, its feature
/// matrix, and the sampled ground-truth boundary it should expand to.
struct Example {
    features: FeatureMatrix,
    base: Contour,
    target: Contour,
}

fn prepare_examples(dataset: &[SynthScene], cfg: &TrainConfig) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for scene in dataset {
        for inst in &scene.instances {
            let margin = inst.boundary.shrink_margin(cfg.shrink_ratio)?;
            let kernel = inst.boundary.offset(-margin)?;
            let base = kernel.sample_and_sort(cfg.n_vertices)?;
            let target = inst.boundary.sample_and_sort(cfg.n_vertices)?;
            let features = featurize(&base, &inst.prob, &base.bbox());
            examples.push(Example {
                features,
                base,
                target,
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(examples)
}

/// Train a fresh net (default architecture, parameters seeded from
/// `cfg.seed`) for `cfg.max_steps` steps.
pub fn train(dataset: &[SynthScene], cfg: &TrainConfig) -> Result<(DeformNet, TrainReport)> {
    cfg.validate()?;
    let mut net = DeformNet::new(cfg.seed);
    let mut state = AdamState::new(net.param_count());
    let report = train_segment(&mut net, &mut state, 0, cfg.max_steps, dataset, cfg)?;
    Ok((net, report))
}

/// Resume a checkpointed run until its configured step budget is spent.
pub fn train_from(ckpt: &Checkpoint, dataset: &[SynthScene]) -> Result<(DeformNet, TrainReport)> {
    ckpt.config.validate()?;
    let mut net = ckpt.to_net()?;
    if ckpt.adam.len() != net.param_count() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} optimizer slots", net.param_count()),
            got: format!("{}", ckpt.adam.len()),
        });
    }
    let mut state = ckpt.adam.clone();
    let report = train_segment(
        &mut net,
        &mut state,
        ckpt.step,
        ckpt.config.max_steps,
        dataset,
        &ckpt.config,
    )?;
    Ok((net, report))
}

/// Run global steps `start..stop` of the schedule defined by `cfg`, updating
/// `net` and `state` in place. Exposed so callers can checkpoint mid-run;
/// splitting a run at any step is bitwise equivalent to running it straight
/// through.
pub fn train_segment(
    net: &mut DeformNet,
    state: &mut AdamState,
    start: usize,
    stop: usize,
    dataset: &[SynthScene],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if stop > cfg.max_steps || start > stop {
        return Err(Error::InvalidParam {
            name: "steps",
            reason: format!(
                "segment {start}..{stop} outside the schedule 0..{}",
                cfg.max_steps
            ),
        });
    }
    let examples = prepare_examples(dataset, cfg)?;
    let mut history = Vec::with_capacity(stop - start);
    let mut grads = vec![0.0; net.param_count()];
    for step in start..stop {
        let lr = poly_lr(step, cfg.max_steps, cfg.lr0, cfg.poly_power)?;
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        for j in 0..cfg.batch_size {
            let ex = &examples[(step * cfg.batch_size + j) % examples.len()];
            let (trace, offsets) = net.forward_traced(&ex.features)?;
            let pred = expand(&ex.base, &offsets)?;
            let loss = match contour_loss(cfg.loss_kind, &pred, &ex.target) {
                Ok(l) => l,
                // A non-finite cost matrix means the offsets blew up.
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            };
            if !loss.value.is_finite() {
                return Err(Error::Diverged { step });
            }
            batch_loss += loss.value;
            let (pg, _) = net.backward(&trace, &loss.grad)?;
            for (acc, g) in grads.iter_mut().zip(&pg) {
                *acc += g;
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        history.push(batch_loss * scale);
        let mut params = net.params();
        match adam_step(&mut params, &grads, state, lr) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step });
        }
        net.set_params(&params)?;
    }
    Ok(TrainReport {
        start_step: start,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::checkpoint::{load_checkpoint, save_checkpoint};
    use crate::synth::{make_scene, SceneParams};

    fn tiny_dataset(seeds: &[u64]) -> Vec<SynthScene> {
        seeds
            .iter()
            .map(|&s| make_scene(1, 256, 256, s, &SceneParams::default()).unwrap())
            .collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            max_steps: 4,
            n_vertices: 32,
            seed: 5,
            loss_kind: LossKind::Dml,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = tiny_dataset(&[11, 12]);
        let cfg = quick_cfg();
        let (net_a, rep_a) = train(&ds, &cfg).unwrap();
        let (net_b, rep_b) = train(&ds, &cfg).unwrap();
        assert_eq!(rep_a, rep_b);
        assert_eq!(net_a.params(), net_b.params());
        assert_eq!(rep_a.history.len(), 4);
        assert!(rep_a.history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn zero_steps_returns_the_initialized_net() {
        let ds = tiny_dataset(&[11]);
        let cfg = TrainConfig {
            max_steps: 0,
            ..quick_cfg()
        };
        let (net, report) = train(&ds, &cfg).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(net.params(), DeformNet::new(cfg.seed).params());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train(&[], &quick_cfg()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let ds = tiny_dataset(&[11]);
        let cfg = TrainConfig {
            lr0: 1e150,
            max_steps: 4,
            ..quick_cfg()
        };
        match train(&ds, &cfg) {
            Err(Error::Diverged { step }) => assert!(step >= 1, "step {step}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn split_run_matches_straight_run_bitwise() {
        let ds = tiny_dataset(&[21, 22]);
        let cfg = TrainConfig {
            max_steps: 6,
            ..quick_cfg()
        };
        let (full_net, full_rep) = train(&ds, &cfg).unwrap();

        let mut net = DeformNet::new(cfg.seed);
        let mut state = AdamState::new(net.param_count());
        let first = train_segment(&mut net, &mut state, 0, 3, &ds, &cfg).unwrap();
        let ckpt = Checkpoint::capture(&net, &state, 3, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let (resumed_net, second) = train_from(&loaded, &ds).unwrap();
        assert_eq!(resumed_net.params(), full_net.params());
        let mut stitched = first.history.clone();
        stitched.extend_from_slice(&second.history);
        assert_eq!(stitched, full_rep.history);
        assert_eq!(second.start_step, 3);
    }

    #[test]
    fn smoothing_window_reads_the_right_slice() {
        let report = TrainReport {
            start_step: 10,
            history: (0..20).map(|v| v as f64).collect(),
        };
        // Steps 10..30; window 5 ending at step 20 covers history[5..10].
        assert_eq!(report.smoothed_at(20, 5), Some(7.0));
        assert_eq!(report.smoothed_at(30, 20), Some(9.5));
        assert_eq!(report.smoothed_at(31, 5), None);
        assert_eq!(report.smoothed_at(12, 5), None);
        assert_eq!(report.smoothed_at(20, 0), None);
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let base = quick_cfg();
        for (name, cfg) in [
            ("lr0", TrainConfig { lr0: 0.0, ..base.clone() }),
            ("batch", TrainConfig { batch_size: 0, ..base.clone() }),
            ("ratio", TrainConfig { shrink_ratio: 1.5, ..base.clone() }),
            ("dce", TrainConfig { dce_iterations: 0, ..base.clone() }),
            ("n", TrainConfig { n_vertices: 2, ..base.clone() }),
        ] {
            assert!(cfg.validate().is_err(), "{name} should fail validation");
        }
    }
}
