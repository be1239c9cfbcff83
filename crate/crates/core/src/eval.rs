//! Detection scoring, the fixed-expansion baseline, the loss-kind ablation
//! table, and wall-clock throughput measurement.

use crate::deform::{expand, featurize, infer, DeformNet, InferConfig};
use crate::error::{Error, Result};
use crate::geometry::{estimate_expansion_margin, polygon_iou, Point, Polygon};
use crate::kernel::{binarize, extract_kernels};
use crate::synth::SynthScene;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Samples per cell axis when rasterizing IoU during matching.
const IOU_SUPERSAMPLE: u32 = 4;

/// Match bookkeeping for one scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub matched: usize,
    pub missed: usize,
    pub spurious: usize,
}

/// Detection quality over one or more scenes. Percentages in [0, 100].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub per_scene: Vec<SceneCounts>,
    /// Mean IoU over matched pairs; 0 when nothing matched.
    pub mean_iou_of_matches: f64,
}

impl EvalReport {
    fn from_scenes(per_scene: Vec<SceneCounts>, iou_sum: f64) -> EvalReport {
        let matched: usize = per_scene.iter().map(|c| c.matched).sum();
        let preds = matched + per_scene.iter().map(|c| c.spurious).sum::<usize>();
        let gts = matched + per_scene.iter().map(|c| c.missed).sum::<usize>();
        let ratio = |num: usize, den: usize, other: usize| {
            if den > 0 {
                100.0 * num as f64 / den as f64
            } else if other == 0 {
                100.0
            } else {
                0.0
            }
        };
        let precision = ratio(matched, preds, gts);
        let recall = ratio(matched, gts, preds);
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            precision,
            recall,
            f_measure,
            per_scene,
            mean_iou_of_matches: if matched > 0 {
                iou_sum / matched as f64
            } else {
                0.0
            },
        }
    }
}

/// Greedy one-to-one matching of one scene's predictions against its ground
/// truth: candidate pairs at or above `iou_threshold`, taken in descending
/// IoU order (ties broken by index), each polygon used at most once.
fn match_scene(preds: &[Polygon], gts: &[Polygon], iou_threshold: f64) -> (SceneCounts, f64) {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, pred) in preds.iter().enumerate() {
        let pb = pred.bbox();
        for (j, gt) in gts.iter().enumerate() {
            if !pb.intersects_padded(&gt.bbox(), 0.0) {
                continue;
            }
            let iou = polygon_iou(pred, gt, IOU_SUPERSAMPLE);
            if iou >= iou_threshold {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("IoU is finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut matched = 0;
    let mut iou_sum = 0.0;
    for (iou, i, j) in candidates {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            matched += 1;
            iou_sum += iou;
        }
    }
    (
        SceneCounts {
            matched,
            missed: gts.len() - matched,
            spurious: preds.len() - matched,
        },
        iou_sum,
    )
}

/// Score one scene's predictions against its ground-truth polygons.
pub fn evaluate(preds: &[Polygon], gts: &[Polygon], iou_threshold: f64) -> EvalReport {
    let (counts, iou_sum) = match_scene(preds, gts, iou_threshold);
    EvalReport::from_scenes(vec![counts], iou_sum)
}

/// Score many scenes; counts pool across scenes (micro-average).
pub fn evaluate_scenes(
    scenes: &[(Vec<Polygon>, Vec<Polygon>)],
    iou_threshold: f64,
) -> EvalReport {
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut iou_sum = 0.0;
    for (preds, gts) in scenes {
        let (counts, s) = match_scene(preds, gts, iou_threshold);
        per_scene.push(counts);
        iou_sum += s;
    }
    EvalReport::from_scenes(per_scene, iou_sum)
}

/// The learning-free reference: expand the kernel by a fixed margin with the
/// same polygon-offset machinery used for shrinking. Margin 0 is the
/// identity.
pub fn fixed_expand_baseline(kernel: &Polygon, margin: f64) -> Result<Polygon> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::InvalidParam {
            name: "margin",
            reason: format!("expansion margin must be finite and non-negative, got {margin}"),
        });
    }
    if margin == 0.0 {
        return Ok(kernel.clone());
    }
    kernel.offset(margin)
}

/// Trained regressors for the ablation, one per loss kind.
#[derive(Clone, Debug, Default)]
pub struct AblationNets {
    pub dml: Option<DeformNet>,
    pub nnml: Option<DeformNet>,
    pub obgml: Option<DeformNet>,
}

/// Shared evaluation settings for the ablation table.
#[derive(Clone, Copy, Debug)]
pub struct AblationConfig {
    pub iou_threshold: f64,
    /// Shrink ratio the kernels were built with; drives the baseline's
    /// margin estimate.
    pub shrink_ratio: f64,
    /// Detection settings; `dce_iterations` is overridden per table row.
    pub infer: InferConfig,
}

impl Default for AblationConfig {
    fn default() -> AblationConfig {
        AblationConfig {
            iou_threshold: 0.5,
            shrink_ratio: 0.4,
            infer: InferConfig::default(),
        }
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub iterations: usize,
    pub report: EvalReport,
}

/// The full method x iteration-count table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned text rendering (percentages to one decimal).
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "method    iters      P      R      F   mean IoU\n\
             ------------------------------------------------\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<9} {:>5} {:>6.1} {:>6.1} {:>6.1} {:>10.3}\n",
                row.method,
                row.iterations,
                row.report.precision,
                row.report.recall,
                row.report.f_measure,
                row.report.mean_iou_of_matches,
            ));
        }
        out
    }
}

/// Ground-truth boundaries of one scene.
fn scene_gts(scene: &SynthScene) -> Vec<Polygon> {
    scene.instances.iter().map(|i| i.boundary.clone()).collect()
}

/// Kernel polygons detected in one scene's probability maps, in scene
/// coordinates.
fn detect_kernels(scene: &SynthScene, cfg: &InferConfig) -> Result<Vec<Polygon>> {
    let mut out = Vec::new();
    for inst in &scene.instances {
        let mask = binarize(&inst.prob.map, cfg.threshold)?;
        let origin = Point::new(inst.prob.x0, inst.prob.y0);
        for k in extract_kernels(&mask, cfg.min_area) {
            out.push(k.translate(origin));
        }
    }
    Ok(out)
}

/// Baseline predictions: every detected kernel expanded by its estimated
/// margin. Kernels whose margin estimate fails are kept unexpanded.
fn baseline_scene(scene: &SynthScene, cfg: &AblationConfig) -> Result<Vec<Polygon>> {
    let mut preds = Vec::new();
    for kernel in detect_kernels(scene, &cfg.infer)? {
        let expanded = estimate_expansion_margin(&kernel, cfg.shrink_ratio)
            .and_then(|m| fixed_expand_baseline(&kernel, m))
            .unwrap_or_else(|_| kernel.clone());
        preds.push(expanded);
    }
    Ok(preds)
}

/// Net predictions for one scene.
fn net_scene(scene: &SynthScene, net: &DeformNet, cfg: &InferConfig) -> Result<Vec<Polygon>> {
    let mut preds = Vec::new();
    for inst in &scene.instances {
        preds.extend(infer(net, &inst.prob, cfg)?);
    }
    Ok(preds)
}

/// Build the 8-row ablation: fixed expansion plus the three trained
/// regressors, each at 1 and 2 expansion passes. Every regressor row needs
/// its net; a missing one is an error.
pub fn run_ablation(
    dataset: &[SynthScene],
    nets: &AblationNets,
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let gts: Vec<Vec<Polygon>> = dataset.iter().map(scene_gts).collect();
    let score = |preds: Vec<Vec<Polygon>>| -> EvalReport {
        let scenes: Vec<(Vec<Polygon>, Vec<Polygon>)> =
            preds.into_iter().zip(gts.iter().cloned()).collect();
        evaluate_scenes(&scenes, cfg.iou_threshold)
    };
    let mut rows = Vec::with_capacity(8);
    for iterations in [1usize, 2] {
        // The fixed expansion has no iteration concept; the row repeats so
        // the table stays rectangular.
        let baseline: Vec<Vec<Polygon>> = dataset
            .iter()
            .map(|s| baseline_scene(s, cfg))
            .collect::<Result<_>>()?;
        rows.push(AblationRow {
            method: "baseline".into(),
            iterations,
            report: score(baseline),
        });
        for (name, net) in [
            ("dml", nets.dml.as_ref()),
            ("nnml", nets.nnml.as_ref()),
            ("obgml", nets.obgml.as_ref()),
        ] {
            let net = net.ok_or_else(|| Error::MissingNet(name.to_string()))?;
            let infer_cfg = InferConfig {
                dce_iterations: iterations,
                ..cfg.infer
            };
            let preds: Vec<Vec<Polygon>> = dataset
                .iter()
                .map(|s| net_scene(s, net, &infer_cfg))
                .collect::<Result<_>>()?;
            rows.push(AblationRow {
                method: name.into(),
                iterations,
                report: score(preds),
            });
        }
    }
    Ok(AblationTable { rows })
}

/// Wall-clock cost of the inference pipeline, medians over repeated passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub scenes_per_second: f64,
    /// Per-pass stage totals in milliseconds (medians over repetitions).
    pub kernel_extraction_ms: f64,
    pub featurize_ms: f64,
    pub forward_ms: f64,
    pub expand_ms: f64,
    /// Full pass over the dataset, ms.
    pub total_ms: f64,
    pub repetitions: usize,
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        format!(
            "scenes/s          {:>10.2}\n\
             kernel extraction {:>10.3} ms\n\
             featurize         {:>10.3} ms\n\
             forward           {:>10.3} ms\n\
             expand            {:>10.3} ms\n\
             total per pass    {:>10.3} ms   ({} repetitions)\n",
            self.scenes_per_second,
            self.kernel_extraction_ms,
            self.featurize_ms,
            self.forward_ms,
            self.expand_ms,
            self.total_ms,
            self.repetitions,
        )
    }
}

#[derive(Clone, Copy, Default)]
struct StageTotals {
    kernel: f64,
    featurize: f64,
    forward: f64,
    expand: f64,
    total: f64,
}

/// One single-threaded pass over the dataset, stage-timed.
fn timed_pass(net: &DeformNet, dataset: &[SynthScene], cfg: &InferConfig) -> Result<StageTotals> {
    let mut t = StageTotals::default();
    let pass_start = Instant::now();
    for scene in dataset {
        for inst in &scene.instances {
            let start = Instant::now();
            let mask = binarize(&inst.prob.map, cfg.threshold)?;
            let kernels = extract_kernels(&mask, cfg.min_area);
            t.kernel += start.elapsed().as_secs_f64();
            let origin = Point::new(inst.prob.x0, inst.prob.y0);
            for kernel in kernels {
                let kernel = kernel.translate(origin);
                let Ok(contour) = kernel.sample_and_sort(cfg.n_vertices) else {
                    continue;
                };
                let start = Instant::now();
                let feats = featurize(&contour, &inst.prob, &contour.bbox());
                t.featurize += start.elapsed().as_secs_f64();
                let start = Instant::now();
                let offsets = net.forward(&feats)?;
                t.forward += start.elapsed().as_secs_f64();
                let start = Instant::now();
                let _ = expand(&contour, &offsets)?;
                t.expand += start.elapsed().as_secs_f64();
            }
        }
    }
    t.total = pass_start.elapsed().as_secs_f64();
    Ok(t)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Measure single-threaded inference throughput: one warm-up pass, then the
/// median over `repetitions` timed passes.
pub fn benchmark(
    net: &DeformNet,
    dataset: &[SynthScene],
    repetitions: usize,
    cfg: &InferConfig,
) -> Result<TimingReport> {
    if repetitions < 3 {
        return Err(Error::InvalidParam {
            name: "repetitions",
            reason: format!("need at least 3 repetitions, got {repetitions}"),
        });
    }
    if dataset.is_empty() || dataset.iter().all(|s| s.instances.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    timed_pass(net, dataset, cfg)?; // warm-up
    let mut passes = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        passes.push(timed_pass(net, dataset, cfg)?);
    }
    let field = |f: fn(&StageTotals) -> f64| -> f64 {
        let mut values: Vec<f64> = passes.iter().map(f).collect();
        median(&mut values)
    };
    let total_s = field(|t| t.total);
    Ok(TimingReport {
        scenes_per_second: dataset.len() as f64 / total_s,
        kernel_extraction_ms: field(|t| t.kernel) * 1e3,
        featurize_ms: field(|t| t.featurize) * 1e3,
        forward_ms: field(|t| t.forward) * 1e3,
        expand_ms: field(|t| t.expand) * 1e3,
        total_ms: total_s * 1e3,
        repetitions,
    })
}
