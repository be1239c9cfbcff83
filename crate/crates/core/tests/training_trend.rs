//! Training must actually learn: after a run, the smoothed loss sits well
//! below where it was near the start — for every vertex pairing loss.

use dke_core::{make_scene, train, LossKind, SceneParams, SynthScene, TrainConfig};

fn dataset(scenes: usize) -> Vec<SynthScene> {
    (0..scenes)
        .map(|s| make_scene(2, 256, 256, 1000 + s as u64, &SceneParams::default()).unwrap())
        .collect()
}

fn assert_learns(kind: LossKind) {
    let data = dataset(30);
    let cfg = TrainConfig {
        loss_kind: kind,
        n_vertices: 64,
        max_steps: 1500,
        seed: 7,
        ..TrainConfig::default()
    };
    let (_, report) = train(&data, &cfg).unwrap();
    let early = report.smoothed_at(100, 50).unwrap();
    let late = report.smoothed_at(cfg.max_steps, 50).unwrap();
    assert!(
        late < 0.9 * early,
        "{kind}: smoothed loss should drop, got {early:.4} early vs {late:.4} late"
    );
}

#[test]
fn dml_training_reduces_the_loss() {
    assert_learns(LossKind::Dml);
}

#[test]
fn nnml_training_reduces_the_loss() {
    assert_learns(LossKind::Nnml);
}

#[test]
fn obgml_training_reduces_the_loss() {
    assert_learns(LossKind::Obgml);
}
