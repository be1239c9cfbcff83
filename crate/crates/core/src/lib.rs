//! Arbitrary-shaped text detection by kernel expansion.
//!
//! A detected text instance starts life as a *kernel*: the annotated boundary
//! polygon shrunk inward so that neighbouring instances separate cleanly. The
//! kernel contour is then pushed back out to the full boundary by a learned
//! per-vertex offset field. This crate implements the whole desk-scale
//! pipeline on synthetic data:
//!
//! * [`geometry`] — polygons, shrink margins, parallel offsetting, uniform
//!   contour sampling, rasterized IoU;
//! * [`assignment`] — cost matrices, the Hungarian matcher and the three
//!   contour losses (identity-paired, nearest-neighbour, bipartite-matched);
//! * [`kernel`] — probability maps, hard-negative-mined BCE, binarization and
//!   connected-component kernel extraction;
//! * [`deform`] — the circular-convolution offset regressor with hand-rolled
//!   backprop, Adam and the poly learning-rate schedule;
//! * [`synth`] — seeded synthetic scene generation and dataset (de)serialization;
//! * [`eval`] — greedy IoU matching, precision/recall/F-measure, the ablation
//!   table and a single-thread timing harness.

pub mod assignment;
pub mod deform;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kernel;
pub mod synth;

pub use assignment::{
    cost_matrix, dml_loss, hungarian, nnml_loss, obgml_loss, smooth_l1, Assignment, CostMatrix,
    LossKind, LossValue,
};
pub use error::{Error, Result};
pub use geometry::{
    polygon_iou, sample_and_sort, BoundingBox, Contour, Point, Polygon, ShrinkParams,
};
pub use deform::{
    adam_step, expand, featurize, infer, load_checkpoint, poly_lr, save_checkpoint, train,
    train_from, train_segment, AdamState, Checkpoint, DeformNet, FeatureMatrix, InferConfig,
    TrainConfig, TrainReport, FEATURE_CHANNELS,
};
pub use eval::{
    benchmark, evaluate, evaluate_scenes, fixed_expand_baseline, run_ablation, AblationConfig,
    AblationNets, AblationRow, AblationTable, EvalReport, SceneCounts, TimingReport,
};
pub use kernel::{
    bce_ohem_loss, binarize, extract_kernels, noisy_kernel_oracle, rasterize_polygon, BceOhem,
    Mask, MiningMask, ProbMap, SurrogateFeatureField,
};
pub use synth::{
    make_quad, make_ribbon, make_scene, read_dataset, write_dataset, QuadSpec, RibbonSpec,
    SceneParams, SynthInstance, SynthScene,
};
