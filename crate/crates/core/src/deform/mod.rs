//! Contour offset regression: a stack of circular 1-D convolutions over
//! per-vertex features, a linear head emitting one (dx, dy) per vertex, and
//! the expansion step that applies those offsets to the kernel contour.
//!
//! Everything here is plain f64 on the CPU with hand-written gradients —
//! small enough to train in seconds, deterministic per seed.

mod checkpoint;
mod features;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LayerSnapshot};
pub use features::{featurize, FeatureMatrix, FEATURE_CHANNELS};
pub use optim::{adam_step, poly_lr, AdamState};
pub use train::{train, train_from, train_segment, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::geometry::{largest_simple_loop, Contour, Point, Polygon};
use crate::kernel::{binarize, extract_kernels, SurrogateFeatureField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default hidden width of the convolution stack.
pub const DEFAULT_HIDDEN: usize = 64;
/// Default number of convolution layers.
pub const DEFAULT_DEPTH: usize = 4;
/// Default convolution kernel size (taps along the ring).
pub const DEFAULT_KERNEL: usize = 9;

/// One circular 1-D convolution layer. Weights are laid out
/// `[out_ch][tap][in_ch]`, row-major.
#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Ring index feeding tap `t` of output row `i`.
    fn tap_index(&self, i: usize, t: usize, n: usize) -> usize {
        let r = (self.kernel / 2) as isize;
        (i as isize + t as isize - r).rem_euclid(n as isize) as usize
    }

    /// `y = conv(x) + bias`, pre-activation, row-major `n x out_ch`.
    fn preactivation(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.out_ch];
        let mut taps = vec![0usize; self.kernel];
        for i in 0..n {
            for (t, tap) in taps.iter_mut().enumerate() {
                *tap = self.tap_index(i, t, n) * self.in_ch;
            }
            for o in 0..self.out_ch {
                let mut acc = self.bias[o];
                for (t, &tap) in taps.iter().enumerate() {
                    let wb = (o * self.kernel + t) * self.in_ch;
                    for c in 0..self.in_ch {
                        acc += self.weight[wb + c] * x[tap + c];
                    }
                }
                y[i * self.out_ch + o] = acc;
            }
        }
        y
    }
}

/// The offset regressor: rectified circular convolutions with residual
/// connections (where the width allows), then a per-vertex linear map to 2.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformNet {
    layers: Vec<ConvLayer>,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardTrace {
    n: usize,
    /// Input to each convolution layer, row-major.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each convolution layer.
    preacts: Vec<Vec<f64>>,
    /// Input to the linear head.
    head_input: Vec<f64>,
}

impl DeformNet {
    /// Default architecture, parameters drawn from the seed.
    pub fn new(seed: u64) -> DeformNet {
        DeformNet::with_arch(
            FEATURE_CHANNELS,
            DEFAULT_HIDDEN,
            DEFAULT_DEPTH,
            DEFAULT_KERNEL,
            seed,
        )
        .expect("default architecture is valid")
    }

    /// Custom architecture: `depth` circular-convolution layers of width
    /// `hidden` and `kernel` taps over `in_ch` input channels, then a linear
    /// head to 2. Weights are uniform in +/- 1/sqrt(fan_in), biases zero.
    pub fn with_arch(
        in_ch: usize,
        hidden: usize,
        depth: usize,
        kernel: usize,
        seed: u64,
    ) -> Result<DeformNet> {
        if in_ch == 0 || hidden == 0 || depth == 0 {
            return Err(Error::InvalidParam {
                name: "arch",
                reason: "channels, width and depth must be positive".into(),
            });
        }
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::InvalidParam {
                name: "kernel",
                reason: format!("kernel size must be odd, got {kernel}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |count: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let lin = if l == 0 { in_ch } else { hidden };
            layers.push(ConvLayer {
                in_ch: lin,
                out_ch: hidden,
                kernel,
                weight: draw(hidden * kernel * lin, kernel * lin),
                bias: vec![0.0; hidden],
            });
        }
        let head_weight = draw(2 * hidden, hidden);
        Ok(DeformNet {
            layers,
            head_weight,
            head_bias: vec![0.0; 2],
        })
    }

    /// Channel count the net expects per vertex.
    pub fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    fn hidden(&self) -> usize {
        self.layers[0].out_ch
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum::<usize>()
            + self.head_weight.len()
            + self.head_bias.len()
    }

    /// Flatten all parameters: per layer weight then bias, then head weight
    /// and bias. The canonical order shared by gradients and checkpoints.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out.extend_from_slice(&self.head_weight);
        out.extend_from_slice(&self.head_bias);
        out
    }

    /// Load a flat parameter vector in the order [`DeformNet::params`] emits.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut at = 0;
        let take = |dst: &mut [f64], at: &mut usize| {
            dst.copy_from_slice(&flat[*at..*at + dst.len()]);
            *at += dst.len();
        };
        for layer in &mut self.layers {
            take(&mut layer.weight, &mut at);
            take(&mut layer.bias, &mut at);
        }
        take(&mut self.head_weight, &mut at);
        take(&mut self.head_bias, &mut at);
        Ok(())
    }

    /// Predict per-vertex offsets.
    pub fn forward(&self, u: &FeatureMatrix) -> Result<Vec<Point>> {
        self.forward_traced(u).map(|(_, out)| out)
    }

    /// Forward pass that also returns the activations needed by
    /// [`DeformNet::backward`].
    pub fn forward_traced(&self, u: &FeatureMatrix) -> Result<(ForwardTrace, Vec<Point>)> {
        if u.channels() != self.in_channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature channels", self.in_channels()),
                got: format!("{}", u.channels()),
            });
        }
        let n = u.n();
        if n == 0 {
            return Err(Error::InvalidParam {
                name: "features",
                reason: "feature matrix has no rows".into(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut x = u.data().to_vec();
        for layer in &self.layers {
            let y = layer.preactivation(&x, n);
            let mut out = vec![0.0; n * layer.out_ch];
            let residual = layer.in_ch == layer.out_ch;
            for (idx, slot) in out.iter_mut().enumerate() {
                let z = y[idx].max(0.0);
                *slot = if residual { z + x[idx] } else { z };
            }
            inputs.push(x);
            preacts.push(y);
            x = out;
        }
        let h = self.hidden();
        let mut offsets = Vec::with_capacity(n);
        for i in 0..n {
            let row = &x[i * h..(i + 1) * h];
            let mut dx = self.head_bias[0];
            let mut dy = self.head_bias[1];
            for c in 0..h {
                dx += self.head_weight[c] * row[c];
                dy += self.head_weight[h + c] * row[c];
            }
            offsets.push(Point::new(dx, dy));
        }
        Ok((
            ForwardTrace {
                n,
                inputs,
                preacts,
                head_input: x,
            },
            offsets,
        ))
    }

    /// Chain `upstream` (dL/d offset, one vector per vertex) back through
    /// the traced forward pass. Returns gradients for every parameter (flat,
    /// canonical order) and for every input cell (row-major n x in_ch).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[Point],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = trace.n;
        if upstream.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} upstream rows"),
                got: format!("{}", upstream.len()),
            });
        }
        let h = self.hidden();
        let mut head_w_grad = vec![0.0; 2 * h];
        let mut head_b_grad = vec![0.0; 2];
        let mut grad = vec![0.0; n * h];
        for i in 0..n {
            let g = upstream[i];
            head_b_grad[0] += g.x;
            head_b_grad[1] += g.y;
            let row = &trace.head_input[i * h..(i + 1) * h];
            for c in 0..h {
                head_w_grad[c] += g.x * row[c];
                head_w_grad[h + c] += g.y * row[c];
                grad[i * h + c] += g.x * self.head_weight[c] + g.y * self.head_weight[h + c];
            }
        }

        let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[l];
            let y = &trace.preacts[l];
            let residual = layer.in_ch == layer.out_ch;
            let mut w_grad = vec![0.0; layer.weight.len()];
            let mut b_grad = vec![0.0; layer.out_ch];
            let mut x_grad = vec![0.0; n * layer.in_ch];
            for i in 0..n {
                for o in 0..layer.out_ch {
                    let idx = i * layer.out_ch + o;
                    let dz = grad[idx];
                    let dy = if y[idx] > 0.0 { dz } else { 0.0 };
                    if dy != 0.0 {
                        b_grad[o] += dy;
                        for t in 0..layer.kernel {
                            let tap = layer.tap_index(i, t, n) * layer.in_ch;
                            let wb = (o * layer.kernel + t) * layer.in_ch;
                            for c in 0..layer.in_ch {
                                w_grad[wb + c] += dy * x[tap + c];
                                x_grad[tap + c] += dy * layer.weight[wb + c];
                            }
                        }
                    }
                    if residual {
                        x_grad[idx] += dz;
                    }
                }
            }
            layer_grads.push((w_grad, b_grad));
            grad = x_grad;
        }
        layer_grads.reverse();

        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in &layer_grads {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat.extend_from_slice(&head_w_grad);
        flat.extend_from_slice(&head_b_grad);
        Ok((flat, grad))
    }
}

/// Apply per-vertex offsets: output vertex i is `c[i] + offsets[i]`. The
/// result keeps the input ordering; it is not re-canonicalized.
pub fn expand(c: &Contour, offsets: &[Point]) -> Result<Contour> {
    if offsets.len() != c.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} offsets", c.n()),
            got: format!("{}", offsets.len()),
        });
    }
    Ok(Contour::from_points(
        c.points()
            .iter()
            .zip(offsets)
            .map(|(&p, &d)| p + d)
            .collect(),
    ))
}

/// Inference knobs.
#[derive(Clone, Copy, Debug)]
pub struct InferConfig {
    /// Probability threshold for the kernel mask.
    pub threshold: f64,
    /// Kernel components smaller than this many px² are discarded.
    pub min_area: f64,
    /// Samples per contour.
    pub n_vertices: usize,
    /// Expansion passes; between passes the contour is re-sampled.
    pub dce_iterations: usize,
}

impl Default for InferConfig {
    fn default() -> InferConfig {
        InferConfig {
            threshold: 0.5,
            min_area: 4.0,
            n_vertices: 128,
            dce_iterations: 1,
        }
    }
}

/// Detect instances in a probability field: threshold, trace kernel
/// contours, then regress each out to a full boundary. Returns one polygon
/// per surviving kernel (empty map → empty list).
pub fn infer(
    net: &DeformNet,
    field: &SurrogateFeatureField,
    cfg: &InferConfig,
) -> Result<Vec<Polygon>> {
    if cfg.dce_iterations == 0 {
        return Err(Error::InvalidParam {
            name: "dce_iterations",
            reason: "need at least one expansion pass".into(),
        });
    }
    let mask = binarize(&field.map, cfg.threshold)?;
    let origin = Point::new(field.x0, field.y0);
    let mut detections = Vec::new();
    for kernel in extract_kernels(&mask, cfg.min_area) {
        let kernel = kernel.translate(origin);
        let Ok(mut contour) = kernel.sample_and_sort(cfg.n_vertices) else {
            continue;
        };
        for pass in 0..cfg.dce_iterations {
            let feats = featurize(&contour, field, &contour.bbox());
            let offsets = net.forward(&feats)?;
            contour = expand(&contour, &offsets)?;
            if pass + 1 < cfg.dce_iterations {
                // Re-canonicalize so arc positions stay well defined; keep
                // the raw ring when the expansion self-intersects.
                if let Ok(resampled) = contour
                    .to_polygon()
                    .and_then(|p| p.sample_and_sort(cfg.n_vertices))
                {
                    contour = resampled;
                }
            }
        }
        if let Some(polygon) = cleanup_ring(contour.points().to_vec()) {
            detections.push(polygon);
        }
    }
    Ok(detections)
}

/// Turn a raw expanded ring into a simple polygon, cutting self-crossings
/// if needed. `None` when nothing usable remains.
fn cleanup_ring(points: Vec<Point>) -> Option<Polygon> {
    if points.iter().any(|p| !p.is_finite()) {
        return None;
    }
    match Polygon::new(points.clone()) {
        Ok(p) => Some(p),
        Err(_) => {
            let mut ring = points;
            largest_simple_loop(&mut ring);
            ring.dedup_by(|a, b| a.dist(*b) <= 1e-9);
            while ring.len() >= 2 && ring[0].dist(*ring.last().unwrap()) <= 1e-9 {
                ring.pop();
            }
            Polygon::new(ring).ok()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{contour_loss, LossKind};
    use crate::geometry::{polygon_iou, Polygon, ShrinkParams};
    use crate::kernel::{noisy_kernel_oracle, ProbMap};
    use approx::assert_relative_eq;

    fn rect(w: f64, h: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(w, 0.0),
            Point::new(w, h),
            Point::new(0.0, h),
        ])
        .unwrap()
    }

    fn random_features(n: usize, c: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::from_rows(n, c, data)
    }

    #[test]
    fn zero_parameters_give_zero_offsets() {
        let mut net = DeformNet::new(7);
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        let u = random_features(16, FEATURE_CHANNELS, 3);
        for p in net.forward(&u).unwrap() {
            assert_eq!(p, Point::new(0.0, 0.0));
        }
    }

    #[test]
    fn output_shape_matches_input_rows() {
        let net = DeformNet::new(1);
        let u = random_features(128, FEATURE_CHANNELS, 4);
        assert_eq!(net.forward(&u).unwrap().len(), 128);
        let wrong = random_features(16, 5, 4);
        assert!(matches!(
            net.forward(&wrong),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_commutes_with_row_rotation_bitwise() {
        let net = DeformNet::new(42);
        let u = random_features(24, FEATURE_CHANNELS, 9);
        let base = net.forward(&u).unwrap();
        for k in [1usize, 5, 11, 23] {
            let rotated = net.forward(&u.rotated(k)).unwrap();
            for i in 0..24 {
                // Exact equality: the summation order per output row does
                // not depend on the rotation.
                assert_eq!(rotated[i], base[(i + k) % 24], "k={k} row={i}");
            }
        }
    }

    #[test]
    fn parameter_round_trip_is_exact() {
        let net = DeformNet::with_arch(3, 5, 2, 3, 11).unwrap();
        let flat = net.params();
        assert_eq!(flat.len(), net.param_count());
        let mut other = DeformNet::with_arch(3, 5, 2, 3, 99).unwrap();
        other.set_params(&flat).unwrap();
        assert_eq!(other, net);
        assert!(other.set_params(&flat[1..]).is_err());
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let net = DeformNet::with_arch(3, 5, 2, 3, 2024).unwrap();
        let n = 6;
        let u = random_features(n, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let upstream: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let objective = |net: &DeformNet, u: &FeatureMatrix| -> f64 {
            net.forward(u)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(o, g)| o.x * g.x + o.y * g.y)
                .sum()
        };
        let (trace, _) = net.forward_traced(&u).unwrap();
        let (param_grads, input_grads) = net.backward(&trace, &upstream).unwrap();

        let h = 1e-5;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-7 {
                assert!(
                    (analytic - numeric).abs() / denom < 1e-3,
                    "{what}: analytic {analytic} vs numeric {numeric}"
                );
            } else {
                assert!((analytic - numeric).abs() < 1e-7, "{what}");
            }
        };

        let flat = net.params();
        let mut probe = net.clone();
        for k in (0..flat.len()).step_by(7) {
            let mut plus = flat.clone();
            plus[k] += h;
            probe.set_params(&plus).unwrap();
            let up = objective(&probe, &u);
            let mut minus = flat.clone();
            minus[k] -= h;
            probe.set_params(&minus).unwrap();
            let down = objective(&probe, &u);
            check(param_grads[k], (up - down) / (2.0 * h), &format!("param {k}"));
        }

        for k in (0..u.data().len()).step_by(3) {
            let mut plus = u.data().to_vec();
            plus[k] += h;
            let up = objective(&net, &FeatureMatrix::from_rows(n, 3, plus));
            let mut minus = u.data().to_vec();
            minus[k] -= h;
            let down = objective(&net, &FeatureMatrix::from_rows(n, 3, minus));
            check(input_grads[k], (up - down) / (2.0 * h), &format!("input {k}"));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DeformNet::with_arch(4, 6, 3, 5, 8).unwrap();
        let u = random_features(10, 4, 1);
        let (trace, _) = net.forward_traced(&u).unwrap();
        let zeros = vec![Point::new(0.0, 0.0); 10];
        let (pg, ig) = net.backward(&trace, &zeros).unwrap();
        assert!(pg.iter().all(|&g| g == 0.0));
        assert!(ig.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn expand_applies_offsets_elementwise() {
        let c = Contour::from_points(vec![
            Point::new(1.0, 2.0),
            Point::new(3.0, 4.0),
            Point::new(5.0, 0.0),
        ]);
        let same = expand(&c, &[Point::new(0.0, 0.0); 3]).unwrap();
        assert_eq!(same, c);
        let moved = expand(&c, &[Point::new(2.0, 3.0); 3]).unwrap();
        assert_eq!(moved.points()[2], Point::new(7.0, 3.0));
        assert!(matches!(
            expand(&c, &[Point::new(0.0, 0.0); 2]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn perfect_offsets_close_the_loss() {
        let boundary = rect(100.0, 40.0).translate(Point::new(10.0, 20.0));
        let margin = boundary.shrink_margin(0.4).unwrap();
        let kernel = boundary.offset(-margin).unwrap();
        let p = kernel.sample_and_sort(64).unwrap();
        let g = boundary.sample_and_sort(64).unwrap();
        let offsets: Vec<Point> = g
            .points()
            .iter()
            .zip(p.points())
            .map(|(&gp, &pp)| gp - pp)
            .collect();
        let expanded = expand(&p, &offsets).unwrap();
        let loss = contour_loss(LossKind::Obgml, &expanded, &g).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn blank_map_yields_no_detections() {
        let net = DeformNet::new(0);
        let field = SurrogateFeatureField::full(ProbMap::new(32, 32));
        let out = infer(&net, &field, &InferConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn zero_net_inference_returns_the_kernel_polygon() {
        let boundary = rect(100.0, 40.0).translate(Point::new(14.0, 30.0));
        let shrink = ShrinkParams::derive(&boundary, 0.4).unwrap();
        let field = noisy_kernel_oracle(&boundary, shrink, 0.0, 1).unwrap();
        let mut net = DeformNet::new(0);
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        let out = infer(&net, &field, &InferConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        // Offsets are all zero, so the detection is the kernel ring itself:
        // a 76 x 16 rectangle against the 100 x 40 ground truth.
        let kernel = boundary.offset(-shrink.margin).unwrap();
        let iou = polygon_iou(&out[0], &kernel, 4);
        assert!(iou > 0.98, "iou {iou}");
        let vs_gt = polygon_iou(&out[0], &boundary, 4);
        assert_relative_eq!(vs_gt, 1216.0 / 4000.0, epsilon = 0.01);
        // Multiple expansion passes stay supported.
        let two = infer(
            &net,
            &field,
            &InferConfig {
                dce_iterations: 2,
                ..InferConfig::default()
            },
        )
        .unwrap();
        assert_eq!(two.len(), 1);
    }
}
