//! Seeded generation of synthetic "text" scenes and their dataset files.
//!
//! Each scene carries a handful of non-overlapping instances — sinusoidal
//! ribbons standing in for curved text, rotated quads for oriented text —
//! with the ground-truth boundary, the shrunken kernel, and a surrogate
//! probability map attached. Generation is pure per seed, so datasets can be
//! regenerated bit-for-bit from their parameters.

use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon, ShrinkParams};
use crate::kernel::{noisy_kernel_oracle, SurrogateFeatureField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Version stamp written into every dataset record.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Vertices sampled along each side of a ribbon.
const RIBBON_SIDE_SAMPLES: usize = 16;

/// Minimum clearance in px kept between placed instances.
const PLACEMENT_CLEARANCE: f64 = 2.0;

/// Margin in px kept between any instance and the canvas border.
const CANVAS_MARGIN: f64 = 4.0;

/// A sinusoidal ribbon: the centerline `y = amplitude * sin(2*pi*x /
/// wavelength)` over `x` in `[-length/2, length/2]`, extruded by
/// `half_width` along the normal and centered at `center`.
///
/// The phase is centered so the shape is point-symmetric about `center`.
#[derive(Clone, Copy, Debug)]
pub struct RibbonSpec {
    pub center: Point,
    pub length: f64,
    pub amplitude: f64,
    pub wavelength: f64,
    pub half_width: f64,
}

/// An oriented rectangle.
#[derive(Clone, Copy, Debug)]
pub struct QuadSpec {
    pub center: Point,
    pub width: f64,
    pub height: f64,
    /// Rotation in radians, positive turning x towards y (screen-clockwise
    /// flips to counter-clockwise visually because y points down).
    pub rotation: f64,
}

/// One text instance: ground-truth boundary, its kernel, and the surrogate
/// probability map covering it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthInstance {
    pub boundary: Polygon,
    pub kernel: Polygon,
    pub prob: SurrogateFeatureField,
}

/// A generated scene: canvas size, seed, and placed instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub instances: Vec<SynthInstance>,
}

/// Generation knobs beyond the instance count and canvas.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    /// Kernel shrink ratio.
    pub shrink_ratio: f64,
    /// Control-point jitter std for the surrogate maps, in px.
    pub noise: f64,
    /// Give up after this many rejected placements per scene.
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> SceneParams {
        SceneParams {
            shrink_ratio: 0.4,
            noise: 1.0,
            max_attempts: 1000,
        }
    }
}

/// Build the ribbon polygon: `2 * RIBBON_SIDE_SAMPLES` vertices, clockwise
/// in image coordinates.
pub fn make_ribbon(spec: &RibbonSpec) -> Result<Polygon> {
    if !(spec.length > 0.0 && spec.half_width > 0.0 && spec.wavelength > 0.0) {
        return Err(Error::InvalidParam {
            name: "ribbon",
            reason: "length, half_width and wavelength must be positive".into(),
        });
    }
    if spec.amplitude < 0.0 {
        return Err(Error::InvalidParam {
            name: "ribbon",
            reason: "amplitude must be non-negative".into(),
        });
    }
    // The inner offset edge self-intersects when half_width reaches the
    // centerline's curvature radius; stay clear of it.
    let k = 2.0 * std::f64::consts::PI / spec.wavelength;
    let max_curvature = spec.amplitude * k * k;
    if spec.half_width * max_curvature > 0.9 {
        return Err(Error::InvalidParam {
            name: "ribbon",
            reason: format!(
                "half_width {} exceeds 0.9x the minimum curvature radius {:.2}",
                spec.half_width,
                1.0 / max_curvature
            ),
        });
    }

    let m = RIBBON_SIDE_SAMPLES;
    let mut top = Vec::with_capacity(m);
    let mut bottom = Vec::with_capacity(m);
    for i in 0..m {
        let t = -spec.length / 2.0 + spec.length * i as f64 / (m - 1) as f64;
        let y = spec.amplitude * (k * t).sin();
        let slope = spec.amplitude * k * (k * t).cos();
        let inv_norm = 1.0 / (1.0 + slope * slope).sqrt();
        let normal = Point::new(-slope * inv_norm, inv_norm);
        let c = spec.center + Point::new(t, y);
        top.push(c - normal * spec.half_width);
        bottom.push(c + normal * spec.half_width);
    }
    let mut ring = top;
    ring.extend(bottom.into_iter().rev());
    Polygon::new(ring)
}

/// Build the quad polygon, clockwise in image coordinates.
pub fn make_quad(spec: &QuadSpec) -> Result<Polygon> {
    if !(spec.width > 0.0 && spec.height > 0.0) {
        return Err(Error::InvalidParam {
            name: "quad",
            reason: "width and height must be positive".into(),
        });
    }
    let (sin, cos) = spec.rotation.sin_cos();
    let corner = |sx: f64, sy: f64| {
        let x = sx * spec.width / 2.0;
        let y = sy * spec.height / 2.0;
        spec.center + Point::new(x * cos - y * sin, x * sin + y * cos)
    };
    Polygon::new(vec![
        corner(-1.0, -1.0),
        corner(1.0, -1.0),
        corner(1.0, 1.0),
        corner(-1.0, 1.0),
    ])
}

/// Generate one scene: `count` disjoint instances rejection-sampled onto a
/// `canvas_width x canvas_height` canvas, deterministic per `seed`.
pub fn make_scene(
    count: usize,
    canvas_width: usize,
    canvas_height: usize,
    seed: u64,
    params: &SceneParams,
) -> Result<SynthScene> {
    if count == 0 {
        return Err(Error::InvalidParam {
            name: "count",
            reason: "a scene needs at least one instance".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances: Vec<SynthInstance> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while instances.len() < count {
        if attempts >= params.max_attempts {
            return Err(Error::PlacementFailed { attempts });
        }
        attempts += 1;
        let Some(boundary) = propose_instance(&mut rng, canvas_width, canvas_height) else {
            continue;
        };
        let inflated = boundary.bbox();
        let blocked = instances.iter().any(|other| {
            other
                .boundary
                .bbox()
                .intersects_padded(&inflated, PLACEMENT_CLEARANCE)
        });
        if blocked {
            continue;
        }
        let Ok(instance) = build_instance(boundary, params, &mut rng) else {
            continue;
        };
        instances.push(instance);
    }
    Ok(SynthScene {
        format_version: DATASET_FORMAT_VERSION,
        width: canvas_width,
        height: canvas_height,
        seed,
        instances,
    })
}

/// Draw a candidate boundary somewhere on the canvas, or `None` when the
/// draw cannot fit.
fn propose_instance(rng: &mut ChaCha8Rng, canvas_w: usize, canvas_h: usize) -> Option<Polygon> {
    // Shape first (centered at the origin), then a position that keeps its
    // bounding box inside the canvas margin.
    let centered = if rng.gen_bool(0.5) {
        let length = rng.gen_range(80.0..150.0);
        let half_width = rng.gen_range(24.0..34.0);
        let wavelength = rng.gen_range(100.0..200.0);
        let k = 2.0 * std::f64::consts::PI / wavelength;
        let cap = (0.75 * 0.9 / (half_width * k * k)).min(14.0);
        let amplitude = rng.gen_range(0.0..cap);
        make_ribbon(&RibbonSpec {
            center: Point::new(0.0, 0.0),
            length,
            amplitude,
            wavelength,
            half_width,
        })
    } else {
        let width = rng.gen_range(60.0..140.0);
        let height = rng.gen_range(48.0..72.0);
        let rotation = rng.gen_range(-0.45..0.45);
        make_quad(&QuadSpec {
            center: Point::new(0.0, 0.0),
            width,
            height,
            rotation,
        })
    }
    .ok()?;

    let bbox = centered.bbox();
    let x_lo = CANVAS_MARGIN - bbox.x0;
    let x_hi = canvas_w as f64 - CANVAS_MARGIN - bbox.x1();
    let y_lo = CANVAS_MARGIN - bbox.y0;
    let y_hi = canvas_h as f64 - CANVAS_MARGIN - bbox.y1();
    if x_hi <= x_lo || y_hi <= y_lo {
        return None;
    }
    let shift = Point::new(rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi));
    Some(centered.translate(shift))
}

/// Attach the kernel and surrogate map to a placed boundary.
fn build_instance(
    boundary: Polygon,
    params: &SceneParams,
    rng: &mut ChaCha8Rng,
) -> Result<SynthInstance> {
    let shrink = ShrinkParams::derive(&boundary, params.shrink_ratio)?;
    let kernel = boundary.offset(-shrink.margin)?;
    // Contract: every kernel must survive canonical sampling at N = 128.
    kernel.sample_and_sort(128)?;
    let prob = noisy_kernel_oracle(&boundary, shrink, params.noise, rng.gen::<u64>())?;
    Ok(SynthInstance {
        boundary,
        kernel,
        prob,
    })
}

/// Write scenes as line-delimited records.
pub fn write_dataset<P: AsRef<Path>>(path: P, scenes: &[SynthScene]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for scene in scenes {
        serde_json::to_writer(&mut out, scene)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a line-delimited dataset, reporting the first bad line.
pub fn read_dataset<P: AsRef<Path>>(path: P) -> Result<Vec<SynthScene>> {
    let reader = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SynthScene = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if scene.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: scene.format_version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        scenes.push(scene);
    }
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(scenes)
}
