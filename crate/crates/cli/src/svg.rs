//! Deterministic SVG rendering of a scene: ground truth in yellow, detected
//! contours in green, kernels dashed, and red arrows showing which target
//! vertex each predicted vertex is paired with under the selected loss.

use anyhow::{Context, Result};
use dke_core::{cost_matrix, hungarian, polygon_iou, Contour, LossKind, Point, Polygon, SynthScene};
use std::fmt::Write as _;

const GT_COLOR: &str = "#FFC000";
const PRED_COLOR: &str = "#70AD47";
const KERNEL_COLOR: &str = "#888888";
const ARROW_COLOR: &str = "#FF0000";

/// Render one scene. Arrows pair each prediction's sampled ring with the
/// sampled boundary of the ground-truth instance it overlaps most.
pub fn render_scene(
    scene: &SynthScene,
    preds: &[Polygon],
    loss: LossKind,
    n_vertices: usize,
) -> Result<String> {
    let mut out = String::new();
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n",
        w = scene.width,
        h = scene.height,
    )?;
    out.push_str(
        "<defs><marker id=\"tip\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" \
         orient=\"auto\"><path d=\"M0,0 L6,3 L0,6 Z\" fill=\"#FF0000\"/></marker></defs>\n",
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for inst in &scene.instances {
        polygon_path(&mut out, &inst.boundary, GT_COLOR, 1.5, None)?;
        polygon_path(&mut out, &inst.kernel, KERNEL_COLOR, 1.0, Some("4 3"))?;
    }
    for pred in preds {
        polygon_path(&mut out, pred, PRED_COLOR, 1.5, None)?;
    }
    for pred in preds {
        if let Some(target) = closest_instance(pred, scene) {
            arrows(&mut out, pred, target, loss, n_vertices)?;
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn polygon_path(
    out: &mut String,
    poly: &Polygon,
    color: &str,
    width: f64,
    dash: Option<&str>,
) -> Result<()> {
    let mut d = String::new();
    for (i, p) in poly.vertices().iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        write!(d, "{cmd}{:.2},{:.2} ", p.x, p.y)?;
    }
    d.push('Z');
    let dash_attr = dash
        .map(|d| format!(" stroke-dasharray=\"{d}\""))
        .unwrap_or_default();
    write!(
        out,
        "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"{dash_attr}/>\n",
    )?;
    Ok(())
}

/// The ground-truth boundary this prediction overlaps most (highest IoU, then
/// nearest bounding-box center as the tie-break for disjoint shapes).
fn closest_instance<'a>(pred: &Polygon, scene: &'a SynthScene) -> Option<&'a Polygon> {
    let pb = pred.bbox();
    let center = Point::new(pb.x0 + 0.5 * pb.width, pb.y0 + 0.5 * pb.height);
    let mut best: Option<(&Polygon, f64, f64)> = None;
    for inst in &scene.instances {
        let iou = polygon_iou(pred, &inst.boundary, 2);
        let gb = inst.boundary.bbox();
        let gc = Point::new(gb.x0 + 0.5 * gb.width, gb.y0 + 0.5 * gb.height);
        let dist = center.dist_sq(gc);
        let better = match best {
            None => true,
            Some((_, bi, bd)) => iou > bi || (iou == bi && dist < bd),
        };
        if better {
            best = Some((&inst.boundary, iou, dist));
        }
    }
    best.map(|(poly, _, _)| poly)
}

/// Red arrows from each predicted vertex to the target vertex its loss pairs
/// it with: identity for plain distance matching, per-row nearest neighbour
/// (many-to-one) for the relaxed variant, and the bijective optimal matching
/// otherwise.
fn arrows(
    out: &mut String,
    pred: &Polygon,
    target: &Polygon,
    loss: LossKind,
    n_vertices: usize,
) -> Result<()> {
    let p = pred.sample_and_sort(n_vertices).context("sampling prediction")?;
    let t = target.sample_and_sort(n_vertices).context("sampling target")?;
    let pairs = pairing(loss, &p, &t)?;
    for (i, j) in pairs {
        let a = p.points()[i];
        let b = t.points()[j];
        write!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{ARROW_COLOR}\" \
             stroke-width=\"0.5\" opacity=\"0.6\" marker-end=\"url(#tip)\"/>\n",
            a.x, a.y, b.x, b.y,
        )?;
    }
    Ok(())
}

fn pairing(loss: LossKind, pred: &Contour, target: &Contour) -> Result<Vec<(usize, usize)>> {
    let n = pred.n();
    Ok(match loss {
        LossKind::Dml => (0..n).map(|i| (i, i)).collect(),
        LossKind::Nnml => {
            let m = cost_matrix(pred, target)?;
            (0..n)
                .map(|i| {
                    let mut best = 0;
                    for j in 1..n {
                        if m.get(i, j) < m.get(i, best) {
                            best = j;
                        }
                    }
                    (i, best)
                })
                .collect()
        }
        LossKind::Obgml => hungarian(&cost_matrix(pred, target)?)?.pairs,
    })
}
