//! Rasterized polygon IoU.
//!
//! Both rings are sampled on the same regular sub-pixel grid over the union
//! of their bounding boxes; IoU is the ratio of jointly covered to overall
//! covered sample points. Even-odd scanline crossings make this robust to
//! self-touching prediction rings as well.

use super::{BoundingBox, Point, Polygon};

/// Intersection-over-union of two polygons, rasterized at `supersample`
/// sample points per pixel edge (4 is the pipeline default, error bound
/// roughly 2/supersample relative for pixel-scale shapes).
pub fn polygon_iou(a: &Polygon, b: &Polygon, supersample: u32) -> f64 {
    ring_iou(a.vertices(), b.vertices(), supersample)
}

pub(crate) fn ring_iou(a: &[Point], b: &[Point], supersample: u32) -> f64 {
    let ss = supersample.max(1);
    if a.len() < 3 || b.len() < 3 {
        return 0.0;
    }
    let ba = BoundingBox::of_points(a);
    let bb = BoundingBox::of_points(b);
    if !ba.intersects_padded(&bb, 0.0) {
        return 0.0;
    }
    let x0 = ba.x0.min(bb.x0).floor();
    let y0 = ba.y0.min(bb.y0).floor();
    let x1 = ba.x1().max(bb.x1()).ceil();
    let y1 = ba.y1().max(bb.y1()).ceil();
    let step = 1.0 / ss as f64;
    let cols = ((x1 - x0) * ss as f64).round() as usize;
    let rows = ((y1 - y0) * ss as f64).round() as usize;

    let mut count_a = 0u64;
    let mut count_b = 0u64;
    let mut count_both = 0u64;
    let mut xs_a: Vec<f64> = Vec::new();
    let mut xs_b: Vec<f64> = Vec::new();
    for row in 0..rows {
        let y = y0 + (row as f64 + 0.5) * step;
        scan_crossings(a, y, &mut xs_a);
        scan_crossings(b, y, &mut xs_b);
        if xs_a.is_empty() && xs_b.is_empty() {
            continue;
        }
        let mut ia = 0usize;
        let mut ib = 0usize;
        for col in 0..cols {
            let x = x0 + (col as f64 + 0.5) * step;
            while ia < xs_a.len() && xs_a[ia] <= x {
                ia += 1;
            }
            while ib < xs_b.len() && xs_b[ib] <= x {
                ib += 1;
            }
            let in_a = ia % 2 == 1;
            let in_b = ib % 2 == 1;
            count_a += in_a as u64;
            count_b += in_b as u64;
            count_both += (in_a && in_b) as u64;
        }
    }
    let union = count_a + count_b - count_both;
    if union == 0 {
        return 0.0;
    }
    count_both as f64 / union as f64
}

/// Even-odd crossings of the horizontal line at `y`, sorted ascending. The
/// half-open vertex rule (an edge covers y0 <= y < y1) guarantees an even
/// crossing count.
fn scan_crossings(ring: &[Point], y: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = ring.len();
    for i in 0..n {
        let p = ring[i];
        let q = ring[(i + 1) % n];
        if (p.y <= y && q.y > y) || (q.y <= y && p.y > y) {
            out.push(p.x + (y - p.y) * (q.x - p.x) / (q.y - p.y));
        }
    }
    out.sort_unstable_by(|u, v| u.partial_cmp(v).unwrap());
}

#[cfg(test)]
mod tests {
    use super::super::rect;
    use super::*;

    #[test]
    fn identical_polygons_have_iou_one() {
        let a = rect(0.0, 0.0, 10.0, 10.0);
        assert_eq!(polygon_iou(&a, &a, 4), 1.0);
    }

    #[test]
    fn disjoint_polygons_have_iou_zero() {
        let a = rect(0.0, 0.0, 10.0, 10.0);
        let b = rect(20.0, 0.0, 10.0, 10.0);
        assert_eq!(polygon_iou(&a, &b, 4), 0.0);
    }

    #[test]
    fn half_overlapping_squares() {
        // 10x10 squares overlapping in a 10x5 strip: IoU = 50 / 150.
        let a = rect(0.0, 0.0, 10.0, 10.0);
        let b = rect(0.0, 5.0, 10.0, 10.0);
        let iou = polygon_iou(&a, &b, 4);
        assert!((iou - 1.0 / 3.0).abs() < 0.01, "iou = {iou}");
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = rect(0.0, 0.0, 30.0, 12.0);
        let b = rect(7.5, 3.25, 30.0, 12.0);
        assert_eq!(polygon_iou(&a, &b, 4), polygon_iou(&b, &a, 4));
    }

    #[test]
    fn matches_analytic_rectangle_overlap() {
        // Axis-aligned rectangle pairs have a closed-form IoU to check the
        // rasterization against.
        let cases = [
            ((0.0, 0.0, 10.0, 10.0), (5.0, 5.0, 10.0, 10.0)),
            ((0.0, 0.0, 20.0, 8.0), (3.0, 2.0, 20.0, 8.0)),
            ((1.25, 0.5, 14.0, 9.0), (2.75, 3.0, 10.0, 11.0)),
            ((0.0, 0.0, 6.0, 6.0), (6.5, 0.0, 6.0, 6.0)),
        ];
        for ((ax, ay, aw, ah), (bx, by, bw, bh)) in cases {
            let a = rect(ax, ay, aw, ah);
            let b = rect(bx, by, bw, bh);
            let ix = (ax + aw).min(bx + bw) - ax.max(bx);
            let iy = (ay + ah).min(by + bh) - ay.max(by);
            let inter = ix.max(0.0) * iy.max(0.0);
            let expect = inter / (aw * ah + bw * bh - inter);
            let ss = 4;
            let got = polygon_iou(&a, &b, ss);
            assert!(
                (got - expect).abs() <= 2.0 / ss as f64,
                "got {got}, expect {expect}"
            );
        }
    }

    #[test]
    fn kernel_versus_boundary_rectangle() {
        // A 100x40 instance shrunk by its margin 12 gives a 76x16 kernel;
        // the kernel is nested, so IoU = 1216/4000.
        let gt = rect(0.0, 0.0, 100.0, 40.0);
        let kernel = rect(12.0, 12.0, 76.0, 16.0);
        let iou = polygon_iou(&gt, &kernel, 4);
        assert!((iou - 0.304).abs() < 0.005, "iou = {iou}");
    }
}
