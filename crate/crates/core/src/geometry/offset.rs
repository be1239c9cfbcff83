//! Parallel polygon offsetting with miter joins.
//!
//! Every edge is translated along its outward normal by the margin, adjacent
//! translated edge lines are intersected to rebuild the joins, and any
//! self-intersections introduced by the translation are resolved by keeping
//! the largest simple loop. Positive margins expand, negative margins shrink
//! toward the kernel.

use super::{
    proper_intersection, signed_ring_area, Error, Point, Polygon, Result, GEOM_EPS,
};

impl Polygon {
    /// Offset the boundary by `margin` px (positive = outward expansion,
    /// negative = inward shrink). Fails with [`Error::PolygonCollapsed`] when
    /// an inward margin consumes the polygon.
    pub fn offset(&self, margin: f64) -> Result<Polygon> {
        if !margin.is_finite() {
            return Err(Error::NonFinite("offset margin"));
        }
        if margin == 0.0 {
            return Ok(self.clone());
        }
        let verts = self.vertices();
        let n = verts.len();
        // Outward normal of edge direction d = (dx, dy): for a clockwise
        // (image coordinates) contour that is (dy, -dx) / |d|.
        let sign = if self.is_clockwise() { 1.0 } else { -1.0 };
        let mut lines: Vec<(Point, Point)> = Vec::with_capacity(n); // (shifted origin, direction)
        for i in 0..n {
            let a = verts[i];
            let d = verts[(i + 1) % n] - a;
            let len = d.norm();
            let outward = Point::new(sign * d.y / len, -sign * d.x / len);
            lines.push((a + outward * margin, d));
        }

        // Rebuild vertex i as the intersection of shifted edges i-1 and i.
        let mut out: Vec<Point> = Vec::with_capacity(n);
        for i in 0..n {
            let (p_prev, d_prev) = lines[(i + n - 1) % n];
            let (p_cur, d_cur) = lines[i];
            let denom = d_prev.cross(d_cur);
            if denom.abs() < 1e-12 * d_prev.norm() * d_cur.norm() {
                // Collinear neighbours: the translated vertex is already the join.
                out.push(p_cur);
            } else {
                let t = (p_cur - p_prev).cross(d_cur) / denom;
                out.push(p_prev + d_prev * t);
            }
        }

        dedupe_ring(&mut out);
        largest_simple_loop(&mut out);
        dedupe_ring(&mut out);

        let result = Polygon::new(out).map_err(|e| {
            if margin < 0.0 {
                Error::PolygonCollapsed { margin }
            } else {
                e
            }
        })?;
        // An offset that flips orientation or moves area the wrong way has
        // eaten the polygon rather than offsetting it.
        let grown = result.area() > self.area();
        if result.is_clockwise() != self.is_clockwise() || grown != (margin > 0.0) {
            return Err(Error::PolygonCollapsed { margin });
        }
        Ok(result)
    }
}

fn dedupe_ring(ring: &mut Vec<Point>) {
    let mut out: Vec<Point> = Vec::with_capacity(ring.len());
    for &p in ring.iter() {
        if out.last().map_or(true, |&q| q.dist(p) > GEOM_EPS) {
            out.push(p);
        }
    }
    while out.len() >= 2 && out[0].dist(*out.last().unwrap()) <= GEOM_EPS {
        out.pop();
    }
    *ring = out;
}

/// Cut crossing loops out of a ring until it is simple, always keeping the
/// side with the larger enclosed area.
pub(crate) fn largest_simple_loop(ring: &mut Vec<Point>) {
    let mut guard = 2 * ring.len() + 16;
    'outer: loop {
        if guard == 0 {
            return; // give up; Polygon::new will reject what is left
        }
        guard -= 1;
        let n = ring.len();
        if n < 4 {
            return;
        }
        for i in 0..n {
            let a = ring[i];
            let b = ring[(i + 1) % n];
            for j in (i + 1)..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let c = ring[j];
                let d = ring[(j + 1) % n];
                if let Some(x) = proper_intersection(a, b, c, d) {
                    // Loop A: x -> v[i+1..=j]; loop B: x -> v[j+1..] ++ v[..=i].
                    let mut loop_a = vec![x];
                    loop_a.extend_from_slice(&ring[i + 1..=j]);
                    let mut loop_b = vec![x];
                    loop_b.extend_from_slice(&ring[j + 1..]);
                    loop_b.extend_from_slice(&ring[..=i]);
                    *ring = if signed_ring_area(&loop_a).abs() >= signed_ring_area(&loop_b).abs() {
                        loop_a
                    } else {
                        loop_b
                    };
                    continue 'outer;
                }
            }
        }
        return;
    }
}

/// Estimate the outward margin that undoes a kernel shrink, given only the
/// kernel. Solves the fixed point `m = A(offset(k, m)) * (1 - r^2) /
/// L(offset(k, m))` by iteration; for a kernel produced by the shrink rule
/// the fixed point is the original margin.
pub fn estimate_expansion_margin(kernel: &Polygon, ratio: f64) -> Result<f64> {
    let mut m = kernel.shrink_margin(ratio)?; // lower bound: margin of the kernel itself
    for _ in 0..60 {
        let expanded = kernel.offset(m)?;
        let next = expanded.shrink_margin(ratio)?;
        if (next - m).abs() <= 1e-10 * m.max(1.0) {
            return Ok(next);
        }
        m = next;
    }
    Ok(m)
}
