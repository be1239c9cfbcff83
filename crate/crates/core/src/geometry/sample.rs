//! Uniform contour sampling with a canonical ordering.
//!
//! Downstream losses compare contours vertex-by-vertex, so every contour must
//! come out of the same canonicalization: clockwise in image coordinates,
//! with vertex 0 at the boundary point nearest the upper-left corner of the
//! polygon's bounding box.

use super::{BoundingBox, Error, Point, Polygon, Result};

/// A fixed-length ring of boundary samples (image coordinates, clockwise,
/// phase-anchored). Unlike [`Polygon`] it carries no simplicity guarantee:
/// expanded contours straight out of the regressor live here too.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    points: Vec<Point>,
}

impl Contour {
    pub fn from_points(points: Vec<Point>) -> Contour {
        Contour { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::of_points(&self.points)
    }

    /// Reinterpret the sample ring as a polygon, revalidating the invariants.
    pub fn into_polygon(self) -> Result<Polygon> {
        Polygon::new(self.points)
    }

    pub fn to_polygon(&self) -> Result<Polygon> {
        Polygon::new(self.points.clone())
    }
}

/// Sample `n` equally spaced points along the boundary of `p` and order them
/// canonically (see module docs). Free-function form of
/// [`Polygon::sample_and_sort`].
pub fn sample_and_sort(p: &Polygon, n: usize) -> Result<Contour> {
    p.sample_and_sort(n)
}

impl Polygon {
    /// See [`sample_and_sort`].
    pub fn sample_and_sort(&self, n: usize) -> Result<Contour> {
        if n < 4 {
            return Err(Error::InvalidParam {
                name: "n",
                reason: format!("need at least 4 samples, got {n}"),
            });
        }
        let mut ring: Vec<Point> = self.vertices().to_vec();
        if !self.is_clockwise() {
            ring.reverse();
        }
        let k = ring.len();

        // Phase anchor: the boundary point nearest the bbox upper-left corner.
        // Ties keep the earliest point in clockwise traversal order.
        let corner = self.bbox().upper_left();
        let mut best_edge = 0usize;
        let mut best_t = 0.0f64;
        let mut best_d2 = f64::INFINITY;
        for i in 0..k {
            let a = ring[i];
            let ab = ring[(i + 1) % k] - a;
            let denom = ab.norm_sq();
            let t = if denom > 0.0 {
                ((corner - a).dot(ab) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d2 = corner.dist_sq(a + ab * t);
            if d2 < best_d2 {
                best_edge = i;
                best_t = t;
                best_d2 = d2;
            }
        }

        let lens: Vec<f64> = (0..k).map(|i| ring[i].dist(ring[(i + 1) % k])).collect();
        let mut cum = Vec::with_capacity(k + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for &l in &lens {
            acc += l;
            cum.push(acc);
        }
        let total = acc;
        let start_arc = cum[best_edge] + best_t * lens[best_edge];
        let step = total / n as f64;

        let mut points = Vec::with_capacity(n);
        for j in 0..n {
            let mut s = (start_arc + j as f64 * step) % total;
            if s >= total {
                s = 0.0;
            }
            // Locate the edge containing arc position s.
            let mut e = match cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
                Ok(idx) => idx,
                Err(idx) => idx - 1,
            };
            if e >= k {
                e = k - 1;
            }
            let local = s - cum[e];
            let t = if lens[e] > 0.0 { local / lens[e] } else { 0.0 };
            let a = ring[e];
            let b = ring[(e + 1) % k];
            points.push(a + (b - a) * t);
        }
        Ok(Contour { points })
    }
}
