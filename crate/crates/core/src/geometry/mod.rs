//! Planar geometry in image coordinates (x right, y down, units of pixels).
//!
//! The canonical contour orientation throughout the crate is *clockwise as it
//! appears on screen*, which under the y-down shoelace convention used here
//! corresponds to non-positive signed area.

mod iou;
mod offset;
mod sample;

pub use iou::polygon_iou;
pub use offset::estimate_expansion_margin;
pub(crate) use offset::largest_simple_loop;
pub use sample::{sample_and_sort, Contour};

use crate::error::{Error, Result};
use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::{Add, Mul, Neg, Sub};

/// A point or 2-vector in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    #[inline]
    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3-D cross product of two in-plane vectors.
    #[inline]
    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    #[inline]
    pub fn dist_sq(self, other: Point) -> f64 {
        (self - other).norm_sq()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Axis-aligned bounding box. Always has positive extent for a valid polygon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    /// Tight box around a non-empty point set.
    pub fn of_points(points: &[Point]) -> BoundingBox {
        debug_assert!(!points.is_empty());
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        BoundingBox {
            x0,
            y0,
            width: x1 - x0,
            height: y1 - y0,
        }
    }

    /// Upper-left corner, the phase anchor for contour sampling.
    pub fn upper_left(&self) -> Point {
        Point::new(self.x0, self.y0)
    }

    pub fn x1(&self) -> f64 {
        self.x0 + self.width
    }

    pub fn y1(&self) -> f64 {
        self.y0 + self.height
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1() && p.y >= self.y0 && p.y <= self.y1()
    }

    /// Do two boxes overlap once each is grown by `pad` on every side?
    pub fn intersects_padded(&self, other: &BoundingBox, pad: f64) -> bool {
        self.x0 - pad < other.x1() + pad
            && other.x0 - pad < self.x1() + pad
            && self.y0 - pad < other.y1() + pad
            && other.y0 - pad < self.y1() + pad
    }
}

/// Shrink parameters tying a ratio to the margin it produces on a polygon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkParams {
    pub ratio: f64,
    pub margin: f64,
}

impl ShrinkParams {
    /// Derive the margin `A * (1 - ratio^2) / L` for a given polygon.
    pub fn derive(p: &Polygon, ratio: f64) -> Result<ShrinkParams> {
        Ok(ShrinkParams {
            ratio,
            margin: p.shrink_margin(ratio)?,
        })
    }
}

/// A simple (non-self-intersecting) polygon with at least three vertices.
///
/// Construction validates the invariants once; every function that consumes a
/// `Polygon` may then assume them.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

/// Tolerance for coincident-vertex and degenerate-area checks, in pixels.
pub(crate) const GEOM_EPS: f64 = 1e-9;

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Polygon> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidPolygon("non-finite vertex".into()));
        }
        let n = vertices.len();
        for i in 0..n {
            if vertices[i].dist(vertices[(i + 1) % n]) <= GEOM_EPS {
                return Err(Error::InvalidPolygon(format!(
                    "consecutive vertices {} and {} coincide",
                    i,
                    (i + 1) % n
                )));
            }
        }
        let poly = Polygon { vertices };
        if poly.area() <= GEOM_EPS {
            return Err(Error::InvalidPolygon("degenerate (zero area)".into()));
        }
        if let Some((i, j)) = poly.find_self_intersection() {
            return Err(Error::InvalidPolygon(format!(
                "edges {i} and {j} intersect"
            )));
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least 3 vertices
    }

    /// Signed area under the y-down shoelace convention: clockwise contours
    /// (as drawn on screen) come out non-positive.
    pub fn signed_area(&self) -> f64 {
        signed_ring_area(&self.vertices)
    }

    /// Absolute enclosed area in px^2.
    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn is_clockwise(&self) -> bool {
        self.signed_area() < 0.0
    }

    /// Boundary length in px.
    pub fn perimeter(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| self.vertices[i].dist(self.vertices[(i + 1) % n]))
            .sum()
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::of_points(&self.vertices)
    }

    /// Margin of the kernel shrink rule, `A * (1 - ratio^2) / L`.
    ///
    /// `ratio` must lie in (0, 1]; at exactly 1 the margin is 0 (no shrink).
    pub fn shrink_margin(&self, ratio: f64) -> Result<f64> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidParam {
                name: "ratio",
                reason: format!("must be in (0, 1], got {ratio}"),
            });
        }
        let perimeter = self.perimeter();
        if perimeter <= GEOM_EPS {
            return Err(Error::InvalidPolygon("degenerate perimeter".into()));
        }
        Ok(self.area() * (1.0 - ratio * ratio) / perimeter)
    }

    /// Rigid translation. Validity is preserved, so this cannot fail.
    pub fn translate(&self, d: Point) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|&p| p + d).collect(),
        }
    }

    /// First pair of non-adjacent edges that cross or touch, if any.
    fn find_self_intersection(&self) -> Option<(usize, usize)> {
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            for j in (i + 1)..n {
                // Skip edges sharing a vertex with edge i.
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let c = self.vertices[j];
                let d = self.vertices[(j + 1) % n];
                if segments_touch(a, b, c, d) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Minimum distance from a point to the polygon boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            best = best.min(point_segment_distance(p, a, b));
        }
        best
    }
}

/// Signed shoelace area of an arbitrary closed ring (y-down convention; see
/// [`Polygon::signed_area`]).
pub(crate) fn signed_ring_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += (b.x - a.x) * (b.y + a.y);
    }
    0.5 * acc
}

pub(crate) fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let denom = ab.norm_sq();
    let t = if denom > 0.0 {
        ((p - a).dot(ab) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(a + ab * t)
}

/// Symmetric vertex-to-boundary distance between two polygons. For polygons
/// that are near-duplicates of each other (the only way the crate uses it)
/// this coincides with the Hausdorff distance.
pub fn hausdorff_distance(a: &Polygon, b: &Polygon) -> f64 {
    let d_ab = a
        .vertices()
        .iter()
        .map(|&p| b.boundary_distance(p))
        .fold(0.0f64, f64::max);
    let d_ba = b
        .vertices()
        .iter()
        .map(|&p| a.boundary_distance(p))
        .fold(0.0f64, f64::max);
    d_ab.max(d_ba)
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment_collinear(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - GEOM_EPS
        && p.x <= a.x.max(b.x) + GEOM_EPS
        && p.y >= a.y.min(b.y) - GEOM_EPS
        && p.y <= a.y.max(b.y) + GEOM_EPS
}

/// True when segments (a, b) and (c, d) cross or touch anywhere.
pub(crate) fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > GEOM_EPS && d2 < -GEOM_EPS) || (d1 < -GEOM_EPS && d2 > GEOM_EPS))
        && ((d3 > GEOM_EPS && d4 < -GEOM_EPS) || (d3 < -GEOM_EPS && d4 > GEOM_EPS))
    {
        return true;
    }
    (d1.abs() <= GEOM_EPS && on_segment_collinear(c, d, a))
        || (d2.abs() <= GEOM_EPS && on_segment_collinear(c, d, b))
        || (d3.abs() <= GEOM_EPS && on_segment_collinear(a, b, c))
        || (d4.abs() <= GEOM_EPS && on_segment_collinear(a, b, d))
}

/// Proper (interior) crossing point of two segments, if one exists.
pub(crate) fn proper_intersection(a: Point, b: Point, c: Point, d: Point) -> Option<Point> {
    let r = b - a;
    let s = d - c;
    let denom = r.cross(s);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (c - a).cross(s) / denom;
    let u = (c - a).cross(r) / denom;
    const T_EPS: f64 = 1e-9;
    if t > T_EPS && t < 1.0 - T_EPS && u > T_EPS && u < 1.0 - T_EPS {
        Some(a + r * t)
    } else {
        None
    }
}

// Polygons serialize as a flat [x0, y0, x1, y1, ...] array so dataset and
// prediction records stay compact and language-neutral.
impl Serialize for Polygon {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.vertices.len() * 2))?;
        for p in &self.vertices {
            seq.serialize_element(&p.x)?;
            seq.serialize_element(&p.y)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Polygon {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct FlatVisitor;
        impl<'de> Visitor<'de> for FlatVisitor {
            type Value = Polygon;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a flat [x, y, x, y, ...] coordinate array")
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Polygon, A::Error> {
                let mut flat: Vec<f64> = Vec::new();
                while let Some(v) = seq.next_element::<f64>()? {
                    flat.push(v);
                }
                if flat.len() % 2 != 0 {
                    return Err(serde::de::Error::custom("odd coordinate count"));
                }
                let pts = flat
                    .chunks_exact(2)
                    .map(|c| Point::new(c[0], c[1]))
                    .collect();
                Polygon::new(pts).map_err(serde::de::Error::custom)
            }
        }
        deserializer.deserialize_seq(FlatVisitor)
    }
}

#[cfg(test)]
pub(crate) fn rect(x0: f64, y0: f64, w: f64, h: f64) -> Polygon {
    Polygon::new(vec![
        Point::new(x0, y0),
        Point::new(x0 + w, y0),
        Point::new(x0 + w, y0 + h),
        Point::new(x0, y0 + h),
    ])
    .expect("axis-aligned rectangle is always valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square10() -> Polygon {
        rect(0.0, 0.0, 10.0, 10.0)
    }

    #[test]
    fn shoelace_area() {
        assert_eq!(rect(0.0, 0.0, 1.0, 1.0).area(), 1.0);
        // 3-4-5 right triangle: area = 0.5 * 4 * 3
        let tri = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(0.0, 3.0),
        ])
        .unwrap();
        assert_eq!(tri.area(), 6.0);
        // Orientation must not change the absolute area.
        let tri_rev = Polygon::new(vec![
            Point::new(0.0, 3.0),
            Point::new(4.0, 0.0),
            Point::new(0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(tri_rev.area(), 6.0);
    }

    #[test]
    fn clockwise_sign_convention() {
        // (0,0)->(10,0)->(10,10)->(0,10) is clockwise on a y-down screen.
        let sq = square10();
        assert!(sq.signed_area() < 0.0);
        assert!(sq.is_clockwise());
        let ccw = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(0.0, 10.0),
            Point::new(10.0, 10.0),
            Point::new(10.0, 0.0),
        ])
        .unwrap();
        assert!(ccw.signed_area() > 0.0);
        assert!(!ccw.is_clockwise());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).is_err());
        // Coincident consecutive vertices.
        assert!(Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
        ])
        .is_err());
        // All vertices collinear: zero area.
        assert!(Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
        ])
        .is_err());
        // Bowtie self-intersection.
        assert!(Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(10.0, 0.0),
            Point::new(0.0, 10.0),
        ])
        .is_err());
        assert!(Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(f64::NAN, 0.0),
            Point::new(1.0, 1.0),
        ])
        .is_err());
    }

    #[test]
    fn shrink_margin_values() {
        // 100x100 square at ratio 0.4: 10000 * 0.84 / 400.
        let sq = rect(0.0, 0.0, 100.0, 100.0);
        assert_eq!(sq.shrink_margin(0.4).unwrap(), 21.0);
        // 100x40 rectangle: 4000 * 0.84 / 280.
        let r = rect(0.0, 0.0, 100.0, 40.0);
        assert_eq!(r.shrink_margin(0.4).unwrap(), 12.0);
        // No shrink at ratio 1.
        assert_eq!(sq.shrink_margin(1.0).unwrap(), 0.0);
        assert!(sq.shrink_margin(0.0).is_err());
        assert!(sq.shrink_margin(1.5).is_err());
        assert!(sq.shrink_margin(-0.4).is_err());
    }

    #[test]
    fn bbox_basics() {
        let tri = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(0.0, 3.0),
        ])
        .unwrap();
        let bb = tri.bbox();
        assert_eq!((bb.x0, bb.y0, bb.width, bb.height), (0.0, 0.0, 4.0, 3.0));

        let moved = tri.translate(Point::new(7.0, -2.0));
        let mb = moved.bbox();
        assert_eq!((mb.x0, mb.y0, mb.width, mb.height), (7.0, -2.0, 4.0, 3.0));
        assert!(bb.width > 0.0 && bb.height > 0.0);
    }

    #[test]
    fn hausdorff_of_identical_is_zero() {
        let a = square10();
        let b = square10();
        assert_eq!(hausdorff_distance(&a, &b), 0.0);
        let shifted = a.translate(Point::new(0.5, 0.0));
        assert_relative_eq!(hausdorff_distance(&a, &shifted), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn polygon_flat_serde_round_trip() {
        let p = rect(1.5, 2.5, 30.0, 12.0);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, "[1.5,2.5,31.5,2.5,31.5,14.5,1.5,14.5]");
        let back: Polygon = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        // Invalid flat arrays are rejected at parse time.
        assert!(serde_json::from_str::<Polygon>("[0.0,0.0,1.0,0.0]").is_err());
        assert!(serde_json::from_str::<Polygon>("[0.0,0.0,1.0]").is_err());
    }
}
