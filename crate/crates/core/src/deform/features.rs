//! Per-vertex featurization of a contour over a probability field.

use crate::geometry::{BoundingBox, Contour};
use crate::kernel::SurrogateFeatureField;

/// Channels produced per vertex: probability at the vertex, probability at
/// four probe points two pixels out (+x, +y, -x, -y), relative x and y
/// within the reference box, and the normalized arc position around the ring.
pub const FEATURE_CHANNELS: usize = 8;

/// Distance in px from the vertex to each probe point.
const PROBE_RADIUS: f64 = 2.0;

/// A dense N x C matrix of per-vertex features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    /// Wrap a row-major buffer. Panics if the buffer does not hold exactly
    /// `n * channels` values — callers construct these programmatically.
    pub fn from_rows(n: usize, channels: usize, data: Vec<f64>) -> FeatureMatrix {
        assert_eq!(data.len(), n * channels, "feature buffer shape mismatch");
        FeatureMatrix { n, channels, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, row: usize, channel: usize) -> f64 {
        self.data[row * self.channels + channel]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.channels..(row + 1) * self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows rotated so row `i` of the result is row `(i + k) % n` of self.
    pub fn rotated(&self, k: usize) -> FeatureMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.n {
            data.extend_from_slice(self.row((i + k) % self.n));
        }
        FeatureMatrix::from_rows(self.n, self.channels, data)
    }
}

/// Build the feature matrix for `contour` over `field`, with relative
/// coordinates measured from the upper-left corner of `reference_box` and
/// normalized by its extent (clamped to [0, 1] for points outside it).
pub fn featurize(
    contour: &Contour,
    field: &SurrogateFeatureField,
    reference_box: &BoundingBox,
) -> FeatureMatrix {
    let n = contour.n();
    let mut data = Vec::with_capacity(n * FEATURE_CHANNELS);
    let rel = |d: f64, extent: f64| {
        if extent > 0.0 {
            (d / extent).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };
    for (i, p) in contour.points().iter().enumerate() {
        data.push(field.sample(p.x, p.y));
        data.push(field.sample(p.x + PROBE_RADIUS, p.y));
        data.push(field.sample(p.x, p.y + PROBE_RADIUS));
        data.push(field.sample(p.x - PROBE_RADIUS, p.y));
        data.push(field.sample(p.x, p.y - PROBE_RADIUS));
        data.push(rel(p.x - reference_box.x0, reference_box.width));
        data.push(rel(p.y - reference_box.y0, reference_box.height));
        data.push(i as f64 / n as f64);
    }
    FeatureMatrix::from_rows(n, FEATURE_CHANNELS, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::kernel::ProbMap;

    fn constant_field(value: f64) -> SurrogateFeatureField {
        let map = ProbMap::from_data(16, 16, vec![value; 256]).unwrap();
        SurrogateFeatureField::full(map)
    }

    #[test]
    fn constant_field_fills_the_five_probability_channels() {
        let field = constant_field(1.0);
        let contour = Contour::from_points(vec![
            Point::new(4.0, 4.0),
            Point::new(12.0, 4.0),
            Point::new(12.0, 12.0),
            Point::new(4.0, 12.0),
        ]);
        let feats = featurize(&contour, &field, &contour.bbox());
        assert_eq!((feats.n(), feats.channels()), (4, FEATURE_CHANNELS));
        for i in 0..4 {
            for ch in 0..5 {
                assert_eq!(feats.get(i, ch), 1.0);
            }
        }
    }

    #[test]
    fn relative_coordinates_span_the_reference_box() {
        let field = constant_field(0.5);
        let contour = Contour::from_points(vec![
            Point::new(4.0, 4.0),
            Point::new(12.0, 4.0),
            Point::new(12.0, 12.0),
            Point::new(4.0, 12.0),
        ]);
        let feats = featurize(&contour, &field, &contour.bbox());
        // Upper-left corner of the box.
        assert_eq!((feats.get(0, 5), feats.get(0, 6)), (0.0, 0.0));
        // Lower-right corner.
        assert_eq!((feats.get(2, 5), feats.get(2, 6)), (1.0, 1.0));
        // Mixed corners.
        assert_eq!((feats.get(1, 5), feats.get(1, 6)), (1.0, 0.0));
        assert_eq!((feats.get(3, 5), feats.get(3, 6)), (0.0, 1.0));
    }

    #[test]
    fn arc_positions_step_uniformly() {
        let field = constant_field(0.0);
        let pts: Vec<Point> = (0..8)
            .map(|i| Point::new(i as f64, (i % 3) as f64))
            .collect();
        let contour = Contour::from_points(pts);
        let feats = featurize(&contour, &field, &contour.bbox());
        for i in 0..8 {
            assert_eq!(feats.get(i, 7), i as f64 / 8.0);
        }
    }

    #[test]
    fn points_outside_the_box_clamp_to_the_unit_square() {
        let field = constant_field(0.0);
        let contour = Contour::from_points(vec![
            Point::new(-5.0, -5.0),
            Point::new(30.0, -5.0),
            Point::new(30.0, 30.0),
            Point::new(-5.0, 30.0),
        ]);
        let tight = BoundingBox {
            x0: 0.0,
            y0: 0.0,
            width: 10.0,
            height: 10.0,
        };
        let feats = featurize(&contour, &field, &tight);
        assert_eq!((feats.get(0, 5), feats.get(0, 6)), (0.0, 0.0));
        assert_eq!((feats.get(2, 5), feats.get(2, 6)), (1.0, 1.0));
    }

    #[test]
    fn rotation_permutes_rows() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let m = FeatureMatrix::from_rows(3, 8, data);
        let r = m.rotated(1);
        assert_eq!(r.row(0), m.row(1));
        assert_eq!(r.row(2), m.row(0));
    }
}
