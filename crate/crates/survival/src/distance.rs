//! Instance-level Euclidean distances to a reference centroid.

use crate::error::{Result, SurvivalError};

pub const HISTOGRAM_BIN_WIDTH: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    /// Distance of each query instance to the mean reference representation.
    pub distances: Vec<f64>,
    /// Counts per bin `[k * width, (k + 1) * width)`.
    pub histogram: Vec<usize>,
    pub bin_width: f64,
}

impl DistanceMap {
    pub fn bin_range(&self, k: usize) -> (f64, f64) {
        (k as f64 * self.bin_width, (k + 1) as f64 * self.bin_width)
    }
}

fn centroid(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(SurvivalError::Empty)?;
    let width = first.len();
    let mut mean = vec![0.0; width];
    for r in rows {
        if r.len() != width {
            return Err(SurvivalError::WidthMismatch(width, r.len()));
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    Ok(mean)
}

pub fn histogram(values: &[f64], bin_width: f64) -> Vec<usize> {
    let mut bins = Vec::new();
    for &v in values {
        let k = (v.max(0.0) / bin_width).floor() as usize;
        if bins.len() <= k {
            bins.resize(k + 1, 0);
        }
        bins[k] += 1;
    }
    bins
}

pub fn distance_heatmap(reference: &[Vec<f64>], query: &[Vec<f64>]) -> Result<DistanceMap> {
    let center = centroid(reference)?;
    let mut distances = Vec::with_capacity(query.len());
    for q in query {
        if q.len() != center.len() {
            return Err(SurvivalError::WidthMismatch(center.len(), q.len()));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(SurvivalError::NonFinite("query representations"));
        }
        let d2: f64 = q.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
        distances.push(d2.sqrt());
    }
    Ok(DistanceMap {
        histogram: histogram(&distances, HISTOGRAM_BIN_WIDTH),
        distances,
        bin_width: HISTOGRAM_BIN_WIDTH,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_equal_to_single_reference_is_zero() {
        let r = vec![vec![1.0, 2.0, 3.0]];
        let m = distance_heatmap(&r, &r).unwrap();
        assert_eq!(m.distances, vec![0.0]);
        assert_eq!(m.histogram, vec![1]);
    }

    #[test]
    fn single_instance_at_known_distance() {
        let m = distance_heatmap(&[vec![0.0, 0.0]], &[vec![3.0, 4.0], vec![12.0, 9.0]]).unwrap();
        assert_eq!(m.distances, vec![5.0, 15.0]);
        assert_eq!(m.histogram, vec![0, 1, 0, 1]);
        assert_eq!(m.bin_range(3), (15.0, 20.0));
    }

    #[test]
    fn width_mismatch_errors() {
        assert_eq!(
            distance_heatmap(&[vec![0.0, 0.0]], &[vec![1.0]]),
            Err(SurvivalError::WidthMismatch(2, 1))
        );
    }
}
