//! Space-time points and axis-aligned boxes.
//!
//! A point lives in `R^N` with the last coordinate designated as time; the
//! first `N-1` coordinates are spatial. Boxes are closed axis-aligned
//! intervals, used both as integration domains and as certified enclosures
//! of L-balls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point z in R^N; the final coordinate is time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub coords: Vec<f64>,
}

impl SpaceTimePoint {
    /// Build a point, rejecting non-finite coordinates.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinitePoint(coords));
        }
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn time(&self) -> f64 {
        *self.coords.last().expect("point has at least one coordinate")
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[..self.coords.len() - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    /// Euclidean norm of the full coordinate vector.
    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn euclidean_distance(&self, other: &Self) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for SpaceTimePoint {
    fn from(coords: Vec<f64>) -> Self {
        Self { coords }
    }
}

/// Closed axis-aligned box: per-axis intervals [lo_i, hi_i].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::InvalidConfig(format!(
                    "box interval [{l}, {h}] is empty or non-finite"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (l, h))| *x >= *l && *x <= *h)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// All 2^N corner points. N is small here (<= 4 for the built-in models).
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut out = Vec::with_capacity(1 << n);
        for mask in 0u32..(1 << n) {
            let corner = (0..n)
                .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                .collect();
            out.push(corner);
        }
        out
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &Self) -> Self {
        let lo = self
            .lo
            .iter()
            .zip(&other.lo)
            .map(|(a, b)| a.min(*b))
            .collect();
        let hi = self
            .hi
            .iter()
            .zip(&other.hi)
            .map(|(a, b)| a.max(*b))
            .collect();
        Self { lo, hi }
    }

    /// Box scaled about its center by `factor` per axis.
    pub fn scaled_about_center(&self, factor: f64) -> Self {
        let c = self.center();
        let lo = c
            .iter()
            .zip(&self.lo)
            .map(|(c, l)| c - factor * (c - l))
            .collect();
        let hi = c
            .iter()
            .zip(&self.hi)
            .map(|(c, h)| c + factor * (h - c))
            .collect();
        Self { lo, hi }
    }

    pub fn shifted(&self, v: &[f64]) -> Self {
        Self {
            lo: self.lo.iter().zip(v).map(|(l, d)| l + d).collect(),
            hi: self.hi.iter().zip(v).map(|(h, d)| h + d).collect(),
        }
    }

    /// True if every point of `self` lies within Euclidean distance `r` of `x`,
    /// certified by checking the corners (the box is their convex hull).
    pub fn inside_euclidean_ball(&self, x: &SpaceTimePoint, r: f64) -> bool {
        self.corners().iter().all(|c| {
            let d2: f64 = c
                .iter()
                .zip(&x.coords)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() <= r
        })
    }

    pub fn max_corner_distance(&self, x: &SpaceTimePoint) -> f64 {
        self.corners()
            .iter()
            .map(|c| {
                c.iter()
                    .zip(&x.coords)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_rejects_non_finite() {
        assert!(SpaceTimePoint::new(vec![0.0, f64::NAN]).is_err());
        assert!(SpaceTimePoint::new(vec![0.0, f64::INFINITY]).is_err());
        assert!(SpaceTimePoint::new(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn box_rejects_inverted_interval() {
        assert!(BoundingBox::new(vec![0.0, 1.0], vec![1.0, 0.5]).is_err());
        assert!(BoundingBox::new(vec![0.0], vec![0.0]).is_ok());
    }

    #[test]
    fn corners_and_containment() {
        let b = BoundingBox::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap();
        assert_eq!(b.corners().len(), 4);
        assert!(b.contains(&[1.0, 0.0]));
        assert!(!b.contains(&[3.0, 0.0]));
        assert_eq!(b.volume(), 4.0);
    }

    #[test]
    fn euclidean_enclosure_via_corners() {
        let b = BoundingBox::new(vec![-0.1, -0.1], vec![0.1, 0.1]).unwrap();
        let x = SpaceTimePoint::new(vec![0.0, 0.0]).unwrap();
        assert!(b.inside_euclidean_ball(&x, 0.2));
        assert!(!b.inside_euclidean_ball(&x, 0.1));
    }
}
