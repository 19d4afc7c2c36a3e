//! Uniform truncation grid on `[-L, L]`.
//!
//! Functions are treated as zero outside the box; the assembled forms are
//! those of the part process on the box, with the exterior jump rate folded
//! into the diagonal as killing.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    half_width: f64,
    n: usize,
}

impl Grid {
    pub fn new(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "grid half-width must be positive, got {half_width}"
            )));
        }
        if n < 16 {
            return Err(Error::InvalidSpec(format!("grid needs n >= 16, got {n}")));
        }
        Ok(Self { half_width, n })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i < self.n);
        -self.half_width + self.spacing() * i as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Outer edge of the union of cells; jumps beyond it are exterior
    /// killing, and the simulator kills paths there to match the forms.
    pub fn outer_bound(&self) -> f64 {
        self.half_width + 0.5 * self.spacing()
    }

    /// Indices of nodes inside the open ball `|x - z| < r`.
    pub fn ball_indices(&self, z: f64, r: f64) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| (self.node(i) - z).abs() < r)
            .collect()
    }

    /// Indices with `|x| >= a`.
    pub fn tail_indices(&self, a: f64) -> Vec<usize> {
        (0..self.n).filter(|&i| self.node(i).abs() >= a).collect()
    }

    /// Linear interpolation of nodal values, zero outside `[-L, L]`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        debug_assert_eq!(values.len(), self.n);
        if x < -self.half_width || x > self.half_width {
            return 0.0;
        }
        let t = (x + self.half_width) / self.spacing();
        let i = (t.floor() as usize).min(self.n - 2);
        let frac = t - i as f64;
        values[i] * (1.0 - frac) + values[i + 1] * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry() {
        let g = Grid::new(10.0, 101).unwrap();
        assert_eq!(g.spacing(), 0.2);
        assert_eq!(g.node(0), -10.0);
        assert_eq!(g.node(100), 10.0);
        assert!((g.node(50) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_grids() {
        assert!(Grid::new(10.0, 15).is_err());
        assert!(Grid::new(-1.0, 100).is_err());
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_zero_outside() {
        let g = Grid::new(2.0, 17).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|x| x.sin()).collect();
        for i in 0..17 {
            assert!((g.interpolate(&vals, g.node(i)) - vals[i]).abs() < 1e-14);
        }
        assert_eq!(g.interpolate(&vals, 2.5), 0.0);
        assert_eq!(g.interpolate(&vals, -2.0001), 0.0);
    }
}
