//! The delay window `[-r, 0]`: a uniform grid of nodes and the segment
//! (history window) values living on it.

use crate::error::{Error, Result};
use crate::linalg;

/// Uniform grid on `[-r, 0]` with nodes `theta_i = -r + i*dt`, `i = 0..=n`,
/// where `n*dt = r` to within a couple of ulp.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGrid {
    r: f64,
    dt: f64,
    n: usize,
}

impl SegmentGrid {
    pub fn new(r: f64, dt: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::config(
                "grid.r",
                format!("delay must be positive, got {r}"),
            ));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config(
                "grid.dt",
                format!("step must be positive, got {dt}"),
            ));
        }
        let n = (r / dt).round();
        if n < 1.0 {
            return Err(Error::config(
                "grid.dt",
                format!("step {dt} exceeds delay {r}; need at least one node spacing"),
            ));
        }
        if (n * dt - r).abs() > 4.0 * f64::EPSILON * r.max(1.0) {
            return Err(Error::config(
                "grid.dt",
                format!(
                    "step {dt} does not divide delay {r} exactly (n*dt = {})",
                    n * dt
                ),
            ));
        }
        Ok(SegmentGrid {
            r,
            dt,
            n: n as usize,
        })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of spacings; the grid has `n + 1` nodes.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_nodes(&self) -> usize {
        self.n + 1
    }

    /// Node location `theta_i = -r + i*dt`, exact at both endpoints.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n);
        if i == self.n {
            0.0
        } else {
            -self.r + i as f64 * self.dt
        }
    }

    /// Index of a grid-aligned offset `theta` in `[-r, 0]`.
    pub fn index_of_offset(&self, theta: f64) -> Result<usize> {
        if theta < -self.r - 1e-12 || theta > 1e-12 {
            return Err(Error::config(
                "offset",
                format!("offset {theta} outside [-{}, 0]", self.r),
            ));
        }
        let idx = (theta + self.r) / self.dt;
        let rounded = idx.round();
        if (idx - rounded).abs() > 1e-9 * (self.n as f64).max(1.0) {
            return Err(Error::config(
                "offset",
                format!(
                    "offset {theta} is not aligned with the grid step {}",
                    self.dt
                ),
            ));
        }
        Ok((rounded as usize).min(self.n))
    }
}

/// A discretised function on `[-r, 0]` with a d-vector value per node.
/// Values are stored node-major: node `i` occupies `values[i*d .. (i+1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    grid: SegmentGrid,
    d: usize,
    values: Vec<f64>,
}

impl Segment {
    pub fn new(grid: SegmentGrid, d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("segment.d", "dimension must be at least 1"));
        }
        if values.len() != grid.num_nodes() * d {
            return Err(Error::config(
                "segment.values",
                format!(
                    "expected {} values ({} nodes x d={}), got {}",
                    grid.num_nodes() * d,
                    grid.num_nodes(),
                    d,
                    values.len()
                ),
            ));
        }
        Ok(Segment { grid, d, values })
    }

    /// Segment that is constant in time.
    pub fn constant(grid: SegmentGrid, value: &[f64]) -> Result<Self> {
        let nodes = grid.num_nodes();
        let mut values = Vec::with_capacity(nodes * value.len());
        for _ in 0..nodes {
            values.extend_from_slice(value);
        }
        Segment::new(grid, value.len(), values)
    }

    /// Segment sampled from a function of the offset theta.
    pub fn from_fn<F: FnMut(f64) -> Vec<f64>>(
        grid: SegmentGrid,
        d: usize,
        mut f: F,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.num_nodes() * d);
        for i in 0..grid.num_nodes() {
            let v = f(grid.node(i));
            assert_eq!(v.len(), d, "segment sampler returned wrong dimension");
            values.extend_from_slice(&v);
        }
        Segment::new(grid, d, values)
    }

    pub fn grid(&self) -> &SegmentGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.d..(i + 1) * self.d]
    }

    /// Value at the right endpoint theta = 0 (the current state).
    pub fn head(&self) -> &[f64] {
        self.node(self.grid.n)
    }

    /// Value at the left endpoint theta = -r.
    pub fn tail(&self) -> &[f64] {
        self.node(0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Evaluate at an arbitrary offset in `[-r, 0]` by linear interpolation
    /// between the two neighbouring nodes.
    pub fn value_at(&self, theta: f64) -> Result<Vec<f64>> {
        if theta < -self.grid.r - 1e-12 || theta > 1e-12 {
            return Err(Error::config(
                "offset",
                format!("offset {theta} outside [-{}, 0]", self.grid.r),
            ));
        }
        let pos = ((theta + self.grid.r) / self.grid.dt).clamp(0.0, self.grid.n as f64);
        let lo = pos.floor() as usize;
        if lo >= self.grid.n {
            return Ok(self.node(self.grid.n).to_vec());
        }
        let w = pos - lo as f64;
        let a = self.node(lo);
        let b = self.node(lo + 1);
        Ok(a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect())
    }

    /// Shift the window one step left and append `state` at theta = 0.
    /// This is the discrete segment-process update x_{t} -> x_{t+dt}.
    pub fn push(&mut self, state: &[f64]) {
        debug_assert_eq!(state.len(), self.d);
        self.values.copy_within(self.d.., 0);
        let start = self.grid.n * self.d;
        self.values[start..].copy_from_slice(state);
    }
}

/// Discrete segment sup norm: the maximum over grid nodes of the Euclidean
/// norm of the node value. This under-estimates the continuous-path sup
/// between observation times, so norm-based statistics are always reported
/// together with dt.
pub fn sup_norm(segment: &Segment) -> f64 {
    (0..segment.grid.num_nodes())
        .map(|i| linalg::norm(segment.node(i)))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(r: f64, dt: f64) -> SegmentGrid {
        SegmentGrid::new(r, dt).unwrap()
    }

    #[test]
    fn grid_construction_and_nodes() {
        let g = grid(1.0, 0.5);
        assert_eq!(g.n(), 2);
        assert_eq!(g.node(0), -1.0);
        assert_eq!(g.node(1), -0.5);
        assert_eq!(g.node(2), 0.0);
        // strictly increasing
        for i in 1..=g.n() {
            assert!(g.node(i) > g.node(i - 1));
        }
    }

    #[test]
    fn grid_rejects_bad_steps() {
        assert!(SegmentGrid::new(1.0, 0.3).is_err());
        assert!(SegmentGrid::new(1.0, 2.0).is_err());
        assert!(SegmentGrid::new(0.0, 0.1).is_err());
        assert!(SegmentGrid::new(1.0, -0.1).is_err());
        // dt dividing r through an inexact binary representation still passes
        assert!(SegmentGrid::new(1.0, 0.01).is_ok());
        assert!(SegmentGrid::new(0.5, 0.001).is_ok());
    }

    #[test]
    fn sup_norm_zero_segment() {
        let s = Segment::constant(grid(1.0, 0.25), &[0.0, 0.0]).unwrap();
        assert_eq!(sup_norm(&s), 0.0);
    }

    #[test]
    fn sup_norm_scalar_definition() {
        // d=1, grid on [-1,0] with dt=0.5, values (-1, 0.25, 0.5) -> 1
        let s = Segment::new(grid(1.0, 0.5), 1, vec![-1.0, 0.25, 0.5]).unwrap();
        assert_eq!(sup_norm(&s), 1.0);
    }

    #[test]
    fn sup_norm_euclidean_nodes() {
        // d=2, values {(3,4),(0,1)} -> max(5, 1) = 5
        let s = Segment::new(grid(0.5, 0.5), 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap();
        assert_eq!(sup_norm(&s), 5.0);
    }

    #[test]
    fn push_shifts_window() {
        let mut s = Segment::new(grid(1.0, 0.5), 1, vec![1.0, 2.0, 3.0]).unwrap();
        s.push(&[4.0]);
        assert_eq!(s.values(), &[2.0, 3.0, 4.0]);
        assert_eq!(s.head(), &[4.0]);
        assert_eq!(s.tail(), &[2.0]);
    }

    #[test]
    fn linear_interpolation_between_nodes() {
        let s = Segment::new(grid(1.0, 0.5), 1, vec![0.0, 1.0, 3.0]).unwrap();
        assert_relative_eq!(s.value_at(-0.75).unwrap()[0], 0.5);
        assert_relative_eq!(s.value_at(-0.25).unwrap()[0], 2.0);
        assert_relative_eq!(s.value_at(0.0).unwrap()[0], 3.0);
        assert_relative_eq!(s.value_at(-1.0).unwrap()[0], 0.0);
        assert!(s.value_at(0.5).is_err());
    }

    #[test]
    fn offset_index_alignment() {
        let g = grid(1.0, 0.25);
        assert_eq!(g.index_of_offset(-1.0).unwrap(), 0);
        assert_eq!(g.index_of_offset(-0.5).unwrap(), 2);
        assert_eq!(g.index_of_offset(0.0).unwrap(), 4);
        assert!(g.index_of_offset(-0.3).is_err());
        assert!(g.index_of_offset(0.25).is_err());
    }

    proptest! {
        // sup_norm is a norm: absolute homogeneity and the triangle
        // inequality hold exactly for the discrete max of Euclidean norms.
        #[test]
        fn sup_norm_homogeneity(vals in proptest::collection::vec(-1e3f64..1e3, 10), c in -50f64..50.0) {
            let g = grid(1.0, 0.25);
            let s = Segment::new(g.clone(), 2, vals.clone()).unwrap();
            let scaled = Segment::new(g, 2, vals.iter().map(|v| c * v).collect()).unwrap();
            let lhs = sup_norm(&scaled);
            let rhs = c.abs() * sup_norm(&s);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }

        #[test]
        fn sup_norm_triangle(a in proptest::collection::vec(-1e3f64..1e3, 10),
                             b in proptest::collection::vec(-1e3f64..1e3, 10)) {
            let g = grid(1.0, 0.25);
            let sa = Segment::new(g.clone(), 2, a.clone()).unwrap();
            let sb = Segment::new(g.clone(), 2, b.clone()).unwrap();
            let sum = Segment::new(g, 2, a.iter().zip(&b).map(|(x, y)| x + y).collect()).unwrap();
            prop_assert!(sup_norm(&sum) <= sup_norm(&sa) + sup_norm(&sb) + 1e-9);
        }

        #[test]
        fn sup_norm_zero_iff_zero(vals in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let g = grid(1.0, 0.5);
            let s = Segment::new(g, 2, vals.clone()).unwrap();
            let is_zero = vals.iter().all(|&v| v == 0.0);
            prop_assert_eq!(sup_norm(&s) == 0.0, is_zero);
        }
    }
}
