//! Deterministic, stream-splittable Brownian increments.
//!
//! Each trajectory owns a stream keyed by (base seed, trajectory id). The
//! per-trajectory key is derived by mixing the id into the seed with
//! SplitMix64 rather than by sequential splitting, so streams can be created
//! in any order on any number of workers. Gaussian values come from the
//! inverse-CDF transform of one 53-bit uniform per coordinate; together with
//! the ChaCha generator this keeps every draw a pure function of
//! (seed, id, draw index) and bit-identical across platforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::model::splitmix64;
use crate::special::inv_std_normal_cdf;

#[derive(Debug, Clone)]
pub struct NoiseStream {
    base_seed: u64,
    trajectory_id: u64,
    dt: f64,
    m: usize,
    rng: ChaCha12Rng,
}

impl NoiseStream {
    pub fn new(base_seed: u64, trajectory_id: u64, dt: f64, m: usize) -> Self {
        assert!(dt > 0.0, "noise stream requires dt > 0");
        assert!(m >= 1, "noise dimension must be at least 1");
        let mut key = [0u8; 32];
        let mut state = base_seed ^ splitmix64(trajectory_id);
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        NoiseStream {
            base_seed,
            trajectory_id,
            dt,
            m,
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn trajectory_id(&self) -> u64 {
        self.trajectory_id
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// One standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        // (x >> 11) + 0.5 scaled by 2^-53 lies strictly inside (0, 1)
        let u = ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
        inv_std_normal_cdf(u)
    }

    /// Fill `out` with independent standard normals.
    pub fn fill_standard_normals(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.standard_normal();
        }
    }

    /// Next Brownian increment: an m-vector with distribution N(0, dt I).
    pub fn next_increment(&mut self) -> Vec<f64> {
        let scale = self.dt.sqrt();
        (0..self.m)
            .map(|_| scale * self.standard_normal())
            .collect()
    }

    /// In-place variant of [`next_increment`](Self::next_increment).
    pub fn fill_increment(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.m);
        let scale = self.dt.sqrt();
        for x in out.iter_mut() {
            *x = scale * self.standard_normal();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{correlation, ks_statistic, tree_mean};
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn replay_is_bit_identical() {
        let mut a = NoiseStream::new(42, 7, 0.01, 2);
        let mut b = NoiseStream::new(42, 7, 0.01, 2);
        for _ in 0..1000 {
            assert_eq!(a.next_increment(), b.next_increment());
        }
    }

    #[test]
    fn distinct_ids_give_distinct_streams() {
        let mut a = NoiseStream::new(42, 0, 0.01, 1);
        let mut b = NoiseStream::new(42, 1, 0.01, 1);
        let xs: Vec<f64> = (0..100).map(|_| a.standard_normal()).collect();
        let ys: Vec<f64> = (0..100).map(|_| b.standard_normal()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn increment_mean_within_clt_bound() {
        let n = 1_000_000usize;
        let dt = 0.01;
        let mut stream = NoiseStream::new(7, 0, dt, 2);
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            let inc = stream.next_increment();
            sums[0] += inc[0];
            sums[1] += inc[1];
        }
        let bound = 4.0 * (dt / n as f64).sqrt();
        for s in sums {
            assert!(
                (s / n as f64).abs() < bound,
                "mean {} vs bound {bound}",
                s / n as f64
            );
        }
    }

    #[test]
    fn increment_covariance_close_to_dt_identity() {
        let n = 1_000_000usize;
        let dt = 0.01;
        let mut stream = NoiseStream::new(11, 3, dt, 2);
        let mut c00 = 0.0;
        let mut c01 = 0.0;
        let mut c11 = 0.0;
        for _ in 0..n {
            let inc = stream.next_increment();
            c00 += inc[0] * inc[0];
            c01 += inc[0] * inc[1];
            c11 += inc[1] * inc[1];
        }
        let nf = n as f64;
        assert!((c00 / nf - dt).abs() < 0.05 * dt);
        assert!((c11 / nf - dt).abs() < 0.05 * dt);
        assert!((c01 / nf).abs() < 0.05 * dt);
    }

    #[test]
    fn cross_stream_correlation_is_negligible() {
        let n = 100_000usize;
        let mut a = NoiseStream::new(5, 1, 1.0, 1);
        let mut b = NoiseStream::new(5, 2, 1.0, 1);
        let xs: Vec<f64> = (0..n).map(|_| a.standard_normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.standard_normal()).collect();
        let rho = correlation(&xs, &ys);
        assert!(rho.abs() < 4.0 / (n as f64).sqrt(), "correlation {rho}");
    }

    #[test]
    fn standardized_increments_pass_ks_at_one_percent() {
        let n = 100_000usize;
        let dt = 0.25;
        let mut stream = NoiseStream::new(2024, 0, dt, 1);
        let xs: Vec<f64> = (0..n)
            .map(|_| stream.next_increment()[0] / dt.sqrt())
            .collect();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let d = ks_statistic(&xs, |x| normal.cdf(x));
        // asymptotic 1% critical value c(0.01)/sqrt(n)
        let crit = 1.62762 / (n as f64).sqrt();
        assert!(
            d < crit,
            "KS statistic {d} exceeds the 1% critical value {crit}"
        );
        // the sample mean should also be unremarkable
        assert!(tree_mean(&xs).abs() < 4.0 / (n as f64).sqrt());
    }
}
