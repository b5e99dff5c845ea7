//! Shared statistical helpers: deterministic reductions, affine fits, the
//! Mann-Kendall trend test, and a Kolmogorov-Smirnov statistic.

/// Pairwise tree sum over index order. The reduction shape depends only on
/// the slice length, so results do not change with worker count or
/// scheduling; it also keeps accumulated rounding low.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            tree_sum(&xs[..mid]) + tree_sum(&xs[mid..])
        }
    }
}

pub fn tree_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    tree_sum(xs) / xs.len() as f64
}

/// Monte Carlo mean with its standard error (non-negative values of any
/// i.i.d. sample; one entry per independent unit, e.g. per path).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanWithError {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

pub fn mean_with_error(xs: &[f64]) -> MeanWithError {
    let n = xs.len();
    if n == 0 {
        return MeanWithError {
            mean: f64::NAN,
            std_error: f64::NAN,
            n,
        };
    }
    let mean = tree_mean(xs);
    if n == 1 {
        return MeanWithError {
            mean,
            std_error: 0.0,
            n,
        };
    }
    let devs: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = tree_sum(&devs) / (n as f64 - 1.0);
    MeanWithError {
        mean,
        std_error: (var / n as f64).sqrt(),
        n,
    }
}

/// One-sided z quantiles used by the confidence gates.
pub const Z_99: f64 = 2.326347874040841;
pub const Z_95: f64 = 1.6448536269514722;

/// Ordinary least squares fit of y = slope * x + intercept.
/// A degenerate regressor (zero variance) yields slope 0 and intercept
/// mean(y), flagged by `degenerate`.
#[derive(Debug, Clone, Copy)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub degenerate: bool,
}

pub fn ols_affine(x: &[f64], y: &[f64]) -> AffineFit {
    assert_eq!(x.len(), y.len());
    assert!(!x.is_empty());
    let n = x.len() as f64;
    let mx = tree_mean(x);
    let my = tree_mean(y);
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    if sxx <= 1e-300 * n {
        return AffineFit {
            slope: 0.0,
            intercept: my,
            degenerate: true,
        };
    }
    let slope = sxy / sxx;
    AffineFit {
        slope,
        intercept: my - slope * mx,
        degenerate: false,
    }
}

/// Mann-Kendall trend statistic. `z` is the normal approximation with the
/// continuity correction (no tie correction; inputs here are continuous
/// Monte Carlo averages where ties have probability zero).
#[derive(Debug, Clone, Copy)]
pub struct MannKendall {
    pub s: i64,
    pub z: f64,
}

impl MannKendall {
    /// One-sided test for an increasing trend at significance `alpha`
    /// expressed through its z quantile (e.g. `Z_95`).
    pub fn increasing_at(&self, z_crit: f64) -> bool {
        self.z > z_crit
    }
}

pub fn mann_kendall(xs: &[f64]) -> MannKendall {
    let n = xs.len();
    let mut s: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = xs[j] - xs[i];
            if d > 0.0 {
                s += 1;
            } else if d < 0.0 {
                s -= 1;
            }
        }
    }
    let nf = n as f64;
    let var = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let z = if var <= 0.0 {
        0.0
    } else if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    MannKendall { s, z }
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against a reference
/// CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    assert!(!sample.is_empty());
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Pearson correlation of two equally long samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ma = tree_mean(a);
    let mb = tree_mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tree_sum_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let seq: f64 = xs.iter().sum();
        assert_relative_eq!(tree_sum(&xs), seq, max_relative = 1e-12);
        assert_eq!(tree_sum(&[]), 0.0);
        assert_eq!(tree_sum(&[4.0]), 4.0);
    }

    #[test]
    fn tree_sum_is_split_invariant_under_permutation_of_workers() {
        // the reduction is a pure function of the slice; same input, same output
        let xs: Vec<f64> = (0..377).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert_eq!(tree_sum(&xs), tree_sum(&xs));
    }

    #[test]
    fn mean_error_basic() {
        let m = mean_with_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m.mean, 2.5);
        // sample sd = sqrt(5/3), se = sd/2
        assert_relative_eq!(
            m.std_error,
            (5.0f64 / 3.0).sqrt() / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn ols_recovers_exact_affine() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let fit = ols_affine(&x, &y);
        assert!(!fit.degenerate);
        assert_relative_eq!(fit.slope, 2.5, max_relative = 1e-12);
        assert_relative_eq!(fit.intercept, -1.0, max_relative = 1e-10);
    }

    #[test]
    fn ols_degenerate_regressor() {
        let fit = ols_affine(&[1.0, 1.0, 1.0], &[3.0, 4.0, 5.0]);
        assert!(fit.degenerate);
        assert_eq!(fit.slope, 0.0);
        assert_relative_eq!(fit.intercept, 4.0);
    }

    #[test]
    fn mann_kendall_monotone_sequences() {
        let up: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mk = mann_kendall(&up);
        assert_eq!(mk.s, (30 * 29 / 2) as i64);
        assert!(mk.increasing_at(Z_95));
        let down: Vec<f64> = (0..30).map(|i| -(i as f64)).collect();
        assert!(!mann_kendall(&down).increasing_at(Z_95));
        // a flat-noise sequence should not trigger
        let wiggle: Vec<f64> = (0..30).map(|i| ((i * 7919) % 13) as f64).collect();
        assert!(!mann_kendall(&wiggle).increasing_at(Z_95));
    }

    #[test]
    fn ks_statistic_on_exact_uniform_grid() {
        // points at (i+0.5)/n against U(0,1): D = 0.5/n
        let n = 100;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert_relative_eq!(d, 0.5 / n as f64, max_relative = 1e-9);
    }

    #[test]
    fn correlation_of_identical_series_is_one() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).cos()).collect();
        assert_relative_eq!(correlation(&a, &a), 1.0, max_relative = 1e-12);
    }
}
