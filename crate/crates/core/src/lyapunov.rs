//! The Lyapunov contraction machinery: the weighted segment functional V,
//! the squared-radius segment process, the contraction constants (delta,
//! rho) assembled from the model constants, the feasibility sweep over the
//! dissipativity level, and the Monte Carlo contraction experiment.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorization::a_p_mu;
use crate::integrate::{simulate_ensemble, PathEnsemble, SchemeKind, SimulationConfig};
use crate::linalg;
use crate::model::DelayModel;
pub use crate::model::{estimate_b, r_lambda, verify_h0};
use crate::segment::{sup_norm, Segment};
use crate::stats::{self, mann_kendall, ols_affine, tree_mean};

/// V(zeta) = sup over the window of e^{3 s} |zeta(s)|^3, evaluated on the
/// grid nodes. Applied to scalar segments (the squared radius process).
pub fn lyapunov_v(zeta: &Segment) -> f64 {
    assert_eq!(zeta.dim(), 1, "lyapunov_v acts on scalar segments");
    let grid = zeta.grid();
    (0..grid.num_nodes())
        .map(|i| (3.0 * grid.node(i)).exp() * zeta.node(i)[0].abs().powi(3))
        .fold(0.0, f64::max)
}

/// z_t(s) = |x_t(s)|^2 nodewise; the scalar segment V acts on.
pub fn squared_radius_segment(segment: &Segment) -> Segment {
    let grid = segment.grid().clone();
    let values: Vec<f64> = (0..grid.num_nodes())
        .map(|i| linalg::dot(segment.node(i), segment.node(i)))
        .collect();
    Segment::new(grid, 1, values).expect("same grid, scalar values")
}

/// |x^T H|: the scalar noise projection eta at a state x and diffusion
/// matrix H (row-major d x m). Satisfies eta <= |x| ||H||_tr.
pub fn eta_projection(x: &[f64], h: &[f64]) -> f64 {
    let d = x.len();
    assert!(
        d > 0 && h.len().is_multiple_of(d),
        "diffusion shape mismatch"
    );
    let m = h.len() / d;
    linalg::norm(&linalg::vecmat(x, h, d, m))
}

/// The pinned splitting constants for (a+b+c+d)^3 <= kappa a^3 +
/// gamma (b^3+c^3+d^3): kappa is the arithmetic midpoint of the admissible
/// interval (1, e^{3r}) and gamma = 9 (1 - kappa^{-1/2})^{-2} is the minimal
/// companion for that kappa obtained by splitting off a first and applying
/// the power-mean bound to the remaining three cubes. Both are exposed as
/// overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeSplit {
    pub kappa: f64,
    pub gamma: f64,
}

impl CubeSplit {
    pub fn pinned(r: f64) -> Self {
        let kappa = 0.5 * (1.0 + (3.0 * r).exp());
        CubeSplit {
            kappa,
            gamma: Self::minimal_gamma(kappa),
        }
    }

    pub fn with_kappa(r: f64, kappa: f64) -> Result<Self> {
        if !(kappa > 1.0 && kappa < (3.0 * r).exp()) {
            return Err(Error::config(
                "kappa",
                format!(
                    "must lie in (1, e^(3r)) = (1, {}), got {kappa}",
                    (3.0 * r).exp()
                ),
            ));
        }
        Ok(CubeSplit {
            kappa,
            gamma: Self::minimal_gamma(kappa),
        })
    }

    fn minimal_gamma(kappa: f64) -> f64 {
        let t = 1.0 - kappa.powf(-0.5);
        9.0 / (t * t)
    }
}

/// Inputs of the contraction formulas.
#[derive(Debug, Clone, Copy)]
pub struct ContractionInputs {
    pub lambda: f64,
    pub a_lambda: f64,
    pub b: f64,
    /// D = (1/L)|g(0)|^2 + 2||h(0)||^2.
    pub d_const: f64,
    pub lipschitz: f64,
    pub r: f64,
    /// a_{3,lambda} from the stochastic-convolution bound.
    pub a3: f64,
    pub split: CubeSplit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaRho {
    Feasible {
        delta: f64,
        rho: f64,
    },
    /// The shared denominator was non-positive or the contraction factor
    /// reached 1; the certificate does not apply at this level.
    Infeasible {
        denominator: f64,
        delta: f64,
    },
}

impl DeltaRho {
    pub fn is_feasible(&self) -> bool {
        matches!(self, DeltaRho::Feasible { .. })
    }

    pub fn delta(&self) -> f64 {
        match self {
            DeltaRho::Feasible { delta, .. } | DeltaRho::Infeasible { delta, .. } => *delta,
        }
    }
}

/// Evaluate the contraction constants
///
/// ```text
/// delta = [ kappa e^{-3r} + gamma (27 L^3/lambda^3) e^{3r}
///           + 16 gamma a3 r e^{3r} L^{3/2} ] / Q
/// rho   = [ gamma (A^2 + (B+D)/lambda)^3 + 16 gamma a3 r D^{3/2} ] / Q
/// Q     = 1 - gamma e^{3r} ( 27 L^3/lambda^3 + 16 a3 r (D^{3/2} + 3 L^{3/2}) )
/// ```
pub fn theoretical_delta_rho(c: &ContractionInputs) -> DeltaRho {
    let e3r = (3.0 * c.r).exp();
    let l3 = c.lipschitz.powi(3);
    let l32 = c.lipschitz.powf(1.5);
    let d32 = c.d_const.powf(1.5);
    let kappa = c.split.kappa;
    let gamma = c.split.gamma;
    let lam3 = c.lambda.powi(3);

    let denominator =
        1.0 - gamma * e3r * (27.0 * l3 / lam3 + 16.0 * c.a3 * c.r * (d32 + 3.0 * l32));
    let delta_num =
        kappa / e3r + gamma * (27.0 * l3 / lam3) * e3r + 16.0 * gamma * c.a3 * c.r * e3r * l32;
    if denominator <= 0.0 {
        return DeltaRho::Infeasible {
            denominator,
            delta: f64::INFINITY,
        };
    }
    let delta = delta_num / denominator;
    if delta >= 1.0 {
        return DeltaRho::Infeasible { denominator, delta };
    }
    let base = c.a_lambda * c.a_lambda + (c.b + c.d_const) / c.lambda;
    let rho = (gamma * base.powi(3) + 16.0 * gamma * c.a3 * c.r * d32) / denominator;
    DeltaRho::Feasible { delta, rho }
}

/// One level of the feasibility sweep.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityPoint {
    pub lambda: f64,
    pub a_lambda: f64,
    pub a3: f64,
    pub delta: f64,
    pub rho: Option<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct FeasibilitySearch {
    pub split: CubeSplit,
    pub alpha: f64,
    pub c_p: f64,
    pub b: f64,
    pub points: Vec<FeasibilityPoint>,
    pub first_feasible: Option<FeasibilityPoint>,
}

/// Sweep the dissipativity level upward and record the first level at which
/// the contraction certificate applies. A_lambda comes from the analytic
/// radius for the built-in superlinear family and from the sampled probe
/// otherwise (the probe cannot certify levels beyond its radius range).
pub fn lambda_star_search(
    model: &DelayModel,
    lambda_grid: &[f64],
    split: CubeSplit,
    alpha: f64,
    c_p: f64,
) -> Result<FeasibilitySearch> {
    if lambda_grid.is_empty() {
        return Err(Error::config(
            "lambda_grid",
            "at least one level is required",
        ));
    }
    let b = estimate_b(model, lambda_grid)?;
    let d_const = model.d_constant();
    let lipschitz = model.lipschitz();
    let r = model.r();
    let mut points = Vec::with_capacity(lambda_grid.len());
    let mut first = None;
    for &lambda in lambda_grid {
        let a_lambda = match model.analytic_a_lambda(lambda) {
            Some(a) => a,
            None => verify_h0(model, &crate::model::default_probe_radii(), lambda)?,
        };
        let a3 = a_p_mu(3.0, lambda, alpha, c_p)?;
        let inputs = ContractionInputs {
            lambda,
            a_lambda,
            b,
            d_const,
            lipschitz,
            r,
            a3,
            split,
        };
        let point = match theoretical_delta_rho(&inputs) {
            DeltaRho::Feasible { delta, rho } => FeasibilityPoint {
                lambda,
                a_lambda,
                a3,
                delta,
                rho: Some(rho),
                feasible: true,
            },
            DeltaRho::Infeasible { delta, .. } => FeasibilityPoint {
                lambda,
                a_lambda,
                a3,
                delta,
                rho: None,
                feasible: false,
            },
        };
        if point.feasible && first.is_none() {
            first = Some(point);
        }
        points.push(point);
    }
    Ok(FeasibilitySearch {
        split,
        alpha,
        c_p,
        b,
        points,
        first_feasible: first,
    })
}

// ---------------------------------------------------------------------------
// the Monte Carlo contraction experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LyapunovExperimentConfig {
    pub scheme: SchemeKind,
    pub dt: f64,
    pub paths: usize,
    /// Number of delay-length iterations K; the run horizon is K r.
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LyapunovReport {
    /// E V(z_{kr}), k = 0..=K, over surviving paths.
    pub v_iterates: Vec<f64>,
    /// Standard errors of the V iterates (between-path variation).
    pub v_std_errors: Vec<f64>,
    /// E ||x_{kr}||^2 and E ||x_{kr}||^6.
    pub norm2_iterates: Vec<f64>,
    pub norm6_iterates: Vec<f64>,
    /// Affine fit of successive V iterates (transient skipped).
    pub fitted_delta: f64,
    pub fitted_rho: f64,
    pub fit_degenerate: bool,
    /// rho_hat / (1 - delta_hat) when the fitted recursion contracts.
    pub plateau: Option<f64>,
    pub contraction: bool,
    pub mann_kendall_z: f64,
    /// No increasing trend in the sixth-moment curve and the last-quarter
    /// mean stays within 1.25x of the full mean.
    pub moments_bounded: bool,
    pub explosion_rate: f64,
    /// False when any path exploded on the selected (stable) scheme.
    pub valid: bool,
    /// Result of the dissipativity-level sweep, when one was attached.
    pub feasibility: Option<FeasibilitySearch>,
}

impl LyapunovReport {
    pub fn with_feasibility(mut self, search: FeasibilitySearch) -> Self {
        self.feasibility = Some(search);
        self
    }
}

/// Iterates skipped at the start of the affine fit.
const FIT_SKIP: usize = 2;

pub fn run_lyapunov_experiment(
    model: &DelayModel,
    phi: &Segment,
    config: &LyapunovExperimentConfig,
) -> Result<LyapunovReport> {
    if config.scheme == SchemeKind::ExplicitEm {
        return Err(Error::config(
            "scheme",
            "explicit_em is excluded from the contraction experiment; use tamed_em or split_step_implicit",
        ));
    }
    if config.iterations < FIT_SKIP + 2 {
        return Err(Error::config(
            "K",
            format!(
                "need at least {} iterations for the fit, got {}",
                FIT_SKIP + 2,
                config.iterations
            ),
        ));
    }
    let sim = SimulationConfig {
        scheme: config.scheme,
        horizon: config.iterations as f64 * model.r(),
        paths: config.paths,
        seed: config.seed,
        record_noise_integral: false,
    };
    let ensemble = simulate_ensemble(model, phi, &sim)?;
    lyapunov_report_from_ensemble(&ensemble, config.iterations)
}

/// Assemble the report from an existing ensemble whose horizon covers K
/// delay lengths.
pub fn lyapunov_report_from_ensemble(
    ensemble: &PathEnsemble,
    iterations: usize,
) -> Result<LyapunovReport> {
    let r = ensemble.grid().r();
    let survivors = ensemble.surviving_paths();
    let explosion_rate = ensemble.explosion_rate();
    if survivors.is_empty() {
        return Err(Error::ExperimentInvalid("every path exploded".into()));
    }

    let per_k: Vec<(f64, f64, f64, f64)> = (0..=iterations)
        .into_par_iter()
        .map(|k| {
            let t = k as f64 * r;
            let mut v = Vec::with_capacity(survivors.len());
            let mut n2 = Vec::with_capacity(survivors.len());
            let mut n6 = Vec::with_capacity(survivors.len());
            for &path in &survivors {
                let segment = ensemble.segment_at(path, t)?;
                let z = squared_radius_segment(&segment);
                v.push(lyapunov_v(&z));
                let s = sup_norm(&segment);
                n2.push(s * s);
                n6.push(s.powi(6));
            }
            let stats = stats::mean_with_error(&v);
            Ok((stats.mean, stats.std_error, tree_mean(&n2), tree_mean(&n6)))
        })
        .collect::<Result<Vec<_>>>()?;

    let v_iterates: Vec<f64> = per_k.iter().map(|x| x.0).collect();
    let v_std_errors: Vec<f64> = per_k.iter().map(|x| x.1).collect();
    let norm2_iterates: Vec<f64> = per_k.iter().map(|x| x.2).collect();
    let norm6_iterates: Vec<f64> = per_k.iter().map(|x| x.3).collect();

    let xs = &v_iterates[FIT_SKIP..iterations];
    let ys = &v_iterates[FIT_SKIP + 1..=iterations];
    let fit = ols_affine(xs, ys);
    let contraction = !fit.degenerate && fit.slope < 1.0;
    let plateau = contraction.then(|| fit.intercept / (1.0 - fit.slope));

    let mk = mann_kendall(&norm6_iterates);
    let quarter = (norm6_iterates.len() / 4).max(1);
    let last_quarter = tree_mean(&norm6_iterates[norm6_iterates.len() - quarter..]);
    let full = tree_mean(&norm6_iterates);
    let moments_bounded = !mk.increasing_at(stats::Z_95)
        && ((full == 0.0 && last_quarter == 0.0) || last_quarter <= 1.25 * full);

    Ok(LyapunovReport {
        v_iterates,
        v_std_errors,
        norm2_iterates,
        norm6_iterates,
        fitted_delta: fit.slope,
        fitted_rho: fit.intercept,
        fit_degenerate: fit.degenerate,
        plateau,
        contraction,
        mann_kendall_z: mk.z,
        moments_bounded,
        explosion_rate,
        valid: explosion_rate == 0.0,
        feasibility: None,
    })
}
