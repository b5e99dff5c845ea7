//! The delay model: pointwise drift f, functional drift g, functional
//! diffusion h, and the hypothesis bookkeeping (dissipativity of f, the
//! one-sided constant L) that the estimators downstream consume.

use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg;
use crate::segment::{Segment, SegmentGrid};
use crate::special::inv_std_normal_cdf;

/// Row-major dense matrix used for coefficient families.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(
                "matrix",
                format!(
                    "expected {}x{} = {} entries, got {}",
                    rows,
                    cols,
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        linalg::matvec(&self.data, self.rows, self.cols, v)
    }

    pub fn operator_norm(&self) -> f64 {
        linalg::operator_norm(&self.data, self.rows, self.cols)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }
}

/// Trace norm of a matrix given row-major: (Tr(M M*))^(1/2), i.e. the square
/// root of the sum of squared entries.
pub fn trace_norm(mat: &[f64]) -> f64 {
    linalg::frobenius_norm(mat)
}

/// f(x) = a x - x |x|^s. With `a` absent this is the benchmark
/// superlinearly dissipative drift -x |x|^s.
#[derive(Debug, Clone)]
pub struct PolyDissipativeDrift {
    pub s: f64,
    pub a: Option<Mat>,
}

impl PolyDissipativeDrift {
    pub fn new(s: f64, a: Option<Mat>) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::config(
                "drift.s",
                format!("exponent must be positive, got {s}"),
            ));
        }
        Ok(PolyDissipativeDrift { s, a })
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let norm = linalg::norm(x);
        let pull = norm.powf(self.s);
        let mut out = match &self.a {
            Some(a) => a.mul_vec(x),
            None => vec![0.0; x.len()],
        };
        for (o, xi) in out.iter_mut().zip(x) {
            *o -= xi * pull;
        }
        out
    }
}

type VecMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type SegMap = Arc<dyn Fn(&Segment) -> Vec<f64> + Send + Sync>;

/// Pointwise drift f.
#[derive(Clone)]
pub enum Drift {
    /// f(x) = a x. Does not satisfy H0; kept as a control and for the
    /// linear oracles.
    Linear {
        a: Mat,
    },
    Poly(PolyDissipativeDrift),
    /// User-supplied map; the model-level L must then be declared.
    Custom(VecMap),
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Linear { a } => f.debug_struct("Linear").field("a", a).finish(),
            Drift::Poly(p) => f.debug_tuple("Poly").field(p).finish(),
            Drift::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Functional drift g acting on the whole segment.
#[derive(Clone)]
pub enum FunctionalDrift {
    Zero,
    /// g(zeta) = G zeta(-r)
    PointDelay {
        g: Mat,
    },
    /// g(zeta) = sum_i c_i W zeta(theta_i) dt with trapezoid weights c_i
    /// (1/2 at both endpoints, 1 inside).
    Distributed {
        w: Mat,
    },
    /// User-supplied map; the model-level L must then be declared.
    Custom(SegMap),
}

impl fmt::Debug for FunctionalDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FunctionalDrift::Zero => f.write_str("Zero"),
            FunctionalDrift::PointDelay { g } => {
                f.debug_struct("PointDelay").field("g", g).finish()
            }
            FunctionalDrift::Distributed { w } => {
                f.debug_struct("Distributed").field("w", w).finish()
            }
            FunctionalDrift::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Functional diffusion h, d x m valued.
#[derive(Clone)]
pub enum FunctionalDiffusion {
    Zero,
    /// h(zeta) = H0 + (H1 zeta(0) + H2 zeta(-r)) broadcast across the m
    /// columns. For d = m = 1 this is the plain affine scalar family.
    Affine {
        h0: Mat,
        h1: Mat,
        h2: Mat,
    },
    /// User-supplied map returning row-major d x m entries; the model-level
    /// L must then be declared.
    Custom(SegMap),
}

impl fmt::Debug for FunctionalDiffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FunctionalDiffusion::Zero => f.write_str("Zero"),
            FunctionalDiffusion::Affine { h0, h1, h2 } => f
                .debug_struct("Affine")
                .field("h0", h0)
                .field("h1", h1)
                .field("h2", h2)
                .finish(),
            FunctionalDiffusion::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// The model tuple (d, m, r, f, g, h, L).
#[derive(Debug, Clone)]
pub struct DelayModel {
    d: usize,
    m: usize,
    r: f64,
    drift: Drift,
    g: FunctionalDrift,
    h: FunctionalDiffusion,
    lip: f64,
    g_at_zero: Vec<f64>,
    h_at_zero: Vec<f64>,
}

impl DelayModel {
    pub fn new(
        d: usize,
        m: usize,
        r: f64,
        drift: Drift,
        g: FunctionalDrift,
        h: FunctionalDiffusion,
        declared_l: Option<f64>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("d", "state dimension must be at least 1"));
        }
        if m == 0 {
            return Err(Error::config("m", "noise dimension must be at least 1"));
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::config(
                "r",
                format!("delay must be positive, got {r}"),
            ));
        }
        check_drift_shape(&drift, d)?;
        check_g_shape(&g, d)?;
        check_h_shape(&h, d, m)?;

        let lip = match declared_l {
            Some(l) => {
                if !(l > 0.0) || !l.is_finite() {
                    return Err(Error::config(
                        "L",
                        format!("must be a positive finite number, got {l}"),
                    ));
                }
                l
            }
            None => builtin_lipschitz(&drift, &g, &h, d, m, r).ok_or_else(|| {
                Error::config("L", "required when any coefficient is user-supplied")
            })?,
        };

        let probe_grid = SegmentGrid::new(r, r / 4.0)?;
        let zero_segment = Segment::constant(probe_grid, &vec![0.0; d])?;
        let g_at_zero = eval_g(&g, &zero_segment);
        let h_at_zero = eval_h(&h, &zero_segment, m);
        if let Some(node) = first_non_finite(&g_at_zero) {
            return Err(Error::ModelEval {
                component: "g(0)",
                node,
            });
        }
        if let Some(node) = first_non_finite(&h_at_zero) {
            return Err(Error::ModelEval {
                component: "h(0)",
                node,
            });
        }

        Ok(DelayModel {
            d,
            m,
            r,
            drift,
            g,
            h,
            lip,
            g_at_zero,
            h_at_zero,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// The one-sided / Lipschitz constant of H2.
    pub fn lipschitz(&self) -> f64 {
        self.lip
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn g_at_zero(&self) -> &[f64] {
        &self.g_at_zero
    }

    pub fn h_at_zero(&self) -> &[f64] {
        &self.h_at_zero
    }

    /// D = (1/L) |g(0)|^2 + 2 ||h(0)||^2.
    pub fn d_constant(&self) -> f64 {
        let g0 = linalg::dot(&self.g_at_zero, &self.g_at_zero);
        let h0 = trace_norm(&self.h_at_zero);
        g0 / self.lip + 2.0 * h0 * h0
    }

    pub fn eval_f(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d);
        match &self.drift {
            Drift::Linear { a } => a.mul_vec(x),
            Drift::Poly(p) => p.eval(x),
            Drift::Custom(f) => f(x),
        }
    }

    pub fn eval_g(&self, segment: &Segment) -> Vec<f64> {
        eval_g(&self.g, segment)
    }

    pub fn eval_h(&self, segment: &Segment) -> Vec<f64> {
        eval_h(&self.h, segment, self.m)
    }

    /// Analytic dissipativity radius A_lambda when the drift is the
    /// built-in superlinear family: <f(v),v>/|v|^2 <= sigma_a - |v|^s, so
    /// any radius with |v|^s >= lambda + sigma_a qualifies.
    pub fn analytic_a_lambda(&self, lambda: f64) -> Option<f64> {
        match &self.drift {
            Drift::Poly(p) => {
                let sigma =
                    p.a.as_ref()
                        .map(|a| linalg::max_symmetric_eigenvalue(a.data(), self.d).max(0.0))
                        .unwrap_or(0.0);
                Some((lambda + sigma).powf(1.0 / p.s))
            }
            _ => None,
        }
    }

    /// Worst H2 margin max(LHS - L ||x-y||^2) over random segment pairs;
    /// a non-positive value means the declared constant held on the sample.
    pub fn h2_worst_margin(&self, pairs: usize, seed: u64) -> Result<f64> {
        let grid = SegmentGrid::new(self.r, self.r / 8.0)?;
        let mut rng = probe_rng(seed);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..pairs {
            let scale = 10.0f64.powf(uniform(&mut rng) * 3.0 - 1.5);
            let x = random_segment(&grid, self.d, scale, &mut rng)?;
            let y = random_segment(&grid, self.d, scale, &mut rng)?;
            let dx0: Vec<f64> = x.head().iter().zip(y.head()).map(|(a, b)| a - b).collect();
            let df: Vec<f64> = self
                .eval_f(x.head())
                .iter()
                .zip(self.eval_f(y.head()))
                .map(|(a, b)| a - b)
                .collect();
            let dg: Vec<f64> = self
                .eval_g(&x)
                .iter()
                .zip(self.eval_g(&y))
                .map(|(a, b)| a - b)
                .collect();
            let dh: Vec<f64> = self
                .eval_h(&x)
                .iter()
                .zip(self.eval_h(&y))
                .map(|(a, b)| a - b)
                .collect();
            let lhs = 2.0 * linalg::dot(&df, &dx0).max(0.0)
                + 2.0 * linalg::dot(&dg, &dx0).max(0.0)
                + trace_norm(&dh).powi(2);
            let diff = Segment::new(
                grid.clone(),
                self.d,
                x.values()
                    .iter()
                    .zip(y.values())
                    .map(|(a, b)| a - b)
                    .collect(),
            )?;
            let rhs = self.lip * crate::segment::sup_norm(&diff).powi(2);
            worst = worst.max(lhs - rhs);
        }
        Ok(worst)
    }
}

fn first_non_finite(xs: &[f64]) -> Option<usize> {
    xs.iter().position(|x| !x.is_finite())
}

fn check_drift_shape(drift: &Drift, d: usize) -> Result<()> {
    match drift {
        Drift::Linear { a } if a.rows() != d || a.cols() != d => Err(Error::config(
            "drift.a",
            format!("expected {d}x{d}, got {}x{}", a.rows(), a.cols()),
        )),
        Drift::Poly(PolyDissipativeDrift { a: Some(a), .. }) if a.rows() != d || a.cols() != d => {
            Err(Error::config(
                "drift.a",
                format!("expected {d}x{d}, got {}x{}", a.rows(), a.cols()),
            ))
        }
        _ => Ok(()),
    }
}

fn check_g_shape(g: &FunctionalDrift, d: usize) -> Result<()> {
    match g {
        FunctionalDrift::PointDelay { g } if g.rows() != d || g.cols() != d => Err(Error::config(
            "g.G",
            format!("expected {d}x{d}, got {}x{}", g.rows(), g.cols()),
        )),
        FunctionalDrift::Distributed { w } if w.rows() != d || w.cols() != d => Err(Error::config(
            "g.W",
            format!("expected {d}x{d}, got {}x{}", w.rows(), w.cols()),
        )),
        _ => Ok(()),
    }
}

fn check_h_shape(h: &FunctionalDiffusion, d: usize, m: usize) -> Result<()> {
    if let FunctionalDiffusion::Affine { h0, h1, h2 } = h {
        if h0.rows() != d || h0.cols() != m {
            return Err(Error::config(
                "h.H0",
                format!("expected {d}x{m}, got {}x{}", h0.rows(), h0.cols()),
            ));
        }
        if h1.rows() != d || h1.cols() != d {
            return Err(Error::config(
                "h.H1",
                format!("expected {d}x{d}, got {}x{}", h1.rows(), h1.cols()),
            ));
        }
        if h2.rows() != d || h2.cols() != d {
            return Err(Error::config(
                "h.H2",
                format!("expected {d}x{d}, got {}x{}", h2.rows(), h2.cols()),
            ));
        }
    }
    Ok(())
}

fn eval_g(g: &FunctionalDrift, segment: &Segment) -> Vec<f64> {
    match g {
        FunctionalDrift::Zero => vec![0.0; segment.dim()],
        FunctionalDrift::PointDelay { g } => g.mul_vec(segment.tail()),
        FunctionalDrift::Distributed { w } => {
            let grid = segment.grid();
            let dt = grid.dt();
            let n = grid.n();
            let mut acc = vec![0.0; segment.dim()];
            for i in 0..=n {
                let weight = if i == 0 || i == n { 0.5 } else { 1.0 } * dt;
                linalg::axpy(weight, segment.node(i), &mut acc);
            }
            w.mul_vec(&acc)
        }
        FunctionalDrift::Custom(f) => f(segment),
    }
}

fn eval_h(h: &FunctionalDiffusion, segment: &Segment, m: usize) -> Vec<f64> {
    let d = segment.dim();
    match h {
        FunctionalDiffusion::Zero => vec![0.0; d * m],
        FunctionalDiffusion::Affine { h0, h1, h2 } => {
            let mut out = h0.data().to_vec();
            let mut v = h1.mul_vec(segment.head());
            let v2 = h2.mul_vec(segment.tail());
            for (a, b) in v.iter_mut().zip(&v2) {
                *a += b;
            }
            for i in 0..d {
                for j in 0..m {
                    out[i * m + j] += v[i];
                }
            }
            out
        }
        FunctionalDiffusion::Custom(f) => f(segment),
    }
}

/// Analytic H2 constant for fully built-in coefficients: the three terms of
/// the hypothesis are bounded separately and added. The superlinear pull
/// -x|x|^s is monotone, so only a positive-definite part of the linear term
/// contributes to the f-term.
fn builtin_lipschitz(
    drift: &Drift,
    g: &FunctionalDrift,
    h: &FunctionalDiffusion,
    d: usize,
    m: usize,
    r: f64,
) -> Option<f64> {
    let lf = match drift {
        Drift::Linear { a } => 2.0 * linalg::max_symmetric_eigenvalue(a.data(), d).max(0.0),
        Drift::Poly(p) => {
            2.0 * p
                .a
                .as_ref()
                .map(|a| linalg::max_symmetric_eigenvalue(a.data(), d).max(0.0))
                .unwrap_or(0.0)
        }
        Drift::Custom(_) => return None,
    };
    let lg = match g {
        FunctionalDrift::Zero => 0.0,
        FunctionalDrift::PointDelay { g } => 2.0 * g.operator_norm(),
        FunctionalDrift::Distributed { w } => 2.0 * w.operator_norm() * r,
        FunctionalDrift::Custom(_) => return None,
    };
    let lh = match h {
        FunctionalDiffusion::Zero => 0.0,
        FunctionalDiffusion::Affine { h1, h2, .. } => {
            let lip = (m as f64).sqrt() * (h1.operator_norm() + h2.operator_norm());
            lip * lip
        }
        FunctionalDiffusion::Custom(_) => return None,
    };
    // A zero L breaks D = |g(0)|^2 / L; keep a strictly positive floor.
    Some((lf + lg + lh).max(1e-12))
}

// ---------------------------------------------------------------------------
// model evaluation and the H0 probe
// ---------------------------------------------------------------------------

/// Evaluate drift and diffusion of the model at a segment:
/// drift = f(zeta(0)) + g(zeta), diffusion = h(zeta) (row-major d x m).
pub fn evaluate_coefficients(
    model: &DelayModel,
    segment: &Segment,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if (segment.grid().r() - model.r()).abs() > 1e-12 * model.r().max(1.0) {
        return Err(Error::config(
            "segment.grid",
            format!(
                "segment delay {} does not match model delay {}",
                segment.grid().r(),
                model.r()
            ),
        ));
    }
    if segment.dim() != model.d() {
        return Err(Error::config(
            "segment.d",
            format!(
                "segment dimension {} does not match model dimension {}",
                segment.dim(),
                model.d()
            ),
        ));
    }
    let mut drift = model.eval_f(segment.head());
    let g = model.eval_g(segment);
    for (a, b) in drift.iter_mut().zip(&g) {
        *a += b;
    }
    if let Some(node) = first_non_finite(&drift) {
        return Err(Error::ModelEval {
            component: "drift",
            node,
        });
    }
    let diffusion = model.eval_h(segment);
    if let Some(node) = first_non_finite(&diffusion) {
        return Err(Error::ModelEval {
            component: "diffusion",
            node,
        });
    }
    Ok((drift, diffusion))
}

/// Geometric default probe radii 2^k, k = 0..=20.
pub fn default_probe_radii() -> Vec<f64> {
    (0..=20).map(|k| (1u64 << k) as f64).collect()
}

fn probe_rng(seed: u64) -> rand_chacha::ChaCha12Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    rand_chacha::ChaCha12Rng::from_seed(key)
}

pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn uniform(rng: &mut rand_chacha::ChaCha12Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

fn standard_normal(rng: &mut rand_chacha::ChaCha12Rng) -> f64 {
    inv_std_normal_cdf(uniform(rng))
}

fn unit_direction(d: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let n = linalg::norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_segment(
    grid: &SegmentGrid,
    d: usize,
    scale: f64,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Segment> {
    let values = (0..grid.num_nodes() * d)
        .map(|_| scale * standard_normal(rng))
        .collect();
    Segment::new(grid.clone(), d, values)
}

const H0_PROBE_SEED: u64 = 0x5fde_0b57_a11d_c0de;

/// Sampled check of the dissipativity hypothesis at level `lambda`: returns
/// the smallest probed radius beyond which every sampled direction satisfies
/// <f(v), v>/|v|^2 <= -lambda, for all probed radii at or above it. Each
/// radius is probed along 2 d random unit directions.
pub fn verify_h0(model: &DelayModel, radii: &[f64], lambda: f64) -> Result<f64> {
    if lambda < 1.0 {
        return Err(Error::config(
            "lambda",
            format!("level must be >= 1, got {lambda}"),
        ));
    }
    if radii.is_empty() {
        return Err(Error::config(
            "radii",
            "at least one probe radius is required",
        ));
    }
    for w in radii.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::config("radii", "radii must be strictly increasing"));
        }
    }
    if radii[0] <= 0.0 {
        return Err(Error::config("radii", "radii must be positive"));
    }
    let mut rng = probe_rng(H0_PROBE_SEED);
    let worst: Vec<f64> = radii
        .iter()
        .map(|&rho| {
            (0..2 * model.d())
                .map(|_| {
                    let u = unit_direction(model.d(), &mut rng);
                    let v: Vec<f64> = u.iter().map(|x| x * rho).collect();
                    linalg::dot(&model.eval_f(&v), &v) / (rho * rho)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    // smallest index from which every later radius qualifies
    let mut qualified_from = None;
    for i in (0..radii.len()).rev() {
        if worst[i] <= -lambda {
            qualified_from = Some(i);
        } else {
            break;
        }
    }
    match qualified_from {
        Some(i) => Ok(radii[i]),
        None => Err(Error::DissipativityProbe { lambda }),
    }
}

/// R_lambda(x) = 2 <f(x), x> + lambda |x|^2.
pub fn r_lambda(model: &DelayModel, x: &[f64], lambda: f64) -> f64 {
    let f = model.eval_f(x);
    2.0 * linalg::dot(&f, x) + lambda * linalg::dot(x, x)
}

/// Sampled estimate of the constant B with R_lambda(x) <= B + lambda
/// A_lambda^2: the worst probed excess over the levels in `lambda_grid`,
/// clipped below at zero. Uses the default probe radii and the analytic
/// A_lambda when the drift family provides one.
pub fn estimate_b(model: &DelayModel, lambda_grid: &[f64]) -> Result<f64> {
    let radii = default_probe_radii();
    let mut b: f64 = 0.0;
    let mut rng = probe_rng(H0_PROBE_SEED ^ 0xb);
    for &lambda in lambda_grid {
        let a_lambda = match model.analytic_a_lambda(lambda) {
            Some(a) => a,
            None => verify_h0(model, &radii, lambda)?,
        };
        let mut sup = f64::NEG_INFINITY;
        for &rho in &radii {
            for _ in 0..2 * model.d() {
                let u = unit_direction(model.d(), &mut rng);
                let v: Vec<f64> = u.iter().map(|x| x * rho).collect();
                sup = sup.max(r_lambda(model, &v, lambda));
            }
        }
        if !sup.is_finite() {
            return Err(Error::Domain(format!(
                "R_lambda probe produced a non-finite value at lambda = {lambda}"
            )));
        }
        b = b.max(sup - lambda * a_lambda * a_lambda);
    }
    Ok(b.max(0.0))
}

// ---------------------------------------------------------------------------
// JSON configuration
// ---------------------------------------------------------------------------

fn field<'v>(obj: &'v Value, parent: &str, key: &str) -> Result<&'v Value> {
    obj.get(key)
        .ok_or_else(|| Error::config(join(parent, key), "missing required field"))
}

fn join(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::config(path, "expected a number"))
}

fn as_usize(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::config(path, "expected a non-negative integer"))
}

fn as_str<'v>(v: &'v Value, path: &str) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| Error::config(path, "expected a string"))
}

fn as_matrix(v: &Value, path: &str, rows: usize, cols: usize) -> Result<Mat> {
    let outer = v
        .as_array()
        .ok_or_else(|| Error::config(path, "expected an array of rows"))?;
    if outer.len() != rows {
        return Err(Error::config(
            path,
            format!("expected {rows} rows, got {}", outer.len()),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, row) in outer.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| Error::config(format!("{path}[{i}]"), "expected an array of numbers"))?;
        if row.len() != cols {
            return Err(Error::config(
                format!("{path}[{i}]"),
                format!("expected {cols} entries, got {}", row.len()),
            ));
        }
        for (j, x) in row.iter().enumerate() {
            data.push(as_f64(x, &format!("{path}[{i}][{j}]"))?);
        }
    }
    Mat::new(rows, cols, data)
}

impl DelayModel {
    /// Parse a model configuration document. Unknown `kind` values are
    /// rejected with the offending key path.
    pub fn from_json_value(root: &Value) -> Result<Self> {
        if !root.is_object() {
            return Err(Error::config("model", "expected a JSON object"));
        }
        let d = as_usize(field(root, "", "d")?, "d")?;
        let m = as_usize(field(root, "", "m")?, "m")?;
        let r = as_f64(field(root, "", "r")?, "r")?;
        if d == 0 {
            return Err(Error::config("d", "state dimension must be at least 1"));
        }
        if m == 0 {
            return Err(Error::config("m", "noise dimension must be at least 1"));
        }

        let drift_obj = field(root, "", "drift")?;
        let drift_kind = as_str(field(drift_obj, "drift", "kind")?, "drift.kind")?;
        let drift = match drift_kind {
            "linear" => Drift::Linear {
                a: as_matrix(field(drift_obj, "drift", "a")?, "drift.a", d, d)?,
            },
            "poly" => {
                let s = as_f64(field(drift_obj, "drift", "s")?, "drift.s")?;
                let a = match drift_obj.get("a") {
                    Some(v) if !v.is_null() => Some(as_matrix(v, "drift.a", d, d)?),
                    _ => None,
                };
                Drift::Poly(PolyDissipativeDrift::new(s, a)?)
            }
            other => {
                return Err(Error::config(
                    "drift.kind",
                    format!("unknown kind {other:?} (expected \"linear\" or \"poly\")"),
                ))
            }
        };

        let g_obj = field(root, "", "g")?;
        let g_kind = as_str(field(g_obj, "g", "kind")?, "g.kind")?;
        let g = match g_kind {
            "zero" => FunctionalDrift::Zero,
            "point_delay" => FunctionalDrift::PointDelay {
                g: as_matrix(field(g_obj, "g", "G")?, "g.G", d, d)?,
            },
            "distributed" => FunctionalDrift::Distributed {
                w: as_matrix(field(g_obj, "g", "W")?, "g.W", d, d)?,
            },
            other => {
                return Err(Error::config(
                    "g.kind",
                    format!("unknown kind {other:?} (expected \"zero\", \"point_delay\" or \"distributed\")"),
                ))
            }
        };

        let h_obj = field(root, "", "h")?;
        let h_kind = as_str(field(h_obj, "h", "kind")?, "h.kind")?;
        let h = match h_kind {
            "zero" => FunctionalDiffusion::Zero,
            "affine" => {
                let h0 = as_matrix(field(h_obj, "h", "H0")?, "h.H0", d, m)?;
                let h1 = match h_obj.get("H1") {
                    Some(v) if !v.is_null() => as_matrix(v, "h.H1", d, d)?,
                    _ => Mat::zero(d, d),
                };
                let h2 = match h_obj.get("H2") {
                    Some(v) if !v.is_null() => as_matrix(v, "h.H2", d, d)?,
                    _ => Mat::zero(d, d),
                };
                FunctionalDiffusion::Affine { h0, h1, h2 }
            }
            other => {
                return Err(Error::config(
                    "h.kind",
                    format!("unknown kind {other:?} (expected \"zero\" or \"affine\")"),
                ))
            }
        };

        let declared_l = match root.get("L") {
            Some(v) if !v.is_null() => Some(as_f64(v, "L")?),
            _ => None,
        };
        DelayModel::new(d, m, r, drift, g, h, declared_l)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("model", format!("invalid JSON: {e}")))?;
        Self::from_json_value(&value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::sup_norm;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn benchmark_model(s: f64) -> DelayModel {
        DelayModel::new(
            1,
            1,
            1.0,
            Drift::Poly(PolyDissipativeDrift::new(s, None).unwrap()),
            FunctionalDrift::Zero,
            FunctionalDiffusion::Zero,
            Some(1.0),
        )
        .unwrap()
    }

    #[test]
    fn trace_norm_cases() {
        assert_eq!(trace_norm(&[0.0, 0.0, 0.0, 0.0]), 0.0);
        assert_relative_eq!(trace_norm(&[1.0, 0.0, 0.0, 1.0]), 2.0f64.sqrt());
        // [[1,2],[2,0]]: 1+4+4 = 9
        assert_relative_eq!(trace_norm(&[1.0, 2.0, 2.0, 0.0]), 3.0);
    }

    #[test]
    fn evaluate_zero_segment_of_zero_model() {
        let model = benchmark_model(2.0);
        let grid = SegmentGrid::new(1.0, 0.25).unwrap();
        let zeta = Segment::constant(grid, &[0.0]).unwrap();
        let (drift, diffusion) = evaluate_coefficients(&model, &zeta).unwrap();
        assert_eq!(drift, vec![0.0]);
        assert_eq!(diffusion, vec![0.0]);
    }

    #[test]
    fn evaluate_cubic_with_point_delay() {
        // f(x) = -x^3, g(zeta) = 0.5 zeta(-r), zeta = 2 everywhere:
        // drift = -8 + 1 = -7
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Poly(PolyDissipativeDrift::new(2.0, None).unwrap()),
            FunctionalDrift::PointDelay {
                g: Mat::scalar(0.5),
            },
            FunctionalDiffusion::Zero,
            None,
        )
        .unwrap();
        let grid = SegmentGrid::new(1.0, 0.25).unwrap();
        let zeta = Segment::constant(grid, &[2.0]).unwrap();
        let (drift, _) = evaluate_coefficients(&model, &zeta).unwrap();
        assert_relative_eq!(drift[0], -7.0, max_relative = 1e-14);
    }

    #[test]
    fn evaluate_affine_diffusion() {
        // H0=1, H1=0.5, H2=0, zeta = 2: diffusion = 1 + 1 = 2
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Linear {
                a: Mat::scalar(0.0),
            },
            FunctionalDrift::Zero,
            FunctionalDiffusion::Affine {
                h0: Mat::scalar(1.0),
                h1: Mat::scalar(0.5),
                h2: Mat::scalar(0.0),
            },
            None,
        )
        .unwrap();
        let grid = SegmentGrid::new(1.0, 0.25).unwrap();
        let zeta = Segment::constant(grid, &[2.0]).unwrap();
        let (_, diffusion) = evaluate_coefficients(&model, &zeta).unwrap();
        assert_relative_eq!(diffusion[0], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn evaluate_rejects_non_finite_output() {
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Custom(Arc::new(|x: &[f64]| vec![1.0 / (x[0] - 1.0)])),
            FunctionalDrift::Zero,
            FunctionalDiffusion::Zero,
            Some(1.0),
        )
        .unwrap();
        let grid = SegmentGrid::new(1.0, 0.25).unwrap();
        let zeta = Segment::constant(grid, &[1.0]).unwrap();
        match evaluate_coefficients(&model, &zeta) {
            Err(Error::ModelEval {
                component: "drift",
                node: 0,
            }) => {}
            other => panic!("expected drift evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn verify_h0_benchmark_cubic() {
        // f(x) = -x|x|^2: ratio is -rho^2, so -rho^2 <= -4 from rho = 2
        let model = benchmark_model(2.0);
        let radii = default_probe_radii();
        assert_eq!(verify_h0(&model, &radii, 4.0).unwrap(), 2.0);
    }

    #[test]
    fn verify_h0_linear_fails() {
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Linear {
                a: Mat::scalar(-1.0),
            },
            FunctionalDrift::Zero,
            FunctionalDiffusion::Zero,
            None,
        )
        .unwrap();
        match verify_h0(&model, &default_probe_radii(), 4.0) {
            Err(Error::DissipativityProbe { .. }) => {}
            other => panic!("expected probe failure, got {other:?}"),
        }
    }

    #[test]
    fn verify_h0_quadratic_at_level_one() {
        // f(x) = -x|x|: ratio -rho <= -1 from rho = 1
        let model = benchmark_model(1.0);
        assert_eq!(verify_h0(&model, &default_probe_radii(), 1.0).unwrap(), 1.0);
    }

    #[test]
    fn verify_h0_validates_inputs() {
        let model = benchmark_model(2.0);
        assert!(verify_h0(&model, &default_probe_radii(), 0.5).is_err());
        assert!(verify_h0(&model, &[], 2.0).is_err());
        assert!(verify_h0(&model, &[2.0, 1.0], 2.0).is_err());
    }

    #[test]
    fn poly_drift_inner_product_identity() {
        // <f(v), v> = -|v|^{s+2} exactly for the a = 0 family
        let drift = PolyDissipativeDrift::new(2.0, None).unwrap();
        for v in [vec![0.5, -1.5], vec![3.0, 4.0], vec![-0.1, 0.0]] {
            let f = drift.eval(&v);
            let n = linalg::norm(&v);
            assert_relative_eq!(
                linalg::dot(&f, &v),
                -n.powi(4),
                max_relative = 1e-12,
                epsilon = 1e-300
            );
        }
    }

    #[test]
    fn builtin_l_for_the_eq11_benchmark() {
        // g = 0.5 zeta(-1), h = 0.5 (1 + zeta(-1)): L = 2*0.5 + 0.5^2 = 1.25
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Poly(PolyDissipativeDrift::new(2.0, None).unwrap()),
            FunctionalDrift::PointDelay {
                g: Mat::scalar(0.5),
            },
            FunctionalDiffusion::Affine {
                h0: Mat::scalar(0.5),
                h1: Mat::scalar(0.0),
                h2: Mat::scalar(0.5),
            },
            None,
        )
        .unwrap();
        assert_relative_eq!(model.lipschitz(), 1.25, max_relative = 1e-12);
        // D = |g(0)|^2 / L + 2 ||h(0)||^2 = 0 + 2 * 0.25 = 0.5
        assert_relative_eq!(model.d_constant(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn h2_holds_statistically_for_builtin_families() {
        let model = DelayModel::new(
            2,
            2,
            1.0,
            Drift::Poly(PolyDissipativeDrift::new(2.0, None).unwrap()),
            FunctionalDrift::PointDelay {
                g: Mat::new(2, 2, vec![0.3, -0.1, 0.2, 0.4]).unwrap(),
            },
            FunctionalDiffusion::Affine {
                h0: Mat::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
                h1: Mat::new(2, 2, vec![0.2, 0.1, 0.0, 0.3]).unwrap(),
                h2: Mat::new(2, 2, vec![0.1, 0.0, -0.2, 0.1]).unwrap(),
            },
            None,
        )
        .unwrap();
        let worst = model.h2_worst_margin(1000, 7).unwrap();
        assert!(worst <= 1e-9, "H2 violated with margin {worst}");
    }

    #[test]
    fn h2_margin_detects_understated_constant() {
        // declaring L far below the true constant must be caught
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Linear {
                a: Mat::scalar(0.0),
            },
            FunctionalDrift::PointDelay {
                g: Mat::scalar(2.0),
            },
            FunctionalDiffusion::Zero,
            Some(0.01),
        )
        .unwrap();
        assert!(model.h2_worst_margin(1000, 7).unwrap() > 0.0);
    }

    #[test]
    fn estimate_b_zero_for_benchmark() {
        // R_lambda(x) <= lambda A_lambda^2 already for the benchmark drift
        let model = benchmark_model(2.0);
        let b = estimate_b(&model, &[1.0, 2.0, 4.0, 8.0]).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn estimate_b_gate_on_h0_failure() {
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Linear {
                a: Mat::scalar(-1.0),
            },
            FunctionalDrift::Zero,
            FunctionalDiffusion::Zero,
            None,
        )
        .unwrap();
        assert!(estimate_b(&model, &[4.0]).is_err());
        let zero_f = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Linear {
                a: Mat::scalar(0.0),
            },
            FunctionalDrift::Zero,
            FunctionalDiffusion::Zero,
            None,
        )
        .unwrap();
        // f = 0 never passes the probe, so the precondition gate trips first
        assert!(estimate_b(&zero_f, &[4.0]).is_err());
    }

    #[test]
    fn r_lambda_values() {
        let model = benchmark_model(2.0);
        assert_eq!(r_lambda(&model, &[0.0], 4.0), 0.0);
        // R_lambda = -2 |x|^4 + lambda |x|^2; at |x| = 1, lambda = 4: 2
        assert_relative_eq!(r_lambda(&model, &[1.0], 4.0), 2.0, max_relative = 1e-14);
        // grid search oracle: the max over |x| is attained near (lambda/4)^(1/2)
        let mut best = f64::NEG_INFINITY;
        let mut rho = 0.0;
        while rho <= 4.0 {
            best = best.max(r_lambda(&model, &[rho], 4.0));
            rho += 1e-4;
        }
        assert_relative_eq!(best, 2.0, max_relative = 1e-6);
    }

    #[test]
    fn json_round_trip_and_key_paths() {
        let text = r#"{
            "d": 1, "m": 1, "r": 1.0,
            "drift": {"kind": "poly", "s": 2.0},
            "g": {"kind": "point_delay", "G": [[0.5]]},
            "h": {"kind": "affine", "H0": [[0.5]], "H2": [[0.5]]},
            "L": 1.25
        }"#;
        let model = DelayModel::from_json_str(text).unwrap();
        assert_eq!(model.d(), 1);
        assert_relative_eq!(model.lipschitz(), 1.25);

        let bad_kind = text.replace("point_delay", "banana");
        match DelayModel::from_json_str(&bad_kind) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "g.kind"),
            other => panic!("expected config error, got {other:?}"),
        }

        let missing = r#"{"d": 1, "m": 1, "r": 1.0, "drift": {"kind": "poly", "s": 2.0}, "g": {"kind": "zero"}}"#;
        match DelayModel::from_json_str(missing) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "h"),
            other => panic!("expected config error, got {other:?}"),
        }

        let bad_shape = text.replace("[[0.5]], \"H2\"", "[[0.5, 1.0]], \"H2\"");
        match DelayModel::from_json_str(&bad_shape) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "h.H0[0]"),
            other => panic!("expected config error, got {other:?}"),
        }

        let distributed = text.replace(
            r#""g": {"kind": "point_delay", "G": [[0.5]]}"#,
            r#""g": {"kind": "distributed", "W": [[0.25]]}"#,
        );
        let model = DelayModel::from_json_str(&distributed).unwrap();
        let grid = SegmentGrid::new(1.0, 0.25).unwrap();
        let zeta = Segment::constant(grid, &[2.0]).unwrap();
        assert_relative_eq!(model.eval_g(&zeta)[0], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn distributed_delay_is_a_trapezoid_average() {
        let model = DelayModel::new(
            1,
            1,
            1.0,
            Drift::Linear {
                a: Mat::scalar(0.0),
            },
            FunctionalDrift::Distributed {
                w: Mat::scalar(1.0),
            },
            FunctionalDiffusion::Zero,
            None,
        )
        .unwrap();
        let grid = SegmentGrid::new(1.0, 0.25).unwrap();
        // constant segment c: trapezoid integral over [-r,0] is c * r
        let zeta = Segment::constant(grid.clone(), &[3.0]).unwrap();
        assert_relative_eq!(model.eval_g(&zeta)[0], 3.0, max_relative = 1e-12);
        // linear ramp theta -> theta integrates to -r^2/2 (trapezoid is exact)
        let ramp = Segment::from_fn(grid, 1, |theta| vec![theta]).unwrap();
        assert_relative_eq!(model.eval_g(&ramp)[0], -0.5, max_relative = 1e-12);
    }

    proptest! {
        // trace norm dominates the operator norm
        #[test]
        fn trace_norm_dominates_operator_norm(entries in proptest::collection::vec(-10f64..10.0, 6)) {
            let tn = trace_norm(&entries);
            let on = linalg::operator_norm(&entries, 2, 3);
            prop_assert!(tn >= on - 1e-9 * on.abs().max(1.0));
        }

        // <f(v), v> = -|v|^{s+2} for the benchmark family
        #[test]
        fn poly_identity_random(v in proptest::collection::vec(-20f64..20.0, 3), s in 0.5f64..3.0) {
            let drift = PolyDissipativeDrift::new(s, None).unwrap();
            let f = drift.eval(&v);
            let n = linalg::norm(&v);
            let expected = -n.powf(s + 2.0);
            let got = linalg::dot(&f, &v);
            prop_assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1e-12));
        }
    }

    #[test]
    fn sup_norm_matches_interpolant_max() {
        // the linear interpolant attains its max at a node, so the discrete
        // norm equals the interpolant sup
        let grid = SegmentGrid::new(1.0, 0.25).unwrap();
        let seg = Segment::new(grid, 1, vec![1.0, -3.0, 2.0, 0.5, 0.0]).unwrap();
        let discrete = sup_norm(&seg);
        let mut dense: f64 = 0.0;
        let mut theta = -1.0;
        while theta <= 0.0 {
            dense = dense.max(seg.value_at(theta).unwrap()[0].abs());
            theta += 1e-4;
        }
        assert!(discrete >= dense - 1e-9);
    }
}
