//! Time stepping for the delay equation: explicit Euler (a negative control
//! under superlinear drift), drift-tamed Euler, and a split-step scheme that
//! treats the pointwise drift implicitly. The functionals g and h are always
//! evaluated at the pre-step segment; only f, where the superlinearity
//! lives, is ever tamed or made implicit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{DelayModel, Drift};
use crate::noise::NoiseStream;
use crate::segment::{sup_norm, Segment, SegmentGrid};

/// A trajectory is frozen once its norm passes this threshold or turns
/// non-finite; it then stops consuming noise and is excluded from moment
/// statistics (but still counts toward the explosion rate).
pub const EXPLOSION_THRESHOLD: f64 = 1e12;

const IMPLICIT_TOL: f64 = 1e-12;
const IMPLICIT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Plain Euler-Maruyama. Diverges under superlinear drift; kept as the
    /// documented negative control.
    ExplicitEm,
    TamedEm,
    SplitStepImplicit,
}

impl SchemeKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "explicit_em" => Ok(SchemeKind::ExplicitEm),
            "tamed_em" => Ok(SchemeKind::TamedEm),
            "split_step_implicit" => Ok(SchemeKind::SplitStepImplicit),
            other => Err(Error::config(
                "scheme",
                format!(
                    "unknown scheme {other:?} (expected \"explicit_em\", \"tamed_em\" or \"split_step_implicit\")"
                ),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::ExplicitEm => "explicit_em",
            SchemeKind::TamedEm => "tamed_em",
            SchemeKind::SplitStepImplicit => "split_step_implicit",
        }
    }
}

/// F / (1 + dt |F|): direction preserved, norm capped at 1/dt.
pub fn tamed_drift(f: &[f64], dt: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 + dt * linalg::norm(f));
    f.iter().map(|x| x * scale).collect()
}

/// Solve y = x + dt f(y) by damped Newton with a finite-difference Jacobian.
/// Terminates when |y - x - dt f(y)| <= 1e-12 (1 + |x|).
pub fn implicit_drift_solve<F>(x: &[f64], dt: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let d = x.len();
    let tol = IMPLICIT_TOL * (1.0 + linalg::norm(x));
    let residual = |y: &[f64]| -> Vec<f64> {
        let fy = f(y);
        (0..d).map(|i| y[i] - x[i] - dt * fy[i]).collect()
    };
    let mut y = x.to_vec();
    let mut res = residual(&y);
    let mut res_norm = linalg::norm(&res);
    for iter in 0..IMPLICIT_MAX_ITER {
        if res_norm <= tol {
            return Ok(y);
        }
        // J = I - dt Df(y), forward differences column by column
        let fy = f(&y);
        let mut jac = vec![0.0; d * d];
        for j in 0..d {
            let h = 1e-7 * (1.0 + y[j].abs());
            let mut yh = y.clone();
            yh[j] += h;
            let fyh = f(&yh);
            for i in 0..d {
                let df = (fyh[i] - fy[i]) / h;
                jac[i * d + j] = if i == j { 1.0 } else { 0.0 } - dt * df;
            }
        }
        let neg_res: Vec<f64> = res.iter().map(|v| -v).collect();
        let delta = linalg::solve_dense(&jac, &neg_res, d).ok_or(Error::SolverNonConvergence {
            iterations: iter,
            residual: res_norm,
        })?;
        // backtrack along the Newton direction until the residual shrinks
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = (0..d).map(|i| y[i] + alpha * delta[i]).collect();
            let trial_res = residual(&trial);
            let trial_norm = linalg::norm(&trial_res);
            if trial_norm.is_finite() && trial_norm <= (1.0 - 0.5 * alpha) * res_norm {
                y = trial;
                res = trial_res;
                res_norm = trial_norm;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-8 {
                return Err(Error::SolverNonConvergence {
                    iterations: iter,
                    residual: res_norm,
                });
            }
        }
    }
    if res_norm <= tol {
        Ok(y)
    } else {
        Err(Error::SolverNonConvergence {
            iterations: IMPLICIT_MAX_ITER,
            residual: res_norm,
        })
    }
}

/// Radial solve for the benchmark family f(y) = a y - y |y|^s with a = 0:
/// by rotational symmetry y = rho * x/|x| with rho + dt rho^{s+1} = |x|.
/// Newton on the scalar equation with a bisection fallback; the left side is
/// strictly increasing so the root is unique.
fn radial_implicit_solve(x_norm: f64, dt: f64, s: f64) -> f64 {
    if x_norm == 0.0 {
        return 0.0;
    }
    let phi = |rho: f64| rho + dt * rho.powf(s + 1.0) - x_norm;
    let mut rho = x_norm.min((x_norm / dt).powf(1.0 / (s + 1.0)));
    for _ in 0..100 {
        let value = phi(rho);
        if value.abs() <= IMPLICIT_TOL * (1.0 + x_norm) {
            return rho;
        }
        let deriv = 1.0 + dt * (s + 1.0) * rho.powf(s);
        let next = rho - value / deriv;
        if next.is_finite() && next > 0.0 {
            rho = next;
        } else {
            break;
        }
    }
    // bisection on [0, x_norm]; phi(0) < 0 <= phi(x_norm)
    let (mut lo, mut hi) = (0.0, x_norm);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn implicit_step_drift(model: &DelayModel, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    match model.drift() {
        Drift::Poly(p) if p.a.is_none() => {
            let norm = linalg::norm(x);
            let rho = radial_implicit_solve(norm, dt, p.s);
            if norm == 0.0 {
                Ok(vec![0.0; x.len()])
            } else {
                Ok(x.iter().map(|v| v * (rho / norm)).collect())
            }
        }
        _ => implicit_drift_solve(x, dt, |y| model.eval_f(y)),
    }
}

/// The ring-buffered state of one trajectory: the last delay window of
/// states plus the step counter. Extracting the segment at the current time
/// yields the buffer in increasing-theta order.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    segment: Segment,
    scheme: SchemeKind,
    step_index: usize,
}

impl TrajectoryState {
    /// Seed the buffer with the initial segment phi.
    pub fn new(scheme: SchemeKind, phi: Segment) -> Self {
        TrajectoryState {
            segment: phi,
            scheme,
            step_index: 0,
        }
    }

    pub fn segment(&self) -> &Segment {
        &self.segment
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn dt(&self) -> f64 {
        self.segment.grid().dt()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn current(&self) -> &[f64] {
        self.segment.head()
    }

    pub fn advance(&mut self, state: &[f64]) {
        self.segment.push(state);
        self.step_index += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Advanced {
        state: Vec<f64>,
        /// h(x_{t_k}) dW_k, the increment of the noise integral J.
        noise_term: Vec<f64>,
    },
    /// The proposed state left the admissible region; the trajectory is to
    /// be frozen at its last finite state.
    Exploded,
}

/// One scheme step from the current trajectory state.
pub fn step(state: &TrajectoryState, model: &DelayModel, dw: &[f64]) -> Result<StepOutcome> {
    if dw.len() != model.m() {
        return Err(Error::config(
            "dw",
            format!(
                "noise increment has dimension {}, model needs {}",
                dw.len(),
                model.m()
            ),
        ));
    }
    let dt = state.dt();
    let segment = state.segment();
    let x = segment.head();
    let g = model.eval_g(segment);
    let h = model.eval_h(segment);
    let noise_term = linalg::matvec(&h, model.d(), model.m(), dw);

    let mut next = match state.scheme {
        SchemeKind::ExplicitEm | SchemeKind::TamedEm => {
            let f = model.eval_f(x);
            let f = if state.scheme == SchemeKind::TamedEm {
                tamed_drift(&f, dt)
            } else {
                f
            };
            let mut out = x.to_vec();
            for i in 0..out.len() {
                out[i] += (f[i] + g[i]) * dt;
            }
            out
        }
        SchemeKind::SplitStepImplicit => {
            let mut y = implicit_step_drift(model, x, dt)?;
            for i in 0..y.len() {
                y[i] += g[i] * dt;
            }
            y
        }
    };
    for i in 0..next.len() {
        next[i] += noise_term[i];
    }
    let norm = linalg::norm(&next);
    if !norm.is_finite() || norm > EXPLOSION_THRESHOLD {
        return Ok(StepOutcome::Exploded);
    }
    Ok(StepOutcome::Advanced {
        state: next,
        noise_term,
    })
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub scheme: SchemeKind,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    /// Record the running noise integral J(t) = sum h(x_{t_k}) dW_k.
    pub record_noise_integral: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Node-major states over the whole run, storage index i at time
    /// t = -r + i dt; length (n_hist + n_steps + 1) * d.
    states: Vec<f64>,
    /// J at run times 0, dt, ..., T when recorded; length (n_steps + 1) * d.
    noise_integral: Option<Vec<f64>>,
    /// Step index at which the trajectory was frozen.
    exploded_at: Option<usize>,
    sup_abs: f64,
}

impl Trajectory {
    pub fn exploded(&self) -> bool {
        self.exploded_at.is_some()
    }

    pub fn exploded_at(&self) -> Option<usize> {
        self.exploded_at
    }

    /// Sup over the whole stored path (history included) of |x(t)|.
    pub fn sup_abs(&self) -> f64 {
        self.sup_abs
    }
}

/// N trajectories of the segment process on [-r, T] plus their metadata.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: SegmentGrid,
    d: usize,
    n_steps: usize,
    scheme: SchemeKind,
    seed: u64,
    trajectories: Vec<Trajectory>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &SegmentGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_paths(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt()
    }

    /// Stored points per trajectory: history nodes plus run states.
    pub fn points_per_path(&self) -> usize {
        self.grid.n() + self.n_steps + 1
    }

    pub fn trajectory(&self, path: usize) -> &Trajectory {
        &self.trajectories[path]
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Storage index of run time t (t = 0 maps to the end of the history).
    pub fn storage_index(&self, t: f64) -> Result<usize> {
        let dt = self.dt();
        if t < -self.grid.r() - 1e-12 || t > self.horizon() + 1e-9 {
            return Err(Error::config(
                "t",
                format!("time {t} outside [-{}, {}]", self.grid.r(), self.horizon()),
            ));
        }
        let pos = (t + self.grid.r()) / dt;
        let idx = pos.round();
        if (pos - idx).abs() > 1e-6 {
            return Err(Error::config(
                "t",
                format!("time {t} is not a multiple of dt = {dt}"),
            ));
        }
        Ok(idx as usize)
    }

    /// State at storage index `idx` (0 is theta = -r).
    pub fn state(&self, path: usize, idx: usize) -> &[f64] {
        let d = self.d;
        &self.trajectories[path].states[idx * d..(idx + 1) * d]
    }

    /// Extract the segment x_t at a run time t >= 0 (a multiple of dt).
    pub fn segment_at(&self, path: usize, t: f64) -> Result<Segment> {
        let end = self.storage_index(t)?;
        if end < self.grid.n() {
            return Err(Error::config(
                "t",
                format!("segment at t = {t} reaches before -r"),
            ));
        }
        let start = end - self.grid.n();
        let d = self.d;
        let values = self.trajectories[path].states[start * d..(end + 1) * d].to_vec();
        Segment::new(self.grid.clone(), d, values)
    }

    /// Noise integral J at run step k when it was recorded.
    pub fn noise_integral(&self, path: usize, k: usize) -> Option<&[f64]> {
        let d = self.d;
        self.trajectories[path]
            .noise_integral
            .as_ref()
            .map(|j| &j[k * d..(k + 1) * d])
    }

    pub fn records_noise_integral(&self) -> bool {
        self.trajectories
            .first()
            .is_some_and(|t| t.noise_integral.is_some())
    }

    pub fn explosion_rate(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().filter(|t| t.exploded()).count() as f64
            / self.trajectories.len() as f64
    }

    /// Indices of the paths that stayed finite.
    pub fn surviving_paths(&self) -> Vec<usize> {
        (0..self.num_paths())
            .filter(|&p| !self.trajectories[p].exploded())
            .collect()
    }
}

/// Run N independent trajectories. Deterministic for fixed inputs: each
/// trajectory derives its own noise stream from (seed, path id), and results
/// are collected in path order regardless of the worker count.
pub fn simulate_ensemble(
    model: &DelayModel,
    phi: &Segment,
    config: &SimulationConfig,
) -> Result<PathEnsemble> {
    let grid = phi.grid().clone();
    if (grid.r() - model.r()).abs() > 1e-12 * model.r().max(1.0) {
        return Err(Error::config(
            "phi.grid",
            format!(
                "initial segment delay {} does not match model delay {}",
                grid.r(),
                model.r()
            ),
        ));
    }
    if phi.dim() != model.d() {
        return Err(Error::config(
            "phi",
            format!(
                "initial segment dimension {} does not match model dimension {}",
                phi.dim(),
                model.d()
            ),
        ));
    }
    if phi.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::config(
            "phi",
            "initial segment contains non-finite values",
        ));
    }
    if config.paths == 0 {
        return Err(Error::config("paths", "at least one path is required"));
    }
    let dt = grid.dt();
    if !(config.horizon > 0.0) {
        return Err(Error::config(
            "T",
            format!("horizon must be positive, got {}", config.horizon),
        ));
    }
    let steps_f = config.horizon / dt;
    let n_steps = steps_f.round();
    if (steps_f - n_steps).abs() > 1e-6 {
        return Err(Error::config(
            "T",
            format!("horizon {} is not a multiple of dt = {dt}", config.horizon),
        ));
    }
    let n_steps = n_steps as usize;

    let trajectories: Vec<Trajectory> = (0..config.paths)
        .into_par_iter()
        .map(|path| simulate_one(model, phi, config, n_steps, path as u64))
        .collect::<Result<Vec<_>>>()?;

    Ok(PathEnsemble {
        grid,
        d: model.d(),
        n_steps,
        scheme: config.scheme,
        seed: config.seed,
        trajectories,
    })
}

fn simulate_one(
    model: &DelayModel,
    phi: &Segment,
    config: &SimulationConfig,
    n_steps: usize,
    path_id: u64,
) -> Result<Trajectory> {
    let d = model.d();
    let grid = phi.grid();
    let total = grid.n() + n_steps + 1;
    let mut states = Vec::with_capacity(total * d);
    states.extend_from_slice(phi.values());
    let mut sup_abs = (0..grid.num_nodes())
        .map(|i| linalg::norm(phi.node(i)))
        .fold(0.0, f64::max);

    let mut stream = NoiseStream::new(config.seed, path_id, grid.dt(), model.m());
    let mut state = TrajectoryState::new(config.scheme, phi.clone());
    let mut dw = vec![0.0; model.m()];
    let mut noise_integral = config.record_noise_integral.then(|| {
        let mut j = Vec::with_capacity((n_steps + 1) * d);
        j.extend(std::iter::repeat_n(0.0, d));
        j
    });
    let mut exploded_at = None;

    for k in 0..n_steps {
        if exploded_at.is_some() {
            // frozen: repeat the last state, stop consuming noise
            let last: Vec<f64> = state.current().to_vec();
            states.extend_from_slice(&last);
            if let Some(j) = noise_integral.as_mut() {
                let frozen: Vec<f64> = j[j.len() - d..].to_vec();
                j.extend_from_slice(&frozen);
            }
            continue;
        }
        stream.fill_increment(&mut dw);
        match step(&state, model, &dw)? {
            StepOutcome::Advanced {
                state: next,
                noise_term,
            } => {
                states.extend_from_slice(&next);
                sup_abs = sup_abs.max(linalg::norm(&next));
                if let Some(j) = noise_integral.as_mut() {
                    let prev = j[j.len() - d..].to_vec();
                    j.extend(prev.iter().zip(&noise_term).map(|(a, b)| a + b));
                }
                state.advance(&next);
            }
            StepOutcome::Exploded => {
                exploded_at = Some(k);
                let last: Vec<f64> = state.current().to_vec();
                states.extend_from_slice(&last);
                if let Some(j) = noise_integral.as_mut() {
                    let frozen: Vec<f64> = j[j.len() - d..].to_vec();
                    j.extend_from_slice(&frozen);
                }
            }
        }
    }

    Ok(Trajectory {
        states,
        noise_integral,
        exploded_at,
        sup_abs,
    })
}

/// Pathwise form of the elementary segment-norm inequality: for each path,
/// sup_t ||x_t||^p <= ||phi||^p + sup_{0<=s<=T} |x(s)|^p on the grid.
/// Returns (lhs, rhs) per path; callers assert lhs <= rhs exactly.
pub fn segment_sup_inequality(ensemble: &PathEnsemble, phi: &Segment, p: f64) -> Vec<(f64, f64)> {
    let n_hist = ensemble.grid().n();
    (0..ensemble.num_paths())
        .map(|path| {
            let total = ensemble.points_per_path();
            let mut sup_all: f64 = 0.0;
            let mut sup_run: f64 = 0.0;
            for idx in 0..total {
                let norm = linalg::norm(ensemble.state(path, idx));
                sup_all = sup_all.max(norm);
                if idx >= n_hist {
                    sup_run = sup_run.max(norm);
                }
            }
            (sup_all.powf(p), sup_norm(phi).powf(p) + sup_run.powf(p))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        DelayModel, Drift, FunctionalDiffusion, FunctionalDrift, Mat, PolyDissipativeDrift,
    };
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn linear_model(rate: f64) -> DelayModel {
        DelayModel::new(
            1,
            1,
            0.1,
            Drift::Linear {
                a: Mat::scalar(rate),
            },
            FunctionalDrift::Zero,
            FunctionalDiffusion::Zero,
            None,
        )
        .unwrap()
    }

    fn cubic_model(r: f64) -> DelayModel {
        DelayModel::new(
            1,
            1,
            r,
            Drift::Poly(PolyDissipativeDrift::new(2.0, None).unwrap()),
            FunctionalDrift::Zero,
            FunctionalDiffusion::Zero,
            None,
        )
        .unwrap()
    }

    fn eq11_model() -> DelayModel {
        DelayModel::new(
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
        .unwrap()
    }

    #[test]
    fn scheme_names_round_trip() {
        for name in ["explicit_em", "tamed_em", "split_step_implicit"] {
            assert_eq!(SchemeKind::parse(name).unwrap().name(), name);
        }
        assert!(SchemeKind::parse("rk4").is_err());
    }

    #[test]
    fn tamed_drift_examples() {
        assert_eq!(tamed_drift(&[0.0, 0.0], 0.1), vec![0.0, 0.0]);
        // F = -1000, dt = 0.01: -1000/11
        let t = tamed_drift(&[-1000.0], 0.01);
        assert_relative_eq!(t[0], -1000.0 / 11.0, max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn tamed_norm_bound(f in proptest::collection::vec(-1e8f64..1e8, 2), dt in 1e-4f64..1.0) {
            let t = tamed_drift(&f, dt);
            let nf = linalg::norm(&f);
            let nt = linalg::norm(&t);
            prop_assert!(nt <= nf.min(1.0 / dt) * (1.0 + 1e-12));
            // direction preserved
            if nf > 1e-6 {
                let cos = linalg::dot(&f, &t) / (nf * nt.max(1e-300));
                prop_assert!(cos > 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn implicit_solve_identity_for_zero_drift() {
        let y = implicit_drift_solve(&[3.0, -4.0], 0.5, |_| vec![0.0, 0.0]).unwrap();
        assert_eq!(y, vec![3.0, -4.0]);
    }

    #[test]
    fn implicit_solve_linear() {
        // y = x + dt (-y) => y = x / (1 + dt); x = 3, dt = 0.5 => 2
        let y = implicit_drift_solve(&[3.0], 0.5, |v| vec![-v[0]]).unwrap();
        assert_relative_eq!(y[0], 2.0, max_relative = 1e-12);
    }

    /// Independent bisection oracle for the scalar equation y + dt y^3 = x.
    fn bisect_cubic(x: f64, dt: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, x.max(1.0));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + dt * mid * mid * mid < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn implicit_solve_cubic_matches_bisection_oracle() {
        let oracle = bisect_cubic(10.0, 0.1);
        // frozen from the oracle: root of y + 0.1 y^3 = 10
        assert_relative_eq!(oracle, 3.930027389711051, max_relative = 1e-10);
        let y = implicit_drift_solve(&[10.0], 0.1, |v| vec![-v[0] * v[0] * v[0]]).unwrap();
        assert_relative_eq!(y[0], oracle, max_relative = 1e-9);
        // the radial fast path must agree with the generic solver
        assert_relative_eq!(
            radial_implicit_solve(10.0, 0.1, 2.0),
            oracle,
            max_relative = 1e-10
        );
    }

    fn make_state(model: &DelayModel, scheme: SchemeKind, value: f64, dt: f64) -> TrajectoryState {
        let grid = SegmentGrid::new(model.r(), dt).unwrap();
        TrajectoryState::new(scheme, Segment::constant(grid, &[value]).unwrap())
    }

    #[test]
    fn step_linear_decay_explicit() {
        let model = linear_model(-1.0);
        let state = make_state(&model, SchemeKind::ExplicitEm, 1.0, 0.1);
        match step(&state, &model, &[0.0]).unwrap() {
            StepOutcome::Advanced { state, .. } => {
                assert_relative_eq!(state[0], 0.9, max_relative = 1e-15)
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn step_explicit_overshoots_cubic() {
        // x + dt f(x) = 10 + 0.1 (-1000) = -90: the instability in one step
        let model = cubic_model(0.1);
        let state = make_state(&model, SchemeKind::ExplicitEm, 10.0, 0.1);
        match step(&state, &model, &[0.0]).unwrap() {
            StepOutcome::Advanced { state, .. } => {
                assert_relative_eq!(state[0], -90.0, max_relative = 1e-14)
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn step_split_step_uses_implicit_root() {
        let model = cubic_model(0.1);
        let state = make_state(&model, SchemeKind::SplitStepImplicit, 10.0, 0.1);
        match step(&state, &model, &[0.0]).unwrap() {
            StepOutcome::Advanced { state, .. } => {
                assert_relative_eq!(state[0], bisect_cubic(10.0, 0.1), max_relative = 1e-9)
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn constant_path_is_exact() {
        let model = linear_model(0.0);
        let grid = SegmentGrid::new(0.1, 0.01).unwrap();
        let phi = Segment::constant(grid, &[2.5]).unwrap();
        let cfg = SimulationConfig {
            scheme: SchemeKind::TamedEm,
            horizon: 1.0,
            paths: 3,
            seed: 9,
            record_noise_integral: false,
        };
        let ens = simulate_ensemble(&model, &phi, &cfg).unwrap();
        for p in 0..3 {
            for idx in 0..ens.points_per_path() {
                assert_eq!(ens.state(p, idx), &[2.5]);
            }
        }
    }

    #[test]
    fn exponential_decay_matches_analytic_solution() {
        let model = linear_model(-1.0);
        let grid = SegmentGrid::new(0.1, 1e-3).unwrap();
        let phi = Segment::constant(grid, &[1.0]).unwrap();
        for scheme in [
            SchemeKind::ExplicitEm,
            SchemeKind::TamedEm,
            SchemeKind::SplitStepImplicit,
        ] {
            let cfg = SimulationConfig {
                scheme,
                horizon: 1.0,
                paths: 1,
                seed: 0,
                record_noise_integral: false,
            };
            let ens = simulate_ensemble(&model, &phi, &cfg).unwrap();
            let idx = ens.storage_index(1.0).unwrap();
            let x1 = ens.state(0, idx)[0];
            assert!(
                (x1 - (-1.0f64).exp()).abs() < 5e-3,
                "{}: x(1) = {x1}",
                scheme.name()
            );
        }
    }

    #[test]
    fn segment_shift_property() {
        let model = eq11_model();
        let grid = SegmentGrid::new(1.0, 0.05).unwrap();
        let phi = Segment::constant(grid, &[1.0]).unwrap();
        let cfg = SimulationConfig {
            scheme: SchemeKind::TamedEm,
            horizon: 2.0,
            paths: 2,
            seed: 31,
            record_noise_integral: false,
        };
        let ens = simulate_ensemble(&model, &phi, &cfg).unwrap();
        let n = ens.grid().n();
        let dt = ens.dt();
        for path in 0..2 {
            for k in 0..ens.n_steps() {
                let t = k as f64 * dt;
                let seg = ens.segment_at(path, t).unwrap();
                let idx = ens.storage_index(t).unwrap();
                assert_eq!(seg.head(), ens.state(path, idx));
                if k < ens.n_steps() {
                    let next = ens.segment_at(path, t + dt).unwrap();
                    assert_eq!(next.node(n - 1), ens.state(path, idx));
                }
            }
        }
    }

    #[test]
    fn determinism_across_thread_counts() {
        let model = eq11_model();
        let grid = SegmentGrid::new(1.0, 0.05).unwrap();
        let phi = Segment::constant(grid, &[1.0]).unwrap();
        let cfg = SimulationConfig {
            scheme: SchemeKind::TamedEm,
            horizon: 3.0,
            paths: 16,
            seed: 123,
            record_noise_integral: true,
        };
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap();
        let a = pool1
            .install(|| simulate_ensemble(&model, &phi, &cfg))
            .unwrap();
        let b = pool8
            .install(|| simulate_ensemble(&model, &phi, &cfg))
            .unwrap();
        for p in 0..16 {
            assert_eq!(a.trajectory(p).states, b.trajectory(p).states);
            assert_eq!(
                a.trajectory(p).noise_integral,
                b.trajectory(p).noise_integral
            );
        }
    }

    #[test]
    fn tamed_benchmark_never_explodes() {
        let model = eq11_model();
        let grid = SegmentGrid::new(1.0, 0.01).unwrap();
        let phi = Segment::constant(grid, &[1.0]).unwrap();
        let cfg = SimulationConfig {
            scheme: SchemeKind::TamedEm,
            horizon: 50.0,
            paths: 1000,
            seed: 7,
            record_noise_integral: false,
        };
        let ens = simulate_ensemble(&model, &phi, &cfg).unwrap();
        assert_eq!(ens.explosion_rate(), 0.0);
    }

    #[test]
    fn remark_inequality_holds_pathwise() {
        let model = eq11_model();
        let grid = SegmentGrid::new(1.0, 0.02).unwrap();
        let phi = Segment::constant(grid, &[1.5]).unwrap();
        let cfg = SimulationConfig {
            scheme: SchemeKind::SplitStepImplicit,
            horizon: 5.0,
            paths: 50,
            seed: 99,
            record_noise_integral: false,
        };
        let ens = simulate_ensemble(&model, &phi, &cfg).unwrap();
        for p in [2.0, 6.0] {
            for (lhs, rhs) in segment_sup_inequality(&ens, &phi, p) {
                assert!(lhs <= rhs, "p={p}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn simulate_validates_configuration() {
        let model = linear_model(-1.0);
        let grid = SegmentGrid::new(0.1, 0.01).unwrap();
        let phi = Segment::constant(grid.clone(), &[1.0]).unwrap();
        let bad_horizon = SimulationConfig {
            scheme: SchemeKind::ExplicitEm,
            horizon: 0.0155,
            paths: 1,
            seed: 0,
            record_noise_integral: false,
        };
        assert!(simulate_ensemble(&model, &phi, &bad_horizon).is_err());
        let no_paths = SimulationConfig {
            scheme: SchemeKind::ExplicitEm,
            horizon: 1.0,
            paths: 0,
            seed: 0,
            record_noise_integral: false,
        };
        assert!(simulate_ensemble(&model, &phi, &no_paths).is_err());
        let wrong_r = Segment::constant(SegmentGrid::new(0.2, 0.01).unwrap(), &[1.0]).unwrap();
        assert!(simulate_ensemble(&model, &wrong_r, &no_paths).is_err());
    }

    #[test]
    fn noise_integral_accumulates_h_dw() {
        // h = 1 constant: J(t) must equal x(t) - x(0) for f = g = 0
        let model = DelayModel::new(
            1,
            1,
            0.1,
            Drift::Linear {
                a: Mat::scalar(0.0),
            },
            FunctionalDrift::Zero,
            FunctionalDiffusion::Affine {
                h0: Mat::scalar(1.0),
                h1: Mat::scalar(0.0),
                h2: Mat::scalar(0.0),
            },
            None,
        )
        .unwrap();
        let grid = SegmentGrid::new(0.1, 0.01).unwrap();
        let phi = Segment::constant(grid, &[0.0]).unwrap();
        let cfg = SimulationConfig {
            scheme: SchemeKind::ExplicitEm,
            horizon: 1.0,
            paths: 4,
            seed: 5,
            record_noise_integral: true,
        };
        let ens = simulate_ensemble(&model, &phi, &cfg).unwrap();
        for p in 0..4 {
            for k in 0..=ens.n_steps() {
                let t = k as f64 * ens.dt();
                let idx = ens.storage_index(t).unwrap();
                let j = ens.noise_integral(p, k).unwrap()[0];
                assert_relative_eq!(
                    j,
                    ens.state(p, idx)[0],
                    max_relative = 1e-12,
                    epsilon = 1e-12
                );
            }
        }
    }
}
