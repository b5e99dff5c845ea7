//! The experiment commands behind the CLI subcommands. Each command
//! resolves its configuration up front, runs inside the context's worker
//! pool, writes its outputs atomically, and finishes with a manifest that
//! replays the run bit-exactly.

use std::path::Path;

use serde_json::Value;

use crate::config::{ResolvedModel, ResolvedPhi};
use crate::context::{
    echo, get, get_bool, get_f64, get_f64_list, get_str, get_u64, get_usize, RunContext,
};
use crate::output::{Csv, CsvCell, Json};
use sfde_core::diagnostics::{
    feller_gap, kolmogorov_ratio, modulus_pass, modulus_table, shifted_segment, FellerExperiment,
};
use sfde_core::factorization::{check_factorization_bound, FactorizationConstants, IntegrandSpec};
use sfde_core::integrate::{simulate_ensemble, PathEnsemble, SchemeKind, SimulationConfig};
use sfde_core::lyapunov::{
    lambda_star_search, run_lyapunov_experiment, CubeSplit, FeasibilitySearch,
    LyapunovExperimentConfig,
};
use sfde_core::measure::{collect_measure, invariance_test, InvarianceTestConfig, ProjectionSpec};
use sfde_core::segment::{Segment, SegmentGrid};
use sfde_core::{Error, Result};

fn scheme_json(scheme: SchemeKind) -> Json {
    Json::Str(scheme.name().to_string())
}

fn build_phi(model: &ResolvedModel, phi: &ResolvedPhi, dt: f64) -> Result<Segment> {
    let grid = SegmentGrid::new(model.model.r(), dt)?;
    phi.build(grid, model.model.d())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimulateSpec {
    pub model: ResolvedModel,
    pub phi: ResolvedPhi,
    pub scheme: SchemeKind,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    pub record_noise_integral: bool,
    pub dump_paths: bool,
}

impl SimulateSpec {
    pub fn manifest_config(&self) -> Json {
        let mut cfg = Json::object();
        cfg.push("model", echo(&self.model.document));
        cfg.push("phi", echo(&self.phi.document));
        cfg.push("scheme", scheme_json(self.scheme));
        cfg.push("dt", Json::Float(self.dt));
        cfg.push("T", Json::Float(self.horizon));
        cfg.push("paths", Json::Uint(self.paths as u64));
        cfg.push("seed", Json::Uint(self.seed));
        cfg.push(
            "record_noise_integral",
            Json::Bool(self.record_noise_integral),
        );
        cfg.push("dump_paths", Json::Bool(self.dump_paths));
        cfg
    }

    pub fn from_manifest(cfg: &Value) -> Result<Self> {
        Ok(SimulateSpec {
            model: ResolvedModel::from_document(get(cfg, "model")?.clone())?,
            phi: ResolvedPhi {
                document: get(cfg, "phi")?.clone(),
            },
            scheme: SchemeKind::parse(get_str(cfg, "scheme")?)?,
            dt: get_f64(cfg, "dt")?,
            horizon: get_f64(cfg, "T")?,
            paths: get_usize(cfg, "paths")?,
            seed: get_u64(cfg, "seed")?,
            record_noise_integral: get_bool(cfg, "record_noise_integral")?,
            dump_paths: get_bool(cfg, "dump_paths")?,
        })
    }

    pub fn run(&self, ctx: &RunContext) -> Result<()> {
        let phi = build_phi(&self.model, &self.phi, self.dt)?;
        let sim = SimulationConfig {
            scheme: self.scheme,
            horizon: self.horizon,
            paths: self.paths,
            seed: self.seed,
            record_noise_integral: self.record_noise_integral,
        };
        let ensemble = ctx.install(|| simulate_ensemble(&self.model.model, &phi, &sim))?;

        let d = ensemble.dim();
        let mut header: Vec<String> = vec!["path_id".into(), "exploded".into(), "sup_abs".into()];
        for c in 0..d {
            header.push(format!("x_end_{c}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = Csv::new(&header_refs);
        let last = ensemble.points_per_path() - 1;
        for path in 0..ensemble.num_paths() {
            let trajectory = ensemble.trajectory(path);
            let mut cells = vec![
                CsvCell::Uint(path as u64),
                CsvCell::Bool(trajectory.exploded()),
                CsvCell::Float(trajectory.sup_abs()),
            ];
            let terminal = ensemble.state(path, last);
            cells.extend(terminal.iter().map(|&x| CsvCell::Float(x)));
            csv.row(&cells);
        }
        let mut outputs = vec![ctx.write("summary.csv", csv.finish().as_bytes())?];

        if self.dump_paths {
            outputs.push(ctx.write("paths.bin", &path_dump(&ensemble))?);
        }
        ctx.write_manifest("simulate", self.manifest_config(), &outputs)?;
        Ok(())
    }
}

/// Little-endian trajectory dump: header {d: u32, n_steps: u64, dt: f64}
/// where n_steps counts the stored points per path (the delay window plus
/// the run, first point at t = -r), followed by the paths in order, each as
/// n_steps rows of d doubles.
fn path_dump(ensemble: &PathEnsemble) -> Vec<u8> {
    let points = ensemble.points_per_path();
    let d = ensemble.dim();
    let mut bytes = Vec::with_capacity(20 + ensemble.num_paths() * points * d * 8);
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&(points as u64).to_le_bytes());
    bytes.extend_from_slice(&ensemble.dt().to_le_bytes());
    for path in 0..ensemble.num_paths() {
        for idx in 0..points {
            for &x in ensemble.state(path, idx) {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    bytes
}

// ---------------------------------------------------------------------------
// diagnose lyapunov
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LyapunovSpec {
    pub model: ResolvedModel,
    pub phi: ResolvedPhi,
    pub scheme: SchemeKind,
    pub dt: f64,
    pub iterations: usize,
    pub paths: usize,
    pub seed: u64,
    pub alpha: f64,
    pub c_p: f64,
    pub kappa: Option<f64>,
    pub lambda_max_exp: u32,
}

impl LyapunovSpec {
    pub fn manifest_config(&self) -> Json {
        let mut cfg = Json::object();
        cfg.push("model", echo(&self.model.document));
        cfg.push("phi", echo(&self.phi.document));
        cfg.push("scheme", scheme_json(self.scheme));
        cfg.push("dt", Json::Float(self.dt));
        cfg.push("K", Json::Uint(self.iterations as u64));
        cfg.push("paths", Json::Uint(self.paths as u64));
        cfg.push("seed", Json::Uint(self.seed));
        cfg.push("alpha", Json::Float(self.alpha));
        cfg.push("c_p", Json::Float(self.c_p));
        cfg.push("kappa", self.kappa.map(Json::Float).unwrap_or(Json::Null));
        cfg.push("lambda_max_exp", Json::Uint(self.lambda_max_exp as u64));
        cfg
    }

    pub fn from_manifest(cfg: &Value) -> Result<Self> {
        let kappa = match get(cfg, "kappa")? {
            Value::Null => None,
            v => Some(
                v.as_f64()
                    .ok_or_else(|| Error::config("kappa", "expected a number"))?,
            ),
        };
        Ok(LyapunovSpec {
            model: ResolvedModel::from_document(get(cfg, "model")?.clone())?,
            phi: ResolvedPhi {
                document: get(cfg, "phi")?.clone(),
            },
            scheme: SchemeKind::parse(get_str(cfg, "scheme")?)?,
            dt: get_f64(cfg, "dt")?,
            iterations: get_usize(cfg, "K")?,
            paths: get_usize(cfg, "paths")?,
            seed: get_u64(cfg, "seed")?,
            alpha: get_f64(cfg, "alpha")?,
            c_p: get_f64(cfg, "c_p")?,
            kappa,
            lambda_max_exp: get_u64(cfg, "lambda_max_exp")? as u32,
        })
    }

    pub fn run(&self, ctx: &RunContext) -> Result<()> {
        let model = &self.model.model;
        let phi = build_phi(&self.model, &self.phi, self.dt)?;
        let split = match self.kappa {
            Some(kappa) => CubeSplit::with_kappa(model.r(), kappa)?,
            None => CubeSplit::pinned(model.r()),
        };
        let experiment = LyapunovExperimentConfig {
            scheme: self.scheme,
            dt: self.dt,
            paths: self.paths,
            iterations: self.iterations,
            seed: self.seed,
        };
        let mut report = ctx.install(|| run_lyapunov_experiment(model, &phi, &experiment))?;
        let lambda_grid: Vec<f64> = (0..=self.lambda_max_exp)
            .map(|k| 2.0f64.powi(k as i32))
            .collect();
        let sweep = lambda_star_search(model, &lambda_grid, split, self.alpha, self.c_p);
        if let Ok(search) = &sweep {
            report = report.with_feasibility(search.clone());
        }

        let mut csv = Csv::new(&["k", "t", "e_v", "se_v", "e_norm2", "e_norm6"]);
        for (k, v) in report.v_iterates.iter().enumerate() {
            csv.row(&[
                CsvCell::Uint(k as u64),
                CsvCell::Float(k as f64 * model.r()),
                CsvCell::Float(*v),
                CsvCell::Float(report.v_std_errors[k]),
                CsvCell::Float(report.norm2_iterates[k]),
                CsvCell::Float(report.norm6_iterates[k]),
            ]);
        }
        let mut outputs = vec![ctx.write("iterates.csv", csv.finish().as_bytes())?];

        let mut constants = Json::object();
        constants.push("L", Json::Float(model.lipschitz()));
        constants.push("D", Json::Float(model.d_constant()));
        constants.push("r", Json::Float(model.r()));
        constants.push("kappa", Json::Float(split.kappa));
        constants.push("gamma", Json::Float(split.gamma));
        constants.push("alpha", Json::Float(self.alpha));
        constants.push("c_p", Json::Float(self.c_p));
        let mut doc = Json::object();
        doc.push("constants", constants);
        doc.push("feasibility", sweep_json(&sweep));
        let mut iterates = Json::object();
        iterates.push("v", Json::floats(&report.v_iterates));
        iterates.push("v_se", Json::floats(&report.v_std_errors));
        iterates.push("norm2", Json::floats(&report.norm2_iterates));
        iterates.push("norm6", Json::floats(&report.norm6_iterates));
        doc.push("iterates", iterates);
        let mut fit = Json::object();
        fit.push("delta_hat", Json::Float(report.fitted_delta));
        fit.push("rho_hat", Json::Float(report.fitted_rho));
        fit.push("degenerate", Json::Bool(report.fit_degenerate));
        fit.push(
            "plateau",
            report.plateau.map(Json::Float).unwrap_or(Json::Null),
        );
        fit.push("contraction", Json::Bool(report.contraction));
        doc.push("fit", fit);
        let mut moments = Json::object();
        moments.push("mann_kendall_z", Json::Float(report.mann_kendall_z));
        moments.push("bounded", Json::Bool(report.moments_bounded));
        doc.push("moments", moments);
        doc.push("explosion_rate", Json::Float(report.explosion_rate));
        doc.push("valid", Json::Bool(report.valid));
        outputs.push(ctx.write("lyapunov_report.json", doc.render().as_bytes())?);
        ctx.write_manifest("diagnose-lyapunov", self.manifest_config(), &outputs)?;

        if !report.valid {
            return Err(Error::ExperimentInvalid(format!(
                "explosion rate {} on scheme {}",
                report.explosion_rate,
                self.scheme.name()
            )));
        }
        Ok(())
    }
}

fn sweep_json(sweep: &Result<FeasibilitySearch>) -> Json {
    match sweep {
        Err(err) => {
            let mut obj = Json::object();
            obj.push("error", Json::Str(err.to_string()));
            obj
        }
        Ok(search) => {
            let mut obj = Json::object();
            obj.push("B", Json::Float(search.b));
            obj.push(
                "first_feasible",
                match &search.first_feasible {
                    None => Json::Null,
                    Some(point) => {
                        let mut p = Json::object();
                        p.push("lambda", Json::Float(point.lambda));
                        p.push("a_lambda", Json::Float(point.a_lambda));
                        p.push("a3", Json::Float(point.a3));
                        p.push("delta", Json::Float(point.delta));
                        p.push("rho", point.rho.map(Json::Float).unwrap_or(Json::Null));
                        p
                    }
                },
            );
            let points: Vec<Json> = search
                .points
                .iter()
                .map(|point| {
                    let mut p = Json::object();
                    p.push("lambda", Json::Float(point.lambda));
                    p.push("delta", Json::Float(point.delta));
                    p.push("feasible", Json::Bool(point.feasible));
                    p
                })
                .collect();
            obj.push("sweep", Json::Array(points));
            obj
        }
    }
}

// ---------------------------------------------------------------------------
// diagnose tightness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TightnessSpec {
    pub model: ResolvedModel,
    pub phi: ResolvedPhi,
    pub scheme: SchemeKind,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    pub burn_in: f64,
    pub starts: usize,
    pub gaps: Vec<f64>,
    pub gammas: Vec<f64>,
    pub levels: usize,
    /// Exceedance level the smallest gap must stay below at every start.
    pub pass_threshold: f64,
}

impl TightnessSpec {
    pub fn manifest_config(&self) -> Json {
        let mut cfg = Json::object();
        cfg.push("model", echo(&self.model.document));
        cfg.push("phi", echo(&self.phi.document));
        cfg.push("scheme", scheme_json(self.scheme));
        cfg.push("dt", Json::Float(self.dt));
        cfg.push("T", Json::Float(self.horizon));
        cfg.push("paths", Json::Uint(self.paths as u64));
        cfg.push("seed", Json::Uint(self.seed));
        cfg.push("burnin", Json::Float(self.burn_in));
        cfg.push("starts", Json::Uint(self.starts as u64));
        cfg.push("gaps", Json::floats(&self.gaps));
        cfg.push("gammas", Json::floats(&self.gammas));
        cfg.push("levels", Json::Uint(self.levels as u64));
        cfg.push("pass_threshold", Json::Float(self.pass_threshold));
        cfg
    }

    pub fn from_manifest(cfg: &Value) -> Result<Self> {
        Ok(TightnessSpec {
            model: ResolvedModel::from_document(get(cfg, "model")?.clone())?,
            phi: ResolvedPhi {
                document: get(cfg, "phi")?.clone(),
            },
            scheme: SchemeKind::parse(get_str(cfg, "scheme")?)?,
            dt: get_f64(cfg, "dt")?,
            horizon: get_f64(cfg, "T")?,
            paths: get_usize(cfg, "paths")?,
            seed: get_u64(cfg, "seed")?,
            burn_in: get_f64(cfg, "burnin")?,
            starts: get_usize(cfg, "starts")?,
            gaps: get_f64_list(cfg, "gaps")?,
            gammas: get_f64_list(cfg, "gammas")?,
            levels: get_usize(cfg, "levels")?,
            pass_threshold: get_f64(cfg, "pass_threshold")?,
        })
    }

    /// Start times evenly spread over [burn_in, T - r], snapped to the grid.
    pub fn start_times(&self, r: f64) -> Result<Vec<f64>> {
        let last = self.horizon - r;
        if last < self.burn_in {
            return Err(Error::config(
                "burnin",
                format!(
                    "burn-in {} leaves no full window before T - r = {last}",
                    self.burn_in
                ),
            ));
        }
        if self.starts == 0 {
            return Err(Error::config(
                "starts",
                "at least one start time is required",
            ));
        }
        let n = self.starts;
        let times = (0..n)
            .map(|i| {
                let raw = if n == 1 {
                    self.burn_in
                } else {
                    self.burn_in + i as f64 * (last - self.burn_in) / (n as f64 - 1.0)
                };
                (raw / self.dt).round() * self.dt
            })
            .collect();
        Ok(times)
    }

    pub fn run(&self, ctx: &RunContext) -> Result<()> {
        let model = &self.model.model;
        let phi = build_phi(&self.model, &self.phi, self.dt)?;
        let starts = self.start_times(model.r())?;
        let sim = SimulationConfig {
            scheme: self.scheme,
            horizon: self.horizon,
            paths: self.paths,
            seed: self.seed,
            record_noise_integral: true,
        };
        let (ensemble, rows, kolmogorov) = ctx.install(|| -> Result<_> {
            let ensemble = simulate_ensemble(model, &phi, &sim)?;
            let rows = modulus_table(&ensemble, &starts, &self.gaps, &self.gammas)?;
            let t0 = (self.burn_in / self.dt).round() * self.dt;
            let kolmogorov = kolmogorov_ratio(&ensemble, t0, self.levels)?;
            Ok((ensemble, rows, kolmogorov))
        })?;

        let mut csv = Csv::new(&["t", "gap", "gamma", "exceedance", "dt"]);
        for row in &rows {
            csv.row(&[
                CsvCell::Float(row.start_time),
                CsvCell::Float(row.gap),
                CsvCell::Float(row.threshold),
                CsvCell::Float(row.exceedance),
                CsvCell::Float(self.dt),
            ]);
        }
        let mut outputs = vec![ctx.write("modulus.csv", csv.finish().as_bytes())?];

        let mut kcsv = Csv::new(&["gap", "ratio", "se", "slope", "max_ratio"]);
        for scale in &kolmogorov.scales {
            kcsv.row(&[
                CsvCell::Float(scale.gap),
                CsvCell::Float(scale.ratio.mean),
                CsvCell::Float(scale.ratio.std_error),
                CsvCell::Float(kolmogorov.slope),
                CsvCell::Float(kolmogorov.max_ratio),
            ]);
        }
        outputs.push(ctx.write("kolmogorov.csv", kcsv.finish().as_bytes())?);

        let verdicts = modulus_pass(&rows, self.pass_threshold);
        let mut doc = Json::object();
        doc.push("pass_threshold", Json::Float(self.pass_threshold));
        let per_gamma: Vec<Json> = verdicts
            .iter()
            .map(|&(threshold, ok)| {
                let mut v = Json::object();
                v.push("gamma", Json::Float(threshold));
                v.push("pass", Json::Bool(ok));
                v
            })
            .collect();
        doc.push("per_gamma", Json::Array(per_gamma));
        doc.push("all_pass", Json::Bool(verdicts.iter().all(|&(_, ok)| ok)));
        doc.push("kolmogorov_slope", Json::Float(kolmogorov.slope));
        doc.push("kolmogorov_max_ratio", Json::Float(kolmogorov.max_ratio));
        outputs.push(ctx.write("tightness_report.json", doc.render().as_bytes())?);
        ctx.write_manifest("diagnose-tightness", self.manifest_config(), &outputs)?;

        if ensemble.explosion_rate() > 0.0 {
            return Err(Error::ExperimentInvalid(format!(
                "explosion rate {} on scheme {}",
                ensemble.explosion_rate(),
                self.scheme.name()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// diagnose feller
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FellerSpec {
    pub model: ResolvedModel,
    pub phi: ResolvedPhi,
    pub scheme: SchemeKind,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    pub perturbations: Vec<f64>,
}

impl FellerSpec {
    pub fn manifest_config(&self) -> Json {
        let mut cfg = Json::object();
        cfg.push("model", echo(&self.model.document));
        cfg.push("phi", echo(&self.phi.document));
        cfg.push("scheme", scheme_json(self.scheme));
        cfg.push("dt", Json::Float(self.dt));
        cfg.push("t", Json::Float(self.horizon));
        cfg.push("paths", Json::Uint(self.paths as u64));
        cfg.push("seed", Json::Uint(self.seed));
        cfg.push("perturbations", Json::floats(&self.perturbations));
        cfg
    }

    pub fn from_manifest(cfg: &Value) -> Result<Self> {
        Ok(FellerSpec {
            model: ResolvedModel::from_document(get(cfg, "model")?.clone())?,
            phi: ResolvedPhi {
                document: get(cfg, "phi")?.clone(),
            },
            scheme: SchemeKind::parse(get_str(cfg, "scheme")?)?,
            dt: get_f64(cfg, "dt")?,
            horizon: get_f64(cfg, "t")?,
            paths: get_usize(cfg, "paths")?,
            seed: get_u64(cfg, "seed")?,
            perturbations: get_f64_list(cfg, "perturbations")?,
        })
    }

    pub fn run(&self, ctx: &RunContext) -> Result<()> {
        if self.perturbations.iter().any(|&e| e <= 0.0) {
            return Err(Error::config(
                "perturbations",
                "perturbation sizes must be positive",
            ));
        }
        let model = &self.model.model;
        let phi = build_phi(&self.model, &self.phi, self.dt)?;
        let perturbed = self
            .perturbations
            .iter()
            .map(|&e| shifted_segment(&phi, e))
            .collect();
        let experiment = FellerExperiment {
            scheme: self.scheme,
            phi,
            perturbed,
            horizon: self.horizon,
            paths: self.paths,
            seed: self.seed,
        };
        let report = ctx.install(|| feller_gap(model, &experiment))?;

        let mut csv = Csv::new(&[
            "perturbation",
            "gap",
            "gap_se",
            "bound",
            "pass",
            "invalid_pairs",
        ]);
        for row in &report.rows {
            csv.row(&[
                CsvCell::Float(row.perturbation),
                CsvCell::Float(row.gap.mean),
                CsvCell::Float(row.gap.std_error),
                CsvCell::Float(row.bound),
                CsvCell::Bool(row.pass),
                CsvCell::Uint(row.invalid_pairs as u64),
            ]);
        }
        let mut outputs = vec![ctx.write("feller.csv", csv.finish().as_bytes())?];

        let mut doc = Json::object();
        doc.push("slope", Json::Float(report.slope));
        doc.push("L", Json::Float(model.lipschitz()));
        doc.push("t", Json::Float(self.horizon));
        doc.push("all_pass", Json::Bool(report.rows.iter().all(|r| r.pass)));
        outputs.push(ctx.write("feller_report.json", doc.render().as_bytes())?);
        ctx.write_manifest("diagnose-feller", self.manifest_config(), &outputs)?;

        let invalid: usize = report.rows.iter().map(|r| r.invalid_pairs).sum();
        if invalid > 0 {
            return Err(Error::ExperimentInvalid(format!(
                "{invalid} coupled pairs exploded"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// invariant
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InvariantSpec {
    pub model: ResolvedModel,
    pub phi: ResolvedPhi,
    pub scheme: SchemeKind,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    pub proj: Vec<f64>,
    pub burn_in: f64,
    pub stride: f64,
    pub lag: f64,
    pub permutations: usize,
    pub max_block_paths: usize,
}

impl InvariantSpec {
    pub fn manifest_config(&self) -> Json {
        let mut cfg = Json::object();
        cfg.push("model", echo(&self.model.document));
        cfg.push("phi", echo(&self.phi.document));
        cfg.push("scheme", scheme_json(self.scheme));
        cfg.push("dt", Json::Float(self.dt));
        cfg.push("T", Json::Float(self.horizon));
        cfg.push("paths", Json::Uint(self.paths as u64));
        cfg.push("seed", Json::Uint(self.seed));
        cfg.push("proj", Json::floats(&self.proj));
        cfg.push("burnin", Json::Float(self.burn_in));
        cfg.push("stride", Json::Float(self.stride));
        cfg.push("lag", Json::Float(self.lag));
        cfg.push("permutations", Json::Uint(self.permutations as u64));
        cfg.push("max_block_paths", Json::Uint(self.max_block_paths as u64));
        cfg
    }

    pub fn from_manifest(cfg: &Value) -> Result<Self> {
        Ok(InvariantSpec {
            model: ResolvedModel::from_document(get(cfg, "model")?.clone())?,
            phi: ResolvedPhi {
                document: get(cfg, "phi")?.clone(),
            },
            scheme: SchemeKind::parse(get_str(cfg, "scheme")?)?,
            dt: get_f64(cfg, "dt")?,
            horizon: get_f64(cfg, "T")?,
            paths: get_usize(cfg, "paths")?,
            seed: get_u64(cfg, "seed")?,
            proj: get_f64_list(cfg, "proj")?,
            burn_in: get_f64(cfg, "burnin")?,
            stride: get_f64(cfg, "stride")?,
            lag: get_f64(cfg, "lag")?,
            permutations: get_usize(cfg, "permutations")?,
            max_block_paths: get_usize(cfg, "max_block_paths")?,
        })
    }

    pub fn run(&self, ctx: &RunContext) -> Result<()> {
        let model = &self.model.model;
        let phi = build_phi(&self.model, &self.phi, self.dt)?;
        let sim = SimulationConfig {
            scheme: self.scheme,
            horizon: self.horizon,
            paths: self.paths,
            seed: self.seed,
            record_noise_integral: false,
        };
        let (ensemble, measure, invariance) = ctx.install(|| -> Result<_> {
            let ensemble = simulate_ensemble(model, &phi, &sim)?;
            let proj = ProjectionSpec::new(ensemble.grid(), self.proj.clone())?;
            let measure = collect_measure(&ensemble, &proj, self.burn_in, self.stride)?;
            let mut cfg = InvarianceTestConfig::new(self.burn_in, self.stride, self.lag, self.seed);
            cfg.permutations = self.permutations;
            cfg.max_block_paths = self.max_block_paths;
            let invariance = invariance_test(&ensemble, &proj, &cfg)?;
            Ok((ensemble, measure, invariance))
        })?;

        let mut header: Vec<String> = vec!["t".into()];
        for c in 0..measure.sample_dim() {
            header.push(format!("c{c}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = Csv::new(&header_refs);
        for (t, sample) in measure.pooled_sorted() {
            let mut cells = vec![CsvCell::Float(t)];
            cells.extend(sample.iter().map(|&x| CsvCell::Float(x)));
            csv.row(&cells);
        }
        let mut outputs = vec![ctx.write("samples.csv", csv.finish().as_bytes())?];

        let norm2 = measure.norm_moment(2.0);
        let norm6 = measure.norm_moment(6.0);
        let mut doc = Json::object();
        doc.push("distance", Json::Float(invariance.distance));
        doc.push("p_value", Json::Float(invariance.p_value));
        doc.push("permutations", Json::Uint(invariance.permutations as u64));
        doc.push("paths_used", Json::Uint(invariance.paths_used as u64));
        doc.push(
            "samples_per_group",
            Json::Uint(invariance.samples_per_group as u64),
        );
        doc.push("lag", Json::Float(invariance.lag));
        doc.push(
            "collected_samples",
            Json::Uint(measure.num_samples() as u64),
        );
        let mut moments = Json::object();
        moments.push("norm2_mean", Json::Float(norm2.mean));
        moments.push("norm2_se", Json::Float(norm2.std_error));
        moments.push("norm6_mean", Json::Float(norm6.mean));
        moments.push("norm6_se", Json::Float(norm6.std_error));
        let variances: Vec<Json> = (0..measure.sample_dim())
            .map(|c| {
                let v = measure.coordinate_variance(c);
                let mut obj = Json::object();
                obj.push("coordinate", Json::Uint(c as u64));
                obj.push("variance", Json::Float(v.mean));
                obj.push("se", Json::Float(v.std_error));
                obj
            })
            .collect();
        moments.push("coordinate_variances", Json::Array(variances));
        doc.push("moments", moments);
        outputs.push(ctx.write("invariance_report.json", doc.render().as_bytes())?);
        ctx.write_manifest("invariant", self.manifest_config(), &outputs)?;

        if ensemble.explosion_rate() > 0.0 {
            return Err(Error::ExperimentInvalid(format!(
                "explosion rate {} on scheme {}",
                ensemble.explosion_rate(),
                self.scheme.name()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// factorization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FactorizationSpec {
    pub p: f64,
    pub mu_grid: Vec<f64>,
    pub alpha: f64,
    pub c_p: f64,
    pub eta: f64,
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
}

impl FactorizationSpec {
    pub fn manifest_config(&self) -> Json {
        let mut cfg = Json::object();
        cfg.push("p", Json::Float(self.p));
        cfg.push("mu_grid", Json::floats(&self.mu_grid));
        cfg.push("alpha", Json::Float(self.alpha));
        cfg.push("c_p", Json::Float(self.c_p));
        cfg.push("eta", Json::Float(self.eta));
        cfg.push("T", Json::Float(self.horizon));
        cfg.push("dt", Json::Float(self.dt));
        cfg.push("paths", Json::Uint(self.paths as u64));
        cfg.push("seed", Json::Uint(self.seed));
        cfg
    }

    pub fn from_manifest(cfg: &Value) -> Result<Self> {
        Ok(FactorizationSpec {
            p: get_f64(cfg, "p")?,
            mu_grid: get_f64_list(cfg, "mu_grid")?,
            alpha: get_f64(cfg, "alpha")?,
            c_p: get_f64(cfg, "c_p")?,
            eta: get_f64(cfg, "eta")?,
            horizon: get_f64(cfg, "T")?,
            dt: get_f64(cfg, "dt")?,
            paths: get_usize(cfg, "paths")?,
            seed: get_u64(cfg, "seed")?,
        })
    }

    pub fn run(&self, ctx: &RunContext) -> Result<()> {
        let mut csv = Csv::new(&["mu", "a_p_mu", "lhs", "lhs_se", "rhs", "ratio", "pass"]);
        let eta = IntegrandSpec::Constant(self.eta);
        for &mu in &self.mu_grid {
            let constants = FactorizationConstants::new(self.p, mu, self.alpha, self.c_p)?;
            let check = ctx.install(|| {
                check_factorization_bound(
                    constants,
                    &eta,
                    self.horizon,
                    self.dt,
                    self.paths,
                    self.seed,
                )
            })?;
            csv.row(&[
                CsvCell::Float(mu),
                CsvCell::Float(constants.a_p_mu),
                CsvCell::Float(check.lhs.mean),
                CsvCell::Float(check.lhs.std_error),
                CsvCell::Float(check.rhs.mean),
                CsvCell::Float(check.ratio),
                CsvCell::Bool(check.pass),
            ]);
        }
        let outputs = vec![ctx.write("factorization.csv", csv.finish().as_bytes())?];
        ctx.write_manifest("factorization", self.manifest_config(), &outputs)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// validate-model and rerun
// ---------------------------------------------------------------------------

/// Schema and hypothesis checks on a model document. Prints a human
/// summary; fails (config error) when the declared constant is violated on
/// the sampled pairs.
pub fn run_validate(model_path: &Path, pairs: usize, seed: u64) -> Result<()> {
    let resolved = ResolvedModel::from_file(model_path)?;
    let model = &resolved.model;
    println!(
        "model ok: d={} m={} r={} L={} D={}",
        model.d(),
        model.m(),
        model.r(),
        model.lipschitz(),
        model.d_constant()
    );
    let margin = model.h2_worst_margin(pairs, seed)?;
    if margin > 1e-9 * model.lipschitz().max(1.0) {
        return Err(Error::config(
            "L",
            format!(
                "declared constant violated on sampled segment pairs (worst margin {margin:.3e})"
            ),
        ));
    }
    println!(
        "one-sided condition held on {pairs} sampled segment pairs (worst margin {margin:.3e})"
    );
    match sfde_core::model::verify_h0(model, &sfde_core::model::default_probe_radii(), 1.0) {
        Ok(radius) => println!("dissipativity probe: level 1 reached from radius {radius}"),
        Err(_) => println!("dissipativity probe: level 1 not reached in the sampled range"),
    }
    Ok(())
}

/// Re-execute a recorded manifest; outputs are bit-identical to the
/// original run except for the manifest timestamp.
pub fn run_rerun(ctx: &RunContext, manifest_path: &Path) -> Result<()> {
    let manifest = crate::context::read_manifest(manifest_path)?;
    let command = get_str(&manifest, "command")?;
    let config = get(&manifest, "config")?;
    match command {
        "simulate" => SimulateSpec::from_manifest(config)?.run(ctx),
        "diagnose-lyapunov" => LyapunovSpec::from_manifest(config)?.run(ctx),
        "diagnose-tightness" => TightnessSpec::from_manifest(config)?.run(ctx),
        "diagnose-feller" => FellerSpec::from_manifest(config)?.run(ctx),
        "invariant" => InvariantSpec::from_manifest(config)?.run(ctx),
        "factorization" => FactorizationSpec::from_manifest(config)?.run(ctx),
        other => Err(Error::config(
            "command",
            format!("unknown command {other:?} in manifest"),
        )),
    }
}
