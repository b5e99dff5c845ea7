//! Tightness and continuity diagnostics: the discrete modulus-of-continuity
//! exceedance statistic, the sixth-moment Kolmogorov ratio of the noise
//! integral, and the coupled two-initial-condition continuity experiment
//! with its Gronwall-type bound.

use crate::error::{Error, Result};
use crate::integrate::{simulate_ensemble, PathEnsemble, SchemeKind, SimulationConfig};
use crate::linalg;
use crate::model::DelayModel;
use crate::segment::{sup_norm, Segment};
use crate::stats::{mean_with_error, ols_affine, MeanWithError, Z_99};

/// Fraction of surviving paths whose discrete modulus over the window
/// [t, t+r] exceeds `threshold`: sup over grid pairs u <= v, v - u <= gap,
/// of |x(v) - x(u)|. Pairs are grid pairs only; the statistic is an
/// under-estimate of the continuous modulus and is always reported together
/// with dt.
pub fn modulus_exceedance(
    ensemble: &PathEnsemble,
    t: f64,
    gap: f64,
    threshold: f64,
) -> Result<f64> {
    let r = ensemble.grid().r();
    let dt = ensemble.dt();
    if gap > r + 1e-12 {
        return Err(Error::config(
            "gap",
            format!("gap {gap} exceeds the window length {r}"),
        ));
    }
    if t + r > ensemble.horizon() + 1e-9 {
        return Err(Error::config(
            "t",
            format!("window [{t}, {}] leaves the horizon", t + r),
        ));
    }
    let start = ensemble.storage_index(t)?;
    let window = ensemble.grid().n();
    let gap_steps = ((gap / dt) + 1e-9).floor() as usize;
    let survivors = ensemble.surviving_paths();
    if survivors.is_empty() {
        return Err(Error::ExperimentInvalid("every path exploded".into()));
    }
    let d = ensemble.dim();
    let mut exceed = 0usize;
    let mut diff = vec![0.0; d];
    'paths: for &path in &survivors {
        for u in start..=start + window {
            let xu = ensemble.state(path, u);
            for v in u..=(u + gap_steps).min(start + window) {
                let xv = ensemble.state(path, v);
                for i in 0..d {
                    diff[i] = xv[i] - xu[i];
                }
                if linalg::norm(&diff) >= threshold {
                    exceed += 1;
                    continue 'paths;
                }
            }
        }
    }
    Ok(exceed as f64 / survivors.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ModulusRow {
    pub start_time: f64,
    pub gap: f64,
    pub threshold: f64,
    pub exceedance: f64,
}

/// Exceedance table over start times, gaps and thresholds.
pub fn modulus_table(
    ensemble: &PathEnsemble,
    start_times: &[f64],
    gaps: &[f64],
    thresholds: &[f64],
) -> Result<Vec<ModulusRow>> {
    let mut rows = Vec::with_capacity(start_times.len() * gaps.len() * thresholds.len());
    for &t in start_times {
        for &gap in gaps {
            for &threshold in thresholds {
                rows.push(ModulusRow {
                    start_time: t,
                    gap,
                    threshold,
                    exceedance: modulus_exceedance(ensemble, t, gap, threshold)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Finite surrogate of the vanishing-modulus condition: for every
/// threshold, the exceedance at the smallest gap stays below `pass_level`
/// uniformly over the start times. Returns the per-threshold verdicts in
/// the order the thresholds appear in `rows`.
pub fn modulus_pass(rows: &[ModulusRow], pass_level: f64) -> Vec<(f64, bool)> {
    let smallest_gap = rows.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    let mut thresholds: Vec<f64> = Vec::new();
    for row in rows {
        if !thresholds.contains(&row.threshold) {
            thresholds.push(row.threshold);
        }
    }
    thresholds
        .into_iter()
        .map(|threshold| {
            let ok = rows
                .iter()
                .filter(|r| r.threshold == threshold && r.gap == smallest_gap)
                .all(|r| r.exceedance < pass_level);
            (threshold, ok)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KolmogorovScale {
    pub gap: f64,
    /// Pooled estimate of E |J(t) - J(s)|^6 / gap^3 with its between-path
    /// standard error.
    pub ratio: MeanWithError,
}

#[derive(Debug, Clone)]
pub struct KolmogorovReport {
    pub scales: Vec<KolmogorovScale>,
    pub max_ratio: f64,
    /// OLS slope of log ratio against log gap; a ratio that stays flat as
    /// the gap shrinks is the discrete signature of the |t-s|^3 bound.
    pub slope: f64,
}

/// Sixth-moment increment ratios of the noise integral over dyadic gaps
/// r, r/2, ..., r/2^(levels-1), using disjoint increments of [t0, t0 + r].
/// Requires the ensemble to have recorded J.
pub fn kolmogorov_ratio(
    ensemble: &PathEnsemble,
    t0: f64,
    levels: usize,
) -> Result<KolmogorovReport> {
    if !ensemble.records_noise_integral() {
        return Err(Error::config(
            "ensemble",
            "noise integral was not recorded; rerun the simulation with record_noise_integral",
        ));
    }
    if levels == 0 {
        return Err(Error::config(
            "levels",
            "at least one dyadic level is required",
        ));
    }
    let r = ensemble.grid().r();
    let dt = ensemble.dt();
    if t0 < -1e-12 || t0 + r > ensemble.horizon() + 1e-9 {
        return Err(Error::config(
            "t0",
            format!("window [{t0}, {}] leaves the run", t0 + r),
        ));
    }
    let base = ((t0 / dt) + 0.5).floor() as usize;
    let window_steps = ensemble.grid().n();
    let survivors = ensemble.surviving_paths();
    if survivors.is_empty() {
        return Err(Error::ExperimentInvalid("every path exploded".into()));
    }
    let d = ensemble.dim();
    let mut scales = Vec::with_capacity(levels);
    for level in 0..levels {
        let pairs = 1usize << level;
        if !window_steps.is_multiple_of(pairs) {
            return Err(Error::config(
                "levels",
                format!("gap r/{pairs} is not grid-aligned (r/dt = {window_steps})"),
            ));
        }
        let gap_steps = window_steps / pairs;
        let gap = gap_steps as f64 * dt;
        let gap3 = gap.powi(3);
        let per_path: Vec<f64> = survivors
            .iter()
            .map(|&path| {
                let mut acc = 0.0;
                for i in 0..pairs {
                    let ks = base + i * gap_steps;
                    let ke = ks + gap_steps;
                    let js = ensemble.noise_integral(path, ks).expect("J recorded");
                    let je = ensemble.noise_integral(path, ke).expect("J recorded");
                    let mut sq = 0.0;
                    for c in 0..d {
                        let delta = je[c] - js[c];
                        sq += delta * delta;
                    }
                    acc += sq.powf(3.0) / gap3;
                }
                acc / pairs as f64
            })
            .collect();
        scales.push(KolmogorovScale {
            gap,
            ratio: mean_with_error(&per_path),
        });
    }
    let max_ratio = scales
        .iter()
        .map(|s| s.ratio.mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let slope = if scales.len() >= 2 && scales.iter().all(|s| s.ratio.mean > 0.0) {
        let xs: Vec<f64> = scales.iter().map(|s| s.gap.ln()).collect();
        let ys: Vec<f64> = scales.iter().map(|s| s.ratio.mean.ln()).collect();
        ols_affine(&xs, &ys).slope
    } else {
        0.0
    };
    Ok(KolmogorovReport {
        scales,
        max_ratio,
        slope,
    })
}

/// A coupled continuity experiment: the same model and scheme integrated
/// from a base initial segment and from perturbed ones, under bit-identical
/// Brownian increments (same seed, same path ids).
#[derive(Debug, Clone)]
pub struct FellerExperiment {
    pub scheme: SchemeKind,
    pub phi: Segment,
    pub perturbed: Vec<Segment>,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FellerRow {
    /// ||phi_m - phi|| on the grid.
    pub perturbation: f64,
    /// E sup_{t-r<=s<=t} |x^m(s) - x(s)|^4 over coupled surviving pairs.
    pub gap: MeanWithError,
    /// 3 ||phi_m - phi||^4 e^{12 L t + 3 L^2 t^2}.
    pub bound: f64,
    /// One-sided 99% gate: upper confidence limit of the gap below the bound.
    pub pass: bool,
    /// Coupled pairs dropped because one member exploded.
    pub invalid_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct FellerReport {
    pub rows: Vec<FellerRow>,
    /// Log-log slope of the gap against the perturbation size.
    pub slope: f64,
}

pub fn feller_gap(model: &DelayModel, experiment: &FellerExperiment) -> Result<FellerReport> {
    let sim = |phi: &Segment| {
        simulate_ensemble(
            model,
            phi,
            &SimulationConfig {
                scheme: experiment.scheme,
                horizon: experiment.horizon,
                paths: experiment.paths,
                seed: experiment.seed,
                record_noise_integral: false,
            },
        )
    };
    let base = sim(&experiment.phi)?;
    let t = experiment.horizon;
    let lipschitz = model.lipschitz();
    let gronwall = (12.0 * lipschitz * t + 3.0 * lipschitz * lipschitz * t * t).exp();

    let mut rows = Vec::with_capacity(experiment.perturbed.len());
    for phi_m in &experiment.perturbed {
        let diff = Segment::new(
            experiment.phi.grid().clone(),
            experiment.phi.dim(),
            phi_m
                .values()
                .iter()
                .zip(experiment.phi.values())
                .map(|(a, b)| a - b)
                .collect(),
        )?;
        let perturbation = sup_norm(&diff);
        let perturbed = sim(phi_m)?;
        let mut gaps = Vec::with_capacity(experiment.paths);
        let mut invalid_pairs = 0usize;
        for path in 0..experiment.paths {
            if base.trajectory(path).exploded() || perturbed.trajectory(path).exploded() {
                invalid_pairs += 1;
                continue;
            }
            let sa = base.segment_at(path, t)?;
            let sb = perturbed.segment_at(path, t)?;
            let window_sup = (0..sa.grid().num_nodes())
                .map(|i| {
                    let a = sa.node(i);
                    let b = sb.node(i);
                    let mut sq = 0.0;
                    for c in 0..a.len() {
                        let delta = b[c] - a[c];
                        sq += delta * delta;
                    }
                    sq.sqrt()
                })
                .fold(0.0, f64::max);
            gaps.push(window_sup.powi(4));
        }
        if gaps.is_empty() {
            return Err(Error::ExperimentInvalid(
                "all coupled pairs exploded".into(),
            ));
        }
        let gap = mean_with_error(&gaps);
        let bound = 3.0 * perturbation.powi(4) * gronwall;
        let pass = gap.mean + Z_99 * gap.std_error <= bound;
        rows.push(FellerRow {
            perturbation,
            gap,
            bound,
            pass,
            invalid_pairs,
        });
    }

    let positive: Vec<&FellerRow> = rows
        .iter()
        .filter(|r| r.perturbation > 0.0 && r.gap.mean > 0.0)
        .collect();
    let slope = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|r| r.perturbation.ln()).collect();
        let ys: Vec<f64> = positive.iter().map(|r| r.gap.mean.ln()).collect();
        ols_affine(&xs, &ys).slope
    } else {
        0.0
    };
    Ok(FellerReport { rows, slope })
}

/// Convenience: perturb a base segment by a constant shift of size eps
/// spread evenly over the coordinates, so the segment norm of the
/// perturbation is exactly eps.
pub fn shifted_segment(phi: &Segment, eps: f64) -> Segment {
    let d = phi.dim() as f64;
    let shift = eps / d.sqrt();
    Segment::new(
        phi.grid().clone(),
        phi.dim(),
        phi.values().iter().map(|v| v + shift).collect(),
    )
    .expect("same shape")
}
