//! Time-averaged estimation of the invariant law of the segment process and
//! empirical invariance testing on finite-dimensional projections.
//!
//! Distributions on the path space are compared through projections of the
//! segment at configured offsets; equality of projected laws is probed with
//! the energy distance and permutation tests that treat whole paths as the
//! independent units (within-path time samples stay together).

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::PathEnsemble;
use crate::linalg;
use crate::model::splitmix64;
use crate::segment::SegmentGrid;
use crate::stats::{mean_with_error, MeanWithError};

/// Evaluation offsets inside [-r, 0], grid-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    offsets: Vec<f64>,
}

impl ProjectionSpec {
    pub fn new(grid: &SegmentGrid, offsets: Vec<f64>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::config("proj", "at least one offset is required"));
        }
        for &theta in &offsets {
            grid.index_of_offset(theta)?;
        }
        Ok(ProjectionSpec { offsets })
    }

    /// Every grid node: the projection then carries the whole discrete
    /// segment.
    pub fn full_grid(grid: &SegmentGrid) -> Self {
        ProjectionSpec {
            offsets: (0..grid.num_nodes()).map(|i| grid.node(i)).collect(),
        }
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }
}

/// Pooled projected segments collected over times and paths after burn-in.
/// Samples are kept in per-path blocks so permutation tests can respect the
/// dependence structure; pooled exports are canonically sorted and therefore
/// invariant under path reordering.
#[derive(Debug, Clone)]
pub struct EmpiricalSegmentMeasure {
    pub(crate) proj: ProjectionSpec,
    /// d * number of offsets.
    pub(crate) sample_dim: usize,
    pub(crate) state_dim: usize,
    pub(crate) burn_in: f64,
    pub(crate) stride: f64,
    pub(crate) times: Vec<f64>,
    /// [path][time][sample_dim]
    pub(crate) blocks: Vec<Vec<Vec<f64>>>,
}

impl EmpiricalSegmentMeasure {
    pub fn num_paths(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_samples(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn burn_in(&self) -> f64 {
        self.burn_in
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn projection(&self) -> &ProjectionSpec {
        &self.proj
    }

    /// All samples in path-major order (not canonical; use
    /// [`pooled_sorted`](Self::pooled_sorted) for exports).
    pub fn pooled(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| b.iter().map(|s| s.as_slice()))
            .collect()
    }

    /// Samples with their collection times, sorted lexicographically by
    /// (time, values): the canonical order-free export.
    pub fn pooled_sorted(&self) -> Vec<(f64, &[f64])> {
        let mut rows: Vec<(f64, &[f64])> = self
            .blocks
            .iter()
            .flat_map(|b| {
                self.times
                    .iter()
                    .copied()
                    .zip(b.iter().map(|s| s.as_slice()))
            })
            .collect();
        rows.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then_with(|| a.1.partial_cmp(b.1).unwrap())
        });
        rows
    }

    /// Euclidean norm per offset, maximised over offsets: the segment sup
    /// norm restricted to the projection (equal to the full segment norm
    /// for the full-grid projection).
    fn projected_norm(&self, sample: &[f64]) -> f64 {
        sample
            .chunks(self.state_dim)
            .map(linalg::norm)
            .fold(0.0, f64::max)
    }

    /// Moment of the projected norm with a between-path standard error.
    pub fn norm_moment(&self, power: f64) -> MeanWithError {
        let per_path: Vec<f64> = self
            .blocks
            .iter()
            .map(|b| {
                let vals: Vec<f64> = b
                    .iter()
                    .map(|s| self.projected_norm(s).powf(power))
                    .collect();
                crate::stats::tree_mean(&vals)
            })
            .collect();
        mean_with_error(&per_path)
    }

    /// Pooled sample variance per coordinate (mean subtracted), with a
    /// between-path standard error for the averaged coordinate variance.
    pub fn coordinate_variance(&self, coordinate: usize) -> MeanWithError {
        let n = self.num_samples() as f64;
        let mean: f64 = self
            .blocks
            .iter()
            .flat_map(|b| b.iter().map(|s| s[coordinate]))
            .sum::<f64>()
            / n;
        let per_path: Vec<f64> = self
            .blocks
            .iter()
            .map(|b| {
                let vals: Vec<f64> = b
                    .iter()
                    .map(|s| (s[coordinate] - mean) * (s[coordinate] - mean))
                    .collect();
                crate::stats::tree_mean(&vals)
            })
            .collect();
        mean_with_error(&per_path)
    }
}

/// Collect the time-averaged projected segment distribution: samples
/// pi(x_t) for t = burn_in, burn_in + stride, ... over all surviving paths.
pub fn collect_measure(
    ensemble: &PathEnsemble,
    proj: &ProjectionSpec,
    burn_in: f64,
    stride: f64,
) -> Result<EmpiricalSegmentMeasure> {
    let dt = ensemble.dt();
    if !(stride > 0.0) {
        return Err(Error::config(
            "stride",
            "collection stride must be positive",
        ));
    }
    let stride_steps = stride / dt;
    if (stride_steps - stride_steps.round()).abs() > 1e-6 {
        return Err(Error::config(
            "stride",
            format!("stride {stride} is not a multiple of dt = {dt}"),
        ));
    }
    if burn_in < 0.0 {
        return Err(Error::config("burnin", "burn-in must be non-negative"));
    }
    let mut times = Vec::new();
    let mut t = burn_in;
    while t <= ensemble.horizon() + 1e-9 {
        times.push(t);
        t += stride;
    }
    if times.is_empty() {
        return Err(Error::config(
            "burnin",
            format!(
                "burn-in {burn_in} leaves no collection times before the horizon {}",
                ensemble.horizon()
            ),
        ));
    }
    let survivors = ensemble.surviving_paths();
    if survivors.is_empty() {
        return Err(Error::ExperimentInvalid("every path exploded".into()));
    }
    let grid = ensemble.grid();
    let offset_nodes: Vec<usize> = proj
        .offsets()
        .iter()
        .map(|&theta| grid.index_of_offset(theta))
        .collect::<Result<Vec<_>>>()?;
    let d = ensemble.dim();
    let n = grid.n();

    let blocks: Vec<Vec<Vec<f64>>> = survivors
        .par_iter()
        .map(|&path| {
            times
                .iter()
                .map(|&t| {
                    let end = ensemble.storage_index(t).expect("validated time");
                    let mut sample = Vec::with_capacity(offset_nodes.len() * d);
                    for &node in &offset_nodes {
                        sample.extend_from_slice(ensemble.state(path, end - n + node));
                    }
                    sample
                })
                .collect()
        })
        .collect();

    Ok(EmpiricalSegmentMeasure {
        proj: proj.clone(),
        sample_dim: offset_nodes.len() * d,
        state_dim: d,
        burn_in,
        stride,
        times,
        blocks,
    })
}

// ---------------------------------------------------------------------------
// energy distance and block permutation tests
// ---------------------------------------------------------------------------

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance in V-statistic form (all n^2 pairs, diagonal included):
/// 2 E|A-B| - E|A-A'| - E|B-B'|. Identical samples give exactly zero.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("samples", "both samples must be nonempty"));
    }
    let dim = a[0].len();
    if a.iter().chain(b.iter()).any(|s| s.len() != dim) {
        return Err(Error::config(
            "samples",
            "all points must share one dimension",
        ));
    }
    let mean_cross = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for xi in x {
            for yj in y {
                acc += euclidean(xi, yj);
            }
        }
        acc / (x.len() as f64 * y.len() as f64)
    };
    Ok(2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b))
}

/// Pairwise distance sums between blocks of points, the shared kernel of
/// the permutation tests: sums[i * nb + j] = sum over x in block i, y in
/// block j of |x - y|.
struct BlockDistances {
    nb: usize,
    sums: Vec<f64>,
    sizes: Vec<usize>,
}

impl BlockDistances {
    fn new(blocks: &[&[Vec<f64>]]) -> Self {
        let nb = blocks.len();
        let mut sums = vec![0.0; nb * nb];
        // symmetric: compute the upper triangle (diagonal included)
        let rows: Vec<Vec<f64>> = (0..nb)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![0.0; nb];
                for j in i..nb {
                    let mut acc = 0.0;
                    for x in blocks[i] {
                        for y in blocks[j] {
                            acc += euclidean(x, y);
                        }
                    }
                    row[j] = acc;
                }
                row
            })
            .collect();
        for i in 0..nb {
            for j in i..nb {
                sums[i * nb + j] = rows[i][j];
                sums[j * nb + i] = rows[i][j];
            }
        }
        let sizes = blocks.iter().map(|b| b.len()).collect();
        BlockDistances { nb, sums, sizes }
    }

    /// Energy distance (V-statistic) of the two groups of blocks given by
    /// the indicator `in_b`.
    fn statistic(&self, in_b: &[bool]) -> f64 {
        let mut s_aa = 0.0;
        let mut s_bb = 0.0;
        let mut s_ab = 0.0;
        let mut n_a = 0usize;
        let mut n_b = 0usize;
        for i in 0..self.nb {
            if in_b[i] {
                n_b += self.sizes[i];
            } else {
                n_a += self.sizes[i];
            }
            let row = &self.sums[i * self.nb..(i + 1) * self.nb];
            for j in 0..self.nb {
                match (in_b[i], in_b[j]) {
                    (false, false) => s_aa += row[j],
                    (true, true) => s_bb += row[j],
                    (false, true) => s_ab += row[j],
                    (true, false) => {}
                }
            }
        }
        let (n_a, n_b) = (n_a as f64, n_b as f64);
        2.0 * s_ab / (n_a * n_b) - s_aa / (n_a * n_a) - s_bb / (n_b * n_b)
    }
}

fn permutation_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ splitmix64(index ^ 0x7e57));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy)]
pub struct PermutationOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Two-sample permutation test over blocks: group labels are reshuffled
/// across blocks (counts preserved), so whole blocks travel together.
pub fn block_two_sample_permutation(
    a_blocks: &[&[Vec<f64>]],
    b_blocks: &[&[Vec<f64>]],
    permutations: usize,
    seed: u64,
) -> Result<PermutationOutcome> {
    if a_blocks.is_empty() || b_blocks.is_empty() {
        return Err(Error::config(
            "samples",
            "both groups need at least one block",
        ));
    }
    let pooled: Vec<&[Vec<f64>]> = a_blocks.iter().chain(b_blocks.iter()).copied().collect();
    let distances = BlockDistances::new(&pooled);
    let nb = pooled.len();
    let n_b_blocks = b_blocks.len();
    let observed_labels: Vec<bool> = (0..nb).map(|i| i >= a_blocks.len()).collect();
    let observed = distances.statistic(&observed_labels);

    let exceed: usize = (0..permutations as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = permutation_rng(seed, k);
            let mut idx: Vec<usize> = (0..nb).collect();
            idx.shuffle(&mut rng);
            let mut labels = vec![false; nb];
            for &i in idx.iter().take(n_b_blocks) {
                labels[i] = true;
            }
            usize::from(distances.statistic(&labels) >= observed)
        })
        .sum();
    Ok(PermutationOutcome {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

/// Paired permutation test: block i of group A is paired with block i of
/// group B (the same path observed at two time offsets); each permutation
/// swaps the pair members independently per path.
pub fn paired_block_permutation(
    a_blocks: &[&[Vec<f64>]],
    b_blocks: &[&[Vec<f64>]],
    permutations: usize,
    seed: u64,
) -> Result<PermutationOutcome> {
    if a_blocks.len() != b_blocks.len() || a_blocks.is_empty() {
        return Err(Error::config(
            "samples",
            "paired test needs equally many nonempty blocks",
        ));
    }
    let n_pairs = a_blocks.len();
    let pooled: Vec<&[Vec<f64>]> = a_blocks.iter().chain(b_blocks.iter()).copied().collect();
    let distances = BlockDistances::new(&pooled);
    // block i is A_i, block n_pairs + i is B_i
    let observed_labels: Vec<bool> = (0..2 * n_pairs).map(|i| i >= n_pairs).collect();
    let observed = distances.statistic(&observed_labels);

    let exceed: usize = (0..permutations as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = permutation_rng(seed, k);
            let mut labels = vec![false; 2 * n_pairs];
            for i in 0..n_pairs {
                let swap = rng.next_u64() & 1 == 1;
                labels[i] = swap;
                labels[n_pairs + i] = !swap;
            }
            usize::from(distances.statistic(&labels) >= observed)
        })
        .sum();
    Ok(PermutationOutcome {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

#[derive(Debug, Clone)]
pub struct InvarianceTestConfig {
    pub burn_in: f64,
    pub stride: f64,
    pub lag: f64,
    pub permutations: usize,
    pub seed: u64,
    /// Cap on the number of path blocks entering the permutation test (the
    /// block-sum tables are quadratic in it). Paths are thinned evenly.
    pub max_block_paths: usize,
}

impl InvarianceTestConfig {
    pub fn new(burn_in: f64, stride: f64, lag: f64, seed: u64) -> Self {
        InvarianceTestConfig {
            burn_in,
            stride,
            lag,
            permutations: 999,
            seed,
            max_block_paths: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InvarianceReport {
    pub distance: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub paths_used: usize,
    pub samples_per_group: usize,
    pub lag: f64,
}

/// Compare the time-averaged law of pi(x_t) with that of pi(x_{t+lag}):
/// the empirical surrogate of invariance. Paths are the permutation units.
pub fn invariance_test(
    ensemble: &PathEnsemble,
    proj: &ProjectionSpec,
    config: &InvarianceTestConfig,
) -> Result<InvarianceReport> {
    let dt = ensemble.dt();
    let lag_steps = config.lag / dt;
    if !(config.lag > 0.0) || (lag_steps - lag_steps.round()).abs() > 1e-6 {
        return Err(Error::config(
            "lag",
            format!(
                "lag {} must be a positive multiple of dt = {dt}",
                config.lag
            ),
        ));
    }
    if config.burn_in + config.lag >= ensemble.horizon() {
        return Err(Error::config(
            "lag",
            format!(
                "burn-in {} plus lag {} leaves no samples before the horizon {}",
                config.burn_in,
                config.lag,
                ensemble.horizon()
            ),
        ));
    }
    // collect the base measure on a horizon shortened by the lag so that
    // every base time has a lagged partner inside the run
    let base_horizon = ensemble.horizon() - config.lag;
    let mut base_times = Vec::new();
    let mut t = config.burn_in;
    while t <= base_horizon + 1e-9 {
        base_times.push(t);
        t += config.stride;
    }
    if base_times.is_empty() {
        return Err(Error::config(
            "burnin",
            "no collection times fit before the horizon",
        ));
    }
    let measure_a = collect_at_times(ensemble, proj, &base_times)?;
    let lagged: Vec<f64> = base_times.iter().map(|&t| t + config.lag).collect();
    let measure_b = collect_at_times(ensemble, proj, &lagged)?;

    let total_paths = measure_a.len();
    let keep = config.max_block_paths.max(2).min(total_paths);
    let step = (total_paths as f64 / keep as f64).max(1.0);
    let selected: Vec<usize> = (0..keep)
        .map(|i| ((i as f64 * step) as usize).min(total_paths - 1))
        .collect();

    let a_blocks: Vec<&[Vec<f64>]> = selected.iter().map(|&i| measure_a[i].as_slice()).collect();
    let b_blocks: Vec<&[Vec<f64>]> = selected.iter().map(|&i| measure_b[i].as_slice()).collect();
    let outcome = paired_block_permutation(&a_blocks, &b_blocks, config.permutations, config.seed)?;
    Ok(InvarianceReport {
        distance: outcome.statistic,
        p_value: outcome.p_value,
        permutations: outcome.permutations,
        paths_used: selected.len(),
        samples_per_group: selected.len() * base_times.len(),
        lag: config.lag,
    })
}

fn collect_at_times(
    ensemble: &PathEnsemble,
    proj: &ProjectionSpec,
    times: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let grid = ensemble.grid();
    let offset_nodes: Vec<usize> = proj
        .offsets()
        .iter()
        .map(|&theta| grid.index_of_offset(theta))
        .collect::<Result<Vec<_>>>()?;
    let survivors = ensemble.surviving_paths();
    if survivors.is_empty() {
        return Err(Error::ExperimentInvalid("every path exploded".into()));
    }
    let d = ensemble.dim();
    let n = grid.n();
    let ends: Vec<usize> = times
        .iter()
        .map(|&t| ensemble.storage_index(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(survivors
        .par_iter()
        .map(|&path| {
            ends.iter()
                .map(|&end| {
                    let mut sample = Vec::with_capacity(offset_nodes.len() * d);
                    for &node in &offset_nodes {
                        sample.extend_from_slice(ensemble.state(path, end - n + node));
                    }
                    sample
                })
                .collect()
        })
        .collect())
}
