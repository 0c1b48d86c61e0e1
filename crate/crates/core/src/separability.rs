//! Separability verdicts: factorizability statistics of transformed
//! coordinates and their velocities, candidate-map scoring, and the
//! recursion hook that re-separates each recovered subsystem.

use serde::{Deserialize, Serialize};

use crate::coordinate_map::{build_map, evaluate_map, CoordinateMap, MapOptions, MappedSeries};
use crate::error::{Error, Result};
use crate::local_frames::{align_frames, frames_from_grid};
use crate::numeric::{pearson, spearman};
use crate::phase_binning::{build_grid, estimate_velocity};
use crate::signal_io::{pca_normalize, TimeSeries};
use crate::weights::{compute_weights, enumerate_partitions, weight_correlation};

/// Cross-statistics of a two-component coordinate series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependenceReport {
    /// Correlations of component powers `p, q in {1, 2, 3}` for positions:
    /// entry `[p-1][q-1]` is `corr(u1^p, u2^q)` on standardized components.
    pub moment_u: [[f64; 3]; 3],
    /// The same table for central-difference velocities.
    pub moment_du: [[f64; 3]; 3],
    /// Spearman rank correlation of the two position components.
    pub spearman_u: f64,
    /// Largest absolute entry over all tables.
    pub max_stat: f64,
    pub verdict: bool,
    pub threshold: f64,
    /// Sampling fluctuation scale `3 / sqrt(T)` for context.
    pub fluctuation_scale: f64,
    pub samples: usize,
}

fn standardized(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len() as f64;
    let mean = crate::numeric::kahan_sum(values.iter().copied()) / n;
    let var = crate::numeric::kahan_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateComponent { component: 0 });
    }
    let inv = var.sqrt().recip();
    Ok(values.iter().map(|v| (v - mean) * inv).collect())
}

fn power_table(a: &[f64], b: &[f64]) -> [[f64; 3]; 3] {
    let mut table = [[0.0; 3]; 3];
    let powers = |xs: &[f64], p: i32| -> Vec<f64> { xs.iter().map(|v| v.powi(p)).collect() };
    let a_pows: Vec<Vec<f64>> = (1..=3).map(|p| powers(a, p)).collect();
    let b_pows: Vec<Vec<f64>> = (1..=3).map(|q| powers(b, q)).collect();
    for p in 0..3 {
        for q in 0..3 {
            let r = pearson(&a_pows[p], &b_pows[q]);
            // A power with zero variance carries no dependence information.
            table[p][q] = if r.is_finite() { r } else { 0.0 };
        }
    }
    table
}

/// Computes factorizability statistics for a two-component series:
/// correlations of component powers up to order 3 for positions and
/// central-difference velocities, plus the Spearman rank correlation.
pub fn independence_stats(u: &MappedSeries, threshold: f64) -> Result<IndependenceReport> {
    let n = u.len();
    if n < 1000 {
        return Err(Error::InvalidInput(format!(
            "need at least 1000 samples for independence statistics, got {n}"
        )));
    }
    let u1 = u.channel(0);
    let u2 = u.channel(1);
    for (k, ch) in [&u1, &u2].iter().enumerate() {
        let mean = crate::numeric::kahan_sum(ch.iter().copied()) / n as f64;
        let var = crate::numeric::kahan_sum(ch.iter().map(|v| (v - mean) * (v - mean)));
        if !(var > 0.0) {
            return Err(Error::DegenerateComponent { component: k });
        }
    }
    let s1 = standardized(&u1)?;
    let s2 = standardized(&u2)?;
    // Velocities from contiguous index triples only.
    let half_rate = u.sample_rate / 2.0;
    let mut du1 = Vec::with_capacity(n);
    let mut du2 = Vec::with_capacity(n);
    for i in 1..n.saturating_sub(1) {
        if u.t_index(i - 1) + 1 == u.t_index(i) && u.t_index(i) + 1 == u.t_index(i + 1) {
            let (prev, next) = (u.get(i - 1), u.get(i + 1));
            du1.push((next[0] - prev[0]) * half_rate);
            du2.push((next[1] - prev[1]) * half_rate);
        }
    }
    if du1.len() < 10 {
        return Err(Error::InvalidInput(
            "too few contiguous samples for velocity statistics".into(),
        ));
    }
    let d1 = standardized(&du1)?;
    let d2 = standardized(&du2)?;

    let moment_u = power_table(&s1, &s2);
    let moment_du = power_table(&d1, &d2);
    let spearman_u = spearman(&u1, &u2);
    let mut max_stat = spearman_u.abs();
    for p in 0..3 {
        for q in 0..3 {
            max_stat = max_stat.max(moment_u[p][q].abs()).max(moment_du[p][q].abs());
        }
    }
    Ok(IndependenceReport {
        moment_u,
        moment_du,
        spearman_u,
        max_stat,
        verdict: max_stat <= threshold,
        threshold,
        fluctuation_scale: 3.0 / (n as f64).sqrt(),
        samples: n,
    })
}

/// Outcome of scoring candidate maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Verdict {
    /// The best candidate passes the factorizability threshold.
    Separable {
        map_index: usize,
        report: IndependenceReport,
    },
    /// No candidate passes; the best report is attached.
    Inseparable {
        map_index: usize,
        report: IndependenceReport,
    },
}

impl Verdict {
    pub fn report(&self) -> &IndependenceReport {
        match self {
            Verdict::Separable { report, .. } | Verdict::Inseparable { report, .. } => report,
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, Verdict::Separable { .. })
    }
}

/// Evaluates every candidate map on the measurement series, scores each by
/// its maximum cross-statistic, and returns the best passing map (or the
/// best report if none passes).
pub fn verdict_pipeline(
    x_series: &TimeSeries,
    maps: &[CoordinateMap],
    threshold: f64,
) -> Result<Verdict> {
    if maps.is_empty() {
        return Err(Error::InvalidInput("no candidate maps to evaluate".into()));
    }
    let mut best: Option<(usize, IndependenceReport)> = None;
    let mut first_err: Option<Error> = None;
    for (i, map) in maps.iter().enumerate() {
        let report = match evaluate_map(map, x_series).and_then(|u| independence_stats(&u, threshold)) {
            Ok(r) => r,
            Err(e) => {
                first_err.get_or_insert(e);
                continue;
            }
        };
        if best
            .as_ref()
            .is_none_or(|(_, b)| report.max_stat < b.max_stat)
        {
            best = Some((i, report));
        }
    }
    let Some((map_index, report)) = best else {
        return Err(first_err.expect("either a report or an error exists"));
    };
    if report.verdict {
        Ok(Verdict::Separable { map_index, report })
    } else {
        Ok(Verdict::Inseparable { map_index, report })
    }
}

/// Options for the recursive separation of component blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurseOptions {
    pub bins_per_dim: usize,
    pub min_count: usize,
    pub margin: f64,
    pub degeneracy_tol: f64,
    pub partition_threshold: f64,
    pub separability_threshold: f64,
    pub max_depth: usize,
}

impl Default for RecurseOptions {
    fn default() -> Self {
        Self {
            bins_per_dim: 16,
            min_count: 50,
            margin: 1e-6,
            degeneracy_tol: 1e-3,
            partition_threshold: 0.05,
            separability_threshold: 0.05,
            max_depth: 4,
        }
    }
}

/// Why a branch of the separation tree stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LeafReason {
    OneDimensional,
    Inseparable { max_stat: f64 },
    Unsupported(String),
    DepthLimit,
    Failed(String),
}

/// Nested separation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SeparationNode {
    Leaf {
        channels: usize,
        reason: LeafReason,
    },
    Split {
        report: IndependenceReport,
        children: Vec<SeparationNode>,
    },
}

impl SeparationNode {
    pub fn leaf_count(&self) -> usize {
        match self {
            SeparationNode::Leaf { .. } => 1,
            SeparationNode::Split { children, .. } => children.iter().map(|c| c.leaf_count()).sum(),
        }
    }
}

/// Applies the full separation pipeline to a component block and recurses
/// into any recovered subsystems. One-dimensional blocks are leaves;
/// failures become leaves rather than errors.
pub fn recurse(series: &TimeSeries, opts: &RecurseOptions) -> SeparationNode {
    recurse_at_depth(series, opts, 0)
}

fn recurse_at_depth(series: &TimeSeries, opts: &RecurseOptions, depth: usize) -> SeparationNode {
    let channels = series.n_channels();
    let leaf = |reason: LeafReason| SeparationNode::Leaf { channels, reason };
    if channels == 1 {
        return leaf(LeafReason::OneDimensional);
    }
    if channels > 2 {
        return leaf(LeafReason::Unsupported(
            "map construction is limited to two channels per level".into(),
        ));
    }
    if depth >= opts.max_depth {
        return leaf(LeafReason::DepthLimit);
    }
    match separate_block(series, opts) {
        Ok(BlockOutcome::Split { report, u1, u2, rate }) => {
            let children = [u1, u2]
                .into_iter()
                .map(|u| match TimeSeries::from_channels(vec![u], rate) {
                    Ok(child) => recurse_at_depth(&child, opts, depth + 1),
                    Err(e) => SeparationNode::Leaf {
                        channels: 1,
                        reason: LeafReason::Failed(e.to_string()),
                    },
                })
                .collect();
            SeparationNode::Split { report, children }
        }
        Ok(BlockOutcome::Inseparable { max_stat }) => leaf(LeafReason::Inseparable { max_stat }),
        Err(e) => leaf(LeafReason::Failed(e.to_string())),
    }
}

enum BlockOutcome {
    Split {
        report: IndependenceReport,
        u1: Vec<f64>,
        u2: Vec<f64>,
        rate: f64,
    },
    Inseparable {
        max_stat: f64,
    },
}

fn separate_block(series: &TimeSeries, opts: &RecurseOptions) -> Result<BlockOutcome> {
    let (normalized, _) = pca_normalize(series)?;
    let samples = estimate_velocity(&normalized)?;
    let grid = build_grid(
        &samples,
        &vec![opts.bins_per_dim; normalized.n_channels()],
        opts.min_count,
        opts.margin,
    )?;
    let raw = frames_from_grid(&grid, opts.degeneracy_tol);
    let field = align_frames(&grid, raw)?;
    let w = compute_weights(&samples, &field)?;
    let corr = weight_correlation(&w)?;
    let partitions = enumerate_partitions(&corr, opts.partition_threshold);
    if partitions.is_empty() {
        let mut max_stat = 0.0_f64;
        for i in 0..corr.nrows() {
            for j in (i + 1)..corr.ncols() {
                max_stat = max_stat.max(corr[(i, j)].abs());
            }
        }
        return Ok(BlockOutcome::Inseparable { max_stat });
    }
    let x0_bin = field
        .densest_usable_bin()
        .ok_or_else(|| Error::NoValidBins("no usable bins for the base point".into()))?;
    let x0 = field.geometry().center(x0_bin);
    let map_opts = MapOptions::for_field(&field);
    let maps: Vec<CoordinateMap> = partitions
        .iter()
        .filter_map(|p| build_map(&field, p, &x0, &map_opts).ok())
        .collect();
    if maps.is_empty() {
        return Err(Error::InvalidInput("no candidate map could be built".into()));
    }
    match verdict_pipeline(&normalized, &maps, opts.separability_threshold)? {
        Verdict::Separable { map_index, report } => {
            let u = evaluate_map(&maps[map_index], &normalized)?;
            Ok(BlockOutcome::Split {
                report,
                u1: u.channel(0),
                u2: u.channel(1),
                rate: normalized.sample_rate(),
            })
        }
        Verdict::Inseparable { report, .. } => Ok(BlockOutcome::Inseparable {
            max_stat: report.max_stat,
        }),
    }
}
