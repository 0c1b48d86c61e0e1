//! Coordinate-system-independent weight series: each measurement velocity
//! expressed in the local frame basis, plus partition search over weight
//! components and signed-permutation matching between weight series.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_frames::{align_frames, frames_from_grid, FrameField};
use crate::numeric::{kahan_sum, pearson, permutations, KahanSum, SignedPerm};
use crate::phase_binning::{build_grid, estimate_velocity, PhaseSeries};
use crate::signal_io::TimeSeries;

/// Time series of weight vectors, aligned with phase-sample time indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSeries {
    dims: usize,
    t_index: Vec<usize>,
    /// Row-major: sample i, component k at `w[i * dims + k]`.
    w: Vec<f64>,
    /// Samples dropped because they fell outside the grid bounds.
    pub dropped: usize,
}

impl WeightSeries {
    pub fn from_rows(dims: usize, rows: impl IntoIterator<Item = (usize, Vec<f64>)>) -> Result<Self> {
        let mut t_index = Vec::new();
        let mut w = Vec::new();
        for (t, row) in rows {
            if row.len() != dims {
                return Err(Error::ShapeMismatch("weight row has wrong dimension".into()));
            }
            t_index.push(t);
            w.extend_from_slice(&row);
        }
        Ok(Self {
            dims,
            t_index,
            w,
            dropped: 0,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.t_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_index.is_empty()
    }

    pub fn t_index(&self, i: usize) -> usize {
        self.t_index[i]
    }

    pub fn time_indices(&self) -> &[usize] {
        &self.t_index
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.w[i * self.dims..(i + 1) * self.dims]
    }

    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.w.iter().skip(k).step_by(self.dims).copied().collect()
    }

    /// Restriction of `a` and `b` to their common time indices (both inputs
    /// must be sorted by time, as produced by the pipeline).
    pub fn intersect_by_time(a: &WeightSeries, b: &WeightSeries) -> (WeightSeries, WeightSeries) {
        let mut ia = 0;
        let mut ib = 0;
        let mut rows_a = Vec::new();
        let mut rows_b = Vec::new();
        while ia < a.len() && ib < b.len() {
            let (ta, tb) = (a.t_index[ia], b.t_index[ib]);
            match ta.cmp(&tb) {
                std::cmp::Ordering::Less => ia += 1,
                std::cmp::Ordering::Greater => ib += 1,
                std::cmp::Ordering::Equal => {
                    rows_a.push((ta, a.get(ia).to_vec()));
                    rows_b.push((tb, b.get(ib).to_vec()));
                    ia += 1;
                    ib += 1;
                }
            }
        }
        (
            WeightSeries::from_rows(a.dims, rows_a).expect("rows are well-formed"),
            WeightSeries::from_rows(b.dims, rows_b).expect("rows are well-formed"),
        )
    }
}

fn weight_row(field: &FrameField, x: &[f64], v: &[f64]) -> Result<Option<Vec<f64>>> {
    let flat = match field.bin_for(x) {
        Ok(flat) => flat,
        Err(Error::OutOfBounds { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let m = &field.frame(flat).expect("bin_for returns usable bins").m;
    let dims = field.dims();
    let mut row = vec![0.0; dims];
    for k in 0..dims {
        let mut acc = 0.0;
        for j in 0..dims {
            acc += m[(k, j)] * v[j];
        }
        row[k] = acc;
    }
    Ok(Some(row))
}

fn collect_weights(
    samples: &PhaseSeries,
    rows: Vec<Result<Option<Vec<f64>>>>,
) -> Result<WeightSeries> {
    let dims = samples.dims();
    let mut t_index = Vec::with_capacity(samples.len());
    let mut w = Vec::with_capacity(samples.len() * dims);
    let mut dropped = 0;
    for (i, row) in rows.into_iter().enumerate() {
        match row? {
            Some(r) => {
                t_index.push(samples.get(i).t_index);
                w.extend_from_slice(&r);
            }
            None => dropped += 1,
        }
    }
    Ok(WeightSeries {
        dims,
        t_index,
        w,
        dropped,
    })
}

/// Computes `w = M(bin(x)) * v` for every phase sample against the aligned
/// field, with nearest-usable-bin fallback. Out-of-bounds samples are
/// dropped and counted.
pub fn compute_weights(samples: &PhaseSeries, field: &FrameField) -> Result<WeightSeries> {
    if field.usable_bins().next().is_none() {
        return Err(Error::NoValidBins("frame field has no usable bins".into()));
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let rows: Vec<Result<Option<Vec<f64>>>> = (0..samples.len())
            .into_par_iter()
            .map(|i| {
                let s = samples.get(i);
                weight_row(field, s.x, s.v)
            })
            .collect();
        collect_weights(samples, rows)
    }
    #[cfg(not(feature = "parallel"))]
    {
        compute_weights_seq(samples, field)
    }
}

/// Single-threaded fallback for [`compute_weights`]; used when the
/// `parallel` feature is disabled and exposed for benchmarking.
pub fn compute_weights_seq(samples: &PhaseSeries, field: &FrameField) -> Result<WeightSeries> {
    if field.usable_bins().next().is_none() {
        return Err(Error::NoValidBins("frame field has no usable bins".into()));
    }
    let rows: Vec<Result<Option<Vec<f64>>>> = (0..samples.len())
        .map(|i| {
            let s = samples.get(i);
            weight_row(field, s.x, s.v)
        })
        .collect();
    collect_weights(samples, rows)
}

/// Pearson correlation matrix of the weight components.
pub fn weight_correlation(w: &WeightSeries) -> Result<DMatrix<f64>> {
    let n = w.dims();
    if w.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 weight samples, got {}",
            w.len()
        )));
    }
    let channels: Vec<Vec<f64>> = (0..n).map(|k| w.channel(k)).collect();
    for (k, ch) in channels.iter().enumerate() {
        let mean = kahan_sum(ch.iter().copied()) / ch.len() as f64;
        let var = kahan_sum(ch.iter().map(|v| (v - mean) * (v - mean)));
        if !(var > 0.0) {
            return Err(Error::DegenerateComponent { component: k });
        }
    }
    let mut corr = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = pearson(&channels[i], &channels[j]);
            corr[(i, j)] = r;
            corr[(j, i)] = r;
        }
    }
    Ok(corr)
}

/// A bipartition of weight components with its cross-group score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub group1: Vec<usize>,
    pub group2: Vec<usize>,
    /// Max absolute cross-group correlation.
    pub score: f64,
}

/// All bipartitions whose maximum absolute cross-group correlation is at
/// most `threshold`, sorted ascending by score. An empty result means the
/// weights cannot be split at this criterion.
pub fn enumerate_partitions(corr: &DMatrix<f64>, threshold: f64) -> Vec<Partition> {
    let n = corr.nrows();
    if n < 2 {
        return Vec::new();
    }
    let full: u32 = (1 << n) - 1;
    let mut out = Vec::new();
    for mask in 1u32..full {
        // Canonical form: group 1 contains component 0.
        if mask & 1 == 0 {
            continue;
        }
        let group1: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let group2: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) == 0).collect();
        let mut score = 0.0_f64;
        for &i in &group1 {
            for &j in &group2 {
                score = score.max(corr[(i, j)].abs());
            }
        }
        if score <= threshold {
            out.push(Partition {
                group1,
                group2,
                score,
            });
        }
    }
    out.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.group1.cmp(&b.group1))
    });
    out
}

/// Finds the signed permutation `P` minimizing `||a - P b||` (exhaustive
/// over permutations; practical for widths up to 8). Returns `P` and the
/// normalized RMS residual `||a - P b||_F / ||a||_F`.
pub fn match_signed_permutation(
    a: &WeightSeries,
    b: &WeightSeries,
) -> Result<(SignedPerm, f64)> {
    let n = a.dims();
    if b.dims() != n || a.len() != b.len() {
        return Err(Error::ShapeMismatch(
            "weight series must have equal lengths and widths".into(),
        ));
    }
    if n > 8 {
        return Err(Error::Unsupported(format!(
            "signed-permutation matching capped at width 8, got {n}"
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty weight series".into()));
    }
    // Cross dot products and energies.
    let mut dot = vec![vec![0.0; n]; n];
    let mut ea = vec![0.0; n];
    let mut eb = vec![0.0; n];
    for i in 0..n {
        let ai = a.channel(i);
        ea[i] = kahan_sum(ai.iter().map(|v| v * v));
        let bi = b.channel(i);
        eb[i] = kahan_sum(bi.iter().map(|v| v * v));
        for j in 0..n {
            let bj = b.channel(j);
            let mut acc = KahanSum::new();
            for (x, y) in ai.iter().zip(&bj) {
                acc.add(x * y);
            }
            dot[i][j] = acc.value();
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let residual_sq: f64 = (0..n)
            .map(|i| ea[i] + eb[perm[i]] - 2.0 * dot[i][perm[i]].abs())
            .sum();
        if best.as_ref().is_none_or(|(r, _)| residual_sq < *r) {
            best = Some((residual_sq, perm));
        }
    }
    let (residual_sq, perm) = best.expect("at least one permutation");
    let signs: Vec<f64> = (0..n)
        .map(|i| if dot[i][perm[i]] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let total_energy: f64 = ea.iter().sum();
    let residual = (residual_sq.max(0.0) / total_energy.max(f64::MIN_POSITIVE)).sqrt();
    Ok((SignedPerm { perm, signs }, residual))
}

/// Weights of one subsystem computed directly from its own (unmixed) block
/// of source channels: the block is binned and framed on its own, which is
/// the block-diagonal reference construction.
pub fn block_reference_weights(
    sources: &TimeSeries,
    block: &[usize],
    bins_per_dim: usize,
    min_count: usize,
    margin: f64,
    degeneracy_tol: f64,
) -> Result<WeightSeries> {
    let sub = sources.select_channels(block)?;
    let samples = estimate_velocity(&sub)?;
    let grid = build_grid(
        &samples,
        &vec![bins_per_dim; block.len()],
        min_count,
        margin,
    )?;
    let raw = frames_from_grid(&grid, degeneracy_tol);
    let field = align_frames(&grid, raw)?;
    compute_weights(&samples, &field)
}

/// Assembles per-block reference weights for a list of blocks into one
/// series over the blocks' common time indices, components in block order.
pub fn unmixed_reference_weights(
    sources: &TimeSeries,
    blocks: &[Vec<usize>],
    bins_per_dim: usize,
    min_count: usize,
    margin: f64,
    degeneracy_tol: f64,
) -> Result<WeightSeries> {
    let per_block: Vec<WeightSeries> = blocks
        .iter()
        .map(|b| {
            block_reference_weights(sources, b, bins_per_dim, min_count, margin, degeneracy_tol)
        })
        .collect::<Result<_>>()?;
    // Intersect all blocks' time indices.
    let mut common: Vec<usize> = per_block[0].time_indices().to_vec();
    for ws in &per_block[1..] {
        let set: std::collections::BTreeSet<usize> = ws.time_indices().iter().copied().collect();
        common.retain(|t| set.contains(t));
    }
    let total_dims: usize = blocks.iter().map(|b| b.len()).sum();
    let mut rows = Vec::with_capacity(common.len());
    // Position of each time index within each block series.
    let lookups: Vec<std::collections::HashMap<usize, usize>> = per_block
        .iter()
        .map(|ws| {
            ws.time_indices()
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, i))
                .collect()
        })
        .collect();
    for &t in &common {
        let mut row = Vec::with_capacity(total_dims);
        for (ws, lookup) in per_block.iter().zip(&lookups) {
            row.extend_from_slice(ws.get(lookup[&t]));
        }
        rows.push((t, row));
    }
    WeightSeries::from_rows(total_dims, rows)
}
