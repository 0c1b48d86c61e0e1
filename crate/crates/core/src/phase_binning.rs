//! Velocity estimation, rectangular binning of phase samples, and per-bin
//! velocity moment accumulation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::KahanSum;
use crate::signal_io::TimeSeries;
use crate::tensor::Sym4;

/// One phase-space sample: position and velocity at a time index.
/// Borrowed view into a [`PhaseSeries`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSample<'a> {
    pub t_index: usize,
    pub x: &'a [f64],
    pub v: &'a [f64],
}

/// Sequence of phase samples in structure-of-arrays layout.
#[derive(Debug, Clone)]
pub struct PhaseSeries {
    dims: usize,
    sample_rate: f64,
    t_index: Vec<usize>,
    x: Vec<f64>,
    v: Vec<f64>,
}

impl PhaseSeries {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.t_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_index.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn get(&self, i: usize) -> PhaseSample<'_> {
        PhaseSample {
            t_index: self.t_index[i],
            x: &self.x[i * self.dims..(i + 1) * self.dims],
            v: &self.v[i * self.dims..(i + 1) * self.dims],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = PhaseSample<'_>> {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Assembles a series from parallel position/velocity rows (used by
    /// tests and by callers that synthesize samples directly).
    pub fn from_rows(
        dims: usize,
        sample_rate: f64,
        rows: impl IntoIterator<Item = (usize, Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut t_index = Vec::new();
        let mut x = Vec::new();
        let mut v = Vec::new();
        for (t, xs, vs) in rows {
            if xs.len() != dims || vs.len() != dims {
                return Err(Error::ShapeMismatch("phase sample has wrong dimension".into()));
            }
            if xs.iter().chain(vs.iter()).any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite phase sample at t={t}"
                )));
            }
            t_index.push(t);
            x.extend_from_slice(&xs);
            v.extend_from_slice(&vs);
        }
        Ok(Self {
            dims,
            sample_rate,
            t_index,
            x,
            v,
        })
    }
}

/// Estimates velocities by central differences,
/// `v(t_n) = (x_{n+1} - x_{n-1}) * rate / 2`, dropping both endpoints.
/// Output indices run over `1..=T-2`.
pub fn estimate_velocity(series: &TimeSeries) -> Result<PhaseSeries> {
    let t_len = series.len();
    if t_len < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 samples for central differences, got {t_len}"
        )));
    }
    let dims = series.n_channels();
    let half_rate = series.sample_rate() / 2.0;
    let mut t_index = Vec::with_capacity(t_len - 2);
    let mut x = Vec::with_capacity((t_len - 2) * dims);
    let mut v = Vec::with_capacity((t_len - 2) * dims);
    for t in 1..t_len - 1 {
        t_index.push(t);
        x.extend_from_slice(series.sample(t));
        let prev = series.sample(t - 1);
        let next = series.sample(t + 1);
        for k in 0..dims {
            v.push((next[k] - prev[k]) * half_rate);
        }
    }
    Ok(PhaseSeries {
        dims,
        sample_rate: series.sample_rate(),
        t_index,
        x,
        v,
    })
}

/// Per-bin sample count and centered velocity moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    pub mean_v: Vec<f64>,
    /// Centered second moment of the velocity, symmetric.
    pub c2: DMatrix<f64>,
    /// Centered fourth moment, fully symmetric.
    pub c4: Sym4,
    pub valid: bool,
}

/// Shared rectangular-grid geometry: bounds, bin widths, index arithmetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: usize,
    pub bins_per_dim: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub widths: Vec<f64>,
}

impl GridGeometry {
    pub fn n_bins(&self) -> usize {
        self.bins_per_dim.iter().product()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            flat = flat * self.bins_per_dim[d] + i;
        }
        flat
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims];
        for d in (0..self.dims).rev() {
            idx[d] = flat % self.bins_per_dim[d];
            flat /= self.bins_per_dim[d];
        }
        idx
    }

    /// Center of a bin in x-space.
    pub fn center(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        idx.iter()
            .enumerate()
            .map(|(d, &i)| self.lower[d] + (i as f64 + 0.5) * self.widths[d])
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dims).all(|d| x[d] >= self.lower[d] && x[d] <= self.upper[d])
    }

    /// Flat index of the bin containing `x`, or an out-of-bounds error.
    pub fn containing_bin(&self, x: &[f64]) -> Result<usize> {
        let mut idx = vec![0usize; self.dims];
        for d in 0..self.dims {
            if x[d] < self.lower[d] || x[d] > self.upper[d] {
                return Err(Error::OutOfBounds {
                    dim: d,
                    value: x[d],
                    lo: self.lower[d],
                    hi: self.upper[d],
                });
            }
            let i = ((x[d] - self.lower[d]) / self.widths[d]).floor() as usize;
            idx[d] = i.min(self.bins_per_dim[d] - 1);
        }
        Ok(self.flat_index(&idx))
    }

    /// Face-adjacent neighbor bins, in ascending-dimension order.
    pub fn neighbors(&self, flat: usize) -> Vec<usize> {
        let idx = self.multi_index(flat);
        let mut out = Vec::with_capacity(2 * self.dims);
        for d in 0..self.dims {
            if idx[d] > 0 {
                let mut n = idx.clone();
                n[d] -= 1;
                out.push(self.flat_index(&n));
            }
            if idx[d] + 1 < self.bins_per_dim[d] {
                let mut n = idx.clone();
                n[d] += 1;
                out.push(self.flat_index(&n));
            }
        }
        out
    }

    /// Among `eligible` bins, the one whose center is nearest to `x`
    /// (ties broken by lowest flat index).
    pub fn nearest_by_center(&self, x: &[f64], mut eligible: impl Iterator<Item = usize>) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for b in &mut eligible {
            let c = self.center(b);
            let d2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            let better = match best {
                None => true,
                Some((bd, bb)) => d2 < bd || (d2 == bd && b < bb),
            };
            if better {
                best = Some((d2, b));
            }
        }
        best.map(|(_, b)| b)
    }
}

/// Rectangular partition of x-space holding per-bin moment tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinGrid {
    geometry: GridGeometry,
    min_count: usize,
    bins: Vec<BinStats>,
    in_bounds: usize,
}

impl BinGrid {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> usize {
        self.geometry.dims
    }

    pub fn bins_per_dim(&self) -> &[usize] {
        &self.geometry.bins_per_dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.geometry.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.geometry.upper
    }

    pub fn widths(&self) -> &[f64] {
        &self.geometry.widths
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn bin(&self, flat: usize) -> &BinStats {
        &self.bins[flat]
    }

    pub fn bins(&self) -> &[BinStats] {
        &self.bins
    }

    pub fn in_bounds_samples(&self) -> usize {
        self.in_bounds
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.geometry.center(flat)
    }

    pub fn containing_bin(&self, x: &[f64]) -> Result<usize> {
        self.geometry.containing_bin(x)
    }

    pub fn neighbors(&self, flat: usize) -> Vec<usize> {
        self.geometry.neighbors(flat)
    }

    pub fn valid_bins(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.bins.len()).filter(|&b| self.bins[b].valid)
    }

    /// Flat index of the valid bin with the largest sample count
    /// (ties broken by lowest flat index).
    pub fn densest_valid_bin(&self) -> Option<usize> {
        self.valid_bins().max_by_key(|&b| (self.bins[b].count, usize::MAX - b))
    }
}

/// Maps an in-bounds point to its containing bin, falling back to the
/// nearest valid bin (by center distance, ties to the lowest flat index)
/// when the containing bin is invalid.
pub fn bin_lookup(grid: &BinGrid, x: &[f64]) -> Result<usize> {
    let flat = grid.containing_bin(x)?;
    if grid.bin(flat).valid {
        Ok(flat)
    } else {
        grid.geometry
            .nearest_by_center(x, grid.valid_bins())
            .ok_or_else(|| Error::NoValidBins("grid has no valid bins".into()))
    }
}

fn accumulate_bin(samples: &PhaseSeries, members: &[u32], min_count: usize) -> BinStats {
    let dims = samples.dims();
    let count = members.len();
    let mut mean_v = vec![0.0; dims];
    if count > 0 {
        let mut acc: Vec<KahanSum> = vec![KahanSum::new(); dims];
        for &i in members {
            let s = samples.get(i as usize);
            for k in 0..dims {
                acc[k].add(s.v[k]);
            }
        }
        for k in 0..dims {
            mean_v[k] = acc[k].value() / count as f64;
        }
    }
    let mut c2 = DMatrix::zeros(dims, dims);
    let mut c4 = Sym4::zeros(dims);
    if count > 0 {
        // Second-order entries, upper triangle.
        for i in 0..dims {
            for j in i..dims {
                let mut acc = KahanSum::new();
                for &m in members {
                    let s = samples.get(m as usize);
                    acc.add((s.v[i] - mean_v[i]) * (s.v[j] - mean_v[j]));
                }
                let val = acc.value() / count as f64;
                c2[(i, j)] = val;
                c2[(j, i)] = val;
            }
        }
        // Fourth-order entries, one accumulator per index multiset.
        for ms in Sym4::multisets(dims) {
            let mut acc = KahanSum::new();
            for &m in members {
                let s = samples.get(m as usize);
                acc.add(
                    (s.v[ms[0]] - mean_v[ms[0]])
                        * (s.v[ms[1]] - mean_v[ms[1]])
                        * (s.v[ms[2]] - mean_v[ms[2]])
                        * (s.v[ms[3]] - mean_v[ms[3]]),
                );
            }
            c4.set(ms[0], ms[1], ms[2], ms[3], acc.value() / count as f64);
        }
    }
    BinStats {
        count,
        mean_v,
        c2,
        c4,
        valid: count >= min_count && count > 0,
    }
}

fn fit_geometry(
    samples: &PhaseSeries,
    bins_per_dim: &[usize],
    margin: f64,
) -> Result<GridGeometry> {
    let dims = samples.dims();
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to bin".into()));
    }
    if bins_per_dim.len() != dims {
        return Err(Error::ShapeMismatch(format!(
            "bins_per_dim has {} entries for {} dimensions",
            bins_per_dim.len(),
            dims
        )));
    }
    if bins_per_dim.iter().any(|&b| b < 2) {
        return Err(Error::InvalidInput("need at least 2 bins per dimension".into()));
    }
    let mut lower = vec![f64::INFINITY; dims];
    let mut upper = vec![f64::NEG_INFINITY; dims];
    for i in 0..samples.len() {
        let s = samples.get(i);
        for d in 0..dims {
            lower[d] = lower[d].min(s.x[d]);
            upper[d] = upper[d].max(s.x[d]);
        }
    }
    let mut widths = vec![0.0; dims];
    for d in 0..dims {
        let range = upper[d] - lower[d];
        if !(range > 0.0) {
            return Err(Error::InvalidInput(format!(
                "zero-width dimension {d}: all samples at {}",
                lower[d]
            )));
        }
        lower[d] -= margin * range;
        upper[d] += margin * range;
        widths[d] = (upper[d] - lower[d]) / bins_per_dim[d] as f64;
    }
    Ok(GridGeometry {
        dims,
        bins_per_dim: bins_per_dim.to_vec(),
        lower,
        upper,
        widths,
    })
}

/// Shared implementation: bin membership via a stable counting sort (time
/// order preserved within each bin) followed by per-bin accumulation, which
/// `run_bins` executes either sequentially or in parallel. Results are
/// identical either way.
fn build_grid_impl(
    samples: &PhaseSeries,
    bins_per_dim: &[usize],
    min_count: usize,
    margin: f64,
    run_bins: impl Fn(&[Vec<u32>]) -> Vec<BinStats>,
) -> Result<BinGrid> {
    let geometry = fit_geometry(samples, bins_per_dim, margin)?;
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); geometry.n_bins()];
    for i in 0..samples.len() {
        let flat = geometry
            .containing_bin(samples.get(i).x)
            .expect("bounds derived from the samples themselves");
        members[flat].push(i as u32);
    }
    Ok(BinGrid {
        geometry,
        min_count,
        in_bounds: samples.len(),
        bins: run_bins(&members),
    })
}

/// Builds the bin grid and accumulates per-bin moments, in parallel across
/// bins when the `parallel` feature is enabled.
pub fn build_grid(
    samples: &PhaseSeries,
    bins_per_dim: &[usize],
    min_count: usize,
    margin: f64,
) -> Result<BinGrid> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        build_grid_impl(samples, bins_per_dim, min_count, margin, |members| {
            members
                .par_iter()
                .map(|m| accumulate_bin(samples, m, min_count))
                .collect()
        })
    }
    #[cfg(not(feature = "parallel"))]
    {
        build_grid_seq(samples, bins_per_dim, min_count, margin)
    }
}

/// Single-threaded fallback for [`build_grid`]; used when the `parallel`
/// feature is disabled and exposed for benchmarking.
pub fn build_grid_seq(
    samples: &PhaseSeries,
    bins_per_dim: &[usize],
    min_count: usize,
    margin: f64,
) -> Result<BinGrid> {
    build_grid_impl(samples, bins_per_dim, min_count, margin, |members| {
        members
            .iter()
            .map(|m| accumulate_bin(samples, m, min_count))
            .collect()
    })
}
