//! Per-bin frame matrices: whiten the local second velocity moment, rotate
//! to diagonalize the contracted whitened fourth moment, and align signs
//! and permutations across bins so the resulting vector field is
//! continuous.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{permutations, require_symmetric, sorted_symmetric_eigen, SignedPerm};
use crate::phase_binning::{BinGrid, GridGeometry};
use crate::tensor::Sym4;

/// Relative positive-definiteness floor for local second moments.
const PD_TOL: f64 = 1e-10;

/// Local frame at one bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalFrame {
    /// Frame matrix: whitens the local second moment and diagonalizes the
    /// contracted whitened fourth moment.
    pub m: DMatrix<f64>,
    /// Columns of `m^-1`: the local contravariant vectors.
    pub v: DMatrix<f64>,
    /// Diagonal of the contracted transformed fourth moment, descending.
    pub d: Vec<f64>,
    /// Set when two diagonal values nearly coincide, leaving the second
    /// rotation (and hence the frame) non-unique.
    pub degenerate: bool,
}

/// Builds the frame from local moments as a product of three matrices:
/// the rotation diagonalizing `c2`, the diagonal rescale to the identity,
/// and the rotation diagonalizing the contracted whitened fourth moment.
pub fn build_frame(c2: &DMatrix<f64>, c4: &Sym4, degeneracy_tol: f64) -> Result<LocalFrame> {
    let n = c2.nrows();
    if c2.ncols() != n {
        return Err(Error::ShapeMismatch("second moment must be square".into()));
    }
    if c4.dim() != n {
        return Err(Error::ShapeMismatch(format!(
            "fourth moment dimension {} does not match second moment {}",
            c4.dim(),
            n
        )));
    }
    require_symmetric(c2, 1e-9)?;
    let (lambda, e1) = sorted_symmetric_eigen(c2);
    let pd_floor = PD_TOL * c2.trace() / n as f64;
    let smallest = lambda[n - 1];
    if !(smallest > pd_floor) {
        return Err(Error::NotPositiveDefinite { smallest });
    }
    // Whitening: W = Lambda^(-1/2) E1^T, so W C2 W^T = I.
    let mut w = e1.transpose();
    for i in 0..n {
        let s = lambda[i].sqrt().recip();
        for j in 0..n {
            w[(i, j)] *= s;
        }
    }
    let whitened_quartic = c4.transform(&w);
    let g = whitened_quartic.contract_pair();
    let (d, e2) = sorted_symmetric_eigen(&g);
    let m = e2.transpose() * &w;
    let d: Vec<f64> = d.iter().copied().collect();
    let scale = d.iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut degenerate = false;
    for i in 0..n {
        for j in (i + 1)..n {
            if (d[i] - d[j]).abs() < degeneracy_tol * scale {
                degenerate = true;
            }
        }
    }
    let v = m.clone().try_inverse().ok_or_else(|| Error::InvalidInput(
        "frame matrix unexpectedly singular".into(),
    ))?;
    Ok(LocalFrame {
        m,
        v,
        d,
        degenerate,
    })
}

/// The transformed velocity correlations for an arbitrary matrix `m`:
/// `I2 = M C2 M^T` and the pairwise contraction
/// `Q_kl = sum_m (M M M M C4)_klmm`.
pub fn transformed_correlations(
    m: &DMatrix<f64>,
    c2: &DMatrix<f64>,
    c4: &Sym4,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if m.ncols() != n || c2.nrows() != n || c2.ncols() != n || c4.dim() != n {
        return Err(Error::ShapeMismatch(
            "frame, second and fourth moments must share one dimension".into(),
        ));
    }
    let i2 = m * c2 * m.transpose();
    // sum_m I_klmm = M (C4 : M^T M) M^T, using the symmetric contraction of
    // the last two slots against M^T M.
    let q = m * c4.contract_with(&(m.transpose() * m)) * m.transpose();
    Ok((i2, q))
}

/// Frames on a bin grid, sign/permutation aligned for continuity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameField {
    geometry: GridGeometry,
    counts: Vec<usize>,
    frames: Vec<Option<LocalFrame>>,
    /// Signed permutation applied per bin during alignment.
    alignment: Vec<Option<SignedPerm>>,
    /// Bins whose degenerate frames were replaced by neighbor interpolation.
    repaired: Vec<bool>,
}

impl FrameField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> usize {
        self.geometry.dims
    }

    pub fn n_bins(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, flat: usize) -> Option<&LocalFrame> {
        self.frames[flat].as_ref()
    }

    pub fn alignment(&self, flat: usize) -> Option<&SignedPerm> {
        self.alignment[flat].as_ref()
    }

    pub fn is_repaired(&self, flat: usize) -> bool {
        self.repaired[flat]
    }

    pub fn count(&self, flat: usize) -> usize {
        self.counts[flat]
    }

    /// Bins carrying a usable frame (aligned or repaired).
    pub fn usable_bins(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.frames.len()).filter(|&b| self.frames[b].is_some())
    }

    pub fn is_usable(&self, flat: usize) -> bool {
        self.frames[flat].is_some()
    }

    /// Bins whose frames were built from their own moments (not repaired);
    /// on these the frame equations hold exactly against the stored moments.
    pub fn exact_bins(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.frames.len()).filter(|&b| self.frames[b].is_some() && !self.repaired[b])
    }

    /// Usable bin with the largest sample count.
    pub fn densest_usable_bin(&self) -> Option<usize> {
        self.usable_bins()
            .max_by_key(|&b| (self.counts[b], usize::MAX - b))
    }

    /// Containing bin if usable, otherwise the nearest usable bin by center
    /// distance (ties to the lowest flat index).
    pub fn bin_for(&self, x: &[f64]) -> Result<usize> {
        let flat = self.geometry.containing_bin(x)?;
        if self.is_usable(flat) {
            Ok(flat)
        } else {
            self.geometry
                .nearest_by_center(x, self.usable_bins())
                .ok_or_else(|| Error::NoValidBins("frame field has no usable bins".into()))
        }
    }
}

/// Builds raw (unaligned) frames for every valid bin of the grid. Bins
/// whose second moment fails the positive-definiteness floor yield `None`.
pub fn frames_from_grid(grid: &BinGrid, degeneracy_tol: f64) -> Vec<Option<LocalFrame>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..grid.n_bins())
            .into_par_iter()
            .map(|b| frame_for_bin(grid, b, degeneracy_tol))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        frames_from_grid_seq(grid, degeneracy_tol)
    }
}

/// Single-threaded fallback for [`frames_from_grid`]; used when the
/// `parallel` feature is disabled and exposed for benchmarking.
pub fn frames_from_grid_seq(grid: &BinGrid, degeneracy_tol: f64) -> Vec<Option<LocalFrame>> {
    (0..grid.n_bins())
        .map(|b| frame_for_bin(grid, b, degeneracy_tol))
        .collect()
}

fn frame_for_bin(grid: &BinGrid, flat: usize, degeneracy_tol: f64) -> Option<LocalFrame> {
    let bin = grid.bin(flat);
    if !bin.valid {
        return None;
    }
    build_frame(&bin.c2, &bin.c4, degeneracy_tol).ok()
}

/// Best signed row permutation mapping `candidate` onto `reference`:
/// maximizes the sum of |cos| between matched rows (assignment solved by
/// enumeration), then fixes signs so matched-row dot products are positive.
fn best_signed_perm(candidate: &DMatrix<f64>, reference: &DMatrix<f64>) -> SignedPerm {
    let n = candidate.nrows();
    let mut unit_cand = Vec::with_capacity(n);
    let mut unit_ref = Vec::with_capacity(n);
    for i in 0..n {
        let rc = candidate.row(i).transpose();
        let rr = reference.row(i).transpose();
        unit_cand.push(rc.clone() / rc.norm().max(f64::MIN_POSITIVE));
        unit_ref.push(rr.clone() / rr.norm().max(f64::MIN_POSITIVE));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let score: f64 = (0..n)
            .map(|i| unit_cand[perm[i]].dot(&unit_ref[i]).abs())
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, perm));
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    let signs: Vec<f64> = (0..n)
        .map(|i| {
            if unit_cand[perm[i]].dot(&unit_ref[i]) < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    SignedPerm { perm, signs }
}

fn apply_alignment(frame: &LocalFrame, sp: &SignedPerm) -> Result<LocalFrame> {
    let m = sp.apply_rows(&frame.m);
    let v = m.clone().try_inverse().ok_or_else(|| {
        Error::InvalidInput("aligned frame unexpectedly singular".into())
    })?;
    let d = sp.perm.iter().map(|&p| frame.d[p]).collect();
    Ok(LocalFrame {
        m,
        v,
        d,
        degenerate: frame.degenerate,
    })
}

/// Aligns raw frames into a continuous field: best-first traversal from
/// the densest valid bin (denser bins attach first, so alignment paths run
/// through well-estimated frames), signed-permuting each bin's rows
/// against its best already-aligned neighbor. Degenerate bins are excluded
/// from alignment and afterwards repaired by entrywise interpolation of
/// aligned neighbor frames. The result is deterministic.
pub fn align_frames(grid: &BinGrid, raw: Vec<Option<LocalFrame>>) -> Result<FrameField> {
    let geometry = grid.geometry().clone();
    let n_bins = grid.n_bins();
    if raw.len() != n_bins {
        return Err(Error::ShapeMismatch("frame list does not match grid".into()));
    }
    let counts: Vec<usize> = (0..n_bins).map(|b| grid.bin(b).count).collect();
    let alignable: Vec<bool> = raw
        .iter()
        .map(|f| f.as_ref().is_some_and(|fr| !fr.degenerate))
        .collect();
    let start = (0..n_bins)
        .filter(|&b| alignable[b])
        .max_by_key(|&b| (counts[b], usize::MAX - b))
        .ok_or_else(|| Error::NoValidBins("no non-degenerate frames to align".into()))?;

    let mut frames: Vec<Option<LocalFrame>> = vec![None; n_bins];
    let mut alignment: Vec<Option<SignedPerm>> = vec![None; n_bins];
    let mut repaired = vec![false; n_bins];

    let dims = geometry.dims;
    frames[start] = raw[start].clone();
    alignment[start] = Some(SignedPerm::identity(dims));
    // Max-heap keyed by sample count (ties to the lowest flat index).
    let mut frontier: BinaryHeap<(usize, Reverse<usize>)> = BinaryHeap::new();
    for nb in geometry.neighbors(start) {
        if alignable[nb] {
            frontier.push((counts[nb], Reverse(nb)));
        }
    }
    let mut remaining: usize = (0..n_bins)
        .filter(|&b| alignable[b] && b != start)
        .count();
    loop {
        while let Some((_, Reverse(b))) = frontier.pop() {
            if frames[b].is_some() {
                continue;
            }
            // Match against the aligned neighbor with the most samples.
            let reference_bin = geometry
                .neighbors(b)
                .into_iter()
                .filter(|&nb| frames[nb].is_some())
                .max_by_key(|&nb| (counts[nb], usize::MAX - nb))
                .expect("frontier bins touch the aligned region");
            let reference = frames[reference_bin].as_ref().unwrap().m.clone();
            let sp = best_signed_perm(&raw[b].as_ref().unwrap().m, &reference);
            frames[b] = Some(apply_alignment(raw[b].as_ref().unwrap(), &sp)?);
            alignment[b] = Some(sp);
            remaining -= 1;
            for nb in geometry.neighbors(b) {
                if alignable[nb] && frames[nb].is_none() {
                    frontier.push((counts[nb], Reverse(nb)));
                }
            }
        }
        if remaining == 0 {
            break;
        }
        // Disconnected component: seed it from the aligned bin nearest to
        // the unaligned bin (deterministic tie-breaks on flat indices).
        let mut best: Option<(f64, usize, usize)> = None;
        for u in 0..n_bins {
            if !alignable[u] || frames[u].is_some() {
                continue;
            }
            let cu = geometry.center(u);
            for a in 0..n_bins {
                if frames[a].is_none() {
                    continue;
                }
                let ca = geometry.center(a);
                let d2: f64 = cu.iter().zip(&ca).map(|(p, q)| (p - q) * (p - q)).sum();
                let better = match &best {
                    None => true,
                    Some((bd, bu, ba)) => {
                        d2 < *bd || (d2 == *bd && (u, a) < (*bu, *ba))
                    }
                };
                if better {
                    best = Some((d2, u, a));
                }
            }
        }
        let (_, u, a) = best.expect("remaining > 0 implies an unaligned alignable bin");
        let reference = frames[a].as_ref().unwrap().m.clone();
        let sp = best_signed_perm(&raw[u].as_ref().unwrap().m, &reference);
        frames[u] = Some(apply_alignment(raw[u].as_ref().unwrap(), &sp)?);
        alignment[u] = Some(sp);
        remaining -= 1;
        for nb in geometry.neighbors(u) {
            if alignable[nb] && frames[nb].is_none() {
                frontier.push((counts[nb], Reverse(nb)));
            }
        }
    }

    // Repair degenerate valid bins from aligned neighbors, growing outwards.
    loop {
        let mut progress = false;
        for b in 0..n_bins {
            if frames[b].is_some() || raw[b].is_none() || !raw[b].as_ref().unwrap().degenerate {
                continue;
            }
            let neighbor_frames: Vec<&LocalFrame> = geometry
                .neighbors(b)
                .into_iter()
                .filter_map(|nb| frames[nb].as_ref())
                .collect();
            if neighbor_frames.is_empty() {
                continue;
            }
            let mut m = DMatrix::zeros(dims, dims);
            let mut d = vec![0.0; dims];
            for f in &neighbor_frames {
                m += &f.m;
                for k in 0..dims {
                    d[k] += f.d[k];
                }
            }
            let scale = 1.0 / neighbor_frames.len() as f64;
            m *= scale;
            for dk in &mut d {
                *dk *= scale;
            }
            let Some(v) = m.clone().try_inverse() else {
                continue;
            };
            frames[b] = Some(LocalFrame {
                m,
                v,
                d,
                degenerate: true,
            });
            repaired[b] = true;
            progress = true;
        }
        if !progress {
            break;
        }
    }

    Ok(FrameField {
        geometry,
        counts,
        frames,
        alignment,
        repaired,
    })
}

/// Direction of the group's local vector at `x` by multilinear
/// interpolation of the unit-normalized `V` columns over usable bin
/// centers (masked bins renormalize the stencil weights). Returns a unit
/// vector.
pub fn field_at(field: &FrameField, x: &[f64], group: &[usize]) -> Result<Vec<f64>> {
    if group.len() != 1 {
        return Err(Error::Unsupported(
            "field interpolation is defined per single-index group".into(),
        ));
    }
    let col = group[0];
    let geom = field.geometry();
    let dims = geom.dims;
    if x.len() != dims || col >= dims {
        return Err(Error::ShapeMismatch("point or group index out of range".into()));
    }
    for d in 0..dims {
        if x[d] < geom.lower[d] || x[d] > geom.upper[d] {
            return Err(Error::OutOfBounds {
                dim: d,
                value: x[d],
                lo: geom.lower[d],
                hi: geom.upper[d],
            });
        }
    }
    // Stencil over the grid of bin centers.
    let mut base = vec![0usize; dims];
    let mut frac = vec![0.0; dims];
    for d in 0..dims {
        let t = (x[d] - geom.lower[d]) / geom.widths[d] - 0.5;
        let max_base = geom.bins_per_dim[d] - 2;
        let i = t.floor().clamp(0.0, max_base as f64);
        base[d] = i as usize;
        frac[d] = (t - i).clamp(0.0, 1.0);
    }
    let mut acc = vec![0.0; dims];
    let mut total_weight = 0.0;
    for corner in 0..(1usize << dims) {
        let mut idx = base.clone();
        let mut weight = 1.0;
        for d in 0..dims {
            if corner & (1 << d) != 0 {
                idx[d] += 1;
                weight *= frac[d];
            } else {
                weight *= 1.0 - frac[d];
            }
        }
        if weight == 0.0 {
            continue;
        }
        let flat = geom.flat_index(&idx);
        let Some(frame) = field.frame(flat) else {
            continue;
        };
        let v_col = frame.v.column(col);
        let norm = v_col.norm();
        if norm <= 0.0 {
            continue;
        }
        for d in 0..dims {
            acc[d] += weight * v_col[d] / norm;
        }
        total_weight += weight;
    }
    if total_weight <= 0.0 {
        return Err(Error::NoValidStencil(x.to_vec()));
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::NoValidStencil(x.to_vec()));
    }
    for v in &mut acc {
        *v /= norm;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_binning::{build_grid, estimate_velocity, PhaseSeries};
    use crate::signal_io::generate_sources;

    /// Exact fourth-moment tensor of independent zero-mean unit-variance
    /// channels with fourth moments `m4`.
    fn independent_quartic(m4: &[f64]) -> Sym4 {
        let n = m4.len();
        let mut c4 = Sym4::zeros(n);
        for i in 0..n {
            c4.set(i, i, i, i, m4[i]);
            for j in (i + 1)..n {
                c4.set(i, i, j, j, 1.0);
            }
        }
        c4
    }

    /// Exact Gaussian fourth-moment tensor by the three pairings.
    fn gaussian_quartic(cov: &DMatrix<f64>) -> Sym4 {
        let n = cov.nrows();
        let mut c4 = Sym4::zeros(n);
        for ms in Sym4::multisets(n) {
            let [i, j, k, l] = ms;
            let v = cov[(i, j)] * cov[(k, l)] + cov[(i, k)] * cov[(j, l)] + cov[(i, l)] * cov[(j, k)];
            c4.set(i, j, k, l, v);
        }
        c4
    }

    #[test]
    fn isotropic_gaussian_is_degenerate_signed_permutation() {
        let c2 = DMatrix::identity(2, 2);
        let c4 = gaussian_quartic(&c2);
        let frame = build_frame(&c2, &c4, 1e-3).unwrap();
        assert!(frame.degenerate);
        for &d in &frame.d {
            assert!((d - 4.0).abs() < 1e-10, "d = {d}");
        }
        // M is a signed permutation.
        for i in 0..2 {
            let row: Vec<f64> = (0..2).map(|j| frame.m[(i, j)]).collect();
            let big: Vec<f64> = row.iter().filter(|v| v.abs() > 0.5).cloned().collect();
            assert_eq!(big.len(), 1);
            assert!((big[0].abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn hand_whitened_diagonal_case() {
        // C2 = diag(4, 1); quartic chosen so the whitened contraction is
        // already diagonal with distinct entries. Expected M = diag(1/2, 1)
        // up to signed permutation.
        let c2 = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let whitened = independent_quartic(&[9.0, 2.0]);
        let unwhiten = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let c4 = whitened.transform(&unwhiten);
        let frame = build_frame(&c2, &c4, 1e-3).unwrap();
        assert!(!frame.degenerate);
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        assert!((&frame.m - &expected).amax() < 1e-10, "m = {}", frame.m);
        let (i2, q) = transformed_correlations(&frame.m, &c2, &c4).unwrap();
        assert!((i2 - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert!((q[(0, 0)] - 10.0).abs() < 1e-9);
        assert!((q[(1, 1)] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_eigenvalue_rejected() {
        let c2 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c4 = independent_quartic(&[3.0, 3.0]);
        assert!(matches!(
            build_frame(&c2, &c4, 1e-3),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn identity_transform_returns_raw_correlations() {
        let c2 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mut c4 = independent_quartic(&[5.0, 2.0]);
        c4.set(0, 0, 0, 1, 0.25);
        let m = DMatrix::identity(2, 2);
        let (i2, q) = transformed_correlations(&m, &c2, &c4).unwrap();
        assert_eq!(i2, c2);
        let direct = c4.contract_pair();
        assert!((q - direct).amax() < 1e-12);
    }

    #[test]
    fn built_frame_satisfies_whitening() {
        let c2 = DMatrix::from_row_slice(2, 2, &[3.0, 0.8, 0.8, 1.5]);
        let mut c4 = independent_quartic(&[6.0, 2.5]);
        c4.set(0, 1, 1, 1, 0.1);
        let frame = build_frame(&c2, &c4, 1e-3).unwrap();
        let (i2, q) = transformed_correlations(&frame.m, &c2, &c4).unwrap();
        assert!((i2 - DMatrix::identity(2, 2)).amax() < 1e-8);
        let qmax = q[(0, 0)].abs().max(q[(1, 1)].abs());
        assert!(q[(0, 1)].abs() <= 1e-6 * qmax);
        // The reported diagonal comes from the contraction itself.
        assert!((q[(0, 0)] - frame.d[0]).abs() < 1e-9);
        assert!((q[(1, 1)] - frame.d[1]).abs() < 1e-9);
    }

    #[test]
    fn independent_channels_contraction_diagonal() {
        // Independent unit-variance non-Gaussian channels with fourth
        // moments m4: contraction is diagonal with Q_kk = m4_k + (N - 1).
        let m4 = [7.0, 2.2, 4.4];
        let c4 = independent_quartic(&m4);
        let m = DMatrix::identity(3, 3);
        let c2 = DMatrix::identity(3, 3);
        let (_, q) = transformed_correlations(&m, &c2, &c4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((q[(i, i)] - (m4[i] + 2.0)).abs() < 1e-12);
                } else {
                    assert_eq!(q[(i, j)], 0.0);
                }
            }
        }
    }

    /// Grid with two populated adjacent bins; the first is denser so the
    /// alignment traversal starts there.
    fn two_bin_grid() -> BinGrid {
        let mut rows = Vec::new();
        for i in 0..40 {
            let x = if i < 30 { 0.25 } else { 0.75 };
            rows.push((i, vec![x, 0.5 + ((i % 7) as f64) * 1e-3], vec![1.0, 2.0]));
        }
        rows.push((40, vec![0.0, 0.0], vec![0.0, 0.0]));
        rows.push((41, vec![1.0, 1.0], vec![0.0, 0.0]));
        let ps = PhaseSeries::from_rows(2, 1.0, rows).unwrap();
        build_grid(&ps, &[2, 2], 1, 0.0).unwrap()
    }

    #[test]
    fn alignment_repairs_row_swap_and_reflection() {
        let grid = two_bin_grid();
        let base_m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.1, 2.0]);
        let frame = |m: DMatrix<f64>| {
            let v = m.clone().try_inverse().unwrap();
            LocalFrame {
                m,
                v,
                d: vec![5.0, 3.0],
                degenerate: false,
            }
        };
        let swapped = DMatrix::from_row_slice(2, 2, &[-0.1, 2.0, 1.0, 0.1]);
        let negated = DMatrix::from_row_slice(2, 2, &[-1.0, -0.1, -0.1, 2.0]);
        let mut raw: Vec<Option<LocalFrame>> = vec![None; grid.n_bins()];
        // Occupied bins in this grid: find them by count.
        let occupied: Vec<usize> = (0..grid.n_bins())
            .filter(|&b| grid.bin(b).count > 1)
            .collect();
        assert_eq!(occupied.len(), 2);
        raw[occupied[0]] = Some(frame(base_m.clone()));
        raw[occupied[1]] = Some(frame(swapped));
        let field = align_frames(&grid, raw.clone()).unwrap();
        let aligned = field.frame(occupied[1]).unwrap();
        assert!((&aligned.m - &base_m).amax() < 1e-12, "row swap repaired");
        assert_eq!(aligned.d, vec![3.0, 5.0]);

        raw[occupied[1]] = Some(frame(negated));
        let field = align_frames(&grid, raw).unwrap();
        let aligned = field.frame(occupied[1]).unwrap();
        // Only the first row was negated; sign repair restores it.
        assert!((aligned.m[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((aligned.m[(0, 1)] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn degenerate_bin_repaired_from_neighbors() {
        let s = generate_sources("ar2-noise", 2, 60_000, 16000.0, 17).unwrap();
        let ps = estimate_velocity(&s).unwrap();
        let grid = build_grid(&ps, &[6, 6], 50, 1e-6).unwrap();
        let mut raw = frames_from_grid(&grid, 1e-3);
        // Force one interior valid frame to be degenerate.
        let target = grid.densest_valid_bin().unwrap();
        if let Some(f) = &mut raw[target] {
            f.degenerate = true;
        }
        let field = align_frames(&grid, raw).unwrap();
        assert!(field.is_repaired(target));
        assert!(field.frame(target).is_some());
    }

    #[test]
    fn field_interpolation_identities() {
        let grid = {
            let s = generate_sources("ar2-noise", 2, 40_000, 16000.0, 4).unwrap();
            let ps = estimate_velocity(&s).unwrap();
            build_grid(&ps, &[4, 4], 10, 1e-6).unwrap()
        };
        // Constant field duplicated in every bin.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let frame = LocalFrame {
            v: m.clone().try_inverse().unwrap(),
            m,
            d: vec![5.0, 3.0],
            degenerate: false,
        };
        let raw: Vec<Option<LocalFrame>> = (0..grid.n_bins()).map(|_| Some(frame.clone())).collect();
        let field = align_frames(&grid, raw).unwrap();
        // Constant field (0,1) everywhere -> (0,1) at any point.
        let geom = field.geometry().clone();
        let probe = [
            vec![
                0.3 * geom.lower[0] + 0.7 * geom.upper[0],
                0.6 * geom.lower[1] + 0.4 * geom.upper[1],
            ],
            geom.center(5),
        ];
        for x in &probe {
            let dir = field_at(&field, x, &[1]).unwrap();
            assert!((dir[0] - 0.0).abs() < 1e-12);
            assert!((dir[1] - 1.0).abs() < 1e-12);
        }
        // At a bin center the interpolation returns that bin's vector.
        let c = geom.center(9);
        let dir = field_at(&field, &c, &[0]).unwrap();
        assert!((dir[0] - 1.0).abs() < 1e-12);
        assert!(dir[1].abs() < 1e-12);
    }

    #[test]
    fn field_midpoint_blend_renormalized() {
        let grid = two_bin_grid();
        let occupied: Vec<usize> = (0..grid.n_bins())
            .filter(|&b| grid.bin(b).count > 1)
            .collect();
        // V columns: group 0 is (1,0) in one bin, (0,1) in the other.
        // Build M as the inverse of the desired V.
        let v_a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v_b = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let mut raw: Vec<Option<LocalFrame>> = vec![None; grid.n_bins()];
        for (bin, v) in [(occupied[0], v_a), (occupied[1], v_b)] {
            let m = v.clone().try_inverse().unwrap();
            raw[bin] = Some(LocalFrame {
                m,
                v,
                d: vec![5.0, 3.0],
                degenerate: false,
            });
        }
        // Skip alignment (it would undo the deliberate mismatch): build the
        // field directly.
        let field = FrameField {
            geometry: grid.geometry().clone(),
            counts: (0..grid.n_bins()).map(|b| grid.bin(b).count).collect(),
            frames: raw,
            alignment: vec![None; grid.n_bins()],
            repaired: vec![false; grid.n_bins()],
        };
        let ca = grid.center(occupied[0]);
        let cb = grid.center(occupied[1]);
        let mid: Vec<f64> = ca.iter().zip(&cb).map(|(a, b)| 0.5 * (a + b)).collect();
        let dir = field_at(&field, &mid, &[0]).unwrap();
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!((dir[0] - inv_sqrt2).abs() < 1e-12);
        assert!((dir[1] - inv_sqrt2).abs() < 1e-12);
    }
}
