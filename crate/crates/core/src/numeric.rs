//! Small numerical building blocks: compensated summation, deterministic
//! symmetric eigendecomposition, signed permutations, and rank statistics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Neumaier-compensated accumulator. Sums are reproducible to a couple of
/// ulps regardless of the number of terms, which keeps moment tensors
/// order-independent.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated sum of an iterator of terms.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Eigendecomposition of a symmetric matrix with a deterministic convention:
/// eigenvalues sorted descending, each eigenvector's largest-magnitude
/// component made positive (ties broken by lowest index).
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns.
pub fn sorted_symmetric_eigen(mat: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = mat.nrows();
    let eig = mat.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Checks that `mat` is symmetric within `tol` of its largest entry.
pub fn require_symmetric(mat: &DMatrix<f64>, tol: f64) -> Result<()> {
    let scale = mat.amax().max(1.0);
    let mut worst = 0.0_f64;
    for i in 0..mat.nrows() {
        for j in (i + 1)..mat.ncols() {
            worst = worst.max((mat[(i, j)] - mat[(j, i)]).abs());
        }
    }
    if worst > tol * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: worst,
        });
    }
    Ok(())
}

/// All permutations of `0..n` in a deterministic order (lexicographic).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    // Lexicographic next-permutation loop.
    loop {
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
        current.swap(i, j);
        current[i + 1..].reverse();
        out.push(current.clone());
    }
    out
}

/// A permutation combined with per-component sign flips:
/// `out[i] = signs[i] * input[perm[i]]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SignedPerm {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl SignedPerm {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            signs: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| p == i)
            && self.signs.iter().all(|&s| s == 1.0)
    }

    /// Applies to a vector: `out[i] = signs[i] * v[perm[i]]`.
    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        self.perm
            .iter()
            .zip(&self.signs)
            .map(|(&p, &s)| s * v[p])
            .collect()
    }

    /// Applies to the rows of a matrix: row `i` of the output is
    /// `signs[i]` times row `perm[i]` of the input.
    pub fn apply_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, (&p, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            for j in 0..m.ncols() {
                out[(i, j)] = s * m[(p, j)];
            }
        }
        out
    }

    /// The equivalent matrix `P` with `P v = apply_vec(v)`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            p[(i, self.perm[i])] = self.signs[i];
        }
        p
    }
}

/// Pearson correlation of two equally long slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mean_a = kahan_sum(a.iter().copied()) / n;
    let mean_b = kahan_sum(b.iter().copied()) / n;
    let mut cov = KahanSum::new();
    let mut var_a = KahanSum::new();
    let mut var_b = KahanSum::new();
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov.add(dx * dy);
        var_a.add(dx * dx);
        var_b.add(dy * dy);
    }
    let denom = (var_a.value() * var_b.value()).sqrt();
    if denom == 0.0 {
        return f64::NAN;
    }
    cov.value() / denom
}

/// Fractional ranks (1-based) with ties assigned their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_cancellation() {
        let mut s = KahanSum::new();
        s.add(1e16);
        s.add(1.0);
        s.add(-1e16);
        assert_eq!(s.value(), 1.0);
    }

    #[test]
    fn eigen_sorted_and_sign_fixed() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // Reconstruction.
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((rec - &m).amax() < 1e-12);
        // Largest component of each eigenvector is positive.
        for j in 0..2 {
            let col = vecs.column(j);
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            assert!(max > 0.0);
        }
    }

    #[test]
    fn permutations_count_and_order() {
        let p3 = permutations(3);
        assert_eq!(p3.len(), 6);
        assert_eq!(p3[0], vec![0, 1, 2]);
        assert_eq!(p3[5], vec![2, 1, 0]);
    }

    #[test]
    fn signed_perm_round_trip() {
        let sp = SignedPerm {
            perm: vec![1, 0],
            signs: vec![-1.0, 1.0],
        };
        assert_eq!(sp.apply_vec(&[3.0, 4.0]), vec![-4.0, 3.0]);
        let m = sp.to_matrix();
        let v = m * DVector::from_column_slice(&[3.0, 4.0]);
        assert_eq!(v.as_slice(), &[-4.0, 3.0]);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_monotone_invariance() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.31).cos()).collect();
        let a3: Vec<f64> = a.iter().map(|&x| x + x.powi(3)).collect();
        assert_eq!(spearman(&a, &b), spearman(&a3, &b));
    }
}
