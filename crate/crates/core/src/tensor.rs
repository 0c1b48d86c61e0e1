//! Fully symmetric fourth-order tensors stored in multiset-indexed compact
//! form. A tensor of dimension `n` keeps one value per sorted index multiset
//! `i <= j <= k <= l`, which both halves memory pressure and enforces the
//! 24-permutation symmetry of centered fourth moments by construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

fn binom(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut out = 1usize;
    for i in 0..k {
        out = out * (n - i) / (i + 1);
    }
    out
}

/// Number of size-4 multisets over an alphabet of `n` symbols.
pub fn sym4_len(n: usize) -> usize {
    binom(n + 3, 4)
}

/// Fully symmetric rank-4 tensor over `R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sym4 {
    dim: usize,
    data: Vec<f64>,
}

impl Sym4 {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; sym4_len(dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Compact slot of the sorted multiset for (i, j, k, l).
    fn slot(&self, mut idx: [usize; 4]) -> usize {
        idx.sort_unstable();
        let n = self.dim;
        let mut rank = 0;
        let mut lo = 0;
        for (p, &v) in idx.iter().enumerate() {
            let remaining = 3 - p;
            for x in lo..v {
                rank += binom(n - x + remaining - 1, remaining);
            }
            lo = v;
        }
        rank
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.slot([i, j, k, l])]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, value: f64) {
        let s = self.slot([i, j, k, l]);
        self.data[s] = value;
    }

    /// Sorted multisets in slot order.
    pub fn multisets(dim: usize) -> Vec<[usize; 4]> {
        let mut out = Vec::with_capacity(sym4_len(dim));
        for i in 0..dim {
            for j in i..dim {
                for k in j..dim {
                    for l in k..dim {
                        out.push([i, j, k, l]);
                    }
                }
            }
        }
        out
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Pairwise contraction `Q_kl = sum_m T_klmm`.
    pub fn contract_pair(&self) -> DMatrix<f64> {
        let n = self.dim;
        let mut q = DMatrix::zeros(n, n);
        for k in 0..n {
            for l in k..n {
                let mut s = 0.0;
                for m in 0..n {
                    s += self.get(k, l, m, m);
                }
                q[(k, l)] = s;
                q[(l, k)] = s;
            }
        }
        q
    }

    /// Contraction of the last two slots against a symmetric matrix:
    /// `B_kl = sum_{mn} T_klmn S_mn`.
    pub fn contract_with(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim;
        assert_eq!(s.nrows(), n);
        assert_eq!(s.ncols(), n);
        let mut b = DMatrix::zeros(n, n);
        for k in 0..n {
            for l in k..n {
                let mut acc = 0.0;
                for m in 0..n {
                    for p in 0..n {
                        acc += self.get(k, l, m, p) * s[(m, p)];
                    }
                }
                b[(k, l)] = acc;
                b[(l, k)] = acc;
            }
        }
        b
    }

    /// Four-mode transform `T'_{ijkl} = sum M_ia M_jb M_kc M_ld T_{abcd}`,
    /// computed mode by mode through a dense intermediate.
    pub fn transform(&self, m: &DMatrix<f64>) -> Sym4 {
        let n = self.dim;
        assert_eq!(m.nrows(), n);
        assert_eq!(m.ncols(), n);
        let dense_len = n * n * n * n;
        let mut cur = vec![0.0; dense_len];
        let at = |i: usize, j: usize, k: usize, l: usize| ((i * n + j) * n + k) * n + l;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        cur[at(i, j, k, l)] = self.get(i, j, k, l);
                    }
                }
            }
        }
        // Apply M along each mode in turn.
        for mode in 0..4 {
            let mut next = vec![0.0; dense_len];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let idx = [i, j, k, l];
                            let mut acc = 0.0;
                            for a in 0..n {
                                let mut src = idx;
                                src[mode] = a;
                                acc += m[(idx[mode], a)] * cur[at(src[0], src[1], src[2], src[3])];
                            }
                            next[at(i, j, k, l)] = acc;
                        }
                    }
                }
            }
            cur = next;
        }
        let mut out = Sym4::zeros(n);
        for ms in Self::multisets(n) {
            out.set(ms[0], ms[1], ms[2], ms[3], cur[at(ms[0], ms[1], ms[2], ms[3])]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_matches_enumeration() {
        for dim in 1..=5 {
            let t = Sym4::zeros(dim);
            for (expected, ms) in Sym4::multisets(dim).iter().enumerate() {
                assert_eq!(t.slot(*ms), expected, "dim {dim} multiset {ms:?}");
                // Any permutation hits the same slot.
                assert_eq!(t.slot([ms[3], ms[1], ms[0], ms[2]]), expected);
            }
            assert_eq!(sym4_len(dim), Sym4::multisets(dim).len());
        }
    }

    #[test]
    fn n2_has_five_entries() {
        assert_eq!(sym4_len(2), 5);
    }

    #[test]
    fn transform_matches_naive() {
        let n = 3;
        let mut t = Sym4::zeros(n);
        for (s, v) in t.values_mut().iter_mut().enumerate() {
            *v = (s as f64 * 0.37).sin();
        }
        let m = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j) as f64 * 0.71).cos());
        let got = t.transform(&m);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut naive = 0.0;
                        for a in 0..n {
                            for b in 0..n {
                                for c in 0..n {
                                    for d in 0..n {
                                        naive += m[(i, a)]
                                            * m[(j, b)]
                                            * m[(k, c)]
                                            * m[(l, d)]
                                            * t.get(a, b, c, d);
                                    }
                                }
                            }
                        }
                        assert!((got.get(i, j, k, l) - naive).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn contractions_agree() {
        let n = 2;
        let mut t = Sym4::zeros(n);
        for (s, v) in t.values_mut().iter_mut().enumerate() {
            *v = s as f64 + 1.0;
        }
        let q = t.contract_pair();
        let id = DMatrix::identity(n, n);
        let q2 = t.contract_with(&id);
        assert!((q - q2).amax() < 1e-14);
    }
}
