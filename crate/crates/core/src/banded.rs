//! Banded LU factorization with partial pivoting.
//!
//! Storage follows the LAPACK `gbtrf` layout: column-major with leading
//! dimension `2·kl + ku + 1`, the extra `kl` rows holding fill-in created by
//! row interchanges. Both `A x = b` and `Aᵀ x = b` can be solved from one
//! factorization, which is what the tangent and adjoint steppers rely on.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    /// Zero `n × n` matrix with `kl` sub- and `ku` super-diagonals.
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        BandedMatrix { n, kl, ku, ld, data: vec![0.0; ld * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ld
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j <= i + self.ku && i <= j + self.kl
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    /// Adds `v` to entry `(i, j)`; panics outside the declared band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// `out = A x` using the original (unfactored) band.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            *o = (lo..=hi).map(|j| self.data[self.idx(i, j)] * x[j]).sum();
        }
    }

    /// `out = Aᵀ x`.
    pub fn mul_vec_transpose(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            *o = (lo..=hi).map(|i| self.data[self.idx(i, j)] * x[i]).sum();
        }
    }

    pub fn factor(mut self) -> Result<BandedLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let kv = kl + ku;
        let mut pivots = vec![0usize; n];
        // last column touched by the pivots chosen so far
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = self.data[self.idx(j, j)].abs();
            for r in 1..=km {
                let v = self.data[self.idx(j + r, j)].abs();
                if v > best {
                    best = v;
                    jp = r;
                }
            }
            pivots[j] = j + jp;
            if best == 0.0 {
                return Err(Error::SingularMatrix { column: j });
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let (a, b) = (self.idx(j, c), self.idx(j + jp, c));
                    self.data.swap(a, b);
                }
            }
            let inv = 1.0 / self.data[self.idx(j, j)];
            for r in 1..=km {
                let k = self.idx(j + r, j);
                self.data[k] *= inv;
            }
            for c in j + 1..=ju {
                let ujc = self.data[self.idx(j, c)];
                if ujc == 0.0 {
                    continue;
                }
                debug_assert!(c - j <= kv);
                for r in 1..=km {
                    let l = self.data[self.idx(j + r, j)];
                    let k = self.idx(j + r, c);
                    self.data[k] -= l * ujc;
                }
            }
        }
        Ok(BandedLu { lu: self, pivots })
    }
}

/// `P A = L U` of a [`BandedMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct BandedLu {
    lu: BandedMatrix,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn size(&self) -> usize {
        self.lu.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let m = &self.lu;
        let (n, kl) = (m.n, m.kl);
        let kv = m.kl + m.ku;
        assert_eq!(b.len(), n);
        for j in 0..n.saturating_sub(1) {
            let p = self.pivots[j];
            if p != j {
                b.swap(p, j);
            }
            let bj = b[j];
            if bj != 0.0 {
                for r in 1..=kl.min(n - 1 - j) {
                    b[j + r] -= m.data[m.idx(j + r, j)] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= m.data[m.idx(j, j)];
            let bj = b[j];
            for i in j.saturating_sub(kv)..j {
                b[i] -= m.data[m.idx(i, j)] * bj;
            }
        }
    }

    /// Solves `Aᵀ x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let m = &self.lu;
        let (n, kl) = (m.n, m.kl);
        let kv = m.kl + m.ku;
        assert_eq!(b.len(), n);
        for j in 0..n {
            let s: f64 = (j.saturating_sub(kv)..j).map(|i| m.data[m.idx(i, j)] * b[i]).sum();
            b[j] = (b[j] - s) / m.data[m.idx(j, j)];
        }
        for j in (0..n.saturating_sub(1)).rev() {
            let s: f64 = (1..=kl.min(n - 1 - j)).map(|r| m.data[m.idx(j + r, j)] * b[j + r]).sum();
            b[j] -= s;
            let p = self.pivots[j];
            if p != j {
                b.swap(p, j);
            }
        }
    }
}
