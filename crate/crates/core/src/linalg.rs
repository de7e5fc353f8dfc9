//! Symmetric banded matrices with an LDLᵀ factorization that also reports
//! inertia (the count of negative pivots).

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Lower band storage: `data[i * (bw + 1) + k]` holds A[i][i − k].
#[derive(Clone, Debug, PartialEq)]
pub struct SymBand {
    pub n: usize,
    pub bw: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        SymBand { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = SymBand::zeros(d.len(), 0);
        for (i, &v) in d.iter().enumerate() {
            m.data[i] = v;
        }
        m
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = i - j;
        (k <= self.bw).then(|| i * (self.bw + 1) + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.idx(i, j).map_or(0.0, |p| self.data[p])
    }

    /// Adds v to A[i][j] (and by symmetry A[j][i]).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        match self.idx(i, j) {
            Some(p) => self.data[p] += v,
            None => panic!("entry ({i},{j}) outside band {}", self.bw),
        }
    }

    pub fn add_diag(&mut self, d: &[f64], scale: f64) {
        assert_eq!(d.len(), self.n);
        for (i, &v) in d.iter().enumerate() {
            self.data[i * (self.bw + 1)] += scale * v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * (self.bw + 1)]).collect()
    }

    fn widened(&self, bw: usize) -> SymBand {
        if bw <= self.bw {
            return self.clone();
        }
        let mut out = SymBand::zeros(self.n, bw);
        for i in 0..self.n {
            for k in 0..=self.bw.min(i) {
                out.data[i * (out.bw + 1) + k] = self.data[i * (self.bw + 1) + k];
            }
        }
        out
    }

    /// self·a + other·b.
    pub fn combine(&self, a: f64, other: &SymBand, b: f64) -> SymBand {
        assert_eq!(self.n, other.n);
        let bw = self.bw.max(other.bw);
        let mut out = self.widened(bw);
        out.data.iter_mut().for_each(|v| *v *= a);
        for i in 0..other.n {
            for k in 0..=other.bw.min(i) {
                out.data[i * (bw + 1) + k] += b * other.data[i * (other.bw + 1) + k];
            }
        }
        out
    }

    pub fn is_zero_offdiag(&self) -> bool {
        (0..self.n).all(|i| (1..=self.bw.min(i)).all(|k| self.data[i * (self.bw + 1) + k] == 0.0))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                let lo = i.saturating_sub(self.bw);
                let hi = (i + self.bw).min(self.n - 1);
                let mut s = 0.0;
                for j in lo..=hi {
                    s += self.get(i, j) * x[j];
                }
                s
            })
            .collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.bw);
                let hi = (i + self.bw).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// A = L D Lᵀ without pivoting; fails on a zero or non-finite pivot.
    pub fn ldlt(&self) -> Result<Ldlt> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        let mut d = vec![0.0; n];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..i {
                // L[i][j] = (A[i][j] − Σ_k L[i][k] L[j][k] d[k]) / d[j]
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = self.data[i * w + (i - j)];
                for k in klo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)] * d[k];
                }
                l[i * w + (i - j)] = s / d[j];
            }
            let mut s = self.data[i * w];
            for k in lo..i {
                let lik = l[i * w + (i - k)];
                s -= lik * lik * d[k];
            }
            if s == 0.0 || !s.is_finite() {
                return Err(Error::SingularPencil);
            }
            d[i] = s;
            l[i * w] = 1.0;
        }
        Ok(Ldlt { n, bw, l, d })
    }
}

#[derive(Clone, Debug)]
pub struct Ldlt {
    n: usize,
    bw: usize,
    l: Vec<f64>,
    d: Vec<f64>,
}

impl Ldlt {
    /// Number of negative pivots, i.e. of negative eigenvalues of A.
    pub fn negatives(&self) -> usize {
        self.d.iter().filter(|&&v| v < 0.0).count()
    }

    pub fn pivots(&self) -> &[f64] {
        &self.d
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[i * w + (i - k)] * y[k];
            }
            y[i] = s;
        }
        for i in 0..n {
            y[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s;
        }
        y
    }
}
