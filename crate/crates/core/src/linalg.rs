//! Small dense linear-algebra helpers on top of nalgebra.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MgpError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries the plain factorization first, then adds `1e-10 * mean(diag)`,
/// multiplying by ten up to `1e-6 * mean(diag)`.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let n = m.nrows();
    let mean_diag = if n == 0 {
        0.0
    } else {
        m.diagonal().sum() / n as f64
    };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 1e-10 * scale;
    while jitter <= 1e-6 * scale * (1.0 + 1e-9) {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = a.cholesky() {
            log::debug!("cholesky needed jitter {jitter:e}");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(MgpError::Conditioning {
        jitter: jitter / 10.0,
    })
}

/// `log |A|` from a Cholesky factor of `A`.
pub fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `||L^{-1} v||^2 = v' A^{-1} v` via one triangular solve.
pub fn quad_form(c: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    let z = c
        .l_dirty()
        .solve_lower_triangular(v)
        .expect("cholesky factor has a positive diagonal");
    z.norm_squared()
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let c = cholesky(cov)?;
    Ok(mvn_log_density_factored(x, mean, &c))
}

pub fn mvn_log_density_factored(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    c: &Cholesky<f64, Dyn>,
) -> f64 {
    let n = x.len() as f64;
    let r = x - mean;
    -0.5 * (n * LN_2PI + log_det(c) + quad_form(c, &r))
}

pub fn ln_2pi() -> f64 {
    LN_2PI
}

/// Numerically stable `log(sum(exp(v)))`; `-inf` for empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Makes `m` exactly symmetric by averaging with its transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization of a matrix that is block-diagonal over contiguous
/// index ranges. Blocks are detected from exact zeros, so a dense matrix
/// degrades to a single block.
pub struct BlockCholesky {
    blocks: Vec<(Range<usize>, Cholesky<f64, Dyn>)>,
    n: usize,
}

impl BlockCholesky {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        let mut blocks = Vec::new();
        for range in contiguous_blocks(m) {
            let sub = m
                .view((range.start, range.start), (range.len(), range.len()))
                .into_owned();
            blocks.push((range, cholesky(&sub)?));
        }
        Ok(BlockCholesky { blocks, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn log_det(&self) -> f64 {
        self.blocks.iter().map(|(_, c)| log_det(c)).sum()
    }

    /// `v' A^{-1} v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|(r, c)| quad_form(c, &v.rows(r.start, r.len()).into_owned()))
            .sum()
    }

    /// `sum_j y_j' A^{-1} y_j` over the columns of `y`.
    pub fn quad_form_columns(&self, y: &DMatrix<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|(r, c)| {
                let sub = y.rows(r.start, r.len()).into_owned();
                c.l_dirty()
                    .solve_lower_triangular(&sub)
                    .expect("cholesky factor has a positive diagonal")
                    .norm_squared()
            })
            .sum()
    }

    /// `A^{-1} v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (r, c) in &self.blocks {
            let x = c.solve(&v.rows(r.start, r.len()).into_owned());
            out.rows_mut(r.start, r.len()).copy_from(&x);
        }
        out
    }

    /// `L^{-1} B` for the block-lower-triangular factor `L`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, b.ncols());
        for (r, c) in &self.blocks {
            let x = c
                .l_dirty()
                .solve_lower_triangular(&b.rows(r.start, r.len()).into_owned())
                .expect("cholesky factor has a positive diagonal");
            out.rows_mut(r.start, r.len()).copy_from(&x);
        }
        out
    }
}

/// Maximal contiguous diagonal blocks outside of which `m` is exactly zero.
pub fn contiguous_blocks(m: &DMatrix<f64>) -> Vec<Range<usize>> {
    let n = m.nrows();
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut reach = 0;
    for i in 0..n {
        // last column of row i holding a nonzero
        let last = (i..n).rev().find(|&j| m[(i, j)] != 0.0).unwrap_or(i);
        reach = reach.max(last);
        if reach == i {
            blocks.push(start..i + 1);
            start = i + 1;
        }
    }
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let c = cholesky(&m).unwrap();
        let back = c.l() * c.l().transpose();
        assert!((back - m).abs().max() < 1e-5);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky(&m), Err(MgpError::Conditioning { .. })));
    }

    #[test]
    fn standard_normal_density() {
        let x = DVector::from_vec(vec![0.5, -1.0]);
        let lp = mvn_log_density(&x, &DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        let expect = -LN_2PI - 0.5 * (0.25 + 1.0);
        assert!((lp - expect).abs() < 1e-14);
    }

    #[test]
    fn block_factor_matches_dense() {
        let mut m = DMatrix::zeros(5, 5);
        m.view_mut((0, 0), (2, 2))
            .copy_from(&DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        m[(2, 2)] = 3.0;
        m.view_mut((3, 3), (2, 2))
            .copy_from(&DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 2.5]));
        assert_eq!(contiguous_blocks(&m), vec![0..2, 2..3, 3..5]);
        let b = BlockCholesky::new(&m).unwrap();
        let dense = cholesky(&m).unwrap();
        assert!((b.log_det() - log_det(&dense)).abs() < 1e-13);
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.7, 0.1]);
        assert!((b.quad_form(&v) - quad_form(&dense, &v)).abs() < 1e-13);
        assert!((b.solve(&v) - dense.solve(&v)).abs().max() < 1e-13);
        let y = DMatrix::from_fn(5, 3, |i, j| (i as f64 - j as f64) * 0.3);
        let direct: f64 = (0..3)
            .map(|j| quad_form(&dense, &y.column(j).into_owned()))
            .sum();
        assert!((b.quad_form_columns(&y) - direct).abs() < 1e-12);
    }

    #[test]
    fn dense_matrix_is_one_block() {
        let m = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.1 });
        assert_eq!(contiguous_blocks(&m), vec![0..4]);
        // zero interior entries do not split a block that is still coupled
        let mut m = DMatrix::identity(3, 3);
        m[(0, 2)] = 0.2;
        m[(2, 0)] = 0.2;
        assert_eq!(contiguous_blocks(&m), vec![0..3]);
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let v = [0.1, -2.0, 3.0];
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
