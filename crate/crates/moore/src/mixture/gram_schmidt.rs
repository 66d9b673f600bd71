//! Differentiable Gram-Schmidt over expert representations.
//!
//! Columns are orthogonalized sequentially: each column has the projections
//! onto all previous orthonormal columns subtracted, then is normalized.
//! Every projection and normalization is recorded on the tape, so gradients
//! flow through the whole process. The batch dimension is carried along:
//! each sample's d×k matrix is orthonormalized independently.

use std::cell::Cell;
use std::rc::Rc;

use crate::numkit::{Error, Tape, Tensor};

/// What to do when a residual column nearly vanishes (linear dependence).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsMode {
    /// Raise a degeneracy error carrying the offending column.
    Strict,
    /// Damp the normalization with `eps` in the denominator and count it.
    Training,
}

#[derive(Debug, thiserror::Error)]
pub enum GsError {
    #[error("gram-schmidt degeneracy: column {column} residual norm {norm:.3e} < eps {eps:.3e}")]
    Degenerate { column: usize, norm: f64, eps: f64 },
    #[error(transparent)]
    Num(#[from] Error),
}

/// Expert outputs, one [B, d] tensor per expert. Column i of each sample's
/// d×k matrix is expert i's representation of that sample.
#[derive(Clone, Debug)]
pub struct ExpertRepresentations {
    pub cols: Vec<Tensor>,
}

impl ExpertRepresentations {
    pub fn k(&self) -> usize {
        self.cols.len()
    }

    pub fn batch(&self) -> usize {
        self.cols[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.cols[0].shape()[1]
    }

    /// Sample `s` as a dense d×k matrix (row-major), for diagnostics.
    pub fn sample_matrix(&self, s: usize) -> Vec<f64> {
        let d = self.dim();
        let k = self.k();
        let mut m = vec![0.0; d * k];
        for (j, col) in self.cols.iter().enumerate() {
            let data = col.data();
            for r in 0..d {
                m[r * k + j] = data[s * d + r];
            }
        }
        m
    }
}

/// Orthonormal basis columns, same layout as the input representations.
#[derive(Clone, Debug)]
pub struct OrthonormalBasis {
    pub cols: Vec<Tensor>,
}

impl OrthonormalBasis {
    pub fn k(&self) -> usize {
        self.cols.len()
    }

    pub fn batch(&self) -> usize {
        self.cols[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.cols[0].shape()[1]
    }

    pub fn sample_matrix(&self, s: usize) -> Vec<f64> {
        ExpertRepresentations {
            cols: self.cols.clone(),
        }
        .sample_matrix(s)
    }
}

/// Sequential projection and normalization, recorded on `tape`.
///
/// `u_j` keeps its projections against already-produced columns (classical,
/// not modified, Gram-Schmidt), then is divided by its residual norm. In
/// training mode a residual below `eps` is damped as r/(|r|+eps) and counted
/// in `degeneracies`; in strict mode it is an error.
pub fn gram_schmidt(
    tape: &Tape,
    reps: &ExpertRepresentations,
    eps: f64,
    mode: GsMode,
    degeneracies: Option<&Rc<Cell<u64>>>,
) -> Result<OrthonormalBasis, GsError> {
    assert!(eps > 0.0, "gram-schmidt eps must be positive");
    let k = reps.k();
    let batch = reps.batch();
    let dim = reps.dim();
    assert!(
        k <= dim,
        "expert count k={k} must not exceed representation dim d={dim}"
    );
    let mut basis: Vec<Tensor> = Vec::with_capacity(k);
    for j in 0..k {
        let u_j = &reps.cols[j];
        let mut residual = u_j.clone();
        for v_i in basis.iter() {
            let num = tape.row_dot(v_i, u_j)?;
            let den = tape.row_dot(v_i, v_i)?;
            let coef = tape.div(&num, &den)?;
            let proj = tape.row_scale(v_i, &coef)?;
            residual = tape.sub(&residual, &proj)?;
        }
        let norm = tape.sqrt(&tape.row_dot(&residual, &residual)?)?;
        // Per-sample degeneracy handling.
        let mut damp = vec![0.0; batch];
        let mut damped_rows = 0u64;
        {
            let nd = norm.data();
            for (s, &n) in nd.iter().enumerate() {
                if n < eps {
                    match mode {
                        GsMode::Strict => {
                            return Err(GsError::Degenerate {
                                column: j,
                                norm: n,
                                eps,
                            })
                        }
                        GsMode::Training => {
                            damp[s] = eps;
                            damped_rows += 1;
                        }
                    }
                }
            }
        }
        let v_j = if damped_rows > 0 {
            if let Some(counter) = degeneracies {
                counter.set(counter.get() + damped_rows);
            }
            let damp_t = Tensor::from_vec(&[batch], damp).map_err(GsError::Num)?;
            let den = tape.add(&norm, &damp_t)?;
            tape.row_div(&residual, &den)?
        } else {
            tape.row_div(&residual, &norm)?
        };
        basis.push(v_j);
    }
    Ok(OrthonormalBasis { cols: basis })
}

/// max over samples and entries of |V^T V - I|.
pub fn stiefel_residual(basis: &OrthonormalBasis) -> f64 {
    let k = basis.k();
    let batch = basis.batch();
    let d = basis.dim();
    let data: Vec<_> = basis.cols.iter().map(|c| c.data()).collect();
    let mut worst = 0.0f64;
    for s in 0..batch {
        for i in 0..k {
            for j in i..k {
                let mut dot = 0.0;
                for r in 0..d {
                    dot += data[i][s * d + r] * data[j][s * d + r];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
    }
    worst
}

/// Per-column span-preservation residual |u - V V^T u| / |u|, maximized over
/// columns and samples.
pub fn span_residual(reps: &ExpertRepresentations, basis: &OrthonormalBasis) -> f64 {
    let batch = basis.batch();
    let d = basis.dim();
    let u_data: Vec<_> = reps.cols.iter().map(|c| c.data()).collect();
    let v_data: Vec<_> = basis.cols.iter().map(|c| c.data()).collect();
    let mut worst = 0.0f64;
    for s in 0..batch {
        for uc in &u_data {
            let u = &uc[s * d..(s + 1) * d];
            // p = V V^T u
            let mut p = vec![0.0; d];
            for vc in &v_data {
                let v = &vc[s * d..(s + 1) * d];
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for r in 0..d {
                    p[r] += dot * v[r];
                }
            }
            let unorm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rnorm: f64 = u
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if unorm > 0.0 {
                worst = worst.max(rnorm / unorm);
            }
        }
    }
    worst
}

/// Mutual projection residual between the spans of two bases: columns of
/// each basis projected onto the other span must be recovered exactly when
/// the spans coincide.
pub fn mutual_span_residual(a: &OrthonormalBasis, b: &OrthonormalBasis) -> f64 {
    let to_reps = |x: &OrthonormalBasis| ExpertRepresentations {
        cols: x.cols.clone(),
    };
    span_residual(&to_reps(a), b).max(span_residual(&to_reps(b), a))
}
