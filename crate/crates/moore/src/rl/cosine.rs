//! Cosine-similarity relaxation of the orthogonality constraint: the
//! squared Frobenius norm of the normalized Gram residual, averaged over
//! the batch. Used in place of Gram-Schmidt by the cosine-sim baseline.

use crate::mixture::ExpertRepresentations;
use crate::numkit::{Error, Tape, Tensor};

const NORM_EPS: f64 = 1e-8;

/// || Uhat^T Uhat - I ||_F^2 with column-normalized Uhat, batch-averaged.
pub fn cosine_reg_loss(tape: &Tape, reps: &ExpertRepresentations) -> Result<Tensor, Error> {
    let k = reps.k();
    // normalize each column per sample, damping zero norms
    let mut unit_cols = Vec::with_capacity(k);
    for col in &reps.cols {
        let norm = tape.sqrt(&tape.row_dot(col, col)?)?;
        let denom = tape.add_scalar(&norm, NORM_EPS)?;
        unit_cols.push(tape.row_div(col, &denom)?);
    }
    let mut loss: Option<Tensor> = None;
    for i in 0..k {
        for j in i..k {
            let gram = tape.row_dot(&unit_cols[i], &unit_cols[j])?;
            let resid = if i == j {
                tape.add_scalar(&gram, -1.0)?
            } else {
                gram
            };
            let sq = tape.mul(&resid, &resid)?;
            let mut term = tape.mean(&sq)?;
            if i != j {
                // off-diagonal entries appear twice in the Frobenius norm
                term = tape.mul_scalar(&term, 2.0)?;
            }
            loss = Some(match loss {
                Some(acc) => tape.add(&acc, &term)?,
                None => term,
            });
        }
    }
    Ok(loss.expect("k >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reps(cols: Vec<Vec<f64>>, d: usize) -> ExpertRepresentations {
        ExpertRepresentations {
            cols: cols
                .into_iter()
                .map(|c| Tensor::from_vec(&[c.len() / d, d], c).unwrap())
                .collect(),
        }
    }

    #[test]
    fn orthonormal_columns_give_zero() {
        let tape = Tape::inference();
        let r = reps(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        let loss = cosine_reg_loss(&tape, &r).unwrap();
        assert!(loss.value() < 1e-12);
    }

    #[test]
    fn identical_unit_columns_give_two() {
        // Gram = [[1,1],[1,1]]; residual off-diagonals are 1 -> loss 2
        let tape = Tape::inference();
        let r = reps(vec![vec![1.0, 0.0], vec![1.0, 0.0]], 2);
        let loss = cosine_reg_loss(&tape, &r).unwrap();
        assert!((loss.value() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn single_column_is_always_zero() {
        let tape = Tape::inference();
        let r = reps(vec![vec![3.0, 4.0, 0.0]], 3);
        let loss = cosine_reg_loss(&tape, &r).unwrap();
        assert!(loss.value() < 1e-12);
    }

    #[test]
    fn zero_norm_column_is_damped_not_nan() {
        let tape = Tape::inference();
        let r = reps(vec![vec![0.0, 0.0], vec![1.0, 0.0]], 2);
        let loss = cosine_reg_loss(&tape, &r).unwrap();
        assert!(loss.value().is_finite());
    }

    #[test]
    fn differentiable() {
        use crate::numkit::gradcheck;
        let x = Tensor::from_vec(&[2, 3], vec![0.8, -0.4, 0.3, 0.2, 0.9, -0.6]).unwrap();
        let rep = gradcheck(
            |tape, x| {
                let c0 = tape.select_rows(x, &[0])?;
                let c1 = tape.select_rows(x, &[1])?;
                cosine_reg_loss(tape, &ExpertRepresentations { cols: vec![c0, c1] })
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "rel err {}", rep.max_rel_err);
    }
}
