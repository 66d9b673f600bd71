//! Central finite-difference checking of tape gradients.

use super::tape::Tape;
use super::tensor::Tensor;
use super::Error;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Compares the tape gradient of a scalar function against central
/// differences (f(x+h e_i) - f(x-h e_i)) / 2h over every coordinate of `x`.
///
/// `f` must be deterministic; two forward evaluations are required to agree
/// bitwise before any differencing happens. The relative error uses a small
/// floor in the denominator so near-zero coordinates are judged absolutely.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, Error>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor, Error>,
{
    if step <= 0.0 {
        return Err(Error::Contract("gradcheck step must be positive".into()));
    }
    let base = Tensor::param(x.shape(), x.to_vec())?;

    let eval = |values: &[f64]| -> Result<f64, Error> {
        let probe = Tensor::from_vec(base.shape(), values.to_vec())?;
        let tape = Tape::inference();
        let out = f(&tape, &probe)?;
        if !out.is_scalar() {
            return Err(Error::NonScalarLoss(out.shape().to_vec()));
        }
        Ok(out.value())
    };

    let v0 = eval(&base.to_vec())?;
    let v1 = eval(&base.to_vec())?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::NonDeterministic);
    }

    // Tape gradient at the base point.
    let tape = Tape::new();
    let out = f(&tape, &base)?;
    if !out.is_scalar() {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    tape.backward(&out)?;
    let analytic = base.grad().unwrap_or_else(|| vec![0.0; base.numel()]);

    let mut values = base.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + step;
        let fp = eval(&values)?;
        values[i] = orig - step;
        let fm = eval(&values)?;
        values[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
        let rel = (analytic[i] - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_coord: worst,
        coords: values.len(),
        tol,
        pass: max_rel < tol,
    })
}

/// Checks the tape gradient against central differences for every
/// coordinate of every listed leaf tensor. `f` must read the leaves'
/// current values, so in-place perturbations reach the computation.
pub fn gradcheck_many<F>(
    f: F,
    leaves: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, Error>
where
    F: Fn(&Tape) -> Result<Tensor, Error>,
{
    if step <= 0.0 {
        return Err(Error::Contract("gradcheck step must be positive".into()));
    }
    let eval = || -> Result<f64, Error> {
        let tape = Tape::inference();
        let out = f(&tape)?;
        if !out.is_scalar() {
            return Err(Error::NonScalarLoss(out.shape().to_vec()));
        }
        Ok(out.value())
    };
    let v0 = eval()?;
    let v1 = eval()?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::NonDeterministic);
    }

    for leaf in leaves {
        leaf.zero_grad();
        leaf.set_requires_grad(true);
    }
    let tape = Tape::new();
    let out = f(&tape)?;
    if !out.is_scalar() {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    tape.backward(&out)?;

    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut coords = 0usize;
    for leaf in leaves {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        for i in 0..n {
            let orig = {
                let d = leaf.data();
                d[i]
            };
            leaf.update_data(|d| d[i] = orig + step);
            let fp = eval()?;
            leaf.update_data(|d| d[i] = orig - step);
            let fm = eval()?;
            leaf.update_data(|d| d[i] = orig);
            let fd = (fp - fm) / (2.0 * step);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
            let rel = (analytic[i] - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = coords + i;
            }
        }
        coords += n;
        leaf.zero_grad();
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_coord: worst,
        coords,
        tol,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::from_vec(&[3], vec![0.4, -1.2, 2.0]).unwrap();
        let rep = gradcheck(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(&sq)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn matmul_tanh_composition_passes() {
        let x = Tensor::from_vec(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![0.5, -0.4, 0.9, 0.1]).unwrap();
        let rep = gradcheck(
            move |tape, x| {
                let y = tape.matmul(x, &w)?;
                let t = tape.tanh(&y)?;
                tape.sum(&t)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn constant_function_passes_with_zero_grads() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let rep = gradcheck(|_, _| Ok(Tensor::scalar(7.0)), &x, 1e-5, 1e-6).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let err = gradcheck(
            move |_, _| {
                calls.set(calls.get() + 1.0);
                Ok(Tensor::scalar(calls.get()))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic));
    }
}
