//! Principal component analysis of the task encoder's weights: each task's
//! mixing vector w_c becomes a 2-D coordinate in the top-2 eigenspace of
//! the centered covariance.

use super::checkpoint::Checkpoint;
use super::ExpError;

/// Cyclic-Jacobi eigensolver for small symmetric matrices. Returns
/// (eigenvalues, eigenvectors as columns), sorted by descending eigenvalue.
pub fn symmetric_eigen(mat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            eigvecs[r * n + col] = v[r * n + i];
        }
    }
    (eigvals, eigvecs)
}

/// 2-D coordinates per task from a tasks-by-k weight matrix. Component
/// signs are fixed by making each component's largest-magnitude entry
/// positive, so the output is deterministic.
pub fn pca_coordinates(weights: &[f64], n_tasks: usize, k: usize) -> Result<Vec<(f64, f64)>, ExpError> {
    if k < 2 {
        return Err(ExpError::Config(format!(
            "pca needs at least two mixing dimensions, got k={k}"
        )));
    }
    // center columns
    let mut centered = weights.to_vec();
    for c in 0..k {
        let mean: f64 = (0..n_tasks).map(|r| weights[r * k + c]).sum::<f64>() / n_tasks as f64;
        for r in 0..n_tasks {
            centered[r * k + c] -= mean;
        }
    }
    // covariance (k x k)
    let denom = (n_tasks.max(2) - 1) as f64;
    let mut cov = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for r in 0..n_tasks {
                s += centered[r * k + i] * centered[r * k + j];
            }
            cov[i * k + j] = s / denom;
        }
    }
    let (_vals, vecs) = symmetric_eigen(&cov, k);
    let comp = |col: usize| -> Vec<f64> {
        let mut c: Vec<f64> = (0..k).map(|r| vecs[r * k + col]).collect();
        // sign convention: largest-magnitude entry positive
        let mut best = 0usize;
        for (i, x) in c.iter().enumerate() {
            if x.abs() > c[best].abs() {
                best = i;
            }
        }
        if c[best] < 0.0 {
            for x in c.iter_mut() {
                *x = -*x;
            }
        }
        c
    };
    let c1 = comp(0);
    let c2 = comp(1);
    Ok((0..n_tasks)
        .map(|r| {
            let row = &centered[r * k..(r + 1) * k];
            let x: f64 = row.iter().zip(&c1).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(&c2).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect())
}

/// Extracts the actor's task-encoder weights from a checkpoint and maps
/// every task to its 2-D coordinate.
pub fn pca_task_weights(ck: &Checkpoint) -> Result<Vec<(String, f64, f64)>, ExpError> {
    let Some((shape, data)) = ck.tensor("actor.task_encoder.w") else {
        return Err(ExpError::Checkpoint(
            "checkpoint has no actor task encoder".into(),
        ));
    };
    let (n_tasks, k) = (shape[0], shape[1]);
    let coords = pca_coordinates(data, n_tasks, k)?;
    let cfg = super::config::ExperimentConfig::from_json(&ck.config_json)?;
    let suite = crate::envs::ScMdpSuite::make(&cfg.suite, 0)?;
    let names = suite.task_names();
    Ok(coords
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let name = names.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("task{i}"));
            (name, x, y)
        })
        .collect())
}
