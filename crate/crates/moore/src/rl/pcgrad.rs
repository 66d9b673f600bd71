//! Gradient surgery: conflicting task gradients are projected onto the
//! orthogonal complement of the gradients they conflict with, then summed.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::RlError;

/// For each task gradient g_i, visits the other tasks in a seeded random
/// order and removes the component along g_j whenever <g_i, g_j> < 0.
/// Non-conflicting pairs pass through unchanged. Returns the sum of the
/// surgered gradients.
pub fn pcgrad_project(grads: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, RlError> {
    if grads.len() < 2 {
        return Err(RlError::Contract(
            "pcgrad needs at least two task gradients".into(),
        ));
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(RlError::Contract(
            "pcgrad task gradients must share one length".into(),
        ));
    }
    let mut combined = vec![0.0; dim];
    let mut order: Vec<usize> = (0..grads.len()).collect();
    for i in 0..grads.len() {
        let mut gi = grads[i].clone();
        order.shuffle(rng);
        for &j in order.iter().filter(|&&j| j != i) {
            let gj = &grads[j];
            let dot: f64 = gi.iter().zip(gj).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                let nrm2: f64 = gj.iter().map(|x| x * x).sum();
                if nrm2 > 0.0 {
                    let coef = dot / nrm2;
                    for (gik, gjk) in gi.iter_mut().zip(gj) {
                        *gik -= coef * gjk;
                    }
                }
            }
        }
        for (c, g) in combined.iter_mut().zip(&gi) {
            *c += g;
        }
    }
    Ok(combined)
}

/// Surgery of a single gradient against another, for tests and the worked
/// example: returns g1 projected away from a conflicting g2.
pub fn project_pair(g1: &[f64], g2: &[f64]) -> Vec<f64> {
    let dot: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    if dot >= 0.0 {
        return g1.to_vec();
    }
    let nrm2: f64 = g2.iter().map(|x| x * x).sum();
    g1.iter()
        .zip(g2)
        .map(|(a, b)| a - dot / nrm2 * b)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn worked_example() {
        // g1=(1,0), g2=(-1,1): conflict; g1' = (0.5, 0.5), <g1',g2> = 0
        let g1p = project_pair(&[1.0, 0.0], &[-1.0, 1.0]);
        assert!((g1p[0] - 0.5).abs() < 1e-15 && (g1p[1] - 0.5).abs() < 1e-15);
        let dot: f64 = g1p.iter().zip(&[-1.0, 1.0]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_inputs_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let combined = pcgrad_project(&[vec![1.0, 0.0], vec![0.0, 2.0]], &mut rng).unwrap();
        assert_eq!(combined, vec![1.0, 2.0]);
    }

    #[test]
    fn identical_gradients_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let combined = pcgrad_project(&[vec![1.0, 1.0], vec![1.0, 1.0]], &mut rng).unwrap();
        assert_eq!(combined, vec![2.0, 2.0]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pcgrad_project(&[vec![1.0], vec![1.0, 2.0]], &mut rng).is_err());
    }

    #[test]
    fn surgery_zeroes_conflicting_dots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let g1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dot: f64 = g1.iter().zip(&g2).map(|(a, b)| a * b).sum();
            let g1p = project_pair(&g1, &g2);
            let dotp: f64 = g1p.iter().zip(&g2).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                assert!(dotp.abs() < 1e-10);
            } else {
                assert_eq!(g1p, g1);
            }
        }
    }

    #[test]
    fn task_order_is_seed_deterministic() {
        let grads: Vec<Vec<f64>> = vec![
            vec![1.0, 0.2, -0.3],
            vec![-0.7, 0.5, 0.1],
            vec![0.2, -0.9, 0.4],
        ];
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = pcgrad_project(&grads, &mut r1).unwrap();
        let b = pcgrad_project(&grads, &mut r2).unwrap();
        assert_eq!(a, b);
    }
}
