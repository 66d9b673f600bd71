//! Property tests over the orthogonalization pipeline, gradient surgery,
//! advantage estimation, and replay sampling.

use moore::envs::Action;
use moore::mixture::{
    gram_schmidt, span_residual, stiefel_residual, ExpertRepresentations, GsMode,
};
use moore::numkit::{Tape, Tensor};
use moore::rl::{
    compute_gae, project_pair, ReplayBuffer, RolloutBatch, RolloutStep, Transition,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reps_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..=8, 0usize..2).prop_flat_map(|(k, d_choice)| {
        let d = if d_choice == 0 { 8 } else { 64 };
        (
            Just(d),
            Just(k),
            proptest::collection::vec(-5.0f64..5.0, d * k),
        )
    })
}

fn build_reps(d: usize, k: usize, data: &[f64]) -> ExpertRepresentations {
    let cols = (0..k)
        .map(|j| Tensor::from_vec(&[1, d], data[j * d..(j + 1) * d].to_vec()).unwrap())
        .collect();
    ExpertRepresentations { cols }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_schmidt_yields_stiefel_members((d, k, data) in reps_strategy()) {
        let reps = build_reps(d, k, &data);
        let tape = Tape::inference();
        // training mode tolerates near-degenerate draws; random data is fine
        let basis = gram_schmidt(&tape, &reps, 1e-8, GsMode::Training, None).unwrap();
        prop_assert!(stiefel_residual(&basis) < 1e-9);
    }

    #[test]
    fn gram_schmidt_preserves_the_column_space((d, k, data) in reps_strategy()) {
        let reps = build_reps(d, k, &data);
        let tape = Tape::inference();
        if let Ok(basis) = gram_schmidt(&tape, &reps, 1e-8, GsMode::Strict, None) {
            prop_assert!(span_residual(&reps, &basis) < 1e-9);
        }
    }

    #[test]
    fn first_column_is_normalized_first_input((d, k, data) in reps_strategy()) {
        let reps = build_reps(d, k, &data);
        let tape = Tape::inference();
        if let Ok(basis) = gram_schmidt(&tape, &reps, 1e-8, GsMode::Strict, None) {
            let u1 = reps.cols[0].to_vec();
            let norm: f64 = u1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v1 = basis.cols[0].to_vec();
            for (a, b) in u1.iter().zip(&v1) {
                prop_assert!((a / norm - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn surgery_never_flips_nonconflicting_pairs(
        g1 in proptest::collection::vec(-3.0f64..3.0, 6),
        g2 in proptest::collection::vec(-3.0f64..3.0, 6),
    ) {
        let dot: f64 = g1.iter().zip(&g2).map(|(a, b)| a * b).sum();
        let out = project_pair(&g1, &g2);
        if dot >= 0.0 {
            prop_assert_eq!(out, g1);
        } else {
            let after: f64 = out.iter().zip(&g2).map(|(a, b)| a * b).sum();
            prop_assert!(after.abs() < 1e-10);
        }
    }

    #[test]
    fn gae_interpolates_between_td_and_mc(
        rewards in proptest::collection::vec(-1.0f64..1.0, 1..10),
        lambda in 0.0f64..=1.0,
    ) {
        // advantages are finite and bounded by the MC/TD envelope scale
        let len = rewards.len();
        let steps: Vec<RolloutStep> = rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| RolloutStep {
                obs: vec![0.0],
                action: Action::Discrete(0),
                ctx: 0,
                reward: r,
                absorbing: t == len - 1,
                last: t == len - 1,
                logp: 0.0,
                value: 0.0,
                next_value: 0.0,
            })
            .collect();
        let rollout = RolloutBatch { per_task: vec![steps] };
        let g = compute_gae(&rollout, 0.99, lambda).unwrap();
        for a in &g.advantages[0] {
            prop_assert!(a.is_finite());
            prop_assert!(a.abs() <= len as f64 + 1e-9);
        }
    }

    #[test]
    fn replay_equal_sampling_counts(
        n_tasks in 2usize..5,
        batch in 1usize..200,
        seed in 0u64..1000,
    ) {
        let mut buf = ReplayBuffer::new(n_tasks, 64);
        for task in 0..n_tasks {
            for _ in 0..64 {
                buf.push(Transition {
                    task,
                    obs: vec![0.0],
                    action: Action::Continuous(vec![0.0]),
                    reward: 0.0,
                    next_obs: vec![0.0],
                    absorbing: false,
                    last: false,
                }).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = buf.sample_equal(batch, &mut rng);
        prop_assert_eq!(sample.len(), batch);
        let mut counts = vec![0usize; n_tasks];
        for t in &sample {
            counts[t.task] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        prop_assert!(max - min <= 1);
    }

    #[test]
    fn tensor_add_commutes_and_mul_distributes(
        a in proptest::collection::vec(-10.0f64..10.0, 6),
        b in proptest::collection::vec(-10.0f64..10.0, 6),
    ) {
        let tape = Tape::inference();
        let ta = Tensor::from_vec(&[6], a).unwrap();
        let tb = Tensor::from_vec(&[6], b).unwrap();
        let ab = tape.add(&ta, &tb).unwrap();
        let ba = tape.add(&tb, &ta).unwrap();
        prop_assert_eq!(ab.to_vec(), ba.to_vec());
        let prod = tape.mul(&ta, &tb).unwrap();
        let prod2 = tape.mul(&tb, &ta).unwrap();
        prop_assert_eq!(prod.to_vec(), prod2.to_vec());
    }
}
