//! Invariant suite shared by the `verify` subcommand and the acceptance
//! tests: orthonormality, span preservation, fixed points, permutation
//! span invariance, gradient-surgery guarantees, and advantage-estimation
//! closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::Action;
use crate::mixture::{
    gram_schmidt, mutual_span_residual, span_residual, stiefel_residual, ExpertRepresentations,
    GsMode,
};
use crate::numkit::{Tape, Tensor};
use crate::rl::{compute_gae, pcgrad_project, project_pair, RolloutBatch, RolloutStep};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }
}

fn random_reps(rng: &mut ChaCha8Rng, d: usize, k: usize) -> ExpertRepresentations {
    let cols = (0..k)
        .map(|_| {
            let data: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::from_vec(&[1, d], data).unwrap()
        })
        .collect();
    ExpertRepresentations { cols }
}

/// 1,000 random matrices over d in {8, 64}, k in 2..=8: orthonormality and
/// span preservation both under 1e-10.
pub fn check_stiefel(n_matrices: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::inference();
    let mut worst_orth = 0.0f64;
    let mut worst_span = 0.0f64;
    for i in 0..n_matrices {
        let d = if i % 2 == 0 { 8 } else { 64 };
        let k = 2 + (i % 7);
        let reps = random_reps(&mut rng, d, k);
        let basis = match gram_schmidt(&tape, &reps, 1e-8, GsMode::Strict, None) {
            Ok(b) => b,
            Err(e) => {
                return CheckOutcome::new("stiefel", false, format!("degenerate input: {e}"))
            }
        };
        worst_orth = worst_orth.max(stiefel_residual(&basis));
        worst_span = worst_span.max(span_residual(&reps, &basis));
    }
    CheckOutcome::new(
        "stiefel",
        worst_orth < 1e-10 && worst_span < 1e-10,
        format!("max |V^T V - I| = {worst_orth:.2e}, max span residual = {worst_span:.2e}"),
    )
}

/// Orthonormal inputs that are exactly representable come back bitwise;
/// float-valued orthonormal inputs come back to 1e-14.
pub fn check_fixed_point(seed: u64) -> CheckOutcome {
    let tape = Tape::inference();
    // exactly representable orthonormal columns: signed permutations
    let exact = ExpertRepresentations {
        cols: vec![
            Tensor::from_vec(&[1, 4], vec![0.0, 0.0, -1.0, 0.0]).unwrap(),
            Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            Tensor::from_vec(&[1, 4], vec![0.0, -1.0, 0.0, 0.0]).unwrap(),
        ],
    };
    let out = gram_schmidt(&tape, &exact, 1e-8, GsMode::Strict, None).unwrap();
    for (u, v) in exact.cols.iter().zip(&out.cols) {
        let same = u
            .to_vec()
            .iter()
            .zip(v.to_vec().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return CheckOutcome::new(
                "gs_fixed_point",
                false,
                "exactly orthonormal input was not a bitwise fixed point".into(),
            );
        }
    }
    // float orthonormal inputs via a first pass of the process itself
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let reps = random_reps(&mut rng, 12, 4);
        let v1 = gram_schmidt(&tape, &reps, 1e-8, GsMode::Strict, None).unwrap();
        let again = ExpertRepresentations {
            cols: v1.cols.clone(),
        };
        let v2 = gram_schmidt(&tape, &again, 1e-8, GsMode::Strict, None).unwrap();
        for (a, b) in v1.cols.iter().zip(&v2.cols) {
            for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    CheckOutcome::new(
        "gs_fixed_point",
        worst < 1e-13,
        format!("bitwise on exact inputs; idempotence drift {worst:.2e} on float inputs"),
    )
}

/// Column permutations change the basis but not its span.
pub fn check_permutation_span(n_cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::inference();
    let mut worst = 0.0f64;
    let mut saw_reorder = false;
    for i in 0..n_cases {
        let d = if i % 2 == 0 { 8 } else { 16 };
        let k = 2 + (i % 5);
        let reps = random_reps(&mut rng, d, k);
        let mut perm: Vec<usize> = (0..k).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let permuted = ExpertRepresentations {
            cols: perm.iter().map(|&j| reps.cols[j].clone()).collect(),
        };
        let v1 = gram_schmidt(&tape, &reps, 1e-8, GsMode::Strict, None).unwrap();
        let v2 = gram_schmidt(&tape, &permuted, 1e-8, GsMode::Strict, None).unwrap();
        worst = worst.max(mutual_span_residual(&v1, &v2));
        if perm != (0..k).collect::<Vec<_>>() {
            let differs = v1
                .cols
                .iter()
                .zip(&v2.cols)
                .any(|(a, b)| a.to_vec() != b.to_vec());
            saw_reorder |= differs;
        }
    }
    CheckOutcome::new(
        "gs_permutation_span",
        worst < 1e-10 && saw_reorder,
        format!("max mutual span residual {worst:.2e}; bases differ under permutation: {saw_reorder}"),
    )
}

/// The worked surgery example plus the randomized guarantee over many pairs.
pub fn check_pcgrad(n_pairs: usize, seed: u64) -> CheckOutcome {
    let g1p = project_pair(&[1.0, 0.0], &[-1.0, 1.0]);
    let dot0: f64 = g1p.iter().zip(&[-1.0, 1.0]).map(|(a, b)| a * b).sum();
    if (g1p[0] - 0.5).abs() > 1e-12 || (g1p[1] - 0.5).abs() > 1e-12 || dot0.abs() > 1e-12 {
        return CheckOutcome::new(
            "pcgrad",
            false,
            format!("worked example failed: {g1p:?}, dot {dot0:.2e}"),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_pairs {
        let dim = rng.random_range(2..20);
        let g1: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot: f64 = g1.iter().zip(&g2).map(|(a, b)| a * b).sum();
        let out = project_pair(&g1, &g2);
        if dot < 0.0 {
            let after: f64 = out.iter().zip(&g2).map(|(a, b)| a * b).sum();
            worst = worst.max(after.abs());
        } else if out != g1 {
            return CheckOutcome::new(
                "pcgrad",
                false,
                "non-conflicting gradient was modified".into(),
            );
        }
    }
    // combined output exists and is deterministic under one seed
    let mut r1 = ChaCha8Rng::seed_from_u64(seed);
    let mut r2 = ChaCha8Rng::seed_from_u64(seed);
    let grads = vec![vec![1.0, 0.0], vec![-1.0, 1.0]];
    let a = pcgrad_project(&grads, &mut r1).unwrap();
    let b = pcgrad_project(&grads, &mut r2).unwrap();
    CheckOutcome::new(
        "pcgrad",
        worst < 1e-10 && a == b,
        format!("worked example ok; max post-surgery conflicting dot {worst:.2e}"),
    )
}

/// GAE at lambda = 1 equals the discounted Monte-Carlo advantage; at
/// lambda = 0 it equals the one-step TD error.
pub fn check_gae_closed_forms(n_episodes: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = 0.99;
    let mut worst = 0.0f64;
    for case in 0..n_episodes {
        let len = rng.random_range(1..15);
        let truncated = case % 2 == 1;
        let values: Vec<f64> = (0..=len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let steps: Vec<RolloutStep> = (0..len)
            .map(|t| {
                let last = t == len - 1;
                RolloutStep {
                    obs: vec![0.0],
                    action: Action::Discrete(0),
                    ctx: 0,
                    reward: rng.random_range(-1.0..1.0),
                    absorbing: last && !truncated,
                    last,
                    logp: 0.0,
                    value: values[t],
                    next_value: values[t + 1],
                }
            })
            .collect();
        let rollout = RolloutBatch {
            per_task: vec![steps.clone()],
        };
        let mc = compute_gae(&rollout, gamma, 1.0).unwrap();
        let td = compute_gae(&rollout, gamma, 0.0).unwrap();
        for t in 0..len {
            let mut ret = 0.0;
            for (l, s) in steps[t..].iter().enumerate() {
                ret += gamma.powi(l as i32) * s.reward;
            }
            if truncated {
                ret += gamma.powi((len - t) as i32) * values[len];
            }
            worst = worst.max((mc.advantages[0][t] - (ret - values[t])).abs());
            let boot = if steps[t].absorbing {
                0.0
            } else {
                steps[t].next_value
            };
            let delta = steps[t].reward + gamma * boot - values[t];
            worst = worst.max((td.advantages[0][t] - delta).abs());
        }
    }
    CheckOutcome::new(
        "gae_closed_forms",
        worst < 1e-12,
        format!("max deviation from closed forms {worst:.2e}"),
    )
}

/// Finite-difference check through the entire actor pipeline: conv experts,
/// orthonormalization, task weighting, combination, and the policy head,
/// collapsed to the log-probability of one action. The gradient is checked
/// against every parameter tensor and against the input.
pub fn actor_gradcheck(
    k: usize,
    channels: &[usize],
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<crate::numkit::GradCheckReport, crate::numkit::Error> {
    use crate::mixture::{
        CombineActivation, ExpertStack, HeadMode, MixtureNet, OutputHead, PolicyOutput,
        Representation, TaskEncoder,
    };
    use crate::numkit::gradcheck_many;
    use std::cell::Cell;
    use std::rc::Rc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ctx = 3;
    let stack = ExpertStack::conv(k, (3, 7, 7), channels, 2, 1, &mut rng)?;
    let d = stack.d;
    let net = MixtureNet {
        stack,
        task_encoder: TaskEncoder::init(n_ctx, k, &mut rng),
        head: OutputHead::init(HeadMode::Multi, n_ctx, d, &[16], 7, &mut rng),
        representation: Representation::Moore,
        combine: CombineActivation::Tanh,
        gs_eps: 1e-8,
        gs_mode: GsMode::Training,
        permutation: None,
        degeneracies: Rc::new(Cell::new(0)),
    };
    let actor = crate::mixture::Actor {
        net,
        gaussian_dim: None,
    };
    let obs_data: Vec<f64> = (0..3 * 7 * 7)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let obs = Tensor::from_vec(&[1, 3, 7, 7], obs_data)?;

    // check against the input and every parameter tensor in one pass
    let mut leaves = vec![obs.clone()];
    let mut params = Vec::new();
    actor.net.named_params("actor", &mut params);
    leaves.extend(params.into_iter().map(|(_, p)| p));

    // the scalar under test: log pi(a_0 | s, c=1)
    gradcheck_many(
        |tape| {
            let out = actor
                .forward(tape, &obs, &[1])
                .map_err(|e| crate::numkit::Error::Contract(e.to_string()))?;
            let PolicyOutput::Categorical { logits } = out else {
                unreachable!()
            };
            let ls = tape.log_softmax(&logits)?;
            tape.take_per_row(&ls, &[0])
        },
        &leaves,
        step,
        tol,
    )
}

/// The full invariant suite in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_stiefel(1000, seed),
        check_fixed_point(seed.wrapping_add(1)),
        check_permutation_span(100, seed.wrapping_add(2)),
        check_pcgrad(10_000, seed.wrapping_add(3)),
        check_gae_closed_forms(100, seed.wrapping_add(4)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_invariant_suite_passes() {
        for outcome in run_all(0) {
            assert!(outcome.pass, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
