//! The representation pipeline: k experts encode the input, the columns are
//! (optionally) orthonormalized, the task encoder's weights interpolate them
//! into a per-task representation, and an output head maps that to action
//! logits, Gaussian parameters, or values.

use std::cell::Cell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::numkit::{Error, Tape, Tensor};

use super::encoder::{ConvNet, DenseNet, Encoder};
use super::gram_schmidt::{
    gram_schmidt, ExpertRepresentations, GsError, GsMode, OrthonormalBasis,
};
use super::heads::{HeadMode, OutputHead, TaskEncoder};

/// How expert columns are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Gram-Schmidt orthonormalization before combination.
    Moore,
    /// Raw expert columns, no diversity constraint.
    Moe,
    /// Raw columns plus a cosine-similarity regularizer on the Gram matrix
    /// (the regularizer itself lives in the trainer).
    CosineSim,
}

impl Representation {
    pub fn uses_gram_schmidt(self) -> bool {
        matches!(self, Representation::Moore)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineActivation {
    Tanh,
    Linear,
}

/// k encoders with identical architecture producing d-dimensional columns.
#[derive(Clone)]
pub struct ExpertStack {
    pub experts: Vec<Encoder>,
    pub d: usize,
}

impl ExpertStack {
    pub fn conv(
        k: usize,
        input: (usize, usize, usize),
        channels: &[usize],
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Error> {
        let experts: Vec<Encoder> = (0..k)
            .map(|_| Encoder::Conv(ConvNet::init(input, channels, kernel, stride, rng)))
            .collect();
        Self::validate(experts)
    }

    pub fn dense(k: usize, dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self, Error> {
        let experts: Vec<Encoder> = (0..k)
            .map(|_| Encoder::Dense(DenseNet::init(dims, rng)))
            .collect();
        Self::validate(experts)
    }

    fn validate(experts: Vec<Encoder>) -> Result<Self, Error> {
        let d = experts[0].out_dim();
        let k = experts.len();
        if k > d {
            return Err(Error::Contract(format!(
                "expert count k={k} exceeds representation dim d={d}"
            )));
        }
        Ok(Self { experts, d })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    /// Runs every expert on the same batch; column i sees gradients only
    /// through expert i's parameters.
    pub fn forward(&self, tape: &Tape, input: &Tensor) -> Result<ExpertRepresentations, Error> {
        let cols = self
            .experts
            .iter()
            .map(|e| e.forward(tape, input))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExpertRepresentations { cols })
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, e) in self.experts.iter().enumerate() {
            e.named_params(&format!("{prefix}.expert{i}"), out);
        }
    }
}

/// Everything between raw observations and head outputs.
pub struct MixtureNet {
    pub stack: ExpertStack,
    pub task_encoder: TaskEncoder,
    pub head: OutputHead,
    pub representation: Representation,
    pub combine: CombineActivation,
    pub gs_eps: f64,
    pub gs_mode: GsMode,
    /// Optional expert-order permutation applied before orthogonalization.
    pub permutation: Option<Vec<usize>>,
    /// Counts damped near-degenerate columns across the net's lifetime.
    pub degeneracies: Rc<Cell<u64>>,
}

/// Intermediate products of one forward pass, for diagnostics and the
/// cosine-similarity regularizer.
pub struct ForwardTrace {
    pub reps: ExpertRepresentations,
    pub basis: Option<OrthonormalBasis>,
    pub combined: Tensor,
    pub output: Tensor,
}

impl MixtureNet {
    pub fn forward(&self, tape: &Tape, input: &Tensor, ids: &[usize]) -> Result<Tensor, GsError> {
        Ok(self.forward_traced(tape, input, ids)?.output)
    }

    pub fn forward_traced(
        &self,
        tape: &Tape,
        input: &Tensor,
        ids: &[usize],
    ) -> Result<ForwardTrace, GsError> {
        let mut reps = self.stack.forward(tape, input)?;
        if let Some(perm) = &self.permutation {
            debug_assert_eq!(perm.len(), reps.k());
            reps = ExpertRepresentations {
                cols: perm.iter().map(|&i| reps.cols[i].clone()).collect(),
            };
        }
        let (basis, mix_cols) = if self.representation.uses_gram_schmidt() {
            let basis = gram_schmidt(
                tape,
                &reps,
                self.gs_eps,
                self.gs_mode,
                Some(&self.degeneracies),
            )?;
            let cols = basis.cols.clone();
            (Some(basis), cols)
        } else {
            (None, reps.cols.clone())
        };

        let weights = self.task_encoder.forward(tape, ids)?; // [B, k]
        let combined = combine(tape, &mix_cols, &weights, self.combine)?;
        let output = self.head.forward(tape, &combined, ids)?;
        Ok(ForwardTrace {
            reps,
            basis,
            combined,
            output,
        })
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stack.named_params(&format!("{prefix}.experts"), out);
        self.task_encoder
            .named_params(&format!("{prefix}.task_encoder"), out);
        self.head.named_params(&format!("{prefix}.head"), out);
    }

    /// Parameters shared across tasks: experts, task encoder, and (for a
    /// single head) the shared output function. Per-task heads are excluded.
    pub fn shared_params(&self) -> Vec<Tensor> {
        let mut named = Vec::new();
        self.stack.named_params("experts", &mut named);
        self.task_encoder.named_params("task_encoder", &mut named);
        if matches!(self.head.mode, HeadMode::Single) {
            self.head.named_params("head", &mut named);
        }
        named.into_iter().map(|(_, t)| t).collect()
    }

    /// Expert parameters only (the transferable, freezable stack).
    pub fn expert_params(&self) -> Vec<Tensor> {
        let mut named = Vec::new();
        self.stack.named_params("experts", &mut named);
        named.into_iter().map(|(_, t)| t).collect()
    }

    pub fn all_params(&self) -> Vec<Tensor> {
        let mut named = Vec::new();
        self.named_params("net", &mut named);
        named.into_iter().map(|(_, t)| t).collect()
    }
}

/// Interpolates basis columns with per-sample weights: act(V w), where
/// column j of each sample's matrix is `cols[j]` and w comes row-wise from
/// `weights` [B, k].
pub fn combine(
    tape: &Tape,
    cols: &[Tensor],
    weights: &Tensor,
    activation: CombineActivation,
) -> Result<Tensor, Error> {
    if weights.shape()[1] != cols.len() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            lhs: weights.shape().to_vec(),
            rhs: vec![cols.len()],
        });
    }
    let mut combined: Option<Tensor> = None;
    for (j, col) in cols.iter().enumerate() {
        let wj = tape.select_col(weights, j)?;
        let scaled = tape.row_scale(col, &wj)?;
        combined = Some(match combined {
            Some(acc) => tape.add(&acc, &scaled)?,
            None => scaled,
        });
    }
    let mut combined = combined.expect("at least one column");
    if matches!(activation, CombineActivation::Tanh) {
        combined = tape.tanh(&combined)?;
    }
    Ok(combined)
}

/// Distribution parameters emitted by an actor.
pub enum PolicyOutput {
    /// Discrete actions: unnormalized log-probabilities [B, n_actions].
    Categorical { logits: Tensor },
    /// Continuous actions squashed by tanh: mean and clamped log-std,
    /// each [B, action_dim].
    Gaussian { mean: Tensor, log_std: Tensor },
}

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub struct Actor {
    pub net: MixtureNet,
    /// None for categorical; Some(action_dim) for Gaussian heads whose net
    /// output is [mean | log_std].
    pub gaussian_dim: Option<usize>,
}

impl Actor {
    pub fn forward(
        &self,
        tape: &Tape,
        obs: &Tensor,
        ids: &[usize],
    ) -> Result<PolicyOutput, GsError> {
        let out = self.net.forward(tape, obs, ids)?;
        match self.gaussian_dim {
            None => Ok(PolicyOutput::Categorical { logits: out }),
            Some(da) => {
                let batch = out.shape()[0];
                debug_assert_eq!(out.shape()[1], 2 * da);
                // row r of [B, 2da] is [mean | log_std]; viewed as [2B, da]
                // the halves land on even/odd rows
                let reshaped = tape.reshape(&out, &[batch * 2, da])?;
                let mean_rows: Vec<usize> = (0..batch).map(|r| 2 * r).collect();
                let std_rows: Vec<usize> = (0..batch).map(|r| 2 * r + 1).collect();
                let mean = tape.select_rows(&reshaped, &mean_rows)?;
                let log_std_raw = tape.select_rows(&reshaped, &std_rows)?;
                let log_std = tape.clamp(&log_std_raw, LOG_STD_MIN, LOG_STD_MAX)?;
                Ok(PolicyOutput::Gaussian { mean, log_std })
            }
        }
    }
}

pub struct Critic {
    pub net: MixtureNet,
    /// Q-function critics consume state-action pairs; state-value critics
    /// reject an action argument.
    pub q_function: bool,
}

impl Critic {
    /// Scalar V(s,c) or Q(s,a,c) per batch row -> [B].
    pub fn forward(
        &self,
        tape: &Tape,
        obs: &Tensor,
        ids: &[usize],
        action: Option<&Tensor>,
    ) -> Result<Tensor, GsError> {
        let input = match (self.q_function, action) {
            (true, Some(a)) => tape.concat_cols(obs, a)?,
            (false, None) => obs.clone(),
            (true, None) => {
                return Err(GsError::Num(Error::Contract(
                    "q-function critic requires an action batch".into(),
                )))
            }
            (false, Some(_)) => {
                return Err(GsError::Num(Error::Contract(
                    "state-value critic does not take actions".into(),
                )))
            }
        };
        let out = self.net.forward(tape, &input, ids)?;
        let batch = out.shape()[0];
        Ok(tape.reshape(&out, &[batch])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::gram_schmidt::stiefel_residual;
    use rand::SeedableRng;

    fn micro_net(
        k: usize,
        n_ctx: usize,
        head_mode: HeadMode,
        representation: Representation,
        rng: &mut ChaCha8Rng,
    ) -> MixtureNet {
        let stack = ExpertStack::dense(k, &[4, 6, 5], rng).unwrap();
        let task_encoder = TaskEncoder::init(n_ctx, k, rng);
        let head = OutputHead::init(head_mode, n_ctx, 5, &[8], 3, rng);
        MixtureNet {
            stack,
            task_encoder,
            head,
            representation,
            combine: CombineActivation::Tanh,
            gs_eps: 1e-8,
            gs_mode: GsMode::Training,
            permutation: None,
            degeneracies: Rc::new(Cell::new(0)),
        }
    }

    #[test]
    fn combine_identity_basis_linear() {
        // V = I2, w = (2,3), linear -> (2,3)
        let tape = Tape::inference();
        let cols = vec![
            Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap(),
            Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap(),
        ];
        let w = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let v = combine(&tape, &cols, &w, CombineActivation::Linear).unwrap();
        assert_eq!(v.to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn combine_zero_weights_tanh_is_zero() {
        let tape = Tape::inference();
        let cols = vec![Tensor::from_vec(&[1, 3], vec![0.5, -0.2, 0.8]).unwrap()];
        let w = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let v = combine(&tape, &cols, &w, CombineActivation::Tanh).unwrap();
        assert_eq!(v.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn combine_worked_basis_example() {
        // basis from u1=(3,4), u2=(1,0); w = (1,1), linear -> (1.4, 0.2)
        let tape = Tape::inference();
        let cols = vec![
            Tensor::from_vec(&[1, 2], vec![0.6, 0.8]).unwrap(),
            Tensor::from_vec(&[1, 2], vec![0.8, -0.6]).unwrap(),
        ];
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let v = combine(&tape, &cols, &w, CombineActivation::Linear).unwrap();
        assert!((v.to_vec()[0] - 1.4).abs() < 1e-12);
        assert!((v.to_vec()[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn combine_rejects_length_mismatch() {
        let tape = Tape::inference();
        let cols = vec![Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()];
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert!(combine(&tape, &cols, &w, CombineActivation::Linear).is_err());
    }

    #[test]
    fn single_expert_is_plain_encoder_plus_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = micro_net(1, 2, HeadMode::Multi, Representation::Moore, &mut rng);
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.2, 0.0, 0.9]).unwrap();
        let trace = net.forward_traced(&tape, &obs, &[0, 1]).unwrap();
        // k=1: combined = tanh(w_c * u1/|u1|)
        let u = trace.reps.cols[0].to_vec();
        let w = net.task_encoder.weight.to_vec();
        let combined = trace.combined.to_vec();
        for s in 0..2 {
            let row = &u[s * 5..(s + 1) * 5];
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let wc = w[[0usize, 1][s]];
            for r in 0..5 {
                let expect = (row[r] / norm * wc).tanh();
                assert!((combined[s * 5 + r] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_experts_produce_identical_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shared = DenseNet::init(&[4, 5], &mut rng);
        let stack = ExpertStack {
            experts: vec![Encoder::Dense(shared.clone()), Encoder::Dense(shared)],
            d: 5,
        };
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[1, 4], vec![0.4, -0.2, 0.7, 0.1]).unwrap();
        let reps = stack.forward(&tape, &obs).unwrap();
        assert_eq!(reps.cols[0].to_vec(), reps.cols[1].to_vec());
    }

    #[test]
    fn columns_match_standalone_expert_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = ExpertStack::dense(3, &[4, 6, 5], &mut rng).unwrap();
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[2, 4], vec![0.3; 8]).unwrap();
        let reps = stack.forward(&tape, &obs).unwrap();
        for (i, e) in stack.experts.iter().enumerate() {
            let alone = e.forward(&tape, &obs).unwrap();
            assert_eq!(alone.to_vec(), reps.cols[i].to_vec());
        }
    }

    #[test]
    fn gradient_isolation_across_experts() {
        // Perturbing expert i's params changes only column i (before GS).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = ExpertStack::dense(2, &[3, 4], &mut rng).unwrap();
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[1, 3], vec![0.5, -0.1, 0.2]).unwrap();
        let before = stack.forward(&tape, &obs).unwrap();
        let (b0, b1) = (before.cols[0].to_vec(), before.cols[1].to_vec());
        if let Encoder::Dense(net) = &stack.experts[0] {
            net.layers[0].w.update_data(|d| d[0] += 0.5);
        }
        let after = stack.forward(&tape, &obs).unwrap();
        assert_ne!(after.cols[0].to_vec(), b0);
        assert_eq!(after.cols[1].to_vec(), b1);
    }

    #[test]
    fn different_task_weights_give_different_representations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = micro_net(2, 2, HeadMode::Multi, Representation::Moore, &mut rng);
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[2, 4], vec![0.3, 0.1, -0.2, 0.8, 0.3, 0.1, -0.2, 0.8]).unwrap();
        let trace = net.forward_traced(&tape, &obs, &[0, 1]).unwrap();
        let c = trace.combined.to_vec();
        assert_ne!(c[0..5], c[5..10]);
    }

    #[test]
    fn forward_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = micro_net(2, 3, HeadMode::Multi, Representation::Moore, &mut rng);
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[1, 4], vec![0.2, -0.4, 0.9, 0.05]).unwrap();
        let out = net.forward(&tape, &obs, &[2]).unwrap().to_vec();

        // manual: experts -> GS -> w_c -> tanh(Vw) -> head
        let reps = net.stack.forward(&tape, &obs).unwrap();
        let basis = gram_schmidt(&tape, &reps, 1e-8, GsMode::Strict, None).unwrap();
        let w = net.task_encoder.weight.to_vec();
        let wc = &w[2 * 2..3 * 2];
        let (v0, v1) = (basis.cols[0].to_vec(), basis.cols[1].to_vec());
        let combined: Vec<f64> = (0..5)
            .map(|r| (v0[r] * wc[0] + v1[r] * wc[1]).tanh())
            .collect();
        let manual = net
            .head
            .forward(
                &tape,
                &Tensor::from_vec(&[1, 5], combined).unwrap(),
                &[2],
            )
            .unwrap()
            .to_vec();
        for (a, b) in out.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_skips_orthogonalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = micro_net(2, 2, HeadMode::Multi, Representation::Moe, &mut rng);
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[1, 4], vec![0.2, -0.4, 0.9, 0.05]).unwrap();
        let trace = net.forward_traced(&tape, &obs, &[0]).unwrap();
        assert!(trace.basis.is_none());
    }

    #[test]
    fn moore_basis_is_orthonormal_online() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = micro_net(3, 2, HeadMode::Single, Representation::Moore, &mut rng);
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[4, 4], (0..16).map(|i| 0.1 * i as f64).collect()).unwrap();
        let trace = net.forward_traced(&tape, &obs, &[0, 1, 0, 1]).unwrap();
        assert!(stiefel_residual(trace.basis.as_ref().unwrap()) < 1e-10);
    }

    #[test]
    fn critic_contract_on_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = micro_net(2, 2, HeadMode::Multi, Representation::Moore, &mut rng);
        net.head = OutputHead::init(HeadMode::Multi, 2, 5, &[], 1, &mut rng);
        let critic = Critic {
            net,
            q_function: false,
        };
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[1, 4], vec![0.1; 4]).unwrap();
        let act = Tensor::from_vec(&[1, 2], vec![0.5; 2]).unwrap();
        assert!(critic.forward(&tape, &obs, &[0], Some(&act)).is_err());
        assert!(critic.forward(&tape, &obs, &[0], None).is_ok());
    }

    #[test]
    fn zero_head_weights_give_zero_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = micro_net(2, 2, HeadMode::Multi, Representation::Moore, &mut rng);
        net.head = OutputHead::init(HeadMode::Multi, 2, 5, &[], 1, &mut rng);
        for n in &net.head.nets {
            for l in &n.layers {
                l.w.update_data(|d| d.fill(0.0));
                l.b.update_data(|d| d.fill(0.0));
            }
        }
        let critic = Critic {
            net,
            q_function: false,
        };
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[2, 4], vec![0.7; 8]).unwrap();
        let v = critic.forward(&tape, &obs, &[0, 1], None).unwrap();
        assert_eq!(v.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_head_splits_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let stack = ExpertStack::dense(2, &[4, 6, 5], &mut rng).unwrap();
        let task_encoder = TaskEncoder::init(2, 2, &mut rng);
        let head = OutputHead::init(HeadMode::Multi, 2, 5, &[], 4, &mut rng);
        let net = MixtureNet {
            stack,
            task_encoder,
            head,
            representation: Representation::Moore,
            combine: CombineActivation::Linear,
            gs_eps: 1e-8,
            gs_mode: GsMode::Training,
            permutation: None,
            degeneracies: Rc::new(Cell::new(0)),
        };
        let actor = Actor {
            net,
            gaussian_dim: Some(2),
        };
        let tape = Tape::inference();
        let obs = Tensor::from_vec(&[3, 4], vec![0.25; 12]).unwrap();
        match actor.forward(&tape, &obs, &[0, 1, 0]).unwrap() {
            PolicyOutput::Gaussian { mean, log_std } => {
                assert_eq!(mean.shape(), &[3, 2]);
                assert_eq!(log_std.shape(), &[3, 2]);
                assert!(log_std
                    .to_vec()
                    .iter()
                    .all(|&v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v)));
            }
            _ => panic!("expected gaussian output"),
        }
    }
}
