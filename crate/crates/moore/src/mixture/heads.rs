//! Task conditioning: the bias-free task encoder that turns a context id
//! into mixing weights, and the per-task / shared output heads.

use rand_chacha::ChaCha8Rng;

use crate::numkit::{Error, Tape, Tensor};

use super::encoder::DenseNet;

/// A task context: id plus its one-hot encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskContext {
    pub id: usize,
    pub n_contexts: usize,
}

impl TaskContext {
    pub fn new(id: usize, n_contexts: usize) -> Result<Self, Error> {
        if id >= n_contexts {
            return Err(Error::Contract(format!(
                "context id {id} out of range for {n_contexts} tasks"
            )));
        }
        Ok(Self { id, n_contexts })
    }

    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_contexts];
        v[self.id] = 1.0;
        v
    }
}

/// Builds a [B, C] one-hot matrix for a batch of context ids.
pub fn onehot_batch(ids: &[usize], n_contexts: usize) -> Result<Tensor, Error> {
    let mut data = vec![0.0; ids.len() * n_contexts];
    for (r, &id) in ids.iter().enumerate() {
        if id >= n_contexts {
            return Err(Error::Contract(format!(
                "context id {id} out of range for {n_contexts} tasks"
            )));
        }
        data[r * n_contexts + id] = 1.0;
    }
    Tensor::from_vec(&[ids.len(), n_contexts], data)
}

/// Single linear layer, no bias: context one-hot -> k mixing weights.
/// Stored row-per-task ([C, k]), so w_c is row c.
#[derive(Clone)]
pub struct TaskEncoder {
    pub weight: Tensor,
}

impl TaskEncoder {
    pub fn init(n_contexts: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (n_contexts as f64).sqrt();
        Self {
            weight: Tensor::uniform_param(&[n_contexts, k], bound, rng),
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[1]
    }

    /// w_c rows for a batch of contexts -> [B, k]. Equivalent to the
    /// one-hot matrix product, recorded as a differentiable gather.
    pub fn forward(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor, Error> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.n_contexts()) {
            return Err(Error::Contract(format!(
                "context id {bad} out of range for {} tasks",
                self.n_contexts()
            )));
        }
        tape.select_rows(&self.weight, ids)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Multi,
    Single,
}

/// Output functions: one MLP per task (multi-head) or one shared MLP fed
/// the context one-hot alongside the combined representation (single-head).
#[derive(Clone)]
pub struct OutputHead {
    pub mode: HeadMode,
    pub nets: Vec<DenseNet>,
    pub n_contexts: usize,
}

impl OutputHead {
    /// `hidden` lists hidden layer widths; tanh between layers, linear out.
    pub fn init(
        mode: HeadMode,
        n_contexts: usize,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dims = |input: usize| -> Vec<usize> {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(out_dim);
            v
        };
        let nets = match mode {
            HeadMode::Multi => (0..n_contexts)
                .map(|_| DenseNet::init(&dims(in_dim), rng))
                .collect(),
            HeadMode::Single => vec![DenseNet::init(&dims(in_dim + n_contexts), rng)],
        };
        Self {
            mode,
            nets,
            n_contexts,
        }
    }

    /// Routes [B, d] representations through the per-task or shared net.
    /// Head MLPs use tanh on hidden layers.
    pub fn forward(&self, tape: &Tape, v: &Tensor, ids: &[usize]) -> Result<Tensor, Error> {
        match self.mode {
            HeadMode::Single => {
                let onehot = onehot_batch(ids, self.n_contexts)?;
                let joined = tape.concat_cols(v, &onehot)?;
                self.forward_net(tape, &self.nets[0], &joined)
            }
            HeadMode::Multi => {
                // Group rows by task, run each group through its head, then
                // restore the original row order.
                let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.n_contexts];
                for (row, &id) in ids.iter().enumerate() {
                    if id >= self.n_contexts {
                        return Err(Error::Contract(format!(
                            "context id {id} out of range for {} heads",
                            self.n_contexts
                        )));
                    }
                    groups[id].push(row);
                }
                let mut parts = Vec::new();
                let mut order = Vec::with_capacity(ids.len());
                for (task, rows) in groups.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = tape.select_rows(v, rows)?;
                    parts.push(self.forward_net(tape, &self.nets[task], &sub)?);
                    order.extend_from_slice(rows);
                }
                let stacked = tape.concat_rows(&parts)?;
                let mut inverse = vec![0usize; ids.len()];
                for (pos, &row) in order.iter().enumerate() {
                    inverse[row] = pos;
                }
                tape.select_rows(&stacked, &inverse)
            }
        }
    }

    fn forward_net(&self, tape: &Tape, net: &DenseNet, x: &Tensor) -> Result<Tensor, Error> {
        let mut h = x.clone();
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter().enumerate() {
            h = layer.forward(tape, &h)?;
            if i != last {
                h = tape.tanh(&h)?;
            }
        }
        Ok(h)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self.mode {
            HeadMode::Single => self.nets[0].named_params(&format!("{prefix}.shared"), out),
            HeadMode::Multi => {
                for (task, net) in self.nets.iter().enumerate() {
                    net.named_params(&format!("{prefix}.task{task}"), out);
                }
            }
        }
    }
}
