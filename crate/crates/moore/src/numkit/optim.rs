//! Adam with the usual moment decays (0.9 / 0.999, eps 1e-8).

use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    params: Vec<Tensor>,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Self {
        let slots = params
            .iter()
            .map(|p| AdamSlot {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            params,
            slots,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// One update from the accumulated gradients. Parameters with no
    /// gradient this step keep their moments untouched.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, slot) in self.params.iter().zip(self.slots.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            p.update_data(|data| {
                for i in 0..data.len() {
                    slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                    slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mhat = slot.m[i] / bc1;
                    let vhat = slot.v[i] / bc2;
                    data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// (t, per-parameter slots) for checkpointing, in parameter order.
    pub fn export_state(&self) -> (u64, Vec<AdamSlot>) {
        (self.t, self.slots.clone())
    }

    pub fn import_state(&mut self, t: u64, slots: Vec<AdamSlot>) {
        assert_eq!(slots.len(), self.slots.len(), "optimizer state arity");
        for (s, p) in slots.iter().zip(&self.params) {
            assert_eq!(s.m.len(), p.numel(), "optimizer slot size");
        }
        self.t = t;
        self.slots = slots;
    }
}
