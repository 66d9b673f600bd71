//! Per-task ring buffers with equal-count sampling across tasks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rollout::Transition;
use super::RlError;

struct Ring {
    data: Vec<Transition>,
    next: usize,
    capacity: usize,
}

impl Ring {
    fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }
}

/// One ring buffer per task; sampling draws equal counts per task
/// (remainders rotate so no task is systematically favored).
pub struct ReplayBuffer {
    rings: Vec<Ring>,
    rotation: usize,
}

impl ReplayBuffer {
    pub fn new(n_tasks: usize, capacity: usize) -> Self {
        Self {
            rings: (0..n_tasks)
                .map(|_| Ring {
                    data: Vec::new(),
                    next: 0,
                    capacity,
                })
                .collect(),
            rotation: 0,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.rings.len()
    }

    pub fn len(&self, task: usize) -> usize {
        self.rings[task].data.len()
    }

    pub fn min_len(&self) -> usize {
        self.rings.iter().map(|r| r.data.len()).min().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.rings.iter().all(|r| r.data.is_empty())
    }

    pub fn push(&mut self, t: Transition) -> Result<(), RlError> {
        t.validate()?;
        if t.task >= self.rings.len() {
            return Err(RlError::Contract(format!(
                "transition task {} out of range",
                t.task
            )));
        }
        self.rings[t.task].push(t);
        Ok(())
    }

    /// Uniformly samples `batch` transitions with per-task counts differing
    /// by at most one.
    pub fn sample_equal(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
        let n = self.rings.len();
        let base = batch / n;
        let rem = batch % n;
        let mut out = Vec::with_capacity(batch);
        for task in 0..n {
            let extra = ((task + n - self.rotation % n) % n < rem) as usize;
            let count = base + extra;
            let ring = &self.rings[task];
            for _ in 0..count {
                let idx = rng.random_range(0..ring.data.len());
                out.push(ring.data[idx].clone());
            }
        }
        self.rotation = self.rotation.wrapping_add(1);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Action;
    use rand::SeedableRng;

    fn tr(task: usize, reward: f64) -> Transition {
        Transition {
            task,
            obs: vec![0.0],
            action: Action::Continuous(vec![0.0, 0.0]),
            reward,
            next_obs: vec![0.0],
            absorbing: false,
            last: false,
        }
    }

    #[test]
    fn capacity_wraps_as_a_ring() {
        let mut buf = ReplayBuffer::new(1, 3);
        for i in 0..5 {
            buf.push(tr(0, i as f64)).unwrap();
        }
        assert_eq!(buf.len(0), 3);
        let rewards: Vec<f64> = buf.rings[0].data.iter().map(|t| t.reward).collect();
        // oldest two were overwritten
        assert!(rewards.contains(&3.0) && rewards.contains(&4.0) && rewards.contains(&2.0));
    }

    #[test]
    fn equal_sampling_counts_differ_by_at_most_one() {
        let mut buf = ReplayBuffer::new(3, 100);
        for task in 0..3 {
            for i in 0..50 {
                buf.push(tr(task, i as f64)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let batch = buf.sample_equal(128, &mut rng);
            assert_eq!(batch.len(), 128);
            let mut counts = [0usize; 3];
            for t in &batch {
                counts[t.task] += 1;
            }
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1, "counts {counts:?}");
        }
    }

    #[test]
    fn rejects_invalid_transitions() {
        let mut buf = ReplayBuffer::new(1, 10);
        let mut bad = tr(0, f64::NAN);
        assert!(buf.push(bad.clone()).is_err());
        bad.reward = 0.0;
        bad.absorbing = true;
        bad.last = false;
        assert!(buf.push(bad).is_err());
    }
}
