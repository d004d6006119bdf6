//! Prioritized experience replay over a sum tree.
//!
//! Transitions are sampled with probability `p_j^alpha / sum p^alpha` and
//! corrected by importance weights `(1 / (S P(j)))^beta`, normalized by the
//! batch maximum. Terminal transitions carry a multiplicative priority
//! boost so the sparse end-of-episode signal is replayed often.

use nalgebra::DVector;
use rand::Rng;

use super::DrlError;

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: DVector<f64>,
    pub action: DVector<f64>,
    pub reward: f64,
    pub next_state: DVector<f64>,
    pub terminal: bool,
}

/// Binary sum tree over a power-of-two leaf array.
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two().max(2);
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn set(&mut self, leaf: usize, value: f64) {
        let mut i = self.leaves + leaf;
        self.nodes[i] = value;
        i /= 2;
        while i >= 1 {
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
            if i == 1 {
                break;
            }
            i /= 2;
        }
    }

    /// Index of the leaf containing the prefix-sum position `u`.
    fn find(&self, mut u: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            if u < left {
                i = 2 * i;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// One sampled batch: indices into the buffer plus normalized importance
/// weights.
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub struct PrioritizedReplay {
    capacity: usize,
    next: usize,
    len: usize,
    data: Vec<Transition>,
    tree: SumTree,
    /// Raw (pre-exponent) priorities currently stored.
    raw: Vec<f64>,
    alpha: f64,
    max_raw: f64,
}

impl PrioritizedReplay {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        assert!(capacity >= 1);
        PrioritizedReplay {
            capacity,
            next: 0,
            len: 0,
            data: Vec::with_capacity(capacity),
            tree: SumTree::new(capacity),
            raw: vec![0.0; capacity],
            alpha,
            max_raw: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.data[index]
    }

    /// Inserts at the max raw priority seen so far (boosted when terminal)
    /// so fresh transitions are replayed promptly.
    pub fn push(&mut self, t: Transition, terminal_boost: f64) {
        let raw = self.max_raw * if t.terminal { terminal_boost } else { 1.0 };
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.set_raw(self.next, raw);
        self.next = (self.next + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    fn set_raw(&mut self, index: usize, raw: f64) {
        let raw = raw.max(1e-12);
        self.raw[index] = raw;
        self.max_raw = self.max_raw.max(raw);
        self.tree.set(index, raw.powf(self.alpha));
    }

    /// Updates priorities after a learning step, re-boosting terminals.
    pub fn update_priorities(&mut self, indices: &[usize], raw: &[f64], terminal_boost: f64) {
        for (&i, &p) in indices.iter().zip(raw) {
            let boosted = p * if self.data[i].terminal { terminal_boost } else { 1.0 };
            self.set_raw(i, boosted);
        }
    }

    /// Draws `batch` transitions with priority-proportional probabilities
    /// and beta-corrected importance weights.
    pub fn sample<R: Rng>(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<SampledBatch, DrlError> {
        if batch > self.len {
            return Err(DrlError::BufferTooSmall {
                len: self.len,
                batch,
            });
        }
        let total = self.tree.total();
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            // skip the zero-priority padding beyond len
            let mut idx;
            loop {
                let u = rng.random_range(0.0..total);
                idx = self.tree.find(u);
                if idx < self.len {
                    break;
                }
            }
            let p = self.tree.nodes[self.tree.leaves + idx] / total;
            let w = (1.0 / (self.len as f64 * p)).powf(beta);
            indices.push(idx);
            weights.push(w);
        }
        let max_w = weights.iter().cloned().fold(f64::MIN, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        Ok(SampledBatch { indices, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn dummy(terminal: bool) -> Transition {
        Transition {
            state: DVector::zeros(1),
            action: DVector::zeros(1),
            reward: 0.0,
            next_state: DVector::zeros(1),
            terminal,
        }
    }

    #[test]
    fn equal_priorities_sample_uniformly_with_unit_weights() {
        let mut buf = PrioritizedReplay::new(64, 0.6);
        for _ in 0..50 {
            buf.push(dummy(false), 10.0);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let batch = buf.sample(32, 0.4, &mut rng).unwrap();
        assert!(batch.weights.iter().all(|&w| (w - 1.0).abs() <= 1e-12));

        // chi-square uniformity over many draws
        let mut counts = vec![0usize; 50];
        let draws = 100_000;
        for _ in 0..draws / 32 {
            for &i in &buf.sample(32, 0.4, &mut rng).unwrap().indices {
                counts[i] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 50.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99th percentile of chi-square with 49 degrees of freedom
        let critical = statrs::distribution::ChiSquared::new(49.0)
            .map(|d| {
                use statrs::distribution::ContinuousCDF;
                d.inverse_cdf(0.99)
            })
            .unwrap();
        assert!(stat < critical, "chi-square {stat} >= {critical}");
    }

    #[test]
    fn terminal_boost_shifts_sampling_mass() {
        // 11 transitions, 10 plain and 1 terminal with boost 10 and
        // alpha = 1: the terminal should absorb half the draws
        let mut buf = PrioritizedReplay::new(16, 1.0);
        for _ in 0..10 {
            buf.push(dummy(false), 10.0);
        }
        buf.push(dummy(true), 10.0);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut terminal_hits = 0usize;
        let draws = 100_000;
        for _ in 0..draws {
            let b = buf.sample(1, 1.0, &mut rng).unwrap();
            if b.indices[0] == 10 {
                terminal_hits += 1;
            }
        }
        let freq = terminal_hits as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "terminal frequency {freq}");
    }

    #[test]
    fn importance_weights_compensate_priorities() {
        let mut buf = PrioritizedReplay::new(8, 1.0);
        for _ in 0..4 {
            buf.push(dummy(false), 1.0);
        }
        buf.update_priorities(&[0, 1, 2, 3], &[4.0, 1.0, 1.0, 1.0], 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        // P(0) = 4/7; weight(0) = (1/(4 * 4/7))^1 = 7/16, targets the
        // lower-probability items at 7/4 before normalization
        let mut w0 = None;
        let mut w_other = None;
        for _ in 0..200 {
            let b = buf.sample(4, 1.0, &mut rng).unwrap();
            for (k, &i) in b.indices.iter().enumerate() {
                if i == 0 {
                    w0 = Some(b.weights[k]);
                } else {
                    w_other = Some(b.weights[k]);
                }
            }
            if w0.is_some() && w_other.is_some() {
                break;
            }
        }
        let ratio = w_other.unwrap() / w0.unwrap();
        assert!((ratio - 4.0).abs() <= 1e-9, "weight ratio {ratio}");
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut buf = PrioritizedReplay::new(8, 0.6);
        buf.push(dummy(false), 10.0);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        assert!(matches!(
            buf.sample(2, 0.4, &mut rng),
            Err(DrlError::BufferTooSmall { .. })
        ));
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = PrioritizedReplay::new(4, 0.6);
        for i in 0..6 {
            let mut t = dummy(false);
            t.reward = i as f64;
            buf.push(t, 1.0);
        }
        assert_eq!(buf.len(), 4);
        // slots 0 and 1 now hold rewards 4 and 5
        assert_eq!(buf.get(0).reward, 4.0);
        assert_eq!(buf.get(1).reward, 5.0);
        assert_eq!(buf.get(2).reward, 2.0);
    }
}
