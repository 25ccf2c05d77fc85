//! Prioritized experience replay over a ring buffer, sampled through a sum tree.

use rand::Rng;

use crate::error::{Error, Result};

/// One stored transition, features already scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub history: Vec<f32>,
    pub flat: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_history: Vec<f32>,
    pub next_flat: Vec<f32>,
    /// True only for real terminal states; time-limit truncations stay false.
    pub done: bool,
}

/// Binary sum tree over `capacity` leaves.
#[derive(Clone, Debug)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            capacity,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn leaves(&self) -> usize {
        self.nodes.len() / 2
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves() + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        debug_assert!(i < self.capacity);
        let mut node = self.leaves() + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`, `0 <= mass < total`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        let leaves = self.leaves();
        while node < leaves {
            let left = self.nodes[2 * node];
            if mass < left || self.nodes[2 * node + 1] <= 0.0 {
                node *= 2;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        (node - leaves).min(self.capacity - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerConfig {
    pub capacity: usize,
    /// Priority exponent α_PER.
    pub alpha: f64,
    /// Importance-weight exponent β_PER.
    pub beta: f64,
    /// Added to |TD error| so priorities stay positive.
    pub epsilon: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            alpha: 0.6,
            beta: 0.4,
            epsilon: 1e-3,
        }
    }
}

pub struct PrioritizedReplay {
    pub config: PerConfig,
    data: Vec<Transition>,
    priorities: Vec<f64>,
    tree: SumTree,
    next: usize,
    max_priority: f64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub indices: Vec<usize>,
    /// Importance weights normalised by the batch maximum.
    pub weights: Vec<f64>,
}

impl PrioritizedReplay {
    pub fn new(config: PerConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if !(config.epsilon > 0.0) {
            return Err(Error::Config("replay epsilon must be positive".into()));
        }
        Ok(Self {
            data: Vec::with_capacity(config.capacity.min(1 << 16)),
            priorities: Vec::new(),
            tree: SumTree::new(config.capacity),
            next: 0,
            max_priority: 1.0,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.priorities[i]
    }

    /// Insert at the running maximum priority.
    pub fn push(&mut self, t: Transition) -> usize {
        let p = self.max_priority;
        self.push_with_priority(t, p)
    }

    pub fn push_with_priority(&mut self, t: Transition, priority: f64) -> usize {
        let priority = if priority > 0.0 && priority.is_finite() {
            priority
        } else {
            self.config.epsilon
        };
        let slot = self.next;
        if self.data.len() < self.config.capacity {
            self.data.push(t);
            self.priorities.push(priority);
        } else {
            self.data[slot] = t;
            self.priorities[slot] = priority;
        }
        self.tree.set(slot, priority.powf(self.config.alpha));
        self.max_priority = self.max_priority.max(priority);
        self.next = (slot + 1) % self.config.capacity;
        slot
    }

    pub fn update_priority(&mut self, i: usize, priority: f64) {
        let priority = if priority.is_finite() {
            priority.max(self.config.epsilon)
        } else {
            self.max_priority
        };
        self.priorities[i] = priority;
        self.tree.set(i, priority.powf(self.config.alpha));
        self.max_priority = self.max_priority.max(priority);
    }

    /// Sampling probability of slot `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Sample> {
        if self.data.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let total = self.tree.total();
        let n = self.data.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = self.tree.find(rng.random::<f64>() * total).min(self.data.len() - 1);
            indices.push(i);
            weights.push((n * self.probability(i)).powf(-self.config.beta));
        }
        let max = weights.iter().cloned().fold(0.0, f64::max);
        for w in weights.iter_mut() {
            *w /= max;
        }
        Ok(Sample { indices, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dummy(r: f32) -> Transition {
        Transition {
            history: vec![],
            flat: vec![r],
            action: vec![],
            reward: r,
            next_history: vec![],
            next_flat: vec![],
            done: false,
        }
    }

    #[test]
    fn proportional_probabilities() {
        let cfg = PerConfig {
            capacity: 8,
            alpha: 1.0,
            beta: 0.4,
            epsilon: 1e-3,
        };
        let mut buf = PrioritizedReplay::new(cfg).unwrap();
        for (i, p) in [2.0, 1.0, 1.0].into_iter().enumerate() {
            buf.push_with_priority(dummy(i as f32), p);
        }
        let probs: Vec<f64> = (0..3).map(|i| buf.probability(i)).collect();
        assert_eq!(probs, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn empirical_frequencies_match_priorities() {
        let cfg = PerConfig {
            capacity: 8,
            alpha: 0.6,
            ..PerConfig::default()
        };
        let mut buf = PrioritizedReplay::new(cfg).unwrap();
        let ps = [0.5, 3.0, 1.0, 0.01, 7.0];
        for (i, &p) in ps.iter().enumerate() {
            buf.push_with_priority(dummy(i as f32), p);
        }
        let z: f64 = ps.iter().map(|p| p.powf(0.6)).sum();
        let mut counts = [0usize; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            for i in buf.sample(100, &mut rng).unwrap().indices {
                counts[i] += 1;
            }
        }
        for (i, &p) in ps.iter().enumerate() {
            let freq = counts[i] as f64 / 1e5;
            let expected = p.powf(0.6) / z;
            // one percentage point; a 1% relative band is below the Monte Carlo noise at 1e5 draws
            assert!((freq - expected).abs() <= 0.01, "slot {i}: {freq} vs {expected}");
        }
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let cfg = PerConfig {
            capacity: 4,
            alpha: 0.0,
            ..PerConfig::default()
        };
        let mut buf = PrioritizedReplay::new(cfg).unwrap();
        for p in [5.0, 0.1, 2.0] {
            buf.push_with_priority(dummy(0.0), p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = buf.sample(64, &mut rng).unwrap();
        assert!(s.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn ring_eviction_bounds_size() {
        let cfg = PerConfig {
            capacity: 3,
            ..PerConfig::default()
        };
        let mut buf = PrioritizedReplay::new(cfg).unwrap();
        for i in 0..10 {
            buf.push(dummy(i as f32));
        }
        assert_eq!(buf.len(), 3);
        // slots hold the three newest transitions
        let mut rewards: Vec<f32> = (0..3).map(|i| buf.get(i).reward).collect();
        rewards.sort_by(f32::total_cmp);
        assert_eq!(rewards, vec![7.0, 8.0, 9.0]);
        assert!((0..3).all(|i| buf.priority(i) > 0.0));
    }

    #[test]
    fn empty_sample_errors() {
        let buf = PrioritizedReplay::new(PerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample(4, &mut rng), Err(Error::EmptyBuffer)));
        assert!(PrioritizedReplay::new(PerConfig {
            capacity: 0,
            ..PerConfig::default()
        })
        .is_err());
    }
}
