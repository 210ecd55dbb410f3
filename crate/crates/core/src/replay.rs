//! Bounded FIFO experience store with uniform minibatch sampling.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
    pushed: u64,
}

impl<T> ReplayBuffer<T> {
    /// # Panics
    /// When `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of insertions so far, including evicted ones.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    /// Appends `item`, evicting the oldest entry when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
        self.pushed += 1;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// `min(z, len)` distinct entries chosen uniformly at random.
    pub fn sample<R: Rng + ?Sized>(&self, z: usize, rng: &mut R) -> Vec<&T> {
        let amount = z.min(self.items.len());
        index::sample(rng, self.items.len(), amount)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..150 {
            buf.push(i);
        }
        assert_eq!(buf.len(), 100);
        assert_eq!(buf.total_pushed(), 150);
        assert!(buf.iter().copied().eq(50..150));
    }

    #[test]
    fn sample_is_without_replacement() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..7 {
            buf.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut drawn: Vec<i32> = buf.sample(32, &mut rng).into_iter().copied().collect();
        drawn.sort();
        assert_eq!(drawn, (0..7).collect::<Vec<_>>());
        assert_eq!(buf.sample(3, &mut rng).len(), 3);
    }

    #[test]
    fn sampling_is_roughly_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..10 {
            buf.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 10];
        for _ in 0..20_000 {
            for &x in buf.sample(2, &mut rng) {
                counts[x] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.1).abs() < 0.01, "{counts:?}");
        }
    }
}
