use super::StepRecord;

/// Running sums are rebuilt from the ring after this many pushes.
pub const RESYNC_INTERVAL: usize = 4096;

/// Fixed-capacity circular buffer of the two residual channels used by
/// the adaptive filters:
///
/// - channel 0: `e_minus^2`
/// - channel 1: `e_plus^2 + C P+ C^T`
///
/// Pushing and reading the window means are O(1) in the capacity.
#[derive(Debug, Clone)]
pub struct WindowStats {
    ring: Vec<[f64; 2]>,
    capacity: usize,
    // next slot to write
    head: usize,
    fill: usize,
    sums: [f64; 2],
    since_resync: usize,
}

impl WindowStats {
    /// Returns `None` for a zero capacity.
    pub fn new(capacity: usize) -> Option<Self> {
        if capacity == 0 {
            return None;
        }
        Some(Self {
            ring: vec![[0.0; 2]; capacity],
            capacity,
            head: 0,
            fill: 0,
            sums: [0.0; 2],
            since_resync: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity
    }

    pub fn push(&mut self, record: &StepRecord) {
        self.push_pair(
            record.e_minus * record.e_minus,
            record.e_plus * record.e_plus + record.cpc_term,
        );
    }

    pub fn push_pair(&mut self, prior_sq: f64, posterior: f64) {
        let entry = [prior_sq, posterior];
        if self.is_full() {
            let old = self.ring[self.head];
            self.sums[0] -= old[0];
            self.sums[1] -= old[1];
        } else {
            self.fill += 1;
        }
        self.ring[self.head] = entry;
        self.sums[0] += entry[0];
        self.sums[1] += entry[1];
        self.head = (self.head + 1) % self.capacity;

        self.since_resync += 1;
        if self.since_resync >= RESYNC_INTERVAL {
            self.resync();
        }
    }

    fn resync(&mut self) {
        self.sums = self
            .entries()
            .fold([0.0; 2], |acc, e| [acc[0] + e[0], acc[1] + e[1]]);
        self.since_resync = 0;
    }

    /// Window contents, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        let start = if self.is_full() { self.head } else { 0 };
        (0..self.fill).map(move |k| self.ring[(start + k) % self.capacity])
    }

    pub fn sums(&self) -> [f64; 2] {
        self.sums
    }

    /// Mean of `e_minus^2` over the current fill; 0 when empty.
    pub fn mean_prior_sq(&self) -> f64 {
        if self.fill == 0 {
            0.0
        } else {
            self.sums[0] / self.fill as f64
        }
    }

    /// Mean of `e_plus^2 + C P+ C^T` over the current fill; 0 when empty.
    pub fn mean_posterior(&self) -> f64 {
        if self.fill == 0 {
            0.0
        } else {
            self.sums[1] / self.fill as f64
        }
    }

    pub fn clear(&mut self) {
        self.head = 0;
        self.fill = 0;
        self.sums = [0.0; 2];
        self.since_resync = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    #[test]
    fn zero_capacity_rejected() {
        assert!(WindowStats::new(0).is_none());
    }

    #[test]
    fn means_use_fill_count_before_full() {
        let mut w = WindowStats::new(4).unwrap();
        assert_eq!(w.mean_prior_sq(), 0.0);
        w.push_pair(2.0, 4.0);
        w.push_pair(4.0, 8.0);
        assert_eq!(w.fill(), 2);
        assert_eq!(w.mean_prior_sq(), 3.0);
        assert_eq!(w.mean_posterior(), 6.0);
    }

    #[test]
    fn eviction_keeps_last_capacity_entries() {
        let mut w = WindowStats::new(3).unwrap();
        for k in 1..=5 {
            w.push_pair(k as f64, 10.0 * k as f64);
        }
        let contents: Vec<_> = w.entries().collect();
        assert_eq!(contents, vec![[3.0, 30.0], [4.0, 40.0], [5.0, 50.0]]);
        assert_eq!(w.mean_prior_sq(), 4.0);
        assert_eq!(w.fill(), 3);
    }

    #[test]
    fn capacity_one_tracks_latest() {
        let mut w = WindowStats::new(1).unwrap();
        w.push_pair(1.0, 2.0);
        w.push_pair(7.0, 9.0);
        assert_eq!(w.mean_prior_sq(), 7.0);
        assert_eq!(w.mean_posterior(), 9.0);
    }

    #[test]
    fn running_sums_match_deque_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for capacity in [1, 2, 7, 128] {
            let mut w = WindowStats::new(capacity).unwrap();
            let mut oracle: VecDeque<[f64; 2]> = VecDeque::new();
            for _ in 0..3 * RESYNC_INTERVAL {
                let e = [rng.gen_range(0.0..1e-4), rng.gen_range(0.0..1e-3)];
                w.push_pair(e[0], e[1]);
                oracle.push_back(e);
                if oracle.len() > capacity {
                    oracle.pop_front();
                }
                for ch in 0..2 {
                    let brute: f64 = oracle.iter().map(|x| x[ch]).sum();
                    let rel = (w.sums()[ch] - brute).abs() / brute.abs().max(f64::MIN_POSITIVE);
                    assert!(rel <= 1e-9, "capacity {capacity} channel {ch}: rel {rel}");
                }
            }
        }
    }
}
