//! Seedable, stream-addressable random numbers.
//!
//! Every stochastic operation takes an explicit [`Stream`]. A stream is a
//! ChaCha8 keystream keyed by `(seed, stream id)`, so two runs with the same
//! seed draw identical numbers no matter how many other streams were used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { rng }
    }

    /// Derive a stream id from a label and a list of integer coordinates
    /// (epoch, batch, module, ...).
    pub fn derived(seed: u64, label: &str, coords: &[u64]) -> Self {
        Self::new(seed, stream_id(label, coords))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f32 {
        self.rng.sample::<f32, _>(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// FNV-1a over the label bytes and coordinates.
pub fn stream_id(label: &str, coords: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for b in label.bytes() {
        eat(b);
    }
    for c in coords {
        for b in c.to_le_bytes() {
            eat(b);
        }
    }
    h
}
