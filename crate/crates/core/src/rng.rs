//! Counter-based deterministic random streams.
//!
//! Every random decision in the toolkit draws from a [`StreamRng`] keyed
//! by `(seed, label)`. Streams are independent of each other and of call
//! order, so any generation step can be reproduced in isolation and the
//! same `(config, seed)` pair yields bit-identical results on every
//! platform.

#[allow(unused_imports)]
use num_traits::Float as _;

/// One independent random stream, keyed by a 64-bit seed and a label.
///
/// Output at counter `n` is a pure function of `(seed, label, n)`;
/// it never depends on other streams.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit finalizer from SplitMix64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl StreamRng {
    /// Opens the stream identified by `(seed, label)` at counter 0.
    pub fn new(seed: u64, label: &str) -> Self {
        let key = mix(seed ^ mix(label_hash(label)));
        StreamRng { key, counter: 0 }
    }

    /// Convenience for labels with one numeric component, e.g. `("tile", 7)`.
    pub fn keyed(seed: u64, label: &str, index: u64) -> Self {
        let key = mix(seed ^ mix(label_hash(label)) ^ mix(index.wrapping_mul(GOLDEN)));
        StreamRng { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let n = self.counter;
        self.counter += 1;
        mix(self.key ^ n.wrapping_mul(GOLDEN))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Rejection sampling keeps the draw unbiased.
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = num_traits::Float::sqrt(-2.0 * num_traits::Float::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        r * num_traits::Float::cos(theta)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            slice.swap(i, j);
        }
    }

    /// Draws an index in `[0, weights.len())` with probability proportional
    /// to `weights`. Weights must be non-negative with a positive sum.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut target = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
