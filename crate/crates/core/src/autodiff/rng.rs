//! Counter-based random number streams.
//!
//! Every source of randomness in the crate is a named stream keyed by
//! `(seed, stream name)`. The i-th draw of a stream is a pure function of
//! `(key, i)`, so any value can be reproduced without replaying the draws
//! before it, and independent streams never interfere regardless of the
//! order in which components consume them. This is what makes dataset
//! generation, weight initialization, dropout masks, and Monte-Carlo
//! rollouts bit-reproducible across runs and across thread schedules.
//!
//! The generator evaluates the SplitMix64 sequence at an arbitrary index:
//! `out_i = finalize(key + (i+1)·GAMMA)`. Stream keys are derived from the
//! seed and the stream name with FNV-1a, which is stable across platforms
//! and Rust versions (unlike `DefaultHasher`).

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

/// SplitMix64 finalizer: a well-tested 64-bit avalanche mix.
#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte slice, used to derive stream keys from names.
#[inline]
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(GAMMA);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A named, counter-based random stream.
///
/// Draws advance an internal counter; the value at counter `i` depends only
/// on `(key, i)`. Cloning a stream clones its position.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    /// Stream keyed by `(seed, name)`, positioned at the first draw.
    pub fn new(seed: u64, name: &str) -> Self {
        StreamRng { key: fnv1a(seed, name.as_bytes()), counter: 0 }
    }

    /// Derives an independent child stream, e.g. one per trajectory or per
    /// dropout layer, without consuming draws from `self`.
    pub fn substream(&self, label: &str) -> Self {
        StreamRng { key: fnv1a(self.key, label.as_bytes()), counter: 0 }
    }

    /// Child stream selected by index (per-trajectory, per-epoch, ...).
    pub fn substream_idx(&self, label: &str, idx: u64) -> Self {
        let base = fnv1a(self.key, label.as_bytes());
        StreamRng { key: fnv1a(base, &idx.to_le_bytes()), counter: 0 }
    }

    /// Raw 64-bit draw at the current counter position.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = finalize(self.key.wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GAMMA)));
        self.counter += 1;
        v
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box–Muller (cosine branch). Consumes
    /// exactly two raw draws, so positions stay aligned across platforms.
    pub fn gauss(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Unbiased-enough integer draw in `[0, n)` via 128-bit multiply.
    /// Deterministic (no rejection loop); bias is O(n / 2^64).
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Deterministic Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
