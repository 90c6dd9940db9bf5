//! Seedable RNG with a checkpointable position.
//!
//! Everything stochastic in the crate draws from a [`SeedRng`]; saving the
//! `(seed, word_pos)` pair is enough to resume a stream mid-run bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct SeedRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable RNG stream state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from this rng's seed and a stream tag.
    pub fn derive(&self, tag: u64) -> SeedRng {
        SeedRng::new(self.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(state: RngState) -> Self {
        let mut rng = SeedRng::new(state.seed);
        let pos = ((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128;
        rng.inner.set_word_pos(pos);
        rng
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        Normal::new(0.0, 1.0).unwrap().sample(&mut self.inner)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        let dist = Normal::new(0.0, 1.0).unwrap();
        for v in out.iter_mut() {
            *v = dist.sample(&mut self.inner);
        }
    }

    /// Gumbel(0, 1) draw: `-ln(-ln(u))` with `u` clamped away from 0 and 1.
    #[inline]
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices drawn uniformly from `0..n`, in draw order.
    pub fn sample_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let j = self.inner.random_range(0..pool.len());
            out.push(pool.swap_remove(j));
        }
        out
    }
}
