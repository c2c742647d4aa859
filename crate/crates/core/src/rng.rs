//! Deterministic RNG substream derivation.
//!
//! Every random draw in the crate descends from a single master seed through
//! fixed-purpose ChaCha streams.  Within a stream, a (step, slot) pair maps to
//! a disjoint counter block, so each draw is a pure function of
//! (seed, purpose, step, slot): results are independent of thread count and
//! batch evaluation order, and resuming from a checkpoint reproduces the same
//! trajectory without serializing any generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Batch composition / data-order draws.
pub const STREAM_DATA: u64 = 0;
/// Gaussian reparameterization noise.
pub const STREAM_GAUSSIAN: u64 = 1;
/// Gumbel-Softmax uniform noise.
pub const STREAM_GUMBEL: u64 = 2;
/// Dropout masks.
pub const STREAM_DROPOUT: u64 = 3;
/// Parameter initialization.
pub const STREAM_INIT: u64 = 4;
/// Cross-validation splits (fold id is added to the stream).
pub const STREAM_SPLIT: u64 = 16;
/// Synthetic data generation (subject index selects the block).
pub const STREAM_SYNTH: u64 = 32;

/// 32-bit words reserved per (step, slot) block: 2^21 words = 8 MiB of noise.
const BLOCK_WORDS: u128 = 1 << 21;
/// Slots reserved per step (batch positions, fold workers, ...).
const MAX_SLOTS: u128 = 1 << 12;

/// Generator at the start of a purpose stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator positioned at the counter block reserved for (step, slot)
/// within a purpose stream.
pub fn block_rng(seed: u64, stream: u64, step: u64, slot: u64) -> ChaCha12Rng {
    assert!(
        (slot as u128) < MAX_SLOTS,
        "slot {slot} exceeds the reserved block range"
    );
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos(((step as u128) * MAX_SLOTS + slot as u128) * BLOCK_WORDS);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent() {
        let mut r0 = stream_rng(7, STREAM_DATA);
        let mut r1 = stream_rng(7, STREAM_GAUSSIAN);
        let x0: u64 = r0.random();
        let x1: u64 = r1.random();
        assert_ne!(x0, x1);
    }

    #[test]
    fn block_rng_is_reproducible() {
        let mut a = block_rng(42, STREAM_GAUSSIAN, 10, 3);
        let mut b = block_rng(42, STREAM_GAUSSIAN, 10, 3);
        let xs: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn blocks_do_not_overlap() {
        // Drawing many values from one block must not reach the next block.
        let mut a = block_rng(1, STREAM_DROPOUT, 0, 0);
        for _ in 0..100_000 {
            let _: u64 = a.random();
        }
        let from_next = {
            let mut b = block_rng(1, STREAM_DROPOUT, 0, 1);
            let v: u64 = b.random();
            v
        };
        let next_direct = {
            let mut b = block_rng(1, STREAM_DROPOUT, 0, 1);
            let v: u64 = b.random();
            v
        };
        assert_eq!(from_next, next_direct);
        // 100k u64 draws = 200k words < BLOCK_WORDS, so block 0 stayed inside
        // its reservation; nothing to assert beyond not panicking.
    }
}
