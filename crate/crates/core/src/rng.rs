//! Deterministic random-stream derivation.
//!
//! Every random decision in the pipeline draws from a stream derived purely
//! from `(master seed, purpose, coordinates)`, never from shared mutable rng
//! state. That makes training resumable from a checkpoint bit-exactly: the
//! stream for step `t` is the same whether or not the process restarted at
//! step `t - 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes; part of the derivation key.
#[derive(Debug, Clone, Copy)]
pub enum Purpose {
    Init,
    Sampler,
    Augment,
    Obstacles,
    Dropout,
    Synthetic,
    Eval,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x11,
            Purpose::Sampler => 0x22,
            Purpose::Augment => 0x33,
            Purpose::Obstacles => 0x44,
            Purpose::Dropout => 0x55,
            Purpose::Synthetic => 0x66,
            Purpose::Eval => 0x77,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives an independent stream from the master seed, a purpose, and up to
/// three coordinates (epoch, step, item, ...).
pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ purpose.tag().wrapping_mul(0xd6e8feb86659fd93));
    for &c in coords {
        state = splitmix64(state ^ c.wrapping_mul(0xa0761d6478bd642f));
    }
    ChaCha8Rng::seed_from_u64(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = stream(7, Purpose::Augment, &[3, 1]);
        let mut b = stream(7, Purpose::Augment, &[3, 1]);
        assert_eq!(a.next_u64(), b.next_u64());

        let mut c = stream(7, Purpose::Augment, &[3, 2]);
        let mut d = stream(7, Purpose::Dropout, &[3, 1]);
        let base = stream(7, Purpose::Augment, &[3, 1]).next_u64();
        assert_ne!(base, c.next_u64());
        assert_ne!(base, d.next_u64());
    }
}
