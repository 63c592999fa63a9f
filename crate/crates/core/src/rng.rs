//! Seeded random streams.
//!
//! Every random draw in the pipeline goes through [`Rng`] so that a single
//! 64-bit seed reproduces a whole run. Sub-streams are derived from a parent
//! seed plus a list of stream ids (epoch, batch index, ...), never from the
//! state of another generator, so parallel or reordered consumers still see
//! the same draws.

use rand::{Error as RandError, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, ids...)`.
    pub fn derive(seed: u64, ids: &[u64]) -> Self {
        let mut h = splitmix(seed ^ 0x9e37_79b9_7f4a_7c15);
        for &id in ids {
            h = splitmix(h ^ id.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        }
        Self::new(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform integer in `0..=max`.
    pub fn below_incl(&mut self, max: usize) -> usize {
        use rand::Rng as _;
        self.inner.gen_range(0..=max)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng as _;
        self.inner.gen::<f64>()
    }

    pub fn coin(&mut self) -> bool {
        self.next_u32() & 1 == 1
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), RandError> {
        self.inner.try_fill_bytes(dest)
    }
}
