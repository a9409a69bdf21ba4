//! Named, splittable random streams.
//!
//! Every stochastic operation takes an explicit [`Stream`]. Streams are
//! derived from a root seed plus a path of names and indices, so the value a
//! consumer sees never depends on how many draws other consumers made or in
//! which order records were processed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A position in the stream tree. Cheap to copy; turn into a generator with
/// [`StreamKey::stream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(mix(seed ^ 0x6a09_e667_f3bc_c908))
    }

    pub fn child(self, name: &str) -> Self {
        StreamKey(mix(self.0 ^ fnv1a(name.as_bytes())))
    }

    pub fn index(self, i: u64) -> Self {
        StreamKey(mix(self.0.wrapping_add(mix(i.wrapping_add(0x9e37_79b9_7f4a_7c15)))))
    }

    pub fn stream(self) -> Stream {
        Stream { rng: ChaCha8Rng::seed_from_u64(self.0) }
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha8 counter-based generator.
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        StreamKey::root(seed).stream()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// `amount` distinct indices from `0..len`, in draw order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, len, amount).into_vec()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
