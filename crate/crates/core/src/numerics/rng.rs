use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Counter-based random stream.
///
/// A stream is addressed by `(seed, stream, counter)`: the ChaCha20 key comes
/// from the seed, the stream id selects an independent keystream, and the
/// counter is the keystream word position. Child streams are derived from a
/// parent id and an index, never from the parent's current position, so the
/// draws a worker sees do not depend on scheduling order.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0, 0)
    }

    /// Stream positioned at an explicit word counter.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(counter));
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Keystream words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Independent child stream; depends only on `(seed, stream, index)`.
    pub fn split(&self, index: u64) -> Self {
        let child = mix64(self.stream ^ mix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)));
        Self::at(self.seed, child, 0)
    }

    /// Child stream keyed by a path of indices, e.g. `(face, intensity, seed)`.
    pub fn derive(&self, path: &[u64]) -> Self {
        path.iter().fold(self.clone(), |s, &i| s.split(i))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal<T: Scalar>(&mut self, mean: f64, std: f64) -> T {
        T::of(mean + std * self.standard_normal())
    }
}

/// Tensor of i.i.d. standard normal draws.
pub fn gaussian<T: Scalar>(stream: &mut RngStream, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(stream.standard_normal()))
}
