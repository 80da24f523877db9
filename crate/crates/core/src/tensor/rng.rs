use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Deterministic random source.
///
/// Uniform bits come from ChaCha8 (seeded through `SeedableRng::seed_from_u64`);
/// Gaussian samples use the Box–Muller transform evaluated with `libm`, so
/// the stream is identical on every platform. Both samples of a Box–Muller
/// pair are used; the pending one is part of [`RngState`].
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
    pub spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
            spare: self.spare,
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng {
            inner,
            spare: state.spare,
        }
    }

    /// Independent generator derived from this one's next output.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// One standard normal sample.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// I.i.d. `N(0, sigma²)` samples. `sigma == 0` yields exact zeros and
    /// consumes nothing from the stream.
    pub fn gaussian<T: Element>(&mut self, shape: impl Into<Vec<usize>>, sigma: f64) -> Result<Tensor<T>> {
        if !(sigma >= 0.0) {
            return Err(Error::Argument(format!("noise std must be >= 0, got {sigma}")));
        }
        let shape = shape.into();
        if sigma == 0.0 {
            return Ok(Tensor::zeros(shape));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(sigma * self.normal())).collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_exact_zero() {
        let mut rng = Rng::new(3);
        let t: Tensor<f64> = rng.gaussian([4, 5], 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v.to_bits() == 0));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(Rng::new(0).gaussian::<f64>([2], -0.1).is_err());
        assert!(Rng::new(0).gaussian::<f64>([2], f64::NAN).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f64> = Rng::new(42).gaussian([100], 1.3).unwrap();
        let b: Tensor<f64> = Rng::new(42).gaussian([100], 1.3).unwrap();
        assert_eq!(a, b);
        let c: Tensor<f64> = Rng::new(43).gaussian([100], 1.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn million_samples_have_unit_moments() {
        let mut rng = Rng::new(2024);
        let n = 1_000_000;
        let t: Tensor<f64> = rng.gaussian([n], 1.0).unwrap();
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut rng = Rng::new(9);
        for _ in 0..7 {
            rng.normal();
        }
        let saved = rng.state();
        let expected: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let mut resumed = Rng::from_state(&saved);
        let got: Vec<f64> = (0..10).map(|_| resumed.normal()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Rng::new(1).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
