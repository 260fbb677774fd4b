//! Splittable, counter-based random streams.
//!
//! Every stream is a 256-bit key. Child streams are derived by hashing the
//! parent key together with a purpose label or an index, so the numbers a
//! consumer sees depend only on the path from the root seed and never on
//! evaluation order or the number of workers. Draws come from ChaCha12 keyed
//! by the stream key.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    key: [u8; 32],
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RngStream(")?;
        for b in &self.key[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"yaart.rng.root");
        h.update(seed.to_le_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    /// Child stream keyed by a purpose label, e.g. `"minibatch"`.
    pub fn fork(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([1u8]);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    /// Child stream keyed by an index (sample id, step, trajectory...).
    pub fn fork_index(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([2u8]);
        h.update(index.to_le_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.key)
    }
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform in `[0, 1)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
