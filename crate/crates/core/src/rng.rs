//! Deterministic, labeled random-number streams.
//!
//! Every stochastic component (schedule sampling, ensemble subset draws,
//! network initialization, active-learning baselines) receives an
//! [`RngStream`] instead of a bare generator. A stream is identified by a
//! 64-bit seed plus a short label; the pair is hashed into the key of a
//! ChaCha12 generator, so the same (seed, label) always reproduces the same
//! draw sequence on any platform, and differently labeled substreams never
//! overlap. In particular the active-learning arm and the random baseline of
//! a comparison run on disjoint streams derived from one experiment seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// A named, reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        RngStream {
            seed,
            label: label.into(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Derives a child stream for an independent purpose.
    ///
    /// Labels compose with `/`, so `RngStream::new(7, "al").child("round-3")`
    /// is the stream `(7, "al/round-3")`.
    pub fn child(&self, suffix: impl AsRef<str>) -> Self {
        RngStream {
            seed: self.seed,
            label: format!("{}/{}", self.label, suffix.as_ref()),
        }
    }

    /// Instantiates the generator for this stream.
    ///
    /// The (seed, label) pair is digested with SHA-256 into the 32-byte
    /// ChaCha12 key, which keeps the mapping stable across platforms and
    /// releases and makes distinct labels statistically independent.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha12Rng::from_seed(key)
    }
}
