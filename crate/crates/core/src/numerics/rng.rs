use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Deterministic random stream addressed by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the seed as key and the stream id as the cipher
/// stream, so distinct ids are independent and a given pair reproduces the
/// same sequence on every platform regardless of how work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream derived from a label and index path, e.g. `("anchor", [record, try])`.
    pub fn named(seed: u64, label: &str, path: &[u64]) -> Self {
        Self::new(seed, stream_id_for(label, path))
    }

    /// A child stream; `self.child(label, path)` never collides with the parent.
    pub fn child(&self, label: &str, path: &[u64]) -> Self {
        let mut full = Vec::with_capacity(path.len() + 1);
        full.push(self.stream_id);
        full.extend_from_slice(path);
        Self::named(self.seed, label, &full)
    }

    pub fn rng(&self) -> StreamRng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(b"bidedpo\0");
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(self.stream_id);
        StreamRng { inner }
    }
}

/// Stable 64-bit id from a label and an index path.
pub fn stream_id_for(label: &str, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Materialized generator for one [`RngStream`].
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
