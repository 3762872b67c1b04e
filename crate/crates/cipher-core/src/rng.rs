//! Deterministic stream splitting.
//!
//! Every random decision in a run draws from a ChaCha20 stream derived
//! from the master seed and an integer path identifying the decision
//! (purpose tag, replicate, table index, ...). Streams are independent
//! of traversal order and of the number of worker threads, so runs with
//! the same seed are reproducible bit for bit.

use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Purpose tags, the first element of every stream path.
pub mod tag {
    /// Laplace noise for one sanitized table: `[SANITIZE, replicate, table]`.
    pub const SANITIZE: u64 = 1;
    /// Pivot choice for one subset: `[PIVOT, replicate, subset_mask]`.
    pub const PIVOT: u64 = 2;
    /// Record sampling for one replicate: `[SAMPLE, replicate]`.
    pub const SAMPLE: u64 = 3;
    /// MWEM select/measure draws for one replicate: `[MWEM, replicate]`.
    pub const MWEM: u64 = 4;
    /// Data-generating process: `[DGP, stream]`.
    pub const DGP: u64 = 5;
    /// Experiment grid cells: `[EXPERIMENT, cell, rep]`.
    pub const EXPERIMENT: u64 = 6;
}

/// Derives independent ChaCha20 streams from a master seed.
#[derive(Clone, Copy, Debug)]
pub struct StreamFactory {
    master: u64,
}

impl StreamFactory {
    pub fn new(master: u64) -> Self {
        StreamFactory { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream for a tagged path; distinct paths give unrelated streams.
    pub fn stream(&self, path: &[u64]) -> ChaCha20Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update((path.len() as u64).to_le_bytes());
        for part in path {
            hasher.update(part.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(seed)
    }
}
