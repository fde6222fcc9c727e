//! Independent, separately seeded randomness streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Purpose of a randomness stream. Each purpose gets its own ChaCha stream
/// id, so draws for one purpose never shift or reveal draws for another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    RealLabelFlip = 1,
    FakeLabelFlip = 2,
    Noise = 3,
    Batch = 4,
    ParamInit = 5,
    Evaluation = 6,
    Places = 7,
}

/// Seeds for a run. The privacy seed is kept apart from the training seed so
/// the device-side label flips cannot be replayed from training randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub privacy: u64,
    pub training: u64,
}

impl Seeds {
    /// Derives both seeds from one master seed.
    pub fn from_master(seed: u64) -> Self {
        Self {
            privacy: seed ^ 0x9e37_79b9_7f4a_7c15,
            training: seed,
        }
    }

    /// A seed for an auxiliary purpose (evaluation, query sampling, ...)
    /// derived from the training seed and a label.
    pub fn derive(&self, purpose: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.training.to_le_bytes());
        h.update(purpose.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn rng(&self, stream: Stream) -> ChaCha20Rng {
        let seed = match stream {
            Stream::RealLabelFlip => self.privacy,
            _ => self.training,
        };
        stream_rng(seed, stream)
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
