//! Seeded, counter-based random streams.
//!
//! A single master seed fans out into independent ChaCha streams, one per
//! purpose (initialisation, anchors, ...) and one per particle. A particle's
//! diffusion draws therefore never depend on how many draws other particles
//! or other subsystems consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream identifiers below `PARTICLE_BASE` are reserved for named purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Anchors,
    Heuristic,
    OracleSampling,
    Baseline,
    Fdgvi,
    DataSplit,
    DataSynth,
}

const PARTICLE_BASE: u64 = 1 << 32;

impl Purpose {
    fn id(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Anchors => 2,
            Purpose::Heuristic => 3,
            Purpose::OracleSampling => 4,
            Purpose::Baseline => 5,
            Purpose::Fdgvi => 6,
            Purpose::DataSplit => 7,
            Purpose::DataSynth => 8,
        }
    }
}

pub fn stream(seed: u64, purpose: Purpose) -> Stream {
    with_id(seed, purpose.id())
}

/// The diffusion stream of particle `n`.
pub fn particle_stream(seed: u64, n: usize) -> Stream {
    with_id(seed, PARTICLE_BASE + n as u64)
}

/// A numbered sub-stream of a purpose, e.g. the i-th baseline resample.
pub fn indexed_stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    with_id(seed, purpose.id() + ((index + 1) << 8))
}

fn with_id(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
