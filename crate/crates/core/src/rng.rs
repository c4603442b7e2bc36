//! Counter-based random streams.
//!
//! One root seed per run expands into independent ChaCha streams keyed by
//! `(purpose, cycle, lane)`. Draws in one stream never shift draws in
//! another, so reordering or parallelising work keeps results fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    InitialPick = 2,
    /// MC-dropout masks used for acquisition scoring.
    Dropout = 3,
    Gumbel = 4,
    /// Dropout masks applied while fitting.
    TrainDropout = 5,
    Subsample = 6,
    Split = 7,
    Synthetic = 8,
    Verification = 9,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Purpose, cycle: usize) -> Stream {
        self.lane(purpose, cycle, 0)
    }

    /// Sub-stream for one lane (e.g. one sample index) of a purpose/cycle.
    pub fn lane(&self, purpose: Purpose, cycle: usize, lane: usize) -> Stream {
        debug_assert!(cycle < 1 << 24 && lane < 1 << 32);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(
            ((purpose as u64) << 56)
                | ((cycle as u64 & 0xFF_FFFF) << 32)
                | (lane as u64 & 0xFFFF_FFFF),
        );
        rng
    }
}
