//! Seed derivation for every stochastic stage.
//!
//! Each stage draws from its own integer stream so that stages never share
//! a generator: `seed_from_u64` expands the integer through a splitmix64
//! round, so *distinct* integers are all that independence requires. Streams
//! are spaced 2^32 apart, which keeps them disjoint for any per-stream index
//! below 2^32 — comfortably beyond desk scale. Train and validation splits
//! use separate streams, which is what makes their utterance seeds disjoint.

/// One stochastic stage of the pipeline.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    /// Clean-utterance synthesis, train split (index = utterance).
    GenTrain = 0,
    /// Clean-utterance synthesis, validation split.
    GenVal = 1,
    /// Additive-noise sequences, train split.
    NoiseTrain = 2,
    /// Additive-noise sequences, validation split.
    NoiseVal = 3,
    /// Per-utterance SNR draws, train split.
    SnrTrain = 4,
    /// Per-utterance SNR draws, validation split.
    SnrVal = 5,
    /// Codebook fitting (frame subsampling and k-means seeding).
    RvqFit = 6,
    /// Model parameter initialization.
    ModelInit = 7,
    /// Per-step batch composition (index = step).
    TrainBatch = 8,
    /// Per-example training masks (index = step · batch + slot).
    TrainMask = 9,
    /// Per-utterance inference randomness (random mask initialization).
    Infer = 10,
}

/// The seed for `stream` item `index` under the run seed `base`.
pub fn stream_seed(base: u64, stream: Stream, index: u64) -> u64 {
    base.wrapping_add((stream as u64) << 32).wrapping_add(index)
}
