//! Residual vector quantization of continuous frame features.
//!
//! A residual quantizer encodes each frame with a small cascade of codebooks:
//! stage 1 quantizes the frame itself, stage 2 quantizes what stage 1 missed,
//! and so on. Decoding sums the selected codewords. The per-stage residual
//! energy that encoding leaves behind doubles as a confidence signal — frames
//! the codec represents poorly are exactly the frames a downstream denoiser
//! should treat with suspicion — so [`rvq_encode`] returns it alongside the
//! token grid as a [`QuantErrorGrid`].
//!
//! Codebooks are trained stage by stage with k-means (k-means++ seeding,
//! then a fixed number of Lloyd iterations) on the residuals the previous
//! stages leave over the training corpus. Training is deterministic for a
//! given corpus, configuration, and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{QuantErrorGrid, TokenGrid};
use crate::tensor::{mm_abt, Tensor};

/// Hyper-parameters for [`train_rvq`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqTrainConfig {
    /// Number of cascaded quantization stages.
    pub stages: usize,
    /// Codewords per stage. Every stage uses the same size.
    pub codebook_size: usize,
    /// Lloyd iterations per stage after k-means++ seeding.
    pub iterations: usize,
}

impl Default for RvqTrainConfig {
    fn default() -> Self {
        Self { stages: 4, codebook_size: 64, iterations: 25 }
    }
}

impl RvqTrainConfig {
    /// Checks that the configuration describes a usable quantizer.
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("rvq needs at least one stage"));
        }
        if self.codebook_size < 2 {
            return Err(Error::config(format!(
                "rvq codebook size must be at least 2, got {}",
                self.codebook_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("rvq training needs at least one iteration"));
        }
        Ok(())
    }
}

/// Trained codebooks for every stage of a residual quantizer.
///
/// Stage `c` holds a `[codebook_size, dim]` matrix whose rows are codewords.
/// All stages share the same size and dimensionality.
#[derive(Debug, Clone)]
pub struct Codebooks {
    stages: Vec<Tensor>,
}

impl Codebooks {
    /// Builds codebooks from per-stage codeword matrices, validating that the
    /// stages agree on shape and contain only finite values.
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("codebooks need at least one stage"));
        }
        let (size, dim) = stages[0].expect_2d("codebook stage")?;
        if size < 2 {
            return Err(Error::config(format!(
                "codebook size must be at least 2, got {size}"
            )));
        }
        for (c, stage) in stages.iter().enumerate() {
            let (s, d) = stage.expect_2d("codebook stage")?;
            if (s, d) != (size, dim) {
                return Err(Error::shape(format!(
                    "codebook stage {c} is {s}x{d}, expected {size}x{dim}"
                )));
            }
            if !stage.is_all_finite() {
                return Err(Error::numeric(format!(
                    "codebook stage {c} contains a non-finite value"
                )));
            }
        }
        Ok(Self { stages })
    }

    /// Number of cascaded stages.
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Codewords per stage.
    pub fn codebook_size(&self) -> usize {
        self.stages[0].rows()
    }

    /// Dimensionality of each codeword.
    pub fn dim(&self) -> usize {
        self.stages[0].cols()
    }

    /// Codeword matrix for one stage.
    pub fn stage(&self, c: usize) -> &Tensor {
        &self.stages[c]
    }

    /// All stage matrices, in cascade order.
    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    /// The token id reserved for masked positions: one past the last valid
    /// codeword index, shared by every stage.
    pub fn mask_token(&self) -> u32 {
        self.codebook_size() as u32
    }
}

/// For each row of `rows`, the index of the nearest codeword in `cb`
/// (squared Euclidean distance, ties broken toward the lowest index).
///
/// Distances are compared through the expansion `‖c‖² − 2·r·c`, which drops
/// the shared `‖r‖²` term and lets the dot products run through one matrix
/// multiply for the whole batch.
fn nearest_codewords(rows: &[f64], n: usize, dim: usize, cb: &Tensor) -> Vec<u32> {
    let size = cb.rows();
    let scores = mm_abt(rows, cb.data(), n, dim, size);
    let norms: Vec<f64> = cb
        .data()
        .chunks_exact(dim)
        .map(|w| w.iter().map(|v| v * v).sum())
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &scores[i * size..(i + 1) * size];
        let mut best = 0usize;
        let mut best_d = norms[0] - 2.0 * row[0];
        for (j, (&norm, &score)) in norms.iter().zip(row).enumerate().skip(1) {
            let d = norm - 2.0 * score;
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        out.push(best as u32);
    }
    out
}

/// Squared Euclidean distance between a row and a codeword, computed by
/// direct subtraction (no expansion) so downstream identities hold to
/// round-off.
fn dist2(row: &[f64], word: &[f64]) -> f64 {
    row.iter().zip(word).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Trains one stage's codebook with k-means++ seeding and `iterations` Lloyd
/// steps over `rows`. Clusters that come up empty are re-seeded from the
/// points farthest from their assigned centroid.
fn train_stage(
    rows: &[f64],
    n: usize,
    dim: usize,
    size: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    // k-means++ seeding: first center uniform, then each next center drawn
    // with probability proportional to squared distance from the chosen set.
    let mut centers = vec![0.0f64; size * dim];
    let first = rng.gen_range(0..n);
    centers[..dim].copy_from_slice(&rows[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist2(&rows[i * dim..(i + 1) * dim], &centers[..dim]))
        .collect();
    for k in 1..size {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Fewer distinct points than codewords: fall back to a uniform
            // draw; duplicate centers are harmless once error is zero.
            rng.gen_range(0..n)
        };
        let word = &rows[pick * dim..(pick + 1) * dim];
        centers[k * dim..(k + 1) * dim].copy_from_slice(word);
        for i in 0..n {
            let d = dist2(&rows[i * dim..(i + 1) * dim], word);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut cb = Tensor::from_vec(&[size, dim], centers).expect("seeded codebook shape");
    let mut sums = vec![0.0f64; size * dim];
    let mut counts = vec![0usize; size];
    for _ in 0..iterations {
        let assign = nearest_codewords(rows, n, dim, &cb);
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (i, &a) in assign.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim]
                .iter_mut()
                .zip(&rows[i * dim..(i + 1) * dim])
            {
                *s += v;
            }
        }
        let empties: Vec<usize> = (0..size).filter(|&k| counts[k] == 0).collect();
        // Re-seed empty clusters from the rows their nearest centroid
        // explains worst, farthest first; ties fall to the lower row index.
        let mut reseed = Vec::with_capacity(empties.len());
        if !empties.is_empty() {
            let mut by_dist: Vec<(usize, f64)> = (0..n)
                .map(|i| {
                    let a = assign[i] as usize;
                    let d = dist2(
                        &rows[i * dim..(i + 1) * dim],
                        &cb.data()[a * dim..(a + 1) * dim],
                    );
                    (i, d)
                })
                .collect();
            by_dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            reseed.extend(by_dist.iter().take(empties.len()).map(|&(i, _)| i));
        }
        let data = cb.data_mut();
        for k in 0..size {
            if counts[k] > 0 {
                let inv = 1.0 / counts[k] as f64;
                for (w, s) in data[k * dim..(k + 1) * dim]
                    .iter_mut()
                    .zip(&sums[k * dim..(k + 1) * dim])
                {
                    *w = s * inv;
                }
            }
        }
        for (slot, &row) in empties.iter().zip(&reseed) {
            data[slot * dim..(slot + 1) * dim].copy_from_slice(&rows[row * dim..(row + 1) * dim]);
        }
    }
    cb
}

/// Trains residual codebooks on a corpus of continuous frames.
///
/// Stage 1 is fit to the frames themselves; each later stage is fit to the
/// residuals left by the stages before it, computed with the same greedy
/// nearest-codeword rule that [`rvq_encode`] uses. The corpus must contain at
/// least `codebook_size` frames. Identical inputs, configuration, and seed
/// produce bit-identical codebooks.
pub fn train_rvq(frames: &Tensor, cfg: &RvqTrainConfig, seed: u64) -> Result<Codebooks> {
    cfg.validate()?;
    let (n, dim) = frames.expect_2d("rvq training frames")?;
    if !frames.is_all_finite() {
        return Err(Error::numeric("rvq training frames contain a non-finite value"));
    }
    if n < cfg.codebook_size {
        return Err(Error::data(format!(
            "rvq training corpus has {n} frames but needs at least {} (one per codeword)",
            cfg.codebook_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = frames.data().to_vec();
    let mut stages = Vec::with_capacity(cfg.stages);
    for _ in 0..cfg.stages {
        let cb = train_stage(&residual, n, dim, cfg.codebook_size, cfg.iterations, &mut rng);
        let assign = nearest_codewords(&residual, n, dim, &cb);
        for (i, &a) in assign.iter().enumerate() {
            let word = &cb.data()[a as usize * dim..(a as usize + 1) * dim];
            for (r, w) in residual[i * dim..(i + 1) * dim].iter_mut().zip(word) {
                *r -= w;
            }
        }
        stages.push(cb);
    }
    Codebooks::new(stages)
}

/// Encodes frames to a token grid plus the per-stage quantization error.
///
/// Encoding is greedy: stage `c` picks the codeword nearest the residual the
/// earlier stages left (squared Euclidean distance, ties toward the lowest
/// index), subtracts it, and records the mean squared residual that remains,
/// `Δ(ℓ,c) = ‖r − chosen‖² / dim`. The final stage's error therefore equals
/// the mean squared reconstruction error of [`rvq_decode`] on the result.
pub fn rvq_encode(frames: &Tensor, cb: &Codebooks) -> Result<(TokenGrid, QuantErrorGrid)> {
    let (n, dim) = frames.expect_2d("rvq frames")?;
    if dim != cb.dim() {
        return Err(Error::shape(format!(
            "frames have width {dim} but codebooks expect {}",
            cb.dim()
        )));
    }
    if !frames.is_all_finite() {
        return Err(Error::numeric("rvq frames contain a non-finite value"));
    }
    let stages = cb.stage_count();
    let mut residual = frames.data().to_vec();
    let mut tokens = vec![0u32; n * stages];
    let mut deltas = vec![0.0f64; n * stages];
    for c in 0..stages {
        let assign = nearest_codewords(&residual, n, dim, cb.stage(c));
        for (i, &a) in assign.iter().enumerate() {
            let word = &cb.stage(c).data()[a as usize * dim..(a as usize + 1) * dim];
            let row = &mut residual[i * dim..(i + 1) * dim];
            let mut sq = 0.0;
            for (r, w) in row.iter_mut().zip(word) {
                *r -= w;
                sq += *r * *r;
            }
            tokens[i * stages + c] = a;
            deltas[i * stages + c] = sq / dim as f64;
        }
    }
    Ok((
        TokenGrid::from_vec(n, stages, tokens)?,
        QuantErrorGrid::from_vec(n, stages, deltas)?,
    ))
}

/// Reconstructs continuous frames from a token grid by summing the selected
/// codeword from every stage.
///
/// Every token must be a valid codeword index; in particular the reserved
/// mask id cannot be decoded — callers must resolve masked positions first.
pub fn rvq_decode(tokens: &TokenGrid, cb: &Codebooks) -> Result<Tensor> {
    if tokens.stages() != cb.stage_count() {
        return Err(Error::shape(format!(
            "token grid has {} stages but codebooks have {}",
            tokens.stages(),
            cb.stage_count()
        )));
    }
    let size = cb.codebook_size() as u32;
    let dim = cb.dim();
    let n = tokens.frames();
    let mut out = vec![0.0f64; n * dim];
    for l in 0..n {
        for c in 0..tokens.stages() {
            let v = tokens.get(l, c);
            if v >= size {
                return Err(if v == cb.mask_token() {
                    Error::vocab(format!("cannot decode masked token at frame {l} stage {c}"))
                } else {
                    Error::vocab(format!(
                        "token {v} at frame {l} stage {c} is out of range for codebook size {size}"
                    ))
                });
            }
            let word = &cb.stage(c).data()[v as usize * dim..(v as usize + 1) * dim];
            for (o, w) in out[l * dim..(l + 1) * dim].iter_mut().zip(word) {
                *o += w;
            }
        }
    }
    Tensor::from_vec(&[n, dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_stage_toy() -> Codebooks {
        let s1 = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let s2 = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 0.5]).unwrap();
        Codebooks::new(vec![s1, s2]).unwrap()
    }

    #[test]
    fn toy_frame_tokens_errors_and_reconstruction() {
        let cb = two_stage_toy();
        let frame = Tensor::from_vec(&[1, 2], vec![1.0, 0.4]).unwrap();
        let (tokens, delta) = rvq_encode(&frame, &cb).unwrap();
        assert_eq!(tokens.data(), &[1, 1]);
        // Stage 1 leaves residual (0, 0.4); stage 2 leaves (0, 0.4 - 0.5).
        assert_eq!(delta.get(0, 0), (0.4 * 0.4) / 2.0);
        assert_eq!(delta.get(0, 1), ((0.4 - 0.5) * (0.4 - 0.5)) / 2.0);
        assert!((delta.get(0, 0) - 0.08).abs() < 1e-15);
        assert!((delta.get(0, 1) - 0.005).abs() < 1e-15);

        let recon = rvq_decode(&tokens, &cb).unwrap();
        assert_eq!(recon.data(), &[1.0, 0.5]);
        let mse = recon
            .data()
            .iter()
            .zip(frame.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 2.0;
        assert_eq!(mse, delta.get(0, 1));
    }

    #[test]
    fn exact_codeword_has_zero_error() {
        let cb = two_stage_toy();
        let frame = Tensor::from_vec(&[1, 2], vec![1.0, 0.5]).unwrap();
        let (tokens, delta) = rvq_encode(&frame, &cb).unwrap();
        assert_eq!(tokens.data(), &[1, 1]);
        assert_eq!(delta.get(0, 0), 0.125);
        assert_eq!(delta.get(0, 1), 0.0);
    }

    #[test]
    fn distance_ties_pick_lowest_index() {
        // Duplicate codewords: indices 0 and 1 are equally near everything.
        let dup = Tensor::from_vec(&[2, 2], vec![0.3, -0.2, 0.3, -0.2]).unwrap();
        let cb = Codebooks::new(vec![dup]).unwrap();
        let frame = Tensor::from_vec(&[1, 2], vec![5.0, 5.0]).unwrap();
        let (tokens, _) = rvq_encode(&frame, &cb).unwrap();
        assert_eq!(tokens.get(0, 0), 0);

        // Equidistant distinct codewords also resolve to the lower index.
        let sym = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let cb = Codebooks::new(vec![sym]).unwrap();
        let frame = Tensor::from_vec(&[1, 2], vec![0.5, 0.0]).unwrap();
        let (tokens, _) = rvq_encode(&frame, &cb).unwrap();
        assert_eq!(tokens.get(0, 0), 0);
    }

    #[test]
    fn final_stage_error_matches_reconstruction_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 16;
        let stages: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[8, dim], 0.7, &mut rng)).collect();
        let cb = Codebooks::new(stages).unwrap();
        let frames = Tensor::randn(&[1000, dim], 1.0, &mut rng);
        let (tokens, delta) = rvq_encode(&frames, &cb).unwrap();
        let recon = rvq_decode(&tokens, &cb).unwrap();
        for l in 0..1000 {
            let mse = (0..dim)
                .map(|j| {
                    let d = frames.data()[l * dim + j] - recon.data()[l * dim + j];
                    d * d
                })
                .sum::<f64>()
                / dim as f64;
            assert!(
                (mse - delta.get(l, 3)).abs() < 1e-12,
                "frame {l}: mse {mse} vs final-stage error {}",
                delta.get(l, 3)
            );
        }
    }

    #[test]
    fn zero_codeword_makes_error_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 8;
        let stages: Vec<Tensor> = (0..4)
            .map(|_| {
                let mut t = Tensor::randn(&[6, dim], 0.5, &mut rng);
                t.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
                t
            })
            .collect();
        let cb = Codebooks::new(stages).unwrap();
        let frames = Tensor::randn(&[200, dim], 1.0, &mut rng);
        let (_, delta) = rvq_encode(&frames, &cb).unwrap();
        for l in 0..200 {
            for c in 1..4 {
                assert!(
                    delta.get(l, c) <= delta.get(l, c - 1) + 1e-12,
                    "frame {l}: error rose from {} to {} at stage {c}",
                    delta.get(l, c - 1),
                    delta.get(l, c)
                );
            }
        }
    }

    #[test]
    fn decode_rejects_masked_and_out_of_range_tokens() {
        let cb = two_stage_toy();
        let masked = TokenGrid::from_vec(1, 2, vec![1, cb.mask_token()]).unwrap();
        let err = rvq_decode(&masked, &cb).unwrap_err();
        assert_eq!(err.category(), "vocab");
        assert!(err.to_string().contains("cannot decode masked token"));

        let wild = TokenGrid::from_vec(1, 2, vec![7, 0]).unwrap();
        let err = rvq_decode(&wild, &cb).unwrap_err();
        assert_eq!(err.category(), "vocab");
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn single_stage_kmeans_recovers_distinct_repeated_corpus() {
        // Eight well-separated vectors, each repeated 25 times: single-stage
        // training must place one codeword on every distinct vector.
        let dim = 4;
        let size = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let protos = Tensor::randn(&[size, dim], 2.0, &mut rng);
        let mut data = Vec::with_capacity(size * 25 * dim);
        for rep in 0..25 {
            for k in 0..size {
                // Interleave so seeding sees variety early on.
                let _ = rep;
                data.extend_from_slice(&protos.data()[k * dim..(k + 1) * dim]);
            }
        }
        let frames = Tensor::from_vec(&[size * 25, dim], data).unwrap();
        let cfg = RvqTrainConfig { stages: 1, codebook_size: size, iterations: 25 };
        let cb = train_rvq(&frames, &cfg, 7).unwrap();
        let (_, delta) = rvq_encode(&frames, &cb).unwrap();
        let mean: f64 = delta.data().iter().sum::<f64>() / delta.data().len() as f64;
        assert!(mean < 1e-10, "mean quantization error {mean} after convergence");
    }

    #[test]
    fn later_stages_reduce_mean_error_on_training_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = Tensor::randn(&[500, 8], 1.0, &mut rng);
        let cfg = RvqTrainConfig { stages: 4, codebook_size: 16, iterations: 25 };
        let cb = train_rvq(&frames, &cfg, 9).unwrap();
        let (_, delta) = rvq_encode(&frames, &cb).unwrap();
        let mut prev = f64::INFINITY;
        for c in 0..4 {
            let mean: f64 =
                (0..500).map(|l| delta.get(l, c)).sum::<f64>() / 500.0;
            assert!(
                mean <= prev + 1e-12,
                "mean error rose from {prev} to {mean} at stage {c}"
            );
            assert!(mean > 0.0, "stage {c} cannot be exact on random data");
            prev = mean;
        }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = Tensor::randn(&[100, 6], 1.0, &mut rng);
        let cfg = RvqTrainConfig { stages: 2, codebook_size: 8, iterations: 10 };
        let a = train_rvq(&frames, &cfg, 123).unwrap();
        let b = train_rvq(&frames, &cfg, 123).unwrap();
        for c in 0..2 {
            assert_eq!(a.stage(c).data(), b.stage(c).data());
        }
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = Tensor::randn(&[7, 4], 1.0, &mut rng);
        let cfg = RvqTrainConfig { stages: 1, codebook_size: 8, iterations: 5 };
        let err = train_rvq(&frames, &cfg, 0).unwrap_err();
        assert_eq!(err.category(), "data");

        let bad_cfg = RvqTrainConfig { stages: 0, ..RvqTrainConfig::default() };
        let frames = Tensor::randn(&[100, 4], 1.0, &mut rng);
        assert_eq!(train_rvq(&frames, &bad_cfg, 0).unwrap_err().category(), "config");

        let mut nan = Tensor::randn(&[100, 4], 1.0, &mut rng);
        nan.data_mut()[5] = f64::NAN;
        let cfg = RvqTrainConfig { stages: 1, codebook_size: 8, iterations: 5 };
        assert_eq!(train_rvq(&nan, &cfg, 0).unwrap_err().category(), "numeric");
    }

    #[test]
    fn encode_rejects_mismatched_width() {
        let cb = two_stage_toy();
        let frames = Tensor::zeros(&[3, 5]);
        assert_eq!(rvq_encode(&frames, &cb).unwrap_err().category(), "shape");
    }

    #[test]
    fn codebook_validation_catches_defects() {
        assert_eq!(Codebooks::new(vec![]).unwrap_err().category(), "config");

        let one = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(Codebooks::new(vec![one]).unwrap_err().category(), "config");

        let a = Tensor::zeros(&[4, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert_eq!(Codebooks::new(vec![a, b]).unwrap_err().category(), "shape");

        let mut nan = Tensor::zeros(&[4, 3]);
        nan.data_mut()[0] = f64::INFINITY;
        assert_eq!(Codebooks::new(vec![nan]).unwrap_err().category(), "numeric");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// With a zero codeword available at every stage, per-frame error can
        /// never increase across stages, and the final stage's error always
        /// matches the decode reconstruction error.
        #[test]
        fn residual_cascade_invariants(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 5;
            let stages: Vec<Tensor> = (0..3)
                .map(|_| {
                    let mut t = Tensor::randn(&[4, dim], 0.8, &mut rng);
                    t.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
                    t
                })
                .collect();
            let cb = Codebooks::new(stages).unwrap();
            let frames = Tensor::randn(&[20, dim], 1.0, &mut rng);
            let (tokens, delta) = rvq_encode(&frames, &cb).unwrap();
            let recon = rvq_decode(&tokens, &cb).unwrap();
            for l in 0..20 {
                for c in 1..3 {
                    prop_assert!(delta.get(l, c) <= delta.get(l, c - 1) + 1e-12);
                }
                let mse = (0..dim)
                    .map(|j| {
                        let d = frames.data()[l * dim + j] - recon.data()[l * dim + j];
                        d * d
                    })
                    .sum::<f64>() / dim as f64;
                prop_assert!((mse - delta.get(l, 2)).abs() < 1e-12);
            }
        }
    }
}
