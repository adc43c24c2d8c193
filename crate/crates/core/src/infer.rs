//! The reverse enhancement process.
//!
//! Enhancement starts from the continuous module's re-tokenized estimate
//! `X̂^tok`, masks the positions the initialization strategy distrusts, and
//! then runs the discrete module for `N` iterations: predict distributions
//! for every position, commit the argmax at masked positions, and re-mask
//! the least confident of them down to the schedule's count for the next
//! time step. The final grid is decoded by the frozen codec and synthesized
//! back to a waveform.
//!
//! The continuous and semantic modules run **once** per utterance, outside
//! the loop; only the discrete module runs per iteration. With `N = 1` the
//! whole process is a single forward pass, which is the default mode.

use crate::error::{Error, Result};
use crate::grid::{MaskGrid, TokenGrid};
use crate::masking::{
    apply_mask, mask_count, quant_error_init, random_mask, remask_low_confidence, ScheduleParams,
};
use crate::model::{DiscreteOut, Model};
use crate::rvq::{rvq_decode, Codebooks};
use crate::signal::{analyze, synthesize, SignalConfig, Waveform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How the initial mask is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Mask the scheduled number of positions with the largest quantization
    /// error from the continuous module's re-tokenization.
    QuantError,
    /// Mask the scheduled number of positions uniformly at random.
    Random,
    /// Mask every position; forces `t = 1.0`.
    Full,
}

/// Which positions are eligible for re-masking between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemaskCandidates {
    /// Only positions still masked at the current iteration's input; a
    /// position that has been committed is never re-opened.
    Restricted,
    /// Every position, but committed positions are ranked at infinite
    /// confidence so they are chosen only after all open candidates.
    All,
}

/// Settings of one reverse-process run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    /// Starting progress `T` of the reverse process, in `(0, 1]`. Controls
    /// how many positions the initial mask covers.
    pub t: f64,
    /// Number of reverse iterations `N`; each spans `Δt = T/N`.
    pub steps: usize,
    pub init: InitStrategy,
    pub candidates: RemaskCandidates,
    /// Rank re-masking by the critic head's score instead of the
    /// predictor's own max probability. Requires a model with a critic.
    pub critic_confidence: bool,
    /// Seed for the random initialization strategy; unused otherwise.
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            t: 0.1,
            steps: 1,
            init: InitStrategy::QuantError,
            candidates: RemaskCandidates::Restricted,
            critic_confidence: false,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::config(format!(
                "inference: starting progress {} outside (0, 1]",
                self.t
            )));
        }
        if self.steps == 0 {
            return Err(Error::config(
                "inference: at least one reverse step is required".to_string(),
            ));
        }
        if self.init == InitStrategy::Full && self.t != 1.0 {
            return Err(Error::config(format!(
                "inference: fully-masked initialization requires t = 1.0, got {}",
                self.t
            )));
        }
        Ok(())
    }
}

/// One recorded reverse iteration.
#[derive(Debug, Clone)]
pub struct TraceStep {
    /// Progress value this iteration ran at.
    pub t: f64,
    /// Positions still masked after this iteration's re-masking; 0 for the
    /// final iteration.
    pub masked: usize,
    /// The token grid handed to the next iteration (mask ids at positions
    /// still masked); after the final iteration, the fully committed grid.
    pub grid: TokenGrid,
    /// Mean confidence over the positions that were open (masked) at this
    /// iteration's input; 1.0 when none were.
    pub mean_confidence: f64,
}

/// Per-iteration observability of one reverse-process run.
#[derive(Debug, Clone, Default)]
pub struct ReverseTrace {
    pub steps: Vec<TraceStep>,
}

impl ReverseTrace {
    /// Masked-position counts after each iteration, in run order.
    pub fn masked_counts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.masked).collect()
    }
}

/// The `(t, masked count after the iteration at t)` pairs a run with the
/// given settings follows. `t` descends `T, T−Δt, …, Δt` and the count
/// after each iteration is `mask_count(t − Δt)`, which reaches 0 exactly at
/// the final iteration.
pub fn reverse_schedule(t: f64, steps: usize, sched: ScheduleParams) -> Result<Vec<(f64, usize)>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::config(format!(
            "reverse schedule: starting progress {t} outside (0, 1]"
        )));
    }
    if steps == 0 {
        return Err(Error::config(
            "reverse schedule: at least one step is required".to_string(),
        ));
    }
    let n = steps as f64;
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let t_here = t * (steps - i) as f64 / n;
        let t_next = t * (steps - i - 1) as f64 / n;
        out.push((t_here, mask_count(t_next, sched)?));
    }
    Ok(out)
}

/// Runs the iteration loop on an explicit base grid, initial mask, and
/// predictor. [`Enhancer::enhance`] wires this to a trained model; tests
/// drive it with synthetic predictors to pin the loop mechanics down
/// independently of any model.
///
/// `vocab` is the number of token classes per stage; the mask id is `vocab`
/// itself, one past the last real token. The base grid must be mask-free
/// and the initial mask must cover exactly `mask_count(cfg.t)` positions.
pub fn reverse_process<F>(
    base: &TokenGrid,
    init_mask: &MaskGrid,
    cfg: &InferenceConfig,
    sched: ScheduleParams,
    vocab: u32,
    mut predict: F,
) -> Result<(TokenGrid, ReverseTrace)>
where
    F: FnMut(&TokenGrid) -> Result<DiscreteOut>,
{
    cfg.validate()?;
    if base.frames() != sched.frames || base.stages() != sched.stages {
        return Err(Error::shape(format!(
            "reverse process: base grid {}x{} vs schedule {}x{}",
            base.frames(),
            base.stages(),
            sched.frames,
            sched.stages
        )));
    }
    if init_mask.frames() != sched.frames || init_mask.stages() != sched.stages {
        return Err(Error::shape(format!(
            "reverse process: initial mask {}x{} vs schedule {}x{}",
            init_mask.frames(),
            init_mask.stages(),
            sched.frames,
            sched.stages
        )));
    }
    base.check_below(vocab)?;
    let start = mask_count(cfg.t, sched)?;
    if init_mask.popcount() != start {
        return Err(Error::config(format!(
            "reverse process: initial mask covers {} positions, the schedule at t = {} requires {}",
            init_mask.popcount(),
            cfg.t,
            start
        )));
    }

    let schedule = reverse_schedule(cfg.t, cfg.steps, sched)?;
    let mut masked = init_mask.clone();
    let mut grid = apply_mask(base, &masked, vocab)?;
    let mut trace = ReverseTrace::default();

    for (i, &(t_here, k_next)) in schedule.iter().enumerate() {
        let out = predict(&grid)?;
        check_predictor_output(&out, sched, vocab, cfg.critic_confidence, i, t_here)?;
        let confidence = confidence_values(&out, sched, cfg.critic_confidence);

        let open = masked.set_positions();
        let mean_confidence = if open.is_empty() {
            1.0
        } else {
            open.iter().map(|&p| confidence[p]).sum::<f64>() / open.len() as f64
        };

        let filled = out.p0.fill_predictions(&grid, &masked)?;
        let last = i + 1 == cfg.steps;
        if last {
            grid = filled;
            masked = MaskGrid::zeros(sched.frames, sched.stages)?;
        } else {
            let next_mask = match cfg.candidates {
                RemaskCandidates::Restricted => {
                    remask_low_confidence(&confidence, &masked, k_next)?
                }
                RemaskCandidates::All => {
                    // Committed positions rank at infinite confidence, so
                    // they are re-opened only after every open candidate.
                    let mut ranked = confidence.clone();
                    for (pos, &open) in masked.bits().iter().enumerate() {
                        if !open {
                            ranked[pos] = f64::INFINITY;
                        }
                    }
                    let everything = MaskGrid::ones(sched.frames, sched.stages)?;
                    remask_low_confidence(&ranked, &everything, k_next)?
                }
            };
            grid = apply_mask(&filled, &next_mask, vocab)?;
            masked = next_mask;
        }
        trace.steps.push(TraceStep {
            t: t_here,
            masked: masked.popcount(),
            grid: grid.clone(),
            mean_confidence,
        });
    }
    Ok((grid, trace))
}

/// Rejects non-finite predictor output, naming the iteration it appeared in.
fn check_predictor_output(
    out: &DiscreteOut,
    sched: ScheduleParams,
    vocab: u32,
    critic_confidence: bool,
    iteration: usize,
    t: f64,
) -> Result<()> {
    let p0 = &out.p0;
    if p0.frames() != sched.frames || p0.stages() != sched.stages || p0.classes() != vocab as usize
    {
        return Err(Error::shape(format!(
            "reverse process: predictor emitted {}x{} distributions over {} classes, expected {}x{} over {}",
            p0.frames(),
            p0.stages(),
            p0.classes(),
            sched.frames,
            sched.stages,
            vocab
        )));
    }
    if !p0.probs().data().iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite token distribution at reverse iteration {iteration} (t = {t})"
        )));
    }
    if critic_confidence {
        let Some(logits) = &out.critic_logits else {
            return Err(Error::config(
                "critic confidence requested but the predictor has no critic head".to_string(),
            ));
        };
        let (rows, cols) = logits.expect_2d("critic logits")?;
        if rows != sched.frames || cols != sched.stages {
            return Err(Error::shape(format!(
                "reverse process: critic logits {rows}x{cols}, expected {}x{}",
                sched.frames, sched.stages
            )));
        }
        if !logits.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite critic score at reverse iteration {iteration} (t = {t})"
            )));
        }
    }
    Ok(())
}

/// Per-position confidence in row-major grid order. The default source is
/// the predicted distribution's maximum; with critic confidence it is the
/// critic's probability that the position holds a real (unmasked) token.
fn confidence_values(out: &DiscreteOut, sched: ScheduleParams, critic: bool) -> Vec<f64> {
    let mut values = Vec::with_capacity(sched.positions());
    if critic {
        let logits = out
            .critic_logits
            .as_ref()
            .expect("checked by check_predictor_output");
        // The critic is trained to score 1 at masked positions, so a *low*
        // masked-probability is high confidence: sigmoid(-logit).
        values.extend(logits.data().iter().map(|&z| 1.0 / (1.0 + z.exp())));
    } else {
        for l in 0..sched.frames {
            for c in 0..sched.stages {
                values.push(out.p0.confidence(l, c));
            }
        }
    }
    values
}

/// A model, its codec, and the frame settings bound together for
/// enhancement. Construction checks they are dimensionally consistent;
/// after that every method is pure and utterances may be processed in
/// parallel on shared references.
pub struct Enhancer<'a> {
    model: &'a Model,
    codebooks: &'a Codebooks,
    signal: &'a SignalConfig,
}

impl<'a> Enhancer<'a> {
    pub fn new(model: &'a Model, codebooks: &'a Codebooks, signal: &'a SignalConfig) -> Result<Self> {
        signal.validate()?;
        let cfg = model.config();
        if codebooks.stage_count() != cfg.stages || codebooks.codebook_size() != cfg.codebook_size {
            return Err(Error::config(format!(
                "enhancer: codec has {} stages of {} codewords, model expects {} of {}",
                codebooks.stage_count(),
                codebooks.codebook_size(),
                cfg.stages,
                cfg.codebook_size
            )));
        }
        if codebooks.dim() != signal.d_emb || cfg.frame_width != signal.d_emb {
            return Err(Error::config(format!(
                "enhancer: frame width {} (codec {}, model {}) does not match throughout",
                signal.d_emb,
                codebooks.dim(),
                cfg.frame_width
            )));
        }
        Ok(Self { model, codebooks, signal })
    }

    /// Full enhancement of one noisy utterance: reverse process, decode,
    /// synthesize.
    pub fn enhance(&self, noisy: &Waveform, cfg: &InferenceConfig) -> Result<(Waveform, ReverseTrace)> {
        let (tokens, trace) = self.enhance_tokens(noisy, cfg)?;
        Ok((self.decode(&tokens)?, trace))
    }

    /// The reverse process of [`Enhancer::enhance`], stopping at the final
    /// token grid. Evaluation uses this to score tokens without the lossy
    /// round trip through synthesis.
    pub fn enhance_tokens(
        &self,
        noisy: &Waveform,
        cfg: &InferenceConfig,
    ) -> Result<(TokenGrid, ReverseTrace)> {
        cfg.validate()?;
        let mcfg = self.model.config();
        if cfg.critic_confidence && !mcfg.critic_enabled {
            return Err(Error::config(
                "critic confidence requested but the model has no critic head".to_string(),
            ));
        }
        let frames = self.frame_input(noisy)?;
        let l = frames.rows();
        let sched = ScheduleParams::new(l, mcfg.stages)?;
        let vocab = mcfg.mask_token();

        // The continuous and semantic streams are computed once and reused
        // by every iteration.
        let (base, delta, e_cont) = if mcfg.continuous_enabled {
            let co = self.model.continuous_forward(&frames, self.codebooks)?;
            (co.tokens, Some(co.delta), co.cond)
        } else {
            if cfg.init != InitStrategy::Full {
                return Err(Error::config(
                    "inference without the continuous module requires fully-masked initialization"
                        .to_string(),
                ));
            }
            // Fully-masked initialization overwrites every base token, so
            // the placeholder values never surface.
            let base = TokenGrid::filled(l, mcfg.stages, 0)?;
            (base, None, self.model.zero_conditioning(l))
        };
        let e_sem = if mcfg.semantic_enabled {
            self.model.semantic_forward(&frames)?.cond
        } else {
            self.model.zero_conditioning(l)
        };

        let init = match cfg.init {
            InitStrategy::Full => MaskGrid::ones(l, mcfg.stages)?,
            InitStrategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                random_mask(cfg.t, sched, &mut rng)?
            }
            InitStrategy::QuantError => {
                let d = delta.as_ref().ok_or_else(|| {
                    Error::config(
                        "quantization-error initialization needs the continuous module".to_string(),
                    )
                })?;
                quant_error_init(d, cfg.t, sched)?
            }
        };

        reverse_process(&base, &init, cfg, sched, vocab, |grid| {
            self.model.discrete_forward(grid, &e_cont, &e_sem)
        })
    }

    /// Enhancement that bypasses the discrete module entirely: the
    /// continuous module's re-tokenization is decoded as-is.
    pub fn continuous_only_enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        self.decode(&self.continuous_only_tokens(noisy)?)
    }

    /// The token grid behind [`Enhancer::continuous_only_enhance`].
    pub fn continuous_only_tokens(&self, noisy: &Waveform) -> Result<TokenGrid> {
        let frames = self.frame_input(noisy)?;
        Ok(self.model.continuous_forward(&frames, self.codebooks)?.tokens)
    }

    /// Decodes a mask-free token grid to a waveform through the codec and
    /// the synthesis filter bank.
    pub fn decode(&self, tokens: &TokenGrid) -> Result<Waveform> {
        synthesize(&rvq_decode(tokens, self.codebooks)?, self.signal)
    }

    fn frame_input(&self, noisy: &Waveform) -> Result<crate::tensor::Tensor> {
        let frames = analyze(noisy, self.signal)?;
        let l = frames.rows();
        if l > self.model.config().frames {
            return Err(Error::shape(format!(
                "utterance spans {} frames, the model's positional tables cover {}",
                l,
                self.model.config().frames
            )));
        }
        Ok(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::QuantErrorGrid;
    use crate::model::{ModelConfig, TokenDistributions};
    use crate::rvq::{rvq_encode, train_rvq, RvqTrainConfig};
    use crate::signal::{degrade, generate_utterance, DegradationSpec};
    use rand::Rng;

    fn tiny_signal() -> SignalConfig {
        SignalConfig {
            sample_rate: 800,
            frame_len: 16,
            hop: 8,
            d_emb: 4,
            k_phone: 3,
            duration_samples: 160,
            harmonics: 1,
            f0_min_hz: 30.0,
            f0_max_hz: 60.0,
            gain_db: (-12.0, -6.0),
        }
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            frames: 19,
            stages: 2,
            codebook_size: 8,
            width: 16,
            semantic_width: 4,
            frame_width: 4,
            heads: 2,
            discrete_blocks: 1,
            continuous_blocks: 1,
            semantic_blocks: 1,
            ffn_mult: 2,
            ..Default::default()
        }
    }

    fn tiny_world(seed: u64) -> (SignalConfig, Codebooks, Waveform, Waveform) {
        let scfg = tiny_signal();
        let (clean, _) = generate_utterance(seed, &scfg).unwrap();
        let noisy = degrade(
            &clean,
            &DegradationSpec {
                snr_db: 5.0,
                clipping_threshold: None,
                noise_seed: seed ^ 0x5eed,
            },
        )
        .unwrap();
        let frames = analyze(&clean, &scfg).unwrap();
        let rvq_cfg = RvqTrainConfig { stages: 2, codebook_size: 8, iterations: 15 };
        let cb = train_rvq(&frames, &rvq_cfg, 11).unwrap();
        (scfg, cb, clean, noisy)
    }

    /// A predictor that always emits one-hot distributions at a fixed grid,
    /// counting how often it is called.
    struct FixedPredictor {
        target: TokenGrid,
        classes: usize,
        calls: usize,
    }

    impl FixedPredictor {
        fn new(target: TokenGrid, classes: usize) -> Self {
            Self { target, classes, calls: 0 }
        }

        fn predict(&mut self, _input: &TokenGrid) -> Result<DiscreteOut> {
            self.calls += 1;
            Ok(DiscreteOut {
                p0: TokenDistributions::one_hot(&self.target, self.classes)?,
                critic_logits: None,
            })
        }
    }

    fn random_grid(frames: usize, stages: usize, classes: u32, seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u32> = (0..frames * stages).map(|_| rng.gen_range(0..classes)).collect();
        TokenGrid::from_vec(frames, stages, data).unwrap()
    }

    fn random_delta(frames: usize, stages: usize, seed: u64) -> QuantErrorGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..frames * stages).map(|_| rng.gen_range(0.0..1.0)).collect();
        QuantErrorGrid::from_vec(frames, stages, data).unwrap()
    }

    #[test]
    fn schedule_matches_hand_examples() {
        let sched = ScheduleParams::new(10, 4).unwrap();
        assert_eq!(reverse_schedule(1.0, 1, sched).unwrap(), vec![(1.0, 0)]);
        assert_eq!(
            reverse_schedule(1.0, 2, sched).unwrap(),
            vec![(1.0, 28), (0.5, 0)]
        );
        assert_eq!(reverse_schedule(0.1, 1, sched).unwrap(), vec![(0.1, 0)]);
    }

    #[test]
    fn schedule_counts_descend_to_zero_and_match_the_mask_schedule() {
        let sched = ScheduleParams::new(124, 4).unwrap();
        for &(t, steps) in &[(1.0, 10), (0.7, 5), (0.3, 3), (0.1, 1), (1.0, 1)] {
            let rows = reverse_schedule(t, steps, sched).unwrap();
            assert_eq!(rows.len(), steps);
            assert_eq!(rows.last().unwrap().1, 0);
            for (i, &(t_here, count)) in rows.iter().enumerate() {
                let expect_t = t * (steps - i) as f64 / steps as f64;
                assert_eq!(t_here, expect_t);
                let t_next = t * (steps - i - 1) as f64 / steps as f64;
                assert_eq!(count, mask_count(t_next, sched).unwrap());
                if i > 0 {
                    assert!(count <= rows[i - 1].1);
                }
            }
        }
    }

    #[test]
    fn schedule_and_config_reject_bad_settings() {
        let sched = ScheduleParams::new(4, 2).unwrap();
        assert_eq!(reverse_schedule(0.0, 1, sched).unwrap_err().category(), "config");
        assert_eq!(reverse_schedule(1.1, 1, sched).unwrap_err().category(), "config");
        assert_eq!(reverse_schedule(0.5, 0, sched).unwrap_err().category(), "config");

        let bad = InferenceConfig { t: 0.0, ..InferenceConfig::default() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let bad = InferenceConfig { steps: 0, ..InferenceConfig::default() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let bad = InferenceConfig { init: InitStrategy::Full, t: 0.5, ..InferenceConfig::default() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let ok = InferenceConfig { init: InitStrategy::Full, t: 1.0, ..InferenceConfig::default() };
        assert!(ok.validate().is_ok());
    }

    /// With a predictor that always answers the clean tokens and a base
    /// grid equal to them, every strategy, progress, and step count must
    /// return exactly the clean grid, and the trace must follow the
    /// schedule position for position.
    #[test]
    fn oracle_predictor_recovers_the_target_under_every_setting() {
        let (frames, stages, classes) = (19, 2, 8u32);
        let sched = ScheduleParams::new(frames, stages).unwrap();
        let clean = random_grid(frames, stages, classes, 3);
        let delta = random_delta(frames, stages, 4);

        for &init in &[InitStrategy::QuantError, InitStrategy::Random, InitStrategy::Full] {
            for &t in &[0.1, 0.5, 1.0] {
                for &steps in &[1usize, 5, 10] {
                    let t = if init == InitStrategy::Full { 1.0 } else { t };
                    let cfg = InferenceConfig { t, steps, init, ..InferenceConfig::default() };
                    let mask = match init {
                        InitStrategy::Full => MaskGrid::ones(frames, stages).unwrap(),
                        InitStrategy::Random => {
                            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                            random_mask(t, sched, &mut rng).unwrap()
                        }
                        InitStrategy::QuantError => quant_error_init(&delta, t, sched).unwrap(),
                    };
                    let mut oracle = FixedPredictor::new(clean.clone(), classes as usize);
                    let (out, trace) =
                        reverse_process(&clean, &mask, &cfg, sched, classes, |g| oracle.predict(g))
                            .unwrap();
                    assert_eq!(out.data(), clean.data(), "init {init:?} t {t} steps {steps}");
                    assert_eq!(oracle.calls, steps);
                    let expected: Vec<usize> = reverse_schedule(t, steps, sched)
                        .unwrap()
                        .iter()
                        .map(|&(_, k)| k)
                        .collect();
                    assert_eq!(trace.masked_counts(), expected);
                    assert_eq!(trace.steps.last().unwrap().masked, 0);
                }
            }
        }
    }

    /// A hostile predictor that is always wrong can only corrupt positions
    /// the initial mask opened; everything else must ride through verbatim.
    /// Under restricted re-masking the open set must also shrink
    /// monotonically from iteration to iteration.
    #[test]
    fn committed_positions_survive_a_hostile_predictor() {
        let (frames, stages, classes) = (19, 2, 8u32);
        let sched = ScheduleParams::new(frames, stages).unwrap();
        let base = random_grid(frames, stages, classes, 7);
        let wrong_data: Vec<u32> = base.data().iter().map(|&v| (v + 1) % classes).collect();
        let wrong = TokenGrid::from_vec(frames, stages, wrong_data).unwrap();

        let cfg = InferenceConfig { t: 0.5, steps: 4, ..InferenceConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mask = random_mask(cfg.t, sched, &mut rng).unwrap();
        let mut hostile = FixedPredictor::new(wrong.clone(), classes as usize);
        let (out, trace) =
            reverse_process(&base, &mask, &cfg, sched, classes, |g| hostile.predict(g)).unwrap();

        for pos in 0..frames * stages {
            let (l, c) = (pos / stages, pos % stages);
            if mask.get(l, c) {
                assert_eq!(out.get(l, c), wrong.get(l, c));
            } else {
                assert_eq!(out.get(l, c), base.get(l, c));
            }
        }

        // Mask-id positions in successive trace snapshots are nested.
        let mut previous: Vec<bool> = mask.bits().to_vec();
        for step in &trace.steps {
            let current: Vec<bool> =
                step.grid.data().iter().map(|&v| v == classes).collect();
            for (pos, &open) in current.iter().enumerate() {
                assert!(!open || previous[pos], "position {pos} re-opened after commit");
            }
            assert_eq!(current.iter().filter(|&&b| b).count(), step.masked);
            previous = current;
        }
    }

    #[test]
    fn both_candidate_policies_keep_committed_positions_when_counts_shrink() {
        let (frames, stages, classes) = (19, 2, 8u32);
        let sched = ScheduleParams::new(frames, stages).unwrap();
        let base = random_grid(frames, stages, classes, 9);
        let target = random_grid(frames, stages, classes, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mask = random_mask(0.8, sched, &mut rng).unwrap();

        let mut outputs = Vec::new();
        for &candidates in &[RemaskCandidates::Restricted, RemaskCandidates::All] {
            let cfg = InferenceConfig { t: 0.8, steps: 5, candidates, ..InferenceConfig::default() };
            let mut p = FixedPredictor::new(target.clone(), classes as usize);
            let (out, _) =
                reverse_process(&base, &mask, &cfg, sched, classes, |g| p.predict(g)).unwrap();
            for pos in 0..frames * stages {
                let (l, c) = (pos / stages, pos % stages);
                let expect = if mask.get(l, c) { target.get(l, c) } else { base.get(l, c) };
                assert_eq!(out.get(l, c), expect);
            }
            outputs.push(out);
        }
        // The schedule never asks for more re-masks than open candidates,
        // so infinite-confidence commits are never selected and the two
        // policies agree.
        assert_eq!(outputs[0].data(), outputs[1].data());
    }

    #[test]
    fn single_step_runs_one_forward_with_the_scheduled_initial_count() {
        let (frames, stages, classes) = (19, 2, 8u32);
        let sched = ScheduleParams::new(frames, stages).unwrap();
        let clean = random_grid(frames, stages, classes, 5);
        let delta = random_delta(frames, stages, 6);
        let cfg = InferenceConfig { t: 0.1, steps: 1, ..InferenceConfig::default() };

        let mask = quant_error_init(&delta, cfg.t, sched).unwrap();
        assert_eq!(mask.popcount(), mask_count(0.1, sched).unwrap());
        let mut oracle = FixedPredictor::new(clean.clone(), classes as usize);
        let (_, trace) =
            reverse_process(&clean, &mask, &cfg, sched, classes, |g| oracle.predict(g)).unwrap();
        assert_eq!(oracle.calls, 1);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].masked, 0);
    }

    #[test]
    fn reverse_process_rejects_inconsistent_inputs() {
        let (frames, stages, classes) = (19, 2, 8u32);
        let sched = ScheduleParams::new(frames, stages).unwrap();
        let clean = random_grid(frames, stages, classes, 5);
        let cfg = InferenceConfig { t: 0.5, ..InferenceConfig::default() };
        let mut oracle = FixedPredictor::new(clean.clone(), classes as usize);

        // Wrong mask count for t.
        let bad_mask = MaskGrid::ones(frames, stages).unwrap();
        let err = reverse_process(&clean, &bad_mask, &cfg, sched, classes, |g| oracle.predict(g))
            .unwrap_err();
        assert_eq!(err.category(), "config");

        // Base grid carrying a mask id.
        let mut masked_base = clean.clone();
        masked_base.set(0, 0, classes);
        let sched_mask = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            random_mask(cfg.t, sched, &mut rng).unwrap()
        };
        let err =
            reverse_process(&masked_base, &sched_mask, &cfg, sched, classes, |g| oracle.predict(g))
                .unwrap_err();
        assert_eq!(err.category(), "vocab");

        // Mismatched grid shape.
        let small = random_grid(5, stages, classes, 5);
        let err = reverse_process(&small, &sched_mask, &cfg, sched, classes, |g| oracle.predict(g))
            .unwrap_err();
        assert_eq!(err.category(), "shape");
    }

    #[test]
    fn non_finite_prediction_reports_the_iteration() {
        let (frames, stages, classes) = (19, 2, 8u32);
        let sched = ScheduleParams::new(frames, stages).unwrap();
        let base = random_grid(frames, stages, classes, 2);
        let cfg =
            InferenceConfig { t: 1.0, steps: 2, init: InitStrategy::Full, ..Default::default() };
        let mask = MaskGrid::ones(frames, stages).unwrap();

        // A healthy model answers the first iteration; one with a poisoned
        // token head answers the second, so the reported index proves the
        // loop threads it through rather than hard-coding zero.
        let healthy = Model::new(tiny_model_cfg(), 30).unwrap();
        let mut sick = Model::new(tiny_model_cfg(), 30).unwrap();
        let head = sick.params().id_of("discrete.head.w").unwrap();
        sick.params_mut().tensor_mut(head).data_mut()[0] = f64::NAN;
        let e_cont = healthy.zero_conditioning(frames);
        let e_sem = healthy.zero_conditioning(frames);

        let mut call = 0;
        let err = reverse_process(&base, &mask, &cfg, sched, classes, |g| {
            call += 1;
            let model = if call == 1 { &healthy } else { &sick };
            model.discrete_forward(g, &e_cont, &e_sem)
        })
        .unwrap_err();
        assert_eq!(err.category(), "numeric");
        assert!(err.to_string().contains("iteration 1"), "{err}");
    }

    #[test]
    fn enhancer_runs_end_to_end_and_is_deterministic() {
        let (scfg, cb, _clean, noisy) = tiny_world(40);
        let model = Model::new(tiny_model_cfg(), 17).unwrap();
        let enh = Enhancer::new(&model, &cb, &scfg).unwrap();

        for &init in &[InitStrategy::QuantError, InitStrategy::Random, InitStrategy::Full] {
            let cfg = InferenceConfig {
                t: if init == InitStrategy::Full { 1.0 } else { 0.5 },
                steps: 3,
                init,
                seed: 7,
                ..InferenceConfig::default()
            };
            let (wave_a, trace_a) = enh.enhance(&noisy, &cfg).unwrap();
            let (wave_b, trace_b) = enh.enhance(&noisy, &cfg).unwrap();
            assert_eq!(wave_a.samples, wave_b.samples, "init {init:?}");
            assert_eq!(wave_a.len(), noisy.len());
            assert!(wave_a.samples.iter().all(|v| v.is_finite()));
            assert_eq!(trace_a.masked_counts(), trace_b.masked_counts());

            let sched = ScheduleParams::new(19, 2).unwrap();
            let expected: Vec<usize> = reverse_schedule(cfg.t, cfg.steps, sched)
                .unwrap()
                .iter()
                .map(|&(_, k)| k)
                .collect();
            assert_eq!(trace_a.masked_counts(), expected);
        }
    }

    /// A fully-masked single pass commits the argmax of the predictor's
    /// distributions at every position.
    #[test]
    fn full_single_pass_is_a_plain_argmax_fill() {
        let (scfg, cb, _clean, noisy) = tiny_world(41);
        let model = Model::new(tiny_model_cfg(), 18).unwrap();
        let enh = Enhancer::new(&model, &cb, &scfg).unwrap();

        let cfg = InferenceConfig {
            t: 1.0,
            steps: 1,
            init: InitStrategy::Full,
            ..InferenceConfig::default()
        };
        let (tokens, _) = enh.enhance_tokens(&noisy, &cfg).unwrap();

        let frames = analyze(&noisy, &scfg).unwrap();
        let co = model.continuous_forward(&frames, &cb).unwrap();
        let se = model.semantic_forward(&frames).unwrap();
        let all_masked = apply_mask(
            &co.tokens,
            &MaskGrid::ones(19, 2).unwrap(),
            model.config().mask_token(),
        )
        .unwrap();
        let out = model.discrete_forward(&all_masked, &co.cond, &se.cond).unwrap();
        for l in 0..19 {
            for c in 0..2 {
                assert_eq!(tokens.get(l, c), out.p0.argmax(l, c));
            }
        }
    }

    #[test]
    fn critic_confidence_drives_remasking_when_enabled() {
        let (scfg, cb, _clean, noisy) = tiny_world(42);
        let model = Model::new(tiny_model_cfg(), 19).unwrap();
        let enh = Enhancer::new(&model, &cb, &scfg).unwrap();

        let cfg = InferenceConfig {
            t: 0.8,
            steps: 4,
            critic_confidence: true,
            ..InferenceConfig::default()
        };
        let (wave, trace) = enh.enhance(&noisy, &cfg).unwrap();
        assert!(wave.samples.iter().all(|v| v.is_finite()));
        assert_eq!(trace.steps.len(), 4);
        assert!(trace.steps.iter().all(|s| s.mean_confidence.is_finite()));

        // Without a critic head the same request must fail up front.
        let no_critic = Model::new(
            ModelConfig { critic_enabled: false, ..tiny_model_cfg() },
            19,
        )
        .unwrap();
        let enh = Enhancer::new(&no_critic, &cb, &scfg).unwrap();
        assert_eq!(enh.enhance(&noisy, &cfg).unwrap_err().category(), "config");
    }

    /// An untrained continuous module regresses pure bias, so its
    /// re-tokenization is one constant token row and the bypass output is a
    /// deterministic, finite waveform.
    #[test]
    fn continuous_bypass_on_a_fresh_model_is_constant_and_finite() {
        let (scfg, cb, _clean, noisy) = tiny_world(43);
        let model = Model::new(tiny_model_cfg(), 20).unwrap();
        let enh = Enhancer::new(&model, &cb, &scfg).unwrap();

        let tokens = enh.continuous_only_tokens(&noisy).unwrap();
        for l in 1..tokens.frames() {
            for c in 0..tokens.stages() {
                assert_eq!(tokens.get(l, c), tokens.get(0, c));
            }
        }
        let wave_a = enh.continuous_only_enhance(&noisy).unwrap();
        let wave_b = enh.continuous_only_enhance(&noisy).unwrap();
        assert_eq!(wave_a.samples, wave_b.samples);
        assert_eq!(wave_a.len(), noisy.len());
        assert!(wave_a.samples.iter().all(|v| v.is_finite()));

        // And the quantization-error initialization it feeds matches the
        // schedule count exactly.
        let frames = analyze(&noisy, &scfg).unwrap();
        let co = model.continuous_forward(&frames, &cb).unwrap();
        let sched = ScheduleParams::new(19, 2).unwrap();
        let mask = quant_error_init(&co.delta, 0.3, sched).unwrap();
        assert_eq!(mask.popcount(), mask_count(0.3, sched).unwrap());
    }

    #[test]
    fn modules_disabled_at_build_time_constrain_inference() {
        let (scfg, cb, _clean, noisy) = tiny_world(44);

        // Without the continuous module only fully-masked init works.
        let cfg_no_cont = ModelConfig {
            continuous_enabled: false,
            ..tiny_model_cfg()
        };
        let model = Model::new(cfg_no_cont, 21).unwrap();
        let enh = Enhancer::new(&model, &cb, &scfg).unwrap();
        let err = enh
            .enhance(&noisy, &InferenceConfig::default())
            .unwrap_err();
        assert_eq!(err.category(), "config");
        assert_eq!(enh.continuous_only_enhance(&noisy).unwrap_err().category(), "config");
        let full = InferenceConfig {
            t: 1.0,
            steps: 2,
            init: InitStrategy::Full,
            ..InferenceConfig::default()
        };
        let (wave, _) = enh.enhance(&noisy, &full).unwrap();
        assert!(wave.samples.iter().all(|v| v.is_finite()));

        // Continuous-only models cannot run the reverse process at all.
        let cfg_cont_only = ModelConfig {
            discrete_enabled: false,
            semantic_enabled: false,
            critic_enabled: false,
            ..tiny_model_cfg()
        };
        let model = Model::new(cfg_cont_only, 22).unwrap();
        let enh = Enhancer::new(&model, &cb, &scfg).unwrap();
        assert!(enh.continuous_only_enhance(&noisy).is_ok());
        assert_eq!(
            enh.enhance(&noisy, &InferenceConfig::default()).unwrap_err().category(),
            "config"
        );
    }

    #[test]
    fn enhancer_rejects_mismatched_components() {
        let (scfg, cb, _clean, _noisy) = tiny_world(45);
        let model = Model::new(ModelConfig { stages: 3, ..tiny_model_cfg() }, 23).unwrap();
        assert_eq!(Enhancer::new(&model, &cb, &scfg).map(|_| ()).unwrap_err().category(), "config");

        let model = Model::new(tiny_model_cfg(), 23).unwrap();
        let wrong_signal = SignalConfig { d_emb: 3, ..tiny_signal() };
        assert_eq!(
            Enhancer::new(&model, &cb, &wrong_signal).map(|_| ()).unwrap_err().category(),
            "config"
        );
    }

    /// Perfect codec input should survive the whole enhance path: if the
    /// predictor is an oracle for the clean tokens, the enhanced waveform
    /// equals the codec reconstruction of the clean signal.
    #[test]
    fn oracle_loop_output_decodes_to_the_codec_reconstruction() {
        let (scfg, cb, clean, _noisy) = tiny_world(46);
        let frames = analyze(&clean, &scfg).unwrap();
        let (clean_tokens, delta) = rvq_encode(&frames, &cb).unwrap();
        let sched = ScheduleParams::new(19, 2).unwrap();

        let cfg = InferenceConfig { t: 0.5, steps: 5, ..InferenceConfig::default() };
        let mask = quant_error_init(&delta, cfg.t, sched).unwrap();
        let mut oracle = FixedPredictor::new(clean_tokens.clone(), 8);
        let (tokens, _) =
            reverse_process(&clean_tokens, &mask, &cfg, sched, 8, |g| oracle.predict(g)).unwrap();

        let direct = synthesize(&rvq_decode(&clean_tokens, &cb).unwrap(), &scfg).unwrap();
        let via_loop = synthesize(&rvq_decode(&tokens, &cb).unwrap(), &scfg).unwrap();
        assert_eq!(via_loop.samples, direct.samples);
    }
}
