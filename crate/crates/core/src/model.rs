//! The three enhancement modules and their joint training step.
//!
//! Enhancement runs as a cooperation of three sequence models over the
//! frame grid:
//!
//! * a **discrete** module — token embeddings summed across codec stages,
//!   a transformer trunk, and a linear head that predicts a distribution
//!   over codewords for every (frame, stage) position of a partially
//!   masked token grid, plus an optional *critic* head that scores each
//!   position for having been mask-filled rather than copied;
//! * a **continuous** module — a regression trunk that maps noisy frame
//!   features toward clean ones, whose output is re-tokenized by the
//!   frozen codec to provide both an initial token estimate and, through
//!   the shared embedding tables, a conditioning stream for the discrete
//!   trunk;
//! * a **semantic** module — the same trunk shape run in a frozen random
//!   feature space, contributing a second conditioning stream.
//!
//! The embedding tables are a single storage shared by the discrete input
//! path and the continuous conditioning path: one `ParamId` per stage,
//! looked up by both. Training optimizes the sum of four terms — masked
//! cross-entropy on token predictions, binary cross-entropy of the critic
//! against the true mask, and mean-absolute-error terms for the continuous
//! and semantic regressions — in one backward pass per batch. The frame
//! codec and the semantic feature projection stay frozen throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{MaskGrid, QuantErrorGrid, TokenGrid};
use crate::masking::{apply_mask, random_mask, ScheduleParams};
use crate::rvq::{rvq_encode, Codebooks};
use crate::signal::{analyze, SignalConfig, Waveform};
use crate::tensor::{
    grad_check, mm, vexp, AdamW, GradCheckConfig, GradCheckReport, Graph, ParamId, ParamSet,
    StackConfig, StackParams, Tensor, Var,
};

const INIT_STD: f64 = 0.02;

/// Dimensions and module switches for a [`Model`].
///
/// The four `*_enabled` flags carve out the supported module subsets: the
/// critic and the semantic module only exist to serve the discrete module,
/// and at least one of the discrete and continuous modules must be present.
/// Everything else (any combination of switching the critic, semantic, or
/// continuous modules off, or running the continuous module alone) is a
/// valid reduced model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Longest frame sequence the positional tables cover.
    pub frames: usize,
    /// Codec stages per frame (token columns).
    pub stages: usize,
    /// Codewords per stage; the mask id is one past the last codeword.
    pub codebook_size: usize,
    /// Trunk width shared by all three modules.
    pub width: usize,
    /// Width of the frozen semantic feature space.
    pub semantic_width: usize,
    /// Width of a continuous frame feature vector.
    pub frame_width: usize,
    /// Attention heads in every trunk.
    pub heads: usize,
    pub discrete_blocks: usize,
    pub continuous_blocks: usize,
    pub semantic_blocks: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ffn_mult: usize,
    pub discrete_enabled: bool,
    pub continuous_enabled: bool,
    pub semantic_enabled: bool,
    pub critic_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 124,
            stages: 4,
            codebook_size: 64,
            width: 32,
            semantic_width: 16,
            frame_width: 16,
            heads: 2,
            discrete_blocks: 2,
            continuous_blocks: 2,
            semantic_blocks: 1,
            ffn_mult: 2,
            discrete_enabled: true,
            continuous_enabled: true,
            semantic_enabled: true,
            critic_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.stages == 0
            || self.width == 0
            || self.semantic_width == 0
            || self.frame_width == 0
            || self.ffn_mult == 0
        {
            return Err(Error::config(
                "model: frames/stages/width/semantic_width/frame_width/ffn_mult must be positive",
            ));
        }
        if self.codebook_size < 2 {
            return Err(Error::config(format!(
                "model: codebook size must be at least 2, got {}",
                self.codebook_size
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model: {} heads does not divide width {}",
                self.heads, self.width
            )));
        }
        if self.discrete_enabled && self.discrete_blocks == 0 {
            return Err(Error::config("model: discrete module needs at least one block"));
        }
        if self.continuous_enabled && self.continuous_blocks == 0 {
            return Err(Error::config("model: continuous module needs at least one block"));
        }
        if self.semantic_enabled && self.semantic_blocks == 0 {
            return Err(Error::config("model: semantic module needs at least one block"));
        }
        if !self.discrete_enabled && !self.continuous_enabled {
            return Err(Error::config(
                "model: at least one of the discrete and continuous modules must be enabled",
            ));
        }
        if self.critic_enabled && !self.discrete_enabled {
            return Err(Error::config(
                "model: the critic head requires the discrete module",
            ));
        }
        if self.semantic_enabled && !self.discrete_enabled {
            return Err(Error::config(
                "model: the semantic module conditions the discrete module and requires it",
            ));
        }
        Ok(())
    }

    /// Token id reserved for masked positions.
    pub fn mask_token(&self) -> u32 {
        self.codebook_size as u32
    }

    fn stack(&self, blocks: usize) -> StackConfig {
        StackConfig {
            dim: self.width,
            heads: self.heads,
            blocks,
            ffn_mult: self.ffn_mult,
            max_len: self.frames,
            positional: true,
        }
    }
}

/// Per-position categorical distributions over codewords: for every frame
/// `l` and stage `c`, a probability vector of length `classes`.
#[derive(Debug, Clone)]
pub struct TokenDistributions {
    probs: Tensor,
    stages: usize,
    classes: usize,
}

impl TokenDistributions {
    /// Wraps an `[L, stages·classes]` probability tensor. Entries must be
    /// finite and non-negative; normalization is the producer's business
    /// (one-hot vectors are as welcome as softmax outputs).
    pub fn from_probs(probs: Tensor, stages: usize) -> Result<Self> {
        let (_, w) = probs.expect_2d("token distributions")?;
        if stages == 0 || !w.is_multiple_of(stages) {
            return Err(Error::shape(format!(
                "token distributions: width {w} not divisible by {stages} stages"
            )));
        }
        if probs.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::numeric(
                "token distributions contain a negative or non-finite probability",
            ));
        }
        let classes = w / stages;
        Ok(Self { probs, stages, classes })
    }

    /// Distributions that put all mass on the tokens of `grid` — the oracle
    /// predictor shape used by the reverse-process equivalence tests.
    pub fn one_hot(grid: &TokenGrid, classes: usize) -> Result<Self> {
        grid.check_below(classes as u32)?;
        let (l, c) = (grid.frames(), grid.stages());
        let mut data = vec![0.0; l * c * classes];
        for frame in 0..l {
            for stage in 0..c {
                let tok = grid.get(frame, stage) as usize;
                data[(frame * c + stage) * classes + tok] = 1.0;
            }
        }
        Ok(Self {
            probs: Tensor::from_vec(&[l, c * classes], data)?,
            stages: c,
            classes,
        })
    }

    fn from_logits(logits: &Tensor, stages: usize, classes: usize) -> Self {
        let l = logits.rows();
        let mut data = logits.data().to_vec();
        for block in data.chunks_exact_mut(classes) {
            let mx = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            block.iter_mut().for_each(|v| *v -= mx);
            vexp(block);
            let sum: f64 = block.iter().sum();
            block.iter_mut().for_each(|v| *v /= sum);
        }
        Self {
            probs: Tensor::from_vec(&[l, stages * classes], data).expect("same layout"),
            stages,
            classes,
        }
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// The probability vector at one (frame, stage) position.
    pub fn dist(&self, frame: usize, stage: usize) -> &[f64] {
        let start = frame * self.stages * self.classes + stage * self.classes;
        &self.probs.data()[start..start + self.classes]
    }

    /// Most probable codeword; ties resolve to the lowest index.
    pub fn argmax(&self, frame: usize, stage: usize) -> u32 {
        argmax_slice(self.dist(frame, stage)) as u32
    }

    /// Probability of the most probable codeword.
    pub fn confidence(&self, frame: usize, stage: usize) -> f64 {
        self.dist(frame, stage)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The token grid obtained by taking the argmax at masked positions and
    /// copying `base` everywhere else.
    pub fn fill_predictions(&self, base: &TokenGrid, mask: &MaskGrid) -> Result<TokenGrid> {
        if base.frames() != self.frames()
            || base.stages() != self.stages
            || mask.frames() != self.frames()
            || mask.stages() != self.stages
        {
            return Err(Error::shape(format!(
                "fill_predictions: distributions are {}x{}, base {}x{}, mask {}x{}",
                self.frames(),
                self.stages,
                base.frames(),
                base.stages(),
                mask.frames(),
                mask.stages()
            )));
        }
        let mut out = base.clone();
        for l in 0..self.frames() {
            for c in 0..self.stages {
                if mask.get(l, c) {
                    out.set(l, c, self.argmax(l, c));
                }
            }
        }
        Ok(out)
    }
}

fn argmax_slice(v: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = v[0];
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best_v {
            best = i;
            best_v = x;
        }
    }
    best
}

/// Frozen random feature map from frame features to a semantic space: a
/// seeded random projection followed by tanh. It is created with the model
/// but lives outside the trainable parameter set, so no optimizer step can
/// touch it; identical inputs always produce identical features.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    proj: Tensor,
}

impl SemanticEncoder {
    fn init(frame_width: usize, semantic_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (frame_width as f64).powf(-0.5);
        Self {
            proj: Tensor::randn(&[frame_width, semantic_width], std, rng),
        }
    }

    /// Rebuilds an encoder from a stored projection matrix.
    pub fn from_proj(proj: Tensor) -> Result<Self> {
        proj.expect_2d("semantic projection")?;
        if !proj.is_all_finite() {
            return Err(Error::numeric("semantic projection contains a non-finite value"));
        }
        Ok(Self { proj })
    }

    pub fn proj(&self) -> &Tensor {
        &self.proj
    }

    /// Maps `[L, frame_width]` frames to `[L, semantic_width]` features.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let (l, w) = frames.expect_2d("semantic encoder input")?;
        let (fw, s) = (self.proj.rows(), self.proj.cols());
        if w != fw {
            return Err(Error::shape(format!(
                "semantic encoder expects frame width {fw}, got {w}"
            )));
        }
        let mut out = mm(frames.data(), self.proj.data(), l, fw, s);
        out.iter_mut().for_each(|v| *v = v.tanh());
        Tensor::from_vec(&[l, s], out)
    }
}

/// Output of the continuous module on one utterance.
#[derive(Debug, Clone)]
pub struct ContinuousOut {
    /// Regressed frame features, `[L, frame_width]`.
    pub frames: Tensor,
    /// The regression re-tokenized by the frozen codec.
    pub tokens: TokenGrid,
    /// Per-stage quantization error of that re-tokenization.
    pub delta: QuantErrorGrid,
    /// Conditioning stream for the discrete trunk, `[L, width]`.
    pub cond: Tensor,
}

/// Output of the semantic module on one utterance.
#[derive(Debug, Clone)]
pub struct SemanticOut {
    /// Regressed semantic features, `[L, semantic_width]`.
    pub features: Tensor,
    /// Conditioning stream for the discrete trunk, `[L, width]`.
    pub cond: Tensor,
}

/// Output of the discrete module on one masked grid.
#[derive(Debug, Clone)]
pub struct DiscreteOut {
    pub p0: TokenDistributions,
    /// Critic scores per position, `[L, stages]`; present iff the critic
    /// head exists.
    pub critic_logits: Option<Tensor>,
}

/// One training utterance: a clean/noisy pair, the masking level `t`, and
/// the seed that draws this item's random mask.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub clean: &'a Waveform,
    pub noisy: &'a Waveform,
    pub t: f64,
    pub mask_seed: u64,
}

/// Loss values of one training step, before the optimizer update.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    /// The optimized objective; equals `ce + bce + mae_cont + mae_sem`.
    pub total: f64,
    /// Masked cross-entropy of token predictions, averaged per utterance.
    pub ce: f64,
    /// Critic binary cross-entropy against the true mask.
    pub bce: f64,
    /// Continuous regression mean absolute error.
    pub mae_cont: f64,
    /// Semantic regression mean absolute error.
    pub mae_sem: f64,
    /// Masked positions summed over the batch.
    pub masked_positions: usize,
}

#[derive(Clone, Debug)]
struct DiscreteWiring {
    stack: StackParams,
    head_w: ParamId,
    head_b: ParamId,
    critic: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct ContinuousWiring {
    in_w: ParamId,
    in_b: ParamId,
    stack: StackParams,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug)]
struct SemanticWiring {
    in_w: ParamId,
    in_b: ParamId,
    stack: StackParams,
    s_w: ParamId,
    s_b: ParamId,
    e_w: ParamId,
    e_b: ParamId,
}

/// Everything about a model except its parameter storage: configuration,
/// parameter ids, and the frozen semantic encoder. Separating this from the
/// `ParamSet` lets the finite-difference checker mutate parameters while
/// the wiring rebuilds the loss graph.
#[derive(Clone, Debug)]
struct Wiring {
    cfg: ModelConfig,
    emb: Vec<ParamId>,
    discrete: Option<DiscreteWiring>,
    continuous: Option<ContinuousWiring>,
    semantic: Option<SemanticWiring>,
    encoder: SemanticEncoder,
}

/// A host-side batch ready for graph assembly: analyzed frames, semantic
/// features, clean-token targets, and per-item masks.
struct PreparedBatch {
    items: usize,
    seq: usize,
    noisy: Tensor,
    clean: Tensor,
    sem_in: Option<Tensor>,
    sem_tgt: Option<Tensor>,
    /// Masked input tokens, one column per stage, concatenated over items.
    x_t_cols: Vec<Vec<usize>>,
    /// Clean tokens per item, flattened frame-major.
    targets: Vec<Vec<usize>>,
    /// Mask bits per item, flattened frame-major.
    masks: Vec<Vec<bool>>,
}

struct LossVars {
    total: Var,
    ce: Var,
    bce: Var,
    mae_cont: Var,
    mae_sem: Var,
    masked: usize,
}

fn stage_cols(grid: &TokenGrid) -> Vec<Vec<usize>> {
    let (l, c) = (grid.frames(), grid.stages());
    let mut cols = vec![Vec::with_capacity(l); c];
    for frame in 0..l {
        for (stage, col) in cols.iter_mut().enumerate() {
            col.push(grid.get(frame, stage) as usize);
        }
    }
    cols
}

impl Wiring {
    fn check_codebooks(&self, cb: &Codebooks) -> Result<()> {
        if cb.stage_count() != self.cfg.stages
            || cb.codebook_size() != self.cfg.codebook_size
            || cb.dim() != self.cfg.frame_width
        {
            return Err(Error::config(format!(
                "codebooks ({} stages, {} codewords, width {}) do not match the model \
                 ({} stages, {} codewords, width {})",
                cb.stage_count(),
                cb.codebook_size(),
                cb.dim(),
                self.cfg.stages,
                self.cfg.codebook_size,
                self.cfg.frame_width
            )));
        }
        Ok(())
    }

    /// Σ over stages of the stage's embedding table looked up at that
    /// stage's token column.
    fn sum_embeddings(&self, g: &mut Graph, cols: &[Vec<usize>]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (stage, col) in cols.iter().enumerate() {
            let table = g.param(self.emb[stage]);
            let e = g.embedding(table, col)?;
            acc = Some(match acc {
                Some(a) => g.add(a, e)?,
                None => e,
            });
        }
        acc.ok_or_else(|| Error::shape("embedding sum over zero stages".to_string()))
    }

    fn affine_p(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(w);
        let bv = g.param(b);
        g.affine(x, wv, bv)
    }

    /// Continuous regression: `[rows, frame_width]` → `[rows, frame_width]`.
    fn continuous_trunk(&self, g: &mut Graph, x: Var, seq: usize) -> Result<Var> {
        let w = self.continuous.as_ref().expect("continuous module present");
        let h = self.affine_p(g, x, w.in_w, w.in_b)?;
        let h = w.stack.forward_batch(g, h, seq)?;
        self.affine_p(g, h, w.out_w, w.out_b)
    }

    /// Semantic regression: `[rows, semantic_width]` features → same shape.
    fn semantic_trunk(&self, g: &mut Graph, feats: Var, seq: usize) -> Result<Var> {
        let w = self.semantic.as_ref().expect("semantic module present");
        let h = self.affine_p(g, feats, w.in_w, w.in_b)?;
        let h = w.stack.forward_batch(g, h, seq)?;
        self.affine_p(g, h, w.s_w, w.s_b)
    }

    /// Discrete trunk on summed embeddings plus conditioning; returns the
    /// trunk activations (head application is the caller's choice).
    fn discrete_trunk(
        &self,
        g: &mut Graph,
        cols: &[Vec<usize>],
        e_cont: Var,
        e_sem: Var,
        seq: usize,
    ) -> Result<Var> {
        let w = self.discrete.as_ref().expect("discrete module present");
        let e_dis = self.sum_embeddings(g, cols)?;
        let sum = g.add(e_dis, e_cont)?;
        let input = g.add(sum, e_sem)?;
        w.stack.forward_batch(g, input, seq)
    }

    fn prepare_batch(
        &self,
        examples: &[TrainExample],
        signal_cfg: &SignalConfig,
        cb: &Codebooks,
    ) -> Result<PreparedBatch> {
        if examples.is_empty() {
            return Err(Error::config("training batch is empty"));
        }
        self.check_codebooks(cb)?;
        let stages = self.cfg.stages;
        let mut seq = 0usize;
        let mut noisy_rows = Vec::new();
        let mut clean_rows = Vec::new();
        let mut sem_in_rows = Vec::new();
        let mut sem_tgt_rows = Vec::new();
        let mut x_t_cols = vec![Vec::new(); stages];
        let mut targets = Vec::with_capacity(examples.len());
        let mut masks = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            let clean_f = analyze(ex.clean, signal_cfg)?;
            let noisy_f = analyze(ex.noisy, signal_cfg)?;
            if clean_f.rows() != noisy_f.rows() {
                return Err(Error::shape(format!(
                    "batch item {i}: clean has {} frames but noisy has {}",
                    clean_f.rows(),
                    noisy_f.rows()
                )));
            }
            if clean_f.cols() != self.cfg.frame_width {
                return Err(Error::shape(format!(
                    "batch item {i}: frame width {} does not match the model's {}",
                    clean_f.cols(),
                    self.cfg.frame_width
                )));
            }
            if i == 0 {
                seq = clean_f.rows();
            } else if clean_f.rows() != seq {
                return Err(Error::shape(format!(
                    "batch item {i}: {} frames, expected {seq} (batches are fixed-length)",
                    clean_f.rows()
                )));
            }
            if self.discrete.is_some() {
                let (tok, _) = rvq_encode(&clean_f, cb)?;
                let sched = ScheduleParams::new(seq, stages)?;
                let mut rng = ChaCha8Rng::seed_from_u64(ex.mask_seed);
                let mask = random_mask(ex.t, sched, &mut rng)?;
                let x_t = apply_mask(&tok, &mask, self.cfg.mask_token())?;
                for (stage, col) in x_t_cols.iter_mut().enumerate() {
                    for l in 0..seq {
                        col.push(x_t.get(l, stage) as usize);
                    }
                }
                targets.push(tok.data().iter().map(|&v| v as usize).collect());
                masks.push(mask.bits().to_vec());
            }
            if self.semantic.is_some() {
                sem_in_rows.extend_from_slice(self.encoder.encode(&noisy_f)?.data());
                sem_tgt_rows.extend_from_slice(self.encoder.encode(&clean_f)?.data());
            }
            noisy_rows.extend_from_slice(noisy_f.data());
            clean_rows.extend_from_slice(clean_f.data());
        }
        let items = examples.len();
        let fw = self.cfg.frame_width;
        let sw = self.cfg.semantic_width;
        Ok(PreparedBatch {
            items,
            seq,
            noisy: Tensor::from_vec(&[items * seq, fw], noisy_rows)?,
            clean: Tensor::from_vec(&[items * seq, fw], clean_rows)?,
            sem_in: if self.semantic.is_some() {
                Some(Tensor::from_vec(&[items * seq, sw], sem_in_rows)?)
            } else {
                None
            },
            sem_tgt: if self.semantic.is_some() {
                Some(Tensor::from_vec(&[items * seq, sw], sem_tgt_rows)?)
            } else {
                None
            },
            x_t_cols,
            targets,
            masks,
        })
    }

    /// Assembles the full training objective for one prepared batch and
    /// returns the component nodes. Disabled modules contribute a constant
    /// zero, which keeps the sum structure uniform and gradient-free there.
    fn batch_losses(&self, g: &mut Graph, pb: &PreparedBatch, cb: &Codebooks) -> Result<LossVars> {
        let rows = pb.items * pb.seq;
        let width = self.cfg.width;
        let zero = g.input(Tensor::scalar(0.0));

        let (mae_cont, e_cont) = if self.continuous.is_some() {
            let x = g.input(pb.noisy.clone());
            let estimate = self.continuous_trunk(g, x, pb.seq)?;
            let target = g.input(pb.clean.clone());
            let mae = g.mae(estimate, target)?;
            // The codec is frozen: its tokens enter the graph as data, so
            // conditioning gradients reach the embedding tables but never
            // flow back into the regression through the tokenization.
            let estimate_value = g.value(estimate).clone();
            let (tokens, _) = rvq_encode(&estimate_value, cb)?;
            let cond = self.sum_embeddings(g, &stage_cols(&tokens))?;
            (mae, Some(cond))
        } else {
            (zero, None)
        };

        let (mae_sem, e_sem) = match (&self.semantic, &pb.sem_in, &pb.sem_tgt) {
            (Some(sw), Some(sem_in), Some(sem_tgt)) => {
                let feats = g.input(sem_in.clone());
                let estimate = self.semantic_trunk(g, feats, pb.seq)?;
                let target = g.input(sem_tgt.clone());
                let mae = g.mae(estimate, target)?;
                let cond = self.affine_p(g, estimate, sw.e_w, sw.e_b)?;
                (mae, Some(cond))
            }
            _ => (zero, None),
        };

        let (ce, bce, masked) = if let Some(dw) = &self.discrete {
            let e_cont_v = e_cont.unwrap_or_else(|| g.input(Tensor::zeros(&[rows, width])));
            let e_sem_v = e_sem.unwrap_or_else(|| g.input(Tensor::zeros(&[rows, width])));
            let trunk = self.discrete_trunk(g, &pb.x_t_cols, e_cont_v, e_sem_v, pb.seq)?;
            let logits = self.affine_p(g, trunk, dw.head_w, dw.head_b)?;

            // Per-utterance mean over masked positions, then batch mean:
            // items mask different position counts, so pooling them would
            // weight utterances unevenly.
            let classes = self.cfg.codebook_size;
            let mut acc: Option<Var> = None;
            let mut masked = 0usize;
            for i in 0..pb.items {
                let li = g.slice_rows(logits, i * pb.seq, pb.seq)?;
                let ci = g.masked_ce(li, &pb.targets[i], &pb.masks[i], classes)?;
                masked += pb.masks[i].iter().filter(|&&b| b).count();
                acc = Some(match acc {
                    Some(a) => g.add(a, ci)?,
                    None => ci,
                });
            }
            let ce = g.scale(acc.expect("at least one item"), 1.0 / pb.items as f64);

            let bce = if let Some((cw, cbias)) = dw.critic {
                // Second trunk pass on the prediction-filled grid: argmax
                // at masked positions, the clean token elsewhere. The
                // token choice is data; the critic gradient reaches the
                // trunk, embeddings, and conditioning streams.
                let stages = self.cfg.stages;
                let logit_values = g.value(logits).data().to_vec();
                let mut cols = vec![Vec::with_capacity(rows); stages];
                for i in 0..pb.items {
                    for l in 0..pb.seq {
                        let row = i * pb.seq + l;
                        for (stage, col) in cols.iter_mut().enumerate() {
                            let tok = if pb.masks[i][l * stages + stage] {
                                let start = row * stages * classes + stage * classes;
                                argmax_slice(&logit_values[start..start + classes])
                            } else {
                                pb.targets[i][l * stages + stage]
                            };
                            col.push(tok);
                        }
                    }
                }
                let trunk0 = self.discrete_trunk(g, &cols, e_cont_v, e_sem_v, pb.seq)?;
                let critic_logits = self.affine_p(g, trunk0, cw, cbias)?;
                let mut target = Vec::with_capacity(rows * stages);
                for mask in &pb.masks {
                    target.extend(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                }
                let include = vec![true; rows * stages];
                g.bce_logits(critic_logits, &target, &include)?
            } else {
                zero
            };
            (ce, bce, masked)
        } else {
            (zero, zero, 0)
        };

        let sum1 = g.add(ce, bce)?;
        let sum2 = g.add(sum1, mae_cont)?;
        let total = g.add(sum2, mae_sem)?;
        Ok(LossVars {
            total,
            ce,
            bce,
            mae_cont,
            mae_sem,
            masked,
        })
    }
}

/// The complete enhancement model: trainable parameters plus wiring.
#[derive(Clone, Debug)]
pub struct Model {
    params: ParamSet,
    w: Wiring,
}

impl Model {
    /// Creates a model with freshly initialized parameters. Trunk weights
    /// and embedding tables draw from a seeded normal; every output head
    /// starts at zero, so an untrained model predicts the uniform token
    /// distribution, a 0.5 critic probability, and all-zero regressions.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = cfg.codebook_size + 1;
        let mut emb = Vec::with_capacity(cfg.stages);
        for stage in 0..cfg.stages {
            emb.push(params.add(
                format!("emb.stage{stage}"),
                Tensor::randn(&[vocab, cfg.width], INIT_STD, &mut rng),
            )?);
        }
        // Drawn unconditionally so that models sharing a seed share every
        // other initialization regardless of which modules are enabled.
        let encoder = SemanticEncoder::init(cfg.frame_width, cfg.semantic_width, &mut rng);
        let discrete = if cfg.discrete_enabled {
            let stack = StackParams::init(
                "discrete.lm",
                cfg.stack(cfg.discrete_blocks),
                &mut params,
                &mut rng,
            )?;
            let head_w = params.add(
                "discrete.head.w",
                Tensor::zeros(&[cfg.width, cfg.stages * cfg.codebook_size]),
            )?;
            let head_b =
                params.add("discrete.head.b", Tensor::zeros(&[cfg.stages * cfg.codebook_size]))?;
            let critic = if cfg.critic_enabled {
                Some((
                    params.add("discrete.critic.w", Tensor::zeros(&[cfg.width, cfg.stages]))?,
                    params.add("discrete.critic.b", Tensor::zeros(&[cfg.stages]))?,
                ))
            } else {
                None
            };
            Some(DiscreteWiring {
                stack,
                head_w,
                head_b,
                critic,
            })
        } else {
            None
        };
        let continuous = if cfg.continuous_enabled {
            Some(ContinuousWiring {
                in_w: params.add(
                    "continuous.in.w",
                    Tensor::randn(&[cfg.frame_width, cfg.width], INIT_STD, &mut rng),
                )?,
                in_b: params.add("continuous.in.b", Tensor::zeros(&[cfg.width]))?,
                stack: StackParams::init(
                    "continuous.lm",
                    cfg.stack(cfg.continuous_blocks),
                    &mut params,
                    &mut rng,
                )?,
                out_w: params
                    .add("continuous.out.w", Tensor::zeros(&[cfg.width, cfg.frame_width]))?,
                out_b: params.add("continuous.out.b", Tensor::zeros(&[cfg.frame_width]))?,
            })
        } else {
            None
        };
        let semantic = if cfg.semantic_enabled {
            Some(SemanticWiring {
                in_w: params.add(
                    "semantic.in.w",
                    Tensor::randn(&[cfg.semantic_width, cfg.width], INIT_STD, &mut rng),
                )?,
                in_b: params.add("semantic.in.b", Tensor::zeros(&[cfg.width]))?,
                stack: StackParams::init(
                    "semantic.lm",
                    cfg.stack(cfg.semantic_blocks),
                    &mut params,
                    &mut rng,
                )?,
                s_w: params
                    .add("semantic.s.w", Tensor::zeros(&[cfg.width, cfg.semantic_width]))?,
                s_b: params.add("semantic.s.b", Tensor::zeros(&[cfg.semantic_width]))?,
                e_w: params.add(
                    "semantic.e.w",
                    Tensor::zeros(&[cfg.semantic_width, cfg.width]),
                )?,
                e_b: params.add("semantic.e.b", Tensor::zeros(&[cfg.width]))?,
            })
        } else {
            None
        };
        Ok(Model {
            params,
            w: Wiring {
                cfg,
                emb,
                discrete,
                continuous,
                semantic,
                encoder,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.w.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter access, for checkpoint restoration.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn semantic_encoder(&self) -> &SemanticEncoder {
        &self.w.encoder
    }

    /// Replaces the frozen semantic encoder, for checkpoint restoration.
    pub fn set_semantic_encoder(&mut self, encoder: SemanticEncoder) -> Result<()> {
        let (fw, sw) = (encoder.proj.rows(), encoder.proj.cols());
        if fw != self.w.cfg.frame_width || sw != self.w.cfg.semantic_width {
            return Err(Error::shape(format!(
                "semantic projection is {fw}x{sw}, model expects {}x{}",
                self.w.cfg.frame_width, self.w.cfg.semantic_width
            )));
        }
        self.w.encoder = encoder;
        Ok(())
    }

    /// The neutral conditioning stream used in place of a disabled module.
    pub fn zero_conditioning(&self, frames: usize) -> Tensor {
        Tensor::zeros(&[frames, self.w.cfg.width])
    }

    /// Runs the continuous module on one utterance's noisy frames and
    /// re-tokenizes the regression with the frozen codec.
    pub fn continuous_forward(&self, frames: &Tensor, cb: &Codebooks) -> Result<ContinuousOut> {
        if self.w.continuous.is_none() {
            return Err(Error::config("continuous module is disabled"));
        }
        self.w.check_codebooks(cb)?;
        let (l, fw) = frames.expect_2d("continuous input")?;
        if fw != self.w.cfg.frame_width {
            return Err(Error::shape(format!(
                "continuous input width {fw} does not match the model's {}",
                self.w.cfg.frame_width
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(frames.clone());
        let estimate = self.w.continuous_trunk(&mut g, x, l)?;
        let value = g.value(estimate).clone();
        let (tokens, delta) = rvq_encode(&value, cb)?;
        let cond = self.w.sum_embeddings(&mut g, &stage_cols(&tokens))?;
        let cond_value = g.value(cond).clone();
        Ok(ContinuousOut {
            frames: value,
            tokens,
            delta,
            cond: cond_value,
        })
    }

    /// Runs the semantic module on one utterance's noisy frames.
    pub fn semantic_forward(&self, frames: &Tensor) -> Result<SemanticOut> {
        let Some(sw) = &self.w.semantic else {
            return Err(Error::config("semantic module is disabled"));
        };
        let feats = self.w.encoder.encode(frames)?;
        let l = feats.rows();
        let mut g = Graph::new(&self.params);
        let x = g.input(feats);
        let estimate = self.w.semantic_trunk(&mut g, x, l)?;
        let cond = self.w.affine_p(&mut g, estimate, sw.e_w, sw.e_b)?;
        let features = g.value(estimate).clone();
        let cond_value = g.value(cond).clone();
        Ok(SemanticOut {
            features,
            cond: cond_value,
        })
    }

    /// Runs the discrete module on a (possibly mask-bearing) token grid
    /// with the given conditioning streams; pass [`Model::zero_conditioning`]
    /// for modules that are disabled or intentionally bypassed.
    pub fn discrete_forward(
        &self,
        tokens: &TokenGrid,
        e_cont: &Tensor,
        e_sem: &Tensor,
    ) -> Result<DiscreteOut> {
        let Some(dw) = &self.w.discrete else {
            return Err(Error::config("discrete module is disabled"));
        };
        let cfg = &self.w.cfg;
        if tokens.stages() != cfg.stages {
            return Err(Error::shape(format!(
                "token grid has {} stages, model expects {}",
                tokens.stages(),
                cfg.stages
            )));
        }
        let l = tokens.frames();
        for (name, cond) in [("continuous", e_cont), ("semantic", e_sem)] {
            let (cl, cw) = cond.expect_2d("conditioning stream")?;
            if cl != l || cw != cfg.width {
                return Err(Error::shape(format!(
                    "{name} conditioning is {cl}x{cw}, expected {l}x{}",
                    cfg.width
                )));
            }
        }
        let mut g = Graph::new(&self.params);
        let ec = g.input(e_cont.clone());
        let es = g.input(e_sem.clone());
        let trunk = self
            .w
            .discrete_trunk(&mut g, &stage_cols(tokens), ec, es, l)?;
        let logits = self.w.affine_p(&mut g, trunk, dw.head_w, dw.head_b)?;
        let p0 = TokenDistributions::from_logits(g.value(logits), cfg.stages, cfg.codebook_size);
        let critic_logits = match dw.critic {
            Some((cw, cbias)) => {
                let v = self.w.affine_p(&mut g, trunk, cw, cbias)?;
                Some(g.value(v).clone())
            }
            None => None,
        };
        Ok(DiscreteOut { p0, critic_logits })
    }

    /// One optimizer update on a batch of utterances.
    ///
    /// Each item runs the full training pipeline: analyze both waveforms,
    /// tokenize the clean frames, draw that item's mask at its `t`, and
    /// assemble the composite objective. The returned total always equals
    /// the sum of the four components; a non-finite total aborts the step
    /// before any parameter changes.
    pub fn train_step(
        &mut self,
        examples: &[TrainExample],
        signal_cfg: &SignalConfig,
        cb: &Codebooks,
        opt: &mut AdamW,
    ) -> Result<LossBreakdown> {
        let pb = self.w.prepare_batch(examples, signal_cfg, cb)?;
        let (breakdown, grads) = {
            let mut g = Graph::new(&self.params);
            let lv = self.w.batch_losses(&mut g, &pb, cb)?;
            let breakdown = LossBreakdown {
                total: g.value(lv.total).data()[0],
                ce: g.value(lv.ce).data()[0],
                bce: g.value(lv.bce).data()[0],
                mae_cont: g.value(lv.mae_cont).data()[0],
                mae_sem: g.value(lv.mae_sem).data()[0],
                masked_positions: lv.masked,
            };
            if !breakdown.total.is_finite() {
                return Err(Error::numeric(format!(
                    "training step produced a non-finite loss: total {} (ce {}, bce {}, \
                     mae_cont {}, mae_sem {})",
                    breakdown.total,
                    breakdown.ce,
                    breakdown.bce,
                    breakdown.mae_cont,
                    breakdown.mae_sem
                )));
            }
            g.backward(lv.total)?;
            let mut grads = self.params.zero_grads();
            for (id, gs) in g.param_grads() {
                grads[id].copy_from_slice(gs);
            }
            (breakdown, grads)
        };
        opt.step(&mut self.params, &grads)?;
        Ok(breakdown)
    }

    /// Central finite-difference verification of the full composite
    /// objective on the given batch.
    pub fn grad_check_composite(
        &mut self,
        examples: &[TrainExample],
        signal_cfg: &SignalConfig,
        cb: &Codebooks,
        gc: &GradCheckConfig,
    ) -> Result<GradCheckReport> {
        let pb = self.w.prepare_batch(examples, signal_cfg, cb)?;
        let Model { params, w } = self;
        grad_check(
            params,
            |ps, want_grads| {
                let mut g = Graph::new(ps);
                let lv = w.batch_losses(&mut g, &pb, cb)?;
                let loss = g.value(lv.total).data()[0];
                if !want_grads {
                    return Ok((loss, None));
                }
                g.backward(lv.total)?;
                let mut grads = ps.zero_grads();
                for (id, gs) in g.param_grads() {
                    grads[id].copy_from_slice(gs);
                }
                Ok((loss, Some(grads)))
            },
            gc,
        )
    }
}
