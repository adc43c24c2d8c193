//! The run configuration: every knob of the pipeline in one flat,
//! diffable `key = value` file.
//!
//! Unknown keys parse with a warning (forward compatibility); known keys
//! are typed and validated. Serialization is canonical and complete, so
//! parse → serialize → parse is the identity and a serialized config fully
//! reproduces a run. Model geometry that is implied by other sections
//! (frame count, token stages, vocabulary, frame feature width) is derived,
//! not configured, so the pieces cannot drift apart.

use std::path::{Path, PathBuf};

use remask_core::infer::{InferenceConfig, InitStrategy, RemaskCandidates};
use remask_core::model::ModelConfig;
use remask_core::rvq::RvqTrainConfig;
use remask_core::signal::SignalConfig;
use remask_core::{Error, Result};

use crate::kv::KvDoc;

/// Corpus generation: sizes, degradation range, split.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    pub train_utterances: usize,
    pub val_utterances: usize,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Hard-clipping threshold applied after mixing, if any.
    pub clip_threshold: Option<f64>,
}

/// Model training loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Steps between training-log lines; 1 logs every step.
    pub log_interval: usize,
}

/// Trainable-model geometry that is not implied by other sections.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub width: usize,
    pub semantic_width: usize,
    pub heads: usize,
    pub discrete_blocks: usize,
    pub continuous_blocks: usize,
    pub semantic_blocks: usize,
    pub ffn_mult: usize,
}

/// Default inference settings (commands may override per run).
#[derive(Debug, Clone, PartialEq)]
pub struct InferParams {
    pub t: f64,
    pub steps: usize,
    pub init: InitStrategy,
    pub candidates: RemaskCandidates,
    pub critic_confidence: bool,
}

/// Which trainable modules a run disables, mirroring the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AblationFlags {
    pub no_semantic: bool,
    pub no_continuous: bool,
    pub continuous_only: bool,
    pub no_critic: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.continuous_only && (self.no_semantic || self.no_continuous || self.no_critic) {
            return Err(Error::config(
                "continuous-only already disables the discrete, semantic, and critic \
                 modules; combining it with other ablation flags is ambiguous",
            ));
        }
        Ok(())
    }

    /// Reconstructs the flags a model was trained with from the module
    /// enables recorded in its configuration.
    pub fn from_model_config(mc: &ModelConfig) -> Self {
        if !mc.discrete_enabled {
            return AblationFlags {
                continuous_only: true,
                ..AblationFlags::default()
            };
        }
        AblationFlags {
            no_semantic: !mc.semantic_enabled,
            no_continuous: !mc.continuous_enabled,
            continuous_only: false,
            no_critic: !mc.critic_enabled,
        }
    }
}

/// The complete configuration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub signal: SignalConfig,
    pub corpus: CorpusParams,
    pub rvq: RvqTrainConfig,
    /// Analysis frames sampled (deterministically) for codebook fitting.
    pub rvq_max_frames: usize,
    pub model: ModelShape,
    pub train: TrainParams,
    pub infer: InferParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            signal: SignalConfig::default(),
            corpus: CorpusParams {
                train_utterances: 2000,
                val_utterances: 200,
                snr_db_min: -5.0,
                snr_db_max: 20.0,
                clip_threshold: None,
            },
            rvq: RvqTrainConfig::default(),
            rvq_max_frames: 50_000,
            model: ModelShape {
                width: 32,
                semantic_width: 16,
                heads: 2,
                discrete_blocks: 2,
                continuous_blocks: 2,
                semantic_blocks: 1,
                ffn_mult: 2,
            },
            train: TrainParams {
                steps: 5000,
                batch: 16,
                lr: 1e-3,
                warmup: 200,
                weight_decay: 0.0,
                log_interval: 1,
            },
            infer: InferParams {
                t: 0.1,
                steps: 1,
                init: InitStrategy::QuantError,
                candidates: RemaskCandidates::Restricted,
                critic_confidence: false,
            },
        }
    }
}

pub fn init_strategy_name(init: InitStrategy) -> &'static str {
    match init {
        InitStrategy::QuantError => "quant_error",
        InitStrategy::Random => "random",
        InitStrategy::Full => "full",
    }
}

pub fn parse_init_strategy(v: &str) -> Result<InitStrategy> {
    match v {
        "quant_error" => Ok(InitStrategy::QuantError),
        "random" => Ok(InitStrategy::Random),
        "full" => Ok(InitStrategy::Full),
        _ => Err(Error::config(format!(
            "unknown init strategy {v:?} (expected quant_error, random, or full)"
        ))),
    }
}

pub fn candidates_name(c: RemaskCandidates) -> &'static str {
    match c {
        RemaskCandidates::Restricted => "restricted",
        RemaskCandidates::All => "all",
    }
}

pub fn parse_candidates(v: &str) -> Result<RemaskCandidates> {
    match v {
        "restricted" => Ok(RemaskCandidates::Restricted),
        "all" => Ok(RemaskCandidates::All),
        _ => Err(Error::config(format!(
            "unknown remask candidate policy {v:?} (expected restricted or all)"
        ))),
    }
}

fn parse_typed<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("config key {key}: {v:?} is not {what}")))
}

fn take_usize(doc: &mut KvDoc, key: &str, into: &mut usize) -> Result<()> {
    if let Some(v) = doc.take(key) {
        *into = parse_typed(key, v, "a non-negative integer")?;
    }
    Ok(())
}

fn take_u64(doc: &mut KvDoc, key: &str, into: &mut u64) -> Result<()> {
    if let Some(v) = doc.take(key) {
        *into = parse_typed(key, v, "a non-negative integer")?;
    }
    Ok(())
}

fn take_f64(doc: &mut KvDoc, key: &str, into: &mut f64) -> Result<()> {
    if let Some(v) = doc.take(key) {
        *into = parse_typed(key, v, "a number")?;
    }
    Ok(())
}

fn take_bool(doc: &mut KvDoc, key: &str, into: &mut bool) -> Result<()> {
    if let Some(v) = doc.take(key) {
        *into = match v {
            "true" => true,
            "false" => false,
            _ => {
                return Err(Error::config(format!(
                    "config key {key}: {v:?} is not `true` or `false`"
                )))
            }
        };
    }
    Ok(())
}

impl RunConfig {
    /// Parses a config document over the defaults; absent keys keep their
    /// default value. Returns the configuration plus one warning line per
    /// unrecognized key.
    pub fn from_kv(mut doc: KvDoc) -> Result<(Self, Vec<String>)> {
        let mut c = RunConfig::default();
        take_u64(&mut doc, "seed", &mut c.seed)?;
        if let Some(v) = doc.take("out") {
            c.out = PathBuf::from(v);
        }

        let mut sr = c.signal.sample_rate as u64;
        take_u64(&mut doc, "signal.sample_rate", &mut sr)?;
        c.signal.sample_rate = u32::try_from(sr)
            .map_err(|_| Error::config(format!("config key signal.sample_rate: {sr} too large")))?;
        take_usize(&mut doc, "signal.frame_len", &mut c.signal.frame_len)?;
        take_usize(&mut doc, "signal.hop", &mut c.signal.hop)?;
        take_usize(&mut doc, "signal.d_emb", &mut c.signal.d_emb)?;
        take_usize(&mut doc, "signal.k_phone", &mut c.signal.k_phone)?;
        take_usize(&mut doc, "signal.duration_samples", &mut c.signal.duration_samples)?;
        take_usize(&mut doc, "signal.harmonics", &mut c.signal.harmonics)?;
        take_f64(&mut doc, "signal.f0_min_hz", &mut c.signal.f0_min_hz)?;
        take_f64(&mut doc, "signal.f0_max_hz", &mut c.signal.f0_max_hz)?;
        take_f64(&mut doc, "signal.gain_db_min", &mut c.signal.gain_db.0)?;
        take_f64(&mut doc, "signal.gain_db_max", &mut c.signal.gain_db.1)?;

        take_usize(&mut doc, "corpus.train_utterances", &mut c.corpus.train_utterances)?;
        take_usize(&mut doc, "corpus.val_utterances", &mut c.corpus.val_utterances)?;
        take_f64(&mut doc, "corpus.snr_db_min", &mut c.corpus.snr_db_min)?;
        take_f64(&mut doc, "corpus.snr_db_max", &mut c.corpus.snr_db_max)?;
        if let Some(v) = doc.take("corpus.clip_threshold") {
            c.corpus.clip_threshold = if v == "none" {
                None
            } else {
                Some(parse_typed("corpus.clip_threshold", v, "a number or `none`")?)
            };
        }

        take_usize(&mut doc, "rvq.stages", &mut c.rvq.stages)?;
        take_usize(&mut doc, "rvq.codebook_size", &mut c.rvq.codebook_size)?;
        take_usize(&mut doc, "rvq.iterations", &mut c.rvq.iterations)?;
        take_usize(&mut doc, "rvq.max_frames", &mut c.rvq_max_frames)?;

        take_usize(&mut doc, "model.width", &mut c.model.width)?;
        take_usize(&mut doc, "model.semantic_width", &mut c.model.semantic_width)?;
        take_usize(&mut doc, "model.heads", &mut c.model.heads)?;
        take_usize(&mut doc, "model.discrete_blocks", &mut c.model.discrete_blocks)?;
        take_usize(&mut doc, "model.continuous_blocks", &mut c.model.continuous_blocks)?;
        take_usize(&mut doc, "model.semantic_blocks", &mut c.model.semantic_blocks)?;
        take_usize(&mut doc, "model.ffn_mult", &mut c.model.ffn_mult)?;

        take_usize(&mut doc, "train.steps", &mut c.train.steps)?;
        take_usize(&mut doc, "train.batch", &mut c.train.batch)?;
        take_f64(&mut doc, "train.lr", &mut c.train.lr)?;
        take_usize(&mut doc, "train.warmup", &mut c.train.warmup)?;
        take_f64(&mut doc, "train.weight_decay", &mut c.train.weight_decay)?;
        take_usize(&mut doc, "train.log_interval", &mut c.train.log_interval)?;

        take_f64(&mut doc, "infer.t", &mut c.infer.t)?;
        take_usize(&mut doc, "infer.steps", &mut c.infer.steps)?;
        if let Some(v) = doc.take("infer.init") {
            c.infer.init = parse_init_strategy(v)?;
        }
        if let Some(v) = doc.take("infer.candidates") {
            c.infer.candidates = parse_candidates(v)?;
        }
        take_bool(&mut doc, "infer.critic_confidence", &mut c.infer.critic_confidence)?;

        let warnings = doc
            .unused_keys()
            .iter()
            .map(|k| format!("warning: unknown config key {k:?} ignored"))
            .collect();
        c.validate()?;
        Ok((c, warnings))
    }

    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        Self::from_kv(KvDoc::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical, complete serialization: every key, grouped by section.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        let mut p = |k: &str, v: String| {
            doc.push(k, v).expect("canonical config keys are valid");
        };
        p("seed", self.seed.to_string());
        p("out", self.out.display().to_string());
        p("signal.sample_rate", self.signal.sample_rate.to_string());
        p("signal.frame_len", self.signal.frame_len.to_string());
        p("signal.hop", self.signal.hop.to_string());
        p("signal.d_emb", self.signal.d_emb.to_string());
        p("signal.k_phone", self.signal.k_phone.to_string());
        p("signal.duration_samples", self.signal.duration_samples.to_string());
        p("signal.harmonics", self.signal.harmonics.to_string());
        p("signal.f0_min_hz", self.signal.f0_min_hz.to_string());
        p("signal.f0_max_hz", self.signal.f0_max_hz.to_string());
        p("signal.gain_db_min", self.signal.gain_db.0.to_string());
        p("signal.gain_db_max", self.signal.gain_db.1.to_string());
        p("corpus.train_utterances", self.corpus.train_utterances.to_string());
        p("corpus.val_utterances", self.corpus.val_utterances.to_string());
        p("corpus.snr_db_min", self.corpus.snr_db_min.to_string());
        p("corpus.snr_db_max", self.corpus.snr_db_max.to_string());
        p(
            "corpus.clip_threshold",
            self.corpus
                .clip_threshold
                .map_or("none".to_string(), |c| c.to_string()),
        );
        p("rvq.stages", self.rvq.stages.to_string());
        p("rvq.codebook_size", self.rvq.codebook_size.to_string());
        p("rvq.iterations", self.rvq.iterations.to_string());
        p("rvq.max_frames", self.rvq_max_frames.to_string());
        p("model.width", self.model.width.to_string());
        p("model.semantic_width", self.model.semantic_width.to_string());
        p("model.heads", self.model.heads.to_string());
        p("model.discrete_blocks", self.model.discrete_blocks.to_string());
        p("model.continuous_blocks", self.model.continuous_blocks.to_string());
        p("model.semantic_blocks", self.model.semantic_blocks.to_string());
        p("model.ffn_mult", self.model.ffn_mult.to_string());
        p("train.steps", self.train.steps.to_string());
        p("train.batch", self.train.batch.to_string());
        p("train.lr", self.train.lr.to_string());
        p("train.warmup", self.train.warmup.to_string());
        p("train.weight_decay", self.train.weight_decay.to_string());
        p("train.log_interval", self.train.log_interval.to_string());
        p("infer.t", self.infer.t.to_string());
        p("infer.steps", self.infer.steps.to_string());
        p("infer.init", init_strategy_name(self.infer.init).to_string());
        p("infer.candidates", candidates_name(self.infer.candidates).to_string());
        p("infer.critic_confidence", self.infer.critic_confidence.to_string());
        doc
    }

    pub fn serialize(&self) -> String {
        self.to_kv().serialize()
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.rvq.validate()?;
        if self.corpus.train_utterances == 0 || self.corpus.val_utterances == 0 {
            return Err(Error::config("corpus: train and val sizes must be positive"));
        }
        if !(self.corpus.snr_db_min.is_finite() && self.corpus.snr_db_max.is_finite())
            || self.corpus.snr_db_min > self.corpus.snr_db_max
        {
            return Err(Error::config(format!(
                "corpus: SNR range {}..{} dB is not an ordered finite range",
                self.corpus.snr_db_min, self.corpus.snr_db_max
            )));
        }
        if let Some(c) = self.corpus.clip_threshold {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::config(format!(
                    "corpus: clip threshold {c} outside (0, 1]"
                )));
            }
        }
        if self.rvq_max_frames == 0 {
            return Err(Error::config("rvq.max_frames must be positive"));
        }
        if self.train.steps == 0 || self.train.batch == 0 || self.train.log_interval == 0 {
            return Err(Error::config(
                "train: steps, batch, and log_interval must be positive",
            ));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::config(format!(
                "train: learning rate {} must be a positive number",
                self.train.lr
            )));
        }
        if !(self.train.weight_decay.is_finite() && self.train.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "train: weight decay {} must be a non-negative number",
                self.train.weight_decay
            )));
        }
        // Model shape and inference settings get their full checks from the
        // core config types; build them once here so a bad config fails at
        // parse time rather than mid-pipeline.
        self.model_config(AblationFlags::default())?;
        self.inference_config(0).validate()?;
        Ok(())
    }

    /// Frames per utterance on the analysis grid.
    pub fn frames_per_utterance(&self) -> usize {
        self.signal.frame_count(self.signal.duration_samples)
    }

    /// The model architecture this configuration implies. Frame count,
    /// token stages, vocabulary, and frame feature width are derived from
    /// the signal and quantizer sections.
    pub fn model_config(&self, flags: AblationFlags) -> Result<ModelConfig> {
        flags.validate()?;
        let cfg = ModelConfig {
            frames: self.frames_per_utterance(),
            stages: self.rvq.stages,
            codebook_size: self.rvq.codebook_size,
            width: self.model.width,
            semantic_width: self.model.semantic_width,
            frame_width: self.signal.d_emb,
            heads: self.model.heads,
            discrete_blocks: self.model.discrete_blocks,
            continuous_blocks: self.model.continuous_blocks,
            semantic_blocks: self.model.semantic_blocks,
            ffn_mult: self.model.ffn_mult,
            discrete_enabled: !flags.continuous_only,
            continuous_enabled: !flags.no_continuous,
            semantic_enabled: !(flags.no_semantic || flags.continuous_only),
            critic_enabled: !(flags.no_critic || flags.continuous_only),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configured inference settings with a concrete seed (random
    /// initialization draws per-utterance seeds from the run seed).
    pub fn inference_config(&self, seed: u64) -> InferenceConfig {
        InferenceConfig {
            t: self.infer.t,
            steps: self.infer.steps,
            init: self.infer.init,
            candidates: self.infer.candidates,
            critic_confidence: self.infer.critic_confidence,
            seed,
        }
    }
}

/// Checks that a loaded model matches the geometry this configuration
/// implies. The model's own recorded module enables are honored (a
/// checkpoint trained with ablation flags is fine); any other difference —
/// frame count, width, vocabulary — is refused with a field-by-field diff.
pub fn check_model_matches(cfg: &RunConfig, model: &remask_core::model::Model) -> Result<()> {
    let flags = AblationFlags::from_model_config(model.config());
    let expected = cfg.model_config(flags)?;
    let diff = remask_core::ckpt::model_config_diff(&expected, model.config());
    if diff.is_empty() {
        return Ok(());
    }
    Err(Error::config(format!(
        "checkpoint does not match the configuration (expected vs checkpoint): {}",
        diff.join(", ")
    )))
}
