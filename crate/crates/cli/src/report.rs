//! Evaluation artifacts: token and trace sidecars, the shared metric
//! battery, and rank tables.
//!
//! Every system is scored on the same four metrics over the identical
//! validation utterances: token accuracy against the clean token grid,
//! SI-SDR improvement over the noisy input, frame-feature mean absolute
//! error against the clean analysis frames, and latent-class accuracy from
//! a classifier fitted on clean training utterances. Reports carry no
//! filesystem paths, so two runs of the same configuration and seed produce
//! byte-identical report files regardless of where they ran.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use remask_core::grid::TokenGrid;
use remask_core::infer::{InferenceConfig, ReverseTrace};
use remask_core::metrics::{
    frame_mae, phone_accuracy, rank_aggregate, si_sdr_improvement, token_accuracy, Direction,
    EvalReport, PhoneClassifier,
};
use remask_core::rvq::{rvq_encode, Codebooks};
use remask_core::signal::{analyze, UtteranceSpec, Waveform};
use remask_core::tensor::Tensor;
use remask_core::{Error, Result};

use crate::config::{candidates_name, init_strategy_name, RunConfig};
use crate::corpus::{read_clean, read_noisy, read_utterance_spec, scan_stems, split_dir, Split};
use crate::util::{read_text, write_text};

/// Clean training utterances used to fit the latent-class classifier.
const CLASSIFIER_FIT_UTTERANCES: usize = 200;

/// The metric battery and its better-is directions, in report column order.
pub const METRIC_DIRECTIONS: [(&str, Direction); 4] = [
    ("token_accuracy", Direction::HigherIsBetter),
    ("si_sdr_improvement", Direction::HigherIsBetter),
    ("frame_mae", Direction::LowerIsBetter),
    ("phone_accuracy", Direction::HigherIsBetter),
];

/// JSON sidecar for a token grid.
#[derive(Serialize, Deserialize)]
pub struct TokensFile {
    pub frames: usize,
    pub stages: usize,
    pub data: Vec<u32>,
}

pub fn write_tokens(path: &Path, grid: &TokenGrid) -> Result<()> {
    let file = TokensFile {
        frames: grid.frames(),
        stages: grid.stages(),
        data: grid.data().to_vec(),
    };
    write_text(path, &serde_json::to_string(&file).expect("tokens serialize"))
}

pub fn read_tokens(path: &Path) -> Result<TokenGrid> {
    let text = read_text(path)?;
    let file: TokensFile = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("cannot parse {}: {e}", path.display())))?;
    TokenGrid::from_vec(file.frames, file.stages, file.data)
}

/// JSON sidecar for a reverse-process trace: the settings plus one row per
/// iteration (time, masked count after remasking, mean confidence, and the
/// token grid entering the next iteration).
#[derive(Serialize, Deserialize)]
pub struct TraceFile {
    pub t: f64,
    pub steps: usize,
    pub init: String,
    pub candidates: String,
    pub frames: usize,
    pub stages: usize,
    pub rows: Vec<TraceRow>,
}

#[derive(Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub masked: usize,
    pub mean_confidence: f64,
    pub grid: Vec<u32>,
}

pub fn trace_file(cfg: &InferenceConfig, trace: &ReverseTrace) -> TraceFile {
    let (frames, stages) = trace
        .steps
        .first()
        .map(|s| (s.grid.frames(), s.grid.stages()))
        .unwrap_or((0, 0));
    TraceFile {
        t: cfg.t,
        steps: cfg.steps,
        init: init_strategy_name(cfg.init).to_string(),
        candidates: candidates_name(cfg.candidates).to_string(),
        frames,
        stages,
        rows: trace
            .steps
            .iter()
            .map(|s| TraceRow {
                t: s.t,
                masked: s.masked,
                mean_confidence: s.mean_confidence,
                grid: s.grid.data().to_vec(),
            })
            .collect(),
    }
}

pub fn write_trace(path: &Path, file: &TraceFile) -> Result<()> {
    write_text(path, &serde_json::to_string(file).expect("trace serializes"))
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = read_text(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("cannot parse {}: {e}", path.display())))
}

/// One system's output for one utterance.
pub struct SystemOutput {
    pub wave: Waveform,
    pub tokens: TokenGrid,
}

/// The fixed evaluation ground truth: validation utterances, their clean
/// references (waveforms, analysis frames, token grids), and the fitted
/// latent-class classifier.
pub struct EvalContext {
    pub stems: Vec<String>,
    pub clean: Vec<Waveform>,
    pub noisy: Vec<Waveform>,
    pub specs: Vec<UtteranceSpec>,
    pub clean_frames: Vec<Tensor>,
    pub clean_tokens: Vec<TokenGrid>,
    pub classifier: PhoneClassifier,
    signal: remask_core::signal::SignalConfig,
}

impl EvalContext {
    /// Loads the validation split and fits the classifier on clean training
    /// utterances (up to [`CLASSIFIER_FIT_UTTERANCES`]).
    pub fn build(cfg: &RunConfig, codebooks: &Codebooks) -> Result<Self> {
        let val = split_dir(cfg, Split::Val);
        let stems = scan_stems(&val)?;
        let loaded: Vec<(Waveform, Waveform, UtteranceSpec, Tensor, TokenGrid)> = stems
            .par_iter()
            .map(|stem| {
                let clean = read_clean(cfg, &val, stem)?;
                let noisy = read_noisy(cfg, &val, stem)?;
                let spec = read_utterance_spec(&val, stem)?;
                let frames = analyze(&clean, &cfg.signal)?;
                let (tokens, _) = rvq_encode(&frames, codebooks)?;
                Ok((clean, noisy, spec, frames, tokens))
            })
            .collect::<Result<_>>()?;

        let train = split_dir(cfg, Split::Train);
        let fit_stems = scan_stems(&train).map_err(|_| {
            Error::data(format!(
                "classifier fitting needs the corpus train split at {}",
                train.display()
            ))
        })?;
        let fit: Vec<(Waveform, UtteranceSpec)> = fit_stems
            .par_iter()
            .take(CLASSIFIER_FIT_UTTERANCES)
            .map(|stem| Ok((read_clean(cfg, &train, stem)?, read_utterance_spec(&train, stem)?)))
            .collect::<Result<_>>()?;
        let classifier = PhoneClassifier::fit(&cfg.signal, fit.iter().map(|(w, s)| (w, s)))?;

        let mut ctx = EvalContext {
            stems,
            clean: Vec::new(),
            noisy: Vec::new(),
            specs: Vec::new(),
            clean_frames: Vec::new(),
            clean_tokens: Vec::new(),
            classifier,
            signal: cfg.signal.clone(),
        };
        for (clean, noisy, spec, frames, tokens) in loaded {
            ctx.clean.push(clean);
            ctx.noisy.push(noisy);
            ctx.specs.push(spec);
            ctx.clean_frames.push(frames);
            ctx.clean_tokens.push(tokens);
        }
        Ok(ctx)
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    /// Scores one system and appends its rows (one per utterance per
    /// metric) to the report. `outputs` must align with `self.stems`.
    pub fn score_system(
        &self,
        report: &mut EvalReport,
        system: &str,
        outputs: &[SystemOutput],
    ) -> Result<()> {
        if outputs.len() != self.stems.len() {
            return Err(Error::data(format!(
                "system {system}: {} outputs for {} validation utterances",
                outputs.len(),
                self.stems.len()
            )));
        }
        let values: Vec<[f64; 4]> = outputs
            .par_iter()
            .enumerate()
            .map(|(i, out)| {
                let acc = token_accuracy(&out.tokens, &self.clean_tokens[i])?;
                let sdri = si_sdr_improvement(&self.clean[i], &self.noisy[i], &out.wave)?;
                let mae = frame_mae(&analyze(&out.wave, &self.signal)?, &self.clean_frames[i])?;
                let phone = phone_accuracy(&out.wave, &self.specs[i], &self.classifier)?;
                Ok([acc, sdri, mae, phone])
            })
            .collect::<Result<_>>()?;
        for (stem, vals) in self.stems.iter().zip(values) {
            for ((metric, _), value) in METRIC_DIRECTIONS.iter().zip(vals) {
                report.push(stem.clone(), system, *metric, value);
            }
        }
        Ok(())
    }

    /// The noisy-input baseline as a system: the degraded waveform itself,
    /// tokenized by the quantizer.
    pub fn noisy_baseline(&self, codebooks: &Codebooks) -> Result<Vec<SystemOutput>> {
        self.noisy
            .par_iter()
            .map(|noisy| {
                let frames = analyze(noisy, &self.signal)?;
                let (tokens, _) = rvq_encode(&frames, codebooks)?;
                Ok(SystemOutput {
                    wave: noisy.clone(),
                    tokens,
                })
            })
            .collect()
    }
}

/// The average-rank table over every system in the report, best first
/// (ties broken by name for a stable listing), rendered as text lines.
pub fn ranked_table(report: &EvalReport) -> Result<String> {
    let mut ranks = rank_aggregate(report, &METRIC_DIRECTIONS)?;
    ranks.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut out = String::from("overall rank (average over metric ranks, lower is better):\n");
    for (i, (system, rank)) in ranks.iter().enumerate() {
        out.push_str(&format!("{:>2}. {system} average_rank={rank}\n", i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tokens.json");
        let grid = TokenGrid::from_vec(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        write_tokens(&path, &grid).unwrap();
        assert_eq!(read_tokens(&path).unwrap(), grid);
    }

    #[test]
    fn trace_sidecar_round_trips() {
        let cfg = InferenceConfig::default();
        let trace = ReverseTrace {
            steps: vec![remask_core::infer::TraceStep {
                t: 0.1,
                masked: 0,
                grid: TokenGrid::filled(2, 2, 1).unwrap(),
                mean_confidence: 0.75,
            }],
        };
        let file = trace_file(&cfg, &trace);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace.json");
        write_trace(&path, &file).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.rows[0].masked, 0);
        assert_eq!(back.rows[0].grid, vec![1, 1, 1, 1]);
        assert_eq!(back.init, "quant_error");
        assert_eq!(back.frames, 2);
    }
}
