//! Corpus layout and generation.
//!
//! A corpus directory holds `meta.txt` (the generating configuration,
//! canonical key/value form minus the output path) and two splits:
//!
//! ```text
//! corpus/
//!   meta.txt
//!   train/utt-00000.clean.wav  .clean.f64  .noisy.wav  .noisy.f64  .spec.json
//!   val/...
//! ```
//!
//! Clean utterances, noise sequences, and SNR draws each come from their
//! own seed stream, with train and validation on disjoint streams. All
//! files are deterministic functions of (configuration, seed), so two runs
//! produce byte-identical corpora.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use remask_core::signal::{degrade, generate_utterance, DegradationSpec, UtteranceSpec, Waveform};
use remask_core::{Error, Result};

use crate::config::RunConfig;
use crate::seeds::{stream_seed, Stream};
use crate::util::{prepare_out_dir, read_text, write_text};
use crate::wavio::{read_f64, write_pair};

/// One half of the train/validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn gen_stream(self) -> Stream {
        match self {
            Split::Train => Stream::GenTrain,
            Split::Val => Stream::GenVal,
        }
    }

    fn noise_stream(self) -> Stream {
        match self {
            Split::Train => Stream::NoiseTrain,
            Split::Val => Stream::NoiseVal,
        }
    }

    fn snr_stream(self) -> Stream {
        match self {
            Split::Train => Stream::SnrTrain,
            Split::Val => Stream::SnrVal,
        }
    }
}

pub fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("corpus")
}

pub fn split_dir(cfg: &RunConfig, split: Split) -> PathBuf {
    corpus_dir(cfg).join(split.dir_name())
}

pub fn utterance_stem(index: usize) -> String {
    format!("utt-{index:05}")
}

/// JSON shape of the latent-state sidecar.
#[derive(Serialize, Deserialize)]
struct SpecFile {
    states: Vec<usize>,
    f0_hz: Vec<f64>,
    harmonic_amps: Vec<Vec<f64>>,
    gain_db: f64,
}

pub fn write_spec(path: &Path, spec: &UtteranceSpec) -> Result<()> {
    let file = SpecFile {
        states: spec.states.clone(),
        f0_hz: spec.f0_hz.clone(),
        harmonic_amps: spec.harmonic_amps.clone(),
        gain_db: spec.gain_db,
    };
    let text = serde_json::to_string(&file).expect("spec serializes");
    write_text(path, &text)
}

pub fn read_spec(path: &Path) -> Result<UtteranceSpec> {
    let text = read_text(path)?;
    let file: SpecFile = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("cannot parse {}: {e}", path.display())))?;
    Ok(UtteranceSpec {
        states: file.states,
        f0_hz: file.f0_hz,
        harmonic_amps: file.harmonic_amps,
        gain_db: file.gain_db,
    })
}

/// The `meta.txt` contents: the full canonical configuration except the
/// output path, so corpora at different locations stay byte-identical.
pub fn corpus_meta_text(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for (k, v) in cfg.to_kv().pairs() {
        if k != "out" {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

/// Generates both splits plus `meta.txt` under `<out>/corpus`.
pub fn generate_corpus(cfg: &RunConfig, force: bool) -> Result<()> {
    let root = corpus_dir(cfg);
    prepare_out_dir(&root, force)?;
    generate_split(cfg, Split::Train, cfg.corpus.train_utterances)?;
    generate_split(cfg, Split::Val, cfg.corpus.val_utterances)?;
    // The meta file is written last: its presence marks a complete corpus.
    write_text(&root.join("meta.txt"), &corpus_meta_text(cfg))
}

fn generate_split(cfg: &RunConfig, split: Split, count: usize) -> Result<()> {
    let dir = split_dir(cfg, split);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))?;
    (0..count).into_par_iter().try_for_each(|i| {
        let (clean, noisy, spec) = render_utterance(cfg, split, i)?;
        let stem = utterance_stem(i);
        write_pair(&dir, &format!("{stem}.clean"), &clean)?;
        write_pair(&dir, &format!("{stem}.noisy"), &noisy)?;
        write_spec(&dir.join(format!("{stem}.spec.json")), &spec)
    })
}

/// Renders one corpus item in memory: the clean utterance, its degraded
/// pair, and the latent-state sidecar.
pub fn render_utterance(
    cfg: &RunConfig,
    split: Split,
    index: usize,
) -> Result<(Waveform, Waveform, UtteranceSpec)> {
    let i = index as u64;
    let (clean, spec) =
        generate_utterance(stream_seed(cfg.seed, split.gen_stream(), i), &cfg.signal)?;
    let (lo, hi) = (cfg.corpus.snr_db_min, cfg.corpus.snr_db_max);
    let snr_db = if lo < hi {
        ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, split.snr_stream(), i)).gen_range(lo..hi)
    } else {
        lo
    };
    let degradation = DegradationSpec {
        snr_db,
        clipping_threshold: cfg.corpus.clip_threshold,
        noise_seed: stream_seed(cfg.seed, split.noise_stream(), i),
    };
    let noisy = degrade(&clean, &degradation)?;
    Ok((clean, noisy, spec))
}

pub fn read_clean(cfg: &RunConfig, dir: &Path, stem: &str) -> Result<Waveform> {
    read_f64(&dir.join(format!("{stem}.clean.f64")), cfg.signal.sample_rate)
}

pub fn read_noisy(cfg: &RunConfig, dir: &Path, stem: &str) -> Result<Waveform> {
    read_f64(&dir.join(format!("{stem}.noisy.f64")), cfg.signal.sample_rate)
}

pub fn read_utterance_spec(dir: &Path, stem: &str) -> Result<UtteranceSpec> {
    read_spec(&dir.join(format!("{stem}.spec.json")))
}

/// Utterance stems of a split directory, by scanning for `*.noisy.f64`,
/// sorted — a deterministic ordering independent of directory iteration.
pub fn scan_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))?;
    let mut stems = Vec::new();
    for entry in entries {
        let name = entry
            .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))?
            .file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".noisy.f64") {
            stems.push(stem.to_string());
        }
    }
    if stems.is_empty() {
        return Err(Error::data(format!(
            "no utterances (*.noisy.f64) found in {}",
            dir.display()
        )));
    }
    stems.sort();
    Ok(stems)
}

/// Checks that an on-disk corpus was generated under the same signal and
/// corpus sections as the current configuration; mismatches are refused
/// with the differing keys spelled out.
pub fn check_corpus_compat(cfg: &RunConfig, corpus: &Path) -> Result<()> {
    let meta_path = corpus.join("meta.txt");
    let text = read_text(&meta_path).map_err(|_| {
        Error::data(format!(
            "{} is not a corpus directory (missing meta.txt); run gen-data first",
            corpus.display()
        ))
    })?;
    let (recorded, _) = RunConfig::parse(&text)?;
    let mine = cfg.to_kv();
    let theirs = recorded.to_kv();
    let mut diffs = Vec::new();
    for (k, v) in mine.pairs() {
        if !(k.starts_with("signal.") || k.starts_with("corpus.")) {
            continue;
        }
        let other = theirs.get(k).unwrap_or("<absent>");
        if v != other {
            diffs.push(format!("{k}: {other} (corpus) vs {v} (config)"));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "corpus at {} was generated under a different configuration: {}",
            corpus.display(),
            diffs.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    /// A sub-second corpus small enough for unit tests.
    pub fn tiny_config(out: &Path) -> RunConfig {
        let text = "\
signal.sample_rate = 800
signal.frame_len = 32
signal.hop = 16
signal.d_emb = 8
signal.k_phone = 3
signal.duration_samples = 800
signal.harmonics = 1
signal.f0_min_hz = 40
signal.f0_max_hz = 95
signal.gain_db_min = -12
signal.gain_db_max = -6
corpus.train_utterances = 4
corpus.val_utterances = 2
rvq.stages = 2
rvq.codebook_size = 8
rvq.iterations = 8
model.width = 16
model.semantic_width = 4
model.heads = 2
model.discrete_blocks = 1
model.continuous_blocks = 1
model.semantic_blocks = 1
train.steps = 3
train.batch = 2
";
        let (mut cfg, warnings) = RunConfig::parse(text).unwrap();
        assert!(warnings.is_empty());
        cfg.out = out.to_path_buf();
        cfg
    }

    #[test]
    fn generates_the_documented_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        generate_corpus(&cfg, false).unwrap();
        let train = split_dir(&cfg, Split::Train);
        let val = split_dir(&cfg, Split::Val);
        assert_eq!(scan_stems(&train).unwrap().len(), 4);
        assert_eq!(scan_stems(&val).unwrap().len(), 2);
        for ext in ["clean.wav", "clean.f64", "noisy.wav", "noisy.f64", "spec.json"] {
            assert!(train.join(format!("utt-00000.{ext}")).exists(), "{ext}");
        }
        check_corpus_compat(&cfg, &corpus_dir(&cfg)).unwrap();

        let clean = read_clean(&cfg, &train, "utt-00000").unwrap();
        let noisy = read_noisy(&cfg, &train, "utt-00000").unwrap();
        assert_eq!(clean.len(), 800);
        assert_eq!(noisy.len(), 800);
        assert_ne!(clean, noisy);
        let spec = read_utterance_spec(&train, "utt-00000").unwrap();
        assert_eq!(spec.states.len(), cfg.signal.segment_count());
    }

    #[test]
    fn splits_draw_different_utterances() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let (train0, _, _) = render_utterance(&cfg, Split::Train, 0).unwrap();
        let (val0, _, _) = render_utterance(&cfg, Split::Val, 0).unwrap();
        assert_ne!(train0, val0);
    }

    #[test]
    fn spec_sidecar_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let (_, _, spec) = render_utterance(&cfg, Split::Val, 1).unwrap();
        let path = dir.path().join("s.json");
        write_spec(&path, &spec).unwrap();
        assert_eq!(read_spec(&path).unwrap(), spec);
    }

    #[test]
    fn compat_check_names_differing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        generate_corpus(&cfg, false).unwrap();
        let mut other = cfg.clone();
        other.signal.k_phone = 4;
        other.corpus.snr_db_max = 30.0;
        let err = check_corpus_compat(&other, &corpus_dir(&other))
            .unwrap_err()
            .to_string();
        assert!(err.contains("signal.k_phone: 3 (corpus) vs 4 (config)"), "{err}");
        assert!(err.contains("corpus.snr_db_max: 20 (corpus) vs 30 (config)"), "{err}");
        // Seed differences are not a compatibility failure.
        let mut reseeded = cfg.clone();
        reseeded.seed = 99;
        check_corpus_compat(&reseeded, &corpus_dir(&reseeded)).unwrap();
    }
}
