//! Subcommand implementations.
//!
//! Every command receives the resolved [`RunConfig`] plus the global
//! `--force` flag through [`Ctx`] and communicates failure through
//! [`remask_core::Error`], which the binary entry point turns into a
//! single-line categorized message and a nonzero exit.

pub mod ablate;
pub mod enhance;
pub mod eval;
pub mod gen_data;
pub mod sweep;
pub mod train;
pub mod train_rvq;

use std::path::{Path, PathBuf};

use remask_core::ckpt::{self, Checkpoint};
use remask_core::model::Model;
use remask_core::rvq::Codebooks;
use remask_core::{Error, Result};

use crate::config::{check_model_matches, RunConfig};
use crate::corpus::{check_corpus_compat, corpus_dir};

/// Everything a command needs besides its own arguments.
pub struct Ctx {
    pub cfg: RunConfig,
    pub force: bool,
}

/// Codebook checkpoint directory under the output root.
pub fn rvq_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("rvq")
}

/// Model checkpoint directory for a tag ("model", "model-contonly", …).
pub fn model_dir(cfg: &RunConfig, tag: &str) -> PathBuf {
    cfg.out.join(tag)
}

/// Root of per-label enhancement outputs.
pub fn enhanced_root(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("enhanced")
}

/// Tags become directory names, so keep them to one safe path component.
pub fn check_tag(tag: &str) -> Result<()> {
    if tag.is_empty()
        || !tag
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.')
        || tag.starts_with('.')
    {
        return Err(Error::config(format!(
            "name {tag:?} must be a plain directory name: ASCII letters, digits, '-', '_', '.'"
        )));
    }
    Ok(())
}

/// Loads the corpus meta file and refuses signal/corpus settings that
/// differ from the active configuration.
pub fn require_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = corpus_dir(cfg);
    if !dir.join("meta.txt").is_file() {
        return Err(Error::data(format!(
            "no corpus at {} (run gen-data first)",
            dir.display()
        )));
    }
    check_corpus_compat(cfg, &dir)?;
    Ok(dir)
}

/// Loads the fitted codebooks and refuses a geometry that differs from the
/// configuration.
pub fn require_codebooks(cfg: &RunConfig) -> Result<(Codebooks, Checkpoint)> {
    let dir = rvq_dir(cfg);
    if !dir.join(ckpt::MANIFEST_FILE).is_file() {
        return Err(Error::data(format!(
            "no codebook checkpoint at {} (run train-rvq first)",
            dir.display()
        )));
    }
    let (cb, loaded) = ckpt::load_codebooks(&dir)?;
    if cb.stage_count() != cfg.rvq.stages
        || cb.codebook_size() != cfg.rvq.codebook_size
        || cb.dim() != cfg.signal.d_emb
    {
        return Err(Error::config(format!(
            "codebooks at {} have {} stages of {} codewords in {} dims; the configuration \
             expects {} stages of {} in {}",
            dir.display(),
            cb.stage_count(),
            cb.codebook_size(),
            cb.dim(),
            cfg.rvq.stages,
            cfg.rvq.codebook_size,
            cfg.signal.d_emb
        )));
    }
    Ok((cb, loaded))
}

/// Loads a model checkpoint and refuses one whose geometry does not match
/// the configuration (its recorded module enables are honored).
pub fn require_model(cfg: &RunConfig, dir: &Path) -> Result<(Model, Checkpoint)> {
    if !dir.join(ckpt::MANIFEST_FILE).is_file() {
        return Err(Error::data(format!(
            "no model checkpoint at {} (run train first)",
            dir.display()
        )));
    }
    let (model, loaded) = ckpt::load_model(dir)?;
    check_model_matches(cfg, &model)?;
    Ok((model, loaded))
}
