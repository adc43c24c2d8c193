//! `eval`: score enhancement outputs against the validation references.
//!
//! Each `--system name=dir` points at an `enhance` output directory; the
//! untouched noisy input is always scored alongside as the baseline. The
//! report lands in `<out>/eval` as a per-utterance CSV plus a mean/rank
//! summary.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use remask_core::metrics::EvalReport;
use remask_core::rvq::Codebooks;
use remask_core::{Error, Result};

use crate::report::{ranked_table, read_tokens, EvalContext, SystemOutput};
use crate::util::{prepare_out_dir, write_text};
use crate::wavio::read_f64;

use super::{require_codebooks, require_corpus, Ctx};

pub const BASELINE_SYSTEM: &str = "noisy";

pub struct EvalOpts {
    /// (system name, enhance output directory) pairs.
    pub systems: Vec<(String, PathBuf)>,
}

/// Splits a `name=dir` command-line system specification.
pub fn parse_system_spec(spec: &str) -> Result<(String, PathBuf)> {
    let (name, dir) = spec.split_once('=').ok_or_else(|| {
        Error::config(format!("system {spec:?} is not of the form name=dir"))
    })?;
    let name = name.trim();
    if name.is_empty() || name == BASELINE_SYSTEM {
        return Err(Error::config(format!(
            "system name {name:?} is empty or collides with the built-in baseline"
        )));
    }
    if name.contains(',') {
        return Err(Error::config(format!(
            "system name {name:?} cannot contain a comma (it names a CSV column)"
        )));
    }
    Ok((name.to_string(), PathBuf::from(dir.trim())))
}

/// Reads one system's enhanced waveforms and token grids for exactly the
/// given stems.
pub fn load_system_outputs(
    dir: &Path,
    stems: &[String],
    sample_rate: u32,
) -> Result<Vec<SystemOutput>> {
    stems
        .par_iter()
        .map(|stem| {
            let wave_path = dir.join(format!("{stem}.enhanced.f64"));
            if !wave_path.is_file() {
                return Err(Error::data(format!(
                    "{} has no output for validation utterance {stem}",
                    dir.display()
                )));
            }
            Ok(SystemOutput {
                wave: read_f64(&wave_path, sample_rate)?,
                tokens: read_tokens(&dir.join(format!("{stem}.tokens.json")))?,
            })
        })
        .collect()
}

/// Builds the full report: baseline plus each named system over the
/// validation set.
pub fn build_report(
    ctx: &EvalContext,
    codebooks: &Codebooks,
    systems: &[(String, PathBuf)],
    sample_rate: u32,
) -> Result<EvalReport> {
    let mut names = vec![BASELINE_SYSTEM.to_string()];
    for (name, _) in systems {
        if names.contains(name) {
            return Err(Error::config(format!("system {name:?} given twice")));
        }
        names.push(name.clone());
    }

    let mut report = EvalReport::new();
    report.add_meta("validation.utterances", ctx.len().to_string());
    let baseline = ctx.noisy_baseline(codebooks)?;
    ctx.score_system(&mut report, BASELINE_SYSTEM, &baseline)?;
    for (name, dir) in systems {
        let outputs = load_system_outputs(dir, &ctx.stems, sample_rate)?;
        ctx.score_system(&mut report, name, &outputs)?;
    }
    Ok(report)
}

pub fn run(ctx: &Ctx, opts: &EvalOpts) -> Result<()> {
    let cfg = &ctx.cfg;
    require_corpus(cfg)?;
    let (cb, _) = require_codebooks(cfg)?;
    let ectx = EvalContext::build(cfg, &cb)?;
    let report = build_report(&ectx, &cb, &opts.systems, cfg.signal.sample_rate)?;

    let mut summary = report.summary();
    if report.systems().len() >= 2 {
        summary.push('\n');
        summary.push_str(&ranked_table(&report)?);
    }

    let dir = cfg.out.join("eval");
    prepare_out_dir(&dir, ctx.force)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("report: {}", dir.join("report.csv").display());
    Ok(())
}
