//! `enhance`: run a trained checkpoint over noisy waveforms.
//!
//! For each `<stem>.noisy.f64` in the input directory this writes
//! `<stem>.enhanced.{wav,f64}`, the final token grid as
//! `<stem>.tokens.json`, and (in reverse mode) the per-iteration trace as
//! `<stem>.trace.json`. A `meta.txt` records the checkpoint id and the
//! inference settings — never paths, so outputs are location-independent.

use std::path::PathBuf;

use rayon::prelude::*;

use remask_core::infer::{Enhancer, InferenceConfig};
use remask_core::{Error, Result};

use crate::config::{
    candidates_name, init_strategy_name, parse_candidates, parse_init_strategy, InferParams,
};
use crate::corpus::{read_noisy, scan_stems, split_dir, Split};
use crate::kv::KvDoc;
use crate::report::{trace_file, write_tokens, write_trace};
use crate::seeds::{stream_seed, Stream};
use crate::util::{prepare_out_dir, write_text};
use crate::wavio::write_pair;

use super::{check_tag, enhanced_root, model_dir, require_codebooks, require_model, Ctx};

pub struct EnhanceOpts {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub label: String,
    pub continuous_only: bool,
    pub t: Option<f64>,
    pub steps: Option<usize>,
    pub init: Option<String>,
    pub candidates: Option<String>,
}

impl EnhanceOpts {
    /// The configured inference settings with the command-line overrides
    /// applied.
    fn resolve_infer(&self, base: &InferParams) -> Result<InferParams> {
        let mut infer = base.clone();
        if let Some(t) = self.t {
            infer.t = t;
        }
        if let Some(steps) = self.steps {
            infer.steps = steps;
        }
        if let Some(init) = &self.init {
            infer.init = parse_init_strategy(init)?;
        }
        if let Some(candidates) = &self.candidates {
            infer.candidates = parse_candidates(candidates)?;
        }
        Ok(infer)
    }
}

pub fn run(ctx: &Ctx, opts: &EnhanceOpts) -> Result<()> {
    let cfg = &ctx.cfg;
    check_tag(&opts.label)?;
    let (cb, _) = require_codebooks(cfg)?;
    let ckpt_dir = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| model_dir(cfg, "model"));
    let (model, loaded) = require_model(cfg, &ckpt_dir)?;
    if !opts.continuous_only && !model.config().discrete_enabled {
        return Err(Error::config(
            "checkpoint has no discrete module; enhance it with --continuous-only",
        ));
    }
    if opts.continuous_only && !model.config().continuous_enabled {
        return Err(Error::config(
            "--continuous-only needs a checkpoint with the continuous module enabled",
        ));
    }

    let input = opts
        .input
        .clone()
        .unwrap_or_else(|| split_dir(cfg, Split::Val));
    let stems = scan_stems(&input)?;
    let out_dir = enhanced_root(cfg).join(&opts.label);
    prepare_out_dir(&out_dir, ctx.force)?;

    let infer = opts.resolve_infer(&cfg.infer)?;
    let enhancer = Enhancer::new(&model, &cb, &cfg.signal)?;
    stems.par_iter().enumerate().try_for_each(|(i, stem)| {
        let noisy = read_noisy(cfg, &input, stem)?;
        let tokens = if opts.continuous_only {
            enhancer.continuous_only_tokens(&noisy)?
        } else {
            let icfg = InferenceConfig {
                t: infer.t,
                steps: infer.steps,
                init: infer.init,
                candidates: infer.candidates,
                critic_confidence: infer.critic_confidence,
                seed: stream_seed(cfg.seed, Stream::Infer, i as u64),
            };
            let (tokens, trace) = enhancer.enhance_tokens(&noisy, &icfg)?;
            write_trace(
                &out_dir.join(format!("{stem}.trace.json")),
                &trace_file(&icfg, &trace),
            )?;
            tokens
        };
        let wave = enhancer.decode(&tokens)?;
        write_pair(&out_dir, &format!("{stem}.enhanced"), &wave)?;
        write_tokens(&out_dir.join(format!("{stem}.tokens.json")), &tokens)
    })?;

    let mut meta = KvDoc::new();
    meta.push("checkpoint.id", loaded.id())?;
    meta.push(
        "mode",
        if opts.continuous_only {
            "continuous_only"
        } else {
            "reverse"
        },
    )?;
    if !opts.continuous_only {
        meta.push("infer.t", infer.t.to_string())?;
        meta.push("infer.steps", infer.steps.to_string())?;
        meta.push("infer.init", init_strategy_name(infer.init))?;
        meta.push("infer.candidates", candidates_name(infer.candidates))?;
        meta.push("infer.critic_confidence", infer.critic_confidence.to_string())?;
    }
    meta.push("utterances", stems.len().to_string())?;
    write_text(&out_dir.join("meta.txt"), &meta.serialize())?;

    println!(
        "enhanced {} utterances ({}) -> {}",
        stems.len(),
        if opts.continuous_only {
            "continuous-only".to_string()
        } else {
            format!(
                "t={} steps={} init={}",
                infer.t,
                infer.steps,
                init_strategy_name(infer.init)
            )
        },
        out_dir.display()
    );
    Ok(())
}
