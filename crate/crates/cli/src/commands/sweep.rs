//! `sweep-t`: evaluate the single-step reverse process across masking
//! levels.
//!
//! Each row fixes one masking level `t`, runs the one-iteration reverse
//! process with quantization-error initialization over the validation set,
//! and reports the metric means plus the schedule's initial masked count.

use std::path::PathBuf;

use rayon::prelude::*;

use remask_core::infer::{Enhancer, InferenceConfig, InitStrategy};
use remask_core::masking::{mask_count, ScheduleParams};
use remask_core::metrics::EvalReport;
use remask_core::{Error, Result};

use crate::corpus::read_noisy;
use crate::report::{EvalContext, SystemOutput, METRIC_DIRECTIONS};
use crate::seeds::{stream_seed, Stream};
use crate::util::{prepare_out_dir, write_text};

use super::{model_dir, require_codebooks, require_corpus, require_model, Ctx};

pub struct SweepOpts {
    pub checkpoint: Option<PathBuf>,
    /// Masking levels, one row each; `None` means the built-in default.
    pub t_list: Option<Vec<f64>>,
}

/// The default masking levels, spanning the schedule and including the
/// single-step operating point 0.1.
pub const DEFAULT_T: [f64; 11] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

pub const CSV_HEADER: &str =
    "t,masked_initial,token_accuracy,si_sdr_improvement,frame_mae,phone_accuracy";

pub fn run(ctx: &Ctx, opts: &SweepOpts) -> Result<()> {
    let cfg = &ctx.cfg;
    let t_list: Vec<f64> = match &opts.t_list {
        Some(list) => list.clone(),
        None => DEFAULT_T.to_vec(),
    };
    if t_list.is_empty() {
        return Err(Error::config(
            "the sweep needs at least one masking level (pass --t values)",
        ));
    }
    require_corpus(cfg)?;
    let (cb, _) = require_codebooks(cfg)?;
    let ckpt_dir = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| model_dir(cfg, "model"));
    let (model, _) = require_model(cfg, &ckpt_dir)?;
    if !model.config().discrete_enabled || !model.config().continuous_enabled {
        return Err(Error::config(
            "the sweep needs a checkpoint with both the discrete and continuous modules",
        ));
    }

    let ectx = EvalContext::build(cfg, &cb)?;
    let enhancer = Enhancer::new(&model, &cb, &cfg.signal)?;
    let sched = ScheduleParams::new(cfg.frames_per_utterance(), cfg.rvq.stages)?;
    let val_dir = crate::corpus::split_dir(cfg, crate::corpus::Split::Val);

    let mut report = EvalReport::new();
    let mut csv = format!("{CSV_HEADER}\n");
    let mut printed = format!("{CSV_HEADER}\n");
    for &t in &t_list {
        let label = format!("t={t}");
        let outputs: Vec<SystemOutput> = ectx
            .stems
            .par_iter()
            .enumerate()
            .map(|(i, stem)| {
                let noisy = read_noisy(cfg, &val_dir, stem)?;
                let icfg = InferenceConfig {
                    t,
                    steps: 1,
                    init: InitStrategy::QuantError,
                    candidates: cfg.infer.candidates,
                    critic_confidence: cfg.infer.critic_confidence,
                    seed: stream_seed(cfg.seed, Stream::Infer, i as u64),
                };
                let (tokens, _) = enhancer.enhance_tokens(&noisy, &icfg)?;
                let wave = enhancer.decode(&tokens)?;
                Ok(SystemOutput { wave, tokens })
            })
            .collect::<Result<_>>()?;
        ectx.score_system(&mut report, &label, &outputs)?;

        let masked = mask_count(t, sched)?;
        let mut row = format!("{t},{masked}");
        for (metric, _) in METRIC_DIRECTIONS {
            let (mean, _) = report
                .mean(&label, metric)
                .expect("system was just scored");
            row.push_str(&format!(",{mean}"));
        }
        csv.push_str(&row);
        csv.push('\n');
        printed.push_str(&row);
        printed.push('\n');
    }

    let dir = cfg.out.join("sweep");
    prepare_out_dir(&dir, ctx.force)?;
    write_text(&dir.join("sweep.csv"), &csv)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    print!("{printed}");
    println!("sweep: {}", dir.join("sweep.csv").display());
    Ok(())
}
