//! `ablate`: the full inference/training ablation matrix.
//!
//! Inference rows reuse the fully trained model and vary only the reverse
//! process (initialization, masking level, iteration count); training rows
//! evaluate variants trained with modules disabled. Every row is scored on
//! the identical validation set next to the noisy-input baseline, and the
//! report closes with the average-rank table.

use rayon::prelude::*;

use remask_core::ckpt::MANIFEST_FILE;
use remask_core::infer::{Enhancer, InferenceConfig, InitStrategy};
use remask_core::metrics::EvalReport;
use remask_core::model::Model;
use remask_core::{Error, Result};

use crate::config::AblationFlags;
use crate::corpus::{read_noisy, split_dir, Split};
use crate::report::{ranked_table, EvalContext, SystemOutput};
use crate::seeds::{stream_seed, Stream};
use crate::util::{prepare_out_dir, write_text};

use super::{
    eval::BASELINE_SYSTEM, model_dir, require_codebooks, require_corpus, require_model, train, Ctx,
};

/// The trained variants the matrix needs, as (checkpoint tag, flags).
pub const VARIANTS: [(&str, AblationFlags); 5] = [
    (
        "model",
        AblationFlags { no_semantic: false, no_continuous: false, continuous_only: false, no_critic: false },
    ),
    (
        "model-nosem",
        AblationFlags { no_semantic: true, no_continuous: false, continuous_only: false, no_critic: false },
    ),
    (
        "model-nocont",
        AblationFlags { no_semantic: false, no_continuous: true, continuous_only: false, no_critic: false },
    ),
    (
        "model-contonly",
        AblationFlags { no_semantic: false, no_continuous: false, continuous_only: true, no_critic: false },
    ),
    (
        "model-nocrit",
        AblationFlags { no_semantic: false, no_continuous: false, continuous_only: false, no_critic: true },
    ),
];

enum RowMode {
    Reverse { t: f64, steps: usize, init: InitStrategy },
    ContinuousOnly,
}

struct Row {
    name: &'static str,
    /// Index into [`VARIANTS`].
    variant: usize,
    mode: RowMode,
}

pub fn run(ctx: &Ctx, train_missing: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    require_corpus(cfg)?;
    let (cb, _) = require_codebooks(cfg)?;

    // Make sure every variant checkpoint exists before any evaluation.
    for (tag, flags) in VARIANTS {
        let dir = model_dir(cfg, tag);
        if dir.join(MANIFEST_FILE).is_file() {
            continue;
        }
        if !train_missing {
            return Err(Error::config(format!(
                "variant checkpoint {tag:?} is missing; train it or pass --train-missing"
            )));
        }
        println!("training missing variant {tag}");
        train::run(
            &Ctx { cfg: cfg.clone(), force: false },
            &train::TrainOpts { tag: tag.to_string(), flags },
        )?;
    }
    let models: Vec<(Model, String)> = VARIANTS
        .iter()
        .map(|(tag, _)| {
            let (model, loaded) = require_model(cfg, &model_dir(cfg, tag))?;
            Ok((model, loaded.id()))
        })
        .collect::<Result<_>>()?;

    // Inference rows (fully trained model, varied reverse process) then
    // training rows (ablated models at their natural operating points).
    let d = &cfg.infer;
    let rows = [
        Row { name: "quant-error", variant: 0, mode: RowMode::Reverse { t: 0.1, steps: 1, init: InitStrategy::QuantError } },
        Row { name: "random-init", variant: 0, mode: RowMode::Reverse { t: 0.1, steps: 1, init: InitStrategy::Random } },
        Row { name: "full-n1", variant: 0, mode: RowMode::Reverse { t: 1.0, steps: 1, init: InitStrategy::Full } },
        Row { name: "full-n5", variant: 0, mode: RowMode::Reverse { t: 1.0, steps: 5, init: InitStrategy::Full } },
        Row { name: "full-n10", variant: 0, mode: RowMode::Reverse { t: 1.0, steps: 10, init: InitStrategy::Full } },
        Row { name: "no-semantic", variant: 1, mode: RowMode::Reverse { t: d.t, steps: d.steps, init: d.init } },
        Row { name: "no-continuous", variant: 2, mode: RowMode::Reverse { t: 1.0, steps: 1, init: InitStrategy::Full } },
        Row { name: "continuous-only", variant: 3, mode: RowMode::ContinuousOnly },
        Row { name: "no-critic", variant: 4, mode: RowMode::Reverse { t: d.t, steps: d.steps, init: d.init } },
    ];

    let ectx = EvalContext::build(cfg, &cb)?;
    let val_dir = split_dir(cfg, Split::Val);
    let mut report = EvalReport::new();
    report.add_meta("validation.utterances", ectx.len().to_string());
    for row in &rows {
        let (tag, _) = VARIANTS[row.variant];
        let (_, id) = &models[row.variant];
        report.add_meta(format!("system.{}.checkpoint", row.name), format!("{tag} {id}"));
        let setting = match &row.mode {
            RowMode::Reverse { t, steps, init } => format!(
                "t={t} steps={steps} init={}",
                crate::config::init_strategy_name(*init)
            ),
            RowMode::ContinuousOnly => "continuous_only".to_string(),
        };
        report.add_meta(format!("system.{}.infer", row.name), setting);
    }

    let baseline = ectx.noisy_baseline(&cb)?;
    ectx.score_system(&mut report, BASELINE_SYSTEM, &baseline)?;
    for row in &rows {
        let (model, _) = &models[row.variant];
        let enhancer = Enhancer::new(model, &cb, &cfg.signal)?;
        let outputs: Vec<SystemOutput> = ectx
            .stems
            .par_iter()
            .enumerate()
            .map(|(i, stem)| {
                let noisy = read_noisy(cfg, &val_dir, stem)?;
                let tokens = match &row.mode {
                    RowMode::ContinuousOnly => enhancer.continuous_only_tokens(&noisy)?,
                    RowMode::Reverse { t, steps, init } => {
                        let icfg = InferenceConfig {
                            t: *t,
                            steps: *steps,
                            init: *init,
                            candidates: d.candidates,
                            critic_confidence: d.critic_confidence
                                && model.config().critic_enabled,
                            seed: stream_seed(cfg.seed, Stream::Infer, i as u64),
                        };
                        enhancer.enhance_tokens(&noisy, &icfg)?.0
                    }
                };
                let wave = enhancer.decode(&tokens)?;
                Ok(SystemOutput { wave, tokens })
            })
            .collect::<Result<_>>()?;
        ectx.score_system(&mut report, row.name, &outputs)?;
        println!("scored {}", row.name);
    }

    let mut summary = report.summary();
    summary.push('\n');
    summary.push_str(&ranked_table(&report)?);

    let dir = cfg.out.join("ablate");
    prepare_out_dir(&dir, ctx.force)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("report: {}", dir.join("report.csv").display());
    Ok(())
}
