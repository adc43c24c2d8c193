//! `train`: optimize a model on the corpus and write its checkpoint.
//!
//! Training is deliberately single-threaded and sequential over steps: the
//! optimizer state makes steps order-dependent, so determinism comes from a
//! fixed visit order plus per-step seeded batch draws. Every logged step
//! records all four loss components and their sum.

use std::fs::File;
use std::io::{BufWriter, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use remask_core::ckpt::save_model;
use remask_core::model::{LossBreakdown, Model, TrainExample};
use remask_core::signal::Waveform;
use remask_core::tensor::{AdamConfig, AdamW};
use remask_core::{Error, Result};

use crate::config::AblationFlags;
use crate::corpus::{read_clean, read_noisy, scan_stems, split_dir, Split};
use crate::seeds::{stream_seed, Stream};
use crate::util::prepare_out_dir;

use super::{check_tag, model_dir, require_codebooks, require_corpus, Ctx};

pub struct TrainOpts {
    pub tag: String,
    pub flags: AblationFlags,
}

pub fn run(ctx: &Ctx, opts: &TrainOpts) -> Result<()> {
    let cfg = &ctx.cfg;
    check_tag(&opts.tag)?;
    opts.flags.validate()?;
    require_corpus(cfg)?;
    let (cb, _) = require_codebooks(cfg)?;
    let train_split = split_dir(cfg, Split::Train);
    let stems = scan_stems(&train_split)?;
    let mcfg = cfg.model_config(opts.flags)?;

    let dir = model_dir(cfg, &opts.tag);
    prepare_out_dir(&dir, ctx.force)?;
    let log_file = File::create(dir.join("train.log"))
        .map_err(|e| Error::data(format!("cannot create training log: {e}")))?;
    let mut log = BufWriter::new(log_file);

    let mut model = Model::new(mcfg, stream_seed(cfg.seed, Stream::ModelInit, 0))?;
    let mut opt = AdamW::new(
        AdamConfig {
            lr: cfg.train.lr,
            warmup_steps: cfg.train.warmup,
            weight_decay: cfg.train.weight_decay,
            ..AdamConfig::default()
        },
        model.params(),
    );

    let steps = cfg.train.steps;
    let batch = cfg.train.batch;
    let echo_every = (steps / 10).max(1);
    let mut last = None;
    for step in 0..steps {
        // Each step draws its batch (indices, masking levels) from its own
        // seeded stream, so step k's batch is independent of how many steps
        // ran before it.
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::TrainBatch, step as u64));
        let draws: Vec<(usize, f64, u64)> = (0..batch)
            .map(|slot| {
                let idx = rng.gen_range(0..stems.len());
                // gen() covers [0, 1); flip it to (0, 1] so every example
                // masks at least the schedule's minimum.
                let t = 1.0 - rng.gen::<f64>();
                let mask_seed =
                    stream_seed(cfg.seed, Stream::TrainMask, (step * batch + slot) as u64);
                (idx, t, mask_seed)
            })
            .collect();
        let waves: Vec<(Waveform, Waveform)> = draws
            .iter()
            .map(|&(idx, _, _)| {
                let stem = &stems[idx];
                Ok((
                    read_clean(cfg, &train_split, stem)?,
                    read_noisy(cfg, &train_split, stem)?,
                ))
            })
            .collect::<Result<_>>()?;
        let examples: Vec<TrainExample> = draws
            .iter()
            .zip(&waves)
            .map(|(&(_, t, mask_seed), (clean, noisy))| TrainExample {
                clean,
                noisy,
                t,
                mask_seed,
            })
            .collect();

        let loss = model.train_step(&examples, &cfg.signal, &cb, &mut opt)?;
        if (step + 1) % cfg.train.log_interval == 0 || step + 1 == steps {
            writeln!(log, "{}", log_line(step, &loss))
                .map_err(|e| Error::data(format!("cannot write training log: {e}")))?;
        }
        if (step + 1) % echo_every == 0 || step + 1 == steps {
            println!("{}", log_line(step, &loss));
        }
        last = Some(loss);
    }
    log.flush()
        .map_err(|e| Error::data(format!("cannot flush training log: {e}")))?;

    let extra = [
        ("train.steps".to_string(), steps.to_string()),
        ("train.batch".to_string(), batch.to_string()),
        ("train.seed".to_string(), cfg.seed.to_string()),
    ];
    let id = save_model(&dir, &model, &extra)?;
    if let Some(loss) = last {
        println!(
            "model {:?}: {} steps, final total={} -> {} (id {id})",
            opts.tag,
            steps,
            loss.total,
            dir.display()
        );
    }
    Ok(())
}

/// One log record; float formatting round-trips exactly, so the log is also
/// a precise record of the loss decomposition.
fn log_line(step: usize, loss: &LossBreakdown) -> String {
    format!(
        "step={} total={} ce={} bce={} mae_cont={} mae_sem={} masked={}",
        step + 1,
        loss.total,
        loss.ce,
        loss.bce,
        loss.mae_cont,
        loss.mae_sem,
        loss.masked_positions
    )
}
