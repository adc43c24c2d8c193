//! `gen-data`: render the clean/noisy corpus.

use remask_core::Result;

use crate::corpus::{corpus_dir, generate_corpus};

use super::Ctx;

pub fn run(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    generate_corpus(cfg, ctx.force)?;
    println!(
        "corpus: {} train + {} val utterances of {} samples at {}",
        cfg.corpus.train_utterances,
        cfg.corpus.val_utterances,
        cfg.signal.duration_samples,
        corpus_dir(cfg).display()
    );
    Ok(())
}
