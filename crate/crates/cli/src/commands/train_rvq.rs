//! `train-rvq`: fit the residual-quantizer codebooks on clean training
//! frames.

use rayon::prelude::*;

use remask_core::ckpt::save_codebooks;
use remask_core::rvq::train_rvq;
use remask_core::signal::analyze;
use remask_core::tensor::Tensor;
use remask_core::{Error, Result};

use crate::corpus::{read_clean, scan_stems, split_dir, Split};
use crate::seeds::{stream_seed, Stream};
use crate::util::prepare_out_dir;

use super::{require_corpus, rvq_dir, Ctx};

pub fn run(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    require_corpus(cfg)?;
    let train = split_dir(cfg, Split::Train);
    let stems = scan_stems(&train)?;

    // Analysis frames of every clean training utterance, in stem order.
    let per_utt: Vec<Tensor> = stems
        .par_iter()
        .map(|stem| analyze(&read_clean(cfg, &train, stem)?, &cfg.signal))
        .collect::<Result<_>>()?;
    let d = cfg.signal.d_emb;
    let total: usize = per_utt.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(total * d);
    for t in &per_utt {
        data.extend_from_slice(t.data());
    }

    // Cap the k-means input at a deterministic, evenly strided subsample.
    let cap = cfg.rvq_max_frames.min(total);
    let frames = if cap < total {
        let mut sub = Vec::with_capacity(cap * d);
        for i in 0..cap {
            let row = i * total / cap;
            sub.extend_from_slice(&data[row * d..(row + 1) * d]);
        }
        Tensor::from_vec(&[cap, d], sub)?
    } else {
        Tensor::from_vec(&[total, d], data)?
    };
    if frames.rows() < cfg.rvq.codebook_size {
        return Err(Error::config(format!(
            "{} frames cannot seed {} codewords; grow the corpus or shrink the codebook",
            frames.rows(),
            cfg.rvq.codebook_size
        )));
    }

    let fit_seed = stream_seed(cfg.seed, Stream::RvqFit, 0);
    let cb = train_rvq(&frames, &cfg.rvq, fit_seed)?;

    let dir = rvq_dir(cfg);
    prepare_out_dir(&dir, ctx.force)?;
    let extra = [
        ("fit.frames".to_string(), frames.rows().to_string()),
        ("fit.seed".to_string(), fit_seed.to_string()),
    ];
    let id = save_codebooks(&dir, &cb, &extra)?;
    println!(
        "codebooks: {} stages x {} codewords fitted on {} frames -> {} (id {id})",
        cb.stage_count(),
        cb.codebook_size(),
        frames.rows(),
        dir.display()
    );
    Ok(())
}
