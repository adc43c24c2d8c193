//! Mask scheduling and application for the discrete denoising process.
//!
//! Training corrupts a token grid by overwriting a scheduled number of
//! positions with the reserved mask token; inference starts from a partially
//! masked grid and progressively commits high-confidence predictions while
//! remasking the rest. This module owns the schedule arithmetic and every
//! way a [`MaskGrid`] is produced:
//!
//! * [`mask_count`] — the sine schedule `⌊sin(πt/2)·L·C⌋` mapping a
//!   progress value `t ∈ [0,1]` to a number of masked positions;
//! * [`random_mask`] — uniform selection without replacement (training, and
//!   the `random` inference initialization);
//! * [`apply_mask`] — grid corruption with the reserved token;
//! * [`quant_error_init`] — mask the positions the frame codec was least
//!   sure about (largest quantization error);
//! * [`remask_low_confidence`] — keep the worst `k_next` positions masked
//!   between reverse-process iterations.
//!
//! Every selection rule breaks ties row-major (earlier frame first, earlier
//! stage first) so that identical inputs always produce identical masks.

use crate::error::{Error, Result};
use crate::grid::{MaskGrid, QuantErrorGrid, TokenGrid};
use rand::Rng;

/// Grid dimensions the schedule is evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleParams {
    /// Frames per utterance.
    pub frames: usize,
    /// Quantizer stages per frame.
    pub stages: usize,
}

impl ScheduleParams {
    pub fn new(frames: usize, stages: usize) -> Result<Self> {
        if frames == 0 || stages == 0 {
            return Err(Error::config(format!(
                "schedule: frames and stages must be positive, got {frames}x{stages}"
            )));
        }
        Ok(Self { frames, stages })
    }

    /// Total number of grid positions.
    pub fn positions(&self) -> usize {
        self.frames * self.stages
    }
}

/// Number of positions masked at progress `t`: `⌊sin(πt/2)·L·C⌋`.
///
/// Monotonically non-decreasing in `t`, 0 at `t = 0`, and the full grid at
/// `t = 1`. On any grid that fits in memory the 64-bit evaluation is exact:
/// the product would have to fall within one part in 10⁹ of an integer for
/// rounding to move the floor, and `sin` is accurate to half an ulp.
pub fn mask_count(t: f64, sched: ScheduleParams) -> Result<usize> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!(
            "mask schedule: progress {t} outside [0, 1]"
        )));
    }
    let total = sched.positions() as f64;
    Ok(((std::f64::consts::FRAC_PI_2 * t).sin() * total).floor() as usize)
}

/// Mask with exactly [`mask_count`]`(t)` ones at positions drawn uniformly
/// without replacement.
pub fn random_mask<R: Rng>(t: f64, sched: ScheduleParams, rng: &mut R) -> Result<MaskGrid> {
    let count = mask_count(t, sched)?;
    let mut mask = MaskGrid::zeros(sched.frames, sched.stages)?;
    for pos in rand::seq::index::sample(rng, sched.positions(), count) {
        mask.set(pos / sched.stages, pos % sched.stages, true);
    }
    Ok(mask)
}

/// Overwrite the masked positions of `tokens` with the reserved token
/// `mask_token`; everything else passes through unchanged.
///
/// The input must not already contain `mask_token` — a grid that does has
/// been corrupted once before, and masking it again would silently conflate
/// "masked" with "was already masked".
pub fn apply_mask(tokens: &TokenGrid, mask: &MaskGrid, mask_token: u32) -> Result<TokenGrid> {
    if tokens.frames() != mask.frames() || tokens.stages() != mask.stages() {
        return Err(Error::shape(format!(
            "apply_mask: token grid {}x{} vs mask {}x{}",
            tokens.frames(),
            tokens.stages(),
            mask.frames(),
            mask.stages()
        )));
    }
    tokens.check_below(mask_token)?;
    let mut out = tokens.clone();
    for frame in 0..tokens.frames() {
        for stage in 0..tokens.stages() {
            if mask.get(frame, stage) {
                out.set(frame, stage, mask_token);
            }
        }
    }
    Ok(out)
}

/// Initial inference mask: the scheduled number of positions with the
/// largest quantization error. Ties go to the earlier row-major position.
pub fn quant_error_init(delta: &QuantErrorGrid, t: f64, sched: ScheduleParams) -> Result<MaskGrid> {
    if delta.frames() != sched.frames || delta.stages() != sched.stages {
        return Err(Error::shape(format!(
            "quantization-error init: delta {}x{} vs schedule {}x{}",
            delta.frames(),
            delta.stages(),
            sched.frames,
            sched.stages
        )));
    }
    let count = mask_count(t, sched)?;
    let mut mask = MaskGrid::zeros(sched.frames, sched.stages)?;
    for pos in top_k_indices(delta.data(), count, Extreme::Largest) {
        mask.set(pos / sched.stages, pos % sched.stages, true);
    }
    Ok(mask)
}

/// Which positions stay masked for the next reverse-process iteration: the
/// `k_next` candidates with the lowest confidence. Only positions set in
/// `candidates` are eligible; ties go to the earlier row-major position.
pub fn remask_low_confidence(
    confidence: &[f64],
    candidates: &MaskGrid,
    k_next: usize,
) -> Result<MaskGrid> {
    let (frames, stages) = (candidates.frames(), candidates.stages());
    if confidence.len() != frames * stages {
        return Err(Error::shape(format!(
            "remask: {} confidence values for a {}x{} grid",
            confidence.len(),
            frames,
            stages
        )));
    }
    let eligible = candidates.set_positions();
    if k_next > eligible.len() {
        return Err(Error::config(format!(
            "remask: k_next {} exceeds {} candidate positions",
            k_next,
            eligible.len()
        )));
    }
    // Rank only the candidate subset, then map back to grid positions.
    let subset: Vec<f64> = eligible.iter().map(|&p| confidence[p]).collect();
    let mut mask = MaskGrid::zeros(frames, stages)?;
    for local in top_k_indices(&subset, k_next, Extreme::Smallest) {
        let pos = eligible[local];
        mask.set(pos / stages, pos % stages, true);
    }
    Ok(mask)
}

#[derive(Clone, Copy)]
enum Extreme {
    Largest,
    Smallest,
}

/// Indices of the `k` most extreme values, ties broken toward the lower
/// index. A full stable sort keeps the rule obvious; grids are small enough
/// that the `O(n log n)` cost never matters.
fn top_k_indices(values: &[f64], k: usize, extreme: Extreme) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = values[a].partial_cmp(&values[b]).expect("finite values");
        let cmp = match extreme {
            Extreme::Largest => cmp.reverse(),
            Extreme::Smallest => cmp,
        };
        cmp.then(a.cmp(&b))
    });
    order.truncate(k);
    order
}
