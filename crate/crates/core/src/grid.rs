//! Frame-by-stage grids: token indices, binary masks, and per-position
//! quantization error.
//!
//! An utterance of `L` frames quantized by a `C`-stage residual codec
//! becomes an `L×C` grid of codebook indices. Masks and quantization-error
//! matrices share that shape, so the three types here carry the same
//! row-major layout and the same frame/stage accessors. All of them are
//! plain owned values; nothing in this module allocates after construction.

use crate::error::{Error, Result};

/// L×C grid of token indices.
///
/// Entries normally lie in `0..D` for a codebook of size `D`; the value `D`
/// itself is reserved for the mask token and only appears in grids that
/// have been through [`crate::masking::apply_mask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    frames: usize,
    stages: usize,
    data: Vec<u32>,
}

impl TokenGrid {
    /// Grid with every entry set to `value`.
    pub fn filled(frames: usize, stages: usize, value: u32) -> Result<Self> {
        check_dims(frames, stages)?;
        Ok(Self {
            frames,
            stages,
            data: vec![value; frames * stages],
        })
    }

    /// Grid over an existing row-major index buffer.
    pub fn from_vec(frames: usize, stages: usize, data: Vec<u32>) -> Result<Self> {
        check_dims(frames, stages)?;
        if data.len() != frames * stages {
            return Err(Error::shape(format!(
                "token grid: {} values for {}x{}",
                data.len(),
                frames,
                stages
            )));
        }
        Ok(Self {
            frames,
            stages,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn get(&self, frame: usize, stage: usize) -> u32 {
        self.data[frame * self.stages + stage]
    }

    pub fn set(&mut self, frame: usize, stage: usize, value: u32) {
        self.data[frame * self.stages + stage] = value;
    }

    /// Row-major view of all entries.
    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Largest index present, or `None` for an empty grid.
    pub fn max_value(&self) -> Option<u32> {
        self.data.iter().copied().max()
    }

    /// Error if any entry is outside `0..vocab`.
    pub fn check_below(&self, vocab: u32) -> Result<()> {
        for (pos, &v) in self.data.iter().enumerate() {
            if v >= vocab {
                return Err(Error::vocab(format!(
                    "token {v} at frame {} stage {} is outside 0..{vocab}",
                    pos / self.stages,
                    pos % self.stages
                )));
            }
        }
        Ok(())
    }
}

/// L×C binary mask; `true` marks a masked position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    frames: usize,
    stages: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    /// All-clear mask.
    pub fn zeros(frames: usize, stages: usize) -> Result<Self> {
        check_dims(frames, stages)?;
        Ok(Self {
            frames,
            stages,
            bits: vec![false; frames * stages],
        })
    }

    /// All-set mask.
    pub fn ones(frames: usize, stages: usize) -> Result<Self> {
        let mut m = Self::zeros(frames, stages)?;
        m.bits.iter_mut().for_each(|b| *b = true);
        Ok(m)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn get(&self, frame: usize, stage: usize) -> bool {
        self.bits[frame * self.stages + stage]
    }

    pub fn set(&mut self, frame: usize, stage: usize, value: bool) {
        self.bits[frame * self.stages + stage] = value;
    }

    /// Row-major view of all bits.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set positions.
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major flat indices of the set positions, ascending.
    pub fn set_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// L×C nonnegative per-position quantization error.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantErrorGrid {
    frames: usize,
    stages: usize,
    data: Vec<f64>,
}

impl QuantErrorGrid {
    pub fn from_vec(frames: usize, stages: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(frames, stages)?;
        if data.len() != frames * stages {
            return Err(Error::shape(format!(
                "quantization-error grid: {} values for {}x{}",
                data.len(),
                frames,
                stages
            )));
        }
        for (pos, &v) in data.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::numeric(format!(
                    "quantization error {v} at frame {} stage {} is not a finite nonnegative value",
                    pos / stages,
                    pos % stages
                )));
            }
        }
        Ok(Self {
            frames,
            stages,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn get(&self, frame: usize, stage: usize) -> f64 {
        self.data[frame * self.stages + stage]
    }

    /// Row-major view of all entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_dims(frames: usize, stages: usize) -> Result<()> {
    if frames == 0 || stages == 0 {
        return Err(Error::shape(format!(
            "grid dimensions must be positive, got {frames}x{stages}"
        )));
    }
    Ok(())
}
