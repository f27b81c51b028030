//! Transforms between frame-aligned code grids and decoding-order layouts.
//!
//! The delayed pattern shifts row `q` right by `q` positions so one decoding
//! step emits `Q` codes from `Q` different frames; frame `i` (1-based)
//! completes at step `i + Q - 1`. The flatten pattern emits all `Q·T` codes
//! sequentially, frame-major and codebook-minor.

use crate::error::{Error, Result};
use crate::rvq::CodeGrid;

/// Decoding-order layout family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    /// Diagonal shift; `T + Q - 1` steps, `Q` codes per step.
    Delayed,
    /// Fully sequential; `Q·T` steps, one code per step.
    Flatten,
    /// First codebook autoregressive, the rest filled non-autoregressively.
    /// Documented for completeness; not implemented here.
    TwoStage,
}

/// A layout choice bound to a codebook count and PAD sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatternLayout {
    pub kind: PatternKind,
    pub q: usize,
    /// Equals the codec's codebook size (one past the largest valid code).
    pub pad_code: u16,
}

impl PatternLayout {
    /// Number of decoding steps needed for `t` frames.
    pub fn steps_for(&self, t: usize) -> Result<usize> {
        match self.kind {
            PatternKind::Delayed => Ok(t + self.q - 1),
            PatternKind::Flatten => Ok(self.q * t),
            PatternKind::TwoStage => {
                Err(Error::Config("two-stage pattern is not implemented".into()))
            }
        }
    }
}

/// A Q×T′ grid in delayed layout (T′ = T + Q − 1) with PAD in the
/// structurally invalid positions; the original frame count is retained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftedGrid {
    grid: CodeGrid,
    original_t: usize,
}

impl ShiftedGrid {
    pub fn grid(&self) -> &CodeGrid {
        &self.grid
    }

    pub fn num_codebooks(&self) -> usize {
        self.grid.num_codebooks()
    }

    /// Shifted sequence length T′ = T + Q − 1.
    pub fn num_steps(&self) -> usize {
        self.grid.num_frames()
    }

    pub fn original_frames(&self) -> usize {
        self.original_t
    }

    pub fn pad_code(&self) -> u16 {
        self.grid.pad_code()
    }

    /// Codes of shifted column `i` (0-based) across all codebooks.
    pub fn column(&self, i: usize) -> Vec<u16> {
        self.grid.column(i)
    }

    #[inline]
    pub fn get(&self, q: usize, i: usize) -> u16 {
        self.grid.get(q, i)
    }

    /// True when (q, i) is a structural PAD position of the delayed layout.
    #[inline]
    pub fn is_structural_pad(q: usize, i: usize, t: usize) -> bool {
        i < q || i - q >= t
    }

    /// Reconstruct a shifted grid from raw parts, validating the layout.
    pub fn from_grid(grid: CodeGrid, original_t: usize) -> Result<Self> {
        let q = grid.num_codebooks();
        if grid.num_frames() != original_t + q - 1 {
            return Err(Error::Validation(format!(
                "shifted grid has {} columns, expected {} + {} - 1",
                grid.num_frames(),
                original_t,
                q
            )));
        }
        let shifted = ShiftedGrid { grid, original_t };
        shifted.validate_layout()?;
        Ok(shifted)
    }

    fn validate_layout(&self) -> Result<()> {
        let pad = self.pad_code();
        let t = self.original_t;
        for q in 0..self.num_codebooks() {
            for i in 0..self.num_steps() {
                let structural = Self::is_structural_pad(q, i, t);
                let is_pad = self.get(q, i) == pad;
                if structural != is_pad {
                    return Err(Error::Validation(format!(
                        "malformed delayed layout at row {q}, column {i}: {}",
                        if is_pad { "unexpected PAD" } else { "missing PAD" }
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shift a PAD-free grid into the delayed layout.
pub fn shift_delayed(grid: &CodeGrid) -> Result<ShiftedGrid> {
    if grid.has_pad() {
        return Err(Error::Validation("cannot shift a grid that already contains PAD".into()));
    }
    let (q_n, t, k) = (grid.num_codebooks(), grid.num_frames(), grid.codebook_size());
    let t_shift = t + q_n - 1;
    let pad = grid.pad_code();
    let mut codes = vec![pad; q_n * t_shift];
    for q in 0..q_n {
        for i in 0..t {
            codes[q * t_shift + (i + q)] = grid.get(q, i);
        }
    }
    let out = CodeGrid::new(q_n, t_shift, k, codes)?;
    Ok(ShiftedGrid { grid: out, original_t: t })
}

/// Invert [`shift_delayed`], validating the PAD layout first.
pub fn unshift_delayed(shifted: &ShiftedGrid) -> Result<CodeGrid> {
    shifted.validate_layout()?;
    let q_n = shifted.num_codebooks();
    let t = shifted.original_t;
    let k = shifted.grid.codebook_size();
    let mut codes = vec![0u16; q_n * t];
    for q in 0..q_n {
        for i in 0..t {
            codes[q * t + i] = shifted.get(q, i + q);
        }
    }
    CodeGrid::new(q_n, t, k, codes)
}

/// Flatten a PAD-free grid frame-major, codebook-minor:
/// `c_1^(1), c_1^(2), ..., c_1^(Q), c_2^(1), ...`.
pub fn flatten(grid: &CodeGrid) -> Result<Vec<u16>> {
    if grid.has_pad() {
        return Err(Error::Validation("cannot flatten a grid containing PAD".into()));
    }
    let (q_n, t) = (grid.num_codebooks(), grid.num_frames());
    let mut out = Vec::with_capacity(q_n * t);
    for i in 0..t {
        for q in 0..q_n {
            out.push(grid.get(q, i));
        }
    }
    Ok(out)
}

/// Invert [`flatten`]; the sequence length must be divisible by `q`.
pub fn unflatten(seq: &[u16], q: usize, k: usize) -> Result<CodeGrid> {
    if q == 0 || seq.len() % q != 0 {
        return Err(Error::Validation(format!(
            "flattened length {} is not divisible by Q={q}",
            seq.len()
        )));
    }
    let t = seq.len() / q;
    let mut codes = vec![0u16; q * t];
    for i in 0..t {
        for qq in 0..q {
            codes[qq * t + i] = seq[i * q + qq];
        }
    }
    CodeGrid::new(q, t, k, codes)
}

/// Highest frame (1-based) fully decodable after consuming shifted column
/// `step` (1-based): `step − Q + 1` when that is at least 1.
pub fn frame_completion_index(step: usize, q: usize) -> Option<usize> {
    if step >= q && step >= 1 {
        Some(step - q + 1)
    } else {
        None
    }
}
