//! Residual vector quantizer over continuous feature frames.
//!
//! A cascade of `Q` codebooks encodes each frame into `Q` integer codes by
//! recursively quantizing the residual; decoding sums the chosen codewords.
//! With entry 0 of every stage reserved as the zero vector, per-frame
//! residual norm is non-increasing across stages, so using more codebooks
//! never hurts reconstruction.

mod io;
mod kmeans;

pub use io::{read_codebooks, read_grid, write_codebooks, write_grid};
pub use kmeans::{dist_sq, kmeans, nearest, KMEANS_ITERS};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::parallel;

/// A sequence of feature frames (T×D) at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor<f32>,
    pub frame_rate_hz: f32,
}

impl FeatureSequence {
    pub fn new(frames: Tensor<f32>, frame_rate_hz: f32) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(Error::Validation(format!(
                "feature sequence must be a non-empty T x D matrix, got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Validation("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence { frames, frame_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Audio duration represented by this sequence, in seconds.
    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.frame_rate_hz as f64
    }
}

/// Q stages of K×D codeword tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebooks {
    stages: Vec<Tensor<f32>>,
    zero_reserved: bool,
}

impl Codebooks {
    pub fn from_stages(stages: Vec<Tensor<f32>>, zero_reserved: bool) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Validation("codebooks need at least one stage".into()));
        }
        let (k, d) = (stages[0].rows(), stages[0].cols());
        if k < 2 {
            return Err(Error::Validation(format!("codebook size must be >= 2, got {k}")));
        }
        for (q, s) in stages.iter().enumerate() {
            if s.rows() != k || s.cols() != d {
                return Err(Error::Validation(format!(
                    "stage {q} is {}x{}, expected {k}x{d}",
                    s.rows(),
                    s.cols()
                )));
            }
            if zero_reserved && s.row(0).iter().any(|&v| v != 0.0) {
                return Err(Error::Validation(format!(
                    "zero_reserved set but stage {q} entry 0 is not the zero vector"
                )));
            }
        }
        Ok(Codebooks { stages, zero_reserved })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.stages[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].cols()
    }

    pub fn zero_reserved(&self) -> bool {
        self.zero_reserved
    }

    pub fn stage(&self, q: usize) -> &Tensor<f32> {
        &self.stages[q]
    }
}

/// Q×T integer code matrix; `k` is the per-stage codebook size and the PAD
/// sentinel is exactly `k` (one past the largest valid code).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeGrid {
    q: usize,
    t: usize,
    k: usize,
    codes: Vec<u16>,
}

impl CodeGrid {
    pub fn new(q: usize, t: usize, k: usize, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != q * t {
            return Err(Error::Validation(format!(
                "code grid {q}x{t} needs {} codes, got {}",
                q * t,
                codes.len()
            )));
        }
        if k == 0 || k > u16::MAX as usize {
            return Err(Error::Validation(format!("codebook size {k} out of range")));
        }
        for (i, &c) in codes.iter().enumerate() {
            if c as usize > k {
                return Err(Error::Validation(format!(
                    "code {c} at flat index {i} exceeds PAD sentinel {k}"
                )));
            }
        }
        Ok(CodeGrid { q, t, k, codes })
    }

    pub fn num_codebooks(&self) -> usize {
        self.q
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn codebook_size(&self) -> usize {
        self.k
    }

    /// The PAD sentinel (= codebook size).
    pub fn pad_code(&self) -> u16 {
        self.k as u16
    }

    #[inline]
    pub fn get(&self, q: usize, t: usize) -> u16 {
        self.codes[q * self.t + t]
    }

    #[inline]
    pub fn set(&mut self, q: usize, t: usize, code: u16) {
        self.codes[q * self.t + t] = code;
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    /// Row `q` across all frames.
    pub fn row(&self, q: usize) -> &[u16] {
        &self.codes[q * self.t..(q + 1) * self.t]
    }

    /// Codes of frame `t` across all codebooks.
    pub fn column(&self, t: usize) -> Vec<u16> {
        (0..self.q).map(|q| self.get(q, t)).collect()
    }

    pub fn has_pad(&self) -> bool {
        let pad = self.pad_code();
        self.codes.iter().any(|&c| c == pad)
    }
}

/// Learn `stages` codebooks of size `k` by stage-wise k-means on residuals.
///
/// Stages are trained in order; when `zero_reserved` is set, entry 0 of each
/// stage is overwritten with the zero vector before residuals are advanced,
/// which makes partial-decode error monotone in the number of stages used.
pub fn train_codebooks(
    corpus: &[FeatureSequence],
    stages: usize,
    k: usize,
    seed: u64,
    zero_reserved: bool,
) -> Result<Codebooks> {
    if corpus.is_empty() {
        return Err(Error::Validation("rvq training corpus is empty".into()));
    }
    if stages == 0 {
        return Err(Error::Validation("rvq needs at least one stage".into()));
    }
    if k < 2 {
        return Err(Error::Validation(format!("codebook size must be >= 2, got {k}")));
    }
    let dim = corpus[0].dim();
    let total_frames: usize = corpus.iter().map(|s| s.len()).sum();
    if k > total_frames {
        return Err(Error::Validation(format!(
            "codebook size {k} exceeds corpus frame count {total_frames}"
        )));
    }
    for s in corpus {
        if s.dim() != dim {
            return Err(Error::Validation(format!(
                "corpus dimension mismatch: {} vs {dim}",
                s.dim()
            )));
        }
    }

    let mut residuals: Vec<f32> = Vec::with_capacity(total_frames * dim);
    for s in corpus {
        residuals.extend_from_slice(s.frames.data());
    }

    let mut tables = Vec::with_capacity(stages);
    for q in 0..stages {
        let stage_seed = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(q as u64);
        let mut centroids = kmeans(&residuals, total_frames, dim, k, stage_seed);
        if zero_reserved {
            centroids.row_mut(0).fill(0.0);
        }
        // Advance residuals with the finalized stage.
        let assigned = parallel::map_indexed(total_frames, |i| {
            nearest(&centroids, &residuals[i * dim..(i + 1) * dim])
        });
        for (i, &c) in assigned.iter().enumerate() {
            let crow = centroids.row(c).to_vec();
            for (r, cv) in residuals[i * dim..(i + 1) * dim].iter_mut().zip(crow) {
                *r -= cv;
            }
        }
        tables.push(centroids);
    }
    Codebooks::from_stages(tables, zero_reserved)
}

/// Encode a feature sequence into a PAD-free Q×T code grid.
pub fn rvq_encode(z: &FeatureSequence, cb: &Codebooks) -> Result<CodeGrid> {
    if z.dim() != cb.dim() {
        return Err(Error::Validation(format!(
            "feature dimension {} does not match codebook dimension {}",
            z.dim(),
            cb.dim()
        )));
    }
    let (q_stages, t, k) = (cb.num_stages(), z.len(), cb.codebook_size());
    let per_frame = parallel::map_indexed(t, |i| {
        let mut residual = z.frames.row(i).to_vec();
        let mut codes = Vec::with_capacity(q_stages);
        for q in 0..q_stages {
            let c = nearest(cb.stage(q), &residual);
            for (r, cv) in residual.iter_mut().zip(cb.stage(q).row(c)) {
                *r -= cv;
            }
            codes.push(c as u16);
        }
        codes
    });
    let mut codes = vec![0u16; q_stages * t];
    for (i, frame_codes) in per_frame.iter().enumerate() {
        for (q, &c) in frame_codes.iter().enumerate() {
            codes[q * t + i] = c;
        }
    }
    CodeGrid::new(q_stages, t, k, codes)
}

/// Reconstruct features from the first `q_used` stages of a PAD-free grid.
pub fn rvq_decode(grid: &CodeGrid, cb: &Codebooks, q_used: usize) -> Result<FeatureSequence> {
    if grid.has_pad() {
        return Err(Error::Validation(
            "cannot decode a grid containing PAD; unshift it first".into(),
        ));
    }
    if q_used == 0 || q_used > cb.num_stages() || grid.num_codebooks() != cb.num_stages() {
        return Err(Error::Validation(format!(
            "q_used {q_used} invalid for {} stages (grid has {})",
            cb.num_stages(),
            grid.num_codebooks()
        )));
    }
    if grid.codebook_size() != cb.codebook_size() {
        return Err(Error::Validation(format!(
            "grid codebook size {} does not match codec {}",
            grid.codebook_size(),
            cb.codebook_size()
        )));
    }
    let (t, d) = (grid.num_frames(), cb.dim());
    let mut frames = Tensor::zeros(&[t, d]);
    for i in 0..t {
        let row = frames.row_mut(i);
        for q in 0..q_used {
            let cw = cb.stage(q).row(grid.get(q, i) as usize);
            for (o, &v) in row.iter_mut().zip(cw) {
                *o += v;
            }
        }
    }
    FeatureSequence::new(frames, 75.0)
}

/// Mean squared error between `z` and its partial reconstruction.
pub fn quantization_error(z: &FeatureSequence, cb: &Codebooks, q_used: usize) -> Result<f32> {
    let grid = rvq_encode(z, cb)?;
    let recon = rvq_decode(&grid, cb, q_used)?;
    let n = z.frames.numel();
    let mut acc = 0.0f64;
    for (a, b) in z.frames.data().iter().zip(recon.frames.data()) {
        let d = (a - b) as f64;
        acc += d * d;
    }
    Ok((acc / n as f64) as f32)
}

/// Per-frame squared reconstruction errors at a given `q_used`.
pub fn per_frame_error(z: &FeatureSequence, cb: &Codebooks, q_used: usize) -> Result<Vec<f32>> {
    let grid = rvq_encode(z, cb)?;
    let recon = rvq_decode(&grid, cb, q_used)?;
    Ok((0..z.len())
        .map(|i| dist_sq(z.frames.row(i), recon.frames.row(i)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, cols: usize, data: Vec<f32>) -> FeatureSequence {
        FeatureSequence::new(Tensor::matrix(rows, cols, data).unwrap(), 75.0).unwrap()
    }

    fn hand_codebooks_1d() -> Codebooks {
        // Stage 1 = {0, 1}; stage 2 = {-0.4, 0.25}. Not zero_reserved
        // (stage 2 entry 0 is nonzero).
        Codebooks::from_stages(
            vec![
                Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(),
                Tensor::matrix(2, 1, vec![-0.4, 0.25]).unwrap(),
            ],
            false,
        )
        .unwrap()
    }

    #[test]
    fn nearest_neighbor_is_forced() {
        let cb = Codebooks::from_stages(
            vec![Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap()],
            false,
        )
        .unwrap();
        let z = seq(1, 2, vec![0.6, 0.0]);
        let grid = rvq_encode(&z, &cb).unwrap();
        assert_eq!(grid.get(0, 0), 1);
        // Residual after stage 1 is (-0.4, 0): reconstruction misses by it.
        let recon = rvq_decode(&grid, &cb, 1).unwrap();
        assert!((recon.frames.data()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn two_stage_hand_trace_decodes_exactly() {
        let cb = hand_codebooks_1d();
        let z = seq(1, 1, vec![0.6]);
        let grid = rvq_encode(&z, &cb).unwrap();
        assert_eq!(grid.get(0, 0), 1);
        assert_eq!(grid.get(1, 0), 0);
        let recon = rvq_decode(&grid, &cb, 2).unwrap();
        assert_eq!(recon.frames.data()[0], 0.6);
        assert_eq!(quantization_error(&z, &cb, 2).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_frame_with_zero_reserved_encodes_to_zero_codes() {
        let mut s1 = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5]).unwrap();
        s1.row_mut(0).fill(0.0);
        let cb = Codebooks::from_stages(vec![s1.clone(), s1], true).unwrap();
        let z = seq(1, 2, vec![0.0, 0.0]);
        let grid = rvq_encode(&z, &cb).unwrap();
        assert_eq!(grid.get(0, 0), 0);
        assert_eq!(grid.get(1, 0), 0);
        let recon = rvq_decode(&grid, &cb, 2).unwrap();
        assert!(recon.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_corpus_frames_give_zero_stage1_residual() {
        let corpus: Vec<FeatureSequence> =
            (0..4).map(|_| seq(5, 2, [0.7f32, -1.2].repeat(5))).collect();
        let cb = train_codebooks(&corpus, 1, 2, 11, false).unwrap();
        let e = quantization_error(&corpus[0], &cb, 1).unwrap();
        assert_eq!(e, 0.0, "degenerate k-means must hit the common frame exactly");
    }

    #[test]
    fn stage2_residual_energy_not_above_stage1() {
        let mut data = Vec::new();
        let mut state = 99u64;
        for _ in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            data.push(((state >> 33) as f32 / (1u32 << 30) as f32) - 1.0);
        }
        let corpus = vec![seq(50, 4, data)];
        let cb = train_codebooks(&corpus, 2, 8, 5, true).unwrap();
        let e1 = quantization_error(&corpus[0], &cb, 1).unwrap();
        let e2 = quantization_error(&corpus[0], &cb, 2).unwrap();
        assert!(e2 <= e1, "stage 2 must not increase error: {e2} vs {e1}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let corpus = vec![seq(30, 3, (0..90).map(|i| ((i * 31 % 17) as f32) * 0.21 - 1.5).collect())];
        let a = train_codebooks(&corpus, 3, 4, 123, true).unwrap();
        let b = train_codebooks(&corpus, 3, 4, 123, true).unwrap();
        for q in 0..3 {
            assert_eq!(a.stage(q).data(), b.stage(q).data());
        }
    }

    #[test]
    fn rejects_empty_corpus_and_oversized_k() {
        assert!(train_codebooks(&[], 2, 2, 0, true).is_err());
        let corpus = vec![seq(3, 2, vec![0.0; 6])];
        assert!(train_codebooks(&corpus, 2, 4, 0, true).is_err());
    }

    #[test]
    fn decode_rejects_pad() {
        let cb = hand_codebooks_1d();
        let grid = CodeGrid::new(2, 1, 2, vec![1, 2]).unwrap(); // 2 == PAD
        assert!(rvq_decode(&grid, &cb, 2).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cb = hand_codebooks_1d();
        let z = seq(1, 3, vec![0.1, 0.2, 0.3]);
        assert!(rvq_encode(&z, &cb).is_err());
    }
}
