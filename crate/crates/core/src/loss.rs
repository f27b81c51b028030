//! Codebook-weighted cross-entropy.
//!
//! Each loss term gets a per-frame, per-codebook weight. The adaptive scheme
//! weights code `q` by the product of the correct-prediction probabilities of
//! all higher-level codes in the same frame, raised to `lambda`; a `p_max`
//! threshold drops terms that are already predicted confidently and rescales
//! the survivors so the largest weight is 1. Weights are computed from
//! forward values only and never carry gradient.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::rvq::CodeGrid;

/// Weighting scheme for the per-codebook loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScheme {
    /// Every valid term weighs 1.
    Uniform,
    /// Frame-level weights from upstream correct-prediction probabilities.
    Adaptive,
    /// Per-codebook schedule decaying geometrically to 1 over training.
    StaticPriority,
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::Adaptive => "adaptive",
            WeightScheme::StaticPriority => "static_priority",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "adaptive" => Ok(WeightScheme::Adaptive),
            "static_priority" => Ok(WeightScheme::StaticPriority),
            other => Err(Error::Config(format!("unknown loss scheme `{other}`"))),
        }
    }
}

/// Loss weighting configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub scheme: WeightScheme,
    pub lambda: f32,
    pub p_max: Option<f32>,
    /// Initial static-priority weights; codebooks past the end get 1.
    pub static_init: Vec<f32>,
    /// Step at which the static schedule reaches all-ones.
    pub total_steps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scheme: WeightScheme::Adaptive,
            lambda: 0.1,
            p_max: Some(0.5),
            static_init: vec![16.0, 8.0, 4.0, 2.0],
            total_steps: 20_000,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(p) = self.p_max {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("p_max must lie in (0, 1], got {p}")));
            }
        }
        if self.scheme == WeightScheme::StaticPriority && self.total_steps == 0 {
            return Err(Error::Config("static_priority needs total_steps > 0".into()));
        }
        Ok(())
    }
}

/// Per-term weights and masks for one shifted grid (Q rows × T′ columns).
#[derive(Clone, Debug)]
pub struct FrameWeights<E> {
    q: usize,
    steps: usize,
    /// Weight applied to each term; meaningless where masked.
    weights: Vec<E>,
    /// True = term excluded (PAD target or dropped by p_max).
    masked: Vec<bool>,
    /// Number of valid (non-PAD) target positions, the loss normalizer base.
    valid_terms: usize,
}

impl<E: Scalar> FrameWeights<E> {
    #[inline]
    pub fn weight(&self, q: usize, t: usize) -> E {
        self.weights[q * self.steps + t]
    }

    #[inline]
    pub fn is_masked(&self, q: usize, t: usize) -> bool {
        self.masked[q * self.steps + t]
    }

    pub fn valid_terms(&self) -> usize {
        self.valid_terms
    }

    /// Mean unmasked weight per codebook (for metrics logs).
    pub fn mean_weight_per_codebook(&self) -> Vec<f64> {
        (0..self.q)
            .map(|q| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for t in 0..self.steps {
                    if !self.is_masked(q, t) {
                        sum += self.weight(q, t).to_f64();
                        n += 1;
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            })
            .collect()
    }

    /// Dump the weight matrix as CSV (masked cells print as empty).
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        write!(w, "codebook")?;
        for t in 0..self.steps {
            write!(w, ",t{t}")?;
        }
        writeln!(w)?;
        for q in 0..self.q {
            write!(w, "{}", q + 1)?;
            for t in 0..self.steps {
                if self.is_masked(q, t) {
                    write!(w, ",")?;
                } else {
                    write!(w, ",{}", self.weight(q, t).to_f64())?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Softmax probability of the correct code per codebook for one column.
/// `None` marks PAD targets (no loss term).
pub fn correct_prob<E: Scalar>(
    logit_rows: &[&[E]],
    targets: &[u16],
    pad: u16,
) -> Result<Vec<Option<E>>> {
    let mut out = Vec::with_capacity(logit_rows.len());
    for (q, row) in logit_rows.iter().enumerate() {
        let t = targets[q];
        if t == pad {
            out.push(None);
            continue;
        }
        let ti = t as usize;
        if ti >= row.len() {
            return Err(Error::Validation(format!(
                "target {ti} out of range 0..{} in codebook {q}",
                row.len()
            )));
        }
        // p = exp(logit_t - logsumexp(row)), stable form.
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maximum(v);
        }
        let mut sum = E::ZERO;
        for &v in row.iter() {
            sum += (v - m).exp();
        }
        out.push(Some((row[ti] - m).exp() / sum));
    }
    Ok(out)
}

/// Adaptive weights for one frame: `w1 = 1`, `w_q = prod_{q'<q} p_tilde^lambda`.
/// PAD slots (None) contribute no factor and get weight for bookkeeping only.
pub fn frame_weights<E: Scalar>(p_tilde: &[Option<E>], lambda: f64) -> Vec<E> {
    let mut out = Vec::with_capacity(p_tilde.len());
    let mut cum = 1.0f64;
    for p in p_tilde {
        out.push(E::from_f64(cum));
        if let Some(p) = p {
            cum *= p.to_f64().powf(lambda);
        }
    }
    out
}

/// Mask terms whose correct probability already exceeds `p_max`, then divide
/// the surviving weights by the largest survivor. PAD slots stay masked.
/// Returns (rescaled weights, masked flags).
pub fn apply_pmax<E: Scalar>(
    weights: &[E],
    p_tilde: &[Option<E>],
    p_max: f64,
) -> (Vec<E>, Vec<bool>) {
    let mut masked: Vec<bool> = p_tilde
        .iter()
        .map(|p| match p {
            None => true,
            Some(p) => p.to_f64() > p_max,
        })
        .collect();
    let mut max_w = 0.0f64;
    for (q, &m) in masked.iter().enumerate() {
        if !m {
            max_w = max_w.max(weights[q].to_f64());
        }
    }
    if max_w <= 0.0 {
        // Everything masked (or all survivors weigh zero): drop the column.
        for m in masked.iter_mut() {
            *m = true;
        }
        return (weights.to_vec(), masked);
    }
    let out = weights
        .iter()
        .zip(&masked)
        .map(|(w, &m)| if m { *w } else { E::from_f64(w.to_f64() / max_w) })
        .collect();
    (out, masked)
}

/// Static-priority weights at a training step: geometric interpolation from
/// the initial weights down to all-ones at `total_steps`.
pub fn static_priority_weights(step: usize, q: usize, cfg: &LossConfig) -> Vec<f32> {
    let frac = if cfg.total_steps == 0 {
        0.0
    } else {
        (1.0 - step as f64 / cfg.total_steps as f64).max(0.0)
    };
    (0..q)
        .map(|i| {
            let w0 = cfg.static_init.get(i).copied().unwrap_or(1.0) as f64;
            w0.powf(frac) as f32
        })
        .collect()
}

/// Build the full weight matrix for a shifted target grid from logits values.
///
/// `logits[q]` holds the T′×K logits of codebook `q`; weights are derived
/// from the forward values only, which realizes the stop-gradient semantics.
pub fn build_frame_weights<E: Scalar>(
    g: &Graph<E>,
    logits: &[Var],
    targets: &CodeGrid,
    cfg: &LossConfig,
    step: usize,
) -> Result<FrameWeights<E>> {
    cfg.validate()?;
    let q_n = targets.num_codebooks();
    let steps = targets.num_frames();
    let pad = targets.pad_code();
    if logits.len() != q_n {
        return Err(Error::shape(
            "weighted_ce_loss",
            format!("{} logit tensors for {q_n} codebooks", logits.len()),
        ));
    }
    for (q, &lv) in logits.iter().enumerate() {
        let v = g.value(lv);
        if v.shape().len() != 2 || v.rows() != steps || v.cols() != pad as usize {
            return Err(Error::shape(
                "weighted_ce_loss",
                format!(
                    "codebook {q} logits {:?}, expected [{steps}, {}]",
                    v.shape(),
                    pad
                ),
            ));
        }
    }

    let static_w = static_priority_weights(step, q_n, cfg);
    let mut weights = vec![E::ZERO; q_n * steps];
    let mut masked = vec![false; q_n * steps];
    let mut valid_terms = 0usize;
    for t in 0..steps {
        let col_targets: Vec<u16> = (0..q_n).map(|q| targets.get(q, t)).collect();
        valid_terms += col_targets.iter().filter(|&&c| c != pad).count();
        let (col_w, col_m): (Vec<E>, Vec<bool>) = match cfg.scheme {
            WeightScheme::Uniform => (
                vec![E::ONE; q_n],
                col_targets.iter().map(|&c| c == pad).collect(),
            ),
            WeightScheme::StaticPriority => (
                static_w.iter().map(|&w| E::from_f64(w as f64)).collect(),
                col_targets.iter().map(|&c| c == pad).collect(),
            ),
            WeightScheme::Adaptive => {
                let rows: Vec<&[E]> = logits.iter().map(|&lv| g.value(lv).row(t)).collect();
                let p_tilde = correct_prob(&rows, &col_targets, pad)?;
                let raw = frame_weights(&p_tilde, cfg.lambda as f64);
                match cfg.p_max {
                    Some(p_max) => apply_pmax(&raw, &p_tilde, p_max as f64),
                    None => (raw, p_tilde.iter().map(|p| p.is_none()).collect()),
                }
            }
        };
        for q in 0..q_n {
            weights[q * steps + t] = col_w[q];
            masked[q * steps + t] = col_m[q];
        }
    }
    Ok(FrameWeights { q: q_n, steps, weights, masked, valid_terms })
}

/// Weighted cross-entropy over a shifted grid:
/// `L = (1 / valid_terms) * sum_q sum_t w * CE` with masked terms at zero.
///
/// Returns the scalar loss node and the weight matrix used.
pub fn weighted_ce_loss<E: Scalar>(
    g: &mut Graph<E>,
    logits: &[Var],
    targets: &CodeGrid,
    cfg: &LossConfig,
    step: usize,
) -> Result<(Var, FrameWeights<E>)> {
    let fw = build_frame_weights(g, logits, targets, cfg, step)?;
    let loss = weighted_ce_loss_with(g, logits, targets, &fw)?;
    Ok((loss, fw))
}

/// Same loss, but with a caller-supplied (frozen) weight matrix. Used by the
/// trainer after [`build_frame_weights`] and by stop-gradient oracle checks.
pub fn weighted_ce_loss_with<E: Scalar>(
    g: &mut Graph<E>,
    logits: &[Var],
    targets: &CodeGrid,
    fw: &FrameWeights<E>,
) -> Result<Var> {
    let q_n = targets.num_codebooks();
    let steps = targets.num_frames();
    let pad = targets.pad_code() as usize;
    let mut total: Option<Var> = None;
    for q in 0..q_n {
        let row_targets: Vec<usize> = (0..steps).map(|t| targets.get(q, t) as usize).collect();
        let row_weights: Vec<E> = (0..steps)
            .map(|t| if fw.is_masked(q, t) { E::ZERO } else { fw.weight(q, t) })
            .collect();
        let ce = g.cross_entropy_rows(logits[q], &row_targets, &row_weights, pad)?;
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::Validation("loss over zero codebooks".into()))?;
    let norm = if fw.valid_terms() == 0 { 1.0 } else { fw.valid_terms() as f64 };
    Ok(g.scale(total, E::from_f64(1.0 / norm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::shift_delayed;

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().map(|&x| Some(x)).collect()
    }

    #[test]
    fn lambda_zero_gives_all_ones() {
        let w = frame_weights(&some(&[0.0, 0.3, 0.9, 1.0]), 0.0);
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn lambda_one_is_running_product() {
        let w = frame_weights(&some(&[0.5, 0.8, 0.25, 0.9]), 1.0);
        let expect = [1.0, 0.5, 0.4, 0.1];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn perfect_upstream_prediction_keeps_all_weights_one() {
        let w = frame_weights(&some(&[1.0; 8]), 0.1);
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn weights_are_non_increasing_in_q() {
        for seed in 0..50u64 {
            let mut state = seed;
            let p: Vec<Option<f64>> = (0..8)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(99);
                    Some(((state >> 11) % 1001) as f64 / 1000.0)
                })
                .collect();
            let w = frame_weights(&p, 0.7);
            for i in 1..w.len() {
                assert!(w[i] <= w[i - 1] + 1e-15);
                assert!((0.0..=1.0).contains(&w[i]));
            }
        }
    }

    #[test]
    fn raising_upstream_prob_raises_downstream_weights() {
        let lo = frame_weights(&some(&[0.2, 0.5, 0.5, 0.5]), 0.5);
        let hi = frame_weights(&some(&[0.9, 0.5, 0.5, 0.5]), 0.5);
        for q in 1..4 {
            assert!(hi[q] > lo[q], "codebook {q}: {} !> {}", hi[q], lo[q]);
        }
    }

    #[test]
    fn pad_slots_contribute_no_factor() {
        let p = vec![Some(0.5), None, Some(0.5)];
        let w = frame_weights(&p, 1.0);
        assert_eq!(w, vec![1.0, 0.5, 0.5]);
        let full = vec![Some(0.5), Some(0.5), Some(0.5)];
        assert_eq!(frame_weights(&full, 1.0), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn pmax_worked_example() {
        let p = some(&[0.9, 0.3, 0.6]);
        let raw = frame_weights(&p, 1.0);
        assert!((raw[1] - 0.9).abs() < 1e-12 && (raw[2] - 0.27).abs() < 1e-12);
        let (w, m) = apply_pmax(&raw, &p, 0.5);
        assert_eq!(m, vec![true, false, true]);
        assert!((w[1] - 1.0).abs() < 1e-12, "survivor rescaled to 1, got {}", w[1]);
    }

    #[test]
    fn pmax_identity_when_nothing_exceeds() {
        let p = some(&[0.4, 0.3, 0.2]);
        let raw = frame_weights(&p, 1.0);
        let (w, m) = apply_pmax(&raw, &p, 0.5);
        assert_eq!(w, raw, "codebook 1 survives with weight 1, rescale is identity");
        assert!(m.iter().all(|&x| !x));
    }

    #[test]
    fn pmax_all_masked_column() {
        let p = some(&[0.9, 0.95, 0.99]);
        let raw = frame_weights(&p, 1.0);
        let (_, m) = apply_pmax(&raw, &p, 0.5);
        assert!(m.iter().all(|&x| x));
    }

    #[test]
    fn static_schedule_endpoints_and_midpoint() {
        let cfg = LossConfig {
            scheme: WeightScheme::StaticPriority,
            total_steps: 1000,
            ..LossConfig::default()
        };
        let w0 = static_priority_weights(0, 6, &cfg);
        assert_eq!(&w0[..5], &[16.0, 8.0, 4.0, 2.0, 1.0]);
        let w_end = static_priority_weights(1000, 6, &cfg);
        assert!(w_end.iter().all(|&w| w == 1.0));
        let w_half = static_priority_weights(500, 6, &cfg);
        let expect = [4.0, 2.8284271, 2.0, 1.4142135, 1.0, 1.0];
        for (a, b) in w_half.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn correct_prob_extremes() {
        // One-hot-ish row: huge margin gives p ~ 1. Uniform row gives 1/K.
        let row_hot: Vec<f64> = vec![50.0, 0.0, 0.0, 0.0];
        let row_uniform = vec![0.7f64; 4];
        let rows: Vec<&[f64]> = vec![&row_hot, &row_uniform];
        let p = correct_prob(&rows, &[0, 2], 4).unwrap();
        assert!((p[0].unwrap() - 1.0).abs() < 1e-12);
        assert!((p[1].unwrap() - 0.25).abs() < 1e-12);
        // PAD target is masked.
        let p = correct_prob(&rows, &[4, 1], 4).unwrap();
        assert!(p[0].is_none());
        // Invalid target is rejected.
        assert!(correct_prob(&rows, &[5, 1], 8).is_err());
    }

    /// Uniform scheme equals the plain mean cross-entropy over valid targets.
    #[test]
    fn uniform_reduces_to_mean_ce() {
        let (q_n, t, k) = (3usize, 5usize, 4usize);
        let grid = CodeGrid::new(q_n, t, k, {
            let mut v = Vec::new();
            let mut s = 7u64;
            for _ in 0..q_n * t {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                v.push(((s >> 20) % k as u64) as u16);
            }
            v
        })
        .unwrap();
        let shifted = shift_delayed(&grid).unwrap();
        let steps = shifted.num_steps();

        let mut g = Graph::<f64>::new();
        let mut s = 3u64;
        let logits: Vec<Var> = (0..q_n)
            .map(|_| {
                let data: Vec<f64> = (0..steps * k)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(11);
                        ((s >> 20) % 2000) as f64 / 500.0 - 2.0
                    })
                    .collect();
                g.leaf(Tensor::matrix(steps, k, data).unwrap())
            })
            .collect();

        let cfg = LossConfig { scheme: WeightScheme::Uniform, ..LossConfig::default() };
        let (loss, fw) = weighted_ce_loss(&mut g, &logits, shifted.grid(), &cfg, 0).unwrap();
        assert_eq!(fw.valid_terms(), q_n * t);

        // Independent plain mean CE over valid targets.
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for q in 0..q_n {
            for i in 0..steps {
                let tgt = shifted.get(q, i);
                if tgt == shifted.pad_code() {
                    continue;
                }
                let row = g.value(logits[q]).row(i);
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                acc += lse - row[tgt as usize];
                n += 1;
            }
        }
        let plain = acc / n as f64;
        assert!(
            (g.value(loss).item() - plain).abs() < 1e-6,
            "{} vs {plain}",
            g.value(loss).item()
        );
    }

    /// Gradient equals the gradient with weights frozen as constants.
    #[test]
    fn stop_gradient_semantics_hold() {
        let (q_n, t, k) = (2usize, 3usize, 4usize);
        let grid = CodeGrid::new(q_n, t, k, vec![1, 2, 0, 3, 1, 2]).unwrap();
        let shifted = shift_delayed(&grid).unwrap();
        let steps = shifted.num_steps();

        let mk_logits = |g: &mut Graph<f64>| -> Vec<Var> {
            let mut s = 5u64;
            (0..q_n)
                .map(|_| {
                    let data: Vec<f64> = (0..steps * k)
                        .map(|_| {
                            s = s.wrapping_mul(6364136223846793005).wrapping_add(3);
                            ((s >> 20) % 1000) as f64 / 250.0 - 2.0
                        })
                        .collect();
                    g.leaf(Tensor::matrix(steps, k, data).unwrap())
                })
                .collect()
        };

        let cfg = LossConfig {
            scheme: WeightScheme::Adaptive,
            lambda: 0.7,
            p_max: Some(0.6),
            ..LossConfig::default()
        };

        // Route A: weights computed inside weighted_ce_loss.
        let mut ga = Graph::<f64>::new();
        let la = mk_logits(&mut ga);
        let (loss_a, fw) = weighted_ce_loss(&mut ga, &la, shifted.grid(), &cfg, 0).unwrap();
        let grads_a = ga.backward(loss_a).unwrap();

        // Route B: the same numeric weights injected as constants.
        let mut gb = Graph::<f64>::new();
        let lb = mk_logits(&mut gb);
        let loss_b = weighted_ce_loss_with(&mut gb, &lb, shifted.grid(), &fw).unwrap();
        let grads_b = gb.backward(loss_b).unwrap();

        assert_eq!(g_item(&ga, loss_a), g_item(&gb, loss_b));
        for (a, b) in la.iter().zip(&lb) {
            let da = grads_a.get(*a).unwrap();
            let db = grads_b.get(*b).unwrap();
            assert!(da.max_abs_diff(db) < 1e-12);
        }
    }

    fn g_item(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    /// Perfect one-hot predictions give zero loss under every scheme.
    #[test]
    fn perfect_predictions_are_lossless() {
        let (q_n, t, k) = (2usize, 2usize, 3usize);
        let grid = CodeGrid::new(q_n, t, k, vec![1, 2, 0, 1]).unwrap();
        let shifted = shift_delayed(&grid).unwrap();
        let steps = shifted.num_steps();
        for scheme in [WeightScheme::Uniform, WeightScheme::Adaptive, WeightScheme::StaticPriority] {
            let mut g = Graph::<f64>::new();
            let logits: Vec<Var> = (0..q_n)
                .map(|q| {
                    let mut data = vec![0.0f64; steps * k];
                    for i in 0..steps {
                        let tgt = shifted.get(q, i);
                        if tgt != shifted.pad_code() {
                            data[i * k + tgt as usize] = 200.0;
                        }
                    }
                    g.leaf(Tensor::matrix(steps, k, data).unwrap())
                })
                .collect();
            let cfg = LossConfig { scheme, ..LossConfig::default() };
            let (loss, _) = weighted_ce_loss(&mut g, &logits, shifted.grid(), &cfg, 0).unwrap();
            assert!(
                g.value(loss).item().abs() < 1e-9,
                "{:?}: loss {}",
                scheme,
                g.value(loss).item()
            );
        }
    }

    #[test]
    fn csv_dump_has_header_and_mask_holes() {
        let (q_n, t, k) = (2usize, 2usize, 3usize);
        let grid = CodeGrid::new(q_n, t, k, vec![1, 2, 0, 1]).unwrap();
        let shifted = shift_delayed(&grid).unwrap();
        let mut g = Graph::<f64>::new();
        let logits: Vec<Var> = (0..q_n)
            .map(|_| g.leaf(Tensor::zeros(&[shifted.num_steps(), k])))
            .collect();
        let cfg = LossConfig { scheme: WeightScheme::Adaptive, ..LossConfig::default() };
        let fw = build_frame_weights(&g, &logits, shifted.grid(), &cfg, 0).unwrap();
        let mut buf = Vec::new();
        fw.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("codebook,t0"));
        assert!(text.contains(",,"), "masked PAD cells must be empty:\n{text}");
    }
}
