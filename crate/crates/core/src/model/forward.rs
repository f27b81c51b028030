//! Graph-based (differentiable) forward pass used for training and
//! gradient verification. Generic over the scalar type so checks can run in
//! f64 while training runs in f32.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::loss::{weighted_ce_loss, FrameWeights, LossConfig};
use crate::model::config::ModelConfig;
use crate::model::params::Parameters;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::patterns::ShiftedGrid;

/// Graph leaves for every named parameter tensor.
pub struct ParamVars<E: Scalar> {
    vars: BTreeMap<String, Var>,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Scalar> ParamVars<E> {
    /// Insert every parameter as a trainable leaf (or constant when
    /// `trainable` is false), widened to the graph's scalar type.
    pub fn build(g: &mut Graph<E>, params: &Parameters, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let cast: Tensor<E> = t.cast();
            let v = if trainable { g.leaf(cast) } else { g.constant(cast) };
            vars.insert(name.clone(), v);
        }
        ParamVars { vars, _marker: std::marker::PhantomData }
    }

    /// Panics on a missing name: parameter sets are validated against the
    /// config before any forward pass.
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, v)| (n, *v))
    }
}

/// Speaker + text condition prefix: text token embeddings followed by
/// `cond_len` vectors pooled from the enrollment features by learned-query
/// cross-attention.
pub fn condition_prefix<E: Scalar>(
    g: &mut Graph<E>,
    pv: &ParamVars<E>,
    cfg: &ModelConfig,
    text: &[usize],
    enrollment: &Tensor<E>,
) -> Result<Var> {
    if text.is_empty() {
        return Err(Error::Validation("condition text is empty".into()));
    }
    for &t in text {
        if t >= cfg.text_vocab {
            return Err(Error::Validation(format!(
                "text token {t} out of vocabulary 0..{}",
                cfg.text_vocab
            )));
        }
    }
    if enrollment.shape().len() != 2 || enrollment.rows() == 0 || enrollment.cols() != cfg.feature_dim {
        return Err(Error::Validation(format!(
            "enrollment features must be [T, {}], got {:?}",
            cfg.feature_dim,
            enrollment.shape()
        )));
    }

    let text_e = g.embed_rows(pv.var("text_emb"), text)?;

    let enroll = g.constant(enrollment.clone());
    let keys = g.matmul(enroll, pv.var("spk.key.w"))?;
    let keys = g.add_row(keys, pv.var("spk.key.b"))?;
    let vals = g.matmul(enroll, pv.var("spk.val.w"))?;
    let vals = g.add_row(vals, pv.var("spk.val.b"))?;
    let pooled = g.cross_attention(pv.var("spk.query"), keys, vals, cfg.n_heads)?;
    let pooled = g.matmul(pooled, pv.var("spk.out.w"))?;
    let pooled = g.add_row(pooled, pv.var("spk.out.b"))?;
    let pooled = g.layer_norm(pooled, pv.var("spk.ln.g"), pv.var("spk.ln.b"))?;

    g.concat_rows(&[text_e, pooled])
}

fn transformer_block<E: Scalar>(
    g: &mut Graph<E>,
    pv: &ParamVars<E>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    prefix_len: usize,
) -> Result<Var> {
    let p = |s: &str| format!("layer{layer}.{s}");
    let ln1 = g.layer_norm(x, pv.var(&p("ln1.g")), pv.var(&p("ln1.b")))?;
    let q = g.matmul(ln1, pv.var(&p("attn.wq")))?;
    let q = g.add_row(q, pv.var(&p("attn.bq")))?;
    let k = g.matmul(ln1, pv.var(&p("attn.wk")))?;
    let k = g.add_row(k, pv.var(&p("attn.bk")))?;
    let v = g.matmul(ln1, pv.var(&p("attn.wv")))?;
    let v = g.add_row(v, pv.var(&p("attn.bv")))?;
    let att = g.attention(q, k, v, cfg.n_heads, prefix_len)?;
    let att = g.matmul(att, pv.var(&p("attn.wo")))?;
    let att = g.add_row(att, pv.var(&p("attn.bo")))?;
    let h = g.add(x, att)?;

    let ln2 = g.layer_norm(h, pv.var(&p("ln2.g")), pv.var(&p("ln2.b")))?;
    let f1 = g.matmul(ln2, pv.var(&p("ff.w1")))?;
    let f1 = g.add_row(f1, pv.var(&p("ff.b1")))?;
    let act = g.gelu(f1);
    let f2 = g.matmul(act, pv.var(&p("ff.w2")))?;
    let f2 = g.add_row(f2, pv.var(&p("ff.b2")))?;
    g.add(h, f2)
}

/// Teacher-forced forward over a shifted grid.
///
/// The input sequence is `prefix ++ BOS ++ x(columns 0..T'-2)` where each
/// column embedding is the sum of the per-codebook code embeddings; the
/// output at position `prefix_len + i` predicts shifted column `i`. After
/// `shared_layers` blocks the stream splits into `groups` lanes through the
/// per-group transition projections; lane blocks share weights. Returns one
/// `[T', K]` logits tensor per codebook, read from that codebook's lane.
pub fn forward_full<E: Scalar>(
    g: &mut Graph<E>,
    pv: &ParamVars<E>,
    cfg: &ModelConfig,
    prefix: Var,
    shifted: &ShiftedGrid,
) -> Result<Vec<Var>> {
    if shifted.num_codebooks() != cfg.codebooks
        || shifted.pad_code() as usize != cfg.codebook_size
    {
        return Err(Error::Validation(format!(
            "shifted grid ({} codebooks, pad {}) does not match config ({}, {})",
            shifted.num_codebooks(),
            shifted.pad_code(),
            cfg.codebooks,
            cfg.codebook_size
        )));
    }
    let steps = shifted.num_steps();
    let prefix_len = g.value(prefix).rows();
    let total = prefix_len + 1 + (steps - 1);
    if total > cfg.max_seq {
        return Err(Error::Validation(format!(
            "sequence length {total} exceeds max_seq {}",
            cfg.max_seq
        )));
    }

    // Input embeddings: BOS plus the first T'-1 shifted columns.
    let mut parts = vec![prefix, pv.var("bos")];
    if steps > 1 {
        let mut x_cols: Option<Var> = None;
        for q in 0..cfg.codebooks {
            let indices: Vec<usize> = (0..steps - 1).map(|i| shifted.get(q, i) as usize).collect();
            let e = g.embed_rows(pv.var(&format!("emb.q{q}")), &indices)?;
            x_cols = Some(match x_cols {
                Some(acc) => g.add(acc, e)?,
                None => e,
            });
        }
        parts.push(x_cols.expect("at least one codebook"));
    }
    let seq = g.concat_rows(&parts)?;
    let pos = g.slice_rows(pv.var("pos_emb"), 0, total)?;
    let mut h = g.add(seq, pos)?;

    for l in 0..cfg.shared_layers {
        h = transformer_block(g, pv, cfg, l, h, prefix_len)?;
    }

    let mut lanes = Vec::with_capacity(cfg.groups);
    for lane in 0..cfg.groups {
        let mut lh = g.matmul(h, pv.var(&format!("gproj.{lane}")))?;
        for l in cfg.shared_layers..cfg.layers {
            lh = transformer_block(g, pv, cfg, l, lh, prefix_len)?;
        }
        let lh = g.layer_norm(lh, pv.var("final_ln.g"), pv.var("final_ln.b"))?;
        lanes.push(g.slice_rows(lh, prefix_len, steps)?);
    }

    let mut logits = Vec::with_capacity(cfg.codebooks);
    for q in 0..cfg.codebooks {
        let lane = lanes[cfg.group_of[q]];
        logits.push(g.matmul(lane, pv.var(&format!("proj.q{q}")))?);
    }
    Ok(logits)
}

/// Condition + forward + weighted loss in one call; the unit the trainer and
/// the gradient checks share.
#[allow(clippy::too_many_arguments)]
pub fn lm_loss<E: Scalar>(
    g: &mut Graph<E>,
    pv: &ParamVars<E>,
    cfg: &ModelConfig,
    text: &[usize],
    enrollment: &Tensor<E>,
    shifted: &ShiftedGrid,
    loss_cfg: &LossConfig,
    step: usize,
) -> Result<(Var, FrameWeights<E>, Vec<Var>)> {
    let prefix = condition_prefix(g, pv, cfg, text, enrollment)?;
    let logits = forward_full(g, pv, cfg, prefix, shifted)?;
    let (loss, fw) = weighted_ce_loss(g, &logits, shifted.grid(), loss_cfg, step)?;
    Ok((loss, fw, logits))
}
