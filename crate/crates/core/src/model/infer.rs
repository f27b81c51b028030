//! Inference path: plain f32 evaluation with per-layer KV caches and
//! parallel group-lane caches for the last N layers. No gradient machinery;
//! step-by-step output must match the graph forward within 1e-5.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{validate_params, Parameters};
use crate::numerics::{matmul_nn, Tensor};
use crate::patterns::ShiftedGrid;

/// Condition prefix in evaluation form: text embeddings followed by the
/// pooled speaker vectors, one row per position.
#[derive(Clone, Debug)]
pub struct ConditionPrefix {
    pub rows: Tensor<f32>,
    pub text_len: usize,
}

impl ConditionPrefix {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }
}

fn layer_norm_rows(x: &Tensor<f32>, gamma: &[f32], beta: &[f32]) -> Tensor<f32> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for r in 0..n {
        layer_norm_row(x.row(r), gamma, beta, out.row_mut(r));
    }
    out
}

fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], out: &mut [f32]) {
    let d = x.len();
    let mut mu = 0.0f32;
    for &v in x {
        mu += v;
    }
    mu /= d as f32;
    let mut var = 0.0f32;
    for &v in x {
        let c = v - mu;
        var += c * c;
    }
    var /= d as f32;
    let rstd = 1.0 / (var + crate::numerics::LAYER_NORM_EPS as f32).sqrt();
    for j in 0..d {
        out[j] = (x[j] - mu) * rstd * gamma[j] + beta[j];
    }
}

/// out = x · W (+ bias), x a single row.
fn row_linear(x: &[f32], w: &Tensor<f32>, bias: Option<&[f32]>, out: &mut [f32]) {
    let cols = w.cols();
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.fill(0.0),
    }
    for (p, &xp) in x.iter().enumerate() {
        let wrow = w.row(p);
        for j in 0..cols {
            out[j] += xp * wrow[j];
        }
    }
}

fn mat_linear(x: &Tensor<f32>, w: &Tensor<f32>, bias: Option<&[f32]>) -> Tensor<f32> {
    let mut out = matmul_nn(x, w);
    if let Some(b) = bias {
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..b.len() {
                row[j] += b[j];
            }
        }
    }
    out
}

fn gelu_mat(x: &mut Tensor<f32>) {
    for v in x.data_mut() {
        *v = crate::numerics::gelu_fwd(*v);
    }
}

/// Full-visibility multi-head attention (matrix form), used by the speaker
/// encoder and prefix prefill.
fn attention_full(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, heads: usize) -> Tensor<f32> {
    let (a, d) = (q.rows(), q.cols());
    let b = k.rows();
    let dh = d / heads;
    let scl = 1.0 / (dh as f32).sqrt();
    let mut out = Tensor::zeros(&[a, d]);
    let mut scores = vec![0.0f32; b];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..a {
            let qi = &q.row(i)[off..off + dh];
            let mut m = f32::NEG_INFINITY;
            for j in 0..b {
                let kj = &k.row(j)[off..off + dh];
                let mut dot = 0.0f32;
                for t in 0..dh {
                    dot += qi[t] * kj[t];
                }
                scores[j] = dot * scl;
                m = m.max(scores[j]);
            }
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            let orow = &mut out.row_mut(i)[off..off + dh];
            for j in 0..b {
                let p = scores[j] / sum;
                let vj = &v.row(j)[off..off + dh];
                for t in 0..dh {
                    orow[t] += p * vj[t];
                }
            }
        }
    }
    out
}

/// Prefix-visible causal attention in matrix form (ungrouped oracle path).
fn attention_masked(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    heads: usize,
    prefix_len: usize,
) -> Tensor<f32> {
    let (s, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scl = 1.0 / (dh as f32).sqrt();
    let mut out = Tensor::zeros(&[s, d]);
    let mut scores = vec![0.0f32; s];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..s {
            let limit = if i < prefix_len { prefix_len } else { i + 1 };
            let qi = &q.row(i)[off..off + dh];
            let mut m = f32::NEG_INFINITY;
            for j in 0..limit {
                let kj = &k.row(j)[off..off + dh];
                let mut dot = 0.0f32;
                for t in 0..dh {
                    dot += qi[t] * kj[t];
                }
                scores[j] = dot * scl;
                m = m.max(scores[j]);
            }
            let mut sum = 0.0f32;
            for s in scores[..limit].iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            let orow = &mut out.row_mut(i)[off..off + dh];
            for j in 0..limit {
                let p = scores[j] / sum;
                let vj = &v.row(j)[off..off + dh];
                for t in 0..dh {
                    orow[t] += p * vj[t];
                }
            }
        }
    }
    out
}

/// Encode text + enrollment into the condition prefix (evaluation twin of
/// the graph version; deterministic, fixed output length).
pub fn encode_condition(
    params: &Parameters,
    cfg: &ModelConfig,
    text: &[usize],
    enrollment: &Tensor<f32>,
) -> Result<ConditionPrefix> {
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
    if enrollment.shape().len() != 2 || enrollment.rows() == 0 || enrollment.cols() != cfg.feature_dim
    {
        return Err(Error::Validation(format!(
            "enrollment features must be [T, {}], got {:?}",
            cfg.feature_dim,
            enrollment.shape()
        )));
    }
    let d = cfg.d_model;
    let text_emb = params.get("text_emb")?;
    let mut rows = Tensor::zeros(&[text.len() + cfg.cond_len, d]);
    for (i, &t) in text.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(text_emb.row(t));
    }

    let keys = mat_linear(enrollment, params.get("spk.key.w")?, Some(params.get("spk.key.b")?.data()));
    let vals = mat_linear(enrollment, params.get("spk.val.w")?, Some(params.get("spk.val.b")?.data()));
    let pooled = attention_full(params.get("spk.query")?, &keys, &vals, cfg.n_heads);
    let pooled = mat_linear(&pooled, params.get("spk.out.w")?, Some(params.get("spk.out.b")?.data()));
    let pooled = layer_norm_rows(
        &pooled,
        params.get("spk.ln.g")?.data(),
        params.get("spk.ln.b")?.data(),
    );
    for i in 0..cfg.cond_len {
        rows.row_mut(text.len() + i).copy_from_slice(pooled.row(i));
    }
    Ok(ConditionPrefix { rows, text_len: text.len() })
}

/// Sum of per-codebook embeddings for one step's codes (PAD = K allowed).
pub fn embed_codes(params: &Parameters, cfg: &ModelConfig, codes: &[u16]) -> Result<Vec<f32>> {
    if codes.len() != cfg.codebooks {
        return Err(Error::Validation(format!(
            "expected {} codes, got {}",
            cfg.codebooks,
            codes.len()
        )));
    }
    let mut out = vec![0.0f32; cfg.d_model];
    for (q, &c) in codes.iter().enumerate() {
        if c as usize > cfg.codebook_size {
            return Err(Error::Validation(format!(
                "code {c} out of range 0..={} in codebook {q}",
                cfg.codebook_size
            )));
        }
        let emb = params.get(&format!("emb.q{q}"))?;
        for (o, &v) in out.iter_mut().zip(emb.row(c as usize)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Appended key/value rows for one attention layer.
#[derive(Clone, Debug, Default)]
struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

impl LayerKv {
    fn rows(&self, d: usize) -> usize {
        self.k.len() / d
    }

    fn push_rows(&mut self, k: &Tensor<f32>, v: &Tensor<f32>) {
        self.k.extend_from_slice(k.data());
        self.v.extend_from_slice(v.data());
    }

    fn push_row(&mut self, k: &[f32], v: &[f32]) {
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
    }
}

/// Incremental decoding state: per-layer caches for the shared trunk plus
/// one cache lane per codebook group for the last N layers.
#[derive(Clone, Debug)]
pub struct DecoderState {
    shared: Vec<LayerKv>,
    /// lanes[g][n] is the cache of group lane g at group layer n.
    lanes: Vec<Vec<LayerKv>>,
    prefix_len: usize,
    rows: usize,
    columns_out: usize,
}

impl DecoderState {
    /// Cached positions: prefix + BOS + consumed steps.
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Logit columns produced so far.
    pub fn columns_out(&self) -> usize {
        self.columns_out
    }
}

/// Evaluation-mode decoder borrowing immutable parameters.
pub struct Decoder<'a> {
    params: &'a Parameters,
    cfg: &'a ModelConfig,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a Parameters, cfg: &'a ModelConfig) -> Result<Self> {
        cfg.validate()?;
        validate_params(params, cfg)?;
        Ok(Decoder { params, cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn p(&self, name: &str) -> &Tensor<f32> {
        self.params.get(name).expect("validated parameter set")
    }

    /// Process the condition prefix and the BOS step; returns the state and
    /// the logits for shifted column 0.
    pub fn start(&self, cond: &ConditionPrefix) -> Result<(DecoderState, Tensor<f32>)> {
        let p_len = cond.len();
        if p_len + 1 > self.cfg.max_seq {
            return Err(Error::Validation(format!(
                "prefix length {p_len} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        if cond.rows.cols() != self.cfg.d_model {
            return Err(Error::Validation(format!(
                "condition width {} does not match d_model {}",
                cond.rows.cols(),
                self.cfg.d_model
            )));
        }
        let mut state = DecoderState {
            shared: vec![LayerKv::default(); self.cfg.shared_layers],
            lanes: vec![vec![LayerKv::default(); self.cfg.group_layers()]; self.cfg.groups],
            prefix_len: p_len,
            rows: 0,
            columns_out: 0,
        };
        self.prefill(&mut state, cond);
        let bos = self.p("bos").row(0).to_vec();
        let logits = self.step_row(&mut state, bos)?;
        Ok((state, logits))
    }

    /// Feed one column of codes; returns logits for the next column.
    pub fn forward_step(&self, state: &mut DecoderState, codes: &[u16]) -> Result<Tensor<f32>> {
        if state.rows <= state.prefix_len {
            return Err(Error::Validation("stale state: start() has not run".into()));
        }
        if state.shared.len() != self.cfg.shared_layers
            || state.lanes.len() != self.cfg.groups
        {
            return Err(Error::Validation("stale state: built for a different config".into()));
        }
        let emb = embed_codes(self.params, self.cfg, codes)?;
        let logits = self.step_row(state, emb)?;
        state.columns_out += 1;
        Ok(logits)
    }

    /// Prefix block: full visibility among prefix rows, caches filled.
    fn prefill(&self, state: &mut DecoderState, cond: &ConditionPrefix) {
        let p_len = cond.len();
        let mut x = cond.rows.clone();
        let pos = self.p("pos_emb");
        for r in 0..p_len {
            let row = x.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v += pos.row(r)[j];
            }
        }
        for l in 0..self.cfg.shared_layers {
            x = self.block_mat(l, x, &mut state.shared[l]);
        }
        for g in 0..self.cfg.groups {
            let mut lane = matmul_nn(&x, self.p(&format!("gproj.{g}")));
            for (n, l) in (self.cfg.shared_layers..self.cfg.layers).enumerate() {
                lane = self.block_mat(l, lane, &mut state.lanes[g][n]);
            }
        }
        state.rows = p_len;
    }

    /// One transformer block over a full matrix (prefill), appending KV.
    fn block_mat(&self, layer: usize, x: Tensor<f32>, cache: &mut LayerKv) -> Tensor<f32> {
        let name = |s: &str| format!("layer{layer}.{s}");
        let ln1 = layer_norm_rows(&x, self.p(&name("ln1.g")).data(), self.p(&name("ln1.b")).data());
        let q = mat_linear(&ln1, self.p(&name("attn.wq")), Some(self.p(&name("attn.bq")).data()));
        let k = mat_linear(&ln1, self.p(&name("attn.wk")), Some(self.p(&name("attn.bk")).data()));
        let v = mat_linear(&ln1, self.p(&name("attn.wv")), Some(self.p(&name("attn.bv")).data()));
        cache.push_rows(&k, &v);
        let att = attention_full(&q, &k, &v, self.cfg.n_heads);
        let att = mat_linear(&att, self.p(&name("attn.wo")), Some(self.p(&name("attn.bo")).data()));
        let mut h = x;
        for (hv, av) in h.data_mut().iter_mut().zip(att.data()) {
            *hv += av;
        }
        let ln2 = layer_norm_rows(&h, self.p(&name("ln2.g")).data(), self.p(&name("ln2.b")).data());
        let mut f1 = mat_linear(&ln2, self.p(&name("ff.w1")), Some(self.p(&name("ff.b1")).data()));
        gelu_mat(&mut f1);
        let f2 = mat_linear(&f1, self.p(&name("ff.w2")), Some(self.p(&name("ff.b2")).data()));
        for (hv, fv) in h.data_mut().iter_mut().zip(f2.data()) {
            *hv += fv;
        }
        h
    }

    /// One transformer block over a single row, attending the cache.
    fn block_row(&self, layer: usize, x: &mut [f32], cache: &mut LayerKv) {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scl = 1.0 / (dh as f32).sqrt();
        let name = |s: &str| format!("layer{layer}.{s}");

        let mut ln1 = vec![0.0f32; d];
        layer_norm_row(x, self.p(&name("ln1.g")).data(), self.p(&name("ln1.b")).data(), &mut ln1);
        let mut q = vec![0.0f32; d];
        let mut k = vec![0.0f32; d];
        let mut v = vec![0.0f32; d];
        row_linear(&ln1, self.p(&name("attn.wq")), Some(self.p(&name("attn.bq")).data()), &mut q);
        row_linear(&ln1, self.p(&name("attn.wk")), Some(self.p(&name("attn.bk")).data()), &mut k);
        row_linear(&ln1, self.p(&name("attn.wv")), Some(self.p(&name("attn.bv")).data()), &mut v);
        cache.push_row(&k, &v);

        let rows = cache.rows(d);
        let mut att = vec![0.0f32; d];
        let mut scores = vec![0.0f32; rows];
        for h in 0..heads {
            let off = h * dh;
            let qh = &q[off..off + dh];
            let mut m = f32::NEG_INFINITY;
            for j in 0..rows {
                let kj = &cache.k[j * d + off..j * d + off + dh];
                let mut dot = 0.0f32;
                for t in 0..dh {
                    dot += qh[t] * kj[t];
                }
                scores[j] = dot * scl;
                m = m.max(scores[j]);
            }
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            let ah = &mut att[off..off + dh];
            for j in 0..rows {
                let p = scores[j] / sum;
                let vj = &cache.v[j * d + off..j * d + off + dh];
                for t in 0..dh {
                    ah[t] += p * vj[t];
                }
            }
        }
        let mut att_o = vec![0.0f32; d];
        row_linear(&att, self.p(&name("attn.wo")), Some(self.p(&name("attn.bo")).data()), &mut att_o);
        for (xv, av) in x.iter_mut().zip(&att_o) {
            *xv += av;
        }

        let mut ln2 = vec![0.0f32; d];
        layer_norm_row(x, self.p(&name("ln2.g")).data(), self.p(&name("ln2.b")).data(), &mut ln2);
        let mut f1 = vec![0.0f32; self.cfg.d_ff];
        row_linear(&ln2, self.p(&name("ff.w1")), Some(self.p(&name("ff.b1")).data()), &mut f1);
        for v in f1.iter_mut() {
            *v = crate::numerics::gelu_fwd(*v);
        }
        let mut f2 = vec![0.0f32; d];
        row_linear(&f1, self.p(&name("ff.w2")), Some(self.p(&name("ff.b2")).data()), &mut f2);
        for (xv, fv) in x.iter_mut().zip(&f2) {
            *xv += fv;
        }
    }

    /// Advance one position; returns per-codebook logits `[Q, K]`.
    fn step_row(&self, state: &mut DecoderState, mut x: Vec<f32>) -> Result<Tensor<f32>> {
        let d = self.cfg.d_model;
        let pos = state.rows;
        if pos >= self.cfg.max_seq {
            return Err(Error::Validation(format!(
                "position {pos} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let pe = self.p("pos_emb");
        for (v, &pv) in x.iter_mut().zip(pe.row(pos)) {
            *v += pv;
        }
        for l in 0..self.cfg.shared_layers {
            self.block_row(l, &mut x, &mut state.shared[l]);
        }
        let mut lane_rows: Vec<Vec<f32>> = Vec::with_capacity(self.cfg.groups);
        for g in 0..self.cfg.groups {
            let mut lane = vec![0.0f32; d];
            row_linear(&x, self.p(&format!("gproj.{g}")), None, &mut lane);
            for (n, l) in (self.cfg.shared_layers..self.cfg.layers).enumerate() {
                self.block_row(l, &mut lane, &mut state.lanes[g][n]);
            }
            let mut normed = vec![0.0f32; d];
            layer_norm_row(&lane, self.p("final_ln.g").data(), self.p("final_ln.b").data(), &mut normed);
            lane_rows.push(normed);
        }
        let k = self.cfg.codebook_size;
        let mut logits = Tensor::zeros(&[self.cfg.codebooks, k]);
        for q in 0..self.cfg.codebooks {
            let lane = &lane_rows[self.cfg.group_of[q]];
            row_linear(lane, self.p(&format!("proj.q{q}")), None, logits.row_mut(q));
        }
        state.rows += 1;
        Ok(logits)
    }

    /// Teacher-forced logits for every column via the step path.
    /// Returns one `[T', K]` tensor per codebook.
    pub fn forward_full_eval(
        &self,
        cond: &ConditionPrefix,
        shifted: &ShiftedGrid,
    ) -> Result<Vec<Tensor<f32>>> {
        let steps = shifted.num_steps();
        let k = self.cfg.codebook_size;
        let mut per_q: Vec<Tensor<f32>> =
            (0..self.cfg.codebooks).map(|_| Tensor::zeros(&[steps, k])).collect();
        let (mut state, first) = self.start(cond)?;
        let mut store = |col: usize, logits: &Tensor<f32>, per_q: &mut Vec<Tensor<f32>>| {
            for q in 0..self.cfg.codebooks {
                per_q[q].row_mut(col).copy_from_slice(logits.row(q));
            }
        };
        store(0, &first, &mut per_q);
        for i in 0..steps - 1 {
            let codes = shifted.column(i);
            let logits = self.forward_step(&mut state, &codes)?;
            store(i + 1, &logits, &mut per_q);
        }
        Ok(per_q)
    }
}

/// Straight-line full-sequence forward without lane machinery; only valid
/// for G = 1, where the model must be exactly the ungrouped decoder. Used
/// as the structural-equivalence oracle for the grouped implementation.
pub fn forward_full_ungrouped(
    params: &Parameters,
    cfg: &ModelConfig,
    cond: &ConditionPrefix,
    shifted: &ShiftedGrid,
) -> Result<Vec<Tensor<f32>>> {
    if cfg.groups != 1 {
        return Err(Error::Config(format!(
            "ungrouped forward requires groups = 1, got {}",
            cfg.groups
        )));
    }
    validate_params(params, cfg)?;
    let steps = shifted.num_steps();
    let p_len = cond.len();
    let total = p_len + steps;
    let d = cfg.d_model;
    if total > cfg.max_seq {
        return Err(Error::Validation(format!(
            "sequence length {total} exceeds max_seq {}",
            cfg.max_seq
        )));
    }

    let mut x = Tensor::zeros(&[total, d]);
    for r in 0..p_len {
        x.row_mut(r).copy_from_slice(cond.rows.row(r));
    }
    x.row_mut(p_len).copy_from_slice(params.get("bos")?.row(0));
    for i in 0..steps - 1 {
        let emb = embed_codes(params, cfg, &shifted.column(i))?;
        x.row_mut(p_len + 1 + i).copy_from_slice(&emb);
    }
    let pe = params.get("pos_emb")?;
    for r in 0..total {
        let row = x.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v += pe.row(r)[j];
        }
    }

    let heads = cfg.n_heads;
    let name = |l: usize, s: &str| format!("layer{l}.{s}");
    let mut run_block = |x: Tensor<f32>, l: usize| -> Result<Tensor<f32>> {
        let ln1 = layer_norm_rows(&x, params.get(&name(l, "ln1.g"))?.data(), params.get(&name(l, "ln1.b"))?.data());
        let q = mat_linear(&ln1, params.get(&name(l, "attn.wq"))?, Some(params.get(&name(l, "attn.bq"))?.data()));
        let k = mat_linear(&ln1, params.get(&name(l, "attn.wk"))?, Some(params.get(&name(l, "attn.bk"))?.data()));
        let v = mat_linear(&ln1, params.get(&name(l, "attn.wv"))?, Some(params.get(&name(l, "attn.bv"))?.data()));
        let att = attention_masked(&q, &k, &v, heads, p_len);
        let att = mat_linear(&att, params.get(&name(l, "attn.wo"))?, Some(params.get(&name(l, "attn.bo"))?.data()));
        let mut h = x;
        for (hv, av) in h.data_mut().iter_mut().zip(att.data()) {
            *hv += av;
        }
        let ln2 = layer_norm_rows(&h, params.get(&name(l, "ln2.g"))?.data(), params.get(&name(l, "ln2.b"))?.data());
        let mut f1 = mat_linear(&ln2, params.get(&name(l, "ff.w1"))?, Some(params.get(&name(l, "ff.b1"))?.data()));
        gelu_mat(&mut f1);
        let f2 = mat_linear(&f1, params.get(&name(l, "ff.w2"))?, Some(params.get(&name(l, "ff.b2"))?.data()));
        for (hv, fv) in h.data_mut().iter_mut().zip(f2.data()) {
            *hv += fv;
        }
        Ok(h)
    };

    for l in 0..cfg.shared_layers {
        x = run_block(x, l)?;
    }
    x = matmul_nn(&x, params.get("gproj.0")?);
    for l in cfg.shared_layers..cfg.layers {
        x = run_block(x, l)?;
    }
    let x = layer_norm_rows(&x, params.get("final_ln.g")?.data(), params.get("final_ln.b")?.data());

    let mut out = Vec::with_capacity(cfg.codebooks);
    let kk = cfg.codebook_size;
    for q in 0..cfg.codebooks {
        let proj = params.get(&format!("proj.q{q}"))?;
        let mut logits = Tensor::zeros(&[steps, kk]);
        for i in 0..steps {
            row_linear(x.row(p_len + i), proj, None, logits.row_mut(i));
        }
        out.push(logits);
    }
    Ok(out)
}
