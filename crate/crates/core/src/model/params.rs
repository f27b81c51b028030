//! Named-tensor parameter store, initialization, and the closed-form
//! parameter count.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::Tensor;

const INIT_STD: f64 = 0.02;

/// Immutable-by-convention store of named f32 tensors. Iteration order is
/// the lexicographic name order (BTreeMap), which fixes serialization and
/// optimizer update order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        debug_assert!(!self.tensors.contains_key(&name), "duplicate parameter {name}");
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }
}

impl Default for Parameters {
    fn default() -> Self {
        Self::new()
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    // Box-Muller on ChaCha draws: stable across platforms and rand versions.
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push((r * theta.cos() * std) as f32);
        if data.len() < n {
            data.push((r * theta.sin() * std) as f32);
        }
    }
    Tensor::from_vec(shape, data).expect("normal_tensor shape")
}

/// Deterministic initialization: scaled normals for weights and embeddings,
/// zero biases, unit layer-norm gains, zero PAD embedding rows.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut p = Parameters::new();

    for q in 0..cfg.codebooks {
        let mut emb = normal_tensor(&mut rng, &[cfg.codebook_size + 1, d], INIT_STD);
        emb.row_mut(cfg.codebook_size).fill(0.0); // PAD row
        p.insert(format!("emb.q{q}"), emb);
    }
    p.insert("text_emb", normal_tensor(&mut rng, &[cfg.text_vocab, d], INIT_STD));
    p.insert("pos_emb", normal_tensor(&mut rng, &[cfg.max_seq, d], INIT_STD));
    p.insert("bos", normal_tensor(&mut rng, &[1, d], INIT_STD));

    p.insert("spk.query", normal_tensor(&mut rng, &[cfg.cond_len, d], INIT_STD));
    p.insert("spk.key.w", normal_tensor(&mut rng, &[cfg.feature_dim, d], INIT_STD));
    p.insert("spk.key.b", Tensor::zeros(&[d]));
    p.insert("spk.val.w", normal_tensor(&mut rng, &[cfg.feature_dim, d], INIT_STD));
    p.insert("spk.val.b", Tensor::zeros(&[d]));
    p.insert("spk.out.w", normal_tensor(&mut rng, &[d, d], INIT_STD));
    p.insert("spk.out.b", Tensor::zeros(&[d]));
    p.insert("spk.ln.g", Tensor::filled(&[d], 1.0));
    p.insert("spk.ln.b", Tensor::zeros(&[d]));

    for l in 0..cfg.layers {
        let pre = format!("layer{l}");
        p.insert(format!("{pre}.ln1.g"), Tensor::filled(&[d], 1.0));
        p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{pre}.attn.{w}"), normal_tensor(&mut rng, &[d, d], INIT_STD));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("{pre}.attn.{b}"), Tensor::zeros(&[d]));
        }
        p.insert(format!("{pre}.ln2.g"), Tensor::filled(&[d], 1.0));
        p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]));
        p.insert(format!("{pre}.ff.w1"), normal_tensor(&mut rng, &[d, f], INIT_STD));
        p.insert(format!("{pre}.ff.b1"), Tensor::zeros(&[f]));
        p.insert(format!("{pre}.ff.w2"), normal_tensor(&mut rng, &[f, d], INIT_STD));
        p.insert(format!("{pre}.ff.b2"), Tensor::zeros(&[d]));
    }

    for g in 0..cfg.groups {
        p.insert(format!("gproj.{g}"), normal_tensor(&mut rng, &[d, d], INIT_STD));
    }
    p.insert("final_ln.g", Tensor::filled(&[d], 1.0));
    p.insert("final_ln.b", Tensor::zeros(&[d]));
    for q in 0..cfg.codebooks {
        p.insert(
            format!("proj.q{q}"),
            normal_tensor(&mut rng, &[d, cfg.codebook_size], INIT_STD),
        );
    }

    debug_assert_eq!(p.total_scalars(), param_count(cfg));
    Ok(p)
}

/// Expected (name, shape) pairs for a configuration, in store order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for q in 0..cfg.codebooks {
        out.push((format!("emb.q{q}"), vec![cfg.codebook_size + 1, d]));
    }
    out.push(("text_emb".into(), vec![cfg.text_vocab, d]));
    out.push(("pos_emb".into(), vec![cfg.max_seq, d]));
    out.push(("bos".into(), vec![1, d]));
    out.push(("spk.query".into(), vec![cfg.cond_len, d]));
    out.push(("spk.key.w".into(), vec![cfg.feature_dim, d]));
    out.push(("spk.key.b".into(), vec![d]));
    out.push(("spk.val.w".into(), vec![cfg.feature_dim, d]));
    out.push(("spk.val.b".into(), vec![d]));
    out.push(("spk.out.w".into(), vec![d, d]));
    out.push(("spk.out.b".into(), vec![d]));
    out.push(("spk.ln.g".into(), vec![d]));
    out.push(("spk.ln.b".into(), vec![d]));
    for l in 0..cfg.layers {
        let pre = format!("layer{l}");
        out.push((format!("{pre}.ln1.g"), vec![d]));
        out.push((format!("{pre}.ln1.b"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{pre}.attn.{w}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{pre}.attn.{b}"), vec![d]));
        }
        out.push((format!("{pre}.ln2.g"), vec![d]));
        out.push((format!("{pre}.ln2.b"), vec![d]));
        out.push((format!("{pre}.ff.w1"), vec![d, f]));
        out.push((format!("{pre}.ff.b1"), vec![f]));
        out.push((format!("{pre}.ff.w2"), vec![f, d]));
        out.push((format!("{pre}.ff.b2"), vec![d]));
    }
    for g in 0..cfg.groups {
        out.push((format!("gproj.{g}"), vec![d, d]));
    }
    out.push(("final_ln.g".into(), vec![d]));
    out.push(("final_ln.b".into(), vec![d]));
    for q in 0..cfg.codebooks {
        out.push((format!("proj.q{q}"), vec![d, cfg.codebook_size]));
    }
    out
}

/// Verify that a parameter store matches a configuration exactly, naming
/// the offending tensor on mismatch.
pub fn validate_params(params: &Parameters, cfg: &ModelConfig) -> Result<()> {
    let expected = parameter_shapes(cfg);
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .map_err(|_| Error::Validation(format!("checkpoint is missing `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Validation(format!(
                "`{name}` has shape {:?}, config requires {:?}",
                t.shape(),
                shape
            )));
        }
    }
    if params.len() != expected.len() {
        let known: std::collections::BTreeSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        for (name, _) in params.iter() {
            if !known.contains(name.as_str()) {
                return Err(Error::Validation(format!(
                    "unexpected tensor `{name}` for this config (check group_of/groups)"
                )));
            }
        }
    }
    Ok(())
}

/// Closed-form parameter count for a configuration; matches
/// [`init_params`] exactly.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let q = cfg.codebooks;
    let k = cfg.codebook_size;

    let embeddings = q * (k + 1) * d + cfg.text_vocab * d + cfg.max_seq * d + d;
    let speaker = cfg.cond_len * d       // queries
        + 2 * (cfg.feature_dim * d + d)  // key/value projections
        + (d * d + d)                    // output projection
        + 2 * d;                         // layer norm
    let per_layer = 2 * d                // ln1
        + 4 * (d * d + d)                // attention projections
        + 2 * d                          // ln2
        + (d * f + f) + (f * d + d);     // feed-forward
    let transitions = cfg.groups * d * d;
    let heads = q * d * k;
    let final_ln = 2 * d;

    embeddings + speaker + cfg.layers * per_layer + transitions + final_ln + heads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = ModelConfig::desk_default();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn count_matches_store() {
        for groups in [1usize, 2, 4, 8] {
            let mut cfg = ModelConfig::desk_default();
            cfg.groups = groups;
            cfg.group_of = ModelConfig::contiguous_groups(cfg.codebooks, groups).unwrap();
            let p = init_params(&cfg, 7).unwrap();
            assert_eq!(p.total_scalars(), param_count(&cfg), "groups={groups}");
        }
    }

    #[test]
    fn group_count_difference_is_extra_transitions() {
        let mut c1 = ModelConfig::desk_default();
        c1.groups = 1;
        c1.group_of = ModelConfig::contiguous_groups(c1.codebooks, 1).unwrap();
        let mut c8 = c1.clone();
        c8.groups = 8;
        c8.group_of = ModelConfig::contiguous_groups(c8.codebooks, 8).unwrap();
        assert!(param_count(&c1) < param_count(&c8));
        assert_eq!(param_count(&c8) - param_count(&c1), 7 * c1.d_model * c1.d_model);
    }

    #[test]
    fn zero_group_layers_count_depends_on_g_only_via_transitions() {
        let mut a = ModelConfig::desk_default();
        a.shared_layers = a.layers; // N = 0
        let mut b = a.clone();
        b.groups = 4;
        b.group_of = ModelConfig::contiguous_groups(b.codebooks, 4).unwrap();
        assert_eq!(param_count(&b) - param_count(&a), 3 * a.d_model * a.d_model);
    }

    #[test]
    fn doubling_d_ff_changes_only_feed_forward_terms() {
        let a = ModelConfig::desk_default();
        let mut b = a.clone();
        b.d_ff *= 2;
        let expect = a.layers * (a.d_model * a.d_ff + a.d_ff + a.d_ff * a.d_model);
        assert_eq!(param_count(&b) - param_count(&a), expect);
    }

    #[test]
    fn pad_rows_exist_and_are_zero() {
        let cfg = ModelConfig::desk_default();
        let p = init_params(&cfg, 1).unwrap();
        for q in 0..cfg.codebooks {
            let emb = p.get(&format!("emb.q{q}")).unwrap();
            assert_eq!(emb.rows(), cfg.codebook_size + 1);
            assert!(emb.row(cfg.codebook_size).iter().all(|&v| v == 0.0));
        }
    }
}
