//! Parameter storage and transformer building blocks.
//!
//! Parameters live in a [`ParamStore`] keyed by slash-separated names
//! (`phi/backbone/layer0/attn/q/w`, ...). Forward code pulls them onto a
//! [`Tape`] through [`GraphParams`], which also decides per name whether the
//! leaf is gradient-tracked. Initialization draws from a caller-supplied RNG
//! in a fixed registration order, so a seed fully determines the model.
//!
//! All stacks are pre-norm: `x + attn(ln(x))`, `x + mlp(ln(x))`, with a final
//! layer norm after the last block. Attention is bidirectional (no causal
//! mask) and MLP hidden width is four times the model width.

use crate::error::{AsterError, Result};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Default weight initialization scale.
pub const INIT_STD: f64 = 0.02;
/// MLP hidden width multiplier inside transformer blocks.
pub const MLP_RATIO: usize = 4;

/// Named tensor container backing every model component.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.map
            .get(name)
            .ok_or_else(|| AsterError::Shape(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| AsterError::Shape(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    /// Names under a `prefix/` namespace.
    pub fn names_under(&self, prefix: &str) -> Vec<String> {
        let full = format!("{prefix}/");
        self.map
            .keys()
            .filter(|n| n.starts_with(&full))
            .cloned()
            .collect()
    }

    /// Total scalar count over a set of names.
    pub fn element_count<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> usize {
        names
            .into_iter()
            .map(|n| self.map.get(n).map_or(0, |a| a.len()))
            .sum()
    }
}

/// Bridge between a [`ParamStore`] and a [`Tape`]: fetches parameters as
/// (possibly frozen) leaves.
pub struct GraphParams<'a> {
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
}

impl<'a> GraphParams<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { store, trainable }
    }

    /// All parameters trainable; used where freezing is not a concern.
    pub fn all_trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: &|_: &str| true,
        }
    }

    pub fn fetch(&self, tape: &mut Tape, name: &str) -> Var {
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|e| panic!("missing parameter: {e}"));
        tape.param(name, value, (self.trainable)(name))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

// ---- initialization ----

pub fn init_gaussian<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    shape: &[usize],
    std: f64,
) {
    let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    });
    store.insert(name, value);
}

pub fn init_zeros(store: &mut ParamStore, name: &str, shape: &[usize]) {
    store.insert(name, ArrayD::zeros(IxDyn(shape)));
}

pub fn init_ones(store: &mut ParamStore, name: &str, shape: &[usize]) {
    store.insert(name, ArrayD::from_elem(IxDyn(shape), 1.0));
}

pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    init_gaussian(store, rng, &format!("{prefix}/w"), &[d_in, d_out], INIT_STD);
    init_zeros(store, &format!("{prefix}/b"), &[d_out]);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    init_ones(store, &format!("{prefix}/gamma"), &[dim]);
    init_zeros(store, &format!("{prefix}/beta"), &[dim]);
}

/// q/k/v/out projections; keys and values read from a `d_kv`-wide source.
pub fn init_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_model: usize,
    d_kv: usize,
) {
    init_linear(store, rng, &format!("{prefix}/q"), d_model, d_model);
    init_linear(store, rng, &format!("{prefix}/k"), d_kv, d_model);
    init_linear(store, rng, &format!("{prefix}/v"), d_kv, d_model);
    init_linear(store, rng, &format!("{prefix}/out"), d_model, d_model);
}

/// Low-rank adapter pair for the linear at `prefix`: `a` is `rank x d_in`
/// drawn from N(0, 1/rank), `b` is `d_out x rank` zeros, so the adapted layer
/// starts exactly at the frozen function.
pub fn init_lora_adapter<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
) {
    let std = (1.0 / rank as f64).sqrt();
    init_gaussian(store, rng, &format!("{prefix}/lora_a"), &[rank, d_in], std);
    init_zeros(store, &format!("{prefix}/lora_b"), &[d_out, rank]);
}

pub fn init_mlp_block<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d_model: usize) {
    let hidden = MLP_RATIO * d_model;
    init_linear(store, rng, &format!("{prefix}/fc1"), d_model, hidden);
    init_linear(store, rng, &format!("{prefix}/fc2"), hidden, d_model);
}

pub fn init_encoder_layer<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_model: usize,
) {
    init_layer_norm(store, &format!("{prefix}/ln1"), d_model);
    init_attention(store, rng, &format!("{prefix}/attn"), d_model, d_model);
    init_layer_norm(store, &format!("{prefix}/ln2"), d_model);
    init_mlp_block(store, rng, &format!("{prefix}/mlp"), d_model);
}

pub fn init_encoder_stack<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    depth: usize,
    d_model: usize,
) {
    for i in 0..depth {
        init_encoder_layer(store, rng, &format!("{prefix}/layer{i}"), d_model);
    }
    init_layer_norm(store, &format!("{prefix}/ln_f"), d_model);
}

pub fn init_decoder_layer<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_model: usize,
    d_kv: usize,
) {
    init_layer_norm(store, &format!("{prefix}/ln1"), d_model);
    init_attention(store, rng, &format!("{prefix}/attn"), d_model, d_model);
    init_layer_norm(store, &format!("{prefix}/ln_c"), d_model);
    init_attention(store, rng, &format!("{prefix}/cross"), d_model, d_kv);
    init_layer_norm(store, &format!("{prefix}/ln2"), d_model);
    init_mlp_block(store, rng, &format!("{prefix}/mlp"), d_model);
}

/// Decoder stack plus output projection back to model width.
pub fn init_decoder_stack<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    depth: usize,
    d_model: usize,
    d_kv: usize,
) {
    for i in 0..depth {
        init_decoder_layer(store, rng, &format!("{prefix}/layer{i}"), d_model, d_kv);
    }
    init_layer_norm(store, &format!("{prefix}/ln_f"), d_model);
    init_linear(store, rng, &format!("{prefix}/out"), d_model, d_model);
}

/// Adapters for every attention projection in an encoder stack.
pub fn init_lora_for_stack<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    depth: usize,
    d_model: usize,
    rank: usize,
) {
    for i in 0..depth {
        for proj in ["q", "k", "v", "out"] {
            init_lora_adapter(
                store,
                rng,
                &format!("{prefix}/layer{i}/attn/{proj}"),
                d_model,
                d_model,
                rank,
            );
        }
    }
}

// ---- graph builders ----

/// Scaling and rank of active low-rank adapters.
#[derive(Debug, Clone, Copy)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn flatten_leading(tape: &mut Tape, x: Var) -> (Var, Vec<usize>) {
    let shape = tape.shape(x).to_vec();
    if shape.len() == 2 {
        return (x, shape);
    }
    let last = *shape.last().expect("linear input must have a feature axis");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    (tape.reshape(x, &[rows, last]), shape)
}

fn restore_leading(tape: &mut Tape, y: Var, orig: &[usize], d_out: usize) -> Var {
    if orig.len() == 2 {
        return y;
    }
    let mut shape = orig[..orig.len() - 1].to_vec();
    shape.push(d_out);
    tape.reshape(y, &shape)
}

/// Affine map over the last axis: `y = x @ w + b`.
pub fn linear(tape: &mut Tape, gp: &GraphParams, prefix: &str, x: Var) -> Var {
    linear_lora(tape, gp, prefix, x, None)
}

/// Affine map with optional low-rank adapter:
/// `y = x @ w + b + (alpha/r) * x @ a^T @ b_up^T`.
pub fn linear_lora(
    tape: &mut Tape,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    lora: Option<LoraSpec>,
) -> Var {
    let w = gp.fetch(tape, &format!("{prefix}/w"));
    let b = gp.fetch(tape, &format!("{prefix}/b"));
    let d_out = tape.shape(w)[1];
    let (flat, orig) = flatten_leading(tape, x);
    let mut y = tape.matmul(flat, w);
    if let Some(spec) = lora {
        let a = gp.fetch(tape, &format!("{prefix}/lora_a"));
        let b_up = gp.fetch(tape, &format!("{prefix}/lora_b"));
        let a_t = tape.permute(a, &[1, 0]);
        let b_t = tape.permute(b_up, &[1, 0]);
        let down = tape.matmul(flat, a_t);
        let up = tape.matmul(down, b_t);
        let scaled = tape.scale(up, spec.scale());
        y = tape.add(y, scaled);
    }
    let y = tape.add_b(y, b);
    restore_leading(tape, y, &orig, d_out)
}

pub fn layer_norm(tape: &mut Tape, gp: &GraphParams, prefix: &str, x: Var) -> Var {
    let gamma = gp.fetch(tape, &format!("{prefix}/gamma"));
    let beta = gp.fetch(tape, &format!("{prefix}/beta"));
    tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Multi-head scaled dot-product attention. `q_in` is `[B, Lq, M]`; keys and
/// values come from `kv_in` `[B, Lk, Dkv]`. Adapters, when given, apply to all
/// four projections.
pub fn multi_head_attention(
    tape: &mut Tape,
    gp: &GraphParams,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    lora: Option<LoraSpec>,
) -> Var {
    let (batch, l_q, m) = {
        let s = tape.shape(q_in);
        (s[0], s[1], s[2])
    };
    let l_k = tape.shape(kv_in)[1];
    assert_eq!(m % heads, 0, "model width must divide into heads");
    let d_head = m / heads;

    let q = linear_lora(tape, gp, &format!("{prefix}/q"), q_in, lora);
    let k = linear_lora(tape, gp, &format!("{prefix}/k"), kv_in, lora);
    let v = linear_lora(tape, gp, &format!("{prefix}/v"), kv_in, lora);

    let q = tape.reshape(q, &[batch, l_q, heads, d_head]);
    let q = tape.permute(q, &[0, 2, 1, 3]); // [B,H,Lq,dh]
    let k = tape.reshape(k, &[batch, l_k, heads, d_head]);
    let k = tape.permute(k, &[0, 2, 3, 1]); // [B,H,dh,Lk]
    let v = tape.reshape(v, &[batch, l_k, heads, d_head]);
    let v = tape.permute(v, &[0, 2, 1, 3]); // [B,H,Lk,dh]

    let scores = tape.batch_matmul(q, k);
    let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
    let attn = tape.softmax(scores);
    let ctx = tape.batch_matmul(attn, v); // [B,H,Lq,dh]
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let merged = tape.reshape(ctx, &[batch, l_q, m]);
    linear_lora(tape, gp, &format!("{prefix}/out"), merged, lora)
}

pub fn mlp_block(tape: &mut Tape, gp: &GraphParams, prefix: &str, x: Var) -> Var {
    let h = linear(tape, gp, &format!("{prefix}/fc1"), x);
    let h = tape.gelu(h);
    linear(tape, gp, &format!("{prefix}/fc2"), h)
}

/// Pre-norm self-attention block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn encoder_layer(
    tape: &mut Tape,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    heads: usize,
    lora: Option<LoraSpec>,
) -> Var {
    let n1 = layer_norm(tape, gp, &format!("{prefix}/ln1"), x);
    let a = multi_head_attention(tape, gp, &format!("{prefix}/attn"), n1, n1, heads, lora);
    let x = tape.add(x, a);
    let n2 = layer_norm(tape, gp, &format!("{prefix}/ln2"), x);
    let m = mlp_block(tape, gp, &format!("{prefix}/mlp"), n2);
    tape.add(x, m)
}

pub fn encoder_stack(
    tape: &mut Tape,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    depth: usize,
    heads: usize,
    lora: Option<LoraSpec>,
) -> Var {
    let mut h = x;
    for i in 0..depth {
        h = encoder_layer(tape, gp, &format!("{prefix}/layer{i}"), h, heads, lora);
    }
    layer_norm(tape, gp, &format!("{prefix}/ln_f"), h)
}

/// Pre-norm decoder block with cross-attention onto `kv`.
pub fn decoder_layer(
    tape: &mut Tape,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    kv: Var,
    heads: usize,
) -> Var {
    let n1 = layer_norm(tape, gp, &format!("{prefix}/ln1"), x);
    let a = multi_head_attention(tape, gp, &format!("{prefix}/attn"), n1, n1, heads, None);
    let x = tape.add(x, a);
    let nc = layer_norm(tape, gp, &format!("{prefix}/ln_c"), x);
    let c = multi_head_attention(tape, gp, &format!("{prefix}/cross"), nc, kv, heads, None);
    let x = tape.add(x, c);
    let n2 = layer_norm(tape, gp, &format!("{prefix}/ln2"), x);
    let m = mlp_block(tape, gp, &format!("{prefix}/mlp"), n2);
    tape.add(x, m)
}

/// Decoder stack: blocks, final norm, output projection.
pub fn decoder_stack(
    tape: &mut Tape,
    gp: &GraphParams,
    prefix: &str,
    x: Var,
    kv: Var,
    depth: usize,
    heads: usize,
) -> Var {
    let mut h = x;
    for i in 0..depth {
        h = decoder_layer(tape, gp, &format!("{prefix}/layer{i}"), h, kv, heads);
    }
    let h = layer_norm(tape, gp, &format!("{prefix}/ln_f"), h);
    linear(tape, gp, &format!("{prefix}/out"), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;
    use ndarray::IxDyn;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn test_store(d: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        init_encoder_stack(&mut store, &mut rng, "enc", 1, d);
        init_decoder_stack(&mut store, &mut rng, "dec", 1, d, d);
        store
    }

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let store = test_store(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = ArrayD::zeros(IxDyn(&[1, 3, 4]));
        x.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let err = max_relative_error(
            |t, vars| {
                let gp = GraphParams::all_trainable(&store);
                let y = encoder_stack(t, &gp, "enc", vars[0], 1, 2, None);
                t.sum_all(y)
            },
            &[x],
            1e-5,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn decoder_latent_path_gradients_match_finite_differences() {
        let store = test_store(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pe = ArrayD::zeros(IxDyn(&[1, 3, 4]));
        pe.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let mut z = ArrayD::zeros(IxDyn(&[1, 3, 4]));
        z.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let pe_fixed = pe.clone();
        let err = max_relative_error(
            |t, vars| {
                let gp = GraphParams::all_trainable(&store);
                let pe_v = t.constant(pe_fixed.clone());
                let y = decoder_stack(t, &gp, "dec", pe_v, vars[0], 1, 2);
                t.sum_all(y)
            },
            &[z],
            1e-5,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn lora_parameter_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_linear(&mut store, &mut rng, "lin", 3, 3);
        init_lora_adapter(&mut store, &mut rng, "lin", 3, 3, 2);
        // Nonzero b so the adapter path carries gradient signal.
        store
            .get_mut("lin/lora_b")
            .unwrap()
            .mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));

        let x0 = {
            let mut x = ArrayD::zeros(IxDyn(&[2, 3]));
            x.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
            x
        };
        let spec = LoraSpec {
            rank: 2,
            alpha: 4.0,
        };
        let err = crate::gradcheck::max_relative_error_params(
            |t, s| {
                let gp = GraphParams::all_trainable(s);
                let x = t.constant(x0.clone());
                let y = linear_lora(t, &gp, "lin", x, Some(spec));
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &store,
            &["lin/lora_a", "lin/lora_b", "lin/w"],
            1e-6,
        );
        assert!(err < 1e-6, "relative error {err}");
    }
}
