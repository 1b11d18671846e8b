//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds the forward graph from scratch at perturbed inputs, so
//! it is independent of the backward pass it validates.

use crate::nn::ParamStore;
use crate::tape::{Tape, Var};
use ndarray::ArrayD;

/// Maximum relative gradient error of a scalar-valued graph over a set of
/// leaf inputs, comparing reverse-mode gradients against central finite
/// differences with step `h`.
///
/// `build` must construct the graph deterministically from the given leaves
/// and return the scalar output node.
pub fn max_relative_error<F>(build: F, inputs: &[ArrayD<f64>], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars);
    assert_eq!(
        tape.value(out).len(),
        1,
        "gradient check requires a scalar output"
    );
    let grads = tape.backward(out);

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let o = build(&mut t, &vs);
        t.scalar(o)
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[i]);
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let slice = plus[i].as_slice_mut().expect("standard layout");
                slice[idx] += h;
            }
            {
                let slice = minus[i].as_slice_mut().expect("standard layout");
                slice[idx] -= h;
            }
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().expect("standard layout")[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Like [`max_relative_error`], but differentiates with respect to named
/// entries of a [`ParamStore`]. `forward` rebuilds the scalar graph from the
/// given store; the checker perturbs each scalar of each named parameter.
pub fn max_relative_error_params<F>(
    forward: F,
    store: &ParamStore,
    names: &[&str],
    h: f64,
) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = forward(&mut tape, store);
    assert_eq!(
        tape.value(out).len(),
        1,
        "gradient check requires a scalar output"
    );
    let grads = tape.backward(out);

    let eval = |s: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let o = forward(&mut t, s);
        t.scalar(o)
    };

    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = grads
            .by_name(&tape, name)
            .unwrap_or_else(|| panic!("parameter {name} not on tape"));
        let base = store.get(name).expect("unknown parameter").clone();
        for idx in 0..base.len() {
            let mut plus = store.clone();
            let mut minus = store.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().expect("standard layout")[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(shape: &[usize], rng: &mut StdRng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_chain_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[4, 2], &mut rng);
        let err = max_relative_error(
            |t, vars| {
                let prod = t.matmul(vars[0], vars[1]);
                let act = t.gelu(prod);
                t.sum_all(act)
            },
            &[a, b],
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_layernorm_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(8);
        let x = randn(&[2, 5], &mut rng);
        let gamma = randn(&[5], &mut rng);
        let beta = randn(&[5], &mut rng);
        let err = max_relative_error(
            |t, vars| {
                let ln = t.layer_norm(vars[0], vars[1], vars[2], 1e-5);
                let sm = t.softmax(ln);
                let sq = t.mul(sm, sm);
                t.sum_all(sq)
            },
            &[x, gamma, beta],
            1e-5,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn batched_attention_shaped_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let q = randn(&[2, 2, 3, 4], &mut rng);
        let k = randn(&[2, 2, 3, 4], &mut rng);
        let v = randn(&[2, 2, 3, 4], &mut rng);
        let err = max_relative_error(
            |t, vars| {
                let kt = t.permute(vars[1], &[0, 1, 3, 2]);
                let scores = t.batch_matmul(vars[0], kt);
                let scaled = t.scale(scores, 0.5);
                let attn = t.softmax(scaled);
                let ctx = t.batch_matmul(attn, vars[2]);
                let sig = t.sigmoid(ctx);
                t.sum_all(sig)
            },
            &[q, k, v],
            1e-5,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = randn(&[2, 3, 4], &mut rng);
        let y = randn(&[1, 3, 4], &mut rng);
        let bias = randn(&[4], &mut rng);
        let err = max_relative_error(
            |t, vars| {
                let joined = t.concat(0, &[vars[0], vars[1]]);
                let biased = t.add_b(joined, vars[2]);
                let part = t.narrow(biased, 0, 1, 2);
                let flat = t.reshape(part, &[2, 12]);
                let e = t.exp(flat);
                let cl = t.clamp(e, 0.2, 5.0);
                let l = t.ln(cl);
                t.sum_all(l)
            },
            &[x, y, bias],
            1e-6,
        );
        assert!(err < 1e-5, "relative error {err}");
    }
}
