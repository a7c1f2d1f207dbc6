//! Graph building blocks shared by the coarse and fine networks.

use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{BoolMatrix, Bound, DiffError, Graph, ParamStore, Real, Tensor, Var};

pub(crate) fn init_linear<R: Rng + ?Sized>(p: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    p.insert(format!("{name}/w"), Tensor::glorot(fan_in, fan_out, rng));
    p.insert(format!("{name}/b"), Tensor::zeros([fan_out]).with_grad(true));
}

pub(crate) fn init_norm(p: &mut ParamStore<f32>, name: &str, dim: usize) {
    p.insert(format!("{name}/gain"), Tensor::full([dim], 1.0).with_grad(true));
    p.insert(format!("{name}/shift"), Tensor::zeros([dim]).with_grad(true));
}

pub(crate) fn init_attention<R: Rng + ?Sized>(p: &mut ParamStore<f32>, name: &str, dim: usize, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(p, &format!("{name}/{proj}"), dim, dim, rng);
    }
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var, DiffError> {
    let w = p.get(&format!("{name}/w"))?;
    let b = p.get(&format!("{name}/b"))?;
    g.affine(x, w, b)
}

pub(crate) fn norm<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var, DiffError> {
    let gain = p.get(&format!("{name}/gain"))?;
    let shift = p.get(&format!("{name}/shift"))?;
    g.layer_norm(x, gain, shift)
}

/// Multi-head attention from `q_in` (`[B, nq, D]`) to `kv_in` (`[B, nk, D]`).
///
/// Returns the projected output `[B, nq, D]` and the attention weights
/// `[B, heads, nq, nk]`.
pub(crate) fn attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    q_in: Var,
    kv_in: Var,
    mask: &Arc<BoolMatrix>,
    heads: usize,
) -> Result<(Var, Var), DiffError> {
    let qs = g.shape(q_in).to_vec();
    let ks = g.shape(kv_in).to_vec();
    let (b, nq, dim) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    let dh = dim / heads;
    let split = |g: &mut Graph<T>, x: Var, n: usize| -> Result<Var, DiffError> {
        let x = g.reshape(x, &[b, n, heads, dh])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let q = linear(g, p, &format!("{name}/q"), q_in)?;
    let q = g.scale(q, T::from_f64_lossy(1.0 / (dh as f64).sqrt()))?;
    let q = split(g, q, nq)?;
    let k = linear(g, p, &format!("{name}/k"), kv_in)?;
    let k = split(g, k, nk)?;
    let v = linear(g, p, &format!("{name}/v"), kv_in)?;
    let v = split(g, v, nk)?;
    let scores = g.matmul(q, k, true)?;
    let probs = g.softmax_masked(scores, mask)?;
    let mixed = g.matmul(probs, v, false)?;
    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(mixed, &[b, nq, dim])?;
    let out = linear(g, p, &format!("{name}/o"), mixed)?;
    Ok((out, probs))
}

/// Two-layer MLP with a relu in between.
pub(crate) fn mlp2<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var, DiffError> {
    let h = linear(g, p, &format!("{name}/l1"), x)?;
    let h = g.relu(h)?;
    linear(g, p, &format!("{name}/l2"), h)
}
