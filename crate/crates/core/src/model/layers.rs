//! Shared building blocks: linear, layer norm, multi-head attention, MLP.

use crate::tensor::{Array, Var};

use super::{Bound, ParamBuilder};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    din: usize,
    dout: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, din: usize, dout: usize) -> Self {
        let w = pb.normal(format!("{name}.w"), &[din, dout], INIT_STD);
        let b = pb.zeros(format!("{name}.b"), &[dout]);
        Linear { w, b, din, dout }
    }

    /// Applies to the last axis of an arbitrary-rank input.
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        let shape = x.shape().to_vec();
        debug_assert_eq!(*shape.last().unwrap(), self.din);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, self.din]);
        let out = flat.matmul(bound.var(self.w)).add_broadcast(bound.var(self.b));
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.dout;
        out.reshape(&out_shape)
    }
}

pub(crate) struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: pb.ones(format!("{name}.gamma"), &[dim]),
            beta: pb.zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        x.layer_norm(bound.var(self.gamma), bound.var(self.beta), LN_EPS)
    }
}

/// Multi-head attention; query and key/value sources may differ
/// (cross-attention) and an additive score mask may be supplied.
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(pb, &format!("{name}.q"), dim, dim),
            k: Linear::new(pb, &format!("{name}.k"), dim, dim),
            v: Linear::new(pb, &format!("{name}.v"), dim, dim),
            o: Linear::new(pb, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// `xq: [B, Sq, D]`, `xkv: [B, Sk, D]`, optional mask `[Sq, Sk]` added to
    /// the attention scores.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        xq: &Var<'t>,
        xkv: &Var<'t>,
        mask: Option<&Array>,
    ) -> Var<'t> {
        let (b, sq) = (xq.shape()[0], xq.shape()[1]);
        let sk = xkv.shape()[1];
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |v: Var<'t>, s: usize| {
            v.reshape(&[b, s, h, dh]).permute(&[0, 2, 1, 3]) // [B, h, S, dh]
        };
        let q = split(self.q.forward(bound, xq), sq);
        let k = split(self.k.forward(bound, xkv), sk);
        let v = split(self.v.forward(bound, xkv), sk);
        let scores = q
            .bmm(&k.permute(&[0, 1, 3, 2]))
            .scale(1.0 / (dh as f64).sqrt()); // [B, h, Sq, Sk]
        let scores = match mask {
            Some(m) => scores.add_const(m),
            None => scores,
        };
        let ctx = scores.softmax_last().bmm(&v); // [B, h, Sq, dh]
        let merged = ctx.permute(&[0, 2, 1, 3]).reshape(&[b, sq, self.dim]);
        self.o.forward(bound, &merged)
    }
}

pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, ratio: usize) -> Self {
        Mlp {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, dim * ratio),
            fc2: Linear::new(pb, &format!("{name}.fc2"), dim * ratio, dim),
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        self.fc2.forward(bound, &self.fc1.forward(bound, x).gelu())
    }
}

/// Additive causal mask: 0 at or before the diagonal, -inf after it.
pub(crate) fn causal_mask(seq: usize) -> Array {
    let mut m = Array::zeros(ndarray::IxDyn(&[seq, seq]));
    for i in 0..seq {
        for j in (i + 1)..seq {
            m[[i, j]] = f64::NEG_INFINITY;
        }
    }
    m
}
