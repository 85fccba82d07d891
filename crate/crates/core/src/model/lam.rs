//! Length-aware module.
//!
//! One self-attention layer over the `T` encoder positions, global average
//! pooling into a fixed-length counting feature, a softplus-capped linear
//! head onto the `C` symbol categories, and an MLP projecting the count
//! prediction back to a `D`-dim length embedding for the decoder.
//!
//! The count head parameters only receive gradient from the count loss: the
//! embedding branch re-applies the head through detached leaves, so decoder
//! gradient still reaches the encoder through the pooled feature but not the
//! head weights.

use crate::tensor::Var;

use super::layers::{Attention, LayerNorm, Linear};
use super::{Bound, ModelConfig, ParamBuilder};

pub(crate) struct LengthAwareModule {
    norm: LayerNorm,
    attn: Attention,
    head: Linear,
    mlp_fc1: Linear,
    mlp_fc2: Linear,
}

impl LengthAwareModule {
    /// Parameters are registered even when the module is disabled, so two
    /// models differing only in `lam_enabled` share every other weight for a
    /// given seed.
    pub fn build(cfg: &ModelConfig, pb: &mut ParamBuilder<'_>) -> Self {
        let d = cfg.feature_dim;
        let c = cfg.vocab_size;
        LengthAwareModule {
            norm: LayerNorm::new(pb, "lam.norm", d),
            attn: Attention::new(pb, "lam.attn", d, cfg.decoder_heads),
            head: Linear::new(pb, "lam.head", d, c),
            mlp_fc1: Linear::new(pb, "lam.mlp.fc1", c, d),
            mlp_fc2: Linear::new(pb, "lam.mlp.fc2", d, d),
        }
    }

    /// Returns `(counts [B, C], length embedding [B, D])`.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        z: &Var<'t>,
        identity_attention: bool,
    ) -> (Var<'t>, Var<'t>) {
        let attended = if identity_attention {
            z.clone()
        } else {
            let normed = self.norm.forward(bound, z);
            z.add(&self.attn.forward(bound, &normed, &normed, None))
        };
        // Global counting feature: average over the T positions.
        let pooled = attended.mean_axis(1); // [B, D]
        let counts = self.head.forward(bound, &pooled).softplus();
        // Detached copies of the head weights for the embedding branch.
        let w = bound.var(self.head.w).detach();
        let b = bound.var(self.head.b).detach();
        let counts_for_embed = pooled.matmul(&w).add_broadcast(&b).softplus();
        let hidden = self.mlp_fc1.forward(bound, &counts_for_embed).gelu();
        let embedding = self.mlp_fc2.forward(bound, &hidden);
        (counts, embedding)
    }
}
