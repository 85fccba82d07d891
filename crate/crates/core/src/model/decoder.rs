//! Autoregressive markup decoder.
//!
//! Per-position input is token embedding + positional embedding + the
//! broadcast length embedding; blocks run causal self-attention, then
//! cross-attention over the encoder features, then an MLP, all pre-norm.

use crate::tensor::{Tape, Var};

use super::layers::{causal_mask, Attention, LayerNorm, Linear, Mlp};
use super::{Bound, ModelConfig, ParamBuilder};

pub(crate) struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    mlp: Mlp,
}

pub(crate) struct Decoder {
    token_embed: usize,
    pos_embed: usize,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    out_proj: Linear,
}

impl Decoder {
    pub fn build(cfg: &ModelConfig, pb: &mut ParamBuilder<'_>) -> Self {
        let d = cfg.feature_dim;
        let token_embed = pb.normal("dec.token_embed", &[cfg.vocab_size, d], 0.02);
        let pos_embed = pb.normal("dec.pos_embed", &[cfg.max_sequence_length, d], 0.02);
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                let name = format!("dec.block{i}");
                DecoderBlock {
                    norm1: LayerNorm::new(pb, &format!("{name}.norm1"), d),
                    self_attn: Attention::new(pb, &format!("{name}.self"), d, cfg.decoder_heads),
                    norm2: LayerNorm::new(pb, &format!("{name}.norm2"), d),
                    cross_attn: Attention::new(pb, &format!("{name}.cross"), d, cfg.decoder_heads),
                    norm3: LayerNorm::new(pb, &format!("{name}.norm3"), d),
                    mlp: Mlp::new(pb, &format!("{name}.mlp"), d, cfg.mlp_ratio),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(pb, "dec.final_norm", d);
        let out_proj = Linear::new(pb, "dec.out_proj", d, cfg.vocab_size);
        Decoder {
            token_embed,
            pos_embed,
            blocks,
            final_norm,
            out_proj,
        }
    }

    pub fn forward<'t>(
        &self,
        cfg: &ModelConfig,
        _tape: &'t Tape,
        bound: &Bound<'t>,
        z: &Var<'t>,
        input_ids: &[Vec<u32>],
        length_embedding: Option<&Var<'t>>,
    ) -> Var<'t> {
        let b = input_ids.len();
        let seq = input_ids[0].len();
        let d = cfg.feature_dim;
        let flat_ids: Vec<usize> = input_ids
            .iter()
            .flat_map(|row| row.iter().map(|&t| t as usize))
            .collect();

        let tok = bound
            .var(self.token_embed)
            .embedding(&flat_ids)
            .reshape(&[b, seq, d]);
        let pos = bound
            .var(self.pos_embed)
            .embedding(&(0..seq).collect::<Vec<_>>());
        let mut x = tok.add_broadcast(&pos);
        if let Some(emb) = length_embedding {
            // [B, D] broadcast over every position
            x = x.add_broadcast(&emb.reshape(&[b, 1, d]));
        }
        let mask = causal_mask(seq);
        for block in &self.blocks {
            let n1 = block.norm1.forward(bound, &x);
            let sa = block.self_attn.forward(bound, &n1, &n1, Some(&mask));
            x = x.add(&sa);
            let ca = block
                .cross_attn
                .forward(bound, &block.norm2.forward(bound, &x), z, None);
            x = x.add(&ca);
            let m = block.mlp.forward(bound, &block.norm3.forward(bound, &x));
            x = x.add(&m);
        }
        self.out_proj
            .forward(bound, &self.final_norm.forward(bound, &x))
    }
}
