//! Hierarchical windowed-attention image encoder.
//!
//! Four stages at dims D/8..D. Each stage applies window-partitioned
//! multi-head attention blocks (odd blocks use a cyclic half-window shift)
//! and halves the grid between stages by 2x2 patch merging, for a total
//! spatial reduction of `patch_size * 8`.

use crate::tensor::{Tape, Var};

use super::layers::{Attention, LayerNorm, Linear, Mlp};
use super::{Bound, EncoderFeatures, ModelConfig, ParamBuilder};

pub(crate) struct WindowBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    shifted: bool,
}

pub(crate) struct Stage {
    blocks: Vec<WindowBlock>,
    /// 2x2 merge into the next stage dim; absent on the last stage.
    merge: Option<(LayerNorm, Linear)>,
}

pub(crate) struct Encoder {
    patch_embed: Linear,
    patch_norm: LayerNorm,
    pos_embed: usize,
    stages: Vec<Stage>,
    final_norm: LayerNorm,
}

/// Largest divisor of `n` not exceeding `cap`; keeps windows aligned to any
/// grid the canvas produces.
fn effective_window(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|w| n % w == 0).unwrap_or(1)
}

impl Encoder {
    pub fn build(cfg: &ModelConfig, pb: &mut ParamBuilder<'_>) -> Self {
        let p = cfg.patch_size;
        let d0 = cfg.stage_dim(0);
        let (gh, gw) = (cfg.canvas_height / p, cfg.canvas_width / p);
        let patch_embed = Linear::new(pb, "enc.patch_embed", 3 * p * p, d0);
        let patch_norm = LayerNorm::new(pb, "enc.patch_norm", d0);
        let pos_embed = pb.normal("enc.pos_embed", &[gh * gw, d0], 0.02);
        let mut stages = Vec::new();
        for s in 0..cfg.encoder_depths.len() {
            let dim = cfg.stage_dim(s);
            let mut blocks = Vec::new();
            for b in 0..cfg.encoder_depths[s] {
                let name = format!("enc.stage{s}.block{b}");
                blocks.push(WindowBlock {
                    norm1: LayerNorm::new(pb, &format!("{name}.norm1"), dim),
                    attn: Attention::new(pb, &format!("{name}.attn"), dim, cfg.encoder_heads[s]),
                    norm2: LayerNorm::new(pb, &format!("{name}.norm2"), dim),
                    mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, cfg.mlp_ratio),
                    shifted: b % 2 == 1,
                });
            }
            let merge = if s + 1 < cfg.encoder_depths.len() {
                let next = cfg.stage_dim(s + 1);
                Some((
                    LayerNorm::new(pb, &format!("enc.merge{s}.norm"), 4 * dim),
                    Linear::new(pb, &format!("enc.merge{s}.proj"), 4 * dim, next),
                ))
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        let final_norm = LayerNorm::new(pb, "enc.final_norm", cfg.feature_dim);
        Encoder {
            patch_embed,
            patch_norm,
            pos_embed,
            stages,
            final_norm,
        }
    }

    pub fn forward<'t>(
        &self,
        cfg: &ModelConfig,
        tape: &'t Tape,
        bound: &Bound<'t>,
        images: &crate::tensor::Array,
    ) -> EncoderFeatures<'t> {
        let b = images.shape()[0];
        let p = cfg.patch_size;
        let (mut gh, mut gw) = (cfg.canvas_height / p, cfg.canvas_width / p);

        // [B,3,H,W] -> [B, gh*gw, 3*p*p]
        let x = tape.leaf(images.clone().into_shared());
        let patches = x
            .permute(&[0, 2, 3, 1]) // [B,H,W,3]
            .reshape(&[b, gh, p, gw, p, 3])
            .permute(&[0, 1, 3, 2, 4, 5]) // [B,gh,gw,p,p,3]
            .reshape(&[b, gh * gw, 3 * p * p]);
        let mut feat = self
            .patch_norm
            .forward(bound, &self.patch_embed.forward(bound, &patches))
            .add_broadcast(bound.var(self.pos_embed));

        for (s, stage) in self.stages.iter().enumerate() {
            let dim = cfg.stage_dim(s);
            let mut grid = feat.reshape(&[b, gh, gw, dim]);
            let wh = effective_window(gh, cfg.window_size);
            let ww = effective_window(gw, cfg.window_size);
            for block in &stage.blocks {
                grid = block_forward(block, bound, &grid, b, gh, gw, dim, wh, ww);
            }
            if let Some((norm, proj)) = &stage.merge {
                // 2x2 space-to-depth then linear projection to the next dim.
                let merged = grid
                    .reshape(&[b, gh / 2, 2, gw / 2, 2, dim])
                    .permute(&[0, 1, 3, 2, 4, 5])
                    .reshape(&[b, (gh / 2) * (gw / 2), 4 * dim]);
                feat = proj.forward(bound, &norm.forward(bound, &merged));
                gh /= 2;
                gw /= 2;
            } else {
                feat = grid.reshape(&[b, gh * gw, dim]);
            }
        }
        let z = self.final_norm.forward(bound, &feat);
        EncoderFeatures { z, grid: (gh, gw) }
    }
}

#[allow(clippy::too_many_arguments)]
fn block_forward<'t>(
    block: &WindowBlock,
    bound: &Bound<'t>,
    grid: &Var<'t>,
    b: usize,
    gh: usize,
    gw: usize,
    dim: usize,
    wh: usize,
    ww: usize,
) -> Var<'t> {
    let (sh, sw) = if block.shifted {
        (wh / 2, ww / 2)
    } else {
        (0, 0)
    };
    let normed = block.norm1.forward(bound, grid);
    let shifted = if sh > 0 || sw > 0 {
        normed.roll(1, gh - sh).roll(2, gw - sw)
    } else {
        normed
    };
    let (nh, nw) = (gh / wh, gw / ww);
    let windows = shifted
        .reshape(&[b, nh, wh, nw, ww, dim])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b * nh * nw, wh * ww, dim]);
    let attended = block.attn.forward(bound, &windows, &windows, None);
    let restored = attended
        .reshape(&[b, nh, nw, wh, ww, dim])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b, gh, gw, dim]);
    let unshifted = if sh > 0 || sw > 0 {
        restored.roll(1, sh).roll(2, sw)
    } else {
        restored
    };
    let after_attn = grid.add(&unshifted);
    let mlp_out = block
        .mlp
        .forward(bound, &block.norm2.forward(bound, &after_attn));
    after_attn.add(&mlp_out)
}
