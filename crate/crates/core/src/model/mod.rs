//! Encoder-decoder recognition network with an auxiliary length-aware head.
//!
//! A hierarchical windowed-attention encoder turns the input image into a
//! feature block `Z` of shape `B x T x D`. An autoregressive decoder attends
//! over `Z` through cross-attention to emit markup tokens. When enabled, the
//! length-aware module predicts per-symbol counts from `Z` and injects a
//! length embedding into every decoder position, so the decoder knows how
//! long the target sequence should be before it starts generating.

mod decoder;
mod encoder;
mod generate;
mod lam;
mod layers;
pub mod checkpoint;
pub mod losses;
pub mod preprocess;

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Array, SharedArray, Tape, Var};

pub use generate::GenerateResult;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("input sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("length-aware module is disabled in this configuration")]
    DisabledModule,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss encountered")]
    NonFiniteLoss,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What the auxiliary loss supervises: the full per-symbol count vector or
/// only its scalar row-sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LengthTarget {
    #[default]
    Counts,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Final encoder dimension D; stages run at D/8, D/4, D/2, D.
    pub feature_dim: usize,
    pub encoder_depths: Vec<usize>,
    pub encoder_heads: Vec<usize>,
    pub patch_size: usize,
    /// Upper bound on the attention window; per stage the largest divisor of
    /// the grid side not exceeding this is used.
    pub window_size: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub lam_enabled: bool,
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub mlp_ratio: usize,
    pub length_target: LengthTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 256,
            encoder_depths: vec![2, 2, 2, 2],
            encoder_heads: vec![8, 8, 8, 8],
            patch_size: 4,
            window_size: 4,
            decoder_depth: 4,
            decoder_heads: 8,
            vocab_size: 0,
            max_sequence_length: 1024,
            lam_enabled: true,
            canvas_height: 192,
            canvas_width: 672,
            mlp_ratio: 4,
            length_target: LengthTarget::Counts,
        }
    }
}

impl ModelConfig {
    /// Total spatial reduction from image to final feature grid.
    pub fn reduction(&self) -> usize {
        self.patch_size * (1 << (self.encoder_depths.len() - 1))
    }

    pub fn feature_grid(&self) -> (usize, usize) {
        let r = self.reduction();
        (self.canvas_height / r, self.canvas_width / r)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        let stages = self.encoder_depths.len();
        if stages != 4 {
            return err(format!("expected 4 encoder stages, got {stages}"));
        }
        if self.encoder_heads.len() != stages {
            return err("encoder_heads length must match encoder_depths".into());
        }
        if self.feature_dim % 8 != 0 {
            return err(format!("feature_dim {} must be divisible by 8", self.feature_dim));
        }
        for (s, &h) in self.encoder_heads.iter().enumerate() {
            let dim = self.stage_dim(s);
            if h == 0 || dim % h != 0 {
                return err(format!("stage {s} dim {dim} not divisible by {h} heads"));
            }
        }
        if self.decoder_heads == 0 || self.feature_dim % self.decoder_heads != 0 {
            return err("feature_dim must be divisible by decoder_heads".into());
        }
        if self.max_sequence_length < 2 {
            return err("max_sequence_length must be at least 2".into());
        }
        let r = self.reduction();
        if self.canvas_height % r != 0 || self.canvas_width % r != 0 {
            return err(format!(
                "canvas {}x{} must be divisible by the reduction factor {r}",
                self.canvas_height, self.canvas_width
            ));
        }
        if self.vocab_size <= 4 {
            return err("vocab_size must exceed the 4 special tokens".into());
        }
        if self.window_size == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return err("window_size, patch_size and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        (self.feature_dim / 8) << stage
    }
}

/// One learnable tensor; `value` is shared so binding onto a tape is free.
pub(crate) struct Param {
    pub name: String,
    pub value: SharedArray,
}

/// Registers parameters with deterministic, seed-driven initialization.
pub(crate) struct ParamBuilder<'a> {
    params: &'a mut Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    fn push(&mut self, name: String, value: Array) -> usize {
        let id = self.params.len();
        self.params.push(Param {
            name,
            value: value.into_shared(),
        });
        id
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).unwrap();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.push(name.into(), Array::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name.into(), Array::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name.into(), Array::ones(IxDyn(shape)))
    }
}

/// All parameters bound onto one tape; indexed by registration order.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub(crate) fn var(&self, idx: usize) -> &Var<'t> {
        &self.vars[idx]
    }

    pub fn param_node_ids(&self) -> Vec<usize> {
        self.vars.iter().map(|v| v.id()).collect()
    }
}

/// Encoder output `Z` (`B x T x D`) plus the spatial grid it came from.
pub struct EncoderFeatures<'t> {
    pub z: Var<'t>,
    pub grid: (usize, usize),
}

/// `B x D` vector added to every decoder position; zeros when the module is
/// disabled.
pub struct LengthEmbedding<'t> {
    pub vector: Var<'t>,
}

/// Per-position vocabulary logits, `B x S x C`.
pub struct DecoderOutput<'t> {
    pub logits: Var<'t>,
}

/// Weights of the composite training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.5,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub(crate) params: Vec<Param>,
    pub(crate) encoder: encoder::Encoder,
    pub(crate) decoder: decoder::Decoder,
    pub(crate) lam: lam::LengthAwareModule,
}

impl Model {
    /// Builds a freshly initialized model; identical `(config, seed)` pairs
    /// produce bitwise-identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Vec::new();
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let mut pb = ParamBuilder {
            params: &mut params,
            rng: &mut rng,
        };
        let encoder = encoder::Encoder::build(&config, &mut pb);
        let decoder = decoder::Decoder::build(&config, &mut pb);
        let lam = lam::LengthAwareModule::build(&config, &mut pb);
        Ok(Model {
            config,
            params,
            encoder,
            decoder,
            lam,
        })
    }

    /// Binds every parameter as a tape leaf; gradients of the returned vars
    /// line up with [`Model::param_values`] order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub(crate) fn param_values(&self) -> &[Param] {
        &self.params
    }

    pub fn param_arrays(&self) -> Vec<(&str, &SharedArray)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect()
    }

    pub(crate) fn set_param(&mut self, idx: usize, value: Array) {
        debug_assert_eq!(self.params[idx].value.shape(), value.shape());
        self.params[idx].value = value.into_shared();
    }

    /// Encodes a preprocessed image batch `[B, 3, H, W]` into `Z`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        images: &Array,
    ) -> Result<EncoderFeatures<'t>, ModelError> {
        let want = [
            images.shape().first().copied().unwrap_or(0),
            3,
            self.config.canvas_height,
            self.config.canvas_width,
        ];
        if images.ndim() != 4 || images.shape()[1..] != want[1..] {
            return Err(ModelError::ShapeError(format!(
                "expected image batch [B, 3, {}, {}], got {:?}",
                self.config.canvas_height,
                self.config.canvas_width,
                images.shape()
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::ShapeError("non-finite pixel values".into()));
        }
        Ok(self.encoder.forward(&self.config, tape, bound, images))
    }

    /// Count prediction (`B x C`, non-negative) and length embedding (`B x D`).
    pub fn lam_forward<'t>(
        &self,
        bound: &Bound<'t>,
        features: &EncoderFeatures<'t>,
    ) -> Result<(Var<'t>, LengthEmbedding<'t>), ModelError> {
        if !self.config.lam_enabled {
            return Err(ModelError::DisabledModule);
        }
        let (counts, emb) = self.lam.forward(bound, &features.z, false);
        Ok((counts, LengthEmbedding { vector: emb }))
    }

    /// Test hook: identity in place of the internal self-attention layer, so
    /// pooling symmetry can be checked in isolation.
    pub fn lam_forward_identity_attention<'t>(
        &self,
        bound: &Bound<'t>,
        features: &EncoderFeatures<'t>,
    ) -> Result<(Var<'t>, LengthEmbedding<'t>), ModelError> {
        if !self.config.lam_enabled {
            return Err(ModelError::DisabledModule);
        }
        let (counts, emb) = self.lam.forward(bound, &features.z, true);
        Ok((counts, LengthEmbedding { vector: emb }))
    }

    /// Teacher-forced decoder pass. `input_ids` is `B` rows of equal length
    /// starting with `<bos>`; `length_embedding == None` is the disabled-LAM
    /// path.
    pub fn decoder_forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        features: &EncoderFeatures<'t>,
        input_ids: &[Vec<u32>],
        length_embedding: Option<&LengthEmbedding<'t>>,
    ) -> Result<DecoderOutput<'t>, ModelError> {
        let seq = input_ids.first().map(|r| r.len()).unwrap_or(0);
        if seq > self.config.max_sequence_length {
            return Err(ModelError::SequenceTooLong {
                len: seq,
                max: self.config.max_sequence_length,
            });
        }
        if input_ids.iter().any(|r| r.len() != seq) || seq == 0 {
            return Err(ModelError::ShapeMismatch(
                "decoder rows must be non-empty and equal length".into(),
            ));
        }
        let logits = self.decoder.forward(
            &self.config,
            tape,
            bound,
            &features.z,
            input_ids,
            length_embedding.map(|e| &e.vector),
        );
        Ok(DecoderOutput { logits })
    }
}

#[cfg(test)]
mod tests;
