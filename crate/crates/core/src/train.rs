//! Optimization loop, learning-rate schedule, and resumable checkpoints.
//!
//! All training randomness is derived from `(seed, epoch)` or `(seed, step,
//! slot)`, never from live RNG state, so a run resumed from any checkpoint
//! replays the exact batch order and augmentations of an unbroken run.
//! Single-worker execution is bit-deterministic end to end.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use ndarray::Dimension;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentConfig, AugmentError, Augmenter};
use crate::data_builder::{load_manifest, DataError, Manifest};
use crate::latex_norm::{symbol_counts, tokenize, CountVector, TokenSequence, Vocabulary};
use crate::latex_norm::{BOS_ID, EOS_ID, PAD_ID};
use crate::model::checkpoint::{load_model, save_model};
use crate::model::losses::{language_modeling_loss, length_loss, total_loss};
use crate::model::preprocess::{batch_images, preprocess_image};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{Array, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("schedule step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("dataset of {n} samples is smaller than one batch of {batch}")]
    DataExhausted { n: usize, batch: usize },
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: usize },
    #[error("train and validation manifests reference different vocabularies")]
    VocabularyMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_total_iterations")]
    pub total_iterations: usize,
    #[serde(default = "d_warmup_iterations")]
    pub warmup_iterations: usize,
    #[serde(default = "d_init_lr")]
    pub init_lr: f64,
    #[serde(default = "d_min_lr")]
    pub min_lr: f64,
    #[serde(default = "d_warmup_lr")]
    pub warmup_lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: crate::model::LossWeights,
    #[serde(default = "AugmentConfig::default_training")]
    pub augment: AugmentConfig,
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "d_checkpoint_interval")]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub model: ModelConfig,
}

fn d_total_iterations() -> usize {
    2_000
}
fn d_warmup_iterations() -> usize {
    40
}
fn d_init_lr() -> f64 {
    1e-4
}
fn d_min_lr() -> f64 {
    1e-8
}
fn d_warmup_lr() -> f64 {
    1e-5
}
fn d_weight_decay() -> f64 {
    0.05
}
fn d_batch_size() -> usize {
    8
}
fn d_checkpoint_interval() -> usize {
    500
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides by dotted path (`model.feature_dim=64`)
    /// on the TOML representation, then revalidates.
    pub fn with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, TrainError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| TrainError::Toml(e.to_string()))?;
        for (key, raw) in overrides {
            let parsed: toml::Value = raw
                .parse::<i64>()
                .map(toml::Value::Integer)
                .or_else(|_| raw.parse::<f64>().map(toml::Value::Float))
                .or_else(|_| raw.parse::<bool>().map(toml::Value::Boolean))
                .unwrap_or_else(|_| toml::Value::String(raw.clone()));
            let mut cursor = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                cursor = cursor
                    .as_table_mut()
                    .ok_or_else(|| TrainError::Toml(format!("{key}: not a table")))?
                    .entry(part.to_string())
                    .or_insert(toml::Value::Table(Default::default()));
            }
            cursor
                .as_table_mut()
                .ok_or_else(|| TrainError::Toml(format!("{key}: not a table")))?
                .insert(parts.last().unwrap().to_string(), parsed);
        }
        let cfg: TrainConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| TrainError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_iterations > 0 && self.warmup_iterations >= self.total_iterations {
            return Err(TrainError::Config(format!(
                "warmup_iterations {} must be below total_iterations {}",
                self.warmup_iterations, self.total_iterations
            )));
        }
        if self.total_iterations == 0 && self.warmup_iterations != 0 {
            return Err(TrainError::Config(
                "warmup_iterations must be 0 when total_iterations is 0".into(),
            ));
        }
        if !(self.min_lr <= self.warmup_lr && self.warmup_lr <= self.init_lr) {
            return Err(TrainError::Config(
                "learning rates must satisfy min_lr <= warmup_lr <= init_lr".into(),
            ));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(TrainError::Config(
                "batch_size and checkpoint_interval must be positive".into(),
            ));
        }
        if self.loss_weights.lambda1 < 0.0 || self.loss_weights.lambda2 < 0.0 {
            return Err(TrainError::Config("loss weights must be >= 0".into()));
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// Linear warmup then cosine decay; exact at the three endpoints.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.total_iterations {
        return Err(TrainError::StepOutOfRange {
            step,
            total: cfg.total_iterations,
        });
    }
    if step < cfg.warmup_iterations {
        let progress = step as f64 / cfg.warmup_iterations as f64;
        return Ok(cfg.warmup_lr + (cfg.init_lr - cfg.warmup_lr) * progress);
    }
    if step == cfg.warmup_iterations {
        return Ok(cfg.init_lr);
    }
    let span = (cfg.total_iterations - cfg.warmup_iterations) as f64;
    let progress = (step - cfg.warmup_iterations) as f64 / span;
    Ok(cfg.min_lr + 0.5 * (cfg.init_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW {
    pub weight_decay: f64,
    pub clip_norm: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamW {
    pub fn new(model: &Model, weight_decay: f64) -> Self {
        let zeros: Vec<Array> = model
            .param_arrays()
            .iter()
            .map(|(_, a)| Array::zeros(a.raw_dim()))
            .collect();
        AdamW {
            weight_decay,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `grads` (parallel to the model's parameter order;
    /// `None` entries are skipped entirely).
    pub fn apply(&mut self, model: &mut Model, grads: &[Option<Array>], lr: f64) {
        let norm: f64 = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let g = g * scale;
            self.m[idx] = &self.m[idx] * self.beta1 + &g * (1.0 - self.beta1);
            self.v[idx] = &self.v[idx] * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let current = model.param_arrays()[idx].1.to_owned();
            let mhat = &self.m[idx] / bc1;
            let vhat = &self.v[idx] / bc2;
            let update = mhat / (vhat.mapv(f64::sqrt) + self.eps);
            let next = &current - &(update * lr) - &(current.to_owned() * (lr * self.weight_decay));
            model_set(model, idx, next);
        }
    }
}

fn model_set(model: &mut Model, idx: usize, value: Array) {
    model.set_param(idx, value);
}

const OPT_MAGIC: &[u8; 4] = b"MROP";
const STATE_FILE: &str = "trainer_state.json";
const OPT_FILE: &str = "optimizer.bin";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct TrainerState {
    next_step: usize,
    adam_step: u64,
}

/// Model checkpoint plus optimizer moments and step counter.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    vocab: &Vocabulary,
    optimizer: &AdamW,
    next_step: usize,
) -> Result<(), TrainError> {
    save_model(dir, model, vocab)?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(OPT_MAGIC);
    buf.extend_from_slice(&optimizer.step.to_le_bytes());
    buf.extend_from_slice(&(optimizer.m.len() as u64).to_le_bytes());
    for arrs in [&optimizer.m, &optimizer.v] {
        for a in arrs {
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(dir.join(OPT_FILE), buf)?;
    let state = TrainerState {
        next_step,
        adam_step: optimizer.step,
    };
    let mut json = serde_json::to_string_pretty(&state)?;
    json.push('\n');
    std::fs::write(dir.join(STATE_FILE), json)?;
    Ok(())
}

/// Restores model, vocabulary, optimizer and step counter exactly.
pub fn load_checkpoint(
    dir: &Path,
    weight_decay: f64,
) -> Result<(Model, Vocabulary, AdamW, usize), TrainError> {
    let (model, vocab) = load_model(dir)?;
    let corrupt =
        |m: String| TrainError::Model(ModelError::CorruptCheckpoint(m));
    let bytes = std::fs::read(dir.join(OPT_FILE))
        .map_err(|e| corrupt(format!("missing {OPT_FILE}: {e}")))?;
    if bytes.len() < 20 || &bytes[..4] != OPT_MAGIC {
        return Err(corrupt("bad optimizer magic".into()));
    }
    let adam_step = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if count != model.param_arrays().len() {
        return Err(corrupt("optimizer parameter count mismatch".into()));
    }
    let mut optimizer = AdamW::new(&model, weight_decay);
    optimizer.step = adam_step;
    let mut cursor = 20usize;
    for slot in 0..2 {
        for idx in 0..count {
            let shape = model.param_arrays()[idx].1.raw_dim();
            let n: usize = shape.size();
            if cursor + 8 * n > bytes.len() {
                return Err(corrupt("truncated optimizer state".into()));
            }
            let data: Vec<f64> = bytes[cursor..cursor + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor += 8 * n;
            let arr = Array::from_shape_vec(shape, data).unwrap();
            if slot == 0 {
                optimizer.m[idx] = arr;
            } else {
                optimizer.v[idx] = arr;
            }
        }
    }
    if cursor != bytes.len() {
        return Err(corrupt("trailing optimizer bytes".into()));
    }
    let state: TrainerState =
        serde_json::from_str(&std::fs::read_to_string(dir.join(STATE_FILE))?)?;
    if state.adam_step != adam_step {
        return Err(corrupt("trainer state does not match optimizer".into()));
    }
    Ok((model, vocab, optimizer, state.next_step))
}

/// One training example held in memory.
struct Example {
    image: RgbImage,
    tokens: TokenSequence,
    counts: CountVector,
}

fn load_examples(
    manifest: &Manifest,
    manifest_dir: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let path = manifest_dir.join(&rec.image_path);
        let img = image::open(&path)
            .map_err(|e| DataError::MissingImage(format!("{}: {e}", rec.image_path)))?
            .to_rgb8();
        let tokens = tokenize(&rec.latex, vocab);
        let counts = symbol_counts(&tokens, vocab);
        out.push(Example {
            image: img,
            tokens,
            counts,
        });
    }
    Ok(out)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for v in [a, b] {
        h ^= v.wrapping_mul(0xff51afd7ed558ccd).rotate_left(31);
        h = h.wrapping_mul(0xc4ceb9fe1a85ec53) ^ (h >> 33);
    }
    h
}

/// Deterministic batch schedule for one epoch: shuffle, then sort each
/// macro-chunk by length to cut padding, then shuffle the batch order.
fn epoch_batches(
    n: usize,
    batch_size: usize,
    lengths: &[usize],
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0));
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let chunk = batch_size * 8;
    for block in indices.chunks_mut(chunk) {
        block.sort_by_key(|&i| (lengths[i], i));
    }
    let mut batches: Vec<Vec<usize>> = indices
        .chunks(batch_size)
        .filter(|c| c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect();
    batches.shuffle(&mut rng);
    batches
}

/// Collated batch: decoder inputs, shifted targets, padding mask, counts.
struct Batch {
    images: Array,
    inputs: Vec<Vec<u32>>,
    targets: Vec<Vec<u32>>,
    mask: Vec<Vec<bool>>,
    counts: Vec<CountVector>,
}

fn collate(
    examples: &[Example],
    picks: &[usize],
    model_cfg: &ModelConfig,
    augmenter: Option<&Augmenter>,
    seed: u64,
    step: u64,
) -> Result<Batch, TrainError> {
    let max_tokens = picks
        .iter()
        .map(|&i| examples[i].tokens.len())
        .max()
        .unwrap_or(0);
    let seq = max_tokens + 1; // bos prefix / eos suffix
    let mut inputs = Vec::with_capacity(picks.len());
    let mut targets = Vec::with_capacity(picks.len());
    let mut mask = Vec::with_capacity(picks.len());
    let mut counts = Vec::with_capacity(picks.len());
    let mut images = Vec::with_capacity(picks.len());
    for (slot, &i) in picks.iter().enumerate() {
        let ex = &examples[i];
        let ids = ex.tokens.ids();
        let mut input = Vec::with_capacity(seq);
        input.push(BOS_ID);
        input.extend_from_slice(ids);
        let mut target: Vec<u32> = ids.to_vec();
        target.push(EOS_ID);
        let mut m = vec![true; target.len()];
        while input.len() < seq {
            input.push(PAD_ID);
        }
        while target.len() < seq {
            target.push(PAD_ID);
            m.push(false);
        }
        inputs.push(input);
        targets.push(target);
        mask.push(m);
        counts.push(ex.counts.clone());
        let img = match augmenter {
            Some(aug) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, slot as u64));
                aug.augment(&ex.image, &mut rng)
            }
            None => ex.image.clone(),
        };
        images.push(preprocess_image(&img, model_cfg));
    }
    Ok(Batch {
        images: batch_images(&images)?,
        inputs,
        targets,
        mask,
        counts,
    })
}

/// Per-step metrics line, appended to `metrics.jsonl`.
#[derive(Debug, Serialize, Deserialize, Clone)]
pub struct MetricsLine {
    pub step: usize,
    pub lr: f64,
    pub lm_loss: f64,
    pub len_loss: f64,
    pub total_loss: f64,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps_run: usize,
    pub last_lm_loss: f64,
    pub last_total_loss: f64,
    pub augment_applications: u64,
}

/// Runs (or resumes) training. Checkpoints land in `out_dir/checkpoint` and
/// metrics in `out_dir/metrics.jsonl`.
pub fn train_loop(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let manifest_dir = cfg
        .train_manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let manifest = load_manifest(&cfg.train_manifest)?;
    let vocab = manifest.vocabulary(&manifest_dir)?;

    let val = match &cfg.val_manifest {
        Some(path) => {
            let vdir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
            let vm = load_manifest(path)?;
            let vvocab = vm.vocabulary(&vdir)?;
            if vvocab != vocab {
                return Err(TrainError::VocabularyMismatch);
            }
            Some((vm, vdir))
        }
        None => None,
    };

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.size() as usize;

    let (mut model, mut optimizer, start_step) = match resume {
        Some(dir) => {
            let (model, ck_vocab, optimizer, next_step) = load_checkpoint(dir, cfg.weight_decay)?;
            if ck_vocab != vocab {
                return Err(TrainError::Model(ModelError::CorruptCheckpoint(
                    "checkpoint vocabulary does not match the training manifest".into(),
                )));
            }
            (model, optimizer, next_step)
        }
        None => {
            let model = Model::new(model_cfg.clone(), cfg.seed)?;
            let optimizer = AdamW::new(&model, cfg.weight_decay);
            (model, optimizer, 0)
        }
    };

    let examples = load_examples(&manifest, &manifest_dir, &vocab)?;
    let n = examples.len();
    if n < cfg.batch_size {
        return Err(TrainError::DataExhausted {
            n,
            batch: cfg.batch_size,
        });
    }
    for ex in &examples {
        if ex.tokens.len() + 1 > model.config.max_sequence_length {
            return Err(TrainError::Config(format!(
                "sample of {} tokens exceeds max_sequence_length {}",
                ex.tokens.len(),
                model.config.max_sequence_length
            )));
        }
    }
    let lengths: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
    let batches_per_epoch = n / cfg.batch_size;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_dir = cfg.out_dir.join("checkpoint");
    let augmenter = Augmenter::new(cfg.augment.clone())?;
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.out_dir.join("metrics.jsonl"))?;

    // initial (or resumed) state is always on disk before stepping
    save_checkpoint(&ckpt_dir, &model, &vocab, &optimizer, start_step)?;

    let started = Instant::now();
    let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
    let mut last_lm = f64::NAN;
    let mut last_total = f64::NAN;

    for step in start_step..cfg.total_iterations {
        let epoch = (step / batches_per_epoch) as u64;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_cache = Some((
                epoch,
                epoch_batches(n, cfg.batch_size, &lengths, cfg.seed, epoch),
            ));
        }
        let batches = &epoch_cache.as_ref().unwrap().1;
        let picks = &batches[step % batches_per_epoch];
        let batch = collate(&examples, picks, &model.config, Some(&augmenter), cfg.seed, step as u64)?;

        let tape = Tape::new();
        let bound = model.bind(&tape);
        let features = model.encode(&tape, &bound, &batch.images)?;
        let (lm, len_var) = if model.config.lam_enabled {
            let (counts, emb) = model.lam_forward(&bound, &features)?;
            let out = model.decoder_forward(&tape, &bound, &features, &batch.inputs, Some(&emb))?;
            let lm = language_modeling_loss(&out, &batch.targets, &batch.mask)?;
            let len = length_loss(&counts, &batch.counts, model.config.length_target)?;
            (lm, Some(len))
        } else {
            let out = model.decoder_forward(&tape, &bound, &features, &batch.inputs, None)?;
            let lm = language_modeling_loss(&out, &batch.targets, &batch.mask)?;
            (lm, None)
        };
        let total = match total_loss(&lm, len_var.as_ref(), &cfg.loss_weights) {
            Ok(t) => t,
            Err(ModelError::NonFiniteLoss) => {
                return Err(TrainError::NonFiniteLoss { step });
            }
            Err(e) => return Err(e.into()),
        };

        let lr = lr_schedule(step, cfg)?;
        let grads_by_node = tape.backward(&total);
        let node_ids = bound.param_node_ids();
        let grads: Vec<Option<Array>> = node_ids
            .iter()
            .map(|&nid| grads_by_node.by_id(nid).cloned())
            .collect();
        optimizer.apply(&mut model, &grads, lr);

        last_lm = lm.scalar();
        last_total = total.scalar();
        let line = MetricsLine {
            step,
            lr,
            lm_loss: last_lm,
            len_loss: len_var.as_ref().map_or(0.0, |v| v.scalar()),
            total_loss: last_total,
            wall_time: started.elapsed().as_secs_f64(),
        };
        writeln!(metrics, "{}", serde_json::to_string(&line)?)?;

        let done = step + 1;
        if done % cfg.checkpoint_interval == 0 || done == cfg.total_iterations {
            save_checkpoint(&ckpt_dir, &model, &vocab, &optimizer, done)?;
            if let Some((vm, vdir)) = &val {
                let val_loss = validation_loss(&model, vm, vdir, &vocab)?;
                let mut vlog = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(cfg.out_dir.join("val_metrics.jsonl"))?;
                writeln!(
                    vlog,
                    "{}",
                    serde_json::json!({ "step": done, "val_lm_loss": val_loss })
                )?;
            }
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: ckpt_dir,
        steps_run: cfg.total_iterations.saturating_sub(start_step),
        last_lm_loss: last_lm,
        last_total_loss: last_total,
        augment_applications: augmenter.applications(),
    })
}

/// Mean language-modeling loss over a manifest; never augments.
pub fn validation_loss(
    model: &Model,
    manifest: &Manifest,
    manifest_dir: &Path,
    vocab: &Vocabulary,
) -> Result<f64, TrainError> {
    let examples = load_examples(manifest, manifest_dir, vocab)?;
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in (0..examples.len()).collect::<Vec<_>>().chunks(8) {
        let batch = collate(&examples, chunk, &model.config, None, 0, 0)?;
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let features = model.encode(&tape, &bound, &batch.images)?;
        let emb = if model.config.lam_enabled {
            Some(model.lam_forward(&bound, &features)?.1)
        } else {
            None
        };
        let out = model.decoder_forward(&tape, &bound, &features, &batch.inputs, emb.as_ref())?;
        let lm = language_modeling_loss(&out, &batch.targets, &batch.mask)?;
        total += lm.scalar() * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Convenience for tests and the ablation harness: fresh config with a tiny
/// model and short schedule over the given manifest.
pub fn quick_config(
    train_manifest: PathBuf,
    out_dir: PathBuf,
    total_iterations: usize,
    model: ModelConfig,
) -> TrainConfig {
    TrainConfig {
        total_iterations,
        warmup_iterations: if total_iterations == 0 {
            0
        } else {
            (total_iterations / 50).max(1)
        },
        init_lr: 1e-4,
        min_lr: 1e-8,
        warmup_lr: 1e-5,
        weight_decay: 0.05,
        batch_size: 8,
        seed: 0,
        loss_weights: Default::default(),
        augment: AugmentConfig::disabled(),
        train_manifest,
        val_manifest: None,
        out_dir,
        checkpoint_interval: 500,
        model,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_builder::{build_manifest, BuildConfig};
    use crate::model::LengthTarget;

    fn schedule_cfg() -> TrainConfig {
        TrainConfig {
            total_iterations: 1000,
            warmup_iterations: 100,
            ..quick_config(PathBuf::new(), PathBuf::new(), 1000, ModelConfig::default())
        }
    }

    #[test]
    fn schedule_endpoints_are_exact() {
        let cfg = schedule_cfg();
        assert!((lr_schedule(0, &cfg).unwrap() - 1e-5).abs() < 1e-12);
        assert!((lr_schedule(100, &cfg).unwrap() - 1e-4).abs() < 1e-12);
        assert!((lr_schedule(1000, &cfg).unwrap() - 1e-8).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotone_warmup_then_decay() {
        let cfg = schedule_cfg();
        let mut prev = lr_schedule(0, &cfg).unwrap();
        for step in 1..=100 {
            let lr = lr_schedule(step, &cfg).unwrap();
            assert!(lr >= prev, "warmup not monotone at {step}");
            prev = lr;
        }
        for step in 101..=1000 {
            let lr = lr_schedule(step, &cfg).unwrap();
            assert!(lr <= prev, "decay not monotone at {step}");
            prev = lr;
        }
    }

    #[test]
    fn schedule_rejects_out_of_range() {
        let cfg = schedule_cfg();
        assert!(matches!(
            lr_schedule(1001, &cfg),
            Err(TrainError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn config_invariants() {
        let mut cfg = schedule_cfg();
        cfg.warmup_iterations = 1000;
        assert!(cfg.validate().is_err());
        let mut cfg = schedule_cfg();
        cfg.warmup_lr = 1e-3; // above init_lr
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip_and_overrides() {
        let text = r#"
            train_manifest = "data/manifest.jsonl"
            out_dir = "runs/a"
            total_iterations = 50
            warmup_iterations = 5

            [model]
            feature_dim = 64
            encoder_depths = [1, 1, 1, 1]
            encoder_heads = [2, 2, 2, 8]
            patch_size = 4
            window_size = 4
            decoder_depth = 1
            decoder_heads = 2
            vocab_size = 0
            max_sequence_length = 64
            lam_enabled = true
            canvas_height = 32
            canvas_width = 64
            mlp_ratio = 2
            length_target = "counts"
        "#;
        let cfg = TrainConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.total_iterations, 50);
        assert_eq!(cfg.model.feature_dim, 64);
        assert_eq!(cfg.batch_size, 8); // default
        assert_eq!(cfg.weight_decay, 0.05); // default

        let cfg2 = TrainConfig::with_overrides(
            text,
            &[
                ("batch_size".to_string(), "4".to_string()),
                ("model.feature_dim".to_string(), "32".to_string()),
                ("model.length_target".to_string(), "scalar".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg2.batch_size, 4);
        assert_eq!(cfg2.model.feature_dim, 32);
        assert_eq!(cfg2.model.length_target, LengthTarget::Scalar);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let text = r#"
            train_manifest = "m"
            out_dir = "o"
            learning_rate = 3.0
        "#;
        assert!(TrainConfig::from_toml_str(text).is_err());
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 16,
            encoder_depths: vec![1, 1, 1, 1],
            encoder_heads: vec![1, 1, 2, 2],
            patch_size: 4,
            window_size: 4,
            decoder_depth: 1,
            decoder_heads: 2,
            vocab_size: 0,
            max_sequence_length: 32,
            lam_enabled: true,
            canvas_height: 32,
            canvas_width: 64,
            mlp_ratio: 1,
            length_target: LengthTarget::Counts,
        }
    }

    fn build_tiny_dataset(dir: &Path, n: usize) -> PathBuf {
        let lines = crate::synthetic::distinct_corpus(5, n, &[2, 3, 4]);
        let corpus = dir.join("corpus.txt");
        std::fs::write(&corpus, lines.join("\n")).unwrap();
        let out = dir.join("data");
        build_manifest(
            &corpus,
            &out,
            &BuildConfig {
                dpis: vec![80],
                ..BuildConfig::default()
            },
        )
        .unwrap();
        out.join("manifest.jsonl")
    }

    #[test]
    fn zero_iterations_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_tiny_dataset(dir.path(), 6);
        let mut cfg = quick_config(manifest, dir.path().join("run"), 0, tiny_model_cfg());
        cfg.batch_size = 4;
        let out = train_loop(&cfg, None).unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(out.final_checkpoint.join("params.bin").exists());
        let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
        assert!(metrics.is_empty());
    }

    #[test]
    fn train_two_runs_identical_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_tiny_dataset(dir.path(), 8);
        let mk = |out: &str, steps: usize| {
            let mut c = quick_config(
                manifest.clone(),
                dir.path().join(out),
                steps,
                tiny_model_cfg(),
            );
            c.batch_size = 4;
            c.warmup_iterations = 2;
            c.checkpoint_interval = 3;
            c
        };
        let a = train_loop(&mk("a", 6), None).unwrap();
        let b = train_loop(&mk("b", 6), None).unwrap();
        assert_eq!(a.last_total_loss.to_bits(), b.last_total_loss.to_bits());
        let pa = std::fs::read(dir.path().join("a/checkpoint/params.bin")).unwrap();
        let pb = std::fs::read(dir.path().join("b/checkpoint/params.bin")).unwrap();
        assert_eq!(pa, pb);

        // resume: train c for 3 steps, then resume to 6; compare with a
        let c3 = mk("c", 3);
        train_loop(&c3, None).unwrap();
        let c6 = mk("c", 6);
        let resumed = train_loop(&c6, Some(&dir.path().join("c/checkpoint"))).unwrap();
        assert_eq!(resumed.steps_run, 3);
        let pc = std::fs::read(dir.path().join("c/checkpoint/params.bin")).unwrap();
        assert_eq!(pa, pc, "resumed run diverged from straight run");

        // loss curves line up step for step
        let la = std::fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
        let lc = std::fs::read_to_string(dir.path().join("c/metrics.jsonl")).unwrap();
        let parse = |text: &str| -> Vec<(usize, u64)> {
            text.lines()
                .map(|l| {
                    let m: MetricsLine = serde_json::from_str(l).unwrap();
                    (m.step, m.total_loss.to_bits())
                })
                .collect()
        };
        assert_eq!(parse(&la), parse(&lc));
    }

    #[test]
    fn data_exhausted_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_tiny_dataset(dir.path(), 3);
        let mut cfg = quick_config(manifest, dir.path().join("run"), 2, tiny_model_cfg());
        cfg.batch_size = 8;
        cfg.warmup_iterations = 1;
        assert!(matches!(
            train_loop(&cfg, None),
            Err(TrainError::DataExhausted { n: 3, batch: 8 })
        ));
    }

    #[test]
    fn validation_never_augments() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_tiny_dataset(dir.path(), 8);
        let mut cfg = quick_config(
            manifest.clone(),
            dir.path().join("run"),
            2,
            tiny_model_cfg(),
        );
        cfg.batch_size = 4;
        cfg.warmup_iterations = 1;
        cfg.checkpoint_interval = 1;
        cfg.val_manifest = Some(manifest);
        cfg.augment = AugmentConfig::default_training();
        let out = train_loop(&cfg, None).unwrap();
        // exactly one pipeline call per training sample; validation adds none
        assert_eq!(out.augment_applications, 2 * 4);
        assert!(dir.path().join("run/val_metrics.jsonl").exists());
    }

    #[test]
    fn checkpoint_round_trip_restores_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = [crate::latex_norm::normalize("a + b").unwrap()];
        let vocab = crate::latex_norm::build_vocabulary(&corpus, 1).unwrap();
        let mut mc = tiny_model_cfg();
        mc.vocab_size = vocab.size() as usize;
        let mut model = Model::new(mc, 3).unwrap();
        let mut opt = AdamW::new(&model, 0.05);
        // fake a step so moments are nonzero
        let grads: Vec<Option<Array>> = model
            .param_arrays()
            .iter()
            .map(|(_, a)| Some(Array::ones(a.raw_dim())))
            .collect();
        opt.apply(&mut model, &grads, 1e-3);
        save_checkpoint(dir.path(), &model, &vocab, &opt, 1).unwrap();
        let (m2, v2, o2, step) = load_checkpoint(dir.path(), 0.05).unwrap();
        assert_eq!(step, 1);
        assert_eq!(v2, vocab);
        assert_eq!(o2.step_count(), 1);
        for (a, b) in model.param_arrays().iter().zip(m2.param_arrays()) {
            assert_eq!(a.1, b.1);
        }
        for (a, b) in opt.m.iter().zip(&o2.m) {
            assert_eq!(a, b);
        }
        for (a, b) in opt.v.iter().zip(&o2.v) {
            assert_eq!(a, b);
        }
    }
}
