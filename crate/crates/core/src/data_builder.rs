//! Dataset construction: normalize, dedup, length-balance, render, manifest.
//!
//! The manifest is JSON-lines: a header `{schema_version, vocabulary_ref,
//! bucket_spec}` followed by one record per line with keys `image_path`,
//! `latex`, `subset`, `token_length`. Image paths are relative to the
//! manifest's directory. Builds are deterministic for a fixed seed and
//! renderer: record order, font/DPI assignment and (under the stub renderer)
//! image bytes are all bit-stable.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latex_norm::{
    self, build_vocabulary, normalize, tokenize, LatexNormError, NormalizedLatex, Vocabulary,
};
use crate::render::{render_formula, RenderError, Renderer};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BUCKETS: [u32; 8] = [0, 8, 16, 32, 64, 128, 256, 1024];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest schema error: {0}")]
    ManifestSchema(String),
    #[error("missing image file: {0}")]
    MissingImage(String),
    #[error("bucket boundaries must be strictly increasing, got {0:?}")]
    InvalidBuckets(Vec<u32>),
    #[error("corpus produced no usable samples")]
    EmptyCorpus,
    #[error(transparent)]
    Latex(#[from] LatexNormError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The four evaluation subsets; desk builds assign printed subsets by
/// formula length, screen-captured and handwritten data come from outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    SPE,
    CPE,
    SCE,
    HWE,
}

impl Subset {
    pub fn name(&self) -> &'static str {
        match self {
            Subset::SPE => "SPE",
            Subset::CPE => "CPE",
            Subset::SCE => "SCE",
            Subset::HWE => "HWE",
        }
    }

    pub const ALL: [Subset; 4] = [Subset::SPE, Subset::CPE, Subset::SCE, Subset::HWE];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaSample {
    pub image_path: String,
    pub latex: NormalizedLatex,
    pub subset: Subset,
    pub token_length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    vocabulary_ref: String,
    bucket_spec: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub vocabulary_ref: String,
    pub bucket_spec: Vec<u32>,
    pub records: Vec<FormulaSample>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
            vocabulary_ref: self.vocabulary_ref.clone(),
            bucket_spec: self.bucket_spec.clone(),
        })?);
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Loads the vocabulary the manifest references, relative to `dir`.
    pub fn vocabulary(&self, dir: &Path) -> Result<Vocabulary, DataError> {
        Ok(Vocabulary::load(&dir.join(&self.vocabulary_ref))?)
    }
}

/// Index of the bucket containing `len`: half-open `[b_i, b_{i+1})` except
/// the last, which includes its upper edge.
pub fn bucket_index(buckets: &[u32], len: u32) -> Option<usize> {
    if buckets.len() < 2 {
        return None;
    }
    for i in 0..buckets.len() - 1 {
        if len >= buckets[i] && (len < buckets[i + 1] || (i == buckets.len() - 2 && len == buckets[i + 1])) {
            return Some(i);
        }
    }
    None
}

fn validate_buckets(buckets: &[u32]) -> Result<(), DataError> {
    if buckets.len() < 2 || buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DataError::InvalidBuckets(buckets.to_vec()));
    }
    Ok(())
}

/// Keeps the first occurrence of each exact latex string, preserving order.
pub fn dedup(samples: Vec<FormulaSample>) -> Vec<FormulaSample> {
    let mut seen = HashSet::new();
    samples
        .into_iter()
        .filter(|s| seen.insert(s.latex.clone()))
        .collect()
}

/// Uniformly samples without replacement up to `per_bucket` records from
/// each token-length bucket; deterministic for a fixed seed. Under-full
/// buckets contribute what they have, with a warning.
pub fn length_balanced_sample(
    samples: &[FormulaSample],
    buckets: &[u32],
    per_bucket: usize,
    seed: u64,
) -> Result<Vec<FormulaSample>, DataError> {
    let picked = balanced_indices(
        &samples.iter().map(|s| s.token_length).collect::<Vec<_>>(),
        buckets,
        per_bucket,
        seed,
    )?;
    Ok(picked.into_iter().map(|i| samples[i].clone()).collect())
}

fn balanced_indices(
    lengths: &[u32],
    buckets: &[u32],
    per_bucket: usize,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    validate_buckets(buckets)?;
    let n_buckets = buckets.len() - 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_buckets];
    for (i, &len) in lengths.iter().enumerate() {
        if let Some(b) = bucket_index(buckets, len) {
            members[b].push(i);
        }
    }
    let mut picked = Vec::new();
    for (b, mut ids) in members.into_iter().enumerate() {
        if ids.is_empty() {
            log::warn!(
                "length bucket {b} [{}, {}) is empty",
                buckets[b],
                buckets[b + 1]
            );
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(b as u64 + 1)));
        ids.shuffle(&mut rng);
        let take = per_bucket.min(ids.len());
        if take < per_bucket {
            log::warn!(
                "length bucket {b} has only {} of {per_bucket} requested samples",
                ids.len()
            );
        }
        let mut chosen: Vec<usize> = ids.into_iter().take(take).collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Ok(picked)
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub fonts: Vec<String>,
    pub dpis: Vec<u32>,
    pub buckets: Vec<u32>,
    pub per_bucket: usize,
    pub seed: u64,
    pub min_frequency: usize,
    pub max_sequence_length: usize,
    pub renderer: Renderer,
    /// Printed formulas at or below this token length are tagged SPE,
    /// longer ones CPE.
    pub spe_max_tokens: u32,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            fonts: vec!["default".to_string()],
            dpis: vec![80, 120, 160],
            buckets: DEFAULT_BUCKETS.to_vec(),
            per_bucket: usize::MAX,
            seed: 0,
            min_frequency: 1,
            max_sequence_length: 1024,
            renderer: Renderer::Stub,
            spe_max_tokens: 32,
        }
    }
}

/// Normalize -> dedup -> vocabulary -> reject unk/overlong -> balance ->
/// render -> write `manifest.jsonl` + `vocab.txt` + `images/` under
/// `output_dir`.
pub fn build_manifest(
    corpus_file: &Path,
    output_dir: &Path,
    config: &BuildConfig,
) -> Result<Manifest, DataError> {
    validate_buckets(&config.buckets)?;
    let text = std::fs::read_to_string(corpus_file)?;
    let mut normalized: Vec<NormalizedLatex> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match normalize(line) {
            Ok(n) if !n.is_empty() => normalized.push(n),
            Ok(_) => {}
            Err(e) => log::warn!("skipping corpus line {}: {e}", lineno + 1),
        }
    }
    // dedup on the normalized form
    let mut seen = HashSet::new();
    normalized.retain(|n| seen.insert(n.clone()));
    if normalized.is_empty() {
        return Err(DataError::EmptyCorpus);
    }

    let vocab = build_vocabulary(&normalized, config.min_frequency)?;

    // training data must be clean: no unk, within the length budget
    let mut kept: Vec<(NormalizedLatex, u32)> = Vec::new();
    for latex in normalized {
        let seq = tokenize(&latex, &vocab);
        if seq.ids().contains(&latex_norm::UNK_ID) {
            log::warn!("rejecting sample with out-of-vocabulary token: {latex}");
            continue;
        }
        if seq.is_empty() || seq.len() > config.max_sequence_length {
            log::warn!("rejecting sample with length {}: {latex}", seq.len());
            continue;
        }
        kept.push((latex, seq.len() as u32));
    }
    if kept.is_empty() {
        return Err(DataError::EmptyCorpus);
    }

    let lengths: Vec<u32> = kept.iter().map(|&(_, l)| l).collect();
    let picked = balanced_indices(&lengths, &config.buckets, config.per_bucket, config.seed)?;

    std::fs::create_dir_all(output_dir.join("images"))?;
    let mut records = Vec::new();
    for (ordinal, &idx) in picked.iter().enumerate() {
        let (latex, token_length) = &kept[idx];
        // font/DPI assignment is a deterministic function of seed + formula
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ hash_latex(latex));
        let font = &config.fonts[rng.gen_range(0..config.fonts.len())];
        let dpi = config.dpis[rng.gen_range(0..config.dpis.len())];
        let rel_path = format!("images/{ordinal:06}.png");
        match render_formula(
            &config.renderer,
            latex,
            font,
            dpi,
            &output_dir.join(&rel_path),
        ) {
            Ok(()) => {}
            Err(RenderError::CompileFailure(msg)) => {
                log::warn!("discarding uncompilable formula: {msg}");
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        let subset = if *token_length <= config.spe_max_tokens {
            Subset::SPE
        } else {
            Subset::CPE
        };
        records.push(FormulaSample {
            image_path: rel_path,
            latex: latex.clone(),
            subset,
            token_length: *token_length,
        });
    }

    vocab.save(&output_dir.join("vocab.txt"))?;
    let manifest = Manifest {
        vocabulary_ref: "vocab.txt".to_string(),
        bucket_spec: config.buckets.clone(),
        records,
    };
    manifest.save(&output_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn hash_latex(latex: &NormalizedLatex) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in latex.as_str().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Parses and validates a manifest: schema, normalization stability,
/// uniqueness, bucket membership, image existence.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::ManifestSchema("empty manifest".into()))?;
    let header: ManifestHeader = serde_json::from_str(header_line)
        .map_err(|e| DataError::ManifestSchema(format!("bad header: {e}")))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(DataError::ManifestSchema(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    validate_buckets(&header.bucket_spec)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FormulaSample = serde_json::from_str(line)
            .map_err(|e| DataError::ManifestSchema(format!("record {}: {e}", i + 1)))?;
        let renorm = normalize(rec.latex.as_str())
            .map_err(|e| DataError::ManifestSchema(format!("record {}: {e}", i + 1)))?;
        if renorm != rec.latex {
            return Err(DataError::ManifestSchema(format!(
                "record {}: latex is not in canonical form",
                i + 1
            )));
        }
        if !seen.insert(rec.latex.clone()) {
            return Err(DataError::ManifestSchema(format!(
                "record {}: duplicate latex {:?}",
                i + 1,
                rec.latex.as_str()
            )));
        }
        if bucket_index(&header.bucket_spec, rec.token_length).is_none() {
            return Err(DataError::ManifestSchema(format!(
                "record {}: token_length {} falls in no bucket",
                i + 1,
                rec.token_length
            )));
        }
        if !dir.join(&rec.image_path).exists() {
            return Err(DataError::MissingImage(rec.image_path.clone()));
        }
        records.push(rec);
    }
    Ok(Manifest {
        vocabulary_ref: header.vocabulary_ref,
        bucket_spec: header.bucket_spec,
        records,
    })
}
