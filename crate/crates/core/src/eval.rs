//! Recognition metrics and per-subset reporting.
//!
//! BLEU is BLEU-4 with uniform weights, a brevity penalty, and add-one
//! smoothing of zero n-gram counts; corpus scores pool n-gram statistics
//! rather than averaging sentence scores. Edit distance is character-level
//! Levenshtein normalized by the longer string, while exact-match rates use
//! token-level distances.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_builder::{load_manifest, DataError, Subset};
use crate::latex_norm::{detokenize, normalize, tokenize, LatexNormError, TokenSequence};
use crate::model::checkpoint::load_model;
use crate::model::preprocess::preprocess_image;
use crate::model::ModelError;

const MAX_NGRAM: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and reference lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("checkpoint vocabulary does not match manifest vocabulary")]
    VocabularyMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Latex(#[from] LatexNormError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Pooled n-gram statistics; feed pairs, then read a corpus-level score.
#[derive(Debug, Default, Clone)]
pub struct BleuAccumulator {
    matched: [u64; MAX_NGRAM],
    total: [u64; MAX_NGRAM],
    pred_len: u64,
    ref_len: u64,
}

impl BleuAccumulator {
    pub fn add(&mut self, prediction: &TokenSequence, reference: &TokenSequence) {
        let pred = prediction.ids();
        let refr = reference.ids();
        for n in 1..=MAX_NGRAM {
            let (m, t) = clipped_ngram_matches(pred, refr, n);
            self.matched[n - 1] += m;
            self.total[n - 1] += t;
        }
        self.pred_len += pred.len() as u64;
        self.ref_len += refr.len() as u64;
    }

    pub fn score(&self) -> f64 {
        if self.pred_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_NGRAM {
            let (m, t) = (self.matched[n], self.total[n]);
            let p = if m == 0 || t == 0 {
                (m + 1) as f64 / (t + 1) as f64
            } else {
                m as f64 / t as f64
            };
            log_sum += p.ln();
        }
        let brevity = if self.pred_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.pred_len as f64).exp()
        };
        brevity * (log_sum / MAX_NGRAM as f64).exp()
    }
}

fn clipped_ngram_matches(pred: &[u32], refr: &[u32], n: usize) -> (u64, u64) {
    if pred.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[u32], u64> = HashMap::new();
    if refr.len() >= n {
        for gram in refr.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut matched = 0;
    for gram in pred.windows(n) {
        if let Some(c) = ref_counts.get_mut(gram) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    (matched, (pred.len() - n + 1) as u64)
}

/// Sentence BLEU-4 for one pair. An empty reference scores 0 with a warning.
pub fn bleu(prediction: &TokenSequence, reference: &TokenSequence) -> f64 {
    if reference.is_empty() {
        log::warn!("BLEU against an empty reference is defined as 0");
        return 0.0;
    }
    let mut acc = BleuAccumulator::default();
    acc.add(prediction, reference);
    acc.score()
}

/// Unit-cost Levenshtein distance over arbitrary comparable items.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character-level distance normalized by the longer string; 0 when both are
/// empty. This is the EditDis-style score in [0, 1], lower is better.
pub fn edit_distance(prediction: &str, reference: &str) -> f64 {
    let p: Vec<char> = prediction.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    let denom = p.len().max(r.len());
    if denom == 0 {
        return 0.0;
    }
    levenshtein(&p, &r) as f64 / denom as f64
}

pub fn token_distance(prediction: &TokenSequence, reference: &TokenSequence) -> usize {
    levenshtein(prediction.ids(), reference.ids())
}

/// Fraction of pairs whose token-level distance is at most `k` (k = 0 is the
/// strict exact-match rate).
pub fn exprate(
    predictions: &[TokenSequence],
    references: &[TokenSequence],
    k: usize,
) -> Result<f64, EvalError> {
    if predictions.len() != references.len() {
        return Err(EvalError::LengthMismatch(
            predictions.len(),
            references.len(),
        ));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| token_distance(p, r) <= k)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Metric block for one subset; `None` metrics mean the subset was empty.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SubsetMetrics {
    pub bleu: Option<f64>,
    pub edit_distance: Option<f64>,
    pub exprate: Option<f64>,
    pub exprate_le1: Option<f64>,
    pub exprate_le2: Option<f64>,
    pub n: usize,
}

impl SubsetMetrics {
    pub fn empty() -> Self {
        SubsetMetrics {
            bleu: None,
            edit_distance: None,
            exprate: None,
            exprate_le1: None,
            exprate_le2: None,
            n: 0,
        }
    }

    /// Computes all metrics for parallel prediction/reference lists paired
    /// with their normalized string forms.
    pub fn compute(
        predictions: &[TokenSequence],
        references: &[TokenSequence],
        pred_strs: &[String],
        ref_strs: &[String],
    ) -> Result<Self, EvalError> {
        if predictions.is_empty() {
            return Ok(SubsetMetrics::empty());
        }
        let mut acc = BleuAccumulator::default();
        for (p, r) in predictions.iter().zip(references) {
            acc.add(p, r);
        }
        let mean_edit = pred_strs
            .iter()
            .zip(ref_strs)
            .map(|(p, r)| edit_distance(p, r))
            .sum::<f64>()
            / predictions.len() as f64;
        Ok(SubsetMetrics {
            bleu: Some(acc.score()),
            edit_distance: Some(mean_edit),
            exprate: Some(exprate(predictions, references, 0)?),
            exprate_le1: Some(exprate(predictions, references, 1)?),
            exprate_le2: Some(exprate(predictions, references, 2)?),
            n: predictions.len(),
        })
    }
}

/// Per-subset and overall metrics for one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub subsets: BTreeMap<String, SubsetMetrics>,
    pub overall: SubsetMetrics,
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Fixed-width table, one subset per row: BLEU up, EditDis down, then the
    /// exact-match columns.
    pub fn to_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{x:9.3}"),
                None => format!("{:>9}", "-"),
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8}{:>9}{:>9}{:>9}{:>9}{:>9}{:>7}",
            "subset", "BLEU", "EditDis", "ExpRate", "<=1", "<=2", "n"
        );
        for (name, m) in self
            .subsets
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("overall", &self.overall)))
        {
            let _ = writeln!(
                out,
                "{:<8}{}{}{}{}{}{:>7}",
                name,
                cell(m.bleu),
                cell(m.edit_distance),
                cell(m.exprate),
                cell(m.exprate_le1),
                cell(m.exprate_le2),
                m.n
            );
        }
        out
    }
}

/// One line of the per-sample predictions dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_path: String,
    pub reference: String,
    pub prediction: String,
    pub edit_distance: f64,
    pub token_distance: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 1,
            max_len: 512,
        }
    }
}

/// Runs generation over every manifest record (never augmenting), scores
/// per subset and overall, and writes `report.json`, `report.txt` and
/// `predictions.jsonl` under `out_dir`.
pub fn evaluate(
    manifest_path: &Path,
    checkpoint_dir: &Path,
    decode: &DecodeConfig,
    out_dir: &Path,
) -> Result<MetricsReport, EvalError> {
    let manifest_dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = load_manifest(manifest_path)?;
    let vocab = manifest.vocabulary(manifest_dir)?;
    let (model, ck_vocab) = load_model(checkpoint_dir)?;
    if ck_vocab != vocab {
        return Err(EvalError::VocabularyMismatch);
    }

    std::fs::create_dir_all(out_dir)?;
    let mut dump = std::fs::File::create(out_dir.join("predictions.jsonl"))?;

    // predictions and references per subset, both re-normalized
    let mut by_subset: BTreeMap<Subset, (Vec<TokenSequence>, Vec<TokenSequence>, Vec<String>, Vec<String>)> =
        BTreeMap::new();
    let max_len = decode.max_len.min(model.config.max_sequence_length - 1);
    for rec in &manifest.records {
        let img = image::open(manifest_dir.join(&rec.image_path))
            .map_err(|e| DataError::MissingImage(format!("{}: {e}", rec.image_path)))?
            .to_rgb8();
        let input = preprocess_image(&img, &model.config);
        let result = model.generate(&input, max_len, decode.beam)?;
        let raw_pred = detokenize(&TokenSequence::new(result.ids.clone()), &vocab)?;
        // comparing re-normalized forms keeps formatting differences out
        let pred_norm = normalize(raw_pred.as_str()).unwrap_or(raw_pred);
        let ref_norm = normalize(rec.latex.as_str())?;
        let pred_tokens = tokenize(&pred_norm, &vocab);
        let ref_tokens = tokenize(&ref_norm, &vocab);
        let record = PredictionRecord {
            image_path: rec.image_path.clone(),
            reference: ref_norm.as_str().to_string(),
            prediction: pred_norm.as_str().to_string(),
            edit_distance: edit_distance(pred_norm.as_str(), ref_norm.as_str()),
            token_distance: token_distance(&pred_tokens, &ref_tokens),
        };
        writeln!(dump, "{}", serde_json::to_string(&record)?)?;
        let entry = by_subset.entry(rec.subset).or_default();
        entry.0.push(pred_tokens);
        entry.1.push(ref_tokens);
        entry.2.push(record.prediction);
        entry.3.push(record.reference);
    }

    let mut subsets = BTreeMap::new();
    let mut all: (Vec<TokenSequence>, Vec<TokenSequence>, Vec<String>, Vec<String>) =
        Default::default();
    for subset in Subset::ALL {
        match by_subset.remove(&subset) {
            Some((p, r, ps, rs)) => {
                let metrics = SubsetMetrics::compute(&p, &r, &ps, &rs)?;
                subsets.insert(subset.name().to_string(), metrics);
                all.0.extend(p);
                all.1.extend(r);
                all.2.extend(ps);
                all.3.extend(rs);
            }
            None => {
                subsets.insert(subset.name().to_string(), SubsetMetrics::empty());
            }
        }
    }
    let overall = SubsetMetrics::compute(&all.0, &all.1, &all.2, &all.3)?;
    let report = MetricsReport {
        model: checkpoint_dir.display().to_string(),
        subsets,
        overall,
    };
    report.save_json(&out_dir.join("report.json"))?;
    std::fs::write(out_dir.join("report.txt"), report.to_table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec())
    }

    #[test]
    fn bleu_perfect_match() {
        let s = seq(&[5, 6, 7, 8, 9]);
        assert_eq!(bleu(&s, &s), 1.0);
    }

    #[test]
    fn bleu_empty_prediction() {
        assert_eq!(bleu(&seq(&[]), &seq(&[1, 2, 3])), 0.0);
    }

    #[test]
    fn bleu_empty_reference_is_zero() {
        assert_eq!(bleu(&seq(&[1, 2]), &seq(&[])), 0.0);
    }

    #[test]
    fn bleu_hand_computed_pair() {
        // pred "a b c d e f" vs ref "a b c d x y":
        // p1 = 4/6, p2 = 3/5, p3 = 2/4, p4 = 1/3, brevity = 1.
        let pred = seq(&[10, 11, 12, 13, 14, 15]);
        let refr = seq(&[10, 11, 12, 13, 20, 21]);
        let expected = (4.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0f64).powf(0.25);
        assert!((bleu(&pred, &refr) - expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        // Short correct prefix: precisions are 1, so only brevity remains.
        let pred = seq(&[1, 2, 3, 4]);
        let refr = seq(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let expected = (1.0f64 - 8.0 / 4.0).exp();
        assert!((bleu(&pred, &refr) - expected).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        // Pooling differs from averaging sentence scores.
        let pairs = [
            (seq(&[1, 2, 3, 4]), seq(&[1, 2, 3, 4])),
            (seq(&[9, 9, 9, 9]), seq(&[1, 2, 3, 9])),
        ];
        let mut acc = BleuAccumulator::default();
        for (p, r) in &pairs {
            acc.add(p, r);
        }
        // Pooled unigrams (4+1)/8, bigrams 3/6, trigrams 2/4, quadgrams 1/2.
        let expected = (5.0 / 8.0 * 3.0 / 6.0 * 2.0 / 4.0 * 1.0 / 2.0f64).powf(0.25);
        assert!((acc.score() - expected).abs() < 1e-12);
        let mean_sentence = (bleu(&pairs[0].0, &pairs[0].1) + bleu(&pairs[1].0, &pairs[1].1)) / 2.0;
        assert!((acc.score() - mean_sentence).abs() > 1e-3);
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance("abc", "abc"), 0.0);
        assert_eq!(edit_distance("", ""), 0.0);
        assert_eq!(edit_distance("", "ab"), 1.0);
        assert!((edit_distance("kitten", "sitting") - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn edit_distance_symmetry() {
        for (a, b) in [("kitten", "sitting"), ("", "xy"), ("a\\frac", "frac")] {
            assert_eq!(edit_distance(a, b), edit_distance(b, a));
        }
    }

    #[test]
    fn exprate_thresholds() {
        let refs: Vec<TokenSequence> = (0..2).map(|_| seq(&[1, 2, 3])).collect();
        let preds = vec![seq(&[1, 2, 3]), seq(&[1, 2, 9])];
        assert_eq!(exprate(&preds, &refs, 0).unwrap(), 0.5);
        assert_eq!(exprate(&preds, &refs, 1).unwrap(), 1.0);
    }

    #[test]
    fn exprate_length_mismatch() {
        let a = vec![seq(&[1])];
        assert!(matches!(
            exprate(&a, &[], 0),
            Err(EvalError::LengthMismatch(1, 0))
        ));
    }

    #[test]
    fn exprate_crafted_ten_pair_set() {
        // Token distances {0,0,0,1,1,2,2,3,3,5} by construction.
        let base: Vec<u32> = (10..20).collect();
        let dists = [0usize, 0, 0, 1, 1, 2, 2, 3, 3, 5];
        let refs: Vec<TokenSequence> = (0..10).map(|_| seq(&base)).collect();
        let preds: Vec<TokenSequence> = dists
            .iter()
            .map(|&d| {
                let mut ids = base.clone();
                for (j, slot) in ids.iter_mut().enumerate().take(d) {
                    *slot = 100 + j as u32;
                }
                seq(&ids)
            })
            .collect();
        for ((p, r), d) in preds.iter().zip(&refs).zip(dists) {
            assert_eq!(token_distance(p, r), d);
        }
        assert_eq!(exprate(&preds, &refs, 0).unwrap(), 0.3);
        assert_eq!(exprate(&preds, &refs, 1).unwrap(), 0.5);
        assert_eq!(exprate(&preds, &refs, 2).unwrap(), 0.7);
    }

    #[test]
    fn report_json_round_trip_and_table() {
        let mut subsets = BTreeMap::new();
        subsets.insert(
            "SPE".to_string(),
            SubsetMetrics {
                bleu: Some(0.9),
                edit_distance: Some(0.05),
                exprate: Some(0.8),
                exprate_le1: Some(0.9),
                exprate_le2: Some(0.95),
                n: 10,
            },
        );
        subsets.insert("HWE".to_string(), SubsetMetrics::empty());
        let report = MetricsReport {
            model: "ckpt-1".into(),
            subsets,
            overall: SubsetMetrics::empty(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save_json(&path).unwrap();
        let loaded = MetricsReport::load_json(&path).unwrap();
        assert_eq!(report, loaded);
        let table = report.to_table();
        assert!(table.contains("SPE"));
        assert!(table.contains("BLEU"));
        // Empty subset renders dashes, not zeros.
        assert!(table
            .lines()
            .any(|l| l.starts_with("HWE") && l.contains('-')));
    }
}
