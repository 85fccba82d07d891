//! Inference decoding: greedy and beam search.
//!
//! The image is encoded once; each step re-runs only the decoder on the
//! grown prefixes. Beam hypotheses are scored by length-normalized
//! log-probability, and the greedy hypothesis is always kept in the
//! candidate pool, so a wider beam never returns a lower-scored output than
//! greedy decoding.

use ndarray::{Axis, IxDyn};

use crate::latex_norm::{BOS_ID, EOS_ID};
use crate::tensor::{Array, Tape};

use super::{EncoderFeatures, LengthEmbedding, Model, ModelError};

/// Decoded tokens without `<bos>`/`<eos>`; `truncated` marks sequences cut
/// at the length cap before emitting `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateResult {
    pub ids: Vec<u32>,
    pub truncated: bool,
    pub score: f64,
}

#[derive(Clone)]
struct Beam {
    ids: Vec<u32>,
    log_prob: f64,
    finished: bool,
    truncated: bool,
}

impl Beam {
    /// Length-normalized score over generated tokens (bos excluded).
    fn score(&self) -> f64 {
        let gen_len = (self.ids.len() - 1).max(1);
        self.log_prob / gen_len as f64
    }
}

/// Encoder output and length embedding captured as plain arrays so decoding
/// steps can rebuild cheap tape leaves from them.
struct DecodingContext {
    z: Array,            // [1, T, D]
    grid: (usize, usize),
    length_embedding: Option<Array>, // [1, D]
}

impl Model {
    /// Decodes one preprocessed image `[3, H, W]`.
    pub fn generate(
        &self,
        image: &Array,
        max_len: usize,
        beam: usize,
    ) -> Result<GenerateResult, ModelError> {
        let max_len = max_len.min(self.config.max_sequence_length - 1);
        let beam = beam.max(1);
        let ctx = self.encode_for_decoding(image)?;

        let greedy = self.decode_beams(&ctx, max_len, 1)?;
        if beam == 1 {
            return Ok(to_result(greedy));
        }
        let wide = self.decode_beams(&ctx, max_len, beam)?;
        let best = if wide.score() >= greedy.score() {
            wide
        } else {
            greedy
        };
        Ok(to_result(best))
    }

    fn encode_for_decoding(&self, image: &Array) -> Result<DecodingContext, ModelError> {
        let batch = image.clone().insert_axis(Axis(0));
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let features = self.encode(&tape, &bound, &batch)?;
        let length_embedding = if self.config.lam_enabled {
            let (_, emb) = self.lam.forward(&bound, &features.z, false);
            Some(emb.value().to_owned())
        } else {
            None
        };
        Ok(DecodingContext {
            z: features.z.value().to_owned(),
            grid: features.grid,
            length_embedding,
        })
    }

    fn decode_beams(
        &self,
        ctx: &DecodingContext,
        max_len: usize,
        width: usize,
    ) -> Result<Beam, ModelError> {
        let mut beams = vec![Beam {
            ids: vec![BOS_ID],
            log_prob: 0.0,
            finished: false,
            truncated: false,
        }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates: Vec<Beam> =
                beams.iter().filter(|b| b.finished).cloned().collect();
            let active: Vec<&Beam> = beams.iter().filter(|b| !b.finished).collect();
            let rows: Vec<Vec<u32>> = active.iter().map(|b| b.ids.clone()).collect();
            let log_probs = self.next_token_log_probs(ctx, &rows)?;
            for (beam_row, lp) in active.iter().zip(log_probs) {
                let mut ranked: Vec<(usize, f64)> = lp.into_iter().enumerate().collect();
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                for &(tok, token_lp) in ranked.iter().take(width) {
                    let mut ids = beam_row.ids.clone();
                    let finished = tok as u32 == EOS_ID;
                    if !finished {
                        ids.push(tok as u32);
                    }
                    candidates.push(Beam {
                        ids,
                        log_prob: beam_row.log_prob + token_lp,
                        finished,
                        truncated: false,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score()
                    .partial_cmp(&a.score())
                    .unwrap()
                    .then(a.ids.cmp(&b.ids))
            });
            candidates.truncate(width);
            beams = candidates;
        }
        for b in &mut beams {
            if !b.finished {
                b.truncated = true;
            }
        }
        beams.sort_by(|a, b| {
            b.score()
                .partial_cmp(&a.score())
                .unwrap()
                .then(a.ids.cmp(&b.ids))
        });
        Ok(beams.remove(0))
    }

    /// Next-token log-probabilities for each prefix row (equal lengths).
    fn next_token_log_probs(
        &self,
        ctx: &DecodingContext,
        rows: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let n = rows.len();
        let (t, d) = (ctx.z.shape()[1], ctx.z.shape()[2]);
        let mut tiled = Array::zeros(IxDyn(&[n, t, d]));
        for i in 0..n {
            tiled
                .index_axis_mut(Axis(0), i)
                .assign(&ctx.z.index_axis(Axis(0), 0));
        }
        let features = EncoderFeatures {
            z: tape.leaf(tiled.into_shared()),
            grid: ctx.grid,
        };
        let length_embedding = ctx.length_embedding.as_ref().map(|e| {
            let mut tiled = Array::zeros(IxDyn(&[n, d]));
            for i in 0..n {
                tiled
                    .index_axis_mut(Axis(0), i)
                    .assign(&e.index_axis(Axis(0), 0));
            }
            LengthEmbedding {
                vector: tape.leaf(tiled.into_shared()),
            }
        });
        let out = self.decoder_forward(&tape, &bound, &features, rows, length_embedding.as_ref())?;
        let logits = out.logits.value();
        let c = logits.shape()[2];
        let last = rows[0].len() - 1;
        let mut result = Vec::with_capacity(n);
        for r in 0..n {
            let row: Vec<f64> = (0..c).map(|j| logits[[r, last, j]]).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            result.push(row.into_iter().map(|v| v - lse).collect());
        }
        Ok(result)
    }
}

fn to_result(beam: Beam) -> GenerateResult {
    GenerateResult {
        ids: beam.ids[1..].to_vec(),
        truncated: beam.truncated,
        score: beam.score(),
    }
}
