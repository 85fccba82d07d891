//! Synthetic formula generation for fixtures and demos.
//!
//! Emits random but well-formed LaTeX over the stub renderer's command set,
//! so generated corpora always compile. Lengths are approximate: snippets
//! are appended until the token budget is met.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ATOMS: [&str; 24] = [
    "a", "b", "c", "d", "x", "y", "z", "n", "k", "0", "1", "2", "3", "7", "\\alpha", "\\beta",
    "\\gamma", "\\lambda", "\\mu", "\\pi", "\\sigma", "\\omega", "\\theta", "\\phi",
];
const OPERATORS: [&str; 8] = ["+", "-", "=", "<", ">", "\\cdot", "\\times", "\\pm"];

fn atom(rng: &mut ChaCha8Rng) -> &'static str {
    ATOMS[rng.gen_range(0..ATOMS.len())]
}

fn operator(rng: &mut ChaCha8Rng) -> &'static str {
    OPERATORS[rng.gen_range(0..OPERATORS.len())]
}

/// One canonical-form formula of roughly `target_tokens` tokens (always at
/// least one token, may overshoot by a few on structured snippets).
pub fn formula(rng: &mut ChaCha8Rng, target_tokens: usize) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut count = 0usize;
    while count < target_tokens {
        if count > 0 {
            parts.push(operator(rng).to_string());
            count += 1;
        }
        let roll: f64 = rng.gen();
        if roll < 0.18 {
            // \frac { a } { b } : 7 tokens
            parts.push(format!("\\frac {{ {} }} {{ {} }}", atom(rng), atom(rng)));
            count += 7;
        } else if roll < 0.33 {
            // x ^ { 2 } : 5 tokens
            parts.push(format!("{} ^ {{ {} }}", atom(rng), atom(rng)));
            count += 5;
        } else if roll < 0.45 {
            // x _ { i } : 5 tokens
            parts.push(format!("{} _ {{ {} }}", atom(rng), atom(rng)));
            count += 5;
        } else if roll < 0.53 {
            // \sqrt { x } : 4 tokens
            parts.push(format!("\\sqrt {{ {} }}", atom(rng)));
            count += 4;
        } else {
            parts.push(atom(rng).to_string());
            count += 1;
        }
    }
    parts.join(" ")
}

/// One formula per requested token length, in order.
pub fn corpus_with_lengths(seed: u64, lengths: &[usize]) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths.iter().map(|&l| formula(&mut rng, l)).collect()
}

/// `n` distinct formulas with lengths cycling over `length_choices`.
/// Distinctness is enforced by regeneration, so the corpus is duplicate-free.
pub fn distinct_corpus(seed: u64, n: usize, length_choices: &[usize]) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n {
        let target = length_choices[i % length_choices.len()];
        let f = formula(&mut rng, target);
        if seen.insert(f.clone()) {
            out.push(f);
            i += 1;
        }
    }
    out
}
