//! LaTeX normalization and tokenization.
//!
//! Semantically identical markup is mapped to one canonical token sequence:
//! comments stripped, whitespace collapsed, synonym commands rewritten
//! through a versioned table, `\over` folded into `\frac`, and the arguments
//! of known commands (including `^` and `_`) always braced. The canonical
//! text form is space-separated tokens, so `tokenize` is a plain split.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rules applied to every input; see `default_rules.tsv`.
const DEFAULT_RULES: &str = include_str!("default_rules.tsv");

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum LatexNormError {
    #[error("unbalanced braces in LaTeX input: {0}")]
    UnbalancedBraces(String),
    #[error("corpus contains no tokens at or above the frequency threshold")]
    EmptyCorpus,
    #[error("token id {0} outside vocabulary of size {1}")]
    InvalidTokenId(u32, u32),
    #[error("duplicate token {0:?} in vocabulary file")]
    DuplicateToken(String),
    #[error("malformed rewrite rule on line {line}: {text:?}")]
    RuleParse { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Canonical LaTeX: single spaces between tokens, no comments, no tabs or
/// newlines, stable under repeated normalization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedLatex(String);

impl NormalizedLatex {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Token strings of the canonical form.
    pub fn token_strs(&self) -> impl Iterator<Item = &str> {
        self.0.split_whitespace()
    }

    pub(crate) fn from_canonical(text: String) -> Self {
        NormalizedLatex(text)
    }
}

impl fmt::Display for NormalizedLatex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered token ids drawn from one [`Vocabulary`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-symbol multiplicities over the whole vocabulary (specials stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct CountVector {
    counts: Vec<f64>,
}

impl CountVector {
    /// Wraps a raw per-symbol count vector (predictions, targets built by
    /// collators).
    pub fn from_raw(counts: Vec<f64>) -> Self {
        CountVector { counts }
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Token-string to id mapping with the four reserved specials at ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(non_special: Vec<String>) -> Result<Self, LatexNormError> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(non_special);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(LatexNormError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total number of symbol categories, specials included.
    pub fn size(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Result<&str, LatexNormError> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(LatexNormError::InvalidTokenId(id, self.size()))
    }

    pub fn is_special(id: u32) -> bool {
        id < SPECIAL_TOKENS.len() as u32
    }

    /// Writes one non-special token per line; specials are implicit.
    pub fn save(&self, path: &Path) -> Result<(), LatexNormError> {
        let body: String = self.tokens[SPECIAL_TOKENS.len()..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect();
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LatexNormError> {
        let text = std::fs::read_to_string(path)?;
        let toks: Vec<String> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        Vocabulary::from_tokens(toks)
    }
}

/// Token-level rewrite table, `pattern<TAB>replacement` per line, applied in
/// file order. Lines starting with `#` are comments.
#[derive(Debug, Clone)]
pub struct RewriteRules {
    rules: Vec<(String, Vec<String>)>,
}

impl RewriteRules {
    pub fn parse(text: &str) -> Result<Self, LatexNormError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (pat, rep) = line.split_once('\t').ok_or(LatexNormError::RuleParse {
                line: i + 1,
                text: line.to_string(),
            })?;
            if pat.is_empty() {
                return Err(LatexNormError::RuleParse {
                    line: i + 1,
                    text: line.to_string(),
                });
            }
            let replacement = rep.split_whitespace().map(|s| s.to_string()).collect();
            rules.push((pat.to_string(), replacement));
        }
        Ok(RewriteRules { rules })
    }

    pub fn from_file(path: &Path) -> Result<Self, LatexNormError> {
        RewriteRules::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&self, mut tokens: Vec<String>) -> Vec<String> {
        for (pat, rep) in &self.rules {
            if !tokens.iter().any(|t| t == pat) {
                continue;
            }
            let mut out = Vec::with_capacity(tokens.len());
            for tok in tokens {
                if &tok == pat {
                    out.extend(rep.iter().cloned());
                } else {
                    out.push(tok);
                }
            }
            tokens = out;
        }
        tokens
    }
}

impl Default for RewriteRules {
    fn default() -> Self {
        RewriteRules::parse(DEFAULT_RULES).expect("shipped rule table parses")
    }
}

/// Argument count of commands whose arguments are always braced.
fn command_arity(token: &str) -> usize {
    match token {
        "\\frac" | "\\binom" | "\\overset" | "\\underset" | "\\stackrel" => 2,
        "\\sqrt" | "\\hat" | "\\bar" | "\\vec" | "\\tilde" | "\\dot" | "\\ddot"
        | "\\overline" | "\\underline" | "\\widehat" | "\\widetilde" | "\\mathbf"
        | "\\mathrm" | "\\mathcal" | "\\mathbb" | "\\mathit" | "\\mathsf" | "\\boldsymbol"
        | "\\operatorname" | "\\text" | "^" | "_" => 1,
        _ => 0,
    }
}

enum Node {
    Token(String),
    Group(Vec<Node>),
}

fn lex(raw: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut chars = raw.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '%' => {
                for c2 in chars.by_ref() {
                    if c2 == '\n' {
                        break;
                    }
                }
            }
            '\\' => match chars.peek() {
                Some(&n) if n.is_ascii_alphabetic() => {
                    let mut cmd = String::from("\\");
                    while let Some(&n) = chars.peek() {
                        if n.is_ascii_alphabetic() {
                            cmd.push(n);
                            chars.next();
                        } else {
                            break;
                        }
                    }
                    tokens.push(cmd);
                }
                Some(&n) => {
                    chars.next();
                    tokens.push(format!("\\{n}"));
                }
                None => tokens.push("\\".to_string()),
            },
            c if c.is_whitespace() => {}
            c => tokens.push(c.to_string()),
        }
    }
    tokens
}

fn parse_group(
    tokens: &mut std::iter::Peekable<std::vec::IntoIter<String>>,
    top_level: bool,
) -> Result<Vec<Node>, LatexNormError> {
    let mut nodes = Vec::new();
    while let Some(tok) = tokens.peek() {
        match tok.as_str() {
            "{" => {
                tokens.next();
                nodes.push(Node::Group(parse_group(tokens, false)?));
                match tokens.next().as_deref() {
                    Some("}") => {}
                    _ => return Err(LatexNormError::UnbalancedBraces("missing }".into())),
                }
            }
            "}" => {
                if top_level {
                    return Err(LatexNormError::UnbalancedBraces("unexpected }".into()));
                }
                return Ok(nodes);
            }
            _ => {
                nodes.push(Node::Token(tokens.next().unwrap()));
            }
        }
    }
    if top_level {
        Ok(nodes)
    } else {
        Err(LatexNormError::UnbalancedBraces("missing }".into()))
    }
}

/// Folds TeX's infix `\over` into prefix `\frac` within each group.
fn rewrite_over(nodes: Vec<Node>) -> Vec<Node> {
    let nodes: Vec<Node> = nodes
        .into_iter()
        .map(|n| match n {
            Node::Group(inner) => Node::Group(rewrite_over(inner)),
            t => t,
        })
        .collect();
    if let Some(pos) = nodes
        .iter()
        .position(|n| matches!(n, Node::Token(t) if t == "\\over"))
    {
        let mut iter = nodes.into_iter();
        let num: Vec<Node> = iter.by_ref().take(pos).collect();
        iter.next(); // the \over token itself
        let den: Vec<Node> = rewrite_over(iter.collect());
        vec![
            Node::Token("\\frac".to_string()),
            Node::Group(num),
            Node::Group(den),
        ]
    } else {
        nodes
    }
}

fn emit(nodes: Vec<Node>, out: &mut Vec<String>) {
    let mut iter = nodes.into_iter();
    while let Some(node) = iter.next() {
        emit_node(node, &mut iter, false, out);
    }
}

/// Emits one node; `brace` wraps a bare token argument in `{ }`. A token that
/// takes arguments pulls them from `iter` so they end up inside its braces.
fn emit_node(node: Node, iter: &mut std::vec::IntoIter<Node>, brace: bool, out: &mut Vec<String>) {
    match node {
        Node::Group(inner) => {
            out.push("{".into());
            emit(inner, out);
            out.push("}".into());
        }
        Node::Token(tok) => {
            if brace {
                out.push("{".into());
            }
            let arity = command_arity(&tok);
            out.push(tok);
            for _ in 0..arity {
                match iter.next() {
                    Some(n) => emit_node(n, iter, true, out),
                    None => break,
                }
            }
            if brace {
                out.push("}".into());
            }
        }
    }
}

/// Canonicalizes raw LaTeX. Empty or whitespace-only input yields the empty
/// canonical form; structurally broken markup is an error the caller should
/// log and skip.
pub fn normalize(raw: &str) -> Result<NormalizedLatex, LatexNormError> {
    normalize_with_rules(raw, &RewriteRules::default())
}

pub fn normalize_with_rules(
    raw: &str,
    rules: &RewriteRules,
) -> Result<NormalizedLatex, LatexNormError> {
    let lexed = lex(raw);
    if lexed.is_empty() {
        return Ok(NormalizedLatex(String::new()));
    }
    let rewritten = rules.apply(lexed);
    let tree = parse_group(&mut rewritten.into_iter().peekable(), true)?;
    let tree = rewrite_over(tree);
    let mut out = Vec::new();
    emit(tree, &mut out);
    Ok(NormalizedLatex(out.join(" ")))
}

/// Splits canonical text into vocabulary ids; out-of-vocabulary tokens map
/// to `<unk>`.
pub fn tokenize(latex: &NormalizedLatex, vocab: &Vocabulary) -> TokenSequence {
    TokenSequence::new(
        latex
            .token_strs()
            .map(|t| vocab.id_of(t).unwrap_or(UNK_ID))
            .collect(),
    )
}

pub fn detokenize(
    tokens: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<NormalizedLatex, LatexNormError> {
    let mut parts = Vec::with_capacity(tokens.len());
    for &id in tokens.ids() {
        parts.push(vocab.token_of(id)?);
    }
    Ok(NormalizedLatex::from_canonical(parts.join(" ")))
}

/// Deterministic vocabulary build: tokens below `min_frequency` are dropped,
/// the rest sorted by descending frequency then lexicographically.
pub fn build_vocabulary(
    corpus: &[NormalizedLatex],
    min_frequency: usize,
) -> Result<Vocabulary, LatexNormError> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for latex in corpus {
        for tok in latex.token_strs() {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|&(_, n)| n >= min_frequency.max(1))
        .collect();
    if kept.is_empty() {
        return Err(LatexNormError::EmptyCorpus);
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// Ground-truth symbol counts for a sequence; specials contribute nothing, so
/// the total equals the count of non-special tokens.
pub fn symbol_counts(tokens: &TokenSequence, vocab: &Vocabulary) -> CountVector {
    let mut counts = vec![0.0; vocab.size() as usize];
    for &id in tokens.ids() {
        if !Vocabulary::is_special(id) {
            if let Some(slot) = counts.get_mut(id as usize) {
                *slot += 1.0;
            }
        }
    }
    CountVector { counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(s: &str) -> String {
        normalize(s).unwrap().into_string()
    }

    #[test]
    fn brace_insertion_on_frac() {
        assert_eq!(norm("\\frac a b"), "\\frac { a } { b }");
    }

    #[test]
    fn script_arguments_are_braced() {
        assert_eq!(norm("x^{2}"), "x ^ { 2 }");
        assert_eq!(norm("x^2"), "x ^ { 2 }");
        assert_eq!(norm("a_i^2"), "a _ { i } ^ { 2 }");
    }

    #[test]
    fn synonym_rewrite() {
        assert_eq!(norm("a \\le b"), "a \\leq b");
        assert_eq!(norm("\\lbrace x \\rbrace"), "\\{ x \\}");
    }

    #[test]
    fn over_becomes_frac() {
        assert_eq!(norm("{ a \\over b }"), "{ \\frac { a } { b } }");
        assert_eq!(norm("a+1 \\over b"), "\\frac { a + 1 } { b }");
    }

    #[test]
    fn comments_and_whitespace() {
        assert_eq!(norm("a + b % trailing\n\t c"), "a + b c");
        assert_eq!(norm("  "), "");
        assert_eq!(norm(""), "");
    }

    #[test]
    fn escaped_percent_is_a_token() {
        assert_eq!(norm("50 \\% x"), "5 0 \\% x");
    }

    #[test]
    fn unbalanced_braces_error() {
        assert!(matches!(
            normalize("{ a"),
            Err(LatexNormError::UnbalancedBraces(_))
        ));
        assert!(matches!(
            normalize("a }"),
            Err(LatexNormError::UnbalancedBraces(_))
        ));
    }

    #[test]
    fn idempotence_on_samples() {
        for s in [
            "\\frac a b",
            "x^2 + y_1",
            "\\sum_{i=0}^n i",
            "{ a \\over b }",
            "\\sqrt 2",
            "\\mathbf x \\cdot \\vec y",
            "\\frac \\alpha \\beta",
        ] {
            let once = norm(s);
            assert_eq!(norm(&once), once, "not idempotent for {s:?}");
        }
    }

    #[test]
    fn nested_command_argument() {
        // The braced argument absorbs the inner command's own arguments.
        assert_eq!(norm("\\sqrt \\frac a b"), "\\sqrt { \\frac { a } { b } }");
    }

    fn toy_vocab() -> Vocabulary {
        let corpus = [normalize("\\frac { a } { b } + - x y").unwrap()];
        build_vocabulary(&corpus, 1).unwrap()
    }

    #[test]
    fn tokenize_splits_canonical_text() {
        let vocab = toy_vocab();
        let seq = tokenize(&normalize("\\frac a b").unwrap(), &vocab);
        let toks: Vec<&str> = seq
            .ids()
            .iter()
            .map(|&id| vocab.token_of(id).unwrap())
            .collect();
        assert_eq!(toks, ["\\frac", "{", "a", "}", "{", "b", "}"]);
    }

    #[test]
    fn tokenize_empty() {
        let vocab = toy_vocab();
        assert!(tokenize(&normalize("").unwrap(), &vocab).is_empty());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let vocab = toy_vocab();
        let seq = tokenize(&NormalizedLatex::from_canonical("z".into()), &vocab);
        assert_eq!(seq.ids(), [UNK_ID]);
    }

    #[test]
    fn round_trip() {
        let vocab = toy_vocab();
        for s in ["a + b", "\\frac { a } { b }", ""] {
            let latex = NormalizedLatex::from_canonical(s.to_string());
            let seq = tokenize(&latex, &vocab);
            assert_eq!(detokenize(&seq, &vocab).unwrap(), latex);
        }
    }

    #[test]
    fn detokenize_rejects_bad_id() {
        let vocab = toy_vocab();
        let bad = TokenSequence::new(vec![vocab.size()]);
        assert!(matches!(
            detokenize(&bad, &vocab),
            Err(LatexNormError::InvalidTokenId(_, _))
        ));
    }

    #[test]
    fn vocabulary_build_and_frequency_cutoff() {
        let corpus = [NormalizedLatex::from_canonical("a a b".into())];
        let v1 = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(v1.size(), 6);
        assert_eq!(v1.id_of("a"), Some(4)); // higher frequency first
        assert_eq!(v1.id_of("b"), Some(5));

        let v2 = build_vocabulary(&corpus, 2).unwrap();
        assert_eq!(v2.size(), 5);
        assert_eq!(v2.id_of("b"), None);
    }

    #[test]
    fn vocabulary_empty_corpus() {
        let corpus = [NormalizedLatex::from_canonical(String::new())];
        assert!(matches!(
            build_vocabulary(&corpus, 1),
            Err(LatexNormError::EmptyCorpus)
        ));
        assert!(matches!(
            build_vocabulary(&[], 1),
            Err(LatexNormError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocabulary_determinism_and_ties() {
        // Equal frequencies fall back to lexicographic order.
        let corpus = [NormalizedLatex::from_canonical("z y x".into())];
        let v = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(v.id_of("x"), Some(4));
        assert_eq!(v.id_of("y"), Some(5));
        assert_eq!(v.id_of("z"), Some(6));
        let v2 = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let corpus = [normalize("\\alpha + \\beta - 1").unwrap()];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
    }

    #[test]
    fn symbol_counts_match_length() {
        let vocab = toy_vocab();
        let latex = normalize("\\frac { a } { b }").unwrap();
        let seq = tokenize(&latex, &vocab);
        let cv = symbol_counts(&seq, &vocab);
        assert_eq!(cv.total(), seq.len() as f64);
        assert_eq!(cv.counts()[vocab.id_of("{").unwrap() as usize], 2.0);
        assert_eq!(cv.counts()[vocab.id_of("\\frac").unwrap() as usize], 1.0);

        let empty = symbol_counts(&TokenSequence::new(vec![]), &vocab);
        assert_eq!(empty.total(), 0.0);
    }

    #[test]
    fn symbol_counts_skip_specials() {
        let vocab = toy_vocab();
        let seq = TokenSequence::new(vec![BOS_ID, vocab.id_of("a").unwrap(), EOS_ID]);
        let cv = symbol_counts(&seq, &vocab);
        assert_eq!(cv.total(), 1.0);
        assert_eq!(cv.counts()[PAD_ID as usize], 0.0);
    }
}
