//! Detokenized, case-sensitive corpus BLEU with the mteval-13a tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([{-~\[-`\x20-&(-+:-@/])").unwrap());
static PERIOD_COMMA_AFTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([^0-9])([.,])").unwrap());
static PERIOD_COMMA_BEFORE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([.,])([^0-9])").unwrap());
static DIGIT_DASH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([0-9])(-)").unwrap());

/// Splits a line the way mteval-v13a does: unescape a few entities, pad
/// punctuation with spaces (periods and commas only next to non-digits),
/// then split on whitespace. Case is preserved.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let mut line = text
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let line = format!(" {line} ");
    let line = PUNCT.replace_all(&line, " $1 ");
    let line = PERIOD_COMMA_AFTER.replace_all(&line, "$1 $2 ");
    let line = PERIOD_COMMA_BEFORE.replace_all(&line, " $1 $2");
    let line = DIGIT_DASH.replace_all(&line, "$1 $2 ");
    line.split_whitespace().map(String::from).collect()
}

/// Sufficient statistics of one or more segments; they add up across a
/// corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    counts
}

pub fn segment_stats(hyp: &str, reference: &str) -> BleuStats {
    let h = tokenize_13a(hyp);
    let r = tokenize_13a(reference);
    let mut stats = BleuStats {
        hyp_len: h.len(),
        ref_len: r.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let ref_counts = ngram_counts(&r, n);
        for (gram, c) in ngram_counts(&h, n) {
            stats.matches[n - 1] += c.min(ref_counts.get(gram).copied().unwrap_or(0));
        }
        stats.totals[n - 1] = h.len().saturating_sub(n - 1);
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0 to 100.
    pub score: f64,
    /// Clipped n-gram precisions as fractions, orders 1 to 4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    None,
    /// Each zero-match order gets precision `1 / (2^k · total)`, where `k`
    /// counts the zero-match orders so far. Orders longer than the
    /// hypothesis are left out of the geometric mean.
    Exp,
}

impl BleuReport {
    pub fn from_stats(stats: &BleuStats, smoothing: Smoothing) -> Self {
        let mut precisions = [0.0; MAX_ORDER];
        let mut halvings = 1.0;
        for n in 0..MAX_ORDER {
            let (m, t) = (stats.matches[n], stats.totals[n]);
            precisions[n] = if t == 0 {
                0.0
            } else if m == 0 && smoothing == Smoothing::Exp {
                halvings *= 2.0;
                1.0 / (halvings * t as f64)
            } else {
                m as f64 / t as f64
            };
        }
        let (c, r) = (stats.hyp_len as f64, stats.ref_len as f64);
        let brevity_penalty = if c == 0.0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        };
        let order = match smoothing {
            Smoothing::None => MAX_ORDER,
            Smoothing::Exp => stats.totals.iter().filter(|&&t| t > 0).count(),
        };
        let used = &precisions[..order];
        let score = if order > 0 && used.iter().all(|&p| p > 0.0) {
            let log_mean = used.iter().map(|p| p.ln()).sum::<f64>() / order as f64;
            100.0 * brevity_penalty * log_mean.exp()
        } else {
            0.0
        };
        BleuReport {
            score,
            precisions,
            brevity_penalty,
            hyp_len: stats.hyp_len,
            ref_len: stats.ref_len,
        }
    }
}

fn check_aligned<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus("BLEU needs at least one segment".into()));
    }
    Ok(())
}

/// Per-segment statistics, for repeated scoring of subsets.
pub fn corpus_stats<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<Vec<BleuStats>> {
    check_aligned(hyps, refs)?;
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| segment_stats(h.as_ref(), r.as_ref()))
        .collect())
}

/// Corpus BLEU with one reference per hypothesis and no smoothing.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<BleuReport> {
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total += s;
    }
    Ok(BleuReport::from_stats(&total, Smoothing::None))
}

/// BLEU of a single segment; only meant for diagnostics.
pub fn sentence_bleu(hyp: &str, reference: &str, smoothing: Smoothing) -> f64 {
    BleuReport::from_stats(&segment_stats(hyp, reference), smoothing).score
}

/// Reads a text file as lines (one segment per line).
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(String::from).collect())
}
