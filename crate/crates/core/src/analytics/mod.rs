//! Corpus statistics and test-set construction.
//!
//! Everything here works on whitespace-separated words, not subwords.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::bleu::{corpus_stats, BleuReport, BleuStats, Smoothing};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
    /// Where the pairs came from (file name, generator, split name).
    pub provenance: String,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(String, String)>, provenance: impl Into<String>) -> Self {
        ParallelCorpus {
            pairs,
            provenance: provenance.into(),
        }
    }

    /// Reads `source<TAB>target` lines. Blank lines are skipped; a line
    /// without a tab or with an empty side is an error.
    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Invalid(format!("{}:{}: expected source<TAB>target", path.display(), no + 1)))?;
            if s.trim().is_empty() || t.trim().is_empty() {
                return Err(Error::Invalid(format!("{}:{}: empty side", path.display(), no + 1)));
            }
            pairs.push((s.trim().to_string(), t.trim().to_string()));
        }
        Ok(Self::new(pairs, path.display().to_string()))
    }

    /// Reads two line-aligned files. Line pairs where both sides are blank
    /// are dropped; one blank side is an error.
    pub fn load_parallel(source: impl AsRef<Path>, target: impl AsRef<Path>) -> Result<Self> {
        let (sp, tp) = (source.as_ref(), target.as_ref());
        let s = fs::read_to_string(sp).map_err(|e| Error::io(sp, e))?;
        let t = fs::read_to_string(tp).map_err(|e| Error::io(tp, e))?;
        let (s, t): (Vec<&str>, Vec<&str>) = (s.lines().collect(), t.lines().collect());
        if s.len() != t.len() {
            return Err(Error::Invalid(format!(
                "{} has {} lines but {} has {}",
                sp.display(),
                s.len(),
                tp.display(),
                t.len()
            )));
        }
        let mut pairs = Vec::with_capacity(s.len());
        for (no, (a, b)) in s.iter().zip(&t).enumerate() {
            match (a.trim().is_empty(), b.trim().is_empty()) {
                (true, true) => {}
                (false, false) => pairs.push((a.trim().to_string(), b.trim().to_string())),
                _ => return Err(Error::Invalid(format!("line {}: one side is empty", no + 1))),
            }
        }
        Ok(Self::new(pairs, format!("{}|{}", sp.display(), tp.display())))
    }

    /// Picks [`load_tsv`](Self::load_tsv) for a single path.
    pub fn load(source: impl AsRef<Path>, target: Option<&Path>) -> Result<Self> {
        match target {
            Some(t) => Self::load_parallel(source, t),
            None => Self::load_tsv(source),
        }
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (s, t) in &self.pairs {
            out.push_str(s);
            out.push('\t');
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.0.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.1.as_str())
    }
}

/// Word counts over one side of a training corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: HashMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.counts.contains_key(token)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Number of distinct words.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `(word, count)` by decreasing count, ties by word.
    pub fn ranked(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<(&str, u64)> = self.counts.iter().map(|(w, &c)| (w.as_str(), c)).collect();
        v.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v
    }

    /// Least-squares slope of ln(count) against ln(rank).
    pub fn zipf_slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .ranked()
            .iter()
            .enumerate()
            .map(|(r, (_, c))| (((r + 1) as f64).ln(), (*c as f64).ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }
}

pub fn token_frequencies<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<FrequencyTable> {
    let mut table = FrequencyTable::default();
    for line in lines {
        for w in line.split_whitespace() {
            *table.counts.entry(w.to_string()).or_default() += 1;
            table.total += 1;
        }
    }
    if table.total == 0 {
        return Err(Error::EmptyCorpus("no tokens to count".into()));
    }
    Ok(table)
}

/// Mean natural-log training frequency of the sentence's words. Unseen
/// words count as frequency 1 and so contribute 0.
pub fn sentence_typicality(sentence: &str, table: &FrequencyTable) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for w in sentence.split_whitespace() {
        sum += (table.count(w).max(1) as f64).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("typicality of an empty sentence".into()));
    }
    Ok(sum / n as f64)
}

/// Assigns each sentence to one of `k` equal-count buckets by typicality
/// (0 = least typical). Ties keep input order; when `k` does not divide the
/// count, bucket sizes differ by at most one.
pub fn typicality_buckets(sentences: &[&str], table: &FrequencyTable, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 buckets, got {k}")));
    }
    let scores = sentences
        .iter()
        .map(|s| sentence_typicality(s, table))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let n = sentences.len();
    let mut bucket = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        bucket[i] = pos * k / n;
    }
    Ok(bucket)
}

/// `low`/`mid`/`high` for three buckets, `q0`.. otherwise.
pub fn bucket_label(bucket: usize, k: usize) -> String {
    match (k, bucket) {
        (3, 0) => "low".into(),
        (3, 1) => "mid".into(),
        (3, 2) => "high".into(),
        _ => format!("q{bucket}"),
    }
}

/// Percentage of test words missing from the training vocabulary.
pub fn oov_rate<'a>(test: impl IntoIterator<Item = &'a str>, train_vocab: &FrequencyTable) -> Result<f64> {
    let (mut oov, mut n) = (0usize, 0usize);
    for line in test {
        for w in line.split_whitespace() {
            n += 1;
            oov += usize::from(!train_vocab.contains(w));
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus("no test tokens".into()));
    }
    Ok(100.0 * oov as f64 / n as f64)
}

/// Mean number of whitespace tokens per line.
pub fn avg_length<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<f64> {
    let (mut tokens, mut n) = (0usize, 0usize);
    for line in lines {
        tokens += line.split_whitespace().count();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyCorpus("no lines".into()));
    }
    Ok(tokens as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub global: ParallelCorpus,
    pub random: ParallelCorpus,
    pub train: ParallelCorpus,
}

/// Holds out the `n_global` most typical pairs (by source typicality) and a
/// uniform sample of `n_random` from the rest. Pairs repeating a global
/// source are not eligible for the random set, and training drops every
/// pair whose source occurs in either test set.
pub fn global_random_split(
    corpus: &ParallelCorpus,
    table: &FrequencyTable,
    n_global: usize,
    n_random: usize,
    seed: u64,
) -> Result<Split> {
    if n_global + n_random >= corpus.len() {
        return Err(Error::Invalid(format!(
            "test sets of {n_global} + {n_random} leave no training data from {} pairs",
            corpus.len()
        )));
    }
    let scores = corpus
        .sources()
        .map(|s| sentence_typicality(s, table))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let global_idx = &order[..n_global];
    let global_src: HashSet<&str> = global_idx.iter().map(|&i| corpus.pairs[i].0.as_str()).collect();
    let mut rest: Vec<usize> = order[n_global..]
        .iter()
        .copied()
        .filter(|&i| !global_src.contains(corpus.pairs[i].0.as_str()))
        .collect();
    if rest.len() <= n_random {
        return Err(Error::Invalid(format!(
            "only {} pairs remain after the global set, need more than {n_random}",
            rest.len()
        )));
    }
    rest.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let random_idx = &rest[..n_random];

    let pick = |idx: &[usize], name: &str| {
        ParallelCorpus::new(
            idx.iter().map(|&i| corpus.pairs[i].clone()).collect(),
            format!("{}#{name}", corpus.provenance),
        )
    };
    let global = pick(global_idx, "global");
    let random = pick(random_idx, "random");
    let held: HashSet<&str> = global.sources().chain(random.sources()).collect();
    let mut train_idx: Vec<usize> = rest[n_random..]
        .iter()
        .copied()
        .filter(|&i| !held.contains(corpus.pairs[i].0.as_str()))
        .collect();
    train_idx.sort_unstable();
    let train = pick(&train_idx, "train");
    Ok(Split { global, random, train })
}

/// Uniform sample of `n` pairs without replacement, in original order.
pub fn subsample_limited(corpus: &ParallelCorpus, n: usize, seed: u64) -> Result<ParallelCorpus> {
    if n > corpus.len() {
        return Err(Error::Invalid(format!("cannot sample {n} from {} pairs", corpus.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, corpus.len(), n).into_vec();
    idx.sort_unstable();
    Ok(ParallelCorpus::new(
        idx.into_iter().map(|i| corpus.pairs[i].clone()).collect(),
        format!("{}#limited{n}", corpus.provenance),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariabilityRow {
    pub size: usize,
    pub repeats: usize,
    pub mean_bleu: f64,
    /// Sample standard deviation over the repeats.
    pub std_bleu: f64,
}

/// Corpus BLEU of `repeats` random subsets (without replacement) for each
/// subset size.
pub fn bleu_subset_variability<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<VariabilityRow>> {
    let stats = corpus_stats(hyps, refs)?;
    subset_variability_from_stats(&stats, sizes, repeats, seed)
}

/// Same as [`bleu_subset_variability`] on precomputed segment statistics.
pub fn subset_variability_from_stats(
    stats: &[BleuStats],
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<VariabilityRow>> {
    if repeats < 2 {
        return Err(Error::Invalid(format!("need at least 2 repeats, got {repeats}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > stats.len() {
            return Err(Error::Invalid(format!("subset size {size} outside 1..={}", stats.len())));
        }
        let scores: Vec<f64> = (0..repeats)
            .map(|_| {
                let mut total = BleuStats::default();
                for i in index::sample(&mut rng, stats.len(), size) {
                    total += stats[i];
                }
                BleuReport::from_stats(&total, Smoothing::None).score
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / repeats as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        rows.push(VariabilityRow {
            size,
            repeats,
            mean_bleu: mean,
            std_bleu: var.sqrt(),
        });
    }
    Ok(rows)
}

pub fn write_variability_csv(rows: &[VariabilityRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Settings for [`synthetic_reversal_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent of the word distribution.
    pub exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            pairs: 10_000,
            vocab: 60,
            min_len: 3,
            max_len: 10,
            exponent: 1.0,
            seed: 0,
        }
    }
}

/// The `i`-th made-up word: two consonant-vowel syllables, all distinct for
/// `i < 4900`.
pub fn synthetic_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syl = |j: usize| {
        let j = j % (C.len() * V.len());
        [C[j % C.len()] as char, V[j / C.len()] as char]
    };
    let n = C.len() * V.len();
    syl(i % n).into_iter().chain(syl(i / n + 17 * i)).collect()
}

/// Source sentences of Zipf-distributed words with uniform lengths; the
/// target is the source word order reversed.
pub fn synthetic_reversal_corpus(cfg: &SyntheticConfig) -> Result<ParallelCorpus> {
    if cfg.vocab == 0 || cfg.vocab > 4900 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!("bad synthetic corpus settings {cfg:?}")));
    }
    let zipf = Zipf::new(cfg.vocab as f64, cfg.exponent).map_err(|e| Error::Config(e.to_string()))?;
    let words: Vec<String> = (0..cfg.vocab).map(synthetic_word).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = (0..cfg.pairs)
        .map(|_| {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let src: Vec<&str> = (0..len)
                .map(|_| words[zipf.sample(&mut rng) as usize - 1].as_str())
                .collect();
            let tgt: Vec<&str> = src.iter().rev().copied().collect();
            (src.join(" "), tgt.join(" "))
        })
        .collect();
    Ok(ParallelCorpus::new(pairs, format!("synthetic-reversal-seed{}", cfg.seed)))
}
