//! Byte-pair encoding shared between source and target language.
//!
//! Words are whitespace-separated. Each word is split into characters
//! followed by an end-of-word symbol, and merges never cross word
//! boundaries. The end-of-word symbol is the private-use character
//! U+E000, so in lexicographic tie-breaks it sorts after ordinary letters.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: char = '\u{E000}';

const HEADER: &str = "#bpe";

/// Learned merges plus the resulting token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    /// id -> token; the first four ids are the special tokens.
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    base_symbols: usize,
}

impl MergeTable {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>, base_symbols: usize) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Invalid(format!("token {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate().skip(SPECIAL_TOKENS.len()) {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Invalid(format!("duplicate token {t:?}")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            if !index.contains_key(l) || !index.contains_key(r) || !index.contains_key(&merged) {
                return Err(Error::Invalid(format!("merge {l:?} {r:?} uses unknown tokens")));
            }
            ranks.entry((l.clone(), r.clone())).or_insert(rank);
        }
        Ok(MergeTable {
            merges,
            tokens,
            index,
            ranks,
            base_symbols,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of single-character symbols, end-of-word symbol included.
    pub fn base_symbols(&self) -> usize {
        self.base_symbols
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Segments one word into subword tokens.
    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        let mut symbols: Vec<Option<String>> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                (c != END_OF_WORD && self.index.contains_key(&s)).then_some(s)
            })
            .collect();
        symbols.push(Some(END_OF_WORD.to_string()));
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| match (&w[0], &w[1]) {
                    (Some(l), Some(r)) => self.ranks.get(&(l.clone(), r.clone())).map(|&rank| (rank, i)),
                    _ => None,
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && symbols[i].as_deref() == Some(l.as_str())
                    && symbols[i + 1].as_deref() == Some(r.as_str())
                {
                    merged.push(Some(format!("{l}{r}")));
                    i += 2;
                } else {
                    merged.push(symbols[i].take());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
            .iter()
            .map(|s| s.as_ref().map_or(UNK_ID, |s| self.index[s]))
            .collect()
    }

    /// Token ids for a line of text (no BOS/EOS added). Characters outside
    /// the learned inventory become [`UNK_ID`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Inverse of [`MergeTable::encode`] for in-inventory text with single
    /// spaces between words. PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                UNK_ID => out.push_str(SPECIAL_TOKENS[UNK_ID]),
                _ => match self.tokens.get(id) {
                    Some(t) => out.extend(t.chars().map(|c| if c == END_OF_WORD { ' ' } else { c })),
                    None => out.push_str(SPECIAL_TOKENS[UNK_ID]),
                },
            }
        }
        out.trim_end().to_string()
    }

    /// Text form: a header with the counts, one `left right` merge per
    /// line, then `token<TAB>id` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER} merges={} vocab={} base={}\n",
            self.merges.len(),
            self.tokens.len(),
            self.base_symbols
        );
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        for (id, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{id}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Invalid(format!("merge file: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER) {
            return Err(bad(format!("bad header {header:?}")));
        }
        let mut counts = HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(format!("bad header field {f:?}")))?;
            let v: usize = v.parse().map_err(|_| bad(format!("bad count {v:?}")))?;
            counts.insert(k, v);
        }
        let count = |k: &str| counts.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let (n_merges, n_vocab, base) = (count("merges")?, count("vocab")?, count("base")?);
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merges".into()))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(format!("bad merge {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut tokens = Vec::with_capacity(n_vocab);
        for expected in 0..n_vocab {
            let line = lines.next().ok_or_else(|| bad("truncated vocab".into()))?;
            let (t, id) = line.rsplit_once('\t').ok_or_else(|| bad(format!("bad vocab line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(bad(format!("vocab ids must be dense, got {id:?} at {expected}")));
            }
            tokens.push(t.to_string());
        }
        Self::from_parts(merges, tokens, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Learns merges greedily: the most frequent adjacent pair is merged until
/// the vocabulary reaches `target_vocab` or no pair occurs twice. Equal
/// counts go to the lexicographically smaller pair.
pub fn learn_bpe<'a>(lines: impl IntoIterator<Item = &'a str>, target_vocab: usize) -> Result<MergeTable> {
    let mut word_counts: HashMap<&str, i64> = HashMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            if w.contains(END_OF_WORD) {
                return Err(Error::Invalid("input contains the reserved character U+E000".into()));
            }
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus("no words to learn BPE from".into()));
    }
    let mut words: Vec<(&str, i64)> = word_counts.into_iter().collect();
    words.sort_unstable();

    let inventory: BTreeSet<String> = words
        .iter()
        .flat_map(|(w, _)| w.chars())
        .chain(std::iter::once(END_OF_WORD))
        .map(String::from)
        .collect();
    let base_symbols = inventory.len();
    if target_vocab < base_symbols + SPECIAL_TOKENS.len() {
        return Err(Error::Invalid(format!(
            "target vocabulary {target_vocab} smaller than {base_symbols} symbols plus {} specials",
            SPECIAL_TOKENS.len()
        )));
    }

    // Symbols are interned so pair bookkeeping works on integers.
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(inventory);
    let mut index: HashMap<String, usize> = tokens
        .iter()
        .enumerate()
        .skip(SPECIAL_TOKENS.len())
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let mut segs: Vec<Vec<usize>> = words
        .iter()
        .map(|(w, _)| {
            w.chars()
                .chain(std::iter::once(END_OF_WORD))
                .map(|c| index[&c.to_string()])
                .collect()
        })
        .collect();
    let freq: Vec<i64> = words.iter().map(|(_, c)| *c).collect();

    let mut pairs: HashMap<(usize, usize), i64> = HashMap::new();
    let mut where_: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
    for (wi, seg) in segs.iter().enumerate() {
        for p in seg.windows(2) {
            *pairs.entry((p[0], p[1])).or_default() += freq[wi];
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while tokens.len() < target_vocab {
        let best = pairs
            .iter()
            .filter(|(_, &c)| c >= 2)
            .min_by(|(a, ca), (b, cb)| {
                cb.cmp(ca)
                    .then_with(|| tokens[a.0].cmp(&tokens[b.0]))
                    .then_with(|| tokens[a.1].cmp(&tokens[b.1]))
            })
            .map(|(&p, _)| p);
        let Some((l, r)) = best else { break };
        let merged = format!("{}{}", tokens[l], tokens[r]);
        let new_id = *index.entry(merged.clone()).or_insert_with(|| {
            tokens.push(merged);
            tokens.len() - 1
        });
        merges.push((tokens[l].clone(), tokens[r].clone()));

        let affected: Vec<usize> = where_.remove(&(l, r)).into_iter().flatten().collect();
        for wi in affected {
            let f = freq[wi];
            let seg = &mut segs[wi];
            for p in seg.windows(2) {
                let key = (p[0], p[1]);
                if let Some(c) = pairs.get_mut(&key) {
                    *c -= f;
                    if *c == 0 {
                        pairs.remove(&key);
                    }
                }
            }
            let mut out = Vec::with_capacity(seg.len());
            let mut i = 0;
            while i < seg.len() {
                if i + 1 < seg.len() && seg[i] == l && seg[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(seg[i]);
                    i += 1;
                }
            }
            *seg = out;
            for p in seg.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += f;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pairs.remove(&(l, r));
    }
    MergeTable::from_parts(merges, tokens, base_symbols)
}

#[cfg(test)]
mod tests;
