use std::collections::HashMap;

use proptest::prelude::*;

use super::*;

fn eow() -> String {
    END_OF_WORD.to_string()
}

fn pair(l: &str, r: &str) -> (String, String) {
    (l.to_string(), r.to_string())
}

/// Brute-force learner: recount every pair after every merge.
fn naive_learn(lines: &[&str], target_vocab: usize) -> Vec<(String, String)> {
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for l in lines {
        for w in l.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, i64)> = counts
        .into_iter()
        .map(|(w, c)| {
            let mut s: Vec<String> = w.chars().map(String::from).collect();
            s.push(eow());
            (s, c)
        })
        .collect();
    let mut vocab: std::collections::BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let mut merges = Vec::new();
    while vocab.len() + 4 < target_vocab {
        let mut pc: HashMap<(String, String), i64> = HashMap::new();
        for (s, c) in &words {
            for p in s.windows(2) {
                *pc.entry((p[0].clone(), p[1].clone())).or_default() += c;
            }
        }
        let best = pc
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)));
        let Some(((l, r), _)) = best else { break };
        for (s, _) in &mut words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(s[i].clone());
                    i += 1;
                }
            }
            *s = out;
        }
        vocab.insert(format!("{l}{r}"));
        merges.push((l, r));
    }
    merges
}

/// Applies every merge in learned order across the whole word.
fn replay(table: &MergeTable, word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    s.push(eow());
    for (l, r) in table.merges() {
        let mut out = Vec::new();
        let mut i = 0;
        while i < s.len() {
            if i + 1 < s.len() && &s[i] == l && &s[i + 1] == r {
                out.push(format!("{l}{r}"));
                i += 2;
            } else {
                out.push(s[i].clone());
                i += 1;
            }
        }
        s = out;
    }
    s
}

const SAMPLE: &[&str] = &[
    "the lowest newer wider low",
    "newest lower widest lowly",
    "a new low in the west",
    "the wind is wild and low",
];

#[test]
fn single_pair_corpus() {
    let t = learn_bpe(["aa aa aa"], 100).unwrap();
    assert_eq!(t.merges()[0], pair("a", "a"));
}

#[test]
fn low_lower_lowest() {
    let mut lines = vec!["low"; 5];
    lines.extend(["lower"; 2]);
    lines.push("lowest");
    let t = learn_bpe(lines, 100).unwrap();
    assert_eq!(&t.merges()[..2], &[pair("l", "o"), pair("lo", "w")]);
}

#[test]
fn minimum_target_yields_characters_only() {
    // inventory: a b c + end-of-word marker
    let t = learn_bpe(["abc abc cab"], 4 + 4).unwrap();
    assert!(t.merges().is_empty());
    assert_eq!(t.vocab_size(), 8);
    assert_eq!(t.base_symbols(), 4);
    assert!(learn_bpe(["abc abc cab"], 7).is_err());
}

#[test]
fn special_ids_are_fixed() {
    let t = learn_bpe(SAMPLE.iter().copied(), 40).unwrap();
    for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
        assert_eq!(t.token(i), Some(*s));
    }
    assert!(t.merges().iter().all(|(l, r)| !SPECIAL_TOKENS.contains(&l.as_str()) && !SPECIAL_TOKENS.contains(&r.as_str())));
}

#[test]
fn empty_corpus_and_reserved_char() {
    assert!(matches!(learn_bpe(["", "   "], 50), Err(Error::EmptyCorpus(_))));
    let bad = format!("ab{END_OF_WORD}c");
    assert!(learn_bpe([bad.as_str()], 50).is_err());
}

#[test]
fn vocab_bounded_and_reaches_target() {
    for target in [20, 30, 35] {
        let t = learn_bpe(SAMPLE.iter().copied(), target).unwrap();
        assert_eq!(t.vocab_size(), target, "target {target}");
    }
    let t = learn_bpe(SAMPLE.iter().copied(), 10_000).unwrap();
    assert!(t.vocab_size() < 10_000);
}

#[test]
fn learner_matches_brute_force() {
    for target in [18, 25, 45, 10_000] {
        let t = learn_bpe(SAMPLE.iter().copied(), target).unwrap();
        assert_eq!(t.merges(), naive_learn(SAMPLE, target).as_slice(), "target {target}");
    }
}

#[test]
fn encoding_matches_merge_replay() {
    let corpus = ["lower newest widest", "lowest newer wider", "low new wide"];
    let t = learn_bpe(corpus, 30).unwrap();
    for word in ["lowest", "newer", "widest", "lowerest", "wen", "d"] {
        let got: Vec<&str> = t.encode_word(word).iter().map(|&i| t.token(i).unwrap()).collect();
        assert_eq!(got, replay(&t, word), "{word}");
    }
}

#[test]
fn roundtrip_and_unknown_chars() {
    let t = learn_bpe(SAMPLE.iter().copied(), 40).unwrap();
    let text = "the wildest newt is low";
    assert_eq!(t.decode(&t.encode(text)), text);
    let ids = t.encode("the zebra");
    assert!(ids.contains(&UNK_ID));
    assert_eq!(t.decode(&ids), "the <unk>e<unk>ra");
    let mut framed = vec![BOS_ID];
    framed.extend(t.encode(text));
    framed.extend([EOS_ID, PAD_ID, PAD_ID]);
    assert_eq!(t.decode(&framed), text);
}

#[test]
fn text_format_roundtrip() {
    let t = learn_bpe(SAMPLE.iter().copied(), 30).unwrap();
    let text = t.to_text();
    assert!(text.starts_with(&format!("#bpe merges={} vocab=30 base=", t.merges().len())));
    let back = MergeTable::from_text(&text).unwrap();
    assert_eq!(back, t);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("merges.txt");
    t.save(&path).unwrap();
    assert_eq!(MergeTable::load(&path).unwrap(), t);

    assert!(MergeTable::from_text("").is_err());
    assert!(MergeTable::from_text("#bpe merges=3 vocab=4 base=0\n").is_err());
    let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    assert!(MergeTable::from_text(&truncated).is_err());
}

#[test]
fn line_order_does_not_matter() {
    let mut rev: Vec<&str> = SAMPLE.to_vec();
    rev.reverse();
    assert_eq!(learn_bpe(SAMPLE.iter().copied(), 35).unwrap(), learn_bpe(rev, 35).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_encode_is_identity_on_seen_text(words in prop::collection::vec("[a-e]{1,6}", 1..12)) {
        let t = learn_bpe(SAMPLE.iter().copied().chain(["abcde"]), 40).unwrap();
        let text = words.join(" ");
        let once = t.decode(&t.encode(&text));
        prop_assert_eq!(&once, &text);
        prop_assert_eq!(t.decode(&t.encode(&once)), once);
    }

    #[test]
    fn learner_agrees_with_brute_force(lines in prop::collection::vec("[abc ]{0,12}", 1..6), extra in 0usize..12) {
        prop_assume!(lines.iter().any(|l| !l.trim().is_empty()));
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let base = learn_bpe(refs.iter().copied(), 10_000).unwrap().base_symbols();
        let target = base + 4 + extra;
        let t = learn_bpe(refs.iter().copied(), target).unwrap();
        let expect = naive_learn(&refs, target);
        prop_assert_eq!(t.merges(), expect.as_slice());
        prop_assert!(t.vocab_size() <= target);
    }
}
