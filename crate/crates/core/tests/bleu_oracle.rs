//! BLEU and 13a tokenization checked against fixtures produced by sacrebleu
//! (see fixtures/gen_bleu_oracle.py).

use serde_json::Value;
use sparsenmt::bleu::{corpus_bleu, sentence_bleu, tokenize_13a, Smoothing};

fn oracle() -> Value {
    let text = include_str!("fixtures/bleu_oracle.json");
    serde_json::from_str(text).unwrap()
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_owned()).collect()
}

#[test]
fn tokenizer_matches_reference_implementation() {
    for case in oracle()["tokenize"].as_array().unwrap() {
        let text = case["text"].as_str().unwrap();
        assert_eq!(tokenize_13a(text), strings(&case["tokens"]), "{text:?}");
    }
}

#[test]
fn corpus_scores_match_reference_implementation() {
    for case in oracle()["corpora"].as_array().unwrap() {
        let hyps = strings(&case["hyps"]);
        let refs = strings(&case["refs"]);
        let r = corpus_bleu(&hyps, &refs).unwrap();
        assert!((r.score - case["score"].as_f64().unwrap()).abs() < 1e-9);
        assert!((r.brevity_penalty - case["bp"].as_f64().unwrap()).abs() < 1e-9);
        assert_eq!(r.hyp_len as u64, case["hyp_len"].as_u64().unwrap());
        assert_eq!(r.ref_len as u64, case["ref_len"].as_u64().unwrap());
        for (p, q) in r.precisions.iter().zip(case["precisions"].as_array().unwrap()) {
            assert!((p - q.as_f64().unwrap()).abs() < 1e-9);
        }
    }
}

#[test]
fn smoothed_sentence_scores_match_reference_implementation() {
    for case in oracle()["sentences"].as_array().unwrap() {
        let (h, r) = (case["hyp"].as_str().unwrap(), case["ref"].as_str().unwrap());
        let s = sentence_bleu(h, r, Smoothing::Exp);
        assert!((s - case["score"].as_f64().unwrap()).abs() < 1e-9, "{h:?} / {r:?}: {s}");
    }
}

#[test]
fn corpus_score_ignores_segment_order() {
    let case = &oracle()["corpora"][0];
    let mut pairs: Vec<(String, String)> = strings(&case["hyps"]).into_iter().zip(strings(&case["refs"])).collect();
    let base = corpus_bleu(
        &pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>(),
        &pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>(),
    )
    .unwrap();
    pairs.reverse();
    pairs.rotate_left(3);
    let (h, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
    assert_eq!(corpus_bleu(&h, &r).unwrap(), base);
}
