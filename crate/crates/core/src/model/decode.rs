use super::build::{OUTPUT_PROJECTION, SHARED_EMBEDDING};
use super::forward::{with_eos, Bound, SeqBatch, Transformer, BOS, EOS};
use super::{ModelParams, TransformerConfig};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_BEAM: usize = 4;

/// Logits closer than this are treated as tied; ties go to the lower id.
pub(crate) const ARGMAX_TOLERANCE: f64 = 1e-6;

const CHUNK: usize = 64;

pub fn vocab_size<T: Scalar>(config: &TransformerConfig, params: &ModelParams<T>) -> Result<usize> {
    let name = if config.shared_embeddings {
        SHARED_EMBEDDING
    } else {
        OUTPUT_PROJECTION
    };
    Ok(params.require(name)?.shape()[0])
}

pub(crate) fn argmax_tolerant<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    let mut best_v = row[0].to_f64().unwrap();
    for (i, v) in row.iter().enumerate().skip(1) {
        let v = v.to_f64().unwrap();
        if v > best_v + ARGMAX_TOLERANCE {
            best = i;
            best_v = v;
        }
    }
    best
}

/// The `k` best indices in tolerant-argmax order.
fn top_k_tolerant(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for (i, &v) in scores.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if v <= scores[b] + ARGMAX_TOLERANCE => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("k bounded by len");
        taken[b] = true;
        out.push(b);
    }
    out
}

fn prepare_source(config: &TransformerConfig, src: &[usize]) -> Vec<usize> {
    with_eos(&src[..src.len().min(config.max_len - 1)])
}

fn step_limit(config: &TransformerConfig, max_len: usize) -> usize {
    max_len.min(config.max_len)
}

/// Greedy decoding of a batch of sources (ids without specials). Returns
/// the generated ids without BOS/EOS, at most `max_len` per sentence.
/// Sources longer than the model's `max_len` are truncated; an empty source
/// yields an empty output.
pub fn decode_greedy<T: Scalar>(
    config: &TransformerConfig,
    params: &ModelParams<T>,
    sources: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let vocab = vocab_size(config, params)?;
    greedy_with(config, vocab, &|tape| Ok(Bound::dense(tape, params, false).0), sources, max_len)
}

pub(crate) type Binder<'a, T> = dyn Fn(&mut Tape<T>) -> Result<Bound<T>> + 'a;

pub(crate) fn greedy_with<T: Scalar>(
    config: &TransformerConfig,
    vocab: usize,
    bind: &Binder<'_, T>,
    sources: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let net = Transformer::new(config, vocab);
    let mut out = vec![Vec::new(); sources.len()];
    let nonempty: Vec<usize> = (0..sources.len()).filter(|&i| !sources[i].is_empty()).collect();
    let limit = step_limit(config, max_len);
    for chunk in nonempty.chunks(CHUNK) {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|&i| prepare_source(config, &sources[i])).collect();
        let src = SeqBatch::from_rows(&rows);
        let mut tape = Tape::new();
        let bound = bind(&mut tape)?;
        let memory = net.encode(&mut tape, &bound, &src)?;
        let mark = tape.len();
        let mut generated: Vec<Vec<usize>> = vec![Vec::new(); chunk.len()];
        let mut done = vec![false; chunk.len()];
        for step in 0..limit {
            let tgt_rows: Vec<Vec<usize>> = generated
                .iter()
                .map(|g| {
                    let mut row = vec![BOS];
                    row.extend(g);
                    row.resize(step + 1, BOS);
                    row
                })
                .collect();
            let tgt = SeqBatch::from_rows(&tgt_rows);
            let logits = net.decode(&mut tape, &bound, memory, &src, &tgt)?;
            let values = tape.value(logits).data();
            for (r, g) in generated.iter_mut().enumerate() {
                if done[r] {
                    continue;
                }
                let at = (r * tgt.len + step) * vocab;
                let tok = argmax_tolerant(&values[at..at + vocab]);
                if tok == EOS {
                    done[r] = true;
                } else {
                    g.push(tok);
                }
            }
            tape.truncate(mark);
            if done.iter().all(|&d| d) {
                break;
            }
        }
        for (&i, g) in chunk.iter().zip(generated) {
            out[i] = g;
        }
    }
    Ok(out)
}

fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap()).collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v.iter().map(|x| x - lse).collect()
}

/// Beam search with length-normalized log-probability (score divided by
/// the number of emitted tokens, EOS included). `beam = 1` reproduces
/// [`decode_greedy`] on a single sentence.
pub fn decode_beam<T: Scalar>(
    config: &TransformerConfig,
    params: &ModelParams<T>,
    src: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    if src.is_empty() {
        return Ok(Vec::new());
    }
    let vocab = vocab_size(config, params)?;
    let net = Transformer::new(config, vocab);
    let src_row = prepare_source(config, src);
    let mut tape = Tape::new();
    let (bound, _) = Bound::dense(&mut tape, params, false);
    let single = SeqBatch::from_rows(std::slice::from_ref(&src_row));
    let memory = net.encode(&mut tape, &bound, &single)?;
    let memory_rows = tape.value(memory).data().to_vec();
    let mark = tape.len();

    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64, usize)> = Vec::new();
    for step in 0..step_limit(config, max_len) {
        let n = live.len();
        let src = SeqBatch::from_rows(&vec![src_row.clone(); n]);
        let mem_data: Vec<T> = memory_rows.iter().copied().cycle().take(n * memory_rows.len()).collect();
        let mem = tape.constant(Tensor::new(vec![n * src.len, config.hidden], mem_data)?);
        let tgt_rows: Vec<Vec<usize>> = live
            .iter()
            .map(|(toks, _)| std::iter::once(BOS).chain(toks.iter().copied()).collect())
            .collect();
        let tgt = SeqBatch::from_rows(&tgt_rows);
        let logits = net.decode(&mut tape, &bound, mem, &src, &tgt)?;
        let values = tape.value(logits).data();
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (_, score)) in live.iter().enumerate() {
            let at = (b * tgt.len + step) * vocab;
            let row = &values[at..at + vocab];
            let raw: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap()).collect();
            let logp = log_softmax(row);
            for tok in top_k_tolerant(&raw, beam) {
                candidates.push((b, tok, score + logp[tok]));
            }
        }
        let totals: Vec<f64> = candidates.iter().map(|c| c.2).collect();
        let mut next = Vec::new();
        for k in top_k_tolerant(&totals, beam) {
            let (b, tok, total) = candidates[k];
            let mut toks = live[b].0.clone();
            if tok == EOS {
                let len = toks.len() + 1;
                finished.push((toks, total, len));
            } else {
                toks.push(tok);
                next.push((toks, total));
            }
        }
        tape.truncate(mark);
        live = next;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
    }
    for (toks, score) in live {
        let len = toks.len().max(1);
        finished.push((toks, score, len));
    }
    let normalized: Vec<f64> = finished.iter().map(|(_, s, len)| s / *len as f64).collect();
    let best = top_k_tolerant(&normalized, 1)[0];
    Ok(finished.swap_remove(best).0)
}
