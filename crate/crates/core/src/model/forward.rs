use std::collections::HashMap;
use std::sync::Arc;

use super::build::{
    is_vocab_matrix, OUTPUT_PROJECTION, SHARED_EMBEDDING, SOURCE_EMBEDDING, TARGET_EMBEDDING,
};
use super::{ModelParams, TransformerConfig};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pruning::SparsityMasks;
use crate::sparse::CsrMatrix;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const LN_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;

/// Padded `[batch, len]` block of token ids (padding id 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; rows.len() * len];
        for (r, row) in rows.iter().enumerate() {
            ids[r * len..r * len + row.len()].copy_from_slice(row);
        }
        SeqBatch {
            ids,
            batch: rows.len(),
            len,
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    pub fn non_pad(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }
}

/// A training example block: source, decoder input (BOS-prefixed) and
/// decoder target (EOS-suffixed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: SeqBatch,
    pub tgt_in: SeqBatch,
    pub tgt_out: SeqBatch,
}

impl Batch {
    /// Builds a batch from token sequences without special tokens.
    pub fn from_pairs(pairs: &[(&[usize], &[usize])]) -> Self {
        let src: Vec<Vec<usize>> = pairs.iter().map(|(s, _)| with_eos(s)).collect();
        let tgt_in: Vec<Vec<usize>> = pairs
            .iter()
            .map(|(_, t)| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let tgt_out: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| with_eos(t)).collect();
        Batch {
            src: SeqBatch::from_rows(&src),
            tgt_in: SeqBatch::from_rows(&tgt_in),
            tgt_out: SeqBatch::from_rows(&tgt_out),
        }
    }
}

pub(crate) fn with_eos(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// How one named weight enters the graph.
pub enum Weight<T: Scalar> {
    Dense(Var),
    /// CSR storage. Linear weights `[in, out]` are stored transposed
    /// (`[out, in]`); vocabulary matrices `[vocab, d]` as-is.
    Sparse(Arc<CsrMatrix<T>>),
}

/// Parameters placed on a tape.
pub struct Bound<T: Scalar> {
    weights: HashMap<String, Weight<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Places every tensor on the tape, trainable or constant.
    pub fn dense(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> (Self, Vec<Var>) {
        let mut weights = HashMap::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            weights.insert(name.to_string(), Weight::Dense(v));
        }
        (Bound { weights }, vars)
    }

    /// Binds existing tape variables, one per tensor in `params` order.
    pub fn from_vars(params: &ModelParams<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        let weights = params
            .iter()
            .zip(vars)
            .map(|((name, _), &v)| (name.to_string(), Weight::Dense(v)))
            .collect();
        Ok(Bound { weights })
    }

    /// Dense tensors on the tape except the given CSR matrices.
    pub fn with_sparse(
        tape: &mut Tape<T>,
        params: &ModelParams<T>,
        sparse: &HashMap<String, Arc<CsrMatrix<T>>>,
    ) -> Self {
        let mut weights = HashMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let w = match sparse.get(name) {
                Some(m) => Weight::Sparse(m.clone()),
                None => Weight::Dense(tape.constant(t.clone())),
            };
            weights.insert(name.to_string(), w);
        }
        Bound { weights }
    }

    fn get(&self, name: &str) -> Result<&Weight<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    fn dense_var(&self, name: &str) -> Result<Var> {
        match self.get(name)? {
            Weight::Dense(v) => Ok(*v),
            Weight::Sparse(_) => Err(Error::Invalid(format!("{name} must be dense"))),
        }
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        match self.get(name)? {
            Weight::Dense(w) => tape.matmul(x, *w),
            Weight::Sparse(m) => tape.csr_linear(x, m.clone()),
        }
    }

    fn embed(&self, tape: &mut Tape<T>, name: &str, ids: &[usize]) -> Result<Var> {
        match self.get(name)? {
            Weight::Dense(table) => tape.embedding(*table, ids),
            Weight::Sparse(m) => {
                let d = m.cols();
                let mut data = vec![T::zero(); ids.len() * d];
                for (i, &id) in ids.iter().enumerate() {
                    if id >= m.rows() {
                        return Err(Error::Index {
                            index: id,
                            size: m.rows(),
                        });
                    }
                    for (c, v) in m.row(id) {
                        data[i * d + c] = v;
                    }
                }
                Ok(tape.constant(Tensor::new(vec![ids.len(), d], data)?))
            }
        }
    }

    /// `h · Eᵀ` for a `[vocab, d]` matrix `E`.
    fn project_vocab(&self, tape: &mut Tape<T>, h: Var, name: &str) -> Result<Var> {
        match self.get(name)? {
            Weight::Dense(e) => tape.matmul_nt(h, *e),
            Weight::Sparse(m) => tape.csr_linear(h, m.clone()),
        }
    }
}

/// CSR forms of all masked prunable matrices, laid out for [`Bound::with_sparse`].
pub fn sparse_weights<T: Scalar>(
    params: &ModelParams<T>,
    masks: &SparsityMasks,
) -> Result<HashMap<String, Arc<CsrMatrix<T>>>> {
    let mut out = HashMap::new();
    for (name, t) in params.prunable() {
        let mask = masks.get(name);
        let csr = if is_vocab_matrix(name) {
            CsrMatrix::from_masked(t, mask)?
        } else {
            CsrMatrix::from_masked_transposed(t, mask)?
        };
        out.insert(name.to_string(), Arc::new(csr));
    }
    Ok(out)
}

/// Sinusoidal position table `[len, d]`: sines on the first half of the
/// channels, cosines on the second.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut data = vec![T::zero(); len * d];
    let log_increment = if half > 1 {
        (10_000f64).ln() / (half as f64 - 1.0)
    } else {
        0.0
    };
    for pos in 0..len {
        for i in 0..half {
            let angle = pos as f64 * (-(i as f64) * log_increment).exp();
            data[pos * d + i] = T::from_f64_lossy(angle.sin());
            data[pos * d + half + i] = T::from_f64_lossy(angle.cos());
        }
    }
    Tensor::new(vec![len, d], data).expect("positive dims")
}

/// Forward pass of the encoder-decoder (pre-norm residual blocks).
pub struct Transformer<'a> {
    pub config: &'a TransformerConfig,
    pub vocab_size: usize,
}

impl<'a> Transformer<'a> {
    pub fn new(config: &'a TransformerConfig, vocab_size: usize) -> Self {
        Transformer { config, vocab_size }
    }

    fn source_table(&self) -> &'static str {
        if self.config.shared_embeddings {
            SHARED_EMBEDDING
        } else {
            SOURCE_EMBEDDING
        }
    }

    fn target_table(&self) -> &'static str {
        if self.config.shared_embeddings {
            SHARED_EMBEDDING
        } else {
            TARGET_EMBEDDING
        }
    }

    fn output_table(&self) -> &'static str {
        if self.config.shared_embeddings {
            SHARED_EMBEDDING
        } else {
            OUTPUT_PROJECTION
        }
    }

    fn dropout<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        tape.dropout(x, self.config.dropout)
    }

    fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        table: &str,
        seq: &SeqBatch,
    ) -> Result<Var> {
        if seq.len > self.config.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_len {}",
                seq.len, self.config.max_len
            )));
        }
        let d = self.config.hidden;
        let e = bound.embed(tape, table, &seq.ids)?;
        let e = tape.scale(e, T::from_f64_lossy((d as f64).sqrt()));
        let e = tape.reshape(e, &[seq.batch, seq.len, d])?;
        let pe = tape.constant(positional_encoding(seq.len, d));
        let x = tape.add(e, pe)?;
        let x = tape.reshape(x, &[seq.batch * seq.len, d])?;
        Ok(self.dropout(tape, x))
    }

    fn layer_norm<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let g = bound.dense_var(&format!("{prefix}.gain"))?;
        let b = bound.dense_var(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, T::from_f64_lossy(LN_EPS))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        prefix: &str,
        query_in: Var,
        kv_in: Var,
        batch: usize,
        (tq, tk): (usize, usize),
        bias: Var,
    ) -> Result<Var> {
        let (d, h) = (self.config.hidden, self.config.heads);
        let dh = d / h;
        let split = |tape: &mut Tape<T>, x: Var, t: usize| -> Result<Var> {
            let x = tape.reshape(x, &[batch, t, h, dh])?;
            tape.permute(x, &[0, 2, 1, 3])
        };
        let q = bound.linear(tape, query_in, &format!("{prefix}.query"))?;
        let k = bound.linear(tape, kv_in, &format!("{prefix}.key"))?;
        let v = bound.linear(tape, kv_in, &format!("{prefix}.value"))?;
        let (q, k, v) = (split(tape, q, tq)?, split(tape, k, tk)?, split(tape, v, tk)?);
        let scores = tape.batch_matmul(q, k, false, true)?;
        let scores = tape.scale(scores, T::from_f64_lossy((dh as f64).powf(-0.5)));
        let scores = tape.add(scores, bias)?;
        let weights = tape.softmax(scores);
        let ctx = tape.batch_matmul(weights, v, false, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch * tq, d])?;
        bound.linear(tape, ctx, &format!("{prefix}.output"))
    }

    fn feed_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let h = bound.linear(tape, x, &format!("{prefix}.inner"))?;
        let h = tape.add(h, bound.dense_var(&format!("{prefix}.inner_bias"))?)?;
        let h = tape.relu(h);
        let h = self.dropout(tape, h);
        let o = bound.linear(tape, h, &format!("{prefix}.outer"))?;
        tape.add(o, bound.dense_var(&format!("{prefix}.outer_bias"))?)
    }

    /// `pre-norm → sublayer → dropout → residual add`.
    fn residual<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        sublayer_out: Var,
    ) -> Result<Var> {
        let y = self.dropout(tape, sublayer_out);
        tape.add(x, y)
    }

    /// `[batch, 1, 1, len]` additive bias hiding padded keys.
    fn padding_bias<T: Scalar>(&self, tape: &mut Tape<T>, seq: &SeqBatch) -> Result<Var> {
        let data = seq
            .ids
            .iter()
            .map(|&t| T::from_f64_lossy(if t == PAD { MASKED } else { 0.0 }))
            .collect();
        Ok(tape.constant(Tensor::new(vec![seq.batch, 1, 1, seq.len], data)?))
    }

    fn causal_bias<T: Scalar>(&self, tape: &mut Tape<T>, len: usize) -> Result<Var> {
        let mut data = vec![T::zero(); len * len];
        for i in 0..len {
            for j in i + 1..len {
                data[i * len + j] = T::from_f64_lossy(MASKED);
            }
        }
        Ok(tape.constant(Tensor::new(vec![1, 1, len, len], data)?))
    }

    /// Encoder states `[batch * src_len, hidden]`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        src: &SeqBatch,
    ) -> Result<Var> {
        let bias = self.padding_bias(tape, src)?;
        let mut x = self.embed(tape, bound, self.source_table(), src)?;
        for l in 0..self.config.layers {
            let p = format!("encoder.{l}");
            let h = self.layer_norm(tape, bound, &format!("{p}.self_attn_norm"), x)?;
            let a = self.attention(
                tape,
                bound,
                &format!("{p}.self_attn"),
                h,
                h,
                src.batch,
                (src.len, src.len),
                bias,
            )?;
            x = self.residual(tape, x, a)?;
            let h = self.layer_norm(tape, bound, &format!("{p}.ffn_norm"), x)?;
            let f = self.feed_forward(tape, bound, &format!("{p}.ffn"), h)?;
            x = self.residual(tape, x, f)?;
        }
        self.layer_norm(tape, bound, "encoder.final_norm", x)
    }

    /// Decoder logits `[batch * tgt_len, vocab]`.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        memory: Var,
        src: &SeqBatch,
        tgt_in: &SeqBatch,
    ) -> Result<Var> {
        if tgt_in.batch != src.batch {
            return Err(Error::Shape {
                op: "decode",
                left: vec![src.batch, src.len],
                right: vec![tgt_in.batch, tgt_in.len],
            });
        }
        let self_bias = self.causal_bias(tape, tgt_in.len)?;
        let cross_bias = self.padding_bias(tape, src)?;
        let mut x = self.embed(tape, bound, self.target_table(), tgt_in)?;
        let lens = (tgt_in.len, src.len);
        for l in 0..self.config.layers {
            let p = format!("decoder.{l}");
            let h = self.layer_norm(tape, bound, &format!("{p}.self_attn_norm"), x)?;
            let a = self.attention(
                tape,
                bound,
                &format!("{p}.self_attn"),
                h,
                h,
                tgt_in.batch,
                (tgt_in.len, tgt_in.len),
                self_bias,
            )?;
            x = self.residual(tape, x, a)?;
            let h = self.layer_norm(tape, bound, &format!("{p}.cross_attn_norm"), x)?;
            let a = self.attention(
                tape,
                bound,
                &format!("{p}.cross_attn"),
                h,
                memory,
                tgt_in.batch,
                lens,
                cross_bias,
            )?;
            x = self.residual(tape, x, a)?;
            let h = self.layer_norm(tape, bound, &format!("{p}.ffn_norm"), x)?;
            let f = self.feed_forward(tape, bound, &format!("{p}.ffn"), h)?;
            x = self.residual(tape, x, f)?;
        }
        let h = self.layer_norm(tape, bound, "decoder.final_norm", x)?;
        bound.project_vocab(tape, h, self.output_table())
    }

    /// Label-smoothed cross entropy over the non-padding target positions.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound<T>, batch: &Batch) -> Result<Var> {
        let memory = self.encode(tape, bound, &batch.src)?;
        let logits = self.decode(tape, bound, memory, &batch.src, &batch.tgt_in)?;
        let weights: Vec<bool> = batch.tgt_out.ids.iter().map(|&t| t != PAD).collect();
        tape.cross_entropy(logits, &batch.tgt_out.ids, &weights, self.config.label_smoothing)
    }
}
