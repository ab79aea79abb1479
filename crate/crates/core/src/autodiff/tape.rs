use std::sync::Arc;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Broadcast {
    Same,
    /// `b` repeats every `len` elements of `a`.
    Suffix(usize),
    /// Offset into `b` for every element of `a`.
    General(Vec<usize>),
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add {
        a: usize,
        b: usize,
        plan: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<bool>,
        epsilon: T,
        probs: Vec<T>,
        count: usize,
    },
    CsrLinear {
        x: usize,
        matrix: Arc<CsrMatrix<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in creation order, so the inputs of any node always
/// have smaller ids and a reverse sweep over the node list is a valid
/// topological order for backpropagation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            rng: None,
        }
    }

    /// Training tape: dropout masks are drawn from an RNG seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Drops every node created after the first `len`, e.g. to reuse an
    /// encoded prefix across decoding steps.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// 2-D product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// 2-D product `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    /// Batched product over matching leading dimensions, with optional
    /// transposition of either operand's trailing matrix.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.matmul_general(a, b, ta, tb)
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = op_dims(sa[r - 2], sa[r - 1], ta);
        let (kb, n) = op_dims(sb[r - 2], sb[r - 1], tb);
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        gemm_batched(
            batch,
            self.value(a).data(),
            (sa[r - 2], sa[r - 1]),
            ta,
            self.value(b).data(),
            (sb[r - 2], sb[r - 1]),
            tb,
            &mut out,
            false,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// `a + b`, where `b` broadcasts onto the shape of `a` (numpy rules,
    /// aligned on trailing axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = broadcast_plan(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<T> = match &plan {
            Broadcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Broadcast::Suffix(len) => {
                let mut out = Vec::with_capacity(av.len());
                for chunk in av.data().chunks(*len) {
                    out.extend(chunk.iter().zip(bv).map(|(&x, &y)| x + y));
                }
                out
            }
            Broadcast::General(offsets) => av
                .data()
                .iter()
                .zip(offsets)
                .map(|(&x, &o)| x + bv[o])
                .collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0, plan }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale { a: a.0, factor }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Relu { a: a.0 }, rg)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Softmax { a: a.0 }, rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias` (both shaped `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::from_usize(d).unwrap();
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[vocab, d]` table; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() {
            return Err(Error::Shape {
                op: "embedding",
                left: tv.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 || self.rng.is_none() {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = T::from_f64_lossy(1.0 / keep);
        let threshold = (keep * 4_294_967_296.0).min(u32::MAX as f64) as u32;
        let n = self.value(a).len();
        let rng = self.rng.as_mut().expect("training tape");
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.next_u32() < threshold {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Dropout { a: a.0, mask }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape { a: a.0 }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape {
                op: "permute",
                left: shape,
                right: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let (map, block) = permute_blocks(&shape, perm);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        for &o in &map {
            data.extend_from_slice(&src[o..o + block]);
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            value,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: self.shape(a).to_vec(),
                right: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                left: first,
                right: vec![axis],
            });
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::Shape {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: ids, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    /// Label-smoothed cross entropy averaged over the positions where
    /// `weights` is true.
    ///
    /// The smoothed target puts `1 - epsilon` on the gold token and spreads
    /// `epsilon` uniformly over the whole vocabulary (gold slot included).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[bool],
        epsilon: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Invalid(format!(
                "label smoothing {epsilon} outside [0, 1)"
            )));
        }
        let vocab = lv.shape()[1];
        let eps = T::from_f64_lossy(epsilon);
        let uniform = eps / T::from_usize(vocab).unwrap();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, row) in lv.data().chunks(vocab).enumerate() {
            let t = targets[r];
            if !weights[r] {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    index: t,
                    size: vocab,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let mut sum_logp = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let logp = v - lse;
                sum_logp += logp;
                probs[r * vocab + j] = logp.exp();
            }
            let gold = row[t] - lse;
            total -= (T::one() - eps) * gold + uniform * sum_logp;
            count += 1;
        }
        let loss = if count > 0 {
            total / T::from_usize(count).unwrap()
        } else {
            T::zero()
        };
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                epsilon: eps,
                probs,
                count,
            },
            rg,
        ))
    }

    /// `x · Mᵀ` with `M` stored in CSR form, i.e. each row of `x` goes
    /// through a sparse matrix-vector product. The matrix is a constant.
    pub fn csr_linear(&mut self, x: Var, matrix: Arc<CsrMatrix<T>>) -> Result<Var> {
        let xv = self.value(x);
        let d_in = xv.last_dim();
        if d_in != matrix.cols() {
            return Err(Error::Shape {
                op: "csr_linear",
                left: xv.shape().to_vec(),
                right: vec![matrix.rows(), matrix.cols()],
            });
        }
        let d_out = matrix.rows();
        let mut out = vec![T::zero(); xv.len() / d_in * d_out];
        for (xr, yr) in xv.data().chunks(d_in).zip(out.chunks_mut(d_out)) {
            matrix.matvec_into(xr, yr);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::CsrLinear { x: x.0, matrix }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.shape(loss) != [1] {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf if n.requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let r = sa.len();
                let batch: usize = sa[..r - 2].iter().product();
                let (ar, ac) = (sa[r - 2], sa[r - 1]);
                let (br, bc) = (sb[r - 2], sb[r - 1]);
                let (m, _) = op_dims(ar, ac, *ta);
                let (_, n) = op_dims(br, bc, *tb);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    if *ta {
                        gemm_batched(batch, bv, (br, bc), *tb, g, (m, n), true, ga, true);
                    } else {
                        gemm_batched(batch, g, (m, n), false, bv, (br, bc), !*tb, ga, true);
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    if *tb {
                        gemm_batched(batch, g, (m, n), true, av, (ar, ac), *ta, gb, true);
                    } else {
                        gemm_batched(batch, av, (ar, ac), !*ta, g, (m, n), false, gb, true);
                    }
                }
            }
            Op::Add { a, b, plan } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    match plan {
                        Broadcast::Same => add_into(gb, g),
                        Broadcast::Suffix(len) => {
                            for chunk in g.chunks(*len) {
                                add_into(gb, chunk);
                            }
                        }
                        Broadcast::General(offsets) => {
                            for (&o, &v) in offsets.iter().zip(g) {
                                gb[o] += v;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                }
            }
            Op::Relu { a } => {
                let av = self.nodes[*a].value.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.nodes[*gain].value.data();
                if let Some(gg) = self.accumulate(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gbias) = self.accumulate(grads, *bias) {
                    for gr in g.chunks(d) {
                        add_into(gbias, gr);
                    }
                }
                if let Some(gx) = self.accumulate(grads, *x) {
                    let dn = T::from_usize(d).unwrap();
                    for (r, ((gr, hr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (gr, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], gr);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((d, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Permute { a, perm } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                if let Some(ga) = self.accumulate(grads, *a) {
                    let (map, block) = permute_blocks(&shape, perm);
                    for (&o, gb) in map.iter().zip(g.chunks(block)) {
                        add_into(&mut ga[o..o + block], gb);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.nodes[p].value.shape()[*axis] * inner;
                    if let Some(gp) = self.accumulate(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                epsilon,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.nodes[*logits].value.last_dim();
                let scale = g[0] / T::from_usize(*count).unwrap();
                let uniform = *epsilon / T::from_usize(vocab).unwrap();
                let gold = T::one() - *epsilon;
                if let Some(gl) = self.accumulate(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if !w {
                            continue;
                        }
                        for j in 0..vocab {
                            let q = if j == t { gold + uniform } else { uniform };
                            gl[r * vocab + j] += scale * (probs[r * vocab + j] - q);
                        }
                    }
                }
            }
            Op::CsrLinear { x, matrix } => {
                let d_out = matrix.rows();
                let d_in = matrix.cols();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (gr, dr) in g.chunks(d_out).zip(gx.chunks_mut(d_in)) {
                        matrix.matvec_transpose_acc(gr, dr);
                    }
                }
            }
        }
    }
}

/// Gradients of leaf parameters produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf; `None` when the loss did not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned vector, zero-filled for unreachable leaves.
    pub fn dense(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_dims(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

/// `out (+)= op(x) · op(y)` for `batch` consecutive matrix pairs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_batched<T: Scalar>(
    batch: usize,
    x: &[T],
    (xr, xc): (usize, usize),
    tx: bool,
    y: &[T],
    (yr, yc): (usize, usize),
    ty: bool,
    out: &mut [T],
    accumulate: bool,
) {
    let (m, k) = op_dims(xr, xc, tx);
    let (_, n) = op_dims(yr, yc, ty);
    let (rsx, csx) = if tx { (1, xc as isize) } else { (xc as isize, 1) };
    let (rsy, csy) = if ty { (1, yc as isize) } else { (yc as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    let (xs, ys, os) = (xr * xc, yr * yc, m * n);
    for b in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &x[b * xs..(b + 1) * xs],
            rsx,
            csx,
            &y[b * ys..(b + 1) * ys],
            rsy,
            csy,
            beta,
            &mut out[b * os..(b + 1) * os],
            n as isize,
            1,
        );
    }
}

fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let err = || Error::Shape {
        op: "add",
        left: a.to_vec(),
        right: b.to_vec(),
    };
    let lead = b.iter().take_while(|&&d| d == 1).count();
    let core = &b[lead..];
    if core.len() <= a.len() && a[a.len() - core.len()..] == *core {
        return Ok(Broadcast::Suffix(core.iter().product()));
    }
    if b.len() > a.len() {
        return Err(err());
    }
    let offset = a.len() - b.len();
    let mut strides = vec![0usize; a.len()];
    let mut s = 1;
    for i in (0..b.len()).rev() {
        let (bd, ad) = (b[i], a[i + offset]);
        if bd == ad {
            strides[i + offset] = s;
        } else if bd != 1 {
            return Err(err());
        }
        s *= bd;
    }
    Ok(Broadcast::General(strided_offsets(a, &strides)))
}

/// For every element of a row-major array of shape `shape` (in order),
/// the offset `Σ index[i] * strides[i]`.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Like [`permute_offsets`], but trailing axes that stay in place are kept
/// together as contiguous blocks of the returned length.
fn permute_blocks(shape: &[usize], perm: &[usize]) -> (Vec<usize>, usize) {
    let mut k = shape.len();
    while k > 0 && perm[k - 1] == k - 1 {
        k -= 1;
    }
    let block: usize = shape[k..].iter().product();
    let offsets = permute_offsets(&shape[..k], &perm[..k]);
    (offsets.into_iter().map(|o| o * block).collect(), block)
}

/// Input offsets, in output order, for permuting `shape` by `perm`.
fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut in_strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    strided_offsets(&out_shape, &strides)
}
