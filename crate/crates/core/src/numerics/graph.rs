//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive in execution order; [`Graph::backward`]
//! sweeps the tape in reverse. Nodes built only from constants are not
//! differentiated.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm, GemmShape};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const LN_EPS: f64 = 1e-5;
const FOCAL_LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Linear(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        shape: GemmShape,
    },
    SplitHeads {
        x: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        heads: usize,
    },
    MaskedSoftmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(usize),
    Dropout {
        x: usize,
        keep: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SoftCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        targets: Arc<Vec<T>>,
        weights: Vec<T>,
    },
    Focal {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        gamma: T,
    },
    ConfidencePenalty {
        logits: usize,
        probs: Vec<T>,
        log_probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        beta: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    graph: u64,
    by_node: Vec<Option<Vec<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.by_node.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter registered with [`Graph::param`]; `None` when
    /// no path connects it to the loss.
    pub fn param(&self, param_id: usize) -> Option<&[T]> {
        self.params
            .get(&param_id)
            .and_then(|&idx| self.by_node[idx].as_deref())
    }
}

pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: HashMap<usize, usize>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout disabled.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(train: bool, seed: u64) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.idx
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Non-differentiated input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Differentiable leaf tied to a parameter id; repeated calls reuse the node.
    pub fn param(&mut self, param_id: usize, t: &Tensor<T>) -> Var {
        if let Some(&idx) = self.params.get(&param_id) {
            return Var {
                graph: self.id,
                idx,
            };
        }
        let v = self.leaf(t.clone());
        self.params.insert(param_id, v.idx);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(t, Op::Add(ia, ib), rg)
    }

    /// Adds a `[n]` row vector to every row of `a` (last dim `n`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(row));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = va.last_dim();
        assert_eq!(vb.len(), n, "add_row: row length");
        let out: Vec<T> = va
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(vb.data()).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(t, Op::AddRow(ia, ib), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(t, Op::Mul(ia, ib), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ia = self.idx(a);
        let va = &self.nodes[ia].value;
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| x * c).collect());
        let rg = self.rg(ia);
        self.push(t, Op::Scale(ia, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Sum(ia), rg)
    }

    /// `x[..., k] @ w[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let (vx, vw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        assert_eq!(vw.shape().len(), 2, "linear: weight must be 2-D");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.last_dim(), k, "linear: inner dimension");
        let m = vx.len() / k;
        let mut out = vec![T::zero(); m * n];
        let shape = GemmShape {
            batch: 1,
            m,
            k,
            n,
            trans_a: false,
            trans_b: false,
        };
        gemm(shape, vx.data(), vw.data(), &mut out, false);
        let mut oshape = vx.shape().to_vec();
        *oshape.last_mut().unwrap() = n;
        let rg = self.rg(ix) || self.rg(iw);
        self.push(Tensor::from_parts(oshape, out), Op::Linear(ix, iw), rg)
    }

    /// Batched `op(a) @ op(b)` over 3-D tensors.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert_eq!(va.shape().len(), 3, "bmm: lhs must be 3-D");
        assert_eq!(vb.shape().len(), 3, "bmm: rhs must be 3-D");
        let batch = va.shape()[0];
        assert_eq!(vb.shape()[0], batch, "bmm: batch");
        let (m, k) = if trans_a {
            (va.shape()[2], va.shape()[1])
        } else {
            (va.shape()[1], va.shape()[2])
        };
        let (k2, n) = if trans_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        assert_eq!(k, k2, "bmm: inner dimension");
        let shape = GemmShape {
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        };
        let mut out = vec![T::zero(); batch * m * n];
        gemm(shape, va.data(), vb.data(), &mut out, false);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::Bmm { a: ia, b: ib, shape },
            rg,
        )
    }

    /// `[B, L, H*D] -> [B*H, L, D]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let ix = self.idx(x);
        let vx = &self.nodes[ix].value;
        let (b, l, hd) = dims3(vx.shape());
        assert_eq!(hd % heads, 0, "split_heads: width not divisible");
        let d = hd / heads;
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let s = (bi * l + li) * hd + h * d;
                    let o = ((bi * heads + h) * l + li) * d;
                    out[o..o + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let rg = self.rg(ix);
        self.push(
            Tensor::from_parts(vec![b * heads, l, d], out),
            Op::SplitHeads { x: ix, heads },
            rg,
        )
    }

    /// `[B*H, L, D] -> [B, L, H*D]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let ix = self.idx(x);
        let vx = &self.nodes[ix].value;
        let (bh, l, d) = dims3(vx.shape());
        let b = bh / heads;
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        merge_into(src, &mut out, b, heads, l, d);
        let rg = self.rg(ix);
        self.push(
            Tensor::from_parts(vec![b, l, heads * d], out),
            Op::MergeHeads { x: ix, heads },
            rg,
        )
    }

    /// Softmax over the last axis of `[B*H, Lq, Lk]` scores; `blocked` is a
    /// `[B, Lq, Lk]` mask (true = blocked) shared by all heads. Blocked entries
    /// come out exactly 0; a fully blocked row yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, blocked: &[bool], heads: usize) -> Var {
        let ix = self.idx(x);
        let vx = &self.nodes[ix].value;
        let (bh, lq, lk) = dims3(vx.shape());
        assert_eq!(blocked.len(), (bh / heads) * lq * lk, "masked_softmax: mask size");
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for r in 0..bh * lq {
            let bi = r / lq / heads;
            let qi = r % lq;
            let mrow = &blocked[(bi * lq + qi) * lk..(bi * lq + qi + 1) * lk];
            let row = &src[r * lk..(r + 1) * lk];
            let orow = &mut out[r * lk..(r + 1) * lk];
            let mut max = T::neg_infinity();
            for (j, &z) in row.iter().enumerate() {
                if !mrow[j] && z > max {
                    max = z;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..lk {
                if !mrow[j] {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.rg(ix);
        self.push(
            Tensor::from_parts(vec![bh, lq, lk], out),
            Op::MaskedSoftmax { x: ix },
            rg,
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (ix, ig, ib) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let vx = &self.nodes[ix].value;
        let n = vx.last_dim();
        let g = self.nodes[ig].value.data();
        let bt = self.nodes[ib].value.data();
        assert_eq!(g.len(), n, "layer_norm: gamma length");
        assert_eq!(bt.len(), n, "layer_norm: beta length");
        let rows = vx.len() / n;
        let nf = T::from_usize_lossy(n);
        let eps = T::from_f64_lossy(LN_EPS);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + bt[j];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        self.push(
            Tensor::from_parts(vx.shape().to_vec(), out),
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let vx = &self.nodes[ix].value;
        let out: Vec<T> = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.rg(ix);
        self.push(Tensor::from_parts(vx.shape().to_vec(), out), Op::Gelu(ix), rg)
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let ix = self.idx(x);
        let n = self.nodes[ix].value.len();
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let vx = &self.nodes[ix].value;
        let out: Vec<T> = vx.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(ix);
        self.push(t, Op::Dropout { x: ix, keep }, rg)
    }

    /// Gathers rows of a `[V, d]` table; output shape is `shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let it = self.idx(table);
        let vt = &self.nodes[it].value;
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::ShapeMismatch("embedding: ids vs shape".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(vt.row(id));
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let rg = self.rg(it);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `sum_r weights[r] * (-sum_k targets[r,k] * log softmax(logits[r])_k)`.
    ///
    /// `targets` is a dense `[rows, V]` matrix treated as a constant.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<Vec<T>>,
        weights: &[T],
    ) -> Result<Var> {
        let il = self.idx(logits);
        let vl = &self.nodes[il].value;
        let v = vl.last_dim();
        let rows = vl.len() / v;
        if targets.len() != rows * v || weights.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "soft_cross_entropy: {} rows x {} classes vs {} targets, {} weights",
                rows,
                v,
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = vec![T::zero(); vl.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = vl.row(r);
            let (lse, max) = log_sum_exp(row);
            let q = &targets[r * v..(r + 1) * v];
            let mut row_loss = T::zero();
            for k in 0..v {
                let lp = row[k] - max - lse;
                probs[r * v + k] = lp.exp();
                if q[k] != T::zero() {
                    row_loss -= q[k] * lp;
                }
            }
            if weights[r] != T::zero() {
                loss += weights[r] * row_loss;
            }
        }
        let rg = self.rg(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: il,
                probs,
                targets,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted focal loss `-(1 - p_t)^gamma * log p_t`, with `log` floored at 1e-12.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        gamma: T,
    ) -> Result<Var> {
        let il = self.idx(logits);
        let vl = &self.nodes[il].value;
        let v = vl.last_dim();
        let rows = vl.len() / v;
        check_rows(rows, targets.len(), weights.len())?;
        let mut probs = vec![T::zero(); vl.len()];
        let mut loss = T::zero();
        let floor = T::from_f64_lossy(FOCAL_LOG_FLOOR).ln();
        for r in 0..rows {
            let row = vl.row(r);
            let (lse, max) = log_sum_exp(row);
            for k in 0..v {
                probs[r * v + k] = (row[k] - max - lse).exp();
            }
            if weights[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            let lt = (row[t] - max - lse).max(floor);
            let pt = probs[r * v + t];
            loss += weights[r] * -(T::one() - pt).powf(gamma) * lt;
        }
        let rg = self.rg(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits: il,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                gamma,
            },
            rg,
        ))
    }

    /// Weighted `CE(p, target) - beta * H(p)`.
    pub fn confidence_penalty(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        beta: T,
    ) -> Result<Var> {
        let il = self.idx(logits);
        let vl = &self.nodes[il].value;
        let v = vl.last_dim();
        let rows = vl.len() / v;
        check_rows(rows, targets.len(), weights.len())?;
        let mut probs = vec![T::zero(); vl.len()];
        let mut log_probs = vec![T::zero(); vl.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = vl.row(r);
            let (lse, max) = log_sum_exp(row);
            let mut h = T::zero();
            for k in 0..v {
                let lp = row[k] - max - lse;
                let p = lp.exp();
                log_probs[r * v + k] = lp;
                probs[r * v + k] = p;
                if p > T::zero() {
                    h -= p * lp;
                }
            }
            if weights[r] != T::zero() {
                loss += weights[r] * (-log_probs[r * v + targets[r]] - beta * h);
            }
        }
        let rg = self.rg(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::ConfidencePenalty {
                logits: il,
                probs,
                log_probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                beta,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Untraced(
                "loss was not produced by this graph".into(),
            ));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::one()]);
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            graph: self.id,
            by_node: grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in &[*a, *b] {
                    if self.rg(j) {
                        add_into(slot(grads, j, gy.len()), gy);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*a) {
                    add_into(slot(grads, *a, gy.len()), gy);
                }
                if self.rg(*b) {
                    let n = self.nodes[*b].value.len();
                    let g = slot(grads, *b, n);
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.rg(*a) {
                    let g = slot(grads, *a, gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] * vb[k];
                    }
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] * va[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                let g = slot(grads, *a, gy.len());
                for k in 0..gy.len() {
                    g[k] += gy[k] * *c;
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                let g = slot(grads, *a, n);
                for v in g.iter_mut() {
                    *v += gy[0];
                }
            }
            Op::Linear(x, w) => {
                let vx = &self.nodes[*x].value;
                let vw = &self.nodes[*w].value;
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.len() / k;
                if self.rg(*x) {
                    let shape = GemmShape { batch: 1, m, k: n, n: k, trans_a: false, trans_b: true };
                    gemm(shape, gy, vw.data(), slot(grads, *x, m * k), true);
                }
                if self.rg(*w) {
                    let shape = GemmShape { batch: 1, m: k, k: m, n, trans_a: true, trans_b: false };
                    gemm(shape, vx.data(), gy, slot(grads, *w, k * n), true);
                }
            }
            Op::Bmm { a, b, shape } => {
                let s = *shape;
                let va = self.nodes[*a].value.data();
                let vb = self.nodes[*b].value.data();
                if self.rg(*a) {
                    let g = slot(grads, *a, va.len());
                    if !s.trans_a {
                        let sh = GemmShape { batch: s.batch, m: s.m, k: s.n, n: s.k, trans_a: false, trans_b: !s.trans_b };
                        gemm(sh, gy, vb, g, true);
                    } else {
                        let sh = GemmShape { batch: s.batch, m: s.k, k: s.n, n: s.m, trans_a: s.trans_b, trans_b: true };
                        gemm(sh, vb, gy, g, true);
                    }
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, vb.len());
                    if !s.trans_b {
                        let sh = GemmShape { batch: s.batch, m: s.k, k: s.m, n: s.n, trans_a: !s.trans_a, trans_b: false };
                        gemm(sh, va, gy, g, true);
                    } else {
                        let sh = GemmShape { batch: s.batch, m: s.n, k: s.m, n: s.k, trans_a: true, trans_b: s.trans_a };
                        gemm(sh, gy, va, g, true);
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                // inverse of split is merge
                let (bh, l, d) = dims3(node.value.shape());
                let mut tmp = vec![T::zero(); gy.len()];
                merge_into(gy, &mut tmp, bh / heads, *heads, l, d);
                add_into(slot(grads, *x, gy.len()), &tmp);
            }
            Op::MergeHeads { x, heads } => {
                let (b, l, hd) = dims3(node.value.shape());
                let d = hd / heads;
                let g = slot(grads, *x, gy.len());
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let s = (bi * l + li) * hd + h * d;
                            let o = ((bi * heads + h) * l + li) * d;
                            for t in 0..d {
                                g[o + t] += gy[s + t];
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let y = node.value.data();
                let lk = node.value.last_dim();
                let g = slot(grads, *x, gy.len());
                for r in 0..y.len() / lk {
                    let yr = &y[r * lk..(r + 1) * lk];
                    let gr = &gy[r * lk..(r + 1) * lk];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..lk {
                        g[r * lk + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = node.value.last_dim();
                let rows = gy.len() / n;
                let gv = self.nodes[*gamma].value.data();
                if self.rg(*gamma) {
                    let g = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += gy[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let g = slot(grads, *beta, n);
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += gy[r * n + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let nf = T::from_usize_lossy(n);
                    let g = slot(grads, *x, gy.len());
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = gy[r * n + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dh = gy[r * n + j] * gv[j];
                            g[r * n + j] +=
                                inv_std[r] / nf * (nf * dh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.nodes[*x].value.data();
                let g = slot(grads, *x, gy.len());
                for k in 0..gy.len() {
                    g[k] += gy[k] * gelu_grad(vx[k]);
                }
            }
            Op::Dropout { x, keep } => {
                let g = slot(grads, *x, gy.len());
                for k in 0..gy.len() {
                    g[k] += gy[k] * keep[k];
                }
            }
            Op::Embedding { table, ids } => {
                let vt = &self.nodes[*table].value;
                let d = vt.shape()[1];
                let g = slot(grads, *table, vt.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                }
            }
            Op::SoftCrossEntropy { logits, probs, targets, weights } => {
                let v = self.nodes[*logits].value.last_dim();
                let g = slot(grads, *logits, probs.len());
                for (r, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let q = &targets[r * v..(r + 1) * v];
                    let mass: T = q.iter().copied().sum();
                    let c = gy[0] * w;
                    for k in 0..v {
                        g[r * v + k] += c * (probs[r * v + k] * mass - q[k]);
                    }
                }
            }
            Op::Focal { logits, probs, targets, weights, gamma } => {
                let v = self.nodes[*logits].value.last_dim();
                let floor = T::from_f64_lossy(FOCAL_LOG_FLOOR);
                let g = slot(grads, *logits, probs.len());
                for (r, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let t = targets[r];
                    let pt = probs[r * v + t];
                    let one_m = T::one() - pt;
                    // dL/dz_j = c * (delta_tj - p_j)
                    let modulating = one_m.powf(*gamma);
                    let log_term = if pt > floor {
                        let lt = pt.ln();
                        if one_m > T::zero() {
                            *gamma * one_m.powf(*gamma - T::one()) * pt * lt
                        } else {
                            T::zero()
                        }
                    } else {
                        T::zero()
                    };
                    let dlog = if pt > floor { modulating } else { T::zero() };
                    let c = gy[0] * w * (log_term - dlog);
                    for k in 0..v {
                        let delta = if k == t { T::one() } else { T::zero() };
                        g[r * v + k] += c * (delta - probs[r * v + k]);
                    }
                }
            }
            Op::ConfidencePenalty { logits, probs, log_probs, targets, weights, beta } => {
                let v = self.nodes[*logits].value.last_dim();
                let g = slot(grads, *logits, probs.len());
                for (r, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let p = &probs[r * v..(r + 1) * v];
                    let lp = &log_probs[r * v..(r + 1) * v];
                    let h: T = p
                        .iter()
                        .zip(lp)
                        .filter(|(&pv, _)| pv > T::zero())
                        .map(|(&pv, &l)| -pv * l)
                        .sum();
                    let c = gy[0] * w;
                    for k in 0..v {
                        let delta = if k == targets[r] { T::one() } else { T::zero() };
                        let ent = if p[k] > T::zero() { p[k] * (lp[k] + h) } else { T::zero() };
                        g[r * v + k] += c * (p[k] - delta + *beta * ent);
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, n: usize) -> &mut Vec<T> {
    grads[j].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected a 3-D tensor, got {:?}", s);
    (s[0], s[1], s[2])
}

fn merge_into<T: Scalar>(src: &[T], out: &mut [T], b: usize, heads: usize, l: usize, d: usize) {
    let hd = heads * d;
    for bi in 0..b {
        for li in 0..l {
            for h in 0..heads {
                let s = ((bi * heads + h) * l + li) * d;
                let o = (bi * l + li) * hd + h * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
}

fn check_rows(rows: usize, targets: usize, weights: usize) -> Result<()> {
    if targets != rows || weights != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} targets, {} weights",
            rows, targets, weights
        )));
    }
    Ok(())
}

/// Returns `(ln sum exp(row - max), max)`.
fn log_sum_exp<T: Scalar>(row: &[T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&z| (z - max).exp()).sum();
    (s.ln(), max)
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
