//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation executed through it in order. Calling
//! [`Graph::backward`] walks that record in reverse and accumulates adjoints
//! into each node that requires a gradient. Accumulation order is the tape
//! order, so gradients are bit-reproducible. One graph per training step.

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, silu, softplus, Scalar};
use crate::ssm;
use crate::tensor::{gemm, log_softmax, numel, softmax_in_place, MatRef, Tensor};
use crate::transformer::{causal_attention_core, rotate_pairs};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Exp,
    Log,
    Softplus,
    Silu,
    Sigmoid,
    Neg,
    Scale(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Head layout of a fused causal attention call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionShape<T> {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub scale: T,
}

/// Head layout of a fused selective scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanShape {
    pub heads: usize,
    pub channels: usize,
    pub state: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    HeadMatMul {
        x: Var,
        w: Var,
        heads: usize,
    },
    Binary(Binary, Var, Var),
    Unary(Unary<T>, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape<T>,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        head_dim: usize,
        base: f64,
        offset: usize,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SsmScan {
        x: Var,
        b: Var,
        c: Var,
        delta: Var,
        a: Var,
        h0: Option<Var>,
        shape: ScanShape,
        states: Vec<T>,
    },
    KdLoss {
        logits: Var,
        row_offset: usize,
        targets: Vec<usize>,
        teacher_probs: Vec<T>,
        student_probs: Vec<T>,
        alpha: T,
        beta: T,
    },
    SeqLogProb {
        logits: Var,
        row_offset: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input; it participates in differentiation iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient buffer of `v` after [`Graph::backward`], if one was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Copies the node value into a detached leaf (gradient stops here).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone().with_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(av.data(), m, k), MatRef::new(bv.data(), k, n), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Block-diagonal product: `x` is `R × H·N`, `w` is `H × N × M`; head `h`
    /// of every row is multiplied by its own `N × M` matrix, giving `R × H·M`.
    pub fn head_matmul(&mut self, x: Var, w: Var, heads: usize) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let ws = wv.shape();
        if ws.len() != 3 || ws[0] != heads || xv.cols() != heads * ws[1] {
            return Err(shape_err("head_matmul", xv, wv));
        }
        let (n, m, r) = (ws[1], ws[2], xv.rows());
        let mut out = vec![T::zero(); r * heads * m];
        for row in 0..r {
            for h in 0..heads {
                let xs = &xv.data()[row * heads * n + h * n..row * heads * n + (h + 1) * n];
                let o = &mut out[row * heads * m + h * m..row * heads * m + (h + 1) * m];
                crate::tensor::vec_mat(xs, &wv.data()[h * n * m..(h + 1) * n * m], o);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new([r, heads * m], out)?, Op::HeadMatMul { x, w, heads }, rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        // Trailing-dimension broadcast only: the shorter shape must be a suffix.
        let out_shape = if sa.len() >= sb.len() && sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.len() > sa.len() && sb.ends_with(sa) {
            sb.to_vec()
        } else {
            return Err(shape_err(name, av, bv));
        };
        let n = numel(&out_shape);
        let (ad, bd) = (av.data(), bv.data());
        let (la, lb) = (ad.len().max(1), bd.len().max(1));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary<T>, x: Var) -> Var {
        let f = |v: T| match op {
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Softplus => softplus(v),
            Unary::Silu => silu(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Neg => -v,
            Unary::Scale(c) => c * v,
        };
        let out = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(out, Op::Unary(op, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t.with_grad(false), Op::Reshape(x), rg))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    /// NaN inputs propagate NaN through the affected row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone().with_grad(false);
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_exact_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (rows, v) = (lv.rows(), lv.cols());
        if rows != targets.len() {
            return Err(Error::LengthMismatch {
                what: "cross_entropy rows vs targets",
                left: rows,
                right: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let mut probs = vec![T::zero(); rows * v];
        let mut loss = T::zero();
        for r in 0..rows {
            let out = &mut probs[r * v..(r + 1) * v];
            log_softmax(lv.row(r), out);
            loss -= out[targets[r]];
            for p in out.iter_mut() {
                *p = p.exp();
            }
        }
        let loss = loss / T::lit(rows.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `x / rms(x) * w` over the last axis.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let d = xv.cols();
        if wv.shape() != [d] {
            return Err(shape_err("rms_norm", xv, wv));
        }
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for (r, o) in out.chunks_exact_mut(d).enumerate() {
            let row = xv.row(r);
            let ms = row.iter().map(|&a| a * a).sum::<T>() / T::lit(d as f64);
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &a), &g) in o.iter_mut().zip(row).zip(wv.data()) {
                *o = a * inv * g;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// Gathers rows of `table` (`V × D`) into a `T × D` tensor.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (v, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new([ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Causal softmax attention with grouped key/value heads.
    ///
    /// `q`: `T × H·N`; `k`, `v`: `T × Hkv·N`. Output `T × H·N`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape<T>) -> Result<Var> {
        let AttentionShape {
            heads,
            kv_heads,
            head_dim: n,
            scale,
        } = shape;
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let t = qv.rows();
        if kv_heads == 0
            || heads % kv_heads != 0
            || qv.cols() != heads * n
            || kv.cols() != kv_heads * n
            || kv.shape() != vv.shape()
            || kv.rows() != t
        {
            return Err(shape_err("causal_attention", qv, kv));
        }
        let (out, probs) = causal_attention_core(qv.data(), kv.data(), vv.data(), t, heads, kv_heads, n, scale);
        let qw = heads * n;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new([t, qw], out)?, Op::Attention { q, k, v, shape, probs }, rg))
    }

    /// Rotary position embedding on `T × heads·head_dim`, rows starting at `offset`.
    pub fn rope(&mut self, x: Var, heads: usize, head_dim: usize, base: f64, offset: usize) -> Var {
        let mut out = self.nodes[x.0].value.clone().with_grad(false);
        let w = heads * head_dim;
        for (t, row) in out.data_mut().chunks_exact_mut(w).enumerate() {
            for h in row.chunks_exact_mut(head_dim) {
                rotate_pairs(h, offset + t, base, false);
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::Rope {
                x,
                heads,
                head_dim,
                base,
                offset,
            },
            rg,
        )
    }

    /// Depthwise causal convolution (no activation). `x`: `T × C`,
    /// `w`: `C × L` with tap `L-1` on the current position, `b`: `C`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let c = xv.cols();
        if wv.rows() != c || bv.shape() != [c] {
            return Err(shape_err("causal_conv", xv, wv));
        }
        let out = ssm::causal_conv_full(xv.data(), c, wv.data(), wv.cols(), bv.data());
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::CausalConv { x, w, b }, rg))
    }

    /// Selective scan over all heads of a layer.
    ///
    /// `x`: `T × H·N`; `b`, `c`, `delta`: `T × H·N'`; `a`: `H × N × N'`
    /// (continuous-time, negative); optional `h0`: `H × N × N'`.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(&mut self, x: Var, b: Var, c: Var, delta: Var, a: Var, h0: Option<Var>, shape: ScanShape) -> Result<Var> {
        let ScanShape { heads, channels, state } = shape;
        let xv = &self.nodes[x.0].value;
        let t = xv.rows();
        let check = |v: Var, cols: usize| {
            let tv = &self.nodes[v.0].value;
            tv.rows() == t && tv.cols() == cols
        };
        let av = &self.nodes[a.0].value;
        let hs = heads * channels * state;
        if xv.cols() != heads * channels
            || !check(b, heads * state)
            || !check(c, heads * state)
            || !check(delta, heads * state)
            || av.len() != hs
            || h0.is_some_and(|h| self.nodes[h.0].value.len() != hs)
        {
            return Err(shape_err("ssm_scan", xv, av));
        }
        let h0_data = h0.map(|h| self.nodes[h.0].value.data());
        let (y, states) = ssm::scan_forward(
            xv.data(),
            self.nodes[b.0].value.data(),
            self.nodes[c.0].value.data(),
            self.nodes[delta.0].value.data(),
            av.data(),
            h0_data,
            t,
            shape,
        );
        let rg = [x, b, c, delta, a].iter().any(|&v| self.rg(v)) || h0.is_some_and(|h| self.rg(h));
        Ok(self.push(
            Tensor::new([t, heads * channels], y)?,
            Op::SsmScan {
                x,
                b,
                c,
                delta,
                a,
                h0,
                shape,
                states,
            },
            rg,
        ))
    }

    /// Final recurrent state of a scan node (`H × N × N'`).
    pub fn scan_final_state(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::SsmScan { shape, states, .. } => {
                let hs = shape.heads * shape.channels * shape.state;
                Some(&states[states.len() - hs..])
            }
            _ => None,
        }
    }

    /// Combined sequence-level and word-level distillation loss.
    ///
    /// Rows `row_offset .. row_offset + targets.len()` of `logits` predict the
    /// continuation; all other rows (the prompt) are ignored. Per row:
    /// `alpha * CE(target) + beta * KL(teacher || student)`, averaged over rows.
    pub fn kd_loss(&mut self, logits: Var, row_offset: usize, targets: &[usize], teacher_probs: &[T], alpha: T, beta: T) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let v = lv.cols();
        let rows = targets.len();
        if row_offset + rows > lv.rows() {
            return Err(Error::LengthMismatch {
                what: "kd_loss continuation rows vs logits rows",
                left: row_offset + rows,
                right: lv.rows(),
            });
        }
        if teacher_probs.len() != rows * v {
            return Err(Error::LengthMismatch {
                what: "kd_loss teacher probabilities",
                left: teacher_probs.len(),
                right: rows * v,
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let mut student_probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for r in 0..rows {
            let logp = &mut student_probs[r * v..(r + 1) * v];
            log_softmax(lv.row(row_offset + r), logp);
            let pt = &teacher_probs[r * v..(r + 1) * v];
            let mut kl = T::zero();
            for (&p, &lq) in pt.iter().zip(logp.iter()) {
                if p > T::zero() {
                    kl += p * (p.ln() - lq);
                }
            }
            total += beta * kl - alpha * logp[targets[r]];
            for l in logp.iter_mut() {
                *l = l.exp();
            }
        }
        let loss = if rows == 0 { T::zero() } else { total / T::lit(rows as f64) };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KdLoss {
                logits,
                row_offset,
                targets: targets.to_vec(),
                teacher_probs: teacher_probs.to_vec(),
                student_probs,
                alpha,
                beta,
            },
            rg,
        ))
    }

    /// Sum of log-probabilities of `targets` read from rows starting at `row_offset`.
    pub fn sequence_log_prob(&mut self, logits: Var, row_offset: usize, targets: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let v = lv.cols();
        if row_offset + targets.len() > lv.rows() {
            return Err(Error::LengthMismatch {
                what: "sequence_log_prob rows",
                left: row_offset + targets.len(),
                right: lv.rows(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let mut probs = vec![T::zero(); targets.len() * v];
        let mut total = T::zero();
        for (r, &tgt) in targets.iter().enumerate() {
            let out = &mut probs[r * v..(r + 1) * v];
            log_softmax(lv.row(row_offset + r), out);
            total += out[tgt];
            for p in out.iter_mut() {
                *p = p.exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SeqLogProb {
                logits,
                row_offset,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Populates `grad` on every node reachable from `loss` that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Returns the zero-initialised accumulator of `v`, or None when `v`
        // does not take part in differentiation.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        let out = &nodes[id].value;
        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = acc!(a) {
                    gemm(MatRef::new(g, m, n), MatRef::new(bv.data(), k, n).t(), ga, true);
                }
                if let Some(gb) = acc!(b) {
                    gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(g, m, n), gb, true);
                }
            }
            &Op::HeadMatMul { x, w, heads } => {
                let (xv, wv) = (val(x), val(w));
                let (n, m) = (wv.shape()[1], wv.shape()[2]);
                let r = xv.rows();
                if let Some(gx) = acc!(x) {
                    for row in 0..r {
                        for h in 0..heads {
                            let gr = &g[row * heads * m + h * m..row * heads * m + (h + 1) * m];
                            for i in 0..n {
                                let wr = &wv.data()[h * n * m + i * m..h * n * m + (i + 1) * m];
                                gx[row * heads * n + h * n + i] += crate::tensor::dot(gr, wr);
                            }
                        }
                    }
                }
                if let Some(gw) = acc!(w) {
                    for row in 0..r {
                        for h in 0..heads {
                            let gr = &g[row * heads * m + h * m..row * heads * m + (h + 1) * m];
                            for i in 0..n {
                                let xi = xv.data()[row * heads * n + h * n + i];
                                let dst = &mut gw[h * n * m + i * m..h * n * m + (i + 1) * m];
                                for (e, &gg) in dst.iter_mut().zip(gr) {
                                    *e += xi * gg;
                                }
                            }
                        }
                    }
                }
            }
            &Op::Binary(kind, a, b) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                let (la, lb) = (ad.len().max(1), bd.len().max(1));
                if let Some(ga) = acc!(a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % la] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bd[i % lb],
                        };
                    }
                }
                if let Some(gb) = acc!(b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % lb] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * ad[i % la],
                        };
                    }
                }
            }
            &Op::Unary(op, x) => {
                let xd = val(x).data();
                let yd = out.data();
                if let Some(gx) = acc!(x) {
                    for i in 0..g.len() {
                        let d = match op {
                            Unary::Exp => yd[i],
                            Unary::Log => T::one() / xd[i],
                            Unary::Softplus => sigmoid(xd[i]),
                            Unary::Silu => {
                                let s = sigmoid(xd[i]);
                                s * (T::one() + xd[i] * (T::one() - s))
                            }
                            Unary::Sigmoid => yd[i] * (T::one() - yd[i]),
                            Unary::Neg => -T::one(),
                            Unary::Scale(c) => c,
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = acc!(x) {
                    for e in gx.iter_mut() {
                        *e += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = acc!(x) {
                    let s = g[0] / T::lit(gx.len() as f64);
                    for e in gx.iter_mut() {
                        *e += s;
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = acc!(x) {
                    for (e, &gi) in gx.iter_mut().zip(g) {
                        *e += gi;
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if let Some(gx) = acc!(x) {
                    let c = out.cols();
                    for ((gr, yr), xr) in g.chunks_exact(c).zip(out.data().chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((e, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *e += yi * (gi - s);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gx) = acc!(*logits) {
                    let v = val(*logits).cols();
                    let s = g[0] / T::lit(targets.len().max(1) as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gx[r * v + c] += s * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (xv, wv) = (val(*x), val(*w));
                let d = xv.cols();
                if let Some(gx) = acc!(*x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let dotp: T = (0..d).map(|i| gr[i] * wv.data()[i] * xr[i]).sum();
                        let k = inv * inv * inv * dotp / T::lit(d as f64);
                        for i in 0..d {
                            gx[r * d + i] += inv * gr[i] * wv.data()[i] - k * xr[i];
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        for i in 0..d {
                            gw[i] += g[r * d + i] * xr[i] * inv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = acc!(*table) {
                    let d = val(*table).cols();
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let AttentionShape {
                    heads,
                    kv_heads,
                    head_dim: n,
                    scale,
                } = *shape;
                let group = heads / kv_heads;
                let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
                let t = val(q).rows();
                let (qw, kw) = (heads * n, kv_heads * n);
                // dS for every (h, i, u); computed once, consumed by q and k.
                let mut ds = vec![T::zero(); heads * t * t];
                let mut gv_local = vec![T::zero(); t * kw];
                for h in 0..heads {
                    let gh = h / group;
                    for i in 0..t {
                        let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let go = &g[i * qw + h * n..i * qw + (h + 1) * n];
                        let dsr = &mut ds[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let mut s = T::zero();
                        for (u, &pu) in p.iter().enumerate() {
                            let vu = &vd[u * kw + gh * n..u * kw + (gh + 1) * n];
                            let dp = crate::tensor::dot(go, vu);
                            dsr[u] = dp;
                            s += pu * dp;
                            let gvu = &mut gv_local[u * kw + gh * n..u * kw + (gh + 1) * n];
                            for (e, &x) in gvu.iter_mut().zip(go) {
                                *e += pu * x;
                            }
                        }
                        for (d, &pu) in dsr.iter_mut().zip(p) {
                            *d = pu * (*d - s);
                        }
                    }
                }
                if let Some(gv) = acc!(v) {
                    for (e, &x) in gv.iter_mut().zip(&gv_local) {
                        *e += x;
                    }
                }
                if let Some(gq) = acc!(q) {
                    for h in 0..heads {
                        let gh = h / group;
                        for i in 0..t {
                            let dsr = &ds[(h * t + i) * t..(h * t + i) * t + i + 1];
                            let gqi = &mut gq[i * qw + h * n..i * qw + (h + 1) * n];
                            for (u, &d) in dsr.iter().enumerate() {
                                let ku = &kd[u * kw + gh * n..u * kw + (gh + 1) * n];
                                for (e, &x) in gqi.iter_mut().zip(ku) {
                                    *e += scale * d * x;
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = acc!(k) {
                    for h in 0..heads {
                        let gh = h / group;
                        for i in 0..t {
                            let dsr = &ds[(h * t + i) * t..(h * t + i) * t + i + 1];
                            let qi = &qd[i * qw + h * n..i * qw + (h + 1) * n];
                            for (u, &d) in dsr.iter().enumerate() {
                                let gku = &mut gk[u * kw + gh * n..u * kw + (gh + 1) * n];
                                for (e, &x) in gku.iter_mut().zip(qi) {
                                    *e += scale * d * x;
                                }
                            }
                        }
                    }
                }
            }
            &Op::Rope {
                x,
                heads,
                head_dim,
                base,
                offset,
            } => {
                if let Some(gx) = acc!(x) {
                    let w = heads * head_dim;
                    let mut tmp = g.to_vec();
                    for (t, row) in tmp.chunks_exact_mut(w).enumerate() {
                        for h in row.chunks_exact_mut(head_dim) {
                            rotate_pairs(h, offset + t, base, true);
                        }
                    }
                    for (e, &x) in gx.iter_mut().zip(&tmp) {
                        *e += x;
                    }
                }
            }
            &Op::CausalConv { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (c, l) = (xv.cols(), wv.cols());
                let t = xv.rows();
                if let Some(gb) = acc!(b) {
                    for row in g.chunks_exact(c) {
                        for (e, &x) in gb.iter_mut().zip(row) {
                            *e += x;
                        }
                    }
                }
                if let Some(gw) = acc!(w) {
                    for ti in 0..t {
                        for tap in 0..l {
                            let Some(src) = (ti + tap + 1).checked_sub(l) else { continue };
                            for ch in 0..c {
                                gw[ch * l + tap] += g[ti * c + ch] * xv.data()[src * c + ch];
                            }
                        }
                    }
                }
                if let Some(gx) = acc!(x) {
                    for ti in 0..t {
                        for tap in 0..l {
                            let Some(src) = (ti + tap + 1).checked_sub(l) else { continue };
                            for ch in 0..c {
                                gx[src * c + ch] += g[ti * c + ch] * wv.data()[ch * l + tap];
                            }
                        }
                    }
                }
            }
            Op::SsmScan {
                x,
                b,
                c,
                delta,
                a,
                h0,
                shape,
                states,
            } => {
                let t = val(*x).rows();
                let grads_out = ssm::scan_backward(
                    g,
                    val(*x).data(),
                    val(*b).data(),
                    val(*c).data(),
                    val(*delta).data(),
                    val(*a).data(),
                    states,
                    t,
                    *shape,
                );
                let pairs = [
                    (*x, &grads_out.x),
                    (*b, &grads_out.b),
                    (*c, &grads_out.c),
                    (*delta, &grads_out.delta),
                    (*a, &grads_out.a),
                ];
                for (v, gsrc) in pairs {
                    if let Some(gd) = acc!(v) {
                        for (e, &x) in gd.iter_mut().zip(gsrc.iter()) {
                            *e += x;
                        }
                    }
                }
                if let Some(h0) = *h0 {
                    if let Some(gd) = acc!(h0) {
                        for (e, &x) in gd.iter_mut().zip(&grads_out.h0) {
                            *e += x;
                        }
                    }
                }
            }
            Op::KdLoss {
                logits,
                row_offset,
                targets,
                teacher_probs,
                student_probs,
                alpha,
                beta,
            } => {
                if let Some(gx) = acc!(*logits) {
                    let v = val(*logits).cols();
                    let rows = targets.len();
                    if rows > 0 {
                        let s = g[0] / T::lit(rows as f64);
                        for (r, &tgt) in targets.iter().enumerate() {
                            let base = (row_offset + r) * v;
                            for col in 0..v {
                                let ps = student_probs[r * v + col];
                                let pt = teacher_probs[r * v + col];
                                let onehot = if col == tgt { T::one() } else { T::zero() };
                                gx[base + col] += s * (*alpha * (ps - onehot) + *beta * (ps - pt));
                            }
                        }
                    }
                }
            }
            Op::SeqLogProb {
                logits,
                row_offset,
                targets,
                probs,
            } => {
                if let Some(gx) = acc!(*logits) {
                    let v = val(*logits).cols();
                    for (r, &tgt) in targets.iter().enumerate() {
                        let base = (row_offset + r) * v;
                        for col in 0..v {
                            let onehot = if col == tgt { T::one() } else { T::zero() };
                            gx[base + col] += g[0] * (onehot - probs[r * v + col]);
                        }
                    }
                }
            }
        }
    }
}
