//! Define-by-run computation tape.
//!
//! Every builder method computes its value eagerly and records how to push a
//! gradient back to its inputs. Only the operations needed by the dialogue
//! models are supported; all of them work on 2-D `[rows, cols]` tensors.

use crate::error::{NeuralError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask applied to the `[queries × keys]` score matrix.
#[derive(Debug, Clone)]
pub enum Mask<T> {
    None,
    /// Query `i` sees keys `0..=i + (keys - queries)`.
    Causal,
    /// Added to the scores; use `-inf` to forbid a key.
    Additive(Vec<T>),
}

impl<T: Real> Mask<T> {
    /// Builds an additive mask from an allow-list, row-major `[queries × keys]`.
    pub fn from_allowed(allowed: &[bool]) -> Self {
        Mask::Additive(
            allowed
                .iter()
                .map(|&a| if a { T::zero() } else { T::neg_infinity() })
                .collect(),
        )
    }
}

const LN_EPS: f64 = 1e-5;
const UL_CLAMP: f64 = 1e-6;

enum Val<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    MeanRows { a: Var },
    ScaleRows { a: Var, s: Var },
    Transpose { a: Var },
    SoftmaxRows { a: Var },
    Nll { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
    Unlikelihood { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
    Sum { a: Var },
}

struct Node<'a, T> {
    val: Val<'a, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape bound to one parameter store.
pub struct Graph<'a, T: Real> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<'a, T>>,
    param_vars: Vec<Option<Var>>,
    clamp_events: usize,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            clamp_events: 0,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].val {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }

    /// Number of unlikelihood probabilities clamped away from 1 so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            val: Val::Owned(t),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; gradients stop here.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            val: Val::Borrowed(self.store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(NeuralError::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b: false },
            ng,
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(NeuralError::Shape(format!(
                "matmul_bt [{m},{k}] x [{n},{k2}]^T"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            1,
            k,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b: true },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NeuralError::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, ng))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NeuralError::Shape(format!(
                "mul {:?} * {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, ng))
    }

    /// Broadcasts a `[1, n]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(NeuralError::Shape(format!(
                "add_row [{m},{n}] + {:?}",
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| *x + *y))
            .collect();
        let ng = self.ng(&[a, row]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow { a, row }, ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| *x * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale { a, c }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu { a }, ng)
    }

    /// Row-wise normalisation to zero mean and unit variance (ε = 1e-5),
    /// followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(NeuralError::Shape("layer_norm affine size".into()));
        }
        let eps = T::of(LN_EPS);
        let nt = T::of(n as f64);
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gs[c] + bs[c];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`,
    /// split into `heads` equal column blocks. The per-head weights are
    /// retrievable with [`Graph::attention_weights`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &Mask<T>,
    ) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if heads == 0 || d % heads != 0 || dk != d || dv != d || nv != nk {
            return Err(NeuralError::Shape(format!(
                "attention q[{nq},{d}] k[{nk},{dk}] v[{nv},{dv}] heads {heads}"
            )));
        }
        if let Mask::Additive(m) = mask {
            if m.len() != nq * nk {
                return Err(NeuralError::Shape(format!(
                    "mask has {} entries, expected {nq}x{nk}",
                    m.len()
                )));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            T::gemm(
                nq,
                dh,
                nk,
                scale,
                &qd[h * dh..],
                d,
                1,
                &kd[h * dh..],
                1,
                d,
                T::zero(),
                p,
                nk,
                1,
            );
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                match mask {
                    Mask::None => {}
                    Mask::Causal => {
                        let limit = i + nk.saturating_sub(nq);
                        for (j, s) in row.iter_mut().enumerate() {
                            if j > limit {
                                *s = T::neg_infinity();
                            }
                        }
                    }
                    Mask::Additive(m) => {
                        for (s, a) in row.iter_mut().zip(&m[i * nk..(i + 1) * nk]) {
                            *s += *a;
                        }
                    }
                }
                softmax_in_place(row);
            }
            T::gemm(
                nq,
                nk,
                dh,
                T::one(),
                p,
                nk,
                1,
                &vd[h * dh..],
                d,
                1,
                T::zero(),
                &mut out[h * dh..],
                d,
                1,
            );
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// `[heads × queries × keys]` weights of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(&[T], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                q, k, heads, probs, ..
            } => Some((
                probs.as_slice(),
                *heads,
                self.value(*q).rows(),
                self.value(*k).rows(),
            )),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NeuralError::Shape(format!("row {bad} out of range {m}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if na != nb {
            return Err(NeuralError::Shape(format!("concat [{ma},{na}] [{mb},{nb}]")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![ma + mb, na], data)?,
            Op::ConcatRows { a, b },
            ng,
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); n];
        for r in 0..m {
            for c in 0..n {
                data[c] += src[r * n + c];
            }
        }
        let inv = T::one() / T::of(m.max(1) as f64);
        data.iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![1, n], data).unwrap(), Op::MeanRows { a }, ng)
    }

    /// Multiplies row `r` of `a` by `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(s).len() != m {
            return Err(NeuralError::Shape(format!(
                "scale_rows [{m},{n}] by {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x * sv[i / n])
            .collect();
        let ng = self.ng(&[a, s]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ScaleRows { a, s }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![n, m], data).unwrap(), Op::Transpose { a }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![m, n], data).unwrap(), Op::SoftmaxRows { a }, ng)
    }

    /// Σ −log softmax(logits[row])[class] over `(row, class)` targets.
    pub fn nll_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(targets.len() * n);
        let mut loss = T::zero();
        for &(r, c) in targets {
            if r >= m || c >= n {
                return Err(NeuralError::Shape(format!(
                    "target ({r},{c}) outside [{m},{n}]"
                )));
            }
            let mut row = src[r * n..(r + 1) * n].to_vec();
            let lse = log_sum_exp(&row);
            loss += lse - row[c];
            softmax_in_place(&mut row);
            probs.extend(row);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::new(vec![1, 1], vec![loss])?,
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Σ −log(1 − p) for the softmax probability `p` of each target; `p` is
    /// clamped to at most `1 − 1e-6` and every clamp is counted.
    pub fn unlikelihood_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(targets.len() * n);
        let mut loss = T::zero();
        let cap = T::one() - T::of(UL_CLAMP);
        let mut clamps = 0;
        for &(r, c) in targets {
            if r >= m || c >= n {
                return Err(NeuralError::Shape(format!(
                    "target ({r},{c}) outside [{m},{n}]"
                )));
            }
            let mut row = src[r * n..(r + 1) * n].to_vec();
            softmax_in_place(&mut row);
            let mut p = row[c];
            if p > cap {
                p = cap;
                clamps += 1;
            }
            loss -= (T::one() - p).ln();
            probs.extend(row);
        }
        self.clamp_events += clamps;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::new(vec![1, 1], vec![loss])?,
            Op::Unlikelihood {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![1, 1], vec![s]).unwrap(), Op::Sum { a }, ng)
    }

    /// Reverse pass from a scalar node. Returns per-parameter gradients; the
    /// store is left untouched so callers decide when to accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NeuralError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out)?;
        }
        Ok(Gradients { per_param: out })
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.store.value(*id).shape();
                match &mut out[id.0] {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(g) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g.to_vec())?),
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = self.value(Var(i)).cols();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, m * k);
                    if *trans_b {
                        // dA = dC · B, B is [n,k]
                        T::gemm(m, n, k, T::one(), g, n, 1, bd, k, 1, T::one(), ga, k, 1);
                    } else {
                        // dA = dC · Bᵀ, B is [k,n]
                        T::gemm(m, n, k, T::one(), g, n, 1, bd, 1, n, T::one(), ga, k, 1);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = slot(grads, *b, k * n);
                    if *trans_b {
                        // dB = dCᵀ · A, [n,k]
                        T::gemm(n, m, k, T::one(), g, 1, n, ad, k, 1, T::one(), gb, k, 1);
                    } else {
                        // dB = Aᵀ · dC, [k,n]
                        T::gemm(k, m, n, T::one(), ad, 1, k, g, n, 1, T::one(), gb, n, 1);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.nodes[v.0].needs_grad {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (x, y) in [(a, b), (b, a)] {
                    if self.nodes[x.0].needs_grad {
                        let other = self.value(*y).data().to_vec();
                        let gx = slot(grads, *x, g.len());
                        for ((acc, gi), o) in gx.iter_mut().zip(g).zip(&other) {
                            *acc += *gi * *o;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                if self.nodes[a.0].needs_grad {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.nodes[row.0].needs_grad {
                    let n = self.value(*row).len();
                    let gr = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += *y * *c;
                    }
                }
            }
            Op::Relu { a } => {
                if self.nodes[a.0].needs_grad {
                    let av = self.value(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(av) {
                        if *z > T::zero() {
                            *x += *y;
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
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.nodes[gain.0].needs_grad {
                    let gg = slot(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = slot(grads, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let nt = T::of(n as f64);
                    let gx = slot(grads, *x, m * n);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= nt;
                        mean_dx /= nt;
                        for c in 0..n {
                            gx[r * n + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, probs, grads),
            Op::GatherRows { a, idx } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.dims(*a);
                    let ga = slot(grads, *a, m * n);
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let la = self.value(*a).len();
                if self.nodes[a.0].needs_grad {
                    add_into(slot(grads, *a, la), &g[..la]);
                }
                if self.nodes[b.0].needs_grad {
                    add_into(slot(grads, *b, g.len() - la), &g[la..]);
                }
            }
            Op::MeanRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.dims(*a);
                    let inv = T::one() / T::of(m.max(1) as f64);
                    let ga = slot(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c] * inv;
                        }
                    }
                }
            }
            Op::ScaleRows { a, s } => {
                let (m, n) = self.dims(*a);
                if self.nodes[a.0].needs_grad {
                    let sv = self.value(*s).data();
                    let ga = slot(grads, *a, m * n);
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * sv[idx / n];
                    }
                }
                if self.nodes[s.0].needs_grad {
                    let av = self.value(*a).data();
                    let gs = slot(grads, *s, m);
                    for r in 0..m {
                        let mut acc = T::zero();
                        for c in 0..n {
                            acc += g[r * n + c] * av[r * n + c];
                        }
                        gs[r] += acc;
                    }
                }
            }
            Op::Transpose { a } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.dims(*a);
                    let ga = slot(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[a.0].needs_grad {
                    let (m, n) = self.dims(*a);
                    let y = self.value(Var(i)).data();
                    let ga = slot(grads, *a, m * n);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| *a * *b)
                            .sum();
                        for c in row {
                            ga[c] += y[c] * (g[c] - dot);
                        }
                    }
                }
            }
            Op::Nll {
                logits,
                targets,
                probs,
            } => {
                if self.nodes[logits.0].needs_grad {
                    let (m, n) = self.dims(*logits);
                    let gl = slot(grads, *logits, m * n);
                    for (t, &(r, c)) in targets.iter().enumerate() {
                        let p = &probs[t * n..(t + 1) * n];
                        for j in 0..n {
                            let onehot = if j == c { T::one() } else { T::zero() };
                            gl[r * n + j] += g[0] * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::Unlikelihood {
                logits,
                targets,
                probs,
            } => {
                if self.nodes[logits.0].needs_grad {
                    let (m, n) = self.dims(*logits);
                    let cap = T::one() - T::of(UL_CLAMP);
                    let gl = slot(grads, *logits, m * n);
                    for (t, &(r, c)) in targets.iter().enumerate() {
                        let p = &probs[t * n..(t + 1) * n];
                        let pc = p[c].min(cap);
                        let w = g[0] * pc / (T::one() - pc);
                        for j in 0..n {
                            let onehot = if j == c { T::one() } else { T::zero() };
                            gl[r * n + j] += w * (onehot - p[j]);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if self.nodes[a.0].needs_grad {
                    let n = self.value(*a).len();
                    let ga = slot(grads, *a, n);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (nq, d) = self.dims(q);
        let nk = self.value(k).rows();
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let (gq_on, gk_on, gv_on) = (
            self.nodes[q.0].needs_grad,
            self.nodes[k.0].needs_grad,
            self.nodes[v.0].needs_grad,
        );
        let mut dp = vec![T::zero(); nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            if gv_on {
                let gvv = slot(grads, v, nk * d);
                T::gemm(
                    nk,
                    nq,
                    dh,
                    T::one(),
                    p,
                    1,
                    nk,
                    &g[h * dh..],
                    d,
                    1,
                    T::one(),
                    &mut gvv[h * dh..],
                    d,
                    1,
                );
            }
            if !(gq_on || gk_on) {
                continue;
            }
            T::gemm(
                nq,
                dh,
                nk,
                T::one(),
                &g[h * dh..],
                d,
                1,
                &vd[h * dh..],
                1,
                d,
                T::zero(),
                &mut dp,
                nk,
                1,
            );
            for i in 0..nq {
                let row = i * nk..(i + 1) * nk;
                let dot: T = dp[row.clone()]
                    .iter()
                    .zip(&p[row.clone()])
                    .map(|(a, b)| *a * *b)
                    .sum();
                for j in row {
                    dp[j] = p[j] * (dp[j] - dot);
                }
            }
            if gq_on {
                let gqq = slot(grads, q, nq * d);
                T::gemm(
                    nq,
                    nk,
                    dh,
                    scale,
                    &dp,
                    nk,
                    1,
                    &kd[h * dh..],
                    d,
                    1,
                    T::one(),
                    &mut gqq[h * dh..],
                    d,
                    1,
                );
            }
            if gk_on {
                let gkk = slot(grads, k, nk * d);
                T::gemm(
                    nk,
                    nq,
                    dh,
                    scale,
                    &dp,
                    1,
                    nk,
                    &qd[h * dh..],
                    d,
                    1,
                    T::one(),
                    &mut gkk[h * dh..],
                    d,
                    1,
                );
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

/// Numerically stable in-place softmax. A row of all `-inf` becomes zeros.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|x| (*x - max).exp()).sum::<T>().ln()
}

pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| *x - lse).collect()
}
