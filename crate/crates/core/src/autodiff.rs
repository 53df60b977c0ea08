//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append a node whose inputs all have smaller indices, so the node list is
//! already in topological order and [`Tape::backward`] is a single reverse
//! sweep.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Bmm {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        pad: u32,
        eps: T,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph plus gradient buffers.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Resolves a binary broadcast. The smaller operand, after dropping leading
/// unit axes, must equal a trailing block of the larger one.
fn broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        &s[lead.min(s.len().saturating_sub(1))..]
    }
    if a == b {
        return Ok(a.to_vec());
    }
    let (sa, sb) = (strip(a), strip(b));
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small, big_full) = if na >= nb { (sa, sb, a) } else { (sb, sa, b) };
    if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
        Ok(big_full.to_vec())
    } else {
        Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

/// Flat input index for every flat output index of a permutation.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf backed by a shared buffer; no copy is made.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears all gradient buffers so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    // ---- linear algebra ----

    /// 2-D product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.bmm_raw(a, b, 1, m, k, n, false, vec![m, n])
    }

    /// Batched product over a leading group axis: `a[g×m×k] · b[g×k×n]`,
    /// or `a · bᵀ` with `b[g×n×k]` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || {
            Error::dim(format!(
                "bmm of {sa:?} and {sb:?} (transpose_b={transpose_b})"
            ))
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(bad());
        }
        self.bmm_raw(a, b, g, m, k, n, transpose_b, vec![g, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_raw(
        &mut self,
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            let am = MatRef::dense(&ad[g * m * k..(g + 1) * m * k], m, k);
            let bs = &bd[g * k * n..(g + 1) * k * n];
            let bm = if transpose_b {
                MatRef::dense_t(bs, n, k)
            } else {
                MatRef::dense(bs, k, n)
            };
            gemm(am, bm, T::zero(), &mut out[g * m * n..(g + 1) * m * n]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Bmm {
                a,
                b,
                groups,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        ))
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let shape = broadcast(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (ad.len(), bd.len());
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| f(ad[i % la], bd[i % lb])).collect();
        Ok((Tensor::new(shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale { x, c }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| {
            // split by sign so exp never overflows
            if e >= T::zero() {
                T::one() / (T::one() + (-e).exp())
            } else {
                let z = e.exp();
                z / (T::one() + z)
            }
        });
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|e| if e > T::zero() { e } else { T::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu { x }, rg)
    }

    /// Inverted dropout. With `train == false` this returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "dropout probability {p} not in [0,1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout { x, mask }, rg))
    }

    // ---- normalisation ----

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e = *e / sum;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(v, Op::Softmax { x }, rg)
    }

    /// Per-row standardisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layer_norm over last dim {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::of(1.0 / d as f64);
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mean) * r;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- indexing and shape ----

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::dim(format!(
                "embedding table shape {:?}",
                tv.shape()
            )));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim(format!(
                "permutation {axes:?} of shape {shape:?}"
            )));
        }
        let map = permute_map(&shape, axes);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(axes.iter().map(|&a| shape[a]).collect(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute { x, map }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    // ---- loss ----

    /// Label-smoothed cross entropy averaged over non-pad rows. The target
    /// class receives weight `1 - eps`; `eps` is spread evenly over the
    /// remaining `V - 1` classes.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[u32],
        eps: f64,
        pad: u32,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Contract(format!(
                "label smoothing {eps} not in [0,1)"
            )));
        }
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::dim(format!(
                "logits {:?} against {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        let v = lv.shape()[1];
        if eps > 0.0 && v < 2 {
            return Err(Error::Contract(
                "label smoothing needs at least two classes".into(),
            ));
        }
        let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, (&t, row)) in targets.iter().zip(lv.data().chunks(v)).enumerate() {
            if t as usize >= v {
                return Err(Error::Index {
                    index: t as usize,
                    bound: v,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&e| (e - max).exp()).sum::<T>().ln() + max;
            for (j, &e) in row.iter().enumerate() {
                probs[i * v + j] = (e - lse).exp();
            }
            if t == pad {
                continue;
            }
            count += 1;
            let mut nll = 0.0;
            for (j, &e) in row.iter().enumerate() {
                let q = if j == t as usize { 1.0 - eps } else { off };
                if q != 0.0 {
                    nll -= q * (e - lse).as_f64();
                }
            }
            total += nll;
        }
        if count == 0 {
            return Err(Error::Contract("every target position is padding".into()));
        }
        let value = Tensor::scalar(T::of(total / count as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                eps: T::of(eps),
                probs,
                count,
            },
            rg,
        ))
    }

    // ---- reverse sweep ----

    fn grad_buf(&mut self, v: Var) -> &mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Adds `g` into the gradient of `v`, summing over broadcast repeats.
    fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.rg(v) {
            return;
        }
        let buf = self.grad_buf(v);
        let n = buf.len();
        if n == g.len() {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        } else {
            for (i, &x) in g.iter().enumerate() {
                buf[i % n] += x;
            }
        }
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        // Take the op out so its saved buffers can be read while grads mutate.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Bmm {
                a,
                b,
                groups,
                m,
                k,
                n,
                transpose_b,
            } => {
                if self.rg(a) {
                    let mut da = vec![T::zero(); groups * m * k];
                    let bd = self.nodes[b.0].value.data();
                    for gi in 0..groups {
                        let gm = MatRef::dense(&g[gi * m * n..(gi + 1) * m * n], m, n);
                        let bs = &bd[gi * k * n..(gi + 1) * k * n];
                        // dA = dC · Bᵀ, where B is k×n (or stored n×k)
                        let bt = if transpose_b {
                            MatRef::dense(bs, n, k)
                        } else {
                            MatRef::dense_t(bs, k, n)
                        };
                        gemm(gm, bt, T::zero(), &mut da[gi * m * k..(gi + 1) * m * k]);
                    }
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); groups * k * n];
                    let ad = self.nodes[a.0].value.data();
                    for gi in 0..groups {
                        let as_ = &ad[gi * m * k..(gi + 1) * m * k];
                        let gs = &g[gi * m * n..(gi + 1) * m * n];
                        let out = &mut db[gi * k * n..(gi + 1) * k * n];
                        if transpose_b {
                            // dB (n×k) = dCᵀ · A
                            gemm(
                                MatRef::dense_t(gs, m, n),
                                MatRef::dense(as_, m, k),
                                T::zero(),
                                out,
                            );
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            gemm(
                                MatRef::dense_t(as_, m, k),
                                MatRef::dense(gs, m, n),
                                T::zero(),
                                out,
                            );
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            &Op::Sub { a, b } => {
                self.accumulate(a, g);
                if self.rg(b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    self.accumulate(b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                for (dst, other) in [(a, b), (b, a)] {
                    if self.rg(dst) {
                        let od = self.nodes[other.0].value.data();
                        let lo = od.len();
                        let d: Vec<T> =
                            g.iter().enumerate().map(|(i, &x)| x * od[i % lo]).collect();
                        self.accumulate(dst, &d);
                    }
                }
            }
            &Op::Scale { x, c } => {
                let d: Vec<T> = g.iter().map(|&e| e * c).collect();
                self.accumulate(x, &d);
            }
            &Op::Sigmoid { x } => {
                let y = self.nodes[idx].value.data();
                let d: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(&e, &s)| e * s * (T::one() - s))
                    .collect();
                self.accumulate(x, &d);
            }
            &Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                let d: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&e, &v)| if v > T::zero() { e } else { T::zero() })
                    .collect();
                self.accumulate(x, &d);
            }
            Op::Dropout { x, mask } => {
                let d: Vec<T> = g.iter().zip(mask).map(|(&e, &m)| e * m).collect();
                self.accumulate(*x, &d);
            }
            &Op::Softmax { x } => {
                let y = self.nodes[idx].value.data();
                let dlen = self.nodes[idx].value.last_dim();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(dlen).zip(g.chunks(dlen)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yy, &gg)| yy * (gg - dot)));
                }
                self.accumulate(x, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let dlen = *self.nodes[gain.0].value.shape().first().unwrap_or(&1);
                if self.rg(gain) || self.rg(bias) {
                    let mut dg = vec![T::zero(); dlen];
                    let mut db = vec![T::zero(); dlen];
                    for (gr, hr) in g.chunks(dlen).zip(xhat.chunks(dlen)) {
                        for j in 0..dlen {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(gain, &dg);
                    self.accumulate(bias, &db);
                }
                if self.rg(x) {
                    let gd = self.nodes[gain.0].value.data();
                    let inv_d = T::of(1.0 / dlen as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(dlen).zip(xhat.chunks(dlen)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&a, &h)| r * (a - mean_dh - h * mean_dh_h)),
                        );
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.rg(table) {
                    let d = self.nodes[table.0].value.last_dim();
                    let buf = self.grad_buf(table);
                    for (i, &id) in ids.iter().enumerate() {
                        let row = &mut buf[id as usize * d..(id as usize + 1) * d];
                        for (r, &e) in row.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *r += e;
                        }
                    }
                }
            }
            &Op::Reshape { x } => self.accumulate(x, g),
            Op::Permute { x, map } => {
                let x = *x;
                if self.rg(x) {
                    let buf = self.grad_buf(x);
                    for (o, &i) in map.iter().enumerate() {
                        buf[i] += g[o];
                    }
                }
            }
            &Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                let d = vec![g[0]; n];
                self.accumulate(x, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                eps,
                probs,
                count,
            } => {
                let v = self.nodes[logits.0].value.last_dim();
                let scale = g[0] / T::of(*count as f64);
                let off = if v > 1 {
                    *eps / T::of((v - 1) as f64)
                } else {
                    T::zero()
                };
                let mut d = vec![T::zero(); probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for j in 0..v {
                        let q = if j == t as usize {
                            T::one() - *eps
                        } else {
                            off
                        };
                        d[i * v + j] = (probs[i * v + j] - q) * scale;
                    }
                }
                self.accumulate(*logits, &d);
            }
        }
        self.nodes[idx].op = op;
    }
}
