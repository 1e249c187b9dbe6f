use super::tensor::{gemm, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    /// Parameter or constant; no inputs.
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        a: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Sum {
        a: Var,
        axis: usize,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    SumAll {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        a: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Values whose inputs never require gradients are stored as constants and
/// carry no backward information.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

/// Adds `src` into `dst`, summing over leading blocks when `dst` is shorter.
fn accumulate_broadcast<T: Scalar>(dst: &mut [T], src: &[T]) {
    for chunk in src.chunks(dst.len()) {
        for (d, s) in dst.iter_mut().zip(chunk) {
            *d = *d + *s;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a parameter by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// `[..., m, k] @ [..., k, n]`, or `[..., m, k] @ [k, n]` with the right
    /// operand shared across leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("matmul", format!("{sa:?} @ {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != kb || !(shared_rhs || sa[..sa.len() - 2] == sb[..sb.len() - 2]) {
            return Err(bad());
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if shared_rhs {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, T::zero());
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        T::zero(),
                    );
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, &[a, b]))
    }

    fn broadcast_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::shape(name, format!("{sa:?} with {sb:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = if bv.is_empty() {
            Vec::new()
        } else {
            av.data()
                .chunks(bv.len())
                .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        Tensor::new(av.shape(), data)
    }

    /// Elementwise sum; `b` may be a suffix of `a`'s shape (e.g. a bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` may be a suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale { a, c }, &[a])
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for block in src.chunks(r * c) {
            for j in 0..c {
                for i in 0..r {
                    out.push(block[i * c + j]);
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { a, axis, start }, &[a]))
    }

    /// Selects entries of `axis` by index; indices may repeat.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || indices.iter().any(|&i| i >= s[axis]) {
            return Err(Error::shape(
                "gather",
                format!("indices up to {:?} on axis {axis} of {s:?}", indices.iter().max()),
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = indices.len();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Gather {
                a,
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    fn reduce_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(name, format!("axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        Ok((shape, out))
    }

    /// Sum over `axis`, which is removed.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("sum", a, axis)?;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sum { a, axis }, &[a]))
    }

    /// Mean over `axis`, which is removed.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis("mean", a, axis)?;
        let n = T::from_f64(self.shape(a)[axis] as f64);
        out.iter_mut().for_each(|v| *v = *v / n);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mean { a, axis }, &[a]))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        self.push(value, Op::Exp { a }, &[a])
    }

    /// Natural log; every input must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {v:?}")));
        }
        let value = self.value(a).map(T::ln);
        Ok(self.push(value, Op::Log { a }, &[a]))
    }

    fn row_softmax(&self, a: Var, log: bool) -> Tensor<T> {
        let v = self.value(a);
        let d = last_dim(v.shape());
        let mut out = Vec::with_capacity(v.len());
        if d > 0 {
            for row in v.data().chunks(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
                if log {
                    let lse = sum.ln();
                    out.extend(row.iter().map(|&x| x - max - lse));
                } else {
                    out.extend(row.iter().map(|&x| (x - max).exp() / sum));
                }
            }
        }
        Tensor::new(v.shape(), out).expect("same shape")
    }

    /// Softmax over the last axis, computed with the row maximum subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.row_softmax(a, false);
        self.push(value, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = self.row_softmax(a, true);
        self.push(value, Op::LogSoftmax { a }, &[a])
    }

    /// Normalizes over the last axis, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = last_dim(&s);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {s:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = Vec::with_capacity(numel(&s));
        let mut inv_std = Vec::with_capacity(numel(&s) / d.max(1));
        let mut out = Vec::with_capacity(numel(&s));
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            for ((&v, &gi), &bi) in row.iter().zip(g).zip(b) {
                let n = (v - mean) * r;
                normalized.push(n);
                out.push(n * gi + bi);
            }
        }
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu { a }, &[a])
    }

    /// `x @ w + b` for `x: [..., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Fills parameter gradients with d`loss`/d`param`, adding to any gradient
    /// already present. `loss` must hold exactly one value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}, expected a scalar", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => accumulate_broadcast(acc.data_mut(), g.data()),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => accumulate_broadcast(acc.data_mut(), contribution.data()),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Clears gradients on every parameter.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Gradients with respect to each input of node `i`, given the output gradient `g`.
    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let shared_rhs = sb.len() == 2;
                let mut res = Vec::new();
                if wants(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    if shared_rhs {
                        gemm(batch * m, n, k, gd, false, bv, true, &mut da, T::zero());
                    } else {
                        for p in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[p * m * n..(p + 1) * m * n],
                                false,
                                &bv[p * k * n..(p + 1) * k * n],
                                true,
                                &mut da[p * m * k..(p + 1) * m * k],
                                T::zero(),
                            );
                        }
                    }
                    res.push((*a, Tensor::new(sa, da)?));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if shared_rhs {
                        gemm(k, batch * m, n, av, true, gd, false, &mut db, T::zero());
                    } else {
                        for p in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[p * m * k..(p + 1) * m * k],
                                true,
                                &gd[p * m * n..(p + 1) * m * n],
                                false,
                                &mut db[p * k * n..(p + 1) * k * n],
                                T::zero(),
                            );
                        }
                    }
                    res.push((*b, Tensor::new(sb, db)?));
                }
                res
            }
            Op::Add { a, b } => {
                let mut db = vec![T::zero(); self.value(*b).len()];
                accumulate_broadcast(&mut db, gd);
                vec![(*a, g.clone()), (*b, Tensor::new(self.shape(*b), db)?)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut res = Vec::new();
                if wants(*a) {
                    let da = gd
                        .chunks(bv.len())
                        .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| x * y))
                        .collect();
                    res.push((*a, Tensor::new(self.shape(*a), da)?));
                }
                if wants(*b) {
                    let prod: Vec<T> = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    let mut db = vec![T::zero(); bv.len()];
                    accumulate_broadcast(&mut db, &prod);
                    res.push((*b, Tensor::new(self.shape(*b), db)?));
                }
                res
            }
            Op::Scale { a, c } => vec![(*a, g.map(|v| v * *c))],
            Op::Transpose { a } => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut da = Vec::with_capacity(gd.len());
                for block in gd.chunks(r * c) {
                    for j in 0..c {
                        for i in 0..r {
                            da.push(block[i * c + j]);
                        }
                    }
                }
                vec![(*a, Tensor::new(self.shape(*a), da)?)]
            }
            Op::Reshape { a } => vec![(*a, g.clone().reshaped(self.shape(*a))?)],
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if wants(v) {
                        let mut dv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        res.push((v, Tensor::new(self.shape(v), dv)?));
                    }
                    offset += n;
                }
                res
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a);
                let (outer, n, inner) = split_axis(sa, *axis);
                let len = out.shape()[*axis];
                let mut da = vec![T::zero(); numel(sa)];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    da[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, Tensor::new(sa, da)?)]
            }
            Op::Gather { a, axis, indices } => {
                let sa = self.shape(*a);
                let (outer, n, inner) = split_axis(sa, *axis);
                let mut da = vec![T::zero(); numel(sa)];
                for o in 0..outer {
                    for (p, &idx) in indices.iter().enumerate() {
                        let src = &gd[(o * indices.len() + p) * inner..(o * indices.len() + p + 1) * inner];
                        let dst = &mut da[(o * n + idx) * inner..(o * n + idx + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
                vec![(*a, Tensor::new(sa, da)?)]
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let sa = self.shape(*a);
                let (outer, n, inner) = split_axis(sa, *axis);
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::from_f64(n as f64)
                } else {
                    T::one()
                };
                let mut da = Vec::with_capacity(numel(sa));
                for o in 0..outer {
                    let row = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        da.extend(row.iter().map(|&v| v * factor));
                    }
                }
                vec![(*a, Tensor::new(sa, da)?)]
            }
            Op::SumAll { a } => vec![(*a, Tensor::full(self.shape(*a), gd[0]))],
            Op::Exp { a } => {
                let da = gd.iter().zip(out.data()).map(|(&g, &y)| g * y).collect();
                vec![(*a, Tensor::new(self.shape(*a), da)?)]
            }
            Op::Log { a } => {
                let da = gd.iter().zip(self.value(*a).data()).map(|(&g, &x)| g / x).collect();
                vec![(*a, Tensor::new(self.shape(*a), da)?)]
            }
            Op::Softmax { a } => {
                let d = last_dim(out.shape());
                let mut da = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(d).zip(out.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    da.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - dot)));
                }
                vec![(*a, Tensor::new(self.shape(*a), da)?)]
            }
            Op::LogSoftmax { a } => {
                let d = last_dim(out.shape());
                let mut da = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(d).zip(out.data().chunks(d)) {
                    let total: T = grow.iter().copied().sum();
                    da.extend(grow.iter().zip(yrow).map(|(&g, &y)| g - y.exp() * total));
                }
                vec![(*a, Tensor::new(self.shape(*a), da)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = last_dim(out.shape());
                let dn = T::from_f64(d as f64);
                let gam = self.value(*gamma).data();
                let mut res = Vec::new();
                if wants(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((grow, nrow), &r) in gd.chunks(d).zip(normalized.chunks(d)).zip(inv_std) {
                        let dn_row: Vec<T> = grow.iter().zip(gam).map(|(&g, &w)| g * w).collect();
                        let sum: T = dn_row.iter().copied().sum();
                        let dot: T = dn_row.iter().zip(nrow).map(|(&a, &b)| a * b).sum();
                        dx.extend(
                            dn_row
                                .iter()
                                .zip(nrow)
                                .map(|(&dv, &nv)| r / dn * (dn * dv - sum - nv * dot)),
                        );
                    }
                    res.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, nrow) in gd.chunks(d).zip(normalized.chunks(d)) {
                        for ((acc, &g), &nv) in dg.iter_mut().zip(grow).zip(nrow) {
                            *acc = *acc + g * nv;
                        }
                    }
                    res.push((*gamma, Tensor::new(&[d], dg)?));
                }
                if wants(*beta) {
                    let mut db = vec![T::zero(); d];
                    accumulate_broadcast(&mut db, gd);
                    res.push((*beta, Tensor::new(&[d], db)?));
                }
                res
            }
            Op::Gelu { a } => {
                let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let da = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                vec![(*a, Tensor::new(self.shape(*a), da)?)]
            }
        })
    }
}
