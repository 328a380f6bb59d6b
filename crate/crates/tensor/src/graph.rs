//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in creation order, so every node's inputs precede it and
//! the reverse of the tape is a valid topological order for backward.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use crate::error::{invalid, Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{split_axis, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose(usize),
    Dropout {
        x: usize,
        keep_scale: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph for one forward/backward pass.
pub struct Graph<T: Real> {
    id: u32,
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn needs(&self, idx: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        idx.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Leaf input; gradient is tracked when the tensor has `requires_grad`.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf input that never receives gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let t = self.nodes.borrow()[i].value.clone();
        Ok(self.constant(t))
    }

    /// Leaf bound to a registered parameter. Repeated calls return the same
    /// node, so all uses accumulate into one gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let t = store.value(id).clone().with_grad(true);
        let v = self.push(t, Op::Param(id), true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        Ref::map(self.nodes.borrow(), |n| &n[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn two(&self, a: Var, b: Var) -> Result<(usize, usize)> {
        Ok((self.check(a)?, self.check(b)?))
    }

    fn matmul_impl(&self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (ai, bi) = self.two(a, b)?;
        let (m, k, n, out) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[ai].value, &nodes[bi].value);
            let shape_err = || TensorError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            };
            let (ar, ac) = av.dims2().map_err(|_| shape_err())?;
            let (br, bc) = bv.dims2().map_err(|_| shape_err())?;
            let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(shape_err());
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, av.data(), a_t, bv.data(), b_t, &mut out, false);
            (m, k, n, out)
        };
        let rg = self.needs(&[ai, bi]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: ai,
                b: bi,
                a_t,
                b_t,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a @ b^T` for rank-2 operands.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[a].value.shape() != nodes[b].value.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: nodes[a].value.shape().to_vec(),
                rhs: nodes[b].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a].value, &nodes[b].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: usize, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x].value;
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.two(a, b)?;
        self.same_shape("add", ai, bi)?;
        let out = self.zip_map(ai, bi, |x, y| x + y);
        Ok(self.push(out, Op::Add(ai, bi), self.needs(&[ai, bi])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.two(a, b)?;
        self.same_shape("mul", ai, bi)?;
        let out = self.zip_map(ai, bi, |x, y| x * y);
        Ok(self.push(out, Op::Mul(ai, bi), self.needs(&[ai, bi])))
    }

    /// `x + bias` with `bias` broadcast over the trailing dimension.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = self.two(x, bias)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[xi].value, &nodes[bi].value);
            let d = *xv.shape().last().unwrap_or(&0);
            if bv.shape() != [d] {
                return Err(TensorError::Shape {
                    op: "add_bias",
                    lhs: xv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let b = bv.data();
            let data = xv
                .data()
                .chunks(d.max(1))
                .flat_map(|row| row.iter().zip(b).map(|(&u, &w)| u + w))
                .collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::AddBias(xi, bi), self.needs(&[xi, bi])))
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.map(xi, |v| v * c);
        Ok(self.push(out, Op::Scale(xi, c), self.needs(&[xi])))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let out = self.map(xi, |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        Ok(self.push(out, Op::Gelu(xi), self.needs(&[xi])))
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (gi, bi) = self.two(gamma, beta)?;
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[xi].value, &nodes[gi].value, &nodes[bi].value);
            let d = *xv.shape().last().unwrap_or(&0);
            if gv.shape() != [d] || bv.shape() != [d] || d == 0 {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
            let dn = T::from_usize(d).unwrap();
            let eps = T::lit(LN_EPS);
            let rows = xv.numel() / d;
            let mut xhat = Vec::with_capacity(xv.numel());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(xv.numel());
            for row in xv.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, rstd)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
            self.needs(&[xi, gi, bi]),
        ))
    }

    fn axis_of(&self, op: &'static str, xi: usize, axis: usize) -> Result<Vec<usize>> {
        let shape = self.nodes.borrow()[xi].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    fn softmax_values(&self, xi: usize, axis: usize, log: bool) -> Result<Tensor<T>> {
        let shape = self.axis_of("softmax", xi, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let nodes = self.nodes.borrow();
        let x = nodes[xi].value.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * dim * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..dim {
                    mx = mx.max(x[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..dim {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                if log {
                    let lz = z.ln() + mx;
                    for j in 0..dim {
                        out[at(j)] = x[at(j)] - lz;
                    }
                } else {
                    for j in 0..dim {
                        out[at(j)] = out[at(j)] / z;
                    }
                }
            }
        }
        Tensor::new(shape, out)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.softmax_values(xi, axis, false)?;
        Ok(self.push(out, Op::Softmax(xi, axis), self.needs(&[xi])))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.softmax_values(xi, axis, true)?;
        Ok(self.push(out, Op::LogSoftmax(xi, axis), self.needs(&[xi])))
    }

    /// Row gather from a rank-2 table: `out[r] = table[ids[r]]`.
    pub fn embedding_gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let out = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[ti].value;
            let (rows, cols) = tv.dims2()?;
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(invalid(
                        "embedding_gather",
                        format!("row {id} out of range for {rows} rows"),
                    ));
                }
                data.extend_from_slice(tv.row(id));
            }
            Tensor::new(vec![ids.len(), cols], data)?
        };
        Ok(self.push(
            out,
            Op::Gather {
                table: ti,
                ids: ids.to_vec(),
            },
            self.needs(&[ti]),
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[idx[0]].value.shape().to_vec();
            if axis >= first.len() {
                return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for &i in &idx {
                let s = nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(TensorError::Shape {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &i in &idx {
                    let v = &nodes[i].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let rg = self.needs(&idx);
        Ok(self.push(out, Op::Concat { parts: idx, axis }, rg))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.axis_of("slice", xi, axis)?;
        if start > end || end > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} out of bounds for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let out = {
            let nodes = self.nodes.borrow();
            let x = nodes[xi].value.data();
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                data.extend_from_slice(&x[base + start * inner..base + end * inner]);
            }
            let mut s = shape.clone();
            s[axis] = end - start;
            Tensor::new(s, data)?
        };
        Ok(self.push(
            out,
            Op::Slice {
                x: xi,
                axis,
                start,
            },
            self.needs(&[xi]),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, C]`, or `[C]` with a single target).
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[li].value;
            let (n, c) = match lv.shape() {
                [c] => (1, *c),
                [n, c] => (*n, *c),
                s => return Err(invalid("cross_entropy", format!("logits of shape {s:?}"))),
            };
            if n != targets.len() || n == 0 {
                return Err(TensorError::Shape {
                    op: "cross_entropy",
                    lhs: lv.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let mut probs = Vec::with_capacity(n * c);
            let mut total = T::zero();
            for (row, &t) in lv.data().chunks(c).zip(targets) {
                if t >= c {
                    return Err(invalid("cross_entropy", format!("target {t} >= {c} classes")));
                }
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                total = total + (z.ln() + mx - row[t]);
                probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
            }
            (total / T::from_usize(n).unwrap(), probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            self.needs(&[li]),
        ))
    }

    /// Replace entries where `mask` is true with `value`.
    pub fn masked_fill(&self, x: Var, mask: &[bool], value: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[xi].value;
            if mask.len() != xv.numel() {
                return Err(TensorError::Shape {
                    op: "masked_fill",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let data = xv
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { value } else { v })
                .collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        Ok(self.push(
            out,
            Op::MaskedFill {
                x: xi,
                mask: mask.to_vec(),
            },
            self.needs(&[xi]),
        ))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.nodes.borrow()[xi].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), self.needs(&[xi])))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let m = {
            let nodes = self.nodes.borrow();
            let v = &nodes[xi].value;
            if v.numel() == 0 {
                return Err(invalid("mean", "empty tensor"));
            }
            v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap()
        };
        Ok(self.push(Tensor::scalar(m), Op::Mean(xi), self.needs(&[xi])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[xi].value;
            Tensor::new(shape.to_vec(), xv.data().to_vec()).map_err(|_| TensorError::Shape {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            })?
        };
        Ok(self.push(out, Op::Reshape(xi), self.needs(&[xi])))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[xi].value;
            let (r, c) = xv.dims2()?;
            let mut data = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = xv.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)?
        };
        Ok(self.push(out, Op::Transpose(xi), self.needs(&[xi])))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        let xi = self.check(x)?;
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(invalid("dropout", format!("rate {p} must be < 1")));
        }
        let n = self.nodes.borrow()[xi].value.numel();
        let keep = T::lit(1.0 / (1.0 - p));
        let keep_scale: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[xi].value;
            let data = xv.data().iter().zip(&keep_scale).map(|(&v, &k)| v * k).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::Dropout { x: xi, keep_scale }, self.needs(&[xi])))
    }

    /// Gradients of scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[li].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[li].requires_grad {
            grads[li] = Some(vec![T::one()]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            params,
        })
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` is on the loss path.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_deref().map(|g| (id, g)))
    }
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    i: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul {
            a,
            b,
            a_t,
            b_t,
            m,
            k,
            n,
        } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(ga) = slot(nodes, grads, a) {
                if a_t {
                    T::gemm(k, n, m, bv, b_t, g, true, ga, true);
                } else {
                    T::gemm(m, n, k, g, false, bv, !b_t, ga, true);
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                if b_t {
                    T::gemm(n, m, k, g, true, av, a_t, gb, true);
                } else {
                    T::gemm(k, m, n, av, !a_t, g, false, gb, true);
                }
            }
        }
        &Op::Add(a, b) => {
            for p in [a, b] {
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(ga) = slot(nodes, grads, a) {
                for j in 0..g.len() {
                    ga[j] = ga[j] + g[j] * bv[j];
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for j in 0..g.len() {
                    gb[j] = gb[j] + g[j] * av[j];
                }
            }
        }
        &Op::AddBias(x, bias) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }
            if let Some(gb) = slot(nodes, grads, bias) {
                let d = gb.len();
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d * c);
            }
        }
        &Op::Gelu(x) => {
            let xv = nodes[x].value.data();
            let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
            let three = T::lit(3.0);
            if let Some(gx) = slot(nodes, grads, x) {
                for j in 0..g.len() {
                    let v = xv[j];
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    let d = half * (T::one() + t) + half * v * dt;
                    gx[j] = gx[j] + g[j] * d;
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = nodes[*gamma].value.numel();
            let gam = nodes[*gamma].value.data();
            if let Some(gb) = slot(nodes, grads, *beta) {
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + row[j] * hrow[j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let dn = T::from_usize(d).unwrap();
                for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = row[j] * gam[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hrow[j];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for j in 0..d {
                        let dh = row[j] * gam[j];
                        let v = rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        gx[r * d + j] = gx[r * d + j] + v;
                    }
                }
            }
        }
        &Op::Softmax(x, axis) => {
            let (outer, dim, inner) = split_axis(y.shape(), axis);
            let yv = y.data();
            if let Some(gx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    for q in 0..inner {
                        let at = |j: usize| o * dim * inner + j * inner + q;
                        let dot: T = (0..dim).map(|j| g[at(j)] * yv[at(j)]).sum();
                        for j in 0..dim {
                            gx[at(j)] = gx[at(j)] + yv[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax(x, axis) => {
            let (outer, dim, inner) = split_axis(y.shape(), axis);
            let yv = y.data();
            if let Some(gx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    for q in 0..inner {
                        let at = |j: usize| o * dim * inner + j * inner + q;
                        let total: T = (0..dim).map(|j| g[at(j)]).sum();
                        for j in 0..dim {
                            gx[at(j)] = gx[at(j)] + g[at(j)] - yv[at(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let cols = y.shape()[1];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * cols..(id + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(s, &v)| *s = *s + v);
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.shape()[*axis];
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        let dst = o * width * inner;
                        for j in 0..width * inner {
                            gp[dst + j] = gp[dst + j] + g[src + j];
                        }
                    }
                }
                offset += width;
            }
        }
        &Op::Slice { x, axis, start } => {
            let xshape = nodes[x].value.shape();
            let (outer, dim, inner) = split_axis(xshape, axis);
            let width = y.shape()[axis];
            if let Some(gx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * width * inner;
                    for j in 0..width * inner {
                        gx[dst + j] = gx[dst + j] + g[src + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / T::from_usize(n).unwrap();
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    if !mask[j] {
                        gx[j] = gx[j] + g[j];
                    }
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|s| *s = *s + g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                let d = g[0] / T::from_usize(gx.len()).unwrap();
                gx.iter_mut().for_each(|s| *s = *s + d);
            }
        }
        &Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }
        }
        &Op::Transpose(x) => {
            let (r, c) = (y.shape()[1], y.shape()[0]);
            if let Some(gx) = slot(nodes, grads, x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Dropout { x, keep_scale } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] = gx[j] + g[j] * keep_scale[j];
                }
            }
        }
    }
}
