//! Reverse-mode automatic differentiation over a recorded op graph.
//!
//! Every op is a pure function from input [`Tensor`]s to an output tensor;
//! tracked ops additionally record a backward closure. Gradients are
//! accumulated in a side map keyed by node id, so node values stay immutable
//! and inference-only graphs (no tracked leaves) retain no history at all.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::nn::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackFn<S> = Box<dyn Fn(&Tensor<S>, &[Var<S>]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    id: u64,
    value: Tensor<S>,
    needs_grad: bool,
    parents: Vec<Var<S>>,
    backward: Option<BackFn<S>>,
}

// Deep graphs (autoregressive rollouts, long training traces) would otherwise
// recurse on drop and overflow the stack.
impl<S: Scalar> Drop for Node<S> {
    fn drop(&mut self) {
        let mut stack: Vec<Var<S>> = std::mem::take(&mut self.parents);
        while let Some(var) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(var.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A tensor in the op graph. Cheap to clone.
pub struct Var<S: Scalar>(Rc<Node<S>>);

impl<S: Scalar> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

/// Gradients from one backward pass, keyed by node id.
pub struct Grads<S: Scalar> {
    map: HashMap<u64, Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, var: &Var<S>) -> Option<&Tensor<S>> {
        self.map.get(&var.id())
    }
}

impl<S: Scalar> Var<S> {
    /// Untracked input: gradients never flow into it.
    pub fn constant(value: Tensor<S>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            needs_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Tracked input (a parameter).
    pub fn leaf(value: Tensor<S>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            needs_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(value: Tensor<S>, parents: Vec<Var<S>>, backward: BackFn<S>) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        if !needs_grad {
            // Constant subgraph: keep no history so inference frees as it goes.
            return Var::constant(value);
        }
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            needs_grad: true,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Reverse pass from a scalar root. Returns accumulated gradients for
    /// every tracked node reachable from the root.
    pub fn backward(&self) -> Grads<S> {
        assert_eq!(self.value().len(), 1, "backward() needs a scalar root");
        // Reachable tracked nodes, then process in descending id order: ids
        // are assigned monotonically at construction, so children always come
        // after their parents and this is a valid reverse topological order.
        let mut seen: HashMap<u64, Var<S>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.0.needs_grad || seen.contains_key(&v.id()) {
                continue;
            }
            for p in &v.0.parents {
                stack.push(p.clone());
            }
            seen.insert(v.id(), v);
        }
        let mut order: Vec<u64> = seen.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut map: HashMap<u64, Tensor<S>> = HashMap::new();
        map.insert(self.id(), Tensor::ones(&[1]));
        for id in order {
            let node = &seen[&id];
            let Some(grad) = map.get(&id).cloned() else {
                continue;
            };
            if let Some(back) = &node.0.backward {
                let parent_grads = back(&grad, &node.0.parents);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    if !parent.0.needs_grad {
                        continue;
                    }
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.shape(), parent.shape(), "bad grad shape");
                        map.entry(parent.id())
                            .and_modify(|acc| acc.add_assign(&pg))
                            .or_insert(pg);
                    }
                }
            }
        }
        Grads { map }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, other: &Var<S>) -> Var<S> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let value = self.value().add(other.value());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<S>) -> Var<S> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let value = self.value().sub(other.value());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, other: &Var<S>) -> Var<S> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let value = self.value().mul(other.value());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                vec![
                    Some(g.mul(parents[1].value())),
                    Some(g.mul(parents[0].value())),
                ]
            }),
        )
    }

    pub fn scale(&self, k: S) -> Var<S> {
        let value = self.value().scale(k);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.scale(k))]),
        )
    }

    pub fn neg(&self) -> Var<S> {
        self.scale(-S::ONE)
    }

    /// Elementwise product with an untracked tensor.
    pub fn mul_const(&self, t: &Tensor<S>) -> Var<S> {
        assert_eq!(self.shape(), t.shape(), "mul_const shape mismatch");
        let value = self.value().mul(t);
        let t = t.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.mul(&t))]),
        )
    }

    pub fn add_const(&self, t: &Tensor<S>) -> Var<S> {
        assert_eq!(self.shape(), t.shape(), "add_const shape mismatch");
        let value = self.value().add(t);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.clone())]),
        )
    }

    pub fn abs(&self) -> Var<S> {
        let value = self.value().map(|v| v.abs());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, parents| {
                let sign = parents[0]
                    .value()
                    .map(|v| if v >= S::ZERO { S::ONE } else { -S::ONE });
                vec![Some(g.mul(&sign))]
            }),
        )
    }

    pub fn gelu(&self) -> Var<S> {
        let value = self.value().map(gelu_fwd);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, parents| {
                let d = parents[0].value().map(gelu_dx);
                vec![Some(g.mul(&d))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var<S> {
        let value = self.value().map(|v| S::ONE / (S::ONE + (-v).exp()));
        let y = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let d = y.map(|v| v * (S::ONE - v));
                vec![Some(g.mul(&d))]
            }),
        )
    }

    // ── broadcasts ──────────────────────────────────────────────────────

    /// `[n,d] + [d]` row-broadcast bias.
    pub fn add_row_bias(&self, bias: &Var<S>) -> Var<S> {
        let (n, d) = (self.shape()[0], self.shape()[1]);
        assert_eq!(bias.shape(), &[d], "row bias dim mismatch");
        let b = bias.value().data();
        let x = self.value().data();
        let mut out = Vec::with_capacity(n * d);
        for row in x.chunks_exact(d) {
            out.extend(row.iter().zip(b).map(|(&v, &bb)| v + bb));
        }
        Var::from_op(
            Tensor::raw(&[n, d], out),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut db = vec![S::ZERO; d];
                for row in g.data().chunks_exact(d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::raw(&[d], db))]
            }),
        )
    }

    /// `[c, ...] + [c]` channel-broadcast bias (conv bias).
    pub fn add_chan_bias(&self, bias: &Var<S>) -> Var<S> {
        let c = self.shape()[0];
        assert_eq!(bias.shape(), &[c], "channel bias dim mismatch");
        let inner = self.value().len() / c;
        let b = bias.value().data();
        let x = self.value().data();
        let mut out = Vec::with_capacity(x.len());
        for (ch, chunk) in x.chunks_exact(inner).enumerate() {
            let bb = b[ch];
            out.extend(chunk.iter().map(|&v| v + bb));
        }
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::raw(&shape, out),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let db: Vec<S> = g
                    .data()
                    .chunks_exact(inner)
                    .map(|chunk| chunk.iter().copied().sum())
                    .collect();
                vec![Some(g.clone()), Some(Tensor::raw(&[c], db))]
            }),
        )
    }

    // ── shape ───────────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Var<S> {
        let value = self.value().reshaped(shape).expect("reshape size mismatch");
        let orig = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.reshaped(&orig).unwrap())]),
        )
    }

    pub fn transpose2(&self) -> Var<S> {
        let value = transpose2_t(self.value());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(transpose2_t(g))]),
        )
    }

    pub fn permute(&self, perm: &[usize]) -> Var<S> {
        let value = permute_t(self.value(), perm);
        let perm = perm.to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(permute_t(g, &inv))]
            }),
        )
    }

    pub fn concat(parts: &[Var<S>], axis: usize) -> Var<S> {
        assert!(!parts.is_empty());
        let base = parts[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut axis_total = 0usize;
        for p in parts {
            assert_eq!(p.shape().len(), base.len(), "concat rank mismatch");
            for (i, (&a, &b)) in p.shape().iter().zip(base.iter()).enumerate() {
                assert!(i == axis || a == b, "concat non-axis dims must match");
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let a = p.shape()[axis];
                let src = p.value().data();
                out.extend_from_slice(&src[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let axis_dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            Tensor::raw(&shape, out),
            parts.to_vec(),
            Box::new(move |g, parents| {
                let gd = g.data();
                let mut grads: Vec<Vec<S>> = parents
                    .iter()
                    .map(|p| Vec::with_capacity(p.value().len()))
                    .collect();
                let mut off = 0;
                for _o in 0..outer {
                    for (pi, &a) in axis_dims.iter().enumerate() {
                        grads[pi].extend_from_slice(&gd[off..off + a * inner]);
                        off += a * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(parents)
                    .map(|(gv, p)| Some(Tensor::raw(p.shape(), gv)))
                    .collect()
            }),
        )
    }

    /// Columns `lo..hi` of a `[n,d]` tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Var<S> {
        let (n, d) = (self.shape()[0], self.shape()[1]);
        assert!(lo < hi && hi <= d);
        let x = self.value().data();
        let mut out = Vec::with_capacity(n * (hi - lo));
        for row in x.chunks_exact(d) {
            out.extend_from_slice(&row[lo..hi]);
        }
        Var::from_op(
            Tensor::raw(&[n, hi - lo], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let w = hi - lo;
                let mut dx = vec![S::ZERO; n * d];
                for (r, row) in g.data().chunks_exact(w).enumerate() {
                    dx[r * d + lo..r * d + hi].copy_from_slice(row);
                }
                vec![Some(Tensor::raw(&[n, d], dx))]
            }),
        )
    }

    /// Rows by index along axis 0 (may repeat).
    pub fn gather_rows(&self, idx: &[usize]) -> Var<S> {
        let shape = self.shape();
        let n = shape[0];
        let inner: usize = shape[1..].iter().product();
        let x = self.value().data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            assert!(i < n, "gather_rows index out of range");
            out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        let src_shape = shape.to_vec();
        Var::from_op(
            Tensor::raw(&out_shape, out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![S::ZERO; src_shape.iter().product()];
                for (r, &i) in idx.iter().enumerate() {
                    let gs = &g.data()[r * inner..(r + 1) * inner];
                    for (d, &v) in dx[i * inner..(i + 1) * inner].iter_mut().zip(gs) {
                        *d += v;
                    }
                }
                vec![Some(Tensor::raw(&src_shape, dx))]
            }),
        )
    }

    /// Column `j` of a `[n,d]` tensor as a `[n]` vector.
    pub fn select_col(&self, j: usize) -> Var<S> {
        let (n, d) = (self.shape()[0], self.shape()[1]);
        assert!(j < d);
        let x = self.value().data();
        let out: Vec<S> = (0..n).map(|r| x[r * d + j]).collect();
        Var::from_op(
            Tensor::raw(&[n], out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![S::ZERO; n * d];
                for (r, &v) in g.data().iter().enumerate() {
                    dx[r * d + j] = v;
                }
                vec![Some(Tensor::raw(&[n, d], dx))]
            }),
        )
    }

    /// Broadcast a `[m,n]` tensor into `[m,n,reps]` (axis=2) or `[m,reps,n]`
    /// (axis=1).
    pub fn broadcast_axis(&self, axis: usize, reps: usize) -> Var<S> {
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let x = self.value().data();
        let (shape, out) = match axis {
            2 => {
                let mut out = Vec::with_capacity(m * n * reps);
                for &v in x {
                    out.extend(std::iter::repeat(v).take(reps));
                }
                (vec![m, n, reps], out)
            }
            1 => {
                let mut out = Vec::with_capacity(m * reps * n);
                for row in x.chunks_exact(n) {
                    for _ in 0..reps {
                        out.extend_from_slice(row);
                    }
                }
                (vec![m, reps, n], out)
            }
            _ => panic!("broadcast_axis supports axis 1 or 2"),
        };
        Var::from_op(
            Tensor::raw(&shape, out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![S::ZERO; m * n];
                match axis {
                    2 => {
                        for (i, d) in dx.iter_mut().enumerate() {
                            for r in 0..reps {
                                *d += gd[i * reps + r];
                            }
                        }
                    }
                    _ => {
                        for i in 0..m {
                            for r in 0..reps {
                                let base = (i * reps + r) * n;
                                for j in 0..n {
                                    dx[i * n + j] += gd[base + j];
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::raw(&[m, n], dx))]
            }),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Var<S> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(&self) -> Var<S> {
        let n = self.value().len();
        self.sum_all().scale(S::ONE / S::from_f64(n as f64))
    }

    /// Mean over one axis; output drops that axis.
    pub fn mean_axis(&self, axis: usize) -> Var<S> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let m = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value().data();
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..m {
                let base = (o * m + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let inv = S::ONE / S::from_f64(m as f64);
        for v in &mut out {
            *v = *v * inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Var::from_op(
            Tensor::raw(&out_shape, out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![S::ZERO; outer * m * inner];
                for o in 0..outer {
                    for a in 0..m {
                        let base = (o * m + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(Tensor::raw(&shape, dx))]
            }),
        )
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, other: &Var<S>) -> Var<S> {
        let value = self.value().matmul(other.value()).expect("matmul shapes");
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                let a = parents[0].value();
                let b = parents[1].value();
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = g @ B^T
                let mut da = vec![S::ZERO; m * k];
                unsafe {
                    S::gemm(
                        m,
                        n,
                        k,
                        S::ONE,
                        g.data().as_ptr(),
                        n as isize,
                        1,
                        b.data().as_ptr(),
                        1,
                        n as isize,
                        S::ZERO,
                        da.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                // dB = A^T @ g
                let mut db = vec![S::ZERO; k * n];
                unsafe {
                    S::gemm(
                        k,
                        m,
                        n,
                        S::ONE,
                        a.data().as_ptr(),
                        1,
                        k as isize,
                        g.data().as_ptr(),
                        n as isize,
                        1,
                        S::ZERO,
                        db.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                vec![
                    Some(Tensor::raw(&[m, k], da)),
                    Some(Tensor::raw(&[k, n], db)),
                ]
            }),
        )
    }

    // ── softmax / losses ────────────────────────────────────────────────

    /// Row-wise softmax of a `[n,d]` tensor, max-subtracted for stability.
    pub fn softmax_rows(&self) -> Var<S> {
        let value = softmax_rows_t(self.value());
        let y = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let d = y.shape()[1];
                let mut dx = Vec::with_capacity(y.len());
                for (grow, yrow) in g.data().chunks_exact(d).zip(y.data().chunks_exact(d)) {
                    let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::raw(y.shape(), dx))]
            }),
        )
    }

    /// Mean cross-entropy of `[n,k]` logits against integer labels.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Var<S> {
        let (n, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(labels.len(), n, "label count mismatch");
        let x = self.value().data();
        let mut total = S::ZERO;
        for (row, &y) in x.chunks_exact(k).zip(labels) {
            debug_assert!(y < k);
            let m = row.iter().copied().fold(row[0], |a, b| a.max(b));
            let lse: S = row.iter().map(|&v| (v - m).exp()).sum();
            total += m + lse.ln() - row[y];
        }
        let value = Tensor::scalar(total / S::from_f64(n as f64));
        let labels: Arc<Vec<usize>> = Arc::new(labels.to_vec());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gs = g.item() / S::from_f64(n as f64);
                let probs = softmax_rows_t(parents[0].value());
                let mut dx = probs.data().to_vec();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * k + y] -= S::ONE;
                }
                for v in &mut dx {
                    *v = *v * gs;
                }
                vec![Some(Tensor::raw(&[n, k], dx))]
            }),
        )
    }
}

// ── tensor-level helpers shared by forward and backward ────────────────

pub(crate) fn transpose2_t<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let x = t.data();
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    Tensor::raw(&[n, m], out)
}

pub(crate) fn permute_t<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let x = t.data();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let total = x.len();
    let mut src = 0usize;
    for _ in 0..total {
        out.push(x[src]);
        // odometer increment over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::raw(&out_shape, out)
}

pub(crate) fn softmax_rows_t<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let d = t.shape()[t.rank() - 1];
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks_exact(d) {
        let m = row.iter().copied().fold(row[0], |a, b| a.max(b));
        let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let sum: S = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|v| v / sum));
    }
    Tensor::raw(t.shape(), out)
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    S::from_f64(0.5) * x * (S::ONE + u.tanh())
}

fn gelu_dx<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::ONE + S::from_f64(3.0) * a * x * x);
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn add_mul_backward() {
        let a = Var::leaf(t64(&[2], vec![2.0, 3.0]));
        let b = Var::leaf(t64(&[2], vec![4.0, 5.0]));
        let y = a.mul(&b).sum_all();
        assert_eq!(y.value().item(), 23.0);
        let g = y.backward();
        assert_eq!(g.get(&a).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let a = Var::leaf(t64(&[1], vec![3.0]));
        let y = a.mul(&a).sum_all(); // x^2 -> dy/dx = 2x
        let g = y.backward();
        assert_eq!(g.get(&a).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_backward_matches_manual() {
        let a = Var::leaf(t64(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = Var::leaf(t64(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let y = a.matmul(&b).sum_all();
        let g = y.backward();
        // d/dA sum(AB) = ones @ B^T
        assert_eq!(g.get(&a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn constant_subgraph_records_nothing() {
        let a = Var::constant(t64(&[2], vec![1.0, 2.0]));
        let b = Var::constant(t64(&[2], vec![3.0, 4.0]));
        let y = a.mul(&b);
        assert!(!y.needs_grad());
    }

    #[test]
    fn softmax_rows_sums_to_one() {
        let a = Var::leaf(t64(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let p = a.softmax_rows();
        for row in p.value().data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_t(&a, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute_t(&p, &[1, 2, 0]);
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn deep_graph_drop_does_not_overflow() {
        let mut v = Var::leaf(Tensor::<f64>::zeros(&[4]));
        for _ in 0..200_000 {
            v = v.scale(1.0);
        }
        drop(v);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let a = Var::leaf(Tensor::<f64>::zeros(&[2, 4]));
        let ce = a.cross_entropy_mean(&[0, 3]);
        assert!((ce.value().item() - (4.0f64).ln()).abs() < 1e-12);
    }
}
