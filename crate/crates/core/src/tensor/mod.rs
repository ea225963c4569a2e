//! Dense f64 tensors with a reverse-mode gradient tape.
//!
//! Ops are methods on [`Tape`]; each records a backward closure that maps
//! the upstream gradient to per-parent contributions. Nodes that no
//! gradient can reach (constants, and anything computed only from
//! constants) record nothing, so gradients are *structurally* zero for
//! frozen inputs — there is no stop-gradient flag to forget.
//!
//! Buffers are row-major with the last dimension contiguous. Convolutions
//! live in [`conv`], normalization layers in [`norm`], the
//! finite-difference harness in [`check`].

pub mod check;
pub mod conv;
pub mod norm;

use std::sync::Arc;

use crate::error::{CoreError, Result};

/// A dense n-dimensional value. Cloning shares the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        Tensor { shape, data: Arc::clone(&self.data) }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

type BackFn = Box<dyn Fn(&[Tensor], &[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Node {
    back: Option<BackFn>,
    requires_grad: bool,
}

/// Reverse-mode tape. One tape per forward/backward pass.
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { values: Vec::new(), nodes: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// A tape that records no backward closures (pure inference).
    pub fn no_grad() -> Tape {
        Tape { grad_enabled: false, ..Tape::new() }
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.values.len());
        self.values.push(value);
        self.nodes.push(Node { back, requires_grad });
        self.grads.push(None);
        id
    }

    /// A differentiable leaf (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let rg = self.grad_enabled;
        self.push(value, None, rg)
    }

    /// A frozen input: gradients never reach it.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, None, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.values[id.0].shape()
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` means
    /// identically zero (no path from the loss).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub(crate) fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an op. `back` is dropped when no parent can receive gradient.
    pub(crate) fn record(
        &mut self,
        value: Tensor,
        parents: &[TensorId],
        back: BackFn,
    ) -> TensorId {
        let requires = self.grad_enabled && parents.iter().any(|p| self.requires_grad(*p));
        let back = if requires { Some(back) } else { None };
        self.push(value, back, requires)
    }

    /// Reverse sweep from a scalar node; seeds d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(CoreError::shape(format!(
                "backward from non-scalar node of shape {:?}",
                lt.shape()
            )));
        }
        if !lt.item().is_finite() {
            return Err(CoreError::NonFinite("loss"));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || self.nodes[id].back.is_none() {
                continue;
            }
            let contribs = {
                let g = self.grads[id].as_ref().unwrap();
                let back = self.nodes[id].back.as_ref().unwrap();
                back(&self.values, g)
            };
            for (pid, gc) in contribs {
                if !self.nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(gc.len(), self.values[pid].numel());
                match &mut self.grads[pid] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(gc.iter()) {
                            *a += g;
                        }
                    }
                    None => self.grads[pid] = Some(gc),
                }
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(
            Tensor::new(shape, out),
            &[a, b],
            Box::new(move |_, g| vec![(a.0, g.to_vec()), (b.0, g.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(
            Tensor::new(shape, out),
            &[a, b],
            Box::new(move |_, g| {
                vec![(a.0, g.to_vec()), (b.0, g.iter().map(|v| -v).collect())]
            }),
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(
            Tensor::new(shape, out),
            &[a, b],
            Box::new(move |vals, g| {
                let da: Vec<f64> =
                    g.iter().zip(vals[b.0].data()).map(|(gi, y)| gi * y).collect();
                let db: Vec<f64> =
                    g.iter().zip(vals[a.0].data()).map(|(gi, x)| gi * x).collect();
                vec![(a.0, da), (b.0, db)]
            }),
        ))
    }

    /// Broadcast multiply: `a` is `[N, C, ...]`, `m` is `[N, 1, ...]` with
    /// identical trailing dims. Each of `a`'s channels is scaled by `m`.
    pub fn mul_bcast_c(&mut self, a: TensorId, m: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sm = self.shape(m).to_vec();
        let compatible = sa.len() == sm.len()
            && sa.len() >= 2
            && sm[1] == 1
            && sa[0] == sm[0]
            && sa[2..] == sm[2..];
        if !compatible {
            return Err(CoreError::shape(format!("mul_bcast_c: {sa:?} vs {sm:?}")));
        }
        let channels = sa[1];
        let inner: usize = sa[2..].iter().product();
        let batch = sa[0];
        let av = self.value(a).data();
        let mv = self.value(m).data();
        let mut out = vec![0.0; av.len()];
        for n in 0..batch {
            for c in 0..channels {
                let ao = (n * channels + c) * inner;
                let mo = n * inner;
                for i in 0..inner {
                    out[ao + i] = av[ao + i] * mv[mo + i];
                }
            }
        }
        Ok(self.record(
            Tensor::new(sa.clone(), out),
            &[a, m],
            Box::new(move |vals, g| {
                let av = vals[a.0].data();
                let mv = vals[m.0].data();
                let mut da = vec![0.0; av.len()];
                let mut dm = vec![0.0; mv.len()];
                for n in 0..batch {
                    for c in 0..channels {
                        let ao = (n * channels + c) * inner;
                        let mo = n * inner;
                        for i in 0..inner {
                            da[ao + i] = g[ao + i] * mv[mo + i];
                            dm[mo + i] += g[ao + i] * av[ao + i];
                        }
                    }
                }
                vec![(a.0, da), (m.0, dm)]
            }),
        ))
    }

    /// `k * x + b`, elementwise with scalar constants.
    pub fn affine(&mut self, a: TensorId, k: f64, b: f64) -> TensorId {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| k * x + b).collect();
        let shape = self.shape(a).to_vec();
        self.record(
            Tensor::new(shape, out),
            &[a],
            Box::new(move |_, g| vec![(a.0, g.iter().map(|v| k * v).collect())]),
        )
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        self.affine(a, k, 0.0)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).data().iter().sum();
        let n = self.value(a).numel();
        self.record(
            Tensor::scalar(s),
            &[a],
            Box::new(move |_, g| vec![(a.0, vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Integer power, `n >= 1`.
    pub fn powi(&mut self, a: TensorId, n: i32) -> TensorId {
        assert!(n >= 1);
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.powi(n)).collect();
        let shape = self.shape(a).to_vec();
        self.record(
            Tensor::new(shape, out),
            &[a],
            Box::new(move |vals, g| {
                let d: Vec<f64> = vals[a.0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(x, gi)| gi * n as f64 * x.powi(n - 1))
                    .collect();
                vec![(a.0, d)]
            }),
        )
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        self.record(
            Tensor::new(shape, out),
            &[a],
            Box::new(move |vals, g| {
                let d: Vec<f64> = vals[a.0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(x, gi)| gi * x.signum() * ((*x != 0.0) as i32 as f64))
                    .collect();
                vec![(a.0, d)]
            }),
        )
    }

    /// `ln(max(x, eps))`; zero gradient in the clamped region.
    pub fn log_clamped(&mut self, a: TensorId, eps: f64) -> TensorId {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.max(eps).ln()).collect();
        let shape = self.shape(a).to_vec();
        self.record(
            Tensor::new(shape, out),
            &[a],
            Box::new(move |vals, g| {
                let d: Vec<f64> = vals[a.0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(x, gi)| if *x > eps { gi / x } else { 0.0 })
                    .collect();
                vec![(a.0, d)]
            }),
        )
    }

    // ---- activations ----------------------------------------------------

    /// Exact-erf GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.record(
            Tensor::new(shape, out),
            &[a],
            Box::new(move |vals, g| {
                let d: Vec<f64> = vals[a.0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| gi * gelu_grad_f(x))
                    .collect();
                vec![(a.0, d)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| sigmoid_f(x)).collect();
        let shape = self.shape(a).to_vec();
        let out_t = Tensor::new(shape, out);
        let saved = out_t.clone();
        self.record(
            out_t,
            &[a],
            Box::new(move |_, g| {
                let d: Vec<f64> = saved
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(s, gi)| gi * s * (1.0 - s))
                    .collect();
                vec![(a.0, d)]
            }),
        )
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(CoreError::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).reshaped(shape);
        Ok(self.record(out, &[a], Box::new(move |_, g| vec![(a.0, g.to_vec())])))
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat of zero tensors"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::shape(format!("concat axis {axis} of {first:?}")));
        }
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(CoreError::shape(format!("concat {s:?} with {first:?}")));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let axis_sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        let total_axis: usize = axis_sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offset = 0usize;
        for (p, &asz) in parts.iter().zip(&axis_sizes) {
            let src = self.value(*p).data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * asz * inner;
                out[dst_base..dst_base + asz * inner]
                    .copy_from_slice(&src[src_base..src_base + asz * inner]);
            }
            offset += asz;
        }
        let parent_ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.record(
            Tensor::new(shape, out),
            parts,
            Box::new(move |vals, g| {
                let mut contribs = Vec::with_capacity(parent_ids.len());
                let mut offset = 0usize;
                for (&pid, &asz) in parent_ids.iter().zip(&axis_sizes) {
                    let mut d = vec![0.0; vals[pid].numel()];
                    for o in 0..outer {
                        let src_base = (o * total_axis + offset) * inner;
                        let dst_base = o * asz * inner;
                        d[dst_base..dst_base + asz * inner]
                            .copy_from_slice(&g[src_base..src_base + asz * inner]);
                    }
                    contribs.push((pid, d));
                    offset += asz;
                }
                contribs
            }),
        ))
    }

    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(CoreError::shape(format!(
                "slice axis {axis} [{start}, {start}+{len}) of {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let asz = s[axis];
        let mut shape = s.clone();
        shape[axis] = len;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * asz + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let total = self.value(a).numel();
        Ok(self.record(
            Tensor::new(shape, out),
            &[a],
            Box::new(move |_, g| {
                let mut d = vec![0.0; total];
                for o in 0..outer {
                    let dst_base = (o * asz + start) * inner;
                    let src_base = o * len * inner;
                    d[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                vec![(a.0, d)]
            }),
        ))
    }
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via erf.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_f(x: f64) -> f64 {
    x * norm_cdf(x)
}

fn gelu_grad_f(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    norm_cdf(x) + x * pdf
}
