//! Dynamically recorded reverse-mode tape.
//!
//! Every [`Var`] carries its value. When the tape is recording and at least one
//! input requires a gradient, the producing operation is appended to the tape
//! together with the inputs its backward rule needs. Inference tapes record
//! nothing, so intermediate values are freed as soon as their `Var` drops.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone)]
pub(crate) struct Input<T: Real> {
    pub node: Option<usize>,
    pub value: Rc<Tensor<T>>,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(Input<T>, Input<T>),
    /// `b`'s shape is a suffix of `a`'s shape.
    AddBroadcast(Input<T>, Input<T>),
    Mul(Input<T>, Input<T>),
    Scale(Input<T>, T),
    MatMul {
        a: Input<T>,
        b: Input<T>,
        trans_b: bool,
    },
    Bmm {
        a: Input<T>,
        b: Input<T>,
        trans_b: bool,
    },
    Reshape(Input<T>),
    Permute(Input<T>, Vec<usize>),
    Relu(Input<T>),
    Gelu(Input<T>),
    /// Backward uses the node's own output.
    Softmax(Input<T>),
    Normalize {
        x: Input<T>,
        gamma: Input<T>,
        beta: Input<T>,
        xhat: Vec<T>,
        rstd: Vec<T>,
        layout: NormLayout,
    },
    Conv2d {
        x: Input<T>,
        w: Input<T>,
        geom: ConvGeom,
    },
    Embedding {
        table: Input<T>,
        ids: Rc<Vec<usize>>,
    },
    CrossEntropy {
        logits: Input<T>,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Sum(Input<T>),
}

/// How normalization groups map onto a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) enum NormLayout {
    /// Layer norm: contiguous rows of length `d`; affine per column.
    Rows { d: usize },
    /// Batch norm: `[n, c, s]`; statistics per channel over batch and space.
    /// `batch_stats == false` means fixed (running) statistics.
    Channels {
        n: usize,
        c: usize,
        s: usize,
        batch_stats: bool,
    },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// A computation tape. Create one per forward pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    /// Running hash of the sign pattern at every ReLU input, when enabled.
    kinks: Option<Cell<u64>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records operations for a later [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            kinks: None,
        }
    }

    /// A tape that never records; leaves behave as constants.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            kinks: None,
        }
    }

    /// A non-recording tape that fingerprints which side of zero every ReLU
    /// input falls on.
    pub(crate) fn inference_with_kink_tracking() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            kinks: Some(Cell::new(0xcbf2_9ce4_8422_2325)),
        }
    }

    pub(crate) fn note_kinks(&self, inputs: &[T]) {
        if let Some(h) = &self.kinks {
            let mut v = h.get();
            for &x in inputs {
                v = (v ^ u64::from(x > T::ZERO)).wrapping_mul(0x0100_0000_01b3);
            }
            h.set(v);
        }
    }

    pub(crate) fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(Cell::get)
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value))
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        if !self.recording {
            return Var {
                tape: self,
                node: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
        });
        Var {
            tape: self,
            node: Some(nodes.len() - 1),
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub(crate) fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        Var {
            tape: self,
            node: None,
            value,
        }
    }

    /// Wraps an op result; records it only if some input is tracked.
    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let value = Rc::new(value);
        if !(self.recording && tracked) {
            return Var {
                tape: self,
                node: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            op,
        });
        Var {
            tape: self,
            node: Some(nodes.len() - 1),
            value,
        }
    }

    /// Propagates d(output)/d(node) from a scalar output back to every tracked node.
    pub fn backward(&self, output: &Var<'_, T>) -> Result<Gradients<T>> {
        if output.value.len() != 1 {
            return Err(Error::pre("backward", "output must be a scalar"));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = output.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(vec![T::ONE]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `var`, shaped like its value.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        let node = var.node?;
        let g = self.grads.get(node)?.as_ref()?;
        Some(Tensor::new(var.value.shape(), g.clone()).expect("gradient shape"))
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    input: &Input<T>,
    f: impl FnOnce(&mut [T]),
) {
    if let Some(n) = input.node {
        let slot = grads[n].get_or_insert_with(|| vec![T::ZERO; input.value.len()]);
        f(slot);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop<T: Real>(op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, a, |d| add_into(d, g));
            accumulate(grads, b, |d| add_into(d, g));
        }
        Op::AddBroadcast(a, b) => {
            accumulate(grads, a, |d| add_into(d, g));
            let bl = b.value.len();
            accumulate(grads, b, |d| {
                for chunk in g.chunks(bl) {
                    add_into(d, chunk);
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (a.value.data(), b.value.data());
            accumulate(grads, a, |d| {
                for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(bv) {
                    *d += gv * bv;
                }
            });
            accumulate(grads, b, |d| {
                for ((d, &gv), &av) in d.iter_mut().zip(g).zip(av) {
                    *d += gv * av;
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, a, |d| {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d += gv * *c;
            }
        }),
        Op::MatMul { a, b, trans_b } => {
            let k = a.value.last_dim();
            let m = a.value.len() / k;
            let n = out.last_dim();
            let (av, bv) = (a.value.data(), b.value.data());
            accumulate(grads, a, |d| {
                // da[m,k] += g[m,n] * b^T  (b is [k,n], or [n,k] when transposed)
                let (rsb, csb) = if *trans_b { (k, 1) } else { (1, n) };
                T::gemm(m, n, k, T::ONE, g, n, 1, bv, rsb, csb, T::ONE, d, k, 1);
            });
            accumulate(grads, b, |d| {
                if *trans_b {
                    // db[n,k] += g^T[n,m] * a[m,k]
                    T::gemm(n, m, k, T::ONE, g, 1, n, av, k, 1, T::ONE, d, k, 1);
                } else {
                    // db[k,n] += a^T[k,m] * g[m,n]
                    T::gemm(k, m, n, T::ONE, av, 1, k, g, n, 1, T::ONE, d, n, 1);
                }
            });
        }
        Op::Bmm { a, b, trans_b } => {
            let sa = a.value.shape();
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = out.shape()[2];
            let (av, bv) = (a.value.data(), b.value.data());
            accumulate(grads, a, |d| {
                let (rsb, csb) = if *trans_b { (k, 1) } else { (1, n) };
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        &g[i * m * n..],
                        n,
                        1,
                        &bv[i * k * n..],
                        rsb,
                        csb,
                        T::ONE,
                        &mut d[i * m * k..],
                        k,
                        1,
                    );
                }
            });
            accumulate(grads, b, |d| {
                for i in 0..batch {
                    let (gi, ai, di) = (&g[i * m * n..], &av[i * m * k..], &mut d[i * k * n..]);
                    if *trans_b {
                        T::gemm(n, m, k, T::ONE, gi, 1, n, ai, k, 1, T::ONE, di, k, 1);
                    } else {
                        T::gemm(k, m, n, T::ONE, ai, 1, k, gi, n, 1, T::ONE, di, n, 1);
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, a, |d| add_into(d, g)),
        Op::Permute(a, perm) => {
            let inv = kernels::inverse_perm(perm);
            let back = kernels::permute(g, out.shape(), &inv);
            accumulate(grads, a, |d| add_into(d, &back));
        }
        Op::Relu(a) => {
            let av = a.value.data();
            accumulate(grads, a, |d| {
                for ((d, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                    if x > T::ZERO {
                        *d += gv;
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = a.value.data();
            accumulate(grads, a, |d| {
                for ((d, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                    *d += gv * kernels::gelu_grad(x);
                }
            });
        }
        Op::Softmax(a) => {
            let cols = out.last_dim();
            accumulate(grads, a, |d| kernels::softmax_backward(out.data(), g, cols, d));
        }
        Op::Normalize {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            layout,
        } => backprop_normalize(x, gamma, beta, xhat, rstd, *layout, g, grads),
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (x.value.data(), w.value.data());
            let mut dx = x.node.map(|_| vec![T::ZERO; xv.len()]);
            let mut dw = w.node.map(|_| vec![T::ZERO; wv.len()]);
            geom.backward(xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut());
            if let Some(dx) = dx {
                accumulate(grads, x, |d| add_into(d, &dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, w, |d| add_into(d, &dw));
            }
        }
        Op::Embedding { table, ids } => {
            let dim = table.value.last_dim();
            accumulate(grads, table, |d| {
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * dim..(id + 1) * dim], &g[row * dim..(row + 1) * dim]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            count,
        } => {
            let v = logits.value.last_dim();
            let scale = g[0] / T::from_f64(*count as f64);
            accumulate(grads, logits, |d| {
                for (row, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let dr = &mut d[row * v..(row + 1) * v];
                    for (j, (dv, &p)) in dr.iter_mut().zip(&probs[row * v..(row + 1) * v]).enumerate() {
                        let y = if j == t { T::ONE } else { T::ZERO };
                        *dv += (p - y) * scale;
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(grads, a, |d| {
            for dv in d.iter_mut() {
                *dv += g[0];
            }
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_normalize<T: Real>(
    x: &Input<T>,
    gamma: &Input<T>,
    beta: &Input<T>,
    xhat: &[T],
    rstd: &[T],
    layout: NormLayout,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let gam = gamma.value.data();
    match layout {
        NormLayout::Rows { d } => {
            accumulate(grads, gamma, |dg| {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((dv, &gv), &xv) in dg.iter_mut().zip(gr).zip(xr) {
                        *dv += gv * xv;
                    }
                }
            });
            accumulate(grads, beta, |db| {
                for gr in g.chunks(d) {
                    add_into(db, gr);
                }
            });
            if x.node.is_some() {
                let gx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * gam[i % d])
                    .collect();
                accumulate(grads, x, |dx| kernels::normalize_backward_rows(xhat, &gx, rstd, d, dx));
            }
        }
        NormLayout::Channels {
            n,
            c,
            s,
            batch_stats,
        } => {
            let chan = |i: usize| (i / s) % c;
            accumulate(grads, gamma, |dg| {
                for (i, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
                    dg[chan(i)] += gv * xv;
                }
            });
            accumulate(grads, beta, |db| {
                for (i, &gv) in g.iter().enumerate() {
                    db[chan(i)] += gv;
                }
            });
            if x.node.is_some() {
                let gx: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * gam[chan(i)]).collect();
                accumulate(grads, x, |dx| {
                    if batch_stats {
                        // Gather each channel's values, run the row rule, scatter back.
                        let per = n * s;
                        let mut xh_c = vec![T::ZERO; per];
                        let mut g_c = vec![T::ZERO; per];
                        let mut d_c = vec![T::ZERO; per];
                        for ch in 0..c {
                            let mut j = 0;
                            for b in 0..n {
                                let base = (b * c + ch) * s;
                                xh_c[j..j + s].copy_from_slice(&xhat[base..base + s]);
                                g_c[j..j + s].copy_from_slice(&gx[base..base + s]);
                                j += s;
                            }
                            d_c.iter_mut().for_each(|v| *v = T::ZERO);
                            kernels::normalize_backward_rows(&xh_c, &g_c, &rstd[ch..ch + 1], per, &mut d_c);
                            let mut j = 0;
                            for b in 0..n {
                                let base = (b * c + ch) * s;
                                add_into(&mut dx[base..base + s], &d_c[j..j + s]);
                                j += s;
                            }
                        }
                    } else {
                        for (i, (dv, &gv)) in dx.iter_mut().zip(&gx).enumerate() {
                            *dv += gv * rstd[chan(i)];
                        }
                    }
                });
            }
        }
    }
}

/// A value on a [`Tape`], possibly tracked for differentiation.
#[derive(Clone)]
pub struct Var<'t, T: Real = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) node: Option<usize>,
    pub(crate) value: Rc<Tensor<T>>,
}

impl<'t, T: Real> std::fmt::Debug for Var<'t, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn input(&self) -> Input<T> {
        Input {
            node: self.node,
            value: self.value.clone(),
        }
    }

    pub(crate) fn derive(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'t, T> {
        self.tape.push(value, op, tracked)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        let data = self
            .value
            .data()
            .iter()
            .zip(other.value.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let t = Tensor::new(self.shape(), data)?;
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.derive(t, Op::Add(self.input(), other.input()), tracked))
    }

    /// Adds `other` repeated over the leading axes; its shape must be a suffix of ours.
    pub fn add_broadcast(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(Error::shape("add_broadcast", s, o));
        }
        let ol = other.value.len();
        let ov = other.value.data();
        let data = self
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + ov[i % ol])
            .collect();
        let t = Tensor::new(s, data)?;
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.derive(t, Op::AddBroadcast(self.input(), other.input()), tracked))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mul", self.shape(), other.shape()));
        }
        let data = self
            .value
            .data()
            .iter()
            .zip(other.value.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let t = Tensor::new(self.shape(), data)?;
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.derive(t, Op::Mul(self.input(), other.input()), tracked))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let t = self.value.map(|v| v * c);
        self.derive(t, Op::Scale(self.input(), c), self.is_tracked())
    }

    pub fn sum(&self) -> Var<'t, T> {
        let t = Tensor::scalar(self.value.sum());
        self.derive(t, Op::Sum(self.input()), self.is_tracked())
    }

    /// `[..., k] x [k, n] -> [..., n]`, or `[n, k]` when `trans_b`.
    pub fn matmul(&self, w: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let ws = w.shape();
        let k = self.value.last_dim();
        if ws.len() != 2 || self.value.rank() == 0 {
            return Err(Error::shape("matmul", self.shape(), ws));
        }
        let (wk, n) = if trans_b { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        if wk != k {
            return Err(Error::shape("matmul", self.shape(), ws));
        }
        let m = self.value.len() / k;
        let data = kernels::matmul(self.value.data(), w.value.data(), m, k, n, trans_b);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let t = Tensor::new(&shape, data)?;
        let tracked = self.is_tracked() || w.is_tracked();
        Ok(self.derive(
            t,
            Op::MatMul {
                a: self.input(),
                b: w.input(),
                trans_b,
            },
            tracked,
        ))
    }

    /// Batched `[g, m, k] x [g, k, n]` (or `[g, n, k]` when `trans_b`).
    pub fn bmm(&self, other: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if bk != k {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (av, bv) = (self.value.data(), other.value.data());
        let mut data = vec![T::ZERO; g * m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                &av[i * m * k..],
                k,
                1,
                &bv[i * k * n..],
                rsb,
                csb,
                T::ZERO,
                &mut data[i * m * n..],
                n,
                1,
            );
        }
        let t = Tensor::new(&[g, m, n], data)?;
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.derive(
            t,
            Op::Bmm {
                a: self.input(),
                b: other.input(),
                trans_b,
            },
            tracked,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        if numel(shape) != self.value.len() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        let t = Tensor::new(shape, self.value.data().to_vec())?;
        Ok(self.derive(t, Op::Reshape(self.input()), self.is_tracked()))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let rank = self.value.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::pre("permute", format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = kernels::permute(self.value.data(), self.shape(), perm);
        let t = Tensor::new(&shape, data)?;
        Ok(self.derive(t, Op::Permute(self.input(), perm.to_vec()), self.is_tracked()))
    }
}
