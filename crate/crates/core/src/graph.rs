//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Graph` is a tape: every op executes eagerly when recorded, the node
//! list is therefore already in topological order, and `backward` walks it
//! once in reverse. Graphs are rebuilt per forward pass and are
//! single-threaded; trainable leaves are `SharedTensor`s whose `grad`
//! buffers receive the accumulated gradients after backward.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, SharedTensor, Tensor};

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    AddRow { a: usize, v: usize },
    MulRow { a: usize, v: usize },
    RowScale { a: usize, v: usize },
    RowSum { a: usize },
    Recip { a: usize },
    Silu { a: usize },
    Softplus { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    SoftmaxLast { a: usize },
    LayerNormLast { a: usize, rstd: Vec<T> },
    RmsNormLast { a: usize, rrms: Vec<T> },
    ConcatRows { a: usize, b: usize },
    SliceRows { a: usize, start: usize },
    Reshape { a: usize },
    SplitHeads { a: usize, heads: usize },
    MergeHeads { a: usize },
    HeadScale { a: usize, g: usize },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    ScatterRows { a: usize, idx: Rc<Vec<usize>> },
    GatherElems { a: usize, pairs: Rc<Vec<(usize, usize)>> },
    Patchify { a: usize, p: usize },
    Unpatchify { a: usize, chans: usize, h: usize, w: usize, p: usize },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::RowScale { .. } => "row_scale",
            Op::RowSum { .. } => "row_sum",
            Op::Recip { .. } => "recip",
            Op::Silu { .. } => "silu",
            Op::Softplus { .. } => "softplus",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::SoftmaxLast { .. } => "softmax",
            Op::LayerNormLast { .. } => "layer_norm",
            Op::RmsNormLast { .. } => "rms_norm",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape { .. } => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::HeadScale { .. } => "head_scale",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::Patchify { .. } => "patchify",
            Op::Unpatchify { .. } => "unpatchify",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Autodiff tape. Rebuilt per forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    watched: RefCell<Vec<(usize, SharedTensor<T>)>>,
    watched_by_ptr: RefCell<HashMap<*const (), usize>>,
    forward_count: Cell<u64>,
}

/// Handle to a node in a `Graph`.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    idx: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            watched: RefCell::new(Vec::new()),
            watched_by_ptr: RefCell::new(HashMap::new()),
            forward_count: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of ops recorded (excluding leaves); a cheap structural probe.
    pub fn op_count(&self) -> u64 {
        self.forward_count.get()
    }

    fn push(&self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Result<Var<'_, T>> {
        value
            .check_finite(op.name())
            .map_err(|_| Error::NonFinite { op: op.name() })?;
        if !matches!(op, Op::Leaf) {
            self.forward_count.set(self.forward_count.get() + 1);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var {
            graph: self,
            idx: nodes.len() - 1,
        })
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf backed by a shared tensor; grads are written back to
    /// `source.grad` after backward. Watching the same tensor twice returns
    /// the same node, so shared parameters accumulate correctly.
    pub fn param(&self, source: &SharedTensor<T>) -> Result<Var<'_, T>> {
        let key = Rc::as_ptr(source) as *const ();
        if let Some(&idx) = self.watched_by_ptr.borrow().get(&key) {
            return Ok(Var { graph: self, idx });
        }
        let value = source.borrow().clone();
        let var = self.push(value, true, Op::Leaf)?;
        self.watched.borrow_mut().push((var.idx, source.clone()));
        self.watched_by_ptr.borrow_mut().insert(key, var.idx);
        Ok(var)
    }

    /// Leaf from a shared tensor without gradient tracking.
    pub fn frozen(&self, source: &SharedTensor<T>) -> Result<Var<'_, T>> {
        self.constant(source.borrow().clone())
    }

    pub fn tensor(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn with_value<R>(&self, v: Var<'_, T>, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.idx].value)
    }

    /// Gradient held at a node after backward (before write-back scaling).
    pub fn grad_of(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.idx];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Reverse pass from a scalar loss with seed 1.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.backward_scaled(loss, T::one())
    }

    /// Reverse pass seeding d(loss)/d(loss) = `seed` (used for batch
    /// averaging across per-sample graphs).
    pub fn backward_scaled(&self, loss: Var<'_, T>, seed: T) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            if nodes[loss.idx].value.numel() != 1 {
                return Err(Error::usage(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    nodes[loss.idx].value.shape()
                )));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[loss.idx].grad = Some(vec![seed]);

        // The tape is in creation order, which is topological: walk once in
        // reverse, scattering each node's grad to its parents.
        for i in (0..nodes.len()).rev() {
            if nodes[i].grad.is_none() || !nodes[i].needs_grad {
                continue;
            }
            backprop_node(&mut nodes, i);
        }

        for (idx, shared) in self.watched.borrow().iter() {
            if let Some(g) = &nodes[*idx].grad {
                shared.borrow_mut().accumulate_grad(g);
            }
        }
        Ok(())
    }
}

/// Take the grad of node `i` and accumulate contributions into its parents.
fn backprop_node<T: Scalar>(nodes: &mut [Node<T>], i: usize) {
    let g = nodes[i].grad.take().expect("grad present");
    // Split borrows: parents always precede i on the tape.
    macro_rules! acc {
        ($idx:expr, $delta:expr) => {{
            let idx = $idx;
            if nodes[idx].needs_grad {
                let delta = $delta;
                match &mut nodes[idx].grad {
                    Some(buf) => {
                        for (b, d) in buf.iter_mut().zip(delta.iter()) {
                            *b += *d;
                        }
                    }
                    None => nodes[idx].grad = Some(delta),
                }
            }
        }};
    }

    match &nodes[i].op {
        Op::Leaf => {
            nodes[i].grad = Some(g); // keep leaf grads readable
        }
        &Op::Matmul { a, b, ta, tb } => {
            let (da, db) = matmul_backward(
                nodes[a].value.data(),
                nodes[a].value.shape(),
                nodes[b].value.data(),
                nodes[b].value.shape(),
                &g,
                ta,
                tb,
                nodes[a].needs_grad,
                nodes[b].needs_grad,
                1,
            );
            if let Some(da) = da {
                acc!(a, da);
            }
            if let Some(db) = db {
                acc!(b, db);
            }
        }
        &Op::Bmm { a, b, ta, tb } => {
            let batch = nodes[a].value.shape()[0];
            let (da, db) = matmul_backward(
                nodes[a].value.data(),
                &nodes[a].value.shape()[1..],
                nodes[b].value.data(),
                &nodes[b].value.shape()[1..],
                &g,
                ta,
                tb,
                nodes[a].needs_grad,
                nodes[b].needs_grad,
                batch,
            );
            if let Some(da) = da {
                acc!(a, da);
            }
            if let Some(db) = db {
                acc!(b, db);
            }
        }
        &Op::Add { a, b } => {
            acc!(a, g.clone());
            acc!(b, g.clone());
        }
        &Op::Sub { a, b } => {
            acc!(a, g.clone());
            acc!(b, g.iter().map(|&v| -v).collect::<Vec<_>>());
        }
        &Op::Mul { a, b } => {
            if nodes[a].needs_grad {
                let bv = nodes[b].value.data();
                acc!(
                    a,
                    g.iter().zip(bv).map(|(&gv, &b)| gv * b).collect::<Vec<_>>()
                );
            }
            if nodes[b].needs_grad {
                let av = nodes[a].value.data();
                acc!(
                    b,
                    g.iter().zip(av).map(|(&gv, &a)| gv * a).collect::<Vec<_>>()
                );
            }
        }
        &Op::Scale { a, c } => {
            acc!(a, g.iter().map(|&v| v * c).collect::<Vec<_>>());
        }
        &Op::AddRow { a, v } => {
            acc!(a, g.clone());
            if nodes[v].needs_grad {
                let c = nodes[v].value.numel();
                let mut dv = vec![T::zero(); c];
                for row in g.chunks_exact(c) {
                    for (d, &gv) in dv.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                acc!(v, dv);
            }
        }
        &Op::MulRow { a, v } => {
            let c = nodes[v].value.numel();
            if nodes[a].needs_grad {
                let vv = nodes[v].value.data();
                let da: Vec<T> = g
                    .chunks_exact(c)
                    .flat_map(|row| row.iter().zip(vv).map(|(&gv, &s)| gv * s))
                    .collect();
                acc!(a, da);
            }
            if nodes[v].needs_grad {
                let av = nodes[a].value.data();
                let mut dv = vec![T::zero(); c];
                for (grow, arow) in g.chunks_exact(c).zip(av.chunks_exact(c)) {
                    for ((d, &gv), &x) in dv.iter_mut().zip(grow).zip(arow) {
                        *d += gv * x;
                    }
                }
                acc!(v, dv);
            }
        }
        &Op::RowScale { a, v } => {
            let rows = nodes[v].value.numel();
            let c = nodes[a].value.numel() / rows;
            if nodes[a].needs_grad {
                let sv = nodes[v].value.data();
                let da: Vec<T> = g
                    .chunks_exact(c)
                    .enumerate()
                    .flat_map(|(r, row)| row.iter().map(move |&gv| (r, gv)))
                    .map(|(r, gv)| gv * sv[r])
                    .collect();
                acc!(a, da);
            }
            if nodes[v].needs_grad {
                let av = nodes[a].value.data();
                let mut dv = vec![T::zero(); rows];
                for (r, (grow, arow)) in g.chunks_exact(c).zip(av.chunks_exact(c)).enumerate() {
                    let mut s = T::zero();
                    for (&gv, &x) in grow.iter().zip(arow) {
                        s += gv * x;
                    }
                    dv[r] = s;
                }
                acc!(v, dv);
            }
        }
        &Op::RowSum { a } => {
            let c = nodes[a].value.last_dim();
            let da: Vec<T> = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
            acc!(a, da);
        }
        &Op::Recip { a } => {
            let y = nodes[i].value.data();
            acc!(
                a,
                g.iter()
                    .zip(y)
                    .map(|(&gv, &yv)| -gv * yv * yv)
                    .collect::<Vec<_>>()
            );
        }
        &Op::Silu { a } => {
            let x = nodes[a].value.data();
            let da: Vec<T> = g
                .iter()
                .zip(x)
                .map(|(&gv, &xv)| {
                    let s = sigmoid(xv);
                    gv * (s + xv * s * (T::one() - s))
                })
                .collect();
            acc!(a, da);
        }
        &Op::Softplus { a } => {
            let x = nodes[a].value.data();
            let da: Vec<T> = g
                .iter()
                .zip(x)
                .map(|(&gv, &xv)| gv * sigmoid(xv))
                .collect();
            acc!(a, da);
        }
        &Op::SumAll { a } => {
            let n = nodes[a].value.numel();
            acc!(a, vec![g[0]; n]);
        }
        &Op::MeanAll { a } => {
            let n = nodes[a].value.numel();
            let s = g[0] * T::from_f64(1.0 / n as f64);
            acc!(a, vec![s; n]);
        }
        &Op::SoftmaxLast { a } => {
            let y = nodes[i].value.data();
            let c = nodes[i].value.last_dim();
            let mut da = vec![T::zero(); y.len()];
            for ((drow, yrow), grow) in da
                .chunks_exact_mut(c)
                .zip(y.chunks_exact(c))
                .zip(g.chunks_exact(c))
            {
                let mut dot = T::zero();
                for (&yv, &gv) in yrow.iter().zip(grow) {
                    dot += yv * gv;
                }
                for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d = yv * (gv - dot);
                }
            }
            acc!(a, da);
        }
        Op::LayerNormLast { a, rstd } => {
            let a = *a;
            let rstd = rstd.clone();
            let y = nodes[i].value.data();
            let c = nodes[i].value.last_dim();
            let inv_c = T::from_f64(1.0 / c as f64);
            let mut da = vec![T::zero(); y.len()];
            for (r, ((drow, yrow), grow)) in da
                .chunks_exact_mut(c)
                .zip(y.chunks_exact(c))
                .zip(g.chunks_exact(c))
                .enumerate()
            {
                let mut gmean = T::zero();
                let mut gymean = T::zero();
                for (&gv, &yv) in grow.iter().zip(yrow) {
                    gmean += gv;
                    gymean += gv * yv;
                }
                gmean *= inv_c;
                gymean *= inv_c;
                let r_std = rstd[r];
                for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = r_std * (gv - gmean - yv * gymean);
                }
            }
            acc!(a, da);
        }
        Op::RmsNormLast { a, rrms } => {
            let a = *a;
            let rrms = rrms.clone();
            let y = nodes[i].value.data();
            let c = nodes[i].value.last_dim();
            let inv_c = T::from_f64(1.0 / c as f64);
            let mut da = vec![T::zero(); y.len()];
            for (r, ((drow, yrow), grow)) in da
                .chunks_exact_mut(c)
                .zip(y.chunks_exact(c))
                .zip(g.chunks_exact(c))
                .enumerate()
            {
                let mut dot = T::zero();
                for (&gv, &yv) in grow.iter().zip(yrow) {
                    dot += gv * yv;
                }
                let k = dot * inv_c;
                let r_rms = rrms[r];
                for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = r_rms * (gv - yv * k);
                }
            }
            acc!(a, da);
        }
        &Op::ConcatRows { a, b } => {
            let na = nodes[a].value.numel();
            acc!(a, g[..na].to_vec());
            acc!(b, g[na..].to_vec());
        }
        &Op::SliceRows { a, start } => {
            let c = nodes[a].value.last_dim();
            let mut da = vec![T::zero(); nodes[a].value.numel()];
            let off = start * c;
            for (d, &gv) in da[off..off + g.len()].iter_mut().zip(&g) {
                *d = gv;
            }
            acc!(a, da);
        }
        &Op::Reshape { a } => {
            acc!(a, g.clone());
        }
        &Op::SplitHeads { a, heads } => {
            let shape = nodes[a].value.shape().to_vec();
            let (n, d) = (shape[0], shape[1]);
            let dh = d / heads;
            let mut da = vec![T::zero(); n * d];
            for h in 0..heads {
                for t in 0..n {
                    let src = (h * n + t) * dh;
                    let dst = t * d + h * dh;
                    for j in 0..dh {
                        da[dst + j] = g[src + j];
                    }
                }
            }
            acc!(a, da);
        }
        &Op::MergeHeads { a } => {
            let shape = nodes[a].value.shape().to_vec();
            let (heads, n, dh) = (shape[0], shape[1], shape[2]);
            let d = heads * dh;
            let mut da = vec![T::zero(); heads * n * dh];
            for h in 0..heads {
                for t in 0..n {
                    let dst = (h * n + t) * dh;
                    let src = t * d + h * dh;
                    for j in 0..dh {
                        da[dst + j] = g[src + j];
                    }
                }
            }
            acc!(a, da);
        }
        &Op::HeadScale { a, g: gains } => {
            let shape = nodes[a].value.shape().to_vec();
            let (heads, n, dh) = (shape[0], shape[1], shape[2]);
            let per = n * dh;
            if nodes[a].needs_grad {
                let gv = nodes[gains].value.data().to_vec();
                let mut da = vec![T::zero(); heads * per];
                for h in 0..heads {
                    let gain = gv[h];
                    for j in 0..per {
                        da[h * per + j] = g[h * per + j] * gain;
                    }
                }
                acc!(a, da);
            }
            if nodes[gains].needs_grad {
                let av = nodes[a].value.data();
                let mut dg = vec![T::zero(); heads];
                for h in 0..heads {
                    let mut s = T::zero();
                    for j in 0..per {
                        s += g[h * per + j] * av[h * per + j];
                    }
                    dg[h] = s;
                }
                acc!(gains, dg);
            }
        }
        Op::GatherRows { a, idx } => {
            let a = *a;
            let idx = idx.clone();
            let c = nodes[a].value.last_dim();
            let mut da = vec![T::zero(); nodes[a].value.numel()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    da[src * c + j] += g[r * c + j];
                }
            }
            acc!(a, da);
        }
        Op::ScatterRows { a, idx } => {
            let a = *a;
            let idx = idx.clone();
            let c = nodes[a].value.last_dim();
            let mut da = vec![T::zero(); nodes[a].value.numel()];
            for (r, &dst) in idx.iter().enumerate() {
                for j in 0..c {
                    da[r * c + j] += g[dst * c + j];
                }
            }
            acc!(a, da);
        }
        Op::GatherElems { a, pairs } => {
            let a = *a;
            let pairs = pairs.clone();
            let c = nodes[a].value.last_dim();
            let mut da = vec![T::zero(); nodes[a].value.numel()];
            for (out, &(r, col)) in pairs.iter().enumerate() {
                da[r * c + col] += g[out];
            }
            acc!(a, da);
        }
        &Op::Patchify { a, p } => {
            let shape = nodes[a].value.shape().to_vec();
            let (chans, h, w) = (shape[0], shape[1], shape[2]);
            let mut da = vec![T::zero(); chans * h * w];
            patch_permute(&g, &mut da, chans, h, w, p, true);
            acc!(a, da);
        }
        &Op::Unpatchify { a, chans, h, w, p } => {
            let mut da = vec![T::zero(); chans * h * w / (p * p) * (p * p)];
            // backward of unpatchify = patchify of grad
            let mut tokens = vec![T::zero(); chans * h * w];
            tokens.copy_from_slice(&g);
            patch_permute(&tokens, &mut da, chans, h, w, p, false);
            acc!(a, da);
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x.to_f64() >= 0.0 {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Move data between latent layout [C,H,W] and token layout [N, p·p·C].
/// `to_latent` scatters tokens back into the latent buffer; otherwise
/// latent data in `src` is gathered into token order in `dst`.
fn patch_permute<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    chans: usize,
    h: usize,
    w: usize,
    p: usize,
    to_latent: bool,
) {
    let gw = w / p;
    let gh = h / p;
    let feat = p * p * chans;
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            for c in 0..chans {
                for dy in 0..p {
                    for dx in 0..p {
                        let f = c * p * p + dy * p + dx;
                        let latent_idx = c * h * w + (gy * p + dy) * w + (gx * p + dx);
                        let token_idx = token * feat + f;
                        if to_latent {
                            dst[latent_idx] = src[token_idx];
                        } else {
                            dst[token_idx] = src[latent_idx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    g: &[T],
    ta: bool,
    tb: bool,
    need_a: bool,
    need_b: bool,
    batch: usize,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    // effective dims: opA(A)=[m,k], opB(B)=[k,n]
    let (m, k) = if ta {
        (a_shape[1], a_shape[0])
    } else {
        (a_shape[0], a_shape[1])
    };
    let n = if tb { b_shape[0] } else { b_shape[1] };
    let a_sz = a_shape[0] * a_shape[1];
    let b_sz = b_shape[0] * b_shape[1];
    let g_sz = m * n;

    let mut da = if need_a {
        Some(vec![T::zero(); a_sz * batch])
    } else {
        None
    };
    let mut db = if need_b {
        Some(vec![T::zero(); b_sz * batch])
    } else {
        None
    };

    for bi in 0..batch {
        let ab = &a[bi * a_sz..(bi + 1) * a_sz];
        let bb = &b[bi * b_sz..(bi + 1) * b_sz];
        let gb = &g[bi * g_sz..(bi + 1) * g_sz];
        if let Some(da) = &mut da {
            let dab = &mut da[bi * a_sz..(bi + 1) * a_sz];
            match (ta, tb) {
                (false, false) => matmul_acc(gb, bb, dab, m, n, k, false, true),
                (false, true) => matmul_acc(gb, bb, dab, m, n, k, false, false),
                (true, false) => matmul_acc(bb, gb, dab, k, n, m, false, true),
                (true, true) => matmul_acc(bb, gb, dab, k, n, m, true, true),
            }
        }
        if let Some(db) = &mut db {
            let dbb = &mut db[bi * b_sz..(bi + 1) * b_sz];
            match (ta, tb) {
                (false, false) => matmul_acc(ab, gb, dbb, k, m, n, true, false),
                (true, false) => matmul_acc(ab, gb, dbb, k, m, n, false, false),
                (false, true) => matmul_acc(gb, ab, dbb, n, m, k, true, false),
                (true, true) => matmul_acc(gb, ab, dbb, n, m, k, true, true),
            }
        }
    }
    (da, db)
}

// ── Var ops ──────────────────────────────────────────────────────────

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_value(*self, |t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.graph.with_value(*self, |t| t.numel())
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.tensor(*self)
    }

    pub fn item(&self) -> T {
        self.graph.with_value(*self, |t| t.item())
    }

    fn nodes(&self) -> std::cell::Ref<'g, Vec<Node<T>>> {
        self.graph.nodes.borrow()
    }

    fn needs(&self) -> bool {
        self.nodes()[self.idx].needs_grad
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    /// 2D matrix product, with optional transposes of the stored operands.
    pub fn matmul_t(self, rhs: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        self.same_graph(&rhs);
        let (value, needs) = {
            let nodes = self.nodes();
            let av = &nodes[self.idx].value;
            let bv = &nodes[rhs.idx].value;
            if av.shape().len() != 2 || bv.shape().len() != 2 {
                return Err(Error::shape(format!(
                    "matmul wants 2D operands, got {:?} x {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let (m, k) = if ta {
                (av.shape()[1], av.shape()[0])
            } else {
                (av.shape()[0], av.shape()[1])
            };
            let (kb, n) = if tb {
                (bv.shape()[1], bv.shape()[0])
            } else {
                (bv.shape()[0], bv.shape()[1])
            };
            if k != kb {
                return Err(Error::shape(format!(
                    "matmul inner dims mismatch: {:?} x {:?} (ta={ta}, tb={tb})",
                    av.shape(),
                    bv.shape()
                )));
            }
            let mut out = vec![T::zero(); m * n];
            matmul_acc(av.data(), bv.data(), &mut out, m, k, n, ta, tb);
            (
                Tensor::new(vec![m, n], out)?,
                nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad,
            )
        };
        self.graph.push(
            value,
            needs,
            Op::Matmul {
                a: self.idx,
                b: rhs.idx,
                ta,
                tb,
            },
        )
    }

    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(rhs, false, false)
    }

    /// Batched matmul over the leading axis of 3D operands.
    pub fn bmm(self, rhs: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        self.same_graph(&rhs);
        let (value, needs) = {
            let nodes = self.nodes();
            let av = &nodes[self.idx].value;
            let bv = &nodes[rhs.idx].value;
            let (asp, bsp) = (av.shape(), bv.shape());
            if asp.len() != 3 || bsp.len() != 3 || asp[0] != bsp[0] {
                return Err(Error::shape(format!(
                    "bmm wants 3D operands with equal batch, got {asp:?} x {bsp:?}"
                )));
            }
            let batch = asp[0];
            let (m, k) = if ta {
                (asp[2], asp[1])
            } else {
                (asp[1], asp[2])
            };
            let (kb, n) = if tb {
                (bsp[2], bsp[1])
            } else {
                (bsp[1], bsp[2])
            };
            if k != kb {
                return Err(Error::shape(format!(
                    "bmm inner dims mismatch: {asp:?} x {bsp:?} (ta={ta}, tb={tb})"
                )));
            }
            let a_sz = asp[1] * asp[2];
            let b_sz = bsp[1] * bsp[2];
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                matmul_acc(
                    &av.data()[bi * a_sz..(bi + 1) * a_sz],
                    &bv.data()[bi * b_sz..(bi + 1) * b_sz],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                );
            }
            (
                Tensor::new(vec![batch, m, n], out)?,
                nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad,
            )
        };
        self.graph.push(
            value,
            needs,
            Op::Bmm {
                a: self.idx,
                b: rhs.idx,
                ta,
                tb,
            },
        )
    }

    fn binary(
        self,
        rhs: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&rhs);
        let (value, needs) = {
            let nodes = self.nodes();
            let v = nodes[self.idx].value.zip(&nodes[rhs.idx].value, f)?;
            (v, nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad)
        };
        self.graph.push(value, needs, mk(self.idx, rhs.idx))
    }

    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            (nodes[self.idx].value.scale(c), nodes[self.idx].needs_grad)
        };
        self.graph.push(value, needs, Op::Scale { a: self.idx, c })
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.scale(-T::one())
    }

    fn rowwise(
        self,
        v: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&v);
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let vv = &nodes[v.idx].value;
            let c = vv.numel();
            if xv.last_dim() != c {
                return Err(Error::shape(format!(
                    "row broadcast mismatch: {:?} with row {:?}",
                    xv.shape(),
                    vv.shape()
                )));
            }
            let data: Vec<T> = xv
                .data()
                .chunks_exact(c)
                .flat_map(|row| row.iter().zip(vv.data()).map(|(&x, &s)| f(x, s)))
                .collect();
            (
                Tensor::new(xv.shape().to_vec(), data)?,
                nodes[self.idx].needs_grad || nodes[v.idx].needs_grad,
            )
        };
        self.graph.push(value, needs, mk(self.idx, v.idx))
    }

    /// Broadcast-add a [1,c] (or [c]) vector to every row.
    pub fn add_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        self.rowwise(v, |x, s| x + s, |a, v| Op::AddRow { a, v })
    }

    /// Broadcast-multiply every row by a [1,c] (or [c]) vector.
    pub fn mul_row(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        self.rowwise(v, |x, s| x * s, |a, v| Op::MulRow { a, v })
    }

    /// Multiply row i by scalar v[i]; v has one entry per row.
    pub fn row_scale(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&v);
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let vv = &nodes[v.idx].value;
            let rows = vv.numel();
            if xv.numel() % rows != 0 || xv.shape()[0] != rows {
                return Err(Error::shape(format!(
                    "row_scale mismatch: {:?} with {:?}",
                    xv.shape(),
                    vv.shape()
                )));
            }
            let c = xv.numel() / rows;
            let data: Vec<T> = xv
                .data()
                .chunks_exact(c)
                .zip(vv.data())
                .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                .collect();
            (
                Tensor::new(xv.shape().to_vec(), data)?,
                nodes[self.idx].needs_grad || nodes[v.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::RowScale { a: self.idx, v: v.idx })
    }

    /// Sum over the last axis: [r, c] -> [r, 1].
    pub fn row_sum(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let c = xv.last_dim();
            let rows = xv.numel() / c;
            let data: Vec<T> = xv
                .data()
                .chunks_exact(c)
                .map(|row| row.iter().copied().sum())
                .collect();
            (
                Tensor::new(vec![rows, 1], data)?,
                nodes[self.idx].needs_grad,
            )
        };
        self.graph.push(value, needs, Op::RowSum { a: self.idx })
    }

    pub fn recip(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            (
                nodes[self.idx].value.map(|x| T::one() / x),
                nodes[self.idx].needs_grad,
            )
        };
        self.graph.push(value, needs, Op::Recip { a: self.idx })
    }

    pub fn silu(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            (
                nodes[self.idx].value.map(|x| x * sigmoid(x)),
                nodes[self.idx].needs_grad,
            )
        };
        self.graph.push(value, needs, Op::Silu { a: self.idx })
    }

    /// ln(1 + e^x), computed stably.
    pub fn softplus(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let v = nodes[self.idx].value.map(|x| {
                let xf = x.to_f64();
                if xf > 30.0 {
                    x
                } else if xf < -30.0 {
                    x.exp()
                } else {
                    (T::one() + x.exp()).ln()
                }
            });
            (v, nodes[self.idx].needs_grad)
        };
        self.graph.push(value, needs, Op::Softplus { a: self.idx })
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let s: T = nodes[self.idx].value.data().iter().copied().sum();
            (Tensor::scalar(s), nodes[self.idx].needs_grad)
        };
        self.graph.push(value, needs, Op::SumAll { a: self.idx })
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let s: T = xv.data().iter().copied().sum();
            (
                Tensor::scalar(s * T::from_f64(1.0 / xv.numel() as f64)),
                nodes[self.idx].needs_grad,
            )
        };
        self.graph.push(value, needs, Op::MeanAll { a: self.idx })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let c = xv.last_dim();
            let mut data = vec![T::zero(); xv.numel()];
            for (out, row) in data.chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
                let mx = row.iter().fold(row[0], |m, &v| m.max_val(v));
                let mut z = T::zero();
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = (v - mx).exp();
                    z += *o;
                }
                let inv = T::one() / z;
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
            (
                Tensor::new(xv.shape().to_vec(), data)?,
                nodes[self.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::SoftmaxLast { a: self.idx })
    }

    /// Per-row mean-0 variance-1 normalization over the last axis.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g, T>> {
        let (value, needs, rstd) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let c = xv.last_dim();
            let rows = xv.numel() / c;
            let inv_c = T::from_f64(1.0 / c as f64);
            let epsv = T::from_f64(eps);
            let mut data = vec![T::zero(); xv.numel()];
            let mut rstds = Vec::with_capacity(rows);
            for (out, row) in data.chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
                let mut mu = T::zero();
                for &v in row {
                    mu += v;
                }
                mu *= inv_c;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mu;
                    var += d * d;
                }
                var *= inv_c;
                let rstd = T::one() / (var + epsv).sqrt();
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = (v - mu) * rstd;
                }
                rstds.push(rstd);
            }
            (
                Tensor::new(xv.shape().to_vec(), data)?,
                nodes[self.idx].needs_grad,
                rstds,
            )
        };
        self.graph.push(
            value,
            needs,
            Op::LayerNormLast { a: self.idx, rstd },
        )
    }

    /// Per-row RMS normalization over the last axis.
    pub fn rms_norm(self, eps: f64) -> Result<Var<'g, T>> {
        let (value, needs, rrms) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let c = xv.last_dim();
            let rows = xv.numel() / c;
            let inv_c = T::from_f64(1.0 / c as f64);
            let epsv = T::from_f64(eps);
            let mut data = vec![T::zero(); xv.numel()];
            let mut rrms = Vec::with_capacity(rows);
            for (out, row) in data.chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
                let mut ms = T::zero();
                for &v in row {
                    ms += v * v;
                }
                ms *= inv_c;
                let r = T::one() / (ms + epsv).sqrt();
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v * r;
                }
                rrms.push(r);
            }
            (
                Tensor::new(xv.shape().to_vec(), data)?,
                nodes[self.idx].needs_grad,
                rrms,
            )
        };
        self.graph
            .push(value, needs, Op::RmsNormLast { a: self.idx, rrms })
    }

    /// Concatenate along axis 0 (both operands share trailing dims).
    pub fn concat_rows(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs);
        let (value, needs) = {
            let nodes = self.nodes();
            let av = &nodes[self.idx].value;
            let bv = &nodes[rhs.idx].value;
            if av.shape()[1..] != bv.shape()[1..] {
                return Err(Error::shape(format!(
                    "concat_rows trailing dims mismatch: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let mut shape = av.shape().to_vec();
            shape[0] += bv.shape()[0];
            let mut data = Vec::with_capacity(av.numel() + bv.numel());
            data.extend_from_slice(av.data());
            data.extend_from_slice(bv.data());
            (
                Tensor::new(shape, data)?,
                nodes[self.idx].needs_grad || nodes[rhs.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::ConcatRows { a: self.idx, b: rhs.idx })
    }

    /// Rows [start, start+len) along axis 0.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            if start + len > xv.shape()[0] {
                return Err(Error::shape(format!(
                    "slice_rows {start}..{} out of bounds for {:?}",
                    start + len,
                    xv.shape()
                )));
            }
            let stride: usize = xv.shape()[1..].iter().product();
            let mut shape = xv.shape().to_vec();
            shape[0] = len;
            let data = xv.data()[start * stride..(start + len) * stride].to_vec();
            (Tensor::new(shape, data)?, nodes[self.idx].needs_grad)
        };
        self.graph
            .push(value, needs, Op::SliceRows { a: self.idx, start })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let v = nodes[self.idx].value.clone().reshaped(shape)?;
            (v, nodes[self.idx].needs_grad)
        };
        self.graph.push(value, needs, Op::Reshape { a: self.idx })
    }

    /// [n, h·dh] -> [h, n, dh] head-major layout for batched attention.
    pub fn split_heads(self, heads: usize) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let (n, d) = (xv.shape()[0], xv.shape()[1]);
            if d % heads != 0 {
                return Err(Error::shape(format!(
                    "split_heads: width {d} not divisible by {heads} heads"
                )));
            }
            let dh = d / heads;
            let mut data = vec![T::zero(); xv.numel()];
            let src = xv.data();
            for h in 0..heads {
                for t in 0..n {
                    let dst = (h * n + t) * dh;
                    let s = t * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
            (
                Tensor::new(vec![heads, n, dh], data)?,
                nodes[self.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::SplitHeads { a: self.idx, heads })
    }

    /// [h, n, dh] -> [n, h·dh], inverse of `split_heads`.
    pub fn merge_heads(self) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let (heads, n, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let d = heads * dh;
            let mut data = vec![T::zero(); xv.numel()];
            let src = xv.data();
            for h in 0..heads {
                for t in 0..n {
                    let s = (h * n + t) * dh;
                    let dst = t * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
            (
                Tensor::new(vec![n, d], data)?,
                nodes[self.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::MergeHeads { a: self.idx })
    }

    /// Scale each head slab of a [h, n, dh] tensor by gains[h].
    pub fn head_scale(self, gains: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&gains);
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let gv = &nodes[gains.idx].value;
            let heads = xv.shape()[0];
            if gv.numel() != heads {
                return Err(Error::shape(format!(
                    "head_scale wants {heads} gains, got {:?}",
                    gv.shape()
                )));
            }
            let per = xv.numel() / heads;
            let mut data = vec![T::zero(); xv.numel()];
            for h in 0..heads {
                let gain = gv.data()[h];
                for j in 0..per {
                    data[h * per + j] = xv.data()[h * per + j] * gain;
                }
            }
            (
                Tensor::new(xv.shape().to_vec(), data)?,
                nodes[self.idx].needs_grad || nodes[gains.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::HeadScale { a: self.idx, g: gains.idx })
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let rows = xv.shape()[0];
            let stride: usize = xv.shape()[1..].iter().product();
            if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
                return Err(Error::shape(format!(
                    "gather_rows index {bad} out of bounds for {rows} rows"
                )));
            }
            let mut shape = xv.shape().to_vec();
            shape[0] = idx.len();
            let mut data = Vec::with_capacity(idx.len() * stride);
            for &r in idx.iter() {
                data.extend_from_slice(&xv.data()[r * stride..(r + 1) * stride]);
            }
            (Tensor::new(shape, data)?, nodes[self.idx].needs_grad)
        };
        self.graph
            .push(value, needs, Op::GatherRows { a: self.idx, idx })
    }

    /// Place row i of self at row idx[i] of a zero tensor with `rows` rows;
    /// colliding indices add.
    pub fn scatter_rows(self, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            if xv.shape()[0] != idx.len() {
                return Err(Error::shape(format!(
                    "scatter_rows wants {} indices, got {}",
                    xv.shape()[0],
                    idx.len()
                )));
            }
            let stride: usize = xv.shape()[1..].iter().product();
            if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
                return Err(Error::shape(format!(
                    "scatter_rows index {bad} out of bounds for {rows} rows"
                )));
            }
            let mut shape = xv.shape().to_vec();
            shape[0] = rows;
            let mut data = vec![T::zero(); rows * stride];
            for (r, &dst) in idx.iter().enumerate() {
                for j in 0..stride {
                    data[dst * stride + j] += xv.data()[r * stride + j];
                }
            }
            (Tensor::new(shape, data)?, nodes[self.idx].needs_grad)
        };
        self.graph
            .push(value, needs, Op::ScatterRows { a: self.idx, idx })
    }

    /// Pick scalar entries (row, col) from a 2D tensor into a [len, 1] column.
    pub fn gather_elems(self, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
            let mut data = Vec::with_capacity(pairs.len());
            for &(r, c) in pairs.iter() {
                if r >= rows || c >= cols {
                    return Err(Error::shape(format!(
                        "gather_elems ({r},{c}) out of bounds for {:?}",
                        xv.shape()
                    )));
                }
                data.push(xv.data()[r * cols + c]);
            }
            (
                Tensor::new(vec![pairs.len(), 1], data)?,
                nodes[self.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::GatherElems { a: self.idx, pairs })
    }

    /// [C,H,W] -> [N, p·p·C] raw patch tokens, row-major over the patch grid.
    pub fn patchify(self, p: usize) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            if xv.shape().len() != 3 {
                return Err(Error::shape(format!(
                    "patchify wants [C,H,W], got {:?}",
                    xv.shape()
                )));
            }
            let (chans, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            if h % p != 0 || w % p != 0 {
                return Err(Error::shape(format!(
                    "patch size {p} does not divide latent {h}x{w}"
                )));
            }
            let n = (h / p) * (w / p);
            let mut data = vec![T::zero(); xv.numel()];
            patch_permute(xv.data(), &mut data, chans, h, w, p, false);
            (
                Tensor::new(vec![n, p * p * chans], data)?,
                nodes[self.idx].needs_grad,
            )
        };
        self.graph
            .push(value, needs, Op::Patchify { a: self.idx, p })
    }

    /// [N, p·p·C] -> [C,H,W], inverse of `patchify`.
    pub fn unpatchify(self, chans: usize, h: usize, w: usize, p: usize) -> Result<Var<'g, T>> {
        let (value, needs) = {
            let nodes = self.nodes();
            let xv = &nodes[self.idx].value;
            let n = (h / p) * (w / p);
            if xv.shape() != [n, p * p * chans] {
                return Err(Error::shape(format!(
                    "unpatchify wants [{n}, {}], got {:?}",
                    p * p * chans,
                    xv.shape()
                )));
            }
            let mut data = vec![T::zero(); chans * h * w];
            patch_permute(xv.data(), &mut data, chans, h, w, p, true);
            (
                Tensor::new(vec![chans, h, w], data)?,
                nodes[self.idx].needs_grad,
            )
        };
        self.graph.push(
            value,
            needs,
            Op::Unpatchify {
                a: self.idx,
                chans,
                h,
                w,
                p,
            },
        )
    }

    pub fn requires_grad(&self) -> bool {
        self.needs()
    }
}

// ── Composite ops ────────────────────────────────────────────────────

/// softmax(Q·Kᵀ/√d_h)·V per head; Q, K, V are [h, n, d_h].
pub fn scaled_dot_attention<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let qs = q.shape();
    if qs.len() != 3 || k.shape() != qs || v.shape() != qs {
        return Err(Error::shape(format!(
            "attention wants matching [h,n,dh] inputs, got {:?}/{:?}/{:?}",
            qs,
            k.shape(),
            v.shape()
        )));
    }
    let dh = qs[2];
    let logits = q
        .bmm(k, false, true)?
        .scale(T::from_f64(1.0 / (dh as f64).sqrt()))?;
    logits.softmax()?.bmm(v, false, false)
}

/// W_down·(silu(x·W_gate) ⊙ (x·W_up)): the gated feed-forward unit used by
/// every expert.
pub fn swiglu<'g, T: Scalar>(
    x: Var<'g, T>,
    w_gate: Var<'g, T>,
    w_up: Var<'g, T>,
    w_down: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let gate = x.matmul(w_gate)?.silu()?;
    let up = x.matmul(w_up)?;
    gate.mul(up)?.matmul(w_down)
}

/// Mean of squared differences over all elements.
pub fn mse<'g, T: Scalar>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    let d = pred.sub(target)?;
    d.mul(d)?.mean()
}
