//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; node ids are therefore
//! a topological order, and `backward` walks them once in reverse.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, Float, MatRef, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
    fn out_hw(&self) -> (usize, usize) {
        (
            self.height + 2 * self.pad + 1 - self.kernel,
            self.width + 2 * self.pad + 1 - self.kernel,
        )
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    dim: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<F>, rstd: Vec<F> },
    Gather { x: usize, index: Vec<usize> },
    Conv2d { x: usize, w: usize, b: usize, dims: ConvDims },
    Concat { a: usize, b: usize, outer: usize, inner_a: usize, inner_b: usize },
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<F> },
    ScaleByElem { x: usize, w: usize, index: usize },
    TopKRenorm { p: usize, selected: Vec<usize>, total: F },
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<F> },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    backward_done: Cell<bool>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    by_id: HashMap<usize, Vec<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&[F]> {
        self.by_id.get(&var.id).map(|g| g.as_slice())
    }

    /// Gradient for `var`, zero-filled if it did not influence the loss.
    pub fn wrt(&self, var: Var<'_, F>) -> Vec<F> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![F::zero(); numel(&var.shape())])
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], id: usize, g: Vec<F>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let one = F::one();
    let inner = c * (x + k * x * x * x);
    // tanh via exp: libm's tanh is several times slower and GELU dominates
    // elementwise cost in the FFN
    let two = F::from_f64(2.0);
    let th = one - two / ((two * inner).exp() + one);
    let value = half * x * (one + th);
    let deriv = half * (one + th)
        + half * x * (one - th * th) * c * (one + F::from_f64(3.0) * k * x * x);
    (value, deriv)
}

fn softmax_rows<F: Float>(data: &mut [F], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub fn top_k_indices<F: Float>(values: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    order
}

fn im2col<F: Float>(x: &[F], d: &ConvDims, b: usize, cols: &mut [F]) {
    let (oh, ow) = d.out_hw();
    let k = d.kernel;
    let base = b * d.cin * d.height * d.width;
    for c in 0..d.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - d.pad as isize;
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - d.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < d.height
                            && (ix as usize) < d.width
                        {
                            x[base + (c * d.height + iy as usize) * d.width + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Float>(cols: &[F], d: &ConvDims, b: usize, dx: &mut [F]) {
    let (oh, ow) = d.out_hw();
    let k = d.kernel;
    let base = b * d.cin * d.height * d.width;
    for c in 0..d.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - d.pad as isize;
                        if ix < 0 || ix as usize >= d.width {
                            continue;
                        }
                        dx[base + (c * d.height + iy as usize) * d.width + ix as usize] +=
                            src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), backward_done: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<F>,
        op: Op<F>,
        requires_grad: bool,
    ) -> Result<Var<'_, F>> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// A trainable leaf.
    pub fn param(&self, t: &Tensor<F>) -> Result<Var<'_, F>> {
        self.push("param", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, t: &Tensor<F>) -> Result<Var<'_, F>> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<F>) -> Result<Var<'_, F>> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} with {} values", data.len())));
        }
        self.push("constant", shape, data, Op::Leaf, false)
    }

    fn node(&self, id: usize) -> Ref<'_, Node<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Differentiates a scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        self.backward_done.set(true);
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    out.by_id.insert(id, g);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Add(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                    }
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.iter().map(|&v| v * *s).collect());
                }
                Op::AddBias(x, b) => {
                    if wants(*b) {
                        let c = nodes[*b].value.len();
                        let mut gb = vec![F::zero(); c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                    if wants(*a) {
                        // dA = G Bᵀ
                        let mut ga = vec![F::zero(); m * k];
                        gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            MatRef::row_major(&g, n),
                            MatRef::transposed(&nb.value, n),
                            F::zero(),
                            &mut ga,
                            0,
                            k,
                        );
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        // dB = Aᵀ G
                        let mut gb = vec![F::zero(); k * n];
                        gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            MatRef::transposed(&na.value, k),
                            MatRef::row_major(&g, n),
                            F::zero(),
                            &mut gb,
                            0,
                            n,
                        );
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let vx = &nodes[*x].value;
                    let gx = g
                        .iter()
                        .zip(vx)
                        .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let vx = &nodes[*x].value;
                    let gx = g.iter().zip(vx).map(|(&g, &v)| g * gelu_parts(v).1).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let cols = *node.shape.last().unwrap_or(&1);
                    let mut gx = vec![F::zero(); y.len()];
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let vx = &nodes[*x].value;
                    let vg = &nodes[*gamma].value;
                    let c = vg.len();
                    let cf = F::from_usize(c);
                    let mut gx = vec![F::zero(); vx.len()];
                    let mut ggamma = vec![F::zero(); c];
                    let mut gbeta = vec![F::zero(); c];
                    let mut xhat = vec![F::zero(); c];
                    let mut dxhat = vec![F::zero(); c];
                    for (r, (xr, gr)) in vx.chunks(c).zip(g.chunks(c)).enumerate() {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for j in 0..c {
                            xhat[j] = (xr[j] - mu) * rs;
                            dxhat[j] = gr[j] * vg[j];
                            ggamma[j] += gr[j] * xhat[j];
                            gbeta[j] += gr[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xhat[j];
                        }
                        let mean_d = sum_d / cf;
                        let mean_dx = sum_dx / cf;
                        for j in 0..c {
                            gx[r * c + j] = rs * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    if wants(*gamma) {
                        accumulate(&mut grads, *gamma, ggamma);
                    }
                    if wants(*beta) {
                        accumulate(&mut grads, *beta, gbeta);
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Gather { x, index } => {
                    let mut gx = vec![F::zero(); nodes[*x].value.len()];
                    for (&i, &gv) in index.iter().zip(&g) {
                        gx[i] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Conv2d { x, w, b, dims } => {
                    let d = *dims;
                    let (oh, ow) = d.out_hw();
                    let hw = oh * ow;
                    let patch = d.patch();
                    let vx = &nodes[*x].value;
                    let vw = &nodes[*w].value;
                    let mut cols = vec![F::zero(); patch * hw];
                    let mut dcols = vec![F::zero(); patch * hw];
                    let mut gw = vec![F::zero(); d.cout * patch];
                    let mut gb = vec![F::zero(); d.cout];
                    let mut gx = vec![F::zero(); vx.len()];
                    for bi in 0..d.batch {
                        let gout = &g[bi * d.cout * hw..(bi + 1) * d.cout * hw];
                        for (o, row) in gout.chunks(hw).enumerate() {
                            gb[o] += row.iter().copied().sum();
                        }
                        if wants(*w) {
                            im2col(vx, &d, bi, &mut cols);
                            gemm(
                                d.cout,
                                hw,
                                patch,
                                F::one(),
                                MatRef::row_major(gout, hw),
                                MatRef::transposed(&cols, hw),
                                F::one(),
                                &mut gw,
                                0,
                                patch,
                            );
                        }
                        if wants(*x) {
                            gemm(
                                patch,
                                d.cout,
                                hw,
                                F::one(),
                                MatRef::transposed(vw, patch),
                                MatRef::row_major(gout, hw),
                                F::zero(),
                                &mut dcols,
                                0,
                                hw,
                            );
                            col2im_add(&dcols, &d, bi, &mut gx);
                        }
                    }
                    if wants(*w) {
                        accumulate(&mut grads, *w, gw);
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Concat { a, b, outer, inner_a, inner_b } => {
                    let step = inner_a + inner_b;
                    if wants(*a) {
                        let mut ga = Vec::with_capacity(outer * inner_a);
                        for o in 0..*outer {
                            ga.extend_from_slice(&g[o * step..o * step + inner_a]);
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = Vec::with_capacity(outer * inner_b);
                        for o in 0..*outer {
                            gb.extend_from_slice(&g[o * step + inner_a..(o + 1) * step]);
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Attention { q, k, v, dims, probs } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        &nodes[*q].value,
                        &nodes[*k].value,
                        &nodes[*v].value,
                        probs,
                        dims,
                    );
                    if wants(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if wants(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if wants(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::ScaleByElem { x, w, index } => {
                    let vx = &nodes[*x].value;
                    let wv = nodes[*w].value[*index];
                    if wants(*w) {
                        let mut gw = vec![F::zero(); nodes[*w].value.len()];
                        gw[*index] = g.iter().zip(vx).map(|(&a, &b)| a * b).sum();
                        accumulate(&mut grads, *w, gw);
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, g.iter().map(|&a| a * wv).collect());
                    }
                }
                Op::TopKRenorm { p, selected, total } => {
                    let y = &node.value;
                    let dot: F = selected.iter().map(|&i| g[i] * y[i]).sum();
                    let mut gp = vec![F::zero(); y.len()];
                    for &i in selected {
                        gp[i] = (g[i] - dot) / *total;
                    }
                    accumulate(&mut grads, *p, gp);
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, vec![g[0]; nodes[*x].value.len()]);
                }
                Op::Mean(x) => {
                    let n = nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![g[0] / F::from_usize(n); n]);
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let coef = F::from_f64(2.0) * g[0] / F::from_usize(va.len());
                    let ga: Vec<F> = va.iter().zip(vb).map(|(&x, &y)| coef * (x - y)).collect();
                    if wants(*b) {
                        accumulate(&mut grads, *b, ga.iter().map(|&v| -v).collect());
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let rows = targets.len();
                    let cols = probs.len() / rows;
                    let coef = g[0] / F::from_usize(rows);
                    let mut gl: Vec<F> = probs.iter().map(|&p| p * coef).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * cols + t] -= coef;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(out)
    }
}

fn attention_forward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: &AttnDims,
) -> (Vec<F>, Vec<F>) {
    let dh = d.dim / d.heads;
    let scale = F::one() / F::from_usize(dh).sqrt();
    let mut out = vec![F::zero(); d.batch * d.lq * d.dim];
    let mut probs = vec![F::zero(); d.batch * d.heads * d.lq * d.lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let p_off = (b * d.heads + h) * d.lq * d.lk;
            let p = &mut probs[p_off..p_off + d.lq * d.lk];
            let q_view = MatRef { data: q, offset: b * d.lq * d.dim + h * dh, rs: d.dim, cs: 1 };
            let kt_view = MatRef { data: k, offset: b * d.lk * d.dim + h * dh, rs: 1, cs: d.dim };
            gemm(d.lq, dh, d.lk, scale, q_view, kt_view, F::zero(), p, 0, d.lk);
            softmax_rows(p, d.lk);
            let v_view = MatRef { data: v, offset: b * d.lk * d.dim + h * dh, rs: d.dim, cs: 1 };
            gemm(
                d.lq,
                d.lk,
                dh,
                F::one(),
                MatRef::row_major(p, d.lk),
                v_view,
                F::zero(),
                &mut out,
                b * d.lq * d.dim + h * dh,
                d.dim,
            );
        }
    }
    (out, probs)
}

fn attention_backward<F: Float>(
    g: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    d: &AttnDims,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = d.dim / d.heads;
    let scale = F::one() / F::from_usize(dh).sqrt();
    let mut gq = vec![F::zero(); q.len()];
    let mut gk = vec![F::zero(); k.len()];
    let mut gv = vec![F::zero(); v.len()];
    let mut ds = vec![F::zero(); d.lq * d.lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let p_off = (b * d.heads + h) * d.lq * d.lk;
            let p = &probs[p_off..p_off + d.lq * d.lk];
            let q_off = b * d.lq * d.dim + h * dh;
            let kv_off = b * d.lk * d.dim + h * dh;
            let g_view = MatRef { data: g, offset: q_off, rs: d.dim, cs: 1 };
            // dV = Pᵀ dO
            gemm(
                d.lk,
                d.lq,
                dh,
                F::one(),
                MatRef::transposed(p, d.lk),
                g_view,
                F::zero(),
                &mut gv,
                kv_off,
                d.dim,
            );
            // dP = dO Vᵀ
            let vt_view = MatRef { data: v, offset: kv_off, rs: 1, cs: d.dim };
            gemm(d.lq, dh, d.lk, F::one(), g_view, vt_view, F::zero(), &mut ds, 0, d.lk);
            for (dr, pr) in ds.chunks_mut(d.lk).zip(p.chunks(d.lk)) {
                let dot: F = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            let k_view = MatRef { data: k, offset: kv_off, rs: d.dim, cs: 1 };
            gemm(d.lq, d.lk, dh, F::one(), MatRef::row_major(&ds, d.lk), k_view, F::zero(), &mut gq, q_off, d.dim);
            let q_view = MatRef { data: q, offset: q_off, rs: d.dim, cs: 1 };
            gemm(
                d.lk,
                d.lq,
                dh,
                F::one(),
                MatRef::transposed(&ds, d.lk),
                q_view,
                F::zero(),
                &mut gk,
                kv_off,
                d.dim,
            );
        }
    }
    (gq, gk, gv)
}

impl<'t, F: Float> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn value(&self) -> Vec<F> {
        self.tape.node(self.id).value.clone()
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        let node = self.tape.node(self.id);
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// The single value of a scalar node.
    pub fn item(&self) -> F {
        self.tape.node(self.id).value[0]
    }

    fn rg(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let value = {
            let n = self.tape.node(self.id);
            if numel(shape) != n.value.len() {
                return Err(shape_err("reshape", &n.shape, shape));
            }
            n.value.clone()
        };
        self.tape.push("reshape", shape.to_vec(), value, Op::Reshape(self.id), self.rg())
    }

    fn zip_same(
        &self,
        other: &Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Vec<usize>, Vec<F>)> {
        self.same_tape(other);
        let a = self.tape.node(self.id);
        let b = self.tape.node(other.id);
        if a.shape != b.shape {
            return Err(shape_err(name, &a.shape, &b.shape));
        }
        Ok((a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, v) = self.zip_same(other, "add", |a, b| a + b)?;
        self.tape.push("add", shape, v, Op::Add(self.id, other.id), self.rg() || other.rg())
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, v) = self.zip_same(other, "sub", |a, b| a - b)?;
        self.tape.push("sub", shape, v, Op::Sub(self.id, other.id), self.rg() || other.rg())
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, v) = self.zip_same(other, "mul", |a, b| a * b)?;
        self.tape.push("mul", shape, v, Op::Mul(self.id, other.id), self.rg() || other.rg())
    }

    pub fn scale(&self, s: F) -> Result<Var<'t, F>> {
        let (shape, v) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.iter().map(|&x| x * s).collect())
        };
        self.tape.push("scale", shape, v, Op::Scale(self.id, s), self.rg())
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&self, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(bias);
        let (shape, v) = {
            let x = self.tape.node(self.id);
            let b = self.tape.node(bias.id);
            let c = *x.shape.last().unwrap_or(&0);
            if b.shape.len() != 1 || b.shape[0] != c {
                return Err(shape_err("add_bias", &x.shape, &b.shape));
            }
            let mut v = x.value.clone();
            for row in v.chunks_mut(c) {
                row.iter_mut().zip(&b.value).for_each(|(a, &bv)| *a += bv);
            }
            (x.shape.clone(), v)
        };
        self.tape.push("add_bias", shape, v, Op::AddBias(self.id, bias.id), self.rg() || bias.rg())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(other);
        let (shape, v) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![F::zero(); m * n];
            gemm(
                m,
                k,
                n,
                F::one(),
                MatRef::row_major(&a.value, k),
                MatRef::row_major(&b.value, n),
                F::zero(),
                &mut out,
                0,
                n,
            );
            (vec![m, n], out)
        };
        self.tape.push("matmul", shape, v, Op::MatMul(self.id, other.id), self.rg() || other.rg())
    }

    /// `x W + b` over the last axis of a 2-D input.
    pub fn linear(&self, weight: &Var<'t, F>, bias: Option<&Var<'t, F>>) -> Result<Var<'t, F>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn relu(&self) -> Result<Var<'t, F>> {
        let (shape, v) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.iter().map(|&x| x.max(F::zero())).collect())
        };
        self.tape.push("relu", shape, v, Op::Relu(self.id), self.rg())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t, F>> {
        let (shape, v) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.iter().map(|&x| gelu_parts(x).0).collect())
        };
        self.tape.push("gelu", shape, v, Op::Gelu(self.id), self.rg())
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t, F>> {
        let (shape, v) = {
            let n = self.tape.node(self.id);
            let cols = *n.shape.last().unwrap_or(&1);
            let mut v = n.value.clone();
            softmax_rows(&mut v, cols.max(1));
            (n.shape.clone(), v)
        };
        self.tape.push("softmax", shape, v, Op::Softmax(self.id), self.rg())
    }

    /// Softmax of a 1-D vector whose normalizer is summed in descending
    /// order of the exponentials, so permuting the input permutes the output
    /// bitwise. Used for routing weights.
    pub fn softmax_canonical(&self) -> Result<Var<'t, F>> {
        let (shape, v) = {
            let n = self.tape.node(self.id);
            if n.shape.len() != 1 {
                return Err(Error::Shape(format!("softmax_canonical needs a vector, got {:?}", n.shape)));
            }
            let max = n.value.iter().copied().fold(F::neg_infinity(), F::max);
            let mut v: Vec<F> = n.value.iter().map(|&x| (x - max).exp()).collect();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            let sum: F = sorted.into_iter().sum();
            v.iter_mut().for_each(|x| *x /= sum);
            (n.shape.clone(), v)
        };
        self.tape.push("softmax", shape, v, Op::Softmax(self.id), self.rg())
    }

    /// Per-row layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t, F>, beta: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let eps = F::from_f64(LAYER_NORM_EPS);
        let (shape, v, mean, rstd) = {
            let x = self.tape.node(self.id);
            let g = self.tape.node(gamma.id);
            let b = self.tape.node(beta.id);
            let c = *x.shape.last().unwrap_or(&0);
            if g.shape != [c] || b.shape != [c] {
                return Err(shape_err("layer_norm", &x.shape, &g.shape));
            }
            let rows = x.value.len() / c;
            let cf = F::from_usize(c);
            let mut out = vec![F::zero(); x.value.len()];
            let mut means = Vec::with_capacity(rows);
            let mut rstds = Vec::with_capacity(rows);
            for (xr, or) in x.value.chunks(c).zip(out.chunks_mut(c)) {
                let mu = xr.iter().copied().sum::<F>() / cf;
                let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
                let rs = F::one() / (var + eps).sqrt();
                for j in 0..c {
                    or[j] = (xr[j] - mu) * rs * g.value[j] + b.value[j];
                }
                means.push(mu);
                rstds.push(rs);
            }
            (x.shape.clone(), out, means, rstds)
        };
        let rg = self.rg() || gamma.rg() || beta.rg();
        self.tape.push(
            "layer_norm",
            shape,
            v,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, mean, rstd },
            rg,
        )
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'t, F>> {
        let v = {
            let x = self.tape.node(self.id);
            if numel(shape) != index.len() {
                return Err(Error::Shape(format!(
                    "gather: {} indices for output shape {shape:?}",
                    index.len()
                )));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= x.value.len()) {
                return Err(Error::Shape(format!(
                    "gather: index {bad} out of range for shape {:?}",
                    x.shape
                )));
            }
            index.iter().map(|&i| x.value[i]).collect()
        };
        self.tape.push("gather", shape.to_vec(), v, Op::Gather { x: self.id, index }, self.rg())
    }

    /// Row lookup into a `[rows, cols]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-D, got {shape:?}")));
        }
        let cols = shape[1];
        let mut index = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= shape[0] {
                return Err(Error::Shape(format!("embedding id {id} out of range for {shape:?}")));
            }
            index.extend(id * cols..(id + 1) * cols);
        }
        self.gather(index, &[ids.len(), cols])
    }

    /// Stride-1 2-D convolution: `x [B, C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&self, w: &Var<'t, F>, b: &Var<'t, F>, pad: usize) -> Result<Var<'t, F>> {
        self.same_tape(w);
        self.same_tape(b);
        let (dims, v) = {
            let x = self.tape.node(self.id);
            let wn = self.tape.node(w.id);
            let bn = self.tape.node(b.id);
            if x.shape.len() != 4
                || wn.shape.len() != 4
                || wn.shape[1] != x.shape[1]
                || wn.shape[2] != wn.shape[3]
            {
                return Err(shape_err("conv2d", &x.shape, &wn.shape));
            }
            if bn.shape != [wn.shape[0]] {
                return Err(shape_err("conv2d bias", &wn.shape, &bn.shape));
            }
            let dims = ConvDims {
                batch: x.shape[0],
                cin: x.shape[1],
                cout: wn.shape[0],
                height: x.shape[2],
                width: x.shape[3],
                kernel: wn.shape[2],
                pad,
            };
            if dims.height + 2 * pad < dims.kernel || dims.width + 2 * pad < dims.kernel {
                return Err(shape_err("conv2d", &x.shape, &wn.shape));
            }
            let (oh, ow) = dims.out_hw();
            let hw = oh * ow;
            let patch = dims.patch();
            let mut cols = vec![F::zero(); patch * hw];
            let mut out = vec![F::zero(); dims.batch * dims.cout * hw];
            for bi in 0..dims.batch {
                im2col(&x.value, &dims, bi, &mut cols);
                let off = bi * dims.cout * hw;
                for o in 0..dims.cout {
                    out[off + o * hw..off + (o + 1) * hw].fill(bn.value[o]);
                }
                gemm(
                    dims.cout,
                    patch,
                    hw,
                    F::one(),
                    MatRef::row_major(&wn.value, patch),
                    MatRef::row_major(&cols, hw),
                    F::one(),
                    &mut out,
                    off,
                    hw,
                );
            }
            (dims, out)
        };
        let (oh, ow) = dims.out_hw();
        let rg = self.rg() || w.rg() || b.rg();
        self.tape.push(
            "conv2d",
            vec![dims.batch, dims.cout, oh, ow],
            v,
            Op::Conv2d { x: self.id, w: w.id, b: b.id, dims },
            rg,
        )
    }

    /// Concatenates along axis 1 (channels for `[B, C, H, W]`).
    pub fn concat_channels(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(other);
        let (shape, v, outer, ia, ib) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            if a.shape.len() < 2
                || a.shape.len() != b.shape.len()
                || a.shape[0] != b.shape[0]
                || a.shape[2..] != b.shape[2..]
            {
                return Err(shape_err("concat_channels", &a.shape, &b.shape));
            }
            let outer = a.shape[0];
            let ia = a.value.len() / outer.max(1);
            let ib = b.value.len() / outer.max(1);
            let mut v = Vec::with_capacity(a.value.len() + b.value.len());
            for o in 0..outer {
                v.extend_from_slice(&a.value[o * ia..(o + 1) * ia]);
                v.extend_from_slice(&b.value[o * ib..(o + 1) * ib]);
            }
            let mut shape = a.shape.clone();
            shape[1] += b.shape[1];
            (shape, v, outer, ia, ib)
        };
        let rg = self.rg() || other.rg();
        self.tape.push(
            "concat",
            shape,
            v,
            Op::Concat { a: self.id, b: other.id, outer, inner_a: ia, inner_b: ib },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self` holds queries `[batch * lq, dim]`; `keys` and `values` are
    /// `[batch * lk, dim]`. Heads split `dim` evenly.
    pub fn attention(
        &self,
        keys: &Var<'t, F>,
        values: &Var<'t, F>,
        batch: usize,
        heads: usize,
    ) -> Result<Var<'t, F>> {
        self.same_tape(keys);
        self.same_tape(values);
        let (dims, out, probs) = {
            let q = self.tape.node(self.id);
            let k = self.tape.node(keys.id);
            let v = self.tape.node(values.id);
            if q.shape.len() != 2 || k.shape.len() != 2 || k.shape != v.shape || q.shape[1] != k.shape[1]
            {
                return Err(shape_err("attention", &q.shape, &k.shape));
            }
            let dim = q.shape[1];
            if heads == 0 || !dim.is_multiple_of(heads) || batch == 0 || !q.shape[0].is_multiple_of(batch) || !k.shape[0].is_multiple_of(batch) {
                return Err(Error::Shape(format!(
                    "attention: {q:?}/{k:?} not divisible into batch {batch} and {heads} heads",
                    q = q.shape,
                    k = k.shape
                )));
            }
            let dims = AttnDims { batch, heads, lq: q.shape[0] / batch, lk: k.shape[0] / batch, dim };
            let (out, probs) = attention_forward(&q.value, &k.value, &v.value, &dims);
            (dims, out, probs)
        };
        let rg = self.rg() || keys.rg() || values.rg();
        self.tape.push(
            "attention",
            vec![dims.batch * dims.lq, dims.dim],
            out,
            Op::Attention { q: self.id, k: keys.id, v: values.id, dims, probs },
            rg,
        )
    }

    /// `self * weights[index]`, differentiable in both.
    pub fn scale_by_elem(&self, weights: &Var<'t, F>, index: usize) -> Result<Var<'t, F>> {
        self.same_tape(weights);
        let (shape, v) = {
            let x = self.tape.node(self.id);
            let w = self.tape.node(weights.id);
            if index >= w.value.len() {
                return Err(Error::Shape(format!("scale_by_elem: index {index} of {:?}", w.shape)));
            }
            let s = w.value[index];
            (x.shape.clone(), x.value.iter().map(|&a| a * s).collect())
        };
        let rg = self.rg() || weights.rg();
        self.tape.push(
            "scale_by_elem",
            shape,
            v,
            Op::ScaleByElem { x: self.id, w: weights.id, index },
            rg,
        )
    }

    /// Keeps the `k` largest entries of a 1-D probability vector and
    /// renormalizes them to sum to one.
    pub fn top_k_renorm(&self, k: usize) -> Result<Var<'t, F>> {
        let (shape, v, selected, total) = {
            let p = self.tape.node(self.id);
            if p.shape.len() != 1 || k == 0 || k > p.value.len() {
                return Err(Error::Shape(format!("top_k_renorm: k = {k} for {:?}", p.shape)));
            }
            let selected = top_k_indices(&p.value, k);
            let total: F = selected.iter().map(|&i| p.value[i]).sum();
            let mut v = vec![F::zero(); p.value.len()];
            for &i in &selected {
                v[i] = p.value[i] / total;
            }
            (p.shape.clone(), v, selected, total)
        };
        self.tape.push("top_k_renorm", shape, v, Op::TopKRenorm { p: self.id, selected, total }, self.rg())
    }

    pub fn sum(&self) -> Result<Var<'t, F>> {
        let s = self.tape.node(self.id).value.iter().copied().sum();
        self.tape.push("sum", Vec::new(), vec![s], Op::Sum(self.id), self.rg())
    }

    pub fn mean(&self) -> Result<Var<'t, F>> {
        let s = {
            let n = self.tape.node(self.id);
            n.value.iter().copied().sum::<F>() / F::from_usize(n.value.len().max(1))
        };
        self.tape.push("mean", Vec::new(), vec![s], Op::Mean(self.id), self.rg())
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, target: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(target);
        let s = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(target.id);
            if a.shape != b.shape {
                return Err(shape_err("mse", &a.shape, &b.shape));
            }
            a.value.iter().zip(&b.value).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>()
                / F::from_usize(a.value.len().max(1))
        };
        let rg = self.rg() || target.rg();
        self.tape.push("mse", Vec::new(), vec![s], Op::Mse(self.id, target.id), rg)
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, F>> {
        let (loss, probs) = {
            let x = self.tape.node(self.id);
            if x.shape.len() != 2 || x.shape[0] != targets.len() {
                return Err(Error::Shape(format!(
                    "cross_entropy: logits {:?} with {} targets",
                    x.shape,
                    targets.len()
                )));
            }
            let cols = x.shape[1];
            if targets.iter().any(|&t| t >= cols) {
                return Err(Error::Shape("cross_entropy: target class out of range".into()));
            }
            let mut probs = x.value.clone();
            softmax_rows(&mut probs, cols);
            let loss = targets
                .iter()
                .enumerate()
                .map(|(r, &t)| -probs[r * cols + t].ln())
                .sum::<F>()
                / F::from_usize(targets.len());
            (loss, probs)
        };
        self.tape.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs },
            self.rg(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[4], &[0.0; 4])).unwrap();
        assert_eq!(x.softmax().unwrap().value(), vec![0.25; 4]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        let a_vals = [1.5, -2.0, 3.0, 0.25, 7.0, -1.0, 2.0, 2.0, 9.0, -4.0, 0.0, 1.0];
        let a = tape.constant(&t(&[3, 4], &a_vals)).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().value(), a_vals.to_vec());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[1, 5], &[3.0; 5])).unwrap();
        let g = tape.constant(&t(&[5], &[1.0; 5])).unwrap();
        let b = tape.constant(&t(&[5], &[0.0; 5])).unwrap();
        assert_eq!(x.layer_norm(&g, &b).unwrap().value(), vec![0.0; 5]);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0])).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), vec![2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t(&[1, 4], &[0.0; 4])).unwrap();
        let loss = x.cross_entropy(&[2]).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t(&[2], &[1.0, -3.0])).unwrap();
        let y = x.add(&x).unwrap().add(&x).unwrap().sum().unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x), vec![3.0, 3.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0])).unwrap();
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[4, 5])).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let tape = Tape::<f64>::new();
        assert!(matches!(
            tape.constant(&t(&[2], &[1.0, f64::NAN])),
            Err(Error::NonFinite(_))
        ));
        let x = tape.constant(&t(&[1], &[1e300])).unwrap();
        assert!(matches!(x.mul(&x), Err(Error::NonFinite("mul"))));
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0f64, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0f64, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::<f64>::new();
        let x_vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.constant(&t(&[1, 1, 4, 4], &x_vals)).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(&t(&[1, 1, 3, 3], &k)).unwrap();
        let b = tape.constant(&t(&[1], &[0.5])).unwrap();
        let y = x.conv2d(&w, &b, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
        let expect: Vec<f64> = x_vals.iter().map(|v| v + 0.5).collect();
        assert_eq!(y.value(), expect);
    }
}
