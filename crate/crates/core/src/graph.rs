//! Reverse-mode autodiff over a recorded tape of primitive applications.
//!
//! A [`Graph`] owns the tape. Leaves are either plain inputs or
//! [`Parameter`]s; every primitive records its inputs, output value and a
//! backward rule. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients, then flushes parameter gradients into their
//! persistent storage. Any primitive that produces a NaN/Inf fails fast
//! with the primitive's name.

use crate::error::{DenasError, Result};
use crate::tensor::TensorData;
use std::cell::RefCell;
use std::rc::Rc;

/// Persistent named tensor with a gradient accumulator. Cloning is cheap
/// (shared storage); names are hierarchical `part/cell/operator/kernel`.
#[derive(Clone)]
pub struct Parameter {
    inner: Rc<ParamInner>,
}

struct ParamInner {
    name: String,
    value: RefCell<TensorData>,
    grad: RefCell<TensorData>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: TensorData) -> Self {
        let grad = TensorData::zeros(value.shape);
        Parameter {
            inner: Rc::new(ParamInner {
                name: name.into(),
                value: RefCell::new(value),
                grad: RefCell::new(grad),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> [usize; 4] {
        self.inner.value.borrow().shape
    }

    pub fn value(&self) -> TensorData {
        self.inner.value.borrow().clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&TensorData) -> R) -> R {
        f(&self.inner.value.borrow())
    }

    pub fn set_value(&self, v: TensorData) {
        debug_assert_eq!(v.shape, self.shape());
        *self.inner.value.borrow_mut() = v;
    }

    /// Elementwise in-place update (used by optimizers).
    pub fn update<F: FnMut(usize, f64) -> f64>(&self, mut f: F) {
        let mut v = self.inner.value.borrow_mut();
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = f(i, *x);
        }
    }

    pub fn grad(&self) -> TensorData {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        for x in g.data.iter_mut() {
            *x = 0.0;
        }
    }

    pub fn accumulate_grad(&self, delta: &TensorData) {
        self.inner.grad.borrow_mut().add_assign(delta);
    }

    /// Pointer identity: two handles referencing the same storage.
    pub fn same_storage(&self, other: &Parameter) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to a node on the tape. Copyable; only valid for the graph that
/// created it.
#[derive(Copy, Clone, Debug)]
pub struct Var {
    pub(crate) id: usize,
    pub shape: [usize; 4],
}

type BackwardFn = Box<dyn Fn(&[&TensorData], &TensorData, &TensorData) -> Vec<TensorData>>;

struct Node {
    value: TensorData,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

type Hook = Box<dyn Fn(&Graph)>;

/// The recorded computation tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(usize, Parameter)>,
    hooks: Vec<Hook>,
    grads: Vec<Option<TensorData>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &TensorData {
        &self.nodes[v.id].value
    }

    /// Gradient of a node, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&TensorData> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        name: &'static str,
        value: TensorData,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(DenasError::NonFinite { op: name });
        }
        let shape = value.shape;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Ok(Var { id, shape })
    }

    /// Leaf holding a plain input value. Its gradient is still computed
    /// and queryable via `grad`.
    pub fn input(&mut self, value: TensorData) -> Result<Var> {
        self.push("input", value, vec![], None)
    }

    /// Leaf bound to a persistent parameter; after `backward` the node's
    /// gradient is accumulated into the parameter.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        let v = self.push("param", p.value(), vec![], None)?;
        self.param_leaves.push((v.id, p.clone()));
        Ok(v)
    }

    /// Register a closure that runs after node gradients are computed
    /// (used for score-function architecture-weight gradients).
    pub fn add_hook(&mut self, hook: impl Fn(&Graph) + 'static) {
        self.hooks.push(Box::new(hook));
    }

    /// Reverse pass from a scalar loss. Each tape record is visited
    /// exactly once in reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(DenasError::Backward(
                "backward called twice on one graph; re-record first".into(),
            ));
        }
        if !self.nodes[loss.id].value.is_scalar() {
            return Err(DenasError::Backward(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<TensorData>> = vec![None; n];
        grads[loss.id] = Some(TensorData::scalar(1.0));

        for id in (0..n).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(bw) = &self.nodes[id].backward {
                let parent_vals: Vec<&TensorData> = self.nodes[id]
                    .parents
                    .iter()
                    .map(|&p| &self.nodes[p].value)
                    .collect();
                let parent_grads = bw(&parent_vals, &self.nodes[id].value, &g);
                debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
                for (p, pg) in self.nodes[id].parents.clone().into_iter().zip(parent_grads) {
                    if !pg.all_finite() {
                        return Err(DenasError::NonFinite { op: "backward" });
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }

        self.grads = grads;
        let hooks = std::mem::take(&mut self.hooks);
        for h in &hooks {
            h(self);
        }
        for (id, p) in &self.param_leaves {
            if let Some(g) = &self.grads[*id] {
                p.accumulate_grad(g);
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Elementwise primitives
    // ------------------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if a.shape != b.shape {
            return Err(DenasError::shape(
                op,
                format!("{:?} vs {:?}", a.shape, b.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut v = self.nodes[a.id].value.clone();
        v.add_assign(&self.nodes[b.id].value);
        self.push(
            "add",
            v,
            vec![a.id, b.id],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let v = TensorData {
            shape: a.shape,
            data,
        };
        self.push(
            "sub",
            v,
            vec![a.id, b.id],
            Some(Box::new(|_, _, g| {
                let neg = TensorData {
                    shape: g.shape,
                    data: g.data.iter().map(|x| -x).collect(),
                };
                vec![g.clone(), neg]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let v = TensorData {
            shape: a.shape,
            data,
        };
        self.push(
            "mul",
            v,
            vec![a.id, b.id],
            Some(Box::new(|pv, _, g| {
                let (a, b) = (pv[0], pv[1]);
                let ga = TensorData {
                    shape: g.shape,
                    data: g.data.iter().zip(&b.data).map(|(g, y)| g * y).collect(),
                };
                let gb = TensorData {
                    shape: g.shape,
                    data: g.data.iter().zip(&a.data).map(|(g, x)| g * x).collect(),
                };
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let av = &self.nodes[a.id].value;
        let v = TensorData {
            shape: a.shape,
            data: av.data.iter().map(|x| x * k).collect(),
        };
        self.push(
            "scale",
            v,
            vec![a.id],
            Some(Box::new(move |_, _, g| {
                vec![TensorData {
                    shape: g.shape,
                    data: g.data.iter().map(|x| x * k).collect(),
                }]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let av = &self.nodes[a.id].value;
        let v = TensorData {
            shape: a.shape,
            data: av
                .data
                .iter()
                .map(|&x| if x >= 0.0 { x } else { slope * x })
                .collect(),
        };
        self.push(
            "leaky_relu",
            v,
            vec![a.id],
            Some(Box::new(move |pv, _, g| {
                let x = pv[0];
                vec![TensorData {
                    shape: g.shape,
                    data: g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, &x)| if x >= 0.0 { *g } else { slope * g })
                        .collect(),
                }]
            })),
        )
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.nodes[a.id].value.data.iter().sum();
        let shape = a.shape;
        self.push(
            "sum",
            TensorData::scalar(total),
            vec![a.id],
            Some(Box::new(move |_, _, g| {
                vec![TensorData::filled(shape, g.scalar_value())]
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n: usize = a.shape.iter().product();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// L1 reduction Σ|x|. Subgradient at 0 is 0.
    pub fn l1(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.nodes[a.id].value.data.iter().map(|x| x.abs()).sum();
        self.push(
            "l1",
            TensorData::scalar(total),
            vec![a.id],
            Some(Box::new(|pv, _, g| {
                let x = pv[0];
                let gs = g.scalar_value();
                vec![TensorData {
                    shape: x.shape,
                    data: x
                        .data
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                gs
                            } else if v < 0.0 {
                                -gs
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                }]
            })),
        )
    }

    /// L2 reduction Σx².
    pub fn l2_sq(&mut self, a: Var) -> Result<Var> {
        let p = self.mul(a, a)?;
        self.sum(p)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // ------------------------------------------------------------------
    // Channel plumbing
    // ------------------------------------------------------------------

    pub fn concat_c(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DenasError::arg("concat_c", "no inputs"));
        }
        let [n, _, h, w] = parts[0].shape;
        let mut c_total = 0;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(DenasError::shape("concat_c", format!("{:?}", p.shape)));
            }
            c_total += p.shape[1];
        }
        let mut out = TensorData::zeros([n, c_total, h, w]);
        let mut c_off = 0;
        for p in parts {
            let pv = &self.nodes[p.id].value;
            for ni in 0..n {
                for ci in 0..p.shape[1] {
                    for hi in 0..h {
                        for wi in 0..w {
                            *out.at_mut(ni, c_off + ci, hi, wi) = pv.at(ni, ci, hi, wi);
                        }
                    }
                }
            }
            c_off += p.shape[1];
        }
        let sections: Vec<usize> = parts.iter().map(|p| p.shape[1]).collect();
        self.push(
            "concat_c",
            out,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |pv, _, g| {
                let mut grads = Vec::with_capacity(pv.len());
                let mut c_off = 0;
                for (i, &cs) in sections.iter().enumerate() {
                    let mut pg = TensorData::zeros(pv[i].shape);
                    for ni in 0..g.shape[0] {
                        for ci in 0..cs {
                            for hi in 0..g.shape[2] {
                                for wi in 0..g.shape[3] {
                                    *pg.at_mut(ni, ci, hi, wi) = g.at(ni, c_off + ci, hi, wi);
                                }
                            }
                        }
                    }
                    c_off += cs;
                    grads.push(pg);
                }
                grads
            })),
        )
    }

    pub fn slice_c(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = a.shape;
        if start + len > c || len == 0 {
            return Err(DenasError::arg(
                "slice_c",
                format!("slice {start}..{} of {c} channels", start + len),
            ));
        }
        let av = &self.nodes[a.id].value;
        let mut out = TensorData::zeros([n, len, h, w]);
        for ni in 0..n {
            for ci in 0..len {
                for hi in 0..h {
                    for wi in 0..w {
                        *out.at_mut(ni, ci, hi, wi) = av.at(ni, start + ci, hi, wi);
                    }
                }
            }
        }
        self.push(
            "slice_c",
            out,
            vec![a.id],
            Some(Box::new(move |pv, _, g| {
                let mut pg = TensorData::zeros(pv[0].shape);
                for ni in 0..g.shape[0] {
                    for ci in 0..g.shape[1] {
                        for hi in 0..g.shape[2] {
                            for wi in 0..g.shape[3] {
                                *pg.at_mut(ni, start + ci, hi, wi) = g.at(ni, ci, hi, wi);
                            }
                        }
                    }
                }
                vec![pg]
            })),
        )
    }

    /// Append zero channel planes up to `new_c`.
    pub fn pad_c(&mut self, a: Var, new_c: usize) -> Result<Var> {
        let [n, c, h, w] = a.shape;
        if new_c < c {
            return Err(DenasError::arg("pad_c", format!("{new_c} < {c}")));
        }
        if new_c == c {
            // identity; still record so the shape law holds uniformly
            return self.scale(a, 1.0);
        }
        let av = &self.nodes[a.id].value;
        let mut out = TensorData::zeros([n, new_c, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        *out.at_mut(ni, ci, hi, wi) = av.at(ni, ci, hi, wi);
                    }
                }
            }
        }
        self.push(
            "pad_c",
            out,
            vec![a.id],
            Some(Box::new(move |pv, _, g| {
                let mut pg = TensorData::zeros(pv[0].shape);
                for ni in 0..pg.shape[0] {
                    for ci in 0..pg.shape[1] {
                        for hi in 0..pg.shape[2] {
                            for wi in 0..pg.shape[3] {
                                *pg.at_mut(ni, ci, hi, wi) = g.at(ni, ci, hi, wi);
                            }
                        }
                    }
                }
                vec![pg]
            })),
        )
    }

    /// Leading-channel rule: truncate to the first `target` channels or
    /// zero-pad trailing planes.
    pub fn adjust_width(&mut self, a: Var, target: usize) -> Result<Var> {
        let c = a.shape[1];
        if target == c {
            Ok(a)
        } else if target < c {
            self.slice_c(a, 0, target)
        } else {
            self.pad_c(a, target)
        }
    }

    // ------------------------------------------------------------------
    // Softmax
    // ------------------------------------------------------------------

    /// Softmax along the channel axis, independently per (n, h, w) site.
    pub fn softmax_c(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = a.shape;
        let av = &self.nodes[a.id].value;
        let mut out = TensorData::zeros(a.shape);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let logits: Vec<f64> = (0..c).map(|ci| av.at(ni, ci, hi, wi)).collect();
                    let s = crate::tensor::softmax_slice(&logits);
                    for ci in 0..c {
                        *out.at_mut(ni, ci, hi, wi) = s[ci];
                    }
                }
            }
        }
        self.push(
            "softmax_c",
            out,
            vec![a.id],
            Some(Box::new(move |_, yv, g| {
                let mut pg = TensorData::zeros(yv.shape);
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let mut dotv = 0.0;
                            for ci in 0..c {
                                dotv += g.at(ni, ci, hi, wi) * yv.at(ni, ci, hi, wi);
                            }
                            for ci in 0..c {
                                let y = yv.at(ni, ci, hi, wi);
                                *pg.at_mut(ni, ci, hi, wi) = y * (g.at(ni, ci, hi, wi) - dotv);
                            }
                        }
                    }
                }
                vec![pg]
            })),
        )
    }

    /// Softmax along axis 2 of a (B, M, K, 1) matrix batch (per row).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [b, m, k, one] = a.shape;
        if one != 1 {
            return Err(DenasError::shape("softmax_rows", format!("{:?}", a.shape)));
        }
        let av = &self.nodes[a.id].value;
        let mut out = TensorData::zeros(a.shape);
        for bi in 0..b {
            for mi in 0..m {
                let row: Vec<f64> = (0..k).map(|ki| av.at(bi, mi, ki, 0)).collect();
                let s = crate::tensor::softmax_slice(&row);
                for ki in 0..k {
                    *out.at_mut(bi, mi, ki, 0) = s[ki];
                }
            }
        }
        self.push(
            "softmax_rows",
            out,
            vec![a.id],
            Some(Box::new(move |_, yv, g| {
                let mut pg = TensorData::zeros(yv.shape);
                for bi in 0..b {
                    for mi in 0..m {
                        let mut dotv = 0.0;
                        for ki in 0..k {
                            dotv += g.at(bi, mi, ki, 0) * yv.at(bi, mi, ki, 0);
                        }
                        for ki in 0..k {
                            let y = yv.at(bi, mi, ki, 0);
                            *pg.at_mut(bi, mi, ki, 0) = y * (g.at(bi, mi, ki, 0) - dotv);
                        }
                    }
                }
                vec![pg]
            })),
        )
    }

    /// Multiply a tensor by one element of a vector node (1, L, 1, 1).
    pub fn scale_by_element(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        if s.shape[0] != 1 || s.shape[2] != 1 || s.shape[3] != 1 || idx >= s.shape[1] {
            return Err(DenasError::arg(
                "scale_by_element",
                format!("vector shape {:?}, idx {idx}", s.shape),
            ));
        }
        let sv = self.nodes[s.id].value.data[idx];
        let xv = &self.nodes[x.id].value;
        let out = TensorData {
            shape: x.shape,
            data: xv.data.iter().map(|v| v * sv).collect(),
        };
        self.push(
            "scale_by_element",
            out,
            vec![x.id, s.id],
            Some(Box::new(move |pv, _, g| {
                let (x, s) = (pv[0], pv[1]);
                let sv = s.data[idx];
                let gx = TensorData {
                    shape: x.shape,
                    data: g.data.iter().map(|v| v * sv).collect(),
                };
                let mut gs = TensorData::zeros(s.shape);
                gs.data[idx] = g.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
                vec![gx, gs]
            })),
        )
    }

    // ------------------------------------------------------------------
    // Matrix primitives (token-matrix layout: (B, M, K, 1))
    // ------------------------------------------------------------------

    /// Batched matmul; `b` may have batch 1, broadcast over `a`'s batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, m, ka, _] = a.shape;
        let [bb, kb, n, _] = b.shape;
        if ka != kb || (bb != ba && bb != 1) {
            return Err(DenasError::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape, b.shape),
            ));
        }
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut out = TensorData::zeros([ba, m, n, 1]);
        for bi in 0..ba {
            let bbi = if bb == 1 { 0 } else { bi };
            for mi in 0..m {
                for ni in 0..n {
                    let mut acc = 0.0;
                    for ki in 0..ka {
                        acc += av.at(bi, mi, ki, 0) * bv.at(bbi, ki, ni, 0);
                    }
                    *out.at_mut(bi, mi, ni, 0) = acc;
                }
            }
        }
        self.push(
            "matmul",
            out,
            vec![a.id, b.id],
            Some(Box::new(move |pv, _, g| {
                let (av, bv) = (pv[0], pv[1]);
                let mut ga = TensorData::zeros(av.shape);
                let mut gb = TensorData::zeros(bv.shape);
                for bi in 0..ba {
                    let bbi = if bb == 1 { 0 } else { bi };
                    for mi in 0..m {
                        for ki in 0..ka {
                            let mut acc = 0.0;
                            for ni in 0..n {
                                acc += g.at(bi, mi, ni, 0) * bv.at(bbi, ki, ni, 0);
                            }
                            *ga.at_mut(bi, mi, ki, 0) += acc;
                        }
                    }
                    for ki in 0..ka {
                        for ni in 0..n {
                            let mut acc = 0.0;
                            for mi in 0..m {
                                acc += av.at(bi, mi, ki, 0) * g.at(bi, mi, ni, 0);
                            }
                            *gb.at_mut(bbi, ki, ni, 0) += acc;
                        }
                    }
                }
                vec![ga, gb]
            })),
        )
    }

    /// Transpose the (M, K) axes of a (B, M, K, 1) batch.
    pub fn transpose_mk(&mut self, a: Var) -> Result<Var> {
        let [b, m, k, one] = a.shape;
        if one != 1 {
            return Err(DenasError::shape("transpose_mk", format!("{:?}", a.shape)));
        }
        let out_shape = [b, k, m, 1];
        let src = &self.nodes[a.id].value;
        let mut perm = vec![0usize; b * m * k];
        let mut out = TensorData::zeros(out_shape);
        for bi in 0..b {
            for ki in 0..k {
                for mi in 0..m {
                    let oi = out.idx(bi, ki, mi, 0);
                    let ii = src.idx(bi, mi, ki, 0);
                    perm[oi] = ii;
                    out.data[oi] = src.data[ii];
                }
            }
        }
        self.permutation("transpose_mk", a, out, perm)
    }

    /// Generic index-permutation node: out[i] = in[perm[i]].
    fn permutation(
        &mut self,
        name: &'static str,
        a: Var,
        out: TensorData,
        perm: Vec<usize>,
    ) -> Result<Var> {
        self.push(
            name,
            out,
            vec![a.id],
            Some(Box::new(move |pv, _, g| {
                let mut pg = TensorData::zeros(pv[0].shape);
                for (oi, &ii) in perm.iter().enumerate() {
                    pg.data[ii] += g.data[oi];
                }
                vec![pg]
            })),
        )
    }

    // ------------------------------------------------------------------
    // Spatial primitives
    // ------------------------------------------------------------------

    /// Cross-correlation with leading-channel kernel slicing. The kernel
    /// node has shape (C_out, C_in, k, k); only the first `cout_used` x
    /// `cin_used` channels participate, and backward writes gradients
    /// into the full kernel shape at the leading positions (slices alias
    /// the full kernel).
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_slice(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
        cout_used: usize,
        cin_used: usize,
    ) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(DenasError::arg("conv2d", "non-positive stride/dilation"));
        }
        let [n, cx, h, w] = x.shape;
        let [co, ci, kh, kw] = kernel.shape;
        if kh != kw {
            return Err(DenasError::arg("conv2d", "non-square kernel"));
        }
        if cout_used > co || cin_used > ci {
            return Err(DenasError::arg(
                "conv2d",
                format!("slice {cout_used}x{cin_used} exceeds kernel {co}x{ci}"),
            ));
        }
        if cx != cin_used {
            return Err(DenasError::shape(
                "conv2d",
                format!("input has {cx} channels, kernel slice expects {cin_used}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape[1] < cout_used || b.shape[0] != 1 || b.shape[2] != 1 || b.shape[3] != 1 {
                return Err(DenasError::shape("conv2d", format!("bias {:?}", b.shape)));
            }
        }
        let k = kh;
        let span = dilation * (k - 1) + 1;
        if h + 2 * padding < span || w + 2 * padding < span {
            return Err(DenasError::shape(
                "conv2d",
                format!("kernel span {span} exceeds padded input {h}x{w}+2*{padding}"),
            ));
        }
        let ho = (h + 2 * padding - span) / stride + 1;
        let wo = (w + 2 * padding - span) / stride + 1;

        let xv = &self.nodes[x.id].value;
        let kv = &self.nodes[kernel.id].value;
        let bv = bias.map(|b| self.nodes[b.id].value.clone());
        let mut out = TensorData::zeros([n, cout_used, ho, wo]);
        for ni in 0..n {
            for oc in 0..cout_used {
                let base = bv.as_ref().map_or(0.0, |b| b.data[oc]);
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = base;
                        for ic in 0..cin_used {
                            for dh in 0..k {
                                let ih = (oh * stride + dh * dilation) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for dw in 0..k {
                                    let iw =
                                        (ow * stride + dw * dilation) as isize - padding as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    acc += xv.at(ni, ic, ih as usize, iw as usize)
                                        * kv.at(oc, ic, dh, dw);
                                }
                            }
                        }
                        *out.at_mut(ni, oc, oh, ow) = acc;
                    }
                }
            }
        }

        let mut parents = vec![x.id, kernel.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        self.push(
            "conv2d",
            out,
            parents,
            Some(Box::new(move |pv, _, g| {
                let (xv, kv) = (pv[0], pv[1]);
                let mut gx = TensorData::zeros(xv.shape);
                let mut gk = TensorData::zeros(kv.shape);
                for ni in 0..n {
                    for oc in 0..cout_used {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let go = g.at(ni, oc, oh, ow);
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..cin_used {
                                    for dh in 0..k {
                                        let ih = (oh * stride + dh * dilation) as isize
                                            - padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for dw in 0..k {
                                            let iw = (ow * stride + dw * dilation) as isize
                                                - padding as isize;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            let (ihu, iwu) = (ih as usize, iw as usize);
                                            *gx.at_mut(ni, ic, ihu, iwu) +=
                                                go * kv.at(oc, ic, dh, dw);
                                            *gk.at_mut(oc, ic, dh, dw) +=
                                                go * xv.at(ni, ic, ihu, iwu);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gk];
                if has_bias {
                    let mut gb = TensorData::zeros(pv[2].shape);
                    for ni in 0..n {
                        for oc in 0..cout_used {
                            for oh in 0..ho {
                                for ow in 0..wo {
                                    gb.data[oc] += g.at(ni, oc, oh, ow);
                                }
                            }
                        }
                    }
                    grads.push(gb);
                }
                grads
            })),
        )
    }

    /// Full-width convolution convenience wrapper.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let [co, ci, _, _] = kernel.shape;
        self.conv2d_slice(x, kernel, bias, stride, dilation, padding, co, ci)
    }

    /// Transposed convolution with stride 2 (kernel shape (C_in, C_out, k, k)).
    pub fn conv_transpose2d_s2(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let [n, cx, h, w] = x.shape;
        let [ci, co, kh, kw] = kernel.shape;
        if cx != ci {
            return Err(DenasError::shape(
                "conv_transpose2d",
                format!("input {cx} channels, kernel expects {ci}"),
            ));
        }
        if kh != 2 || kw != 2 {
            return Err(DenasError::arg("conv_transpose2d", "kernel must be 2x2"));
        }
        let (ho, wo) = (h * 2, w * 2);
        let xv = &self.nodes[x.id].value;
        let kv = &self.nodes[kernel.id].value;
        let mut out = TensorData::zeros([n, co, ho, wo]);
        for ni in 0..n {
            for ic in 0..ci {
                for ih in 0..h {
                    for iw in 0..w {
                        let xval = xv.at(ni, ic, ih, iw);
                        for oc in 0..co {
                            for dh in 0..2 {
                                for dw in 0..2 {
                                    *out.at_mut(ni, oc, ih * 2 + dh, iw * 2 + dw) +=
                                        xval * kv.at(ic, oc, dh, dw);
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            "conv_transpose2d",
            out,
            vec![x.id, kernel.id],
            Some(Box::new(move |pv, _, g| {
                let (xv, kv) = (pv[0], pv[1]);
                let mut gx = TensorData::zeros(xv.shape);
                let mut gk = TensorData::zeros(kv.shape);
                for ni in 0..n {
                    for ic in 0..ci {
                        for ih in 0..h {
                            for iw in 0..w {
                                for oc in 0..co {
                                    for dh in 0..2 {
                                        for dw in 0..2 {
                                            let go = g.at(ni, oc, ih * 2 + dh, iw * 2 + dw);
                                            *gx.at_mut(ni, ic, ih, iw) += go * kv.at(ic, oc, dh, dw);
                                            *gk.at_mut(ic, oc, dh, dw) += go * xv.at(ni, ic, ih, iw);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gk]
            })),
        )
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DenasError::shape("avg_pool2", format!("odd size {h}x{w}")));
        }
        let xv = &self.nodes[x.id].value;
        let mut out = TensorData::zeros([n, c, h / 2, w / 2]);
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        let s = xv.at(ni, ci, oh * 2, ow * 2)
                            + xv.at(ni, ci, oh * 2, ow * 2 + 1)
                            + xv.at(ni, ci, oh * 2 + 1, ow * 2)
                            + xv.at(ni, ci, oh * 2 + 1, ow * 2 + 1);
                        *out.at_mut(ni, ci, oh, ow) = s * 0.25;
                    }
                }
            }
        }
        self.push(
            "avg_pool2",
            out,
            vec![x.id],
            Some(Box::new(move |pv, _, g| {
                let mut pg = TensorData::zeros(pv[0].shape);
                for ni in 0..n {
                    for ci in 0..c {
                        for oh in 0..h / 2 {
                            for ow in 0..w / 2 {
                                let go = g.at(ni, ci, oh, ow) * 0.25;
                                for dh in 0..2 {
                                    for dw in 0..2 {
                                        *pg.at_mut(ni, ci, oh * 2 + dh, ow * 2 + dw) += go;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![pg]
            })),
        )
    }

    /// Bilinear 2x upsampling (half-pixel centers, edge clamped).
    pub fn bilinear_up2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        let (ho, wo) = (h * 2, w * 2);
        // Per output coordinate: two source indices and an interpolation weight.
        let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|o| {
                    let src = (o as f64 + 0.5) / 2.0 - 0.5;
                    let lo = src.floor();
                    let t = src - lo;
                    let i0 = lo.max(0.0) as usize;
                    let i1 = ((lo + 1.0).max(0.0) as usize).min(in_len - 1);
                    (i0.min(in_len - 1), i1, t)
                })
                .collect()
        };
        let hmap = axis(ho, h);
        let wmap = axis(wo, w);
        let xv = &self.nodes[x.id].value;
        let mut out = TensorData::zeros([n, c, ho, wo]);
        for ni in 0..n {
            for ci in 0..c {
                for (oh, &(h0, h1, th)) in hmap.iter().enumerate() {
                    for (ow, &(w0, w1, tw)) in wmap.iter().enumerate() {
                        let v00 = xv.at(ni, ci, h0, w0);
                        let v01 = xv.at(ni, ci, h0, w1);
                        let v10 = xv.at(ni, ci, h1, w0);
                        let v11 = xv.at(ni, ci, h1, w1);
                        let top = v00 * (1.0 - tw) + v01 * tw;
                        let bot = v10 * (1.0 - tw) + v11 * tw;
                        *out.at_mut(ni, ci, oh, ow) = top * (1.0 - th) + bot * th;
                    }
                }
            }
        }
        self.push(
            "bilinear_up2",
            out,
            vec![x.id],
            Some(Box::new(move |pv, _, g| {
                let mut pg = TensorData::zeros(pv[0].shape);
                for ni in 0..n {
                    for ci in 0..c {
                        for (oh, &(h0, h1, th)) in hmap.iter().enumerate() {
                            for (ow, &(w0, w1, tw)) in wmap.iter().enumerate() {
                                let go = g.at(ni, ci, oh, ow);
                                *pg.at_mut(ni, ci, h0, w0) += go * (1.0 - th) * (1.0 - tw);
                                *pg.at_mut(ni, ci, h0, w1) += go * (1.0 - th) * tw;
                                *pg.at_mut(ni, ci, h1, w0) += go * th * (1.0 - tw);
                                *pg.at_mut(ni, ci, h1, w1) += go * th * tw;
                            }
                        }
                    }
                }
                vec![pg]
            })),
        )
    }

    /// Sub-pixel rearrangement: (N, C, H, W) -> (N, C/r^2, H*r, W*r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        if r == 0 || c % (r * r) != 0 {
            return Err(DenasError::arg(
                "pixel_shuffle",
                format!("{c} channels not divisible by r^2 = {}", r * r),
            ));
        }
        let co = c / (r * r);
        let src = &self.nodes[x.id].value;
        let mut out = TensorData::zeros([n, co, h * r, w * r]);
        let mut perm = vec![0usize; out.numel()];
        for ni in 0..n {
            for ci in 0..co {
                for oh in 0..h * r {
                    for ow in 0..w * r {
                        let ii = src.idx(ni, ci * r * r + (oh % r) * r + (ow % r), oh / r, ow / r);
                        let oi = out.idx(ni, ci, oh, ow);
                        perm[oi] = ii;
                        out.data[oi] = src.data[ii];
                    }
                }
            }
        }
        self.permutation("pixel_shuffle", x, out, perm)
    }

    /// Inverse of `pixel_shuffle` with the same factor.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(DenasError::arg(
                "pixel_unshuffle",
                format!("{h}x{w} not divisible by r = {r}"),
            ));
        }
        let src = &self.nodes[x.id].value;
        let mut out = TensorData::zeros([n, c * r * r, h / r, w / r]);
        let mut perm = vec![0usize; out.numel()];
        for ni in 0..n {
            for ci in 0..c {
                for dh in 0..r {
                    for dw in 0..r {
                        for oh in 0..h / r {
                            for ow in 0..w / r {
                                let oi = out.idx(ni, ci * r * r + dh * r + dw, oh, ow);
                                let ii = src.idx(ni, ci, oh * r + dh, ow * r + dw);
                                perm[oi] = ii;
                                out.data[oi] = src.data[ii];
                            }
                        }
                    }
                }
            }
        }
        self.permutation("pixel_unshuffle", x, out, perm)
    }

    /// Per (sample, channel) plane normalization: (x - mean) / sqrt(var + eps).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        if h * w < 2 {
            return Err(DenasError::arg(
                "instance_norm",
                "spatial size 1x1: variance undefined",
            ));
        }
        let m = (h * w) as f64;
        let xv = &self.nodes[x.id].value;
        let mut out = TensorData::zeros(x.shape);
        for ni in 0..n {
            for ci in 0..c {
                let mut mean = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        mean += xv.at(ni, ci, hi, wi);
                    }
                }
                mean /= m;
                let mut var = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        let d = xv.at(ni, ci, hi, wi) - mean;
                        var += d * d;
                    }
                }
                var /= m;
                let inv = 1.0 / (var + eps).sqrt();
                for hi in 0..h {
                    for wi in 0..w {
                        *out.at_mut(ni, ci, hi, wi) = (xv.at(ni, ci, hi, wi) - mean) * inv;
                    }
                }
            }
        }
        self.push(
            "instance_norm",
            out,
            vec![x.id],
            Some(Box::new(move |pv, yv, g| {
                let xv = pv[0];
                let mut pg = TensorData::zeros(xv.shape);
                for ni in 0..n {
                    for ci in 0..c {
                        let mut mean = 0.0;
                        for hi in 0..h {
                            for wi in 0..w {
                                mean += xv.at(ni, ci, hi, wi);
                            }
                        }
                        mean /= m;
                        let mut var = 0.0;
                        for hi in 0..h {
                            for wi in 0..w {
                                let d = xv.at(ni, ci, hi, wi) - mean;
                                var += d * d;
                            }
                        }
                        var /= m;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut gmean = 0.0;
                        let mut gy = 0.0;
                        for hi in 0..h {
                            for wi in 0..w {
                                gmean += g.at(ni, ci, hi, wi);
                                gy += g.at(ni, ci, hi, wi) * yv.at(ni, ci, hi, wi);
                            }
                        }
                        gmean /= m;
                        gy /= m;
                        for hi in 0..h {
                            for wi in 0..w {
                                let gv = g.at(ni, ci, hi, wi);
                                let y = yv.at(ni, ci, hi, wi);
                                *pg.at_mut(ni, ci, hi, wi) = inv * (gv - gmean - y * gy);
                            }
                        }
                    }
                }
                vec![pg]
            })),
        )
    }

    /// Cyclically shift and partition into non-overlapping windows:
    /// (N, C, H, W) -> (N * nWin, window^2, C, 1) token matrices.
    pub fn window_partition(&mut self, x: Var, window: usize, shift: usize) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(DenasError::shape(
                "window_partition",
                format!("{h}x{w} not divisible by window {window}"),
            ));
        }
        let (nh, nw) = (h / window, w / window);
        let t = window * window;
        let src = &self.nodes[x.id].value;
        let mut out = TensorData::zeros([n * nh * nw, t, c, 1]);
        let mut perm = vec![0usize; out.numel()];
        for ni in 0..n {
            for wh in 0..nh {
                for ww in 0..nw {
                    let b = (ni * nh + wh) * nw + ww;
                    for ih in 0..window {
                        for iw in 0..window {
                            let ti = ih * window + iw;
                            let sh = (wh * window + ih + shift) % h;
                            let sw = (ww * window + iw + shift) % w;
                            for ci in 0..c {
                                let oi = out.idx(b, ti, ci, 0);
                                let ii = src.idx(ni, ci, sh, sw);
                                perm[oi] = ii;
                                out.data[oi] = src.data[ii];
                            }
                        }
                    }
                }
            }
        }
        self.permutation("window_partition", x, out, perm)
    }

    /// Inverse of `window_partition` (same window/shift, target NCHW shape).
    pub fn window_unpartition(
        &mut self,
        x: Var,
        window: usize,
        shift: usize,
        out_shape: [usize; 4],
    ) -> Result<Var> {
        let [n, c, h, w] = out_shape;
        let (nh, nw) = (h / window, w / window);
        if x.shape != [n * nh * nw, window * window, c, 1] {
            return Err(DenasError::shape(
                "window_unpartition",
                format!("{:?} vs target {:?}", x.shape, out_shape),
            ));
        }
        let src = &self.nodes[x.id].value;
        let mut out = TensorData::zeros(out_shape);
        let mut perm = vec![0usize; out.numel()];
        for ni in 0..n {
            for wh in 0..nh {
                for ww in 0..nw {
                    let b = (ni * nh + wh) * nw + ww;
                    for ih in 0..window {
                        for iw in 0..window {
                            let ti = ih * window + iw;
                            let sh = (wh * window + ih + shift) % h;
                            let sw = (ww * window + iw + shift) % w;
                            for ci in 0..c {
                                let oi = out.idx(ni, ci, sh, sw);
                                let ii = src.idx(b, ti, ci, 0);
                                perm[oi] = ii;
                                out.data[oi] = src.data[ii];
                            }
                        }
                    }
                }
            }
        }
        self.permutation("window_unpartition", x, out, perm)
    }

    /// Single-head scaled dot-product attention over shifted windows with
    /// learned q/k/v/output projections and a residual add.
    #[allow(clippy::too_many_arguments)]
    pub fn window_attention(
        &mut self,
        x: Var,
        window: usize,
        shift: usize,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
    ) -> Result<Var> {
        let c = x.shape[1];
        if shift != 0 && shift != window / 2 {
            return Err(DenasError::arg(
                "window_attention",
                format!("shift {shift} must be 0 or window/2"),
            ));
        }
        for (name, p) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
            if p.shape[1] < c || p.shape[2] < c {
                return Err(DenasError::shape(
                    "window_attention",
                    format!("{name} {:?} too small for {c} channels", p.shape),
                ));
            }
        }
        let tokens = self.window_partition(x, window, shift)?;
        // Leading-channel slices of the (1, C_full, C_full, 1) projections.
        let slice_proj = |g: &mut Graph, p: Var| -> Result<Var> {
            if p.shape[1] == c && p.shape[2] == c {
                return Ok(p);
            }
            let s = g.slice_c(p, 0, c)?; // rows
            let t = g.transpose_mk(s)?;
            let t = g.slice_c(t, 0, c)?; // cols
            g.transpose_mk(t)
        };
        let wq = slice_proj(self, wq)?;
        let wk = slice_proj(self, wk)?;
        let wv = slice_proj(self, wv)?;
        let wo = slice_proj(self, wo)?;
        let q = self.matmul(tokens, wq)?;
        let k = self.matmul(tokens, wk)?;
        let v = self.matmul(tokens, wv)?;
        let kt = self.transpose_mk(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (c as f64).sqrt())?;
        let attn = self.softmax_rows(scaled)?;
        let ctx = self.matmul(attn, v)?;
        let proj = self.matmul(ctx, wo)?;
        let spatial = self.window_unpartition(proj, window, shift, x.shape)?;
        self.add(x, spatial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g
            .input(TensorData::random([2, 3, 4, 4], 1.0, &mut rng(0)))
            .unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert!(gx.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_backward_is_x() {
        let mut g = Graph::new();
        let data = TensorData::random([1, 2, 3, 3], 1.0, &mut rng(1));
        let x = g.input(data.clone()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().max_abs_diff(&data) < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut g = Graph::new();
        let x = g.input(TensorData::ones([1, 2, 2, 2])).unwrap();
        assert!(g.backward(x).is_err());
        let mut g = Graph::new();
        let x = g.input(TensorData::ones([1, 2, 2, 2])).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let mut g = Graph::new();
        let x = g.input(TensorData::ones([1, 1, 3, 3])).unwrap();
        let k = g.input(TensorData::ones([1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, k, None, 1, 1, 1).unwrap();
        assert_eq!(g.value(y).at(0, 0, 1, 1), 9.0);
        assert_eq!(g.value(y).at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let data = TensorData::random([2, 1, 5, 5], 1.0, &mut rng(2));
        let x = g.input(data.clone()).unwrap();
        let mut kd = TensorData::zeros([1, 1, 3, 3]);
        *kd.at_mut(0, 0, 1, 1) = 1.0;
        let k = g.input(kd).unwrap();
        let y = g.conv2d(x, k, None, 1, 1, 1).unwrap();
        assert!(g.value(y).max_abs_diff(&data) < 1e-15);
    }

    /// Independent nested-loop cross-correlation oracle.
    fn conv_oracle(
        x: &TensorData,
        k: &TensorData,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> TensorData {
        let [n, ci, h, w] = x.shape;
        let [co, _, ks, _] = k.shape;
        let span = dilation * (ks - 1) + 1;
        let ho = (h + 2 * padding - span) / stride + 1;
        let wo = (w + 2 * padding - span) / stride + 1;
        let mut out = TensorData::zeros([n, co, ho, wo]);
        for ni in 0..n {
            for oc in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for dh in 0..ks {
                                for dw in 0..ks {
                                    let ih = oh as isize * stride as isize
                                        + dh as isize * dilation as isize
                                        - padding as isize;
                                    let iw = ow as isize * stride as isize
                                        + dw as isize * dilation as isize
                                        - padding as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w
                                    {
                                        acc += x.at(ni, ic, ih as usize, iw as usize)
                                            * k.at(oc, ic, dh, dw);
                                    }
                                }
                            }
                        }
                        *out.at_mut(ni, oc, oh, ow) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_dilation2_matches_nested_loop_oracle() {
        let mut r = rng(3);
        let xd = TensorData::random([2, 3, 8, 8], 1.0, &mut r);
        let kd = TensorData::random([4, 3, 3, 3], 1.0, &mut r);
        let expect = conv_oracle(&xd, &kd, 1, 2, 2);
        let mut g = Graph::new();
        let x = g.input(xd).unwrap();
        let k = g.input(kd).unwrap();
        let y = g.conv2d(x, k, None, 1, 2, 2).unwrap();
        assert!(g.value(y).max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn conv2d_rejects_bad_args() {
        let mut g = Graph::new();
        let x = g.input(TensorData::ones([1, 2, 4, 4])).unwrap();
        let k = g.input(TensorData::ones([1, 3, 3, 3])).unwrap();
        assert!(g.conv2d(x, k, None, 1, 1, 1).is_err()); // channel mismatch
        let k2 = g.input(TensorData::ones([1, 2, 3, 3])).unwrap();
        assert!(g.conv2d(x, k2, None, 0, 1, 1).is_err()); // zero stride
        assert!(g.conv2d(x, k2, None, 1, 0, 1).is_err()); // zero dilation
    }

    #[test]
    fn pixel_shuffle_definition_and_identity() {
        let mut g = Graph::new();
        let x = g
            .input(TensorData::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.value(y).shape, [1, 1, 2, 2]);
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);

        let data = TensorData::random([1, 3, 2, 2], 1.0, &mut rng(4));
        let x = g.input(data.clone()).unwrap();
        let y = g.pixel_shuffle(x, 1).unwrap();
        assert_eq!(g.value(y).data, data.data);
    }

    #[test]
    fn pixel_shuffle_inverse_is_bit_exact() {
        let mut g = Graph::new();
        let data = TensorData::random([2, 8, 4, 4], 1.0, &mut rng(5));
        let x = g.input(data.clone()).unwrap();
        let y = g.pixel_shuffle(x, 2).unwrap();
        let z = g.pixel_unshuffle(y, 2).unwrap();
        assert_eq!(g.value(z).data, data.data);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let mut g = Graph::new();
        let x = g.input(TensorData::ones([1, 3, 2, 2])).unwrap();
        assert!(g.pixel_shuffle(x, 2).is_err());
    }

    #[test]
    fn instance_norm_constant_plane_is_zero() {
        let mut g = Graph::new();
        let x = g.input(TensorData::filled([1, 2, 3, 3], 5.0)).unwrap();
        let y = g.instance_norm(x, 1e-5).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn instance_norm_pm_one_is_fixed_point() {
        let mut g = Graph::new();
        let x = g
            .input(TensorData::new([1, 1, 1, 2], vec![-1.0, 1.0]).unwrap())
            .unwrap();
        let y = g.instance_norm(x, 1e-15).unwrap();
        assert!((g.value(y).data[0] + 1.0).abs() < 1e-7);
        assert!((g.value(y).data[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn instance_norm_moments() {
        let mut g = Graph::new();
        let x = g
            .input(TensorData::random([1, 1, 8, 8], 3.0, &mut rng(6)))
            .unwrap();
        let y = g.instance_norm(x, 1e-12).unwrap();
        let v = g.value(y);
        let mean: f64 = v.data.iter().sum::<f64>() / v.numel() as f64;
        let var: f64 = v.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.numel() as f64;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn instance_norm_rejects_degenerate_plane() {
        let mut g = Graph::new();
        let x = g.input(TensorData::ones([1, 2, 1, 1])).unwrap();
        assert!(g.instance_norm(x, 1e-5).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g
            .input(TensorData::random([2, 3, 5, 1], 4.0, &mut rng(7)))
            .unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for bi in 0..2 {
            for mi in 0..3 {
                let s: f64 = (0..5).map(|k| v.at(bi, mi, k, 0)).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!((0..5).all(|k| v.at(bi, mi, k, 0) > 0.0));
            }
        }
    }

    #[test]
    fn uniform_attention_for_identical_pixels() {
        // window = H = W with identical pixels -> uniform attention rows.
        let mut g = Graph::new();
        let x = g.input(TensorData::filled([1, 2, 4, 4], 0.7)).unwrap();
        let tokens = g.window_partition(x, 4, 0).unwrap();
        let mut r = rng(8);
        let wq = g.input(TensorData::random([1, 2, 2, 1], 1.0, &mut r)).unwrap();
        let wk = g.input(TensorData::random([1, 2, 2, 1], 1.0, &mut r)).unwrap();
        let q = g.matmul(tokens, wq).unwrap();
        let k = g.matmul(tokens, wk).unwrap();
        let kt = g.transpose_mk(k).unwrap();
        let scores = g.matmul(q, kt).unwrap();
        let attn = g.softmax_rows(scores).unwrap();
        let v = g.value(attn);
        let expect = 1.0 / 16.0;
        assert!(v.data.iter().all(|&p| (p - expect).abs() < 1e-12));
    }

    #[test]
    fn zero_projections_give_residual_plus_mean_value() {
        // zero q/k -> uniform attention; output = x + mean-pooled value proj.
        let mut r = rng(9);
        let xd = TensorData::random([1, 2, 4, 4], 1.0, &mut r);
        let wvd = TensorData::random([1, 2, 2, 1], 1.0, &mut r);
        let wod = TensorData::random([1, 2, 2, 1], 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.input(xd.clone()).unwrap();
        let wq = g.input(TensorData::zeros([1, 2, 2, 1])).unwrap();
        let wk = g.input(TensorData::zeros([1, 2, 2, 1])).unwrap();
        let wv = g.input(wvd.clone()).unwrap();
        let wo = g.input(wod.clone()).unwrap();
        let y = g.window_attention(x, 4, 0, wq, wk, wv, wo).unwrap();

        // Oracle: token mean -> wv -> wo, broadcast, plus residual.
        let t = 16;
        let mut mean = vec![0.0; 2];
        for ci in 0..2 {
            for hi in 0..4 {
                for wi in 0..4 {
                    mean[ci] += xd.at(0, ci, hi, wi) / t as f64;
                }
            }
        }
        let mut v = vec![0.0; 2];
        for j in 0..2 {
            for i in 0..2 {
                v[j] += mean[i] * wvd.at(0, i, j, 0);
            }
        }
        let mut o = vec![0.0; 2];
        for j in 0..2 {
            for i in 0..2 {
                o[j] += v[i] * wod.at(0, i, j, 0);
            }
        }
        let yv = g.value(y);
        for ci in 0..2 {
            for hi in 0..4 {
                for wi in 0..4 {
                    let expect = xd.at(0, ci, hi, wi) + o[ci];
                    assert!((yv.at(0, ci, hi, wi) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_attention_rejects_indivisible_spatial() {
        let mut g = Graph::new();
        let x = g.input(TensorData::ones([1, 2, 5, 5])).unwrap();
        let w = g.input(TensorData::ones([1, 2, 2, 1])).unwrap();
        assert!(g.window_attention(x, 4, 0, w, w, w, w).is_err());
    }

    #[test]
    fn nan_fails_fast_with_op_name() {
        let mut g = Graph::new();
        let x = g.input(TensorData::filled([1, 1, 2, 2], 1e308)).unwrap();
        let err = g.mul(x, x).and_then(|y| g.add(y, y)).unwrap_err();
        match err {
            DenasError::NonFinite { op } => assert!(op == "mul" || op == "add"),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn slice_grads_alias_leading_channels() {
        // conv through a kernel slice must leave trailing kernel grads zero.
        let mut r = rng(10);
        let kparam = Parameter::new("k", TensorData::random([4, 4, 3, 3], 0.5, &mut r));
        let mut g = Graph::new();
        let x = g.input(TensorData::random([1, 2, 4, 4], 1.0, &mut r)).unwrap();
        let k = g.param(&kparam).unwrap();
        let y = g.conv2d_slice(x, k, None, 1, 1, 1, 3, 2).unwrap();
        assert_eq!(y.shape, [1, 3, 4, 4]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let kg = kparam.grad();
        for oc in 0..4 {
            for ic in 0..4 {
                let inside = oc < 3 && ic < 2;
                for dh in 0..3 {
                    for dw in 0..3 {
                        let v = kg.at(oc, ic, dh, dw);
                        if inside {
                            assert!(v != 0.0);
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_replay_bit_identical() {
        let run = || {
            let mut r = rng(11);
            let p = Parameter::new("w", TensorData::random([2, 2, 3, 3], 0.5, &mut r));
            let mut g = Graph::new();
            let x = g.input(TensorData::random([1, 2, 4, 4], 1.0, &mut r)).unwrap();
            let k = g.param(&p).unwrap();
            let y = g.conv2d(x, k, None, 1, 1, 1).unwrap();
            let n = g.instance_norm(y, 1e-5).unwrap();
            let loss = g.l2_sq(n).unwrap();
            g.backward(loss).unwrap();
            p.grad().data
        };
        assert_eq!(run(), run());
    }
}
