use std::collections::{BTreeMap, HashSet};

use super::kernels::{self, ConvGeom};
use super::params::{Grads, ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(u64, usize),
    Input,
    Binary(Var, Var, BinKind),
    /// second operand broadcast onto the first
    Bcast(Var, Var, BinKind),
    Scale(Var, F),
    AddScalar(Var),
    Sqrt(Var),
    Exp(Var),
    Powf(Var, F),
    SumAll(Var),
    MeanAll(Var),
    MeanKeep(Var, Vec<usize>),
    Reshape(Var),
    Conv2d(Var, Var, ConvGeom),
    Pad(Var, usize, PadMode),
    SliceC(Var, usize),
    ConcatC(Vec<Var>),
    PixelShuffle(Var),
    UpNearest(Var),
    Resize(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Parameters are pulled in with [`Graph::param`]; they require gradients
/// only when their store was registered with [`Graph::train`].
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    trainable: HashSet<u64>,
    params: BTreeMap<(u64, usize), Var>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trainable: HashSet::new(),
            params: BTreeMap::new(),
        }
    }

    /// Marks every parameter of `store` as trainable in this graph.
    pub fn train(&mut self, store: &ParamStore<F>) {
        self.trainable.insert(store.key());
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Input => false,
            Op::Param(k, _) => self.trainable.contains(k),
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op<F>) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(..) | Op::Input => vec![],
            Op::Binary(a, b, _) | Op::Bcast(a, b, _) | Op::Conv2d(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Powf(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::MeanKeep(a, _)
            | Op::Reshape(a)
            | Op::Pad(a, ..)
            | Op::SliceC(a, _)
            | Op::PixelShuffle(a)
            | Op::UpNearest(a)
            | Op::Resize(a) => vec![*a],
            Op::ConcatC(v) => v.clone(),
        }
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Input that receives a gradient (used by finite-difference checks).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let key = (store.key(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(key.0, key.1));
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.nodes[v.0].value.dims4()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let f = match kind {
            BinKind::Add => |x: F, y: F| x + y,
            BinKind::Sub => |x: F, y: F| x - y,
            BinKind::Mul => |x: F, y: F| x * y,
        };
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, Op::Binary(a, b, kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    fn bcast(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let f = match kind {
            BinKind::Add => |x: F, y: F| x + y,
            BinKind::Sub => |x: F, y: F| x - y,
            BinKind::Mul => |x: F, y: F| x * y,
        };
        let out = kernels::bcast_zip(self.value(a), self.value(b), f)?;
        Ok(self.push(out, Op::Bcast(a, b, kind)))
    }

    /// `a + b` with `b` broadcast over size-1 axes.
    pub fn add_b(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast(a, b, BinKind::Add)
    }

    pub fn sub_b(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast(a, b, BinKind::Sub)
    }

    pub fn mul_b(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast(a, b, BinKind::Mul)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn powf(&mut self, a: Var, p: F) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::MeanAll(a))
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_keep(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut small = shape.clone();
        let mut count = 1usize;
        for &ax in axes {
            let d = small
                .get_mut(ax)
                .ok_or_else(|| Error::shape(format!("axis {ax} out of range for {shape:?}")))?;
            count *= *d;
            *d = 1;
        }
        let mut out = kernels::reduce_sum_to(self.value(a), &small)?;
        let inv = F::one() / F::lit(count as f64);
        out.data_mut().iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(out, Op::MeanKeep(a, shape)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Valid (unpadded) 2-D convolution; kernel `[co, ci/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernel), stride, groups)?;
        let data = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data());
        let out = Tensor::from_vec(&[geom.n, geom.co, geom.ho, geom.wo], data)?;
        Ok(self.push(out, Op::Conv2d(x, kernel, geom)))
    }

    pub fn pad(&mut self, x: Var, pad: usize, mode: PadMode) -> Result<Var> {
        if pad == 0 {
            return Ok(x);
        }
        let out = kernels::pad_forward(self.value(x), pad, mode == PadMode::Replicate)?;
        Ok(self.push(out, Op::Pad(x, pad, mode)))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        Ok(self.push(out, Op::SliceC(x, start)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor<F>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_channels(&vals)?;
        Ok(self.push(out, Op::ConcatC(parts.to_vec())))
    }

    /// `[n, 4c, h, w] -> [n, c, 2h, 2w]`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(x), false)?;
        Ok(self.push(out, Op::PixelShuffle(x)))
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_nearest2(self.value(x))?;
        Ok(self.push(out, Op::UpNearest(x)))
    }

    /// Bilinear resize with half-pixel centres (no corner alignment).
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (_, _, ih, iw) = self.dims4(x)?;
        if (ih, iw) == (h, w) {
            return Ok(x);
        }
        let out = kernels::resize_bilinear(self.value(x), h, w)?;
        Ok(self.push(out, Op::Resize(x)))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), F::one()));
        let mut out = Grads {
            params: BTreeMap::new(),
            vars: BTreeMap::new(),
        };
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.vars.insert(i, g);
                }
                Op::Param(k, idx) => {
                    out.params.insert((*k, *idx), g);
                }
                Op::Input => {}
                op => {
                    for (p, pg) in self.local_grads(op, &node.value, g)? {
                        if !self.nodes[p.0].requires_grad {
                            continue;
                        }
                        match &mut grads[p.0] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                    *a = *a + *b;
                                }
                            }
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, op: &Op<F>, out: &Tensor<F>, g: Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        Ok(match op {
            Op::Leaf | Op::Param(..) | Op::Input => vec![],
            Op::Binary(a, b, kind) => {
                let mut v = Vec::with_capacity(2);
                match kind {
                    BinKind::Add => {
                        if rg(b) {
                            v.push((*b, g.clone()));
                        }
                        v.push((*a, g));
                    }
                    BinKind::Sub => {
                        if rg(b) {
                            v.push((*b, g.scale(-F::one())));
                        }
                        v.push((*a, g));
                    }
                    BinKind::Mul => {
                        if rg(a) {
                            v.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                        }
                        if rg(b) {
                            v.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
                        }
                    }
                }
                v
            }
            Op::Bcast(a, b, kind) => {
                let bshape = self.shape(*b).to_vec();
                let mut v = Vec::with_capacity(2);
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        if rg(b) {
                            let mut gb = kernels::reduce_sum_to(&g, &bshape)?;
                            if matches!(kind, BinKind::Sub) {
                                gb = gb.scale(-F::one());
                            }
                            v.push((*b, gb));
                        }
                        v.push((*a, g));
                    }
                    BinKind::Mul => {
                        if rg(b) {
                            let prod = g.zip_map(self.value(*a), |x, y| x * y)?;
                            v.push((*b, kernels::reduce_sum_to(&prod, &bshape)?));
                        }
                        if rg(a) {
                            v.push((*a, kernels::bcast_zip(&g, self.value(*b), |x, y| x * y)?));
                        }
                    }
                }
                v
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddScalar(a) => vec![(*a, g)],
            Op::Sqrt(a) => {
                let half = F::lit(0.5);
                vec![(*a, g.zip_map(out, |gv, o| gv * half / o)?)]
            }
            Op::Exp(a) => vec![(*a, g.zip_map(out, |gv, o| gv * o)?)],
            Op::Powf(a, p) => {
                let p = *p;
                vec![(
                    *a,
                    g.zip_map(self.value(*a), |gv, x| gv * p * x.powf(p - F::one()))?,
                )]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(self.shape(*a), g.data()[0]))],
            Op::MeanAll(a) => {
                let n = F::lit(self.value(*a).len() as f64);
                vec![(*a, Tensor::full(self.shape(*a), g.data()[0] / n))]
            }
            Op::MeanKeep(a, full) => {
                let count = F::lit((full.iter().product::<usize>() / g.len()) as f64);
                let gb = kernels::broadcast_to(&g, full)?;
                vec![(*a, gb.scale(F::one() / count))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.shape(*a))?)],
            Op::Conv2d(x, k, geom) => {
                let (gx, gk) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g.data(),
                    rg(x),
                    rg(k),
                );
                let mut v = Vec::with_capacity(2);
                if let Some(gx) = gx {
                    v.push((*x, Tensor::from_vec(self.shape(*x), gx)?));
                }
                if let Some(gk) = gk {
                    v.push((*k, Tensor::from_vec(self.shape(*k), gk)?));
                }
                v
            }
            Op::Pad(x, pad, mode) => vec![(
                *x,
                kernels::pad_backward(&g, self.shape(*x), *pad, *mode == PadMode::Replicate)?,
            )],
            Op::SliceC(x, start) => {
                let (n, c, h, w) = self.dims4(*x)?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut full = Tensor::zeros(&[n, c, h, w]);
                let fd = full.data_mut();
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    fd[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                }
                vec![(*x, full)]
            }
            Op::ConcatC(parts) => {
                let mut v = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if rg(p) {
                        v.push((*p, g.slice_channels(start, c)?));
                    }
                    start += c;
                }
                v
            }
            Op::PixelShuffle(x) => vec![(*x, kernels::pixel_shuffle(&g, true)?)],
            Op::UpNearest(x) => vec![(*x, kernels::upsample_nearest2_adjoint(&g)?)],
            Op::Resize(x) => vec![(*x, kernels::resize_bilinear_adjoint(&g, self.shape(*x))?)],
        })
    }
}
