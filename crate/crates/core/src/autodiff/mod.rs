//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] records every operation in execution order, so node inputs always
//! precede the node. [`Tape::backward`] walks the record once in reverse,
//! releasing each node's value as soon as its gradient has been propagated.
//!
//! [`Tape::checkpoint`] records a sub-computation by its inputs and output only
//! and replays it during the backward pass. The supernet wraps every mixed edge
//! in one, which keeps activation memory proportional to the number of edges
//! instead of the number of primitive operations.

pub mod gradcheck;
pub mod kernels;

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::params::{BnUpdate, ParamGroup, ParamId, ParamStore, StatsId};
use crate::tensor::{Shape, Tensor};

pub use kernels::{ConvGeom, PoolKind};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics in batch norm; eval mode uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMode {
    pub weights: bool,
    pub arch: bool,
}

impl GradMode {
    pub const NONE: GradMode = GradMode {
        weights: false,
        arch: false,
    };
    pub const WEIGHTS: GradMode = GradMode {
        weights: true,
        arch: false,
    };
    pub const ARCH: GradMode = GradMode {
        weights: false,
        arch: true,
    };
    pub const ALL: GradMode = GradMode {
        weights: true,
        arch: true,
    };

    fn wants(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Weight => self.weights,
            ParamGroup::Arch => self.arch,
        }
    }
}

type Replay<'a> = Rc<dyn Fn(&mut Tape<'a>, &[Var]) -> Result<Var> + 'a>;

enum Op<'a> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Vec<Var>),
    Scale(Var, f64),
    ScaleGrad(Var, f64),
    Mix {
        xs: Vec<Option<Var>>,
        probs: Var,
        row: usize,
    },
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    Shift(Var),
    Zero,
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    DotConst(Var, Rc<Vec<f64>>),
    Checkpoint {
        inputs: Vec<Var>,
        replay: Replay<'a>,
    },
}

struct Node<'a> {
    value: Tensor,
    requires_grad: bool,
    op: Op<'a>,
}

static EMPTY_STORE: ParamStore = ParamStore::new();

/// Operation record for one forward pass.
pub struct Tape<'a> {
    store: &'a ParamStore,
    grad_mode: GradMode,
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Vec<f64>>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter, `None` when the parameter was not on the tape or
    /// did not require a gradient.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    /// Gradient of a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    fn add_param(&mut self, id: ParamId, g: Vec<f64>) {
        match self.params.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                self.params.insert(id, g);
            }
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore, grad_mode: GradMode) -> Self {
        Tape {
            store,
            grad_mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// A tape with no parameters, for computations over leaves only.
    pub fn detached() -> Tape<'static> {
        Tape::new(&EMPTY_STORE, GradMode::NONE)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics observed by train-mode batch norms so far.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op<'a>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Put a stored parameter on the tape. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let rg = self.grad_mode.wants(p.group);
        let v = self.push(p.value.clone(), rg, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), &geom)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, rg, Op::Conv { x, w, geom }))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, stride: usize) -> Result<Var> {
        let out = kernels::pool2d_forward(self.value(x), kind, stride)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Pool { x, kind, stride }))
    }

    /// Batch normalization. `scale`/`shift` are per-channel affine parameters.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        stats: StatsId,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x);
        let c = shape.c();
        for p in [scale, shift].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(dim_err!(
                    "batch-norm affine parameter has {} values for {c} channels",
                    self.value(p).numel()
                ));
            }
        }
        let running = self.store.stats(stats);
        if running.mean.len() != c {
            return Err(dim_err!(
                "batch-norm statistics {} track {} channels, input has {c}",
                running.name,
                running.mean.len()
            ));
        }
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let count = shape.n() * shape.plane();
                if count < 2 {
                    return Err(dim_err!(
                        "train-mode batch norm needs at least 2 values per channel, got {count}"
                    ));
                }
                let (mean, var) = kernels::channel_stats(self.value(x));
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect();
                self.bn_updates.push(BnUpdate {
                    id: stats,
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, var, true)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone(), false),
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + kernels::BN_EPS).sqrt())
            .collect();
        let out = kernels::bn_apply(
            self.value(x),
            &mean,
            &inv_std,
            scale.map(|s| self.value(s).data()),
            shift.map(|s| self.value(s).data()),
        );
        let mut deps = vec![x];
        deps.extend(scale);
        deps.extend(shift);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_vec(src.shape(), data).expect("relu shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// Elementwise sum of equally shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| arg_err!("add_n needs an input"))?;
        let shape = self.shape(first);
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            if self.shape(x) != shape {
                return Err(dim_err!("cannot add {} and {}", shape, self.shape(x)));
            }
            for (o, v) in out.data_mut().iter_mut().zip(self.value(x).data()) {
                *o += v;
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(out, rg, Op::Add(xs.to_vec())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_vec(src.shape(), data).expect("scale shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Scale(x, factor))
    }

    /// Identity forward; multiplies the incoming gradient by `factor` on the way back.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).clone();
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::ScaleGrad(x, factor))
    }

    /// Row-wise softmax over the last axis of `x`, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let w = src.shape().w();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(w) {
            softmax_in_place(row);
        }
        let out = Tensor::from_vec(src.shape(), data).expect("softmax shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::SoftmaxRows(x))
    }

    /// Σ_o probs[row, o] · xs[o]; `None` entries are all-zero branches.
    pub fn mix(&mut self, xs: &[Option<Var>], probs: Var, row: usize) -> Result<Var> {
        let pv = self.value(probs);
        let width = pv.shape().w();
        if width != xs.len() || (row + 1) * width > pv.numel() {
            return Err(dim_err!(
                "mix of {} branches against probability table {} row {row}",
                xs.len(),
                pv.shape()
            ));
        }
        let weights = pv.data()[row * width..(row + 1) * width].to_vec();
        let present: Vec<Var> = xs.iter().flatten().copied().collect();
        let first = *present
            .first()
            .ok_or_else(|| arg_err!("mix needs at least one non-zero branch"))?;
        let shape = self.shape(first);
        let mut out = Tensor::zeros(shape);
        for (x, w) in xs.iter().zip(&weights) {
            if let Some(x) = x {
                if self.shape(*x) != shape {
                    return Err(dim_err!("mix branch {} vs {}", self.shape(*x), shape));
                }
                for (o, v) in out.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *o += w * v;
                }
            }
        }
        let mut deps = present;
        deps.push(probs);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            rg,
            Op::Mix {
                xs: xs.to_vec(),
                probs,
                row,
            },
        ))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| arg_err!("concat needs an input"))?;
        let [n, _, h, w] = self.shape(first).dims();
        let mut c_total = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.shape(x).dims();
            if (xn, xh, xw) != (n, h, w) {
                return Err(dim_err!(
                    "cannot concatenate {} with {}",
                    self.shape(x),
                    self.shape(first)
                ));
            }
            c_total += xc;
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for &x in xs {
                data.extend_from_slice(self.value(x).sample(b));
            }
        }
        let out = Tensor::from_vec(Shape::new(n, c_total, h, w), data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(out, rg, Op::Concat(xs.to_vec())))
    }

    /// y[.., i, j] = x[.., i+1, j+1], zero past the last row/column.
    pub fn shift(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape().dims();
        let mut out = Tensor::zeros(src.shape());
        let (s, o) = (src.data(), out.data_mut());
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..h.saturating_sub(1) {
                for j in 0..w.saturating_sub(1) {
                    o[base + i * w + j] = s[base + (i + 1) * w + j + 1];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Shift(x))
    }

    /// All-zero output with spatial dims `ceil(dim / stride)`.
    pub fn zero(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(arg_err!("stride must be positive"));
        }
        let [n, c, h, w] = self.shape(x).dims();
        let out = Tensor::zeros(Shape::new(n, c, h.div_ceil(stride), w.div_ceil(stride)));
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Zero))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape().dims();
        let p = (h * w) as f64;
        let data = src
            .data()
            .chunks(h * w)
            .map(|plane| kernels::sum(plane) / p)
            .collect();
        let out = Tensor::from_vec(Shape::new(n, c, 1, 1), data).expect("gap shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::GlobalAvgPool(x))
    }

    /// Fully connected layer. `w` has shape `(out, in, 1, 1)`, `b` holds `out`
    /// values; each sample of `x` is flattened to `in` features.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let n = xs.n();
        let feat = xs.numel() / n.max(1);
        let [out_f, in_f, _, _] = self.shape(w).dims();
        if in_f != feat || self.shape(w).plane() != 1 {
            return Err(dim_err!(
                "linear weight {} cannot take {feat} features",
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != out_f {
                return Err(dim_err!("linear bias has {} values, need {out_f}", self.value(b).numel()));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut data = vec![0.0; n * out_f];
        for s in 0..n {
            let row = &xv[s * feat..(s + 1) * feat];
            for o in 0..out_f {
                data[s * out_f + o] =
                    kernels::dot(&wv[o * feat..(o + 1) * feat], row) + bv.map_or(0.0, |b| b[o]);
            }
        }
        let out = Tensor::from_vec(Shape::new(n, out_f, 1, 1), data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    /// Mean over the batch of −log softmax(logits)[target].
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        let n = ls.n();
        let k = ls.numel() / n.max(1);
        if targets.len() != n {
            return Err(arg_err!("{} targets for a batch of {n}", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(arg_err!("target class {t} out of range for {k} classes"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// Σ weights·x as a scalar.
    pub fn dot_const(&mut self, x: Var, weights: Rc<Vec<f64>>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(dim_err!(
                "{} weights for a tensor of {} values",
                weights.len(),
                self.value(x).numel()
            ));
        }
        let total = kernels::dot(self.value(x).data(), &weights);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), rg, Op::DotConst(x, weights)))
    }

    /// Run `f` on a scratch tape, recording only its output here. The backward
    /// pass replays `f` to rebuild the intermediates it needs.
    pub fn checkpoint<F>(&mut self, inputs: &[Var], f: F) -> Result<Var>
    where
        F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var> + 'a,
    {
        let mut sub = Tape::new(self.store, self.grad_mode);
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|&v| sub.leaf(self.value(v).clone(), self.requires_grad(v)))
            .collect();
        let out = f(&mut sub, &leaves)?;
        let rg = sub.requires_grad(out);
        self.bn_updates.append(&mut sub.bn_updates);
        let value = std::mem::replace(&mut sub.nodes[out.0].value, Tensor::zeros(Shape::scalar()));
        Ok(self.push(
            value,
            rg,
            Op::Checkpoint {
                inputs: inputs.to_vec(),
                replay: Rc::new(f),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf and parameter
    /// that requires one.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            ));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    fn backward_seeded(mut self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        let mut result = Gradients::default();
        let leaf_shapes: Vec<(usize, Shape)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| (i, n.value.shape()))
            .collect();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        self.nodes.truncate(out.0 + 1);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut contrib: Vec<(Var, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::from_vec(node.value.shape(), g)?;
                    result.leaves.insert(i, t);
                }
                Op::Param(id) => result.add_param(*id, g),
                Op::Conv { x, w, geom } => {
                    let gt = Tensor::from_vec(node.value.shape(), g)?;
                    if self.requires_grad(*x) {
                        let gi = kernels::conv2d_backward_input(&gt, self.shape(*x), self.value(*w), geom);
                        contrib.push((*x, gi.into_data()));
                    }
                    if self.requires_grad(*w) {
                        let gw = kernels::conv2d_backward_weight(&gt, self.value(*x), self.shape(*w), geom);
                        contrib.push((*w, gw.into_data()));
                    }
                }
                Op::Pool { x, kind, stride } => {
                    let gt = Tensor::from_vec(node.value.shape(), g)?;
                    let gi = kernels::pool2d_backward(&gt, self.value(*x), *kind, *stride);
                    contrib.push((*x, gi.into_data()));
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let gt = Tensor::from_vec(node.value.shape(), g)?;
                    let need_x = self.requires_grad(*x);
                    let (gi, g_scale, g_shift) = kernels::bn_backward(
                        &gt,
                        self.value(*x),
                        mean,
                        inv_std,
                        scale.map(|s| self.value(s).data()),
                        *batch_stats,
                        need_x,
                    );
                    if let Some(gi) = gi {
                        contrib.push((*x, gi.into_data()));
                    }
                    if let Some(s) = scale {
                        if self.requires_grad(*s) {
                            contrib.push((*s, g_scale));
                        }
                    }
                    if let Some(s) = shift {
                        if self.requires_grad(*s) {
                            contrib.push((*s, g_shift));
                        }
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.data();
                    let gi = g
                        .iter()
                        .zip(y)
                        .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                        .collect();
                    contrib.push((*x, gi));
                }
                Op::Add(xs) => {
                    let live: Vec<Var> = xs.iter().copied().filter(|&x| self.requires_grad(x)).collect();
                    if let Some((&last, rest)) = live.split_last() {
                        for &x in rest {
                            contrib.push((x, g.clone()));
                        }
                        contrib.push((last, g));
                    }
                }
                Op::Scale(x, f) => contrib.push((*x, g.iter().map(|v| v * f).collect())),
                Op::ScaleGrad(x, f) => contrib.push((*x, g.iter().map(|v| v * f).collect())),
                Op::Mix { xs, probs, row } => {
                    let pv = self.value(*probs);
                    let width = pv.shape().w();
                    let weights = &pv.data()[row * width..(row + 1) * width];
                    for (x, &w) in xs.iter().zip(weights) {
                        if let Some(x) = x {
                            if self.requires_grad(*x) {
                                contrib.push((*x, g.iter().map(|v| v * w).collect()));
                            }
                        }
                    }
                    if self.requires_grad(*probs) {
                        let mut gp = vec![0.0; pv.numel()];
                        for (o, x) in xs.iter().enumerate() {
                            if let Some(x) = x {
                                gp[row * width + o] = kernels::dot(&g, self.value(*x).data());
                            }
                        }
                        contrib.push((*probs, gp));
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.data();
                    let width = node.value.shape().w();
                    let mut gi = vec![0.0; y.len()];
                    for ((gr, yr), dr) in g.chunks(width).zip(y.chunks(width)).zip(gi.chunks_mut(width)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - s);
                        }
                    }
                    contrib.push((*x, gi));
                }
                Op::Concat(xs) => {
                    let [n, _, h, w] = node.value.shape().dims();
                    let p = h * w;
                    let mut offset = 0;
                    let c_total = node.value.shape().c();
                    for &x in xs {
                        let c = self.shape(x).c();
                        if self.requires_grad(x) {
                            let mut gi = Vec::with_capacity(n * c * p);
                            for b in 0..n {
                                let start = (b * c_total + offset) * p;
                                gi.extend_from_slice(&g[start..start + c * p]);
                            }
                            contrib.push((x, gi));
                        }
                        offset += c;
                    }
                }
                Op::Shift(x) => {
                    let [n, c, h, w] = node.value.shape().dims();
                    let mut gi = vec![0.0; g.len()];
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for i in 0..h.saturating_sub(1) {
                            for j in 0..w.saturating_sub(1) {
                                gi[base + (i + 1) * w + j + 1] = g[base + i * w + j];
                            }
                        }
                    }
                    contrib.push((*x, gi));
                }
                Op::Zero => {}
                Op::GlobalAvgPool(x) => {
                    let xs = self.shape(*x);
                    let p = xs.plane();
                    let mut gi = Vec::with_capacity(xs.numel());
                    for &gv in &g {
                        gi.extend(std::iter::repeat(gv / p as f64).take(p));
                    }
                    contrib.push((*x, gi));
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x);
                    let n = xs.n();
                    let feat = xs.numel() / n.max(1);
                    let out_f = self.shape(*w).n();
                    if self.requires_grad(*x) {
                        let wv = self.value(*w).data();
                        let mut gi = vec![0.0; xs.numel()];
                        for s in 0..n {
                            let dst = &mut gi[s * feat..(s + 1) * feat];
                            for o in 0..out_f {
                                let gv = g[s * out_f + o];
                                for (d, wv) in dst.iter_mut().zip(&wv[o * feat..(o + 1) * feat]) {
                                    *d += gv * wv;
                                }
                            }
                        }
                        contrib.push((*x, gi));
                    }
                    if self.requires_grad(*w) {
                        let xv = self.value(*x).data();
                        let mut gw = vec![0.0; out_f * feat];
                        for s in 0..n {
                            let row = &xv[s * feat..(s + 1) * feat];
                            for o in 0..out_f {
                                let gv = g[s * out_f + o];
                                for (d, xv) in gw[o * feat..(o + 1) * feat].iter_mut().zip(row) {
                                    *d += gv * xv;
                                }
                            }
                        }
                        contrib.push((*w, gw));
                    }
                    if let Some(b) = b {
                        if self.requires_grad(*b) {
                            let mut gb = vec![0.0; out_f];
                            for s in 0..n {
                                for o in 0..out_f {
                                    gb[o] += g[s * out_f + o];
                                }
                            }
                            contrib.push((*b, gb));
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut gi = probs.clone();
                    for (row, &t) in gi.chunks_mut(k).zip(targets) {
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    contrib.push((*logits, gi));
                }
                Op::Sum(x) => contrib.push((*x, vec![g[0]; self.value(*x).numel()])),
                Op::DotConst(x, w) => contrib.push((*x, w.iter().map(|v| v * g[0]).collect())),
                Op::Checkpoint { inputs, replay } => {
                    let mut sub = Tape::new(self.store, self.grad_mode);
                    let leaves: Vec<Var> = inputs
                        .iter()
                        .map(|&v| sub.leaf(self.value(v).clone(), self.requires_grad(v)))
                        .collect();
                    let sub_out = replay(&mut sub, &leaves)?;
                    let sub_grads = sub.backward_seeded(sub_out, g)?;
                    for (&leaf, &input) in leaves.iter().zip(inputs) {
                        if let Some(gl) = sub_grads.leaves.get(&leaf.0) {
                            if self.requires_grad(input) {
                                contrib.push((input, gl.data().to_vec()));
                            }
                        }
                    }
                    let mut ids: Vec<ParamId> = sub_grads.params.keys().copied().collect();
                    ids.sort();
                    for id in ids {
                        let pv = self.param_vars.get(&id).copied();
                        let gp = sub_grads.params[&id].clone();
                        match pv {
                            Some(v) if v.0 < i => contrib.push((v, gp)),
                            _ => result.add_param(id, gp),
                        }
                    }
                }
            }
            for (v, gv) in contrib {
                accumulate(&mut grads[v.0], gv);
            }
            self.nodes[i].value = Tensor::zeros(Shape::new(0, 0, 0, 0));
        }
        for (i, shape) in leaf_shapes {
            result.leaves.entry(i).or_insert_with(|| Tensor::zeros(shape));
        }
        Ok(result)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Fail with a numeric error when any value is non-finite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            message: format!("{what} contains non-finite values"),
            snapshot: None,
        })
    }
}
