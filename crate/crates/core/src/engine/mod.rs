//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order. [`Tape::backward`]
//! walks the records in exact reverse, summing gradient contributions when a
//! value feeds several consumers, and returns the gradients of every leaf.
//! The tape is consumed by `backward`; build a new one for the next step.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod pool;
pub mod resample;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub use conv::{ConvGeometry, ConvSpec};
pub use norm::{BatchStats, NormMode};
pub use resample::UpsampleMode;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption used to prove the gradient checks
/// can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvBackwardSignFlip,
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample3d {
        x: Var,
        mode: UpsampleMode,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: norm::NormContext<T>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
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
        x: Var,
        factor: T,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SelectChannel {
        x: Var,
        channel: usize,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Dice {
        probs: Var,
        target: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        classes: Vec<usize>,
        probs: Vec<T>,
        clamped: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(N, C, S)` view of a tensor whose first two axes are batch and channel.
fn ncs(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("expected (N,C,...), got {shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2..].iter().product()])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.live()?;
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a registry entry as a leaf; repeated requests share one node
    /// so that all uses accumulate into the same gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.live()?;
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return Ok(*v);
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable)?;
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        Ok(v)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.live()?;
        let geom = ConvGeometry::new(
            self.shape(x),
            self.shape(w),
            b.map(|b| self.shape(b)),
            spec,
        )?;
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv3d", value, Op::Conv3d { x, w, b, geom }, &inputs)
    }

    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        self.live()?;
        let geom = pool::PoolGeometry::new(self.shape(x), kernel, stride)?;
        let (out, argmax) = pool::forward(&geom, self.value(x).data());
        let s = self.shape(x);
        let shape = vec![s[0], s[1], geom.output[0], geom.output[1], geom.output[2]];
        self.push("maxpool3d", Tensor::new(shape, out)?, Op::MaxPool3d { x, argmax }, &[x])
    }

    pub fn upsample3d(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        self.live()?;
        let [n, c, d, h, w] = self.value(x).dims5("upsample3d")?;
        let out = resample::forward(self.value(x).data(), n * c, [d, h, w], mode);
        let value = Tensor::new(vec![n, c, 2 * d, 2 * h, 2 * w], out)?;
        self.push("upsample3d", value, Op::Upsample3d { x, mode }, &[x])
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 3]> {
        let dims = ncs(self.shape(x), "norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [dims[1]] {
                return Err(shape_err(
                    "norm",
                    format!(
                        "input has {} channels, affine parameter shape {:?}",
                        dims[1],
                        self.shape(p)
                    ),
                ));
            }
        }
        Ok(dims)
    }

    fn norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        fixed: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.live()?;
        let dims = self.check_affine(x, gamma, beta)?;
        if let Some((m, v)) = fixed {
            if m.len() != dims[1] || v.len() != dims[1] {
                return Err(shape_err("norm", "running statistics length mismatch"));
            }
        }
        let (out, ctx, stats) = norm::forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
            fixed.map(|(m, v)| (m.data(), v.data())),
            eps,
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            "norm",
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                ctx,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Batch normalisation with statistics taken from the batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (v, stats) = self.norm_impl(x, gamma, beta, NormMode::Batch, None, eps)?;
        Ok((v, stats.expect("batch mode yields statistics")))
    }

    /// Normalisation with externally supplied per-channel statistics.
    pub fn norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        Ok(self
            .norm_impl(x, gamma, beta, NormMode::Batch, Some((mean, var)), eps)?
            .0)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        Ok(self
            .norm_impl(x, gamma, beta, NormMode::Instance, None, eps)?
            .0)
    }

    fn map_unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.live()?;
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.map_unary("scale", x, |v| v * factor, Op::Scale { x, factor })
    }

    fn zip_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.live()?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Channel-axis concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let [n, ca, s] = ncs(sa, "concat_channels")?;
        let [nb, cb, sbv] = ncs(sb, "concat_channels")?;
        if n != nb || s != sbv || sa[2..] != sb[2..] {
            return Err(shape_err(
                "concat_channels",
                format!("non-channel extents differ: {sa:?} vs {sb:?}"),
            ));
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            data.extend_from_slice(&da[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&db[i * cb * s..(i + 1) * cb * s]);
        }
        self.push("concat_channels", Tensor::new(shape, data)?, Op::ConcatChannels { a, b }, &[a, b])
    }

    /// Keeps a single channel, yielding `(N, 1, ...)`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        self.live()?;
        let [n, c, s] = ncs(self.shape(x), "select_channel")?;
        if channel >= c {
            return Err(shape_err("select_channel", format!("channel {channel} of {c}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * s);
        for i in 0..n {
            let off = (i * c + channel) * s;
            data.extend_from_slice(&src[off..off + s]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = 1;
        self.push("select_channel", Tensor::new(shape, data)?, Op::SelectChannel { x, channel }, &[x])
    }

    /// Multiplies every channel of `x` (N,C,...) by `gate` (N,C).
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        self.live()?;
        let [n, c, s] = ncs(self.shape(x), "scale_channels")?;
        if self.shape(gate) != [n, c] {
            return Err(shape_err(
                "scale_channels",
                format!("gate {:?} for input {:?}", self.shape(gate), self.shape(x)),
            ));
        }
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i / s])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale_channels", value, Op::ScaleChannels { x, gate }, &[x, gate])
    }

    /// Per-voxel softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let [n, c, s] = ncs(self.shape(x), "softmax_channels")?;
        let value = Tensor::new(self.shape(x).to_vec(), softmax(self.value(x).data(), n, c, s))?;
        self.push("softmax_channels", value, Op::SoftmaxChannels { x }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let [n, c, s] = ncs(self.shape(x), "global_avg_pool")?;
        let inv = T::one() / T::of(s as f64);
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push("global_avg_pool", Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool { x }, &[x])
    }

    /// `y = x·Wᵀ + b` for `x` (N,Fin), `W` (Fout,Fin), `b` (Fout).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (&[n, fin], &[fout, wfin]) = (self.shape(x), self.shape(w)) else {
            return Err(shape_err(
                "linear",
                format!("expected 2-D input and weight, got {:?} and {:?}", self.shape(x), self.shape(w)),
            ));
        };
        if fin != wfin || self.shape(b) != [fout] {
            return Err(shape_err(
                "linear",
                format!(
                    "inner dimension {fin} vs weight {:?}, bias {:?}",
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * fout);
        for i in 0..n {
            for o in 0..fout {
                let mut acc = bd[o];
                for k in 0..fin {
                    acc += xd[i * fin + k] * wd[o * fin + k];
                }
                data.push(acc);
            }
        }
        self.push("linear", Tensor::new(vec![n, fout], data)?, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(x).sum();
        self.push("sum", Tensor::scalar(v), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let v = t.sum() / T::of(t.len() as f64);
        self.push("mean", Tensor::scalar(v), Op::Mean { x }, &[x])
    }

    /// Soft Dice loss `1 − (2Σp·y + ε) / (Σ(p + y) + ε)` over every element.
    pub fn dice_loss(&mut self, probs: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        self.live()?;
        if self.value(probs).len() != target.len() {
            return Err(shape_err(
                "dice_loss",
                format!("{:?} vs target {:?}", self.shape(probs), target.shape()),
            ));
        }
        let (inter, total) = dice_terms(self.value(probs).data(), target.data());
        let two = T::of(2.0);
        let loss = T::one() - (two * inter + eps) / (total + eps);
        let op = Op::Dice {
            probs,
            target: target.data().to_vec(),
            eps,
        };
        self.push("dice_loss", Tensor::scalar(loss), op, &[probs])
    }

    /// Mean over voxels of `−Σ_c y_c · log(max(softmax_c, 1e-12))` for a
    /// one-hot target laid out like the logits.
    pub fn cross_entropy(&mut self, logits: Var, onehot: &Tensor<T>) -> Result<Var> {
        self.live()?;
        if self.shape(logits) != onehot.shape() {
            return Err(shape_err(
                "ce_loss",
                format!("{:?} vs target {:?}", self.shape(logits), onehot.shape()),
            ));
        }
        let [n, c, s] = ncs(self.shape(logits), "ce_loss")?;
        let y = onehot.data();
        let mut classes = Vec::with_capacity(n * s);
        for i in 0..n {
            for p in 0..s {
                let mut hot = None;
                for k in 0..c {
                    let v = y[(i * c + k) * s + p];
                    if v == T::one() && hot.is_none() {
                        hot = Some(k);
                    } else if v != T::zero() {
                        return Err(Error::NotOneHot(format!(
                            "value {v} at sample {i}, class {k}, voxel {p}"
                        )));
                    }
                }
                classes.push(hot.ok_or_else(|| {
                    Error::NotOneHot(format!("no hot class at sample {i}, voxel {p}"))
                })?);
            }
        }
        let probs = softmax(self.value(logits).data(), n, c, s);
        let floor = T::of(1e-12);
        let mut clamped = Vec::with_capacity(n * s);
        let mut total = T::zero();
        for i in 0..n {
            for p in 0..s {
                let pt = probs[(i * c + classes[i * s + p]) * s + p];
                clamped.push(pt < floor);
                total -= pt.max(floor).ln();
            }
        }
        let loss = total / T::of((n * s) as f64);
        let op = Op::CrossEntropy {
            logits,
            classes,
            probs,
            clamped,
        };
        self.push("ce_loss", Tensor::scalar(loss), op, &[logits])
    }

    /// Propagates d(loss)/d(·) to every leaf and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.live()?;
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar { shape });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                leaf_grads[i] = Some(Tensor::new(shape, g)?);
                continue;
            }
            let contribs = self.node_backward(i, g);
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(c),
                }
            }
            // no consumer of node i remains unprocessed
            self.nodes[i].value = Tensor::full(Vec::new(), T::zero());
            self.nodes[i].op = Op::Leaf;
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        self.nodes.clear();
        Ok(Gradients {
            leaves: leaf_grads,
            params,
        })
    }

    fn node_backward(&self, i: usize, g: Vec<T>) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d { x, w, b, geom } => {
                let mut grads = conv::backward(
                    geom,
                    val(*x),
                    val(*w),
                    &g,
                    [need(*x), need(*w), b.map(need).unwrap_or(false)],
                );
                if self.fault == Some(Fault::ConvBackwardSignFlip) {
                    for part in [&mut grads.input, &mut grads.weight, &mut grads.bias] {
                        if let Some(p) = part {
                            p.iter_mut().for_each(|v| *v = -*v);
                        }
                    }
                }
                let mut out = Vec::new();
                if let Some(gx) = grads.input {
                    out.push((*x, gx));
                }
                if let Some(gw) = grads.weight {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    out.push((*b, gb));
                }
                out
            }
            Op::MaxPool3d { x, argmax } => {
                vec![(*x, pool::backward(val(*x).len(), argmax, &g))]
            }
            Op::Upsample3d { x, mode } => {
                let s = self.nodes[x.0].value.shape();
                vec![(*x, resample::backward(&g, s[0] * s[1], [s[2], s[3], s[4]], *mode))]
            }
            Op::Norm { x, gamma, beta, ctx } => {
                let ng = norm::backward(ctx, val(*gamma), &g);
                vec![(*x, ng.input), (*gamma, ng.gamma), (*beta, ng.beta)]
            }
            Op::Relu { x } => {
                let gx = val(*x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                vec![(*x, y.iter().zip(&g).map(|(&s, &d)| d * s * (T::one() - s)).collect())]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g)],
            Op::Mul { a, b } => {
                let ga = g.iter().zip(val(*b)).map(|(&d, &v)| d * v).collect();
                let gb = g.iter().zip(val(*a)).map(|(&d, &v)| d * v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|&d| d * *factor).collect())],
            Op::ConcatChannels { a, b } => {
                let sa = self.nodes[a.0].value.shape();
                let [n, ca, s] = [sa[0], sa[1], sa[2..].iter().product()];
                let cb = self.nodes[b.0].value.shape()[1];
                let mut ga = Vec::with_capacity(n * ca * s);
                let mut gb = Vec::with_capacity(n * cb * s);
                for chunk in g.chunks((ca + cb) * s) {
                    ga.extend_from_slice(&chunk[..ca * s]);
                    gb.extend_from_slice(&chunk[ca * s..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::SelectChannel { x, channel } => {
                let sx = self.nodes[x.0].value.shape();
                let [n, c, s] = [sx[0], sx[1], sx[2..].iter().product()];
                let mut gx = vec![T::zero(); n * c * s];
                for i in 0..n {
                    let off = (i * c + channel) * s;
                    gx[off..off + s].copy_from_slice(&g[i * s..(i + 1) * s]);
                }
                vec![(*x, gx)]
            }
            Op::ScaleChannels { x, gate } => {
                let gv = val(*gate);
                let xv = val(*x);
                let s = xv.len() / gv.len();
                let gx = g.iter().enumerate().map(|(i, &d)| d * gv[i / s]).collect();
                let gg = g
                    .chunks(s)
                    .zip(xv.chunks(s))
                    .map(|(d, xs)| d.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>())
                    .collect();
                vec![(*x, gx), (*gate, gg)]
            }
            Op::SoftmaxChannels { x } => {
                let y = node.value.data();
                let sx = node.value.shape();
                let [n, c, s] = [sx[0], sx[1], sx[2..].iter().product::<usize>()];
                let mut gx = vec![T::zero(); y.len()];
                for i in 0..n {
                    for p in 0..s {
                        let idx = |k: usize| (i * c + k) * s + p;
                        let dot: T = (0..c).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..c {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool { x } => {
                let xl = val(*x).len();
                let s = xl / g.len();
                let inv = T::one() / T::of(s as f64);
                vec![(*x, (0..xl).map(|i| g[i / s] * inv).collect())]
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
                let (n, fin, fout) = (xs[0], xs[1], ws[0]);
                let (xd, wd) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); n * fin];
                let mut gw = vec![T::zero(); fout * fin];
                let mut gb = vec![T::zero(); fout];
                for i in 0..n {
                    for o in 0..fout {
                        let d = g[i * fout + o];
                        gb[o] += d;
                        for k in 0..fin {
                            gx[i * fin + k] += d * wd[o * fin + k];
                            gw[o * fin + k] += d * xd[i * fin + k];
                        }
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean { x } => {
                let l = val(*x).len();
                vec![(*x, vec![g[0] / T::of(l as f64); l])]
            }
            Op::Dice { probs, target, eps } => {
                let p = val(*probs);
                let (inter, total) = dice_terms(p, target);
                let two = T::of(2.0);
                let den = total + *eps;
                let num = two * inter + *eps;
                let gp = target
                    .iter()
                    .map(|&y| -g[0] * (two * y * den - num) / (den * den))
                    .collect();
                vec![(*probs, gp)]
            }
            Op::CrossEntropy {
                logits,
                classes,
                probs,
                clamped,
            } => {
                let sx = self.nodes[logits.0].value.shape();
                let [n, c, s] = [sx[0], sx[1], sx[2..].iter().product::<usize>()];
                let scale = g[0] / T::of((n * s) as f64);
                let mut gx = vec![T::zero(); probs.len()];
                for i in 0..n {
                    for p in 0..s {
                        if clamped[i * s + p] {
                            continue;
                        }
                        for k in 0..c {
                            let idx = (i * c + k) * s + p;
                            let hot = if classes[i * s + p] == k { T::one() } else { T::zero() };
                            gx[idx] = scale * (probs[idx] - hot);
                        }
                    }
                }
                vec![(*logits, gx)]
            }
        }
    }
}

fn softmax<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for p in 0..s {
            let idx = |k: usize| (i * c + k) * s + p;
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(x[idx(k)]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (x[idx(k)] - m).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..c {
                out[idx(k)] = out[idx(k)] / z;
            }
        }
    }
    out
}

fn dice_terms<T: Real>(p: &[T], y: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut total = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        inter += a * b;
        total += a + b;
    }
    (inter, total)
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into the registry accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                let p = store.get_mut(id);
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += *b);
            }
        }
    }
}
