use alloc::format;

use crate::blocks::{Ctx, Mode};
use crate::engine::{ConvSpec, NormMode, Var};
use crate::error::Result;
use crate::params::{ParamBuilder, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv3dLayer {
    /// Cubic kernel of extent `k` with "same" padding for odd `k`.
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let weight = b.he_normal("weight", &[cout, cin, k, k, k], cin * k * k * k)?;
        let bias = b.constant("bias", &[cout], 0.0)?;
        Ok(Self {
            weight,
            bias,
            spec: ConvSpec::padded(k / 2),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        ctx.tape.conv3d(x, w, Some(b), self.spec)
    }

    /// Zeroes weight and bias so the layer outputs exactly zero.
    pub fn zero<T: Real>(&self, store: &mut crate::params::ParamStore<T>) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Running mean and variance, present in batch mode only.
    pub running: Option<(ParamId, ParamId)>,
    pub mode: NormMode,
    pub eps: f64,
    pub momentum: f64,
}

impl Norm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, mode: NormMode) -> Result<Self> {
        let gamma = b.constant("gamma", &[channels], 1.0)?;
        let beta = b.constant("beta", &[channels], 0.0)?;
        let running = match mode {
            NormMode::Batch => Some((
                b.buffer("running_mean", &[channels], 0.0)?,
                b.buffer("running_var", &[channels], 1.0)?,
            )),
            NormMode::Instance => None,
        };
        Ok(Self {
            gamma,
            beta,
            running,
            mode,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma)?;
        let beta = ctx.param(self.beta)?;
        let eps = T::of(self.eps);
        match (self.mode, self.running, ctx.mode) {
            (NormMode::Batch, Some((rm, rv)), Mode::Train) => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                for (id, fresh) in [(rm, &stats.mean), (rv, &stats.var_unbiased)] {
                    let buf = ctx.store.get_mut(id).value.data_mut();
                    for (r, &f) in buf.iter_mut().zip(fresh) {
                        *r = keep * *r + m * f;
                    }
                }
                Ok(y)
            }
            (NormMode::Batch, Some((rm, rv)), Mode::Eval) => {
                let mean: Tensor<T> = ctx.store.value(rm).clone();
                let var: Tensor<T> = ctx.store.value(rv).clone();
                ctx.tape.norm_fixed(x, gamma, beta, &mean, &var, eps)
            }
            (NormMode::Batch, None, _) => Err(crate::Error::InvalidConfig(format!(
                "batch norm without running statistics"
            ))),
            (NormMode::Instance, _, _) => ctx.tape.instance_norm(x, gamma, beta, eps),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, fin: usize, fout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.he_normal("weight", &[fout, fin], fin)?,
            bias: b.constant("bias", &[fout], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        ctx.tape.linear(x, w, b)
    }
}

/// Convolution → normalisation → ReLU, 3³ kernel, extents preserved.
#[derive(Clone, Debug)]
pub struct Cbr {
    pub conv: Conv3dLayer,
    pub norm: Norm,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Cbr {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        mode: NormMode,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                conv: b.scoped("conv", |b| Conv3dLayer::new(b, cin, cout, 3))?,
                norm: b.scoped("norm", |b| Norm::new(b, cout, mode))?,
                in_channels: cin,
                out_channels: cout,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        crate::blocks::expect_channels(ctx, x, self.in_channels, "cbr")?;
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}
