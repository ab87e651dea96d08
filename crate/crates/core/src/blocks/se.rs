use crate::blocks::layers::Linear;
use crate::blocks::Ctx;
use crate::engine::Var;
use crate::error::Result;
use crate::params::{ParamBuilder, ParamStore};
use crate::real::Real;

/// Squeeze-and-excitation channel recalibration:
/// `x · sigmoid(W₂ · relu(W₁ · avgpool(x)))`, hidden width `max(1, C / r)`.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl SeGate {
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(1)
    }

    /// Trainable scalars of a gate over `channels` channels.
    pub fn parameter_count(channels: usize, reduction: usize) -> usize {
        let h = Self::hidden_width(channels, reduction);
        2 * channels * h + h + channels
    }

    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::hidden_width(channels, reduction);
        b.scoped(name, |b| {
            Ok(Self {
                squeeze: b.scoped("fc1", |b| Linear::new(b, channels, hidden))?,
                excite: b.scoped("fc2", |b| Linear::new(b, hidden, channels))?,
                channels,
                hidden,
            })
        })
    }

    /// Per-sample, per-channel gate values `(N, C)`.
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.global_avg_pool(x)?;
        let h = self.squeeze.forward(ctx, s)?;
        let h = ctx.tape.relu(h)?;
        let e = self.excite.forward(ctx, h)?;
        ctx.tape.sigmoid(e)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        crate::blocks::expect_channels(ctx, x, self.channels, "se_gate")?;
        let g = self.gate(ctx, x)?;
        ctx.tape.scale_channels(x, g)
    }

    /// Sets every gate weight to zero and the excitation bias to `bias`, so
    /// the gate outputs `sigmoid(bias)` for any input.
    pub fn force<T: Real>(&self, store: &mut ParamStore<T>, bias: f64) {
        for id in [self.squeeze.weight, self.squeeze.bias, self.excite.weight] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        store
            .get_mut(self.excite.bias)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::of(bias));
    }
}
