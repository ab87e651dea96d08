use crate::blocks::{expect_channels, BlockConfig, BlockVariant, Cbr, Conv3dLayer, Ctx, Inventory, SeGate};
use crate::engine::Var;
use crate::error::Result;
use crate::params::ParamBuilder;
use crate::real::Real;

/// Two stacked CBR layers with an optional channel-gated skip:
/// `x' = gate(F(x)) + proj(x)`. `proj` is the identity when channel counts
/// match and a 1×1×1 convolution otherwise.
#[derive(Clone, Debug)]
pub struct ChannelResidual {
    pub first: Cbr,
    pub second: Cbr,
    pub gate: Option<SeGate>,
    pub proj: Option<Conv3dLayer>,
    pub variant: BlockVariant,
    pub in_channels: usize,
}

impl ChannelResidual {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        b.scoped(name, |b| {
            let first = Cbr::new(b, "cbr1", cfg.in_channels, cfg.mid_channels, cfg.norm_mode)?;
            let second = Cbr::new(b, "cbr2", cfg.mid_channels, cfg.out_channels, cfg.norm_mode)?;
            let gate = match cfg.variant {
                BlockVariant::ChannelResidual => Some(SeGate::new(b, "gate", cfg.out_channels, cfg.se_reduction)?),
                _ => None,
            };
            let proj = if cfg.variant != BlockVariant::Plain && cfg.in_channels != cfg.out_channels {
                Some(b.scoped("proj", |b| Conv3dLayer::new(b, cfg.in_channels, cfg.out_channels, 1))?)
            } else {
                None
            };
            Ok(Self {
                first,
                second,
                gate,
                proj,
                variant: cfg.variant,
                in_channels: cfg.in_channels,
            })
        })
    }

    /// The learned branch `F(x)` before gating.
    pub fn branch<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(ctx, x)?;
        self.second.forward(ctx, h)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.in_channels, "channel_residual")?;
        let f = self.branch(ctx, x)?;
        let f = match &self.gate {
            Some(g) => g.forward(ctx, f)?,
            None => f,
        };
        if self.variant == BlockVariant::Plain {
            return Ok(f);
        }
        let skip = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(f, skip)
    }

    /// Final convolution of the learned branch.
    pub fn branch_output_conv(&self) -> &Conv3dLayer {
        &self.second.conv
    }

    pub fn tally(&self, inv: &mut Inventory) {
        inv.cbr_layers += 2;
        if self.variant != BlockVariant::Plain {
            inv.residual_adds += 1;
        }
        inv.se_gates += usize::from(self.gate.is_some());
        inv.projections += usize::from(self.proj.is_some());
    }
}
