use alloc::format;
use alloc::vec::Vec;

use crate::blocks::{expect_channels, BlockConfig, BlockVariant, Cbr, Conv3dLayer, Ctx, Inventory, SeGate};
use crate::engine::{UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::real::Real;

/// A small U-Net living inside one resolution stage.
///
/// `CBR(in→out)`, then `depth` levels of `pool → CBR`, then the mirrored
/// `upsample → concat(level skip) → CBR` path back to the input resolution.
#[derive(Clone, Debug)]
pub struct MiniU {
    pub input: Cbr,
    pub down: Vec<Cbr>,
    /// `up[l]` produces level `l` from level `l + 1`; `up[0]` is the output layer.
    pub up: Vec<Cbr>,
    pub depth: usize,
    pub upsample: UpsampleMode,
    pub in_channels: usize,
}

impl MiniU {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.nested_depth == 0 {
            return Err(Error::InvalidConfig("mini-U depth must be at least 1".into()));
        }
        let (out, mid, depth) = (cfg.out_channels, cfg.mid_channels, cfg.nested_depth);
        let width = |level: usize| if level == 0 { out } else { mid };
        b.scoped(name, |b| {
            let input = Cbr::new(b, "cbr_in", cfg.in_channels, out, cfg.norm_mode)?;
            let down = (1..=depth)
                .map(|l| Cbr::new(b, &format!("down{l}"), width(l - 1), mid, cfg.norm_mode))
                .collect::<Result<Vec<_>>>()?;
            let up = (0..depth)
                .map(|l| Cbr::new(b, &format!("up{l}"), mid + width(l), width(l), cfg.norm_mode))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                input,
                down,
                up,
                depth,
                upsample: cfg.upsample,
                in_channels: cfg.in_channels,
            })
        })
    }

    pub fn check_extents<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, op: &'static str) -> Result<()> {
        let required = 1usize << self.depth;
        for &e in &ctx.tape.shape(x)[2..] {
            if e % required != 0 {
                return Err(Error::Indivisible { op, extent: e, required });
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.in_channels, "sipu")?;
        self.check_extents(ctx, x, "sipu")?;
        let mut levels = Vec::with_capacity(self.depth + 1);
        levels.push(self.input.forward(ctx, x)?);
        for cbr in &self.down {
            let prev = *levels.last().expect("level 0 exists");
            let p = ctx.tape.maxpool3d(prev, [2; 3], [2; 3])?;
            levels.push(cbr.forward(ctx, p)?);
        }
        let mut u = levels[self.depth];
        for l in (0..self.depth).rev() {
            let up = ctx.tape.upsample3d(u, self.upsample)?;
            let cat = ctx.tape.concat_channels(up, levels[l])?;
            u = self.up[l].forward(ctx, cat)?;
        }
        Ok(u)
    }

    pub fn output_conv(&self) -> &Conv3dLayer {
        &self.up[0].conv
    }

    pub fn tally(&self, inv: &mut Inventory) {
        inv.mini_us += 1;
        inv.cbr_layers += 1 + 2 * self.depth;
    }
}

/// A mini-U wrapped in a channel residual: `gate(miniU(x)) + proj(x)`.
#[derive(Clone, Debug)]
pub struct Crsu {
    pub body: MiniU,
    pub gate: Option<SeGate>,
    pub proj: Option<Conv3dLayer>,
    pub variant: BlockVariant,
}

impl Crsu {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        b.scoped(name, |b| {
            let body = MiniU::new(b, "body", cfg)?;
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
                body,
                gate,
                proj,
                variant: cfg.variant,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.body.in_channels, "crsu")?;
        self.body.check_extents(ctx, x, "crsu")?;
        let f = self.body.forward(ctx, x)?;
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

    pub fn branch_output_conv(&self) -> &Conv3dLayer {
        self.body.output_conv()
    }

    pub fn tally(&self, inv: &mut Inventory) {
        self.body.tally(inv);
        if self.variant != BlockVariant::Plain {
            inv.residual_adds += 1;
        }
        inv.se_gates += usize::from(self.gate.is_some());
        inv.projections += usize::from(self.proj.is_some());
    }
}
