use crate::blocks::{expect_channels, BlockConfig, Cbr, Ctx, Inventory, SeGate};
use crate::engine::{UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::real::Real;

/// Bottleneck fusion unit: a depth-1 mini-U whose skip path is recalibrated
/// by a squeeze-excitation gate before concatenation,
/// `CBR_out(concat(SE(x), up(CBR_mid(pool(CBR_in(x))))))`.
///
/// With `depth == 0` the U-branch runs at the input resolution, which lets a
/// 1³ bottleneck use the same unit.
#[derive(Clone, Debug)]
pub struct Ceu {
    pub skip_gate: SeGate,
    pub enter: Cbr,
    pub inner: Cbr,
    pub fuse: Cbr,
    pub depth: usize,
    pub upsample: UpsampleMode,
    pub channels: usize,
}

impl Ceu {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.in_channels != cfg.out_channels || cfg.nested_depth > 1 {
            return Err(Error::InvalidConfig(alloc::format!(
                "CEU is shape-preserving with depth ≤ 1: {cfg:?}"
            )));
        }
        let c = cfg.in_channels;
        b.scoped(name, |b| {
            Ok(Self {
                skip_gate: SeGate::new(b, "skip_gate", c, cfg.se_reduction)?,
                enter: Cbr::new(b, "cbr_in", c, cfg.mid_channels, cfg.norm_mode)?,
                inner: Cbr::new(b, "cbr_mid", cfg.mid_channels, c, cfg.norm_mode)?,
                fuse: Cbr::new(b, "cbr_out", 2 * c, c, cfg.norm_mode)?,
                depth: cfg.nested_depth,
                upsample: cfg.upsample,
                channels: c,
            })
        })
    }

    /// The U-branch alone.
    pub fn u_branch<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.enter.forward(ctx, x)?;
        if self.depth == 0 {
            return self.inner.forward(ctx, h);
        }
        let p = ctx.tape.maxpool3d(h, [2; 3], [2; 3])?;
        let m = self.inner.forward(ctx, p)?;
        ctx.tape.upsample3d(m, self.upsample)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.channels, "ceu")?;
        if self.depth == 1 {
            for &e in &ctx.tape.shape(x)[2..] {
                if e < 2 || e % 2 != 0 {
                    return Err(Error::Indivisible { op: "ceu", extent: e, required: 2 });
                }
            }
        }
        let skip = self.skip_gate.forward(ctx, x)?;
        let u = self.u_branch(ctx, x)?;
        let cat = ctx.tape.concat_channels(skip, u)?;
        self.fuse.forward(ctx, cat)
    }

    pub fn tally(&self, inv: &mut Inventory) {
        inv.mini_us += 1;
        inv.se_gates += 1;
        inv.cbr_layers += 3;
    }
}
