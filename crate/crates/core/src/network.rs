//! The full 3D segmentation network: four encoder stages, a bottleneck,
//! four decoder stages and a 1×1×1 classification head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    BlockConfig, BlockVariant, Ceu, ChannelResidual, Conv3dLayer, Crsu, Ctx, Inventory, MiniU, Mode,
};
use crate::engine::{NormMode, Tape, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Block-composition presets for the ablation models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetVariant {
    /// Two plain CBR layers per stage.
    Unet,
    /// Two CBR layers per stage with an additive skip.
    Resunet,
    /// Nested-U stages, no residual skips.
    BaseU,
    /// Nested-U stages with additive residual skips.
    BaseRes,
    /// Nested-U stages with channel-gated residual skips.
    #[default]
    BaseCr,
}

impl NetVariant {
    pub const ALL: [NetVariant; 5] = [
        NetVariant::Unet,
        NetVariant::Resunet,
        NetVariant::BaseU,
        NetVariant::BaseRes,
        NetVariant::BaseCr,
    ];

    pub fn block_variant(self) -> BlockVariant {
        match self {
            NetVariant::Unet | NetVariant::BaseU => BlockVariant::Plain,
            NetVariant::Resunet | NetVariant::BaseRes => BlockVariant::Residual,
            NetVariant::BaseCr => BlockVariant::ChannelResidual,
        }
    }

    pub fn is_nested(self) -> bool {
        matches!(self, NetVariant::BaseU | NetVariant::BaseRes | NetVariant::BaseCr)
    }

    pub fn name(self) -> &'static str {
        match self {
            NetVariant::Unet => "unet",
            NetVariant::Resunet => "resunet",
            NetVariant::BaseU => "base_u",
            NetVariant::BaseRes => "base_res",
            NetVariant::BaseCr => "base_cr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: Vec<usize>,
    pub input_extent: usize,
    pub variant: NetVariant,
    pub upsample_mode: UpsampleMode,
    pub norm_mode: NormMode,
    /// Requested mini-U depth per stage; clamped to what the stage extent allows.
    pub nested_depths: Vec<usize>,
    pub se_reduction: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            stage_channels: vec![32, 64, 128, 256],
            input_extent: 64,
            variant: NetVariant::BaseCr,
            upsample_mode: UpsampleMode::Trilinear,
            norm_mode: NormMode::Batch,
            nested_depths: vec![2, 2, 1, 1],
            se_reduction: 4,
            seed: 0,
        }
    }
}

pub const STAGES: usize = 4;

fn twos(mut e: usize) -> usize {
    let mut n = 0;
    while e > 0 && e % 2 == 0 {
        e /= 2;
        n += 1;
    }
    n
}

impl NetworkConfig {
    pub fn scaled(input_extent: usize, stage_channels: [usize; 4]) -> Self {
        Self {
            input_extent,
            stage_channels: stage_channels.to_vec(),
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: NetVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_channels.len() != STAGES {
            return bad(format!("stage_channels must list {STAGES} widths, got {:?}", self.stage_channels));
        }
        if self.nested_depths.len() != STAGES {
            return bad(format!("nested_depths must list {STAGES} depths, got {:?}", self.nested_depths));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return bad(format!("channel counts must be positive: {:?}", self.stage_channels));
        }
        if self.nested_depths.iter().any(|&d| d == 0) {
            return bad("nested depths must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive".into());
        }
        if self.input_extent == 0 || self.input_extent % 16 != 0 {
            return Err(Error::Indivisible {
                op: "network",
                extent: self.input_extent,
                required: 16,
            });
        }
        Ok(())
    }

    /// Spatial extent seen by encoder stage `i` (0-based).
    pub fn stage_extent(&self, i: usize) -> usize {
        self.input_extent >> i
    }

    pub fn bottleneck_extent(&self) -> usize {
        self.input_extent >> STAGES
    }

    /// Mini-U depth actually used at stage `i`.
    pub fn effective_depth(&self, i: usize) -> usize {
        self.nested_depths[i].min(twos(self.stage_extent(i))).max(1)
    }

    /// Depth of the bottleneck fusion unit: 1 when the bottleneck extent is
    /// even, otherwise 0.
    pub fn ceu_depth(&self) -> usize {
        usize::from(self.bottleneck_extent() % 2 == 0)
    }

    fn block(&self, cin: usize, cout: usize, depth: usize, variant: BlockVariant) -> BlockConfig {
        BlockConfig {
            in_channels: cin,
            out_channels: cout,
            mid_channels: (cout / 2).max(1),
            norm_mode: self.norm_mode,
            se_reduction: self.se_reduction,
            nested_depth: depth,
            variant,
            upsample: self.upsample_mode,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Stage {
    Flat(ChannelResidual),
    Nested { sipu: MiniU, crsu: Crsu },
}

impl Stage {
    fn build<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &NetworkConfig, cin: usize, cout: usize, depth: usize) -> Result<Self> {
        let variant = cfg.variant.block_variant();
        if !cfg.variant.is_nested() {
            return Ok(Stage::Flat(ChannelResidual::new(b, "block", &cfg.block(cin, cout, depth, variant))?));
        }
        let sipu = MiniU::new(b, "sipu", &cfg.block(cin, cout, depth, BlockVariant::Plain))?;
        let crsu = Crsu::new(b, "crsu", &cfg.block(cout, cout, depth, variant))?;
        Ok(Stage::Nested { sipu, crsu })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Stage::Flat(cr) => cr.forward(ctx, x),
            Stage::Nested { sipu, crsu } => {
                let h = sipu.forward(ctx, x)?;
                crsu.forward(ctx, h)
            }
        }
    }

    fn tally(&self, inv: &mut Inventory) {
        match self {
            Stage::Flat(cr) => cr.tally(inv),
            Stage::Nested { sipu, crsu } => {
                sipu.tally(inv);
                crsu.tally(inv);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cr: ChannelResidual,
    pub ceu: Option<Ceu>,
}

/// Network structure. Parameters live in the [`ParamStore`] next to it.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub encoders: Vec<Stage>,
    pub bottleneck: Bottleneck,
    /// `decoders[i]` mirrors `encoders[i]`.
    pub decoders: Vec<Stage>,
    pub head: Conv3dLayer,
}

/// Shape of one stage in a summary, without the batch axis: `[C, D, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub name: String,
    pub input: [usize; 4],
    pub output: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct CsuNet3d<T = f32> {
    pub config: NetworkConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Real> CsuNet3d<T> {
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let arch = {
            let mut b = ParamBuilder::new(&mut store, config.seed);
            build_arch(&mut b, config)?
        };
        Ok(Self {
            config: config.clone(),
            arch,
            store,
        })
    }

    /// Same structure, parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> CsuNet3d<U> {
        CsuNet3d {
            config: self.config.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        for s in self.arch.encoders.iter().chain(&self.arch.decoders) {
            s.tally(&mut inv);
        }
        self.arch.bottleneck.cr.tally(&mut inv);
        if let Some(ceu) = &self.arch.bottleneck.ceu {
            ceu.tally(&mut inv);
        }
        inv
    }

    /// Per-stage shape table derived from the configuration alone.
    pub fn summary(&self) -> Vec<StageShape> {
        summary(&self.config)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(tape, x, mode, None)
    }

    /// Forward pass that also records each stage's input and output shape.
    pub fn forward_traced(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        mut trace: Option<&mut Vec<StageShape>>,
    ) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        let arch = &self.arch;
        let mut record = |ctx: &Ctx<'_, T>, name: String, i: Var, o: Var| {
            if let Some(t) = trace.as_deref_mut() {
                let c = |v: Var| {
                    let s = ctx.tape.shape(v);
                    [s[1], s[2], s[3], s[4]]
                };
                t.push(StageShape {
                    name,
                    input: c(i),
                    output: c(o),
                });
            }
        };

        let mut skips = Vec::with_capacity(STAGES);
        let mut h = x;
        for (i, en) in arch.encoders.iter().enumerate() {
            let y = en.forward(&mut ctx, h)?;
            record(&ctx, format!("en{}", i + 1), h, y);
            skips.push(y);
            h = ctx.tape.maxpool3d(y, [2; 3], [2; 3])?;
        }

        let bin = h;
        h = arch.bottleneck.cr.forward(&mut ctx, h)?;
        if let Some(ceu) = &arch.bottleneck.ceu {
            h = ceu.forward(&mut ctx, h)?;
        }
        record(&ctx, "bottleneck".into(), bin, h);

        for (i, de) in arch.decoders.iter().enumerate().rev() {
            let up = ctx.tape.upsample3d(h, self.config.upsample_mode)?;
            let cat = ctx.tape.concat_channels(skips[i], up)?;
            let y = de.forward(&mut ctx, cat)?;
            record(&ctx, format!("de{}", i + 1), cat, y);
            h = y;
        }

        let out = arch.head.forward(&mut ctx, h)?;
        record(&ctx, "head".into(), h, out);
        Ok(out)
    }

    /// Eval-mode logits for a batch held outside any tape.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let y = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    fn check_input(&self, s: &[usize]) -> Result<()> {
        let e = self.config.input_extent;
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "network",
                detail: format!("expected (N,{},{e},{e},{e}), got {s:?}", self.config.in_channels),
            });
        }
        for (axis, &got) in ["D", "H", "W"].iter().zip(&s[2..]) {
            if got != e {
                return Err(Error::InvalidExtent {
                    op: "network",
                    axis,
                    detail: format!("expected extent {e}, got {got}"),
                });
            }
        }
        Ok(())
    }
}

fn build_arch<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &NetworkConfig) -> Result<Architecture> {
    let ch = &cfg.stage_channels;
    let mut encoders = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let cin = if i == 0 { cfg.in_channels } else { ch[i - 1] };
        let depth = cfg.effective_depth(i);
        encoders.push(b.scoped(&format!("en{}", i + 1), |b| Stage::build(b, cfg, cin, ch[i], depth))?);
    }

    let c4 = ch[STAGES - 1];
    let bottleneck = b.scoped("bottleneck", |b| {
        let variant = cfg.variant.block_variant();
        let cr = ChannelResidual::new(b, "cr", &cfg.block(c4, c4, 1, variant))?;
        let ceu = if cfg.variant.is_nested() {
            Some(Ceu::new(b, "ceu", &cfg.block(c4, c4, cfg.ceu_depth(), BlockVariant::ChannelResidual))?)
        } else {
            None
        };
        Ok::<_, Error>(Bottleneck { cr, ceu })
    })?;

    let mut decoders = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let below = if i + 1 < STAGES { ch[i + 1] } else { c4 };
        let depth = cfg.effective_depth(i);
        decoders.push(b.scoped(&format!("de{}", i + 1), |b| Stage::build(b, cfg, ch[i] + below, ch[i], depth))?);
    }

    let head = b.scoped("head", |b| b.scoped("conv", |b| Conv3dLayer::new(b, ch[0], cfg.num_classes, 1)))?;
    Ok(Architecture {
        encoders,
        bottleneck,
        decoders,
        head,
    })
}

/// Per-stage shape schedule implied by a configuration.
pub fn summary(cfg: &NetworkConfig) -> Vec<StageShape> {
    let ch = &cfg.stage_channels;
    let cube = |c: usize, e: usize| [c, e, e, e];
    let mut rows = Vec::new();
    for i in 0..STAGES {
        let cin = if i == 0 { cfg.in_channels } else { ch[i - 1] };
        let e = cfg.stage_extent(i);
        rows.push(StageShape {
            name: format!("en{}", i + 1),
            input: cube(cin, e),
            output: cube(ch[i], e),
        });
    }
    let (c4, eb) = (ch[STAGES - 1], cfg.bottleneck_extent());
    rows.push(StageShape {
        name: "bottleneck".into(),
        input: cube(c4, eb),
        output: cube(c4, eb),
    });
    for i in (0..STAGES).rev() {
        let below = if i + 1 < STAGES { ch[i + 1] } else { c4 };
        let e = cfg.stage_extent(i);
        rows.push(StageShape {
            name: format!("de{}", i + 1),
            input: cube(ch[i] + below, e),
            output: cube(ch[i], e),
        });
    }
    rows.push(StageShape {
        name: "head".into(),
        input: cube(ch[0], cfg.input_extent),
        output: cube(cfg.num_classes, cfg.input_extent),
    });
    rows
}
