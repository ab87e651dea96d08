//! Network building blocks.
//!
//! Blocks are structure only: they hold [`ParamId`](crate::ParamId)s into a
//! shared [`ParamStore`] and run against a [`Ctx`] that pairs the store with
//! the tape of the current pass.

mod ceu;
mod layers;
mod mini_u;
mod residual;
mod se;

use alloc::format;

use serde::{Deserialize, Serialize};

pub use ceu::Ceu;
pub use layers::{Cbr, Conv3dLayer, Linear, Norm};
pub use mini_u::{Crsu, MiniU};
pub use residual::ChannelResidual;
pub use se::SeGate;

use crate::engine::{NormMode, Tape, UpsampleMode, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id)
    }
}

pub(crate) fn expect_channels<T: Real>(ctx: &Ctx<'_, T>, x: Var, want: usize, op: &'static str) -> Result<()> {
    let s = ctx.tape.shape(x);
    if s.len() != 5 || s[1] != want {
        return Err(shape_err(op, format!("expected {want} channels in (N,C,D,H,W), got {s:?}")));
    }
    Ok(())
}

/// How a block combines its learned branch with its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// `F(x)`
    Plain,
    /// `F(x) + proj(x)`
    Residual,
    /// `gate(F(x)) + proj(x)`
    #[default]
    ChannelResidual,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub mid_channels: usize,
    pub norm_mode: NormMode,
    pub se_reduction: usize,
    pub nested_depth: usize,
    pub variant: BlockVariant,
    pub upsample: UpsampleMode,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            mid_channels: (out_channels / 2).max(1),
            norm_mode: NormMode::Batch,
            se_reduction: 4,
            nested_depth: 1,
            variant: BlockVariant::ChannelResidual,
            upsample: UpsampleMode::Trilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.mid_channels == 0 {
            return Err(Error::InvalidConfig(format!("channel counts must be positive: {self:?}")));
        }
        if self.mid_channels > self.out_channels {
            return Err(Error::InvalidConfig(format!(
                "mid_channels {} exceeds out_channels {}",
                self.mid_channels, self.out_channels
            )));
        }
        if self.se_reduction == 0 {
            return Err(Error::InvalidConfig("se_reduction must be positive".into()));
        }
        Ok(())
    }

    pub fn with_variant(mut self, variant: BlockVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.nested_depth = depth;
        self
    }

    pub fn with_norm(mut self, mode: NormMode) -> Self {
        self.norm_mode = mode;
        self
    }

    pub fn with_mid(mut self, mid: usize) -> Self {
        self.mid_channels = mid;
        self
    }
}

/// Structural tallies used to tell network variants apart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Inventory {
    pub residual_adds: usize,
    pub se_gates: usize,
    pub projections: usize,
    pub mini_us: usize,
    pub cbr_layers: usize,
}
