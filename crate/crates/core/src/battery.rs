//! The full gradient-check battery: every tape primitive, every block and a
//! tiny end-to-end network, each verified at 64-bit precision.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockConfig, BlockVariant, Cbr, Ceu, ChannelResidual, Crsu, Ctx, MiniU, Mode, SeGate};
use crate::engine::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::engine::{ConvSpec, Fault, NormMode, Tape, UpsampleMode, Var};
use crate::error::Result;
use crate::network::{CsuNet3d, NetworkConfig};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Tolerance for convolution, pooling and linear layers checked in isolation.
pub const ISOLATED_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatteryOptions {
    pub tol: f64,
    pub fault: Option<Fault>,
    /// Include the end-to-end network item (the slowest one).
    pub network: bool,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            fault: None,
            network: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Op,
    Block,
    Network,
}

#[derive(Clone, Debug, Serialize)]
pub struct BatteryItem {
    pub name: String,
    pub group: Group,
    pub tol: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
    pub worst: Option<(String, usize)>,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BatteryReport {
    pub items: Vec<BatteryItem>,
}

impl BatteryReport {
    pub fn pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BatteryItem> {
        self.items.iter().filter(|i| !i.pass)
    }
}

/// Fixed pseudo-random weights in `[-1, 1)` used to reduce any output to a
/// scalar with a non-trivial gradient.
fn probe(len: usize) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::from_fn(vec![len], |_| r.gen_range(-1.0..1.0))
}

fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = probe(tape.value(y).len()).reshape(shape)?;
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

struct Runner {
    opts: BatteryOptions,
    report: BatteryReport,
}

impl Runner {
    fn record(&mut self, name: &str, group: Group, tol: f64, r: GradCheckReport) {
        self.report.items.push(BatteryItem {
            name: name.to_string(),
            group,
            tol,
            max_rel_err: r.max_rel_err,
            checked: r.checked,
            kinks: r.kinks,
            worst: r.worst,
            pass: r.pass,
        });
    }

    fn options(&self, tol: f64, step: f64, max_coords: Option<usize>) -> GradCheckOptions {
        GradCheckOptions {
            step,
            tol,
            max_coords,
            seed: 11,
            fault: self.opts.fault,
        }
    }

    /// Checks an op with respect to every listed input tensor.
    fn op(
        &mut self,
        name: &str,
        isolated: bool,
        inputs: &[&[usize]],
        mut f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let tol = if isolated { self.opts.tol.min(ISOLATED_TOL) } else { self.opts.tol };
        let mut store = ParamStore::new();
        let ids = inputs
            .iter()
            .enumerate()
            .map(|(k, s)| store.insert(alloc::format!("{name}.in{k}"), random(s, 100 + k as u64), true))
            .collect::<Result<Vec<_>>>()?;
        let opts = self.options(tol, 1e-4, None);
        let r = grad_check(
            &mut store,
            |tape, store| {
                let vars = ids.iter().map(|&id| tape.param(store, id)).collect::<Result<Vec<_>>>()?;
                let y = f(tape, &vars)?;
                project(tape, y)
            },
            &opts,
        )?;
        self.record(name, Group::Op, tol, r);
        Ok(())
    }

    /// Checks a block with respect to its parameters and its input.
    fn block(
        &mut self,
        name: &str,
        mut store: ParamStore<f64>,
        x: Tensor<f64>,
        f: impl Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
    ) -> Result<()> {
        let xid = store.insert("input", x, true)?;
        let opts = self.options(self.opts.tol, 1e-6, Some(24));
        let r = grad_check(
            &mut store,
            |tape, store| {
                let xv = tape.param(store, xid)?;
                let y = {
                    let mut ctx = Ctx::new(tape, store, Mode::Train);
                    f(&mut ctx, xv)?
                };
                project(tape, y)
            },
            &opts,
        )?;
        self.record(name, Group::Block, self.opts.tol, r);
        Ok(())
    }
}

fn built<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>) -> Result<(B, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let b = f(&mut ParamBuilder::new(&mut store, seed))?;
    Ok((b, store))
}

/// Channel extents of the end-to-end item.
pub const TINY_CHANNELS: [usize; 4] = [4, 8, 16, 32];
pub const TINY_EXTENT: usize = 16;

pub fn run_battery(opts: &BatteryOptions) -> Result<BatteryReport> {
    let mut r = Runner {
        opts: opts.clone(),
        report: BatteryReport::default(),
    };
    ops(&mut r)?;
    blocks(&mut r)?;
    if opts.network {
        network(&mut r)?;
    }
    Ok(r.report)
}

fn ops(r: &mut Runner) -> Result<()> {
    let strided = ConvSpec {
        stride: [2, 1, 1],
        padding: [1, 0, 1],
        dilation: [1, 1, 2],
    };
    r.op("conv3d", true, &[&[2, 2, 5, 4, 5], &[3, 2, 3, 2, 3], &[3]], |t, v| {
        t.conv3d(v[0], v[1], Some(v[2]), strided)
    })?;
    r.op("conv3d_same", true, &[&[1, 2, 4, 4, 4], &[2, 2, 3, 3, 3], &[2]], |t, v| {
        t.conv3d(v[0], v[1], Some(v[2]), ConvSpec::padded(1))
    })?;
    r.op("maxpool3d", true, &[&[2, 2, 4, 4, 6]], |t, v| t.maxpool3d(v[0], [2; 3], [2; 3]))?;
    r.op("linear", true, &[&[3, 5], &[4, 5], &[4]], |t, v| t.linear(v[0], v[1], v[2]))?;
    r.op("global_avg_pool", true, &[&[2, 3, 2, 3, 2]], |t, v| t.global_avg_pool(v[0]))?;
    r.op("upsample_trilinear", false, &[&[1, 2, 2, 3, 2]], |t, v| {
        t.upsample3d(v[0], UpsampleMode::Trilinear)
    })?;
    r.op("upsample_nearest", false, &[&[1, 2, 2, 3, 2]], |t, v| t.upsample3d(v[0], UpsampleMode::Nearest))?;
    r.op("batch_norm", false, &[&[2, 3, 2, 2, 3], &[3], &[3]], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)
    })?;
    let (mean, var) = (random(&[3], 7), random(&[3], 8).map(|v| v.abs() + 0.5));
    r.op("norm_fixed", false, &[&[2, 3, 2, 2, 2], &[3], &[3]], |t, v| {
        t.norm_fixed(v[0], v[1], v[2], &mean, &var, 1e-5)
    })?;
    r.op("instance_norm", false, &[&[2, 3, 2, 3, 2], &[3], &[3]], |t, v| {
        t.instance_norm(v[0], v[1], v[2], 1e-5)
    })?;
    r.op("relu", false, &[&[2, 3, 4]], |t, v| t.relu(v[0]))?;
    r.op("sigmoid", false, &[&[2, 3, 4]], |t, v| t.sigmoid(v[0]))?;
    r.op("scale", false, &[&[2, 3, 4]], |t, v| t.scale(v[0], 1.7))?;
    r.op("add", false, &[&[2, 3, 4], &[2, 3, 4]], |t, v| t.add(v[0], v[1]))?;
    r.op("mul", false, &[&[2, 3, 4], &[2, 3, 4]], |t, v| t.mul(v[0], v[1]))?;
    r.op("concat_channels", false, &[&[2, 1, 2, 2, 2], &[2, 3, 2, 2, 2]], |t, v| {
        t.concat_channels(v[0], v[1])
    })?;
    r.op("select_channel", false, &[&[2, 3, 2, 2, 2]], |t, v| t.select_channel(v[0], 1))?;
    r.op("scale_channels", false, &[&[2, 3, 2, 2, 2], &[2, 3]], |t, v| t.scale_channels(v[0], v[1]))?;
    r.op("softmax_channels", false, &[&[2, 3, 2, 2, 2]], |t, v| t.softmax_channels(v[0]))?;
    r.op("sum", false, &[&[2, 3, 4]], |t, v| t.sum(v[0]))?;
    r.op("mean", false, &[&[2, 3, 4]], |t, v| t.mean(v[0]))?;
    let target = Tensor::from_fn(vec![2, 1, 2, 2, 2], |i| f64::from(u8::from(i % 3 == 0)));
    r.op("dice_loss", false, &[&[2, 2, 2, 2, 2]], |t, v| {
        let p = t.softmax_channels(v[0])?;
        let fg = t.select_channel(p, 1)?;
        t.dice_loss(fg, &target, 1e-5)
    })?;
    let onehot = Tensor::from_fn(vec![2, 3, 2, 2, 2], |i| {
        let (n, c, p) = (i / 24, (i / 8) % 3, i % 8);
        f64::from(u8::from((n + p) % 3 == c))
    });
    r.op("ce_loss", false, &[&[2, 3, 2, 2, 2]], |t, v| t.cross_entropy(v[0], &onehot))?;
    Ok(())
}

fn blocks(r: &mut Runner) -> Result<()> {
    let cfg = BlockConfig::new(2, 4).with_depth(1);
    let (cbr, s) = built(40, |b| Cbr::new(b, "cbr", 2, 3, NormMode::Batch))?;
    r.block("cbr", s, random(&[2, 2, 4, 4, 4], 41), |c, x| cbr.forward(c, x))?;

    let (se, s) = built(42, |b| SeGate::new(b, "se", 4, 4))?;
    r.block("se_gate", s, random(&[2, 4, 4, 4, 4], 43), |c, x| se.forward(c, x))?;

    for (name, variant) in [
        ("cr_plain", BlockVariant::Plain),
        ("cr_residual", BlockVariant::Residual),
        ("cr_channel_residual", BlockVariant::ChannelResidual),
    ] {
        let cfg = cfg.clone().with_variant(variant);
        let (cr, s) = built(44, |b| ChannelResidual::new(b, "cr", &cfg))?;
        r.block(name, s, random(&[1, 2, 4, 4, 4], 45), |c, x| cr.forward(c, x))?;
    }

    let inst = BlockConfig::new(2, 2).with_norm(NormMode::Instance);
    let (cr, s) = built(52, |b| ChannelResidual::new(b, "cr", &inst))?;
    r.block("cr_instance_norm", s, random(&[2, 2, 4, 4, 4], 53), |c, x| cr.forward(c, x))?;

    let (u, s) = built(46, |b| MiniU::new(b, "sipu", &cfg))?;
    r.block("sipu", s, random(&[1, 2, 4, 4, 4], 47), |c, x| u.forward(c, x))?;

    let (u, s) = built(48, |b| Crsu::new(b, "crsu", &cfg))?;
    r.block("crsu", s, random(&[1, 2, 4, 4, 4], 49), |c, x| u.forward(c, x))?;

    let ceu_cfg = BlockConfig::new(4, 4);
    let (u, s) = built(50, |b| Ceu::new(b, "ceu", &ceu_cfg))?;
    r.block("ceu", s, random(&[1, 4, 4, 4, 4], 51), |c, x| u.forward(c, x))?;
    Ok(())
}

fn network(r: &mut Runner) -> Result<()> {
    let cfg = NetworkConfig::scaled(TINY_EXTENT, TINY_CHANNELS);
    let mut net = CsuNet3d::<f64>::build(&cfg)?;
    let x = random(&[2, 1, TINY_EXTENT, TINY_EXTENT, TINY_EXTENT], 5);
    let arch = net.arch.clone();
    let opts = r.options(r.opts.tol, 1e-6, Some(1));
    let report = grad_check(
        &mut net.store,
        |tape, store| {
            let mut probe_net = CsuNet3d {
                config: cfg.clone(),
                arch: arch.clone(),
                store: core::mem::take(store),
            };
            let xv = tape.constant(x.clone())?;
            let y = probe_net.forward(tape, xv, Mode::Train);
            *store = probe_net.store;
            project(tape, y?)
        },
        &opts,
    )?;
    r.record("tiny_network", Group::Network, r.opts.tol, report);
    Ok(())
}
