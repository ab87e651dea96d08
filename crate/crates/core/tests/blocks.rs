mod common;

use common::*;
use csunet_core::blocks::{BlockConfig, BlockVariant, Cbr, Ceu, ChannelResidual, Crsu, Ctx, MiniU, Mode, SeGate};
use csunet_core::engine::gradcheck::{grad_check, GradCheckOptions};
use csunet_core::engine::{ConvSpec, NormMode, UpsampleMode};
use csunet_core::{Error, ParamBuilder, ParamStore, Real, Tape, Tensor, Var};
use proptest::prelude::*;

fn build<T: Real, B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> csunet_core::Result<B>) -> (B, ParamStore<T>) {
    let mut store = ParamStore::new();
    let blk = f(&mut ParamBuilder::new(&mut store, seed)).unwrap();
    (blk, store)
}

fn run<T: Real>(store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode, f: impl FnOnce(&mut Ctx<'_, T>, Var) -> csunet_core::Result<Var>) -> Tensor<T> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let mut ctx = Ctx::new(&mut tape, store, mode);
    let y = f(&mut ctx, xv).unwrap();
    tape.value(y).clone()
}

/// conv → batch statistics normalisation → relu, straight from tape primitives.
fn cbr_manual(t: &mut Tape<f64>, s: &ParamStore<f64>, c: &Cbr, x: Var) -> Var {
    let w = t.param(s, c.conv.weight).unwrap();
    let b = t.param(s, c.conv.bias).unwrap();
    let y = t.conv3d(x, w, Some(b), ConvSpec::padded(1)).unwrap();
    let g = t.param(s, c.norm.gamma).unwrap();
    let be = t.param(s, c.norm.beta).unwrap();
    let (y, _) = t.batch_norm(y, g, be, 1e-5).unwrap();
    t.relu(y).unwrap()
}

#[test]
fn cbr_zero_weights_output_zero() {
    let (cbr, mut store) = build::<f64, _>(1, |b| Cbr::new(b, "c", 2, 3, NormMode::Batch));
    cbr.conv.zero(&mut store);
    let x = random_tensor(&[1, 2, 4, 4, 4], 2);
    let y = run(&mut store, &x, Mode::Train, |c, x| cbr.forward(c, x));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cbr_widens_stage_channels() {
    let (cbr, mut store) = build::<f32, _>(1, |b| Cbr::new(b, "c", 32, 64, NormMode::Batch));
    let x = random_tensor(&[1, 32, 32, 32, 32], 3).cast::<f32>();
    let y = run(&mut store, &x, Mode::Eval, |c, x| cbr.forward(c, x));
    assert_eq!(y.shape(), &[1, 64, 32, 32, 32]);
}

#[test]
fn cbr_equals_primitive_composition() {
    let (cbr, mut store) = build::<f64, _>(5, |b| Cbr::new(b, "c", 2, 3, NormMode::Batch));
    let x = random_tensor(&[2, 2, 4, 4, 4], 6);
    let y = run(&mut store, &x, Mode::Train, |c, x| cbr.forward(c, x));
    let mut t = Tape::new();
    let xv = t.constant(x).unwrap();
    let m = cbr_manual(&mut t, &store, &cbr, xv);
    assert_eq!(&y, t.value(m));
}

#[test]
fn cr_zero_branch_is_identity() {
    for variant in [BlockVariant::Residual, BlockVariant::ChannelResidual] {
        let cfg = BlockConfig::new(3, 3).with_variant(variant);
        let (cr, mut store) = build::<f64, _>(7, |b| ChannelResidual::new(b, "cr", &cfg));
        cr.branch_output_conv().zero(&mut store);
        let x = random_tensor(&[1, 3, 4, 4, 4], 8);
        let y = run(&mut store, &x, Mode::Train, |c, x| cr.forward(c, x));
        assert_eq!(y, x, "{variant:?}");
    }
}

#[test]
fn residual_variant_is_classic_residual() {
    let cfg = BlockConfig::new(3, 3).with_variant(BlockVariant::Residual);
    let (cr, mut store) = build::<f64, _>(9, |b| ChannelResidual::new(b, "cr", &cfg));
    assert!(cr.gate.is_none() && cr.proj.is_none());
    let x = random_tensor(&[1, 3, 4, 4, 4], 10);
    let y = run(&mut store, &x, Mode::Train, |c, x| cr.forward(c, x));
    let f = run(&mut store, &x, Mode::Train, |c, x| cr.branch(c, x));
    let want: Vec<f64> = f.data().iter().zip(x.data()).map(|(a, b)| a + b).collect();
    assert_eq!(y.data(), &want[..]);
}

#[test]
fn channel_residual_equals_gate_plus_projection() {
    let cfg = BlockConfig::new(2, 4);
    let (cr, mut store) = build::<f64, _>(11, |b| ChannelResidual::new(b, "cr", &cfg));
    let proj = cr.proj.clone().expect("channel change needs projection");
    let gate = cr.gate.clone().unwrap();
    let x = random_tensor(&[2, 2, 4, 4, 4], 12);
    let y = run(&mut store, &x, Mode::Train, |c, x| cr.forward(c, x));
    let z = run(&mut store, &x, Mode::Train, |c, x| {
        let f = cr.branch(c, x)?;
        let g = gate.forward(c, f)?;
        let p = proj.forward(c, x)?;
        c.tape.add(g, p)
    });
    assert_eq!(y, z);
}

#[test]
fn se_gate_saturation_and_zero_init() {
    let (se, mut store) = build::<f64, _>(13, |b| SeGate::new(b, "se", 4, 4));
    let x = random_tensor(&[2, 4, 3, 3, 3], 14);

    se.force(&mut store, 20.0);
    let y = run(&mut store, &x, Mode::Eval, |c, x| se.forward(c, x));
    assert_close(y.data(), x.data(), 1e-6);

    se.force(&mut store, -20.0);
    let y = run(&mut store, &x, Mode::Eval, |c, x| se.forward(c, x));
    assert_close(y.data(), &vec![0.0; x.len()], 1e-6);

    se.force(&mut store, 0.0);
    let g = run(&mut store, &x, Mode::Eval, |c, x| se.gate(c, x));
    assert!(g.data().iter().all(|&v| v == 0.5));
    let y = run(&mut store, &x, Mode::Eval, |c, x| se.forward(c, x));
    let half: Vec<f64> = x.data().iter().map(|v| v / 2.0).collect();
    assert_eq!(y.data(), &half[..]);
}

#[test]
fn se_hidden_width_floor() {
    assert_eq!(SeGate::hidden_width(2, 4), 1);
    assert_eq!(SeGate::hidden_width(32, 4), 8);
    assert_eq!(SeGate::parameter_count(8, 4), 2 * 8 * 2 + 2 + 8);
}

#[test]
fn sipu_full_width_stage_shape() {
    let cfg = BlockConfig::new(32, 32).with_depth(2);
    let (u, mut store) = build::<f32, _>(15, |b| MiniU::new(b, "sipu", &cfg));
    let x = Tensor::<f32>::full(vec![1, 32, 64, 64, 64], 0.25);
    let y = run(&mut store, &x, Mode::Eval, |c, x| u.forward(c, x));
    assert_eq!(y.shape(), &[1, 32, 64, 64, 64]);
}

#[test]
fn sipu_depth_one_preserves_shape() {
    for (cin, cout, e, seed) in [(1, 2, 2, 1), (3, 4, 4, 2), (2, 2, 6, 3), (4, 3, 8, 4)] {
        let cfg = BlockConfig::new(cin, cout).with_depth(1);
        let (u, mut store) = build::<f64, _>(seed, |b| MiniU::new(b, "sipu", &cfg));
        let x = random_tensor(&[2, cin, e, e, e], seed);
        let y = run(&mut store, &x, Mode::Train, |c, x| u.forward(c, x));
        assert_eq!(y.shape(), &[2, cout, e, e, e]);
    }
}

#[test]
fn sipu_equals_hand_assembled_chain() {
    let cfg = BlockConfig::new(2, 4).with_depth(2).with_mid(2).with_variant(BlockVariant::Plain);
    let (u, mut store) = build::<f64, _>(16, |b| MiniU::new(b, "sipu", &cfg));
    let x = random_tensor(&[1, 2, 8, 8, 8], 17);
    let y = run(&mut store, &x, Mode::Train, |c, x| u.forward(c, x));

    let mut t = Tape::new();
    let xv = t.constant(x).unwrap();
    let h0 = cbr_manual(&mut t, &store, &u.input, xv);
    let p1 = t.maxpool3d(h0, [2; 3], [2; 3]).unwrap();
    let h1 = cbr_manual(&mut t, &store, &u.down[0], p1);
    let p2 = t.maxpool3d(h1, [2; 3], [2; 3]).unwrap();
    let h2 = cbr_manual(&mut t, &store, &u.down[1], p2);
    let u2 = t.upsample3d(h2, UpsampleMode::Trilinear).unwrap();
    let c1 = t.concat_channels(u2, h1).unwrap();
    let d1 = cbr_manual(&mut t, &store, &u.up[1], c1);
    let u1 = t.upsample3d(d1, UpsampleMode::Trilinear).unwrap();
    let c0 = t.concat_channels(u1, h0).unwrap();
    let out = cbr_manual(&mut t, &store, &u.up[0], c0);
    assert_eq!(&y, t.value(out));
}

#[test]
fn sipu_rejects_indivisible_extent() {
    let cfg = BlockConfig::new(1, 2).with_depth(2);
    let (u, mut store) = build::<f64, _>(18, |b| MiniU::new(b, "sipu", &cfg));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 6, 8, 8])).unwrap();
    let err = u.forward(&mut Ctx::new(&mut tape, &mut store, Mode::Train), x).unwrap_err();
    assert_eq!(err, Error::Indivisible { op: "sipu", extent: 6, required: 4 });
}

#[test]
fn crsu_zero_body_is_identity() {
    for variant in [BlockVariant::Residual, BlockVariant::ChannelResidual] {
        let cfg = BlockConfig::new(3, 3).with_depth(2).with_variant(variant);
        let (u, mut store) = build::<f64, _>(19, |b| Crsu::new(b, "crsu", &cfg));
        u.branch_output_conv().zero(&mut store);
        let x = random_tensor(&[1, 3, 4, 4, 4], 20);
        let y = run(&mut store, &x, Mode::Train, |c, x| u.forward(c, x));
        assert_eq!(y, x);
    }
}

#[test]
fn crsu_stage_two_shape() {
    let cfg = BlockConfig::new(64, 64).with_depth(2);
    let (u, mut store) = build::<f32, _>(21, |b| Crsu::new(b, "crsu", &cfg));
    let x = random_tensor(&[1, 64, 32, 32, 32], 22).cast::<f32>();
    let y = run(&mut store, &x, Mode::Eval, |c, x| u.forward(c, x));
    assert_eq!(y.shape(), &[1, 64, 32, 32, 32]);
}

#[test]
fn crsu_equals_gated_body_plus_projection() {
    let cfg = BlockConfig::new(2, 3).with_depth(1);
    let (u, mut store) = build::<f64, _>(23, |b| Crsu::new(b, "crsu", &cfg));
    let x = random_tensor(&[1, 2, 4, 4, 4], 24);
    let y = run(&mut store, &x, Mode::Train, |c, x| u.forward(c, x));
    let z = run(&mut store, &x, Mode::Train, |c, x| {
        let f = u.body.forward(c, x)?;
        let g = u.gate.as_ref().unwrap().forward(c, f)?;
        let p = u.proj.as_ref().unwrap().forward(c, x)?;
        c.tape.add(g, p)
    });
    assert_eq!(y, z);
}

#[test]
fn ceu_bottleneck_shape() {
    let cfg = BlockConfig::new(256, 256);
    let (u, mut store) = build::<f32, _>(25, |b| Ceu::new(b, "ceu", &cfg));
    let x = random_tensor(&[1, 256, 4, 4, 4], 26).cast::<f32>();
    let y = run(&mut store, &x, Mode::Eval, |c, x| u.forward(c, x));
    assert_eq!(y.shape(), &[1, 256, 4, 4, 4]);
}

#[test]
fn ceu_with_open_gate_and_silent_branch() {
    let cfg = BlockConfig::new(3, 3);
    let (u, mut store) = build::<f64, _>(27, |b| Ceu::new(b, "ceu", &cfg));
    u.skip_gate.force(&mut store, 40.0);
    u.inner.conv.zero(&mut store);
    let x = random_tensor(&[1, 3, 4, 4, 4], 28);
    let y = run(&mut store, &x, Mode::Train, |c, x| u.forward(c, x));

    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let zero = t.constant(x.map(|v| 0.0 * v)).unwrap();
    let cat = t.concat_channels(xv, zero).unwrap();
    let out = cbr_manual(&mut t, &store, &u.fuse, cat);
    assert_close(y.data(), t.value(out).data(), 1e-12);
}

#[test]
fn ceu_constant_input_half_gates() {
    let cfg = BlockConfig::new(4, 4);
    let (u, mut store) = build::<f64, _>(29, |b| Ceu::new(b, "ceu", &cfg));
    u.skip_gate.force(&mut store, 0.0);
    let x = Tensor::full(vec![1, 4, 4, 4, 4], 0.7);
    let y = run(&mut store, &x, Mode::Train, |c, x| u.forward(c, x));
    assert_eq!(y.shape(), x.shape());
    assert!(y.all_finite());
}

#[test]
fn ceu_rejects_odd_extent_at_depth_one() {
    let cfg = BlockConfig::new(2, 2);
    let (u, mut store) = build::<f64, _>(30, |b| Ceu::new(b, "ceu", &cfg));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 1, 1, 1])).unwrap();
    assert!(u.forward(&mut Ctx::new(&mut tape, &mut store, Mode::Train), x).is_err());
    let cfg0 = BlockConfig::new(2, 2).with_depth(0);
    let (u0, mut s0) = build::<f64, _>(30, |b| Ceu::new(b, "ceu", &cfg0));
    let y = run(&mut s0, &Tensor::full(vec![2, 2, 1, 1, 1], 0.5), Mode::Train, |c, x| u0.forward(c, x));
    assert_eq!(y.shape(), &[2, 2, 1, 1, 1]);
}

fn gradcheck_block(name: &str, store: &mut ParamStore<f64>, x: Tensor<f64>, f: impl Fn(&mut Ctx<'_, f64>, Var) -> csunet_core::Result<Var>) {
    let xid = store.insert("input", x, true).unwrap();
    let target = random_tensor(&store.value(xid).shape().to_vec(), 99);
    let opts = GradCheckOptions { step: 1e-6, tol: 1e-4, max_coords: Some(24), seed: 3, ..Default::default() };
    let report = grad_check(
        store,
        |tape, store| {
            let xv = tape.param(store, xid)?;
            let mut ctx = Ctx::new(tape, store, Mode::Train);
            let y = f(&mut ctx, xv)?;
            let shape = ctx.tape.shape(y).to_vec();
            let w = ctx.tape.constant(Tensor::from_fn(shape, |i| target.data()[i % target.len()]))?;
            let p = ctx.tape.mul(y, w)?;
            ctx.tape.sum(p)
        },
        &opts,
    )
    .unwrap();
    assert!(report.pass, "{name}: {report:?}");
}

#[test]
fn blocks_pass_gradient_check() {
    let cfg = BlockConfig::new(2, 4).with_depth(1);
    let (cbr, mut s) = build::<f64, _>(40, |b| Cbr::new(b, "cbr", 2, 3, NormMode::Batch));
    gradcheck_block("cbr", &mut s, random_tensor(&[2, 2, 4, 4, 4], 41), |c, x| cbr.forward(c, x));

    let (se, mut s) = build::<f64, _>(42, |b| SeGate::new(b, "se", 4, 4));
    gradcheck_block("se", &mut s, random_tensor(&[2, 4, 4, 4, 4], 43), |c, x| se.forward(c, x));

    let (cr, mut s) = build::<f64, _>(44, |b| ChannelResidual::new(b, "cr", &cfg));
    gradcheck_block("cr", &mut s, random_tensor(&[1, 2, 4, 4, 4], 45), |c, x| cr.forward(c, x));

    let (u, mut s) = build::<f64, _>(46, |b| MiniU::new(b, "sipu", &cfg));
    gradcheck_block("sipu", &mut s, random_tensor(&[1, 2, 4, 4, 4], 47), |c, x| u.forward(c, x));

    let (u, mut s) = build::<f64, _>(48, |b| Crsu::new(b, "crsu", &cfg));
    gradcheck_block("crsu", &mut s, random_tensor(&[1, 2, 4, 4, 4], 49), |c, x| u.forward(c, x));

    let ceu_cfg = BlockConfig::new(4, 4);
    let (u, mut s) = build::<f64, _>(50, |b| Ceu::new(b, "ceu", &ceu_cfg));
    gradcheck_block("ceu", &mut s, random_tensor(&[1, 4, 4, 4, 4], 51), |c, x| u.forward(c, x));

    let inst = BlockConfig::new(2, 2).with_norm(NormMode::Instance);
    let (cr, mut s) = build::<f64, _>(52, |b| ChannelResidual::new(b, "cr", &inst));
    gradcheck_block("cr_instance", &mut s, random_tensor(&[2, 2, 4, 4, 4], 53), |c, x| cr.forward(c, x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn residual_identity_holds_for_any_width(c in 1usize..5, e in 1usize..3, seed in 0u64..1000, gated in any::<bool>()) {
        let variant = if gated { BlockVariant::ChannelResidual } else { BlockVariant::Residual };
        let cfg = BlockConfig::new(c, c).with_variant(variant);
        let (cr, mut store) = build::<f64, _>(seed, |b| ChannelResidual::new(b, "cr", &cfg));
        cr.branch_output_conv().zero(&mut store);
        let x = random_tensor(&[1, c, 2 * e, 2 * e, 2 * e], seed + 1);
        let y = run(&mut store, &x, Mode::Train, |ctx, x| cr.forward(ctx, x));
        prop_assert_eq!(y, x);
    }

    #[test]
    fn se_gates_lie_strictly_inside_unit_interval(c in 1usize..9, seed in 0u64..1000, scale in 0.1f64..20.0) {
        let (se, mut store) = build::<f64, _>(seed, |b| SeGate::new(b, "se", c, 4));
        let x = random_tensor(&[2, c, 3, 3, 3], seed).map(|v| v * scale);
        let g = run(&mut store, &x, Mode::Eval, |ctx, x| se.gate(ctx, x));
        prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn relu_sign_pattern_survives_positive_input_scaling(seed in 0u64..1000, alpha in 0.1f64..10.0) {
        let cfg = BlockConfig::new(2, 3);
        let (cr, mut store) = build::<f64, _>(seed, |b| ChannelResidual::new(b, "cr", &cfg));
        let x = random_tensor(&[1, 2, 4, 4, 4], seed + 7);
        let scaled = x.map(|v| v * alpha);
        let a = run(&mut store, &x, Mode::Train, |ctx, x| cr.first.forward(ctx, x));
        let b = run(&mut store, &scaled, Mode::Train, |ctx, x| cr.first.forward(ctx, x));
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert_eq!(*p > 0.0, *q > 0.0);
        }
    }
}
