mod common;

use common::*;
use csunet_core::losses::{
    argmax_labels, ce_loss, combined_loss, confusion_counts, dice_loss, metrics, one_hot, ConfusionCounts, LossConfig, Metrics,
};
use csunet_core::{Error, Tape, Tensor};
use rand::Rng;

fn cfg() -> LossConfig {
    LossConfig::default()
}

fn dice_value(p: &[f64], y: &[f64], eps: f64) -> f64 {
    let mut t = Tape::new();
    let pv = t.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap()).unwrap();
    let target = Tensor::new(vec![y.len()], y.to_vec()).unwrap();
    let l = dice_loss(&mut t, pv, &target, &LossConfig { epsilon: eps, ..cfg() }).unwrap();
    t.value(l).data()[0]
}

fn random_labels(shape: &[usize], p_fg: f64, r: &mut impl Rng) -> Tensor<u8> {
    Tensor::from_fn(shape.to_vec(), |_| u8::from(r.gen_bool(p_fg)))
}

#[test]
fn dice_of_binary_target_with_itself_is_zero() {
    let mut r = rng(1);
    for _ in 0..20 {
        let y: Vec<f64> = (0..64).map(|_| f64::from(u8::from(r.gen_bool(0.3)))).collect();
        assert_eq!(dice_value(&y, &y, 1e-5), 0.0);
    }
}

#[test]
fn dice_of_disjoint_masks_is_near_one() {
    for s in [10usize, 25, 100] {
        let y: Vec<f64> = (0..2 * s).map(|i| f64::from(u8::from(i < s))).collect();
        let p: Vec<f64> = (0..2 * s).map(|i| f64::from(u8::from(i >= s))).collect();
        let l = dice_value(&p, &y, 1e-5);
        assert!(l >= 0.999 && l <= 1.0, "S={s}: {l}");
    }
}

#[test]
fn dice_half_overlap_matches_direct_evaluation() {
    // eight enumerated voxels: y on 0..4, prediction on 2..6
    let y = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let p = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    let eps = 1e-5;
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..8 {
        inter += p[i] * y[i];
        total += p[i] + y[i];
    }
    let expect = 1.0 - (2.0 * inter + eps) / (total + eps);
    assert_eq!(inter, 2.0);
    assert_eq!(total, 8.0);
    assert!((dice_value(&p, &y, eps) - expect).abs() < 1e-15);
    assert!((expect - 0.5).abs() < 1e-5);
}

#[test]
fn dice_never_increases_when_a_missed_voxel_is_found() {
    // every binary target and prediction on a 2x2x2 volume
    for ym in 0u32..256 {
        let y: Vec<f64> = (0..8).map(|i| f64::from((ym >> i) & 1)).collect();
        for pm in 0u32..256 {
            let p: Vec<f64> = (0..8).map(|i| f64::from((pm >> i) & 1)).collect();
            let base = dice_value(&p, &y, 1e-5);
            assert!((0.0..=1.0).contains(&base));
            for i in 0..8 {
                if y[i] == 1.0 && p[i] == 0.0 {
                    let mut q = p.clone();
                    q[i] = 1.0;
                    assert!(dice_value(&q, &y, 1e-5) <= base, "y={ym:08b} p={pm:08b} voxel {i}");
                }
            }
        }
    }
}

/// Per-voxel cross-entropy straight from the formula.
fn ce_oracle(logits: &Tensor<f64>, labels: &Tensor<u8>) -> f64 {
    let [n, c, d, h, w] = logits.dims5("ce").unwrap();
    let s = d * h * w;
    let x = logits.data();
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..s {
            let z: Vec<f64> = (0..c).map(|k| x[(i * c + k) * s + p]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let k = labels.data()[i * s + p] as usize;
            total -= (z[k].exp() / denom).max(1e-12).ln();
        }
    }
    total / (n * s) as f64
}

fn ce_of(logits: &Tensor<f64>, labels: &Tensor<u8>, classes: usize) -> f64 {
    let mut t = Tape::new();
    let lv = t.constant(logits.clone()).unwrap();
    let l = ce_loss(&mut t, lv, &one_hot(labels, classes).unwrap(), &cfg()).unwrap();
    t.value(l).data()[0]
}

#[test]
fn ce_of_confident_correct_prediction_is_zero() {
    let labels = Tensor::from_fn(vec![1, 1, 2, 2, 2], |i| (i % 2) as u8);
    let logits = one_hot::<f64>(&labels, 2).unwrap().map(|v| 40.0 * v);
    assert!(ce_of(&logits, &labels, 2) <= 1e-11);
}

#[test]
fn ce_of_uniform_prediction_is_ln2() {
    let labels = Tensor::from_fn(vec![2, 1, 2, 3, 2], |i| (i % 2) as u8);
    let logits = Tensor::zeros(vec![2, 2, 2, 3, 2]);
    assert!((ce_of(&logits, &labels, 2) - std::f64::consts::LN_2).abs() <= 1e-9);
}

#[test]
fn ce_matches_direct_formula_on_random_cases() {
    let mut r = rng(3);
    for case in 0..30 {
        let c = r.gen_range(2..=4);
        let shape = [r.gen_range(1..=2), 1, r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
        let labels = Tensor::from_fn(shape.to_vec(), |_| r.gen_range(0..c) as u8);
        let logits = random_tensor_with(&[shape[0], c, shape[2], shape[3], shape[4]], &mut r).map(|v| 4.0 * v);
        let got = ce_of(&logits, &labels, c);
        assert!((got - ce_oracle(&logits, &labels)).abs() <= 1e-6, "case {case}");
    }
}

#[test]
fn ce_gradient_is_softmax_minus_onehot_over_voxels() {
    let mut r = rng(4);
    let (n, c, e) = (2, 3, 3);
    let labels = Tensor::from_fn(vec![n, 1, e, e, e], |_| r.gen_range(0..c) as u8);
    let logits = random_tensor_with(&[n, c, e, e, e], &mut r).map(|v| 3.0 * v);
    let mut t = Tape::new();
    let lv = t.leaf(logits.clone(), true).unwrap();
    let l = ce_loss(&mut t, lv, &one_hot(&labels, c).unwrap(), &cfg()).unwrap();
    let g = t.backward(l).unwrap();
    let g = g.get(lv).unwrap();
    let s = e * e * e;
    let voxels = (n * s) as f64;
    for i in 0..n {
        for p in 0..s {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[(i * c + k) * s + p]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            for k in 0..c {
                let hot = f64::from(u8::from(labels.data()[i * s + p] as usize == k));
                let expect = (z[k].exp() / denom - hot) / voxels;
                let got = g.data()[(i * c + k) * s + p];
                assert!((got - expect).abs() <= 1e-6, "({i},{k},{p}): {got} vs {expect}");
            }
        }
    }
}

#[test]
fn ce_rejects_non_one_hot_targets() {
    let mut t = Tape::<f64>::new();
    let lv = t.constant(Tensor::zeros(vec![1, 2, 1, 1, 2])).unwrap();
    let bad = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 0.5, 0.0, 0.5]).unwrap();
    assert!(matches!(ce_loss(&mut t, lv, &bad, &cfg()), Err(Error::NotOneHot(_))));
    let none = Tensor::zeros(vec![1, 2, 1, 1, 2]);
    assert!(matches!(ce_loss(&mut t, lv, &none, &cfg()), Err(Error::NotOneHot(_))));
}

fn combined(logits: &Tensor<f64>, labels: &Tensor<u8>, c: &LossConfig) -> f64 {
    let mut t = Tape::new();
    let lv = t.constant(logits.clone()).unwrap();
    let l = combined_loss(&mut t, lv, labels, c).unwrap();
    t.value(l).data()[0]
}

/// Dice of the foreground softmax channel computed by hand.
fn dice_component(logits: &Tensor<f64>, labels: &Tensor<u8>, eps: f64) -> f64 {
    let [n, _, d, h, w] = logits.dims5("dice").unwrap();
    let s = d * h * w;
    let (mut inter, mut total) = (0.0, 0.0);
    for i in 0..n {
        for p in 0..s {
            let z0 = logits.data()[(i * 2) * s + p];
            let z1 = logits.data()[(i * 2 + 1) * s + p];
            let pf = z1.exp() / (z0.exp() + z1.exp());
            let y = f64::from(labels.data()[i * s + p]);
            inter += pf * y;
            total += pf + y;
        }
    }
    1.0 - (2.0 * inter + eps) / (total + eps)
}

#[test]
fn combined_loss_components() {
    let mut r = rng(5);
    let labels = random_labels(&[2, 1, 3, 3, 3], 0.4, &mut r);
    let logits = random_tensor_with(&[2, 2, 3, 3, 3], &mut r);

    let dice_only = combined(&logits, &labels, &cfg());
    let mut t = Tape::new();
    let lv = t.constant(logits.clone()).unwrap();
    let p = t.softmax_channels(lv).unwrap();
    let fg = t.select_channel(p, 1).unwrap();
    let d = dice_loss(&mut t, fg, &labels.map(f64::from), &cfg()).unwrap();
    assert_eq!(dice_only, t.value(d).data()[0]);

    let half = LossConfig { ce_weight: 0.5, ..cfg() };
    let expect = dice_component(&logits, &labels, 1e-5) + 0.5 * ce_oracle(&logits, &labels);
    assert!((combined(&logits, &labels, &half) - expect).abs() < 1e-12);

    let perfect = one_hot::<f64>(&labels, 2).unwrap().map(|v| 40.0 * v - 20.0);
    let one = LossConfig { ce_weight: 1.0, ..cfg() };
    assert!(combined(&perfect, &labels, &one).abs() < 1e-9);
}

#[test]
fn loss_config_validation() {
    assert!(cfg().validate().is_ok());
    assert!(LossConfig { epsilon: 0.0, ..cfg() }.validate().is_err());
    assert!(LossConfig { ce_weight: -1.0, ..cfg() }.validate().is_err());
    assert!(LossConfig { class_count: 1, ..cfg() }.validate().is_err());
    let parsed: LossConfig = serde_json::from_str(r#"{"ce_weight":0.25}"#).unwrap();
    assert_eq!(parsed, LossConfig { ce_weight: 0.25, ..cfg() });
    assert!(serde_json::from_str::<LossConfig>(r#"{"lambda":1}"#).is_err());
}

#[test]
fn argmax_prefers_lower_class_on_ties() {
    let scores = Tensor::new(vec![1, 3, 1, 1, 3], vec![0.2, 0.5, 0.1, 0.2, 0.5, 0.7, 0.6, 0.0, 0.7]).unwrap();
    let labels = argmax_labels(&scores).unwrap();
    assert_eq!(labels.shape(), &[1, 1, 1, 1, 3]);
    assert_eq!(labels.data(), &[2, 0, 1]);
}

#[test]
fn confusion_counts_edge_cases() {
    let mut r = rng(6);
    let t = random_labels(&[1, 1, 4, 4, 4], 0.3, &mut r);
    let same = confusion_counts(&t, &t, 2).unwrap();
    assert_eq!((same.fp, same.fn_), (0, 0));
    let inverted = t.map(|v| 1 - v);
    let inv = confusion_counts(&inverted, &t, 2).unwrap();
    assert_eq!((inv.tp, inv.tn), (0, 0));
    assert_eq!(inv.voxels(), 64);
    let other = random_labels(&[1, 1, 4, 4, 3], 0.3, &mut r);
    assert!(matches!(confusion_counts(&other, &t, 2), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn perfect_prediction_scores_one() {
    let mut r = rng(7);
    let t = random_labels(&[1, 1, 4, 4, 4], 0.3, &mut r);
    let m = metrics(&confusion_counts(&t, &t, 2).unwrap());
    assert_eq!(m, Metrics { sen: 1.0, dsc: 1.0, pre: 1.0, miou: 1.0 });
    let empty = Tensor::full(vec![1, 1, 4, 4, 4], 0u8);
    assert_eq!(metrics(&confusion_counts(&empty, &empty, 2).unwrap()).values(), [1.0; 4]);
    assert!(t.data().contains(&1));
    let miss = metrics(&confusion_counts(&empty, &t, 2).unwrap());
    assert_eq!((miss.sen, miss.dsc, miss.pre), (0.0, 0.0, 0.0));
}

#[test]
fn worked_confusion_table() {
    // 4x4x4 volume: target on voxels 0..4, prediction on 2..6
    let target = Tensor::from_fn(vec![1, 1, 4, 4, 4], |i| u8::from(i < 4));
    let pred = Tensor::from_fn(vec![1, 1, 4, 4, 4], |i| u8::from((2..6).contains(&i)));
    let c = confusion_counts(&pred, &target, 2).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 2, 2, 58));
    let m = metrics(&c);
    assert_eq!((m.sen, m.pre, m.dsc), (0.5, 0.5, 0.5));
    let hand = (2.0 / 6.0 + 58.0 / 62.0) / 2.0;
    assert_eq!(m.miou, hand);
    assert!((m.miou - 0.6344).abs() < 1e-4);
}

/// Independent per-voxel metric computation with the absent-class convention.
fn brute_force(pred: &[u8], target: &[u8], classes: usize) -> [f64; 4] {
    let (mut tp, mut fp, mut fnn) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &t) in pred.iter().zip(target) {
        if p > 0 && t > 0 {
            tp += 1.0;
        } else if p > 0 {
            fp += 1.0;
        } else if t > 0 {
            fnn += 1.0;
        }
    }
    let nothing = tp + fp + fnn == 0.0;
    let guarded = |num: f64, den: f64| if den > 0.0 { num / den } else if nothing { 1.0 } else { 0.0 };
    let sen = guarded(tp, tp + fnn);
    let pre = guarded(tp, tp + fp);
    let dsc = guarded(2.0 * tp, 2.0 * tp + fp + fnn);
    let mut iou_sum = 0.0;
    for k in 0..classes as u8 {
        let i = pred.iter().zip(target).filter(|(&p, &t)| p == k && t == k).count();
        let u = pred.iter().zip(target).filter(|(&p, &t)| p == k || t == k).count();
        iou_sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
    }
    [sen, dsc, pre, iou_sum / classes as f64]
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut r = rng(8);
    for case in 0..1000 {
        let classes = if case % 4 == 0 { 3 } else { 2 };
        let e = r.gen_range(1..=5);
        let density = [0.0, 0.05, 0.3, 0.7][(case / 4) % 4];
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_fn(vec![1, 1, e, e, e], |_| {
                if r.gen_bool(density) {
                    r.gen_range(1..classes) as u8
                } else {
                    0
                }
            })
        };
        let (pred, target) = (mk(&mut r), mk(&mut r));
        let c = confusion_counts(&pred, &target, classes).unwrap();
        assert_eq!(c.voxels(), (e * e * e) as u64);
        assert_eq!(metrics(&c).values(), brute_force(pred.data(), target.data(), classes), "case {case}");
    }
}

#[test]
fn hard_dsc_agrees_with_one_minus_dice_loss() {
    let mut r = rng(9);
    for _ in 0..10 {
        let target = random_labels(&[1, 1, 8, 8, 8], 0.4, &mut r);
        let pred = Tensor::from_fn(vec![1, 1, 8, 8, 8], |i| if r.gen_bool(0.2) { 1 - target.data()[i] } else { target.data()[i] });
        let fg = target.data().iter().filter(|&&v| v == 1).count();
        assert!(fg >= 100);
        let m = metrics(&confusion_counts(&pred, &target, 2).unwrap());
        let soft = dice_value(&pred.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), &target.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), 1e-5);
        assert!((m.dsc - (1.0 - soft)).abs() <= 1e-3);
    }
}

#[test]
fn counts_merge_and_serialise() {
    let mut a = ConfusionCounts::new(2);
    a.tp = 1;
    a.intersection[1] = 1;
    a.union[1] = 2;
    let mut b = a.clone();
    b.merge(&a);
    assert_eq!((b.tp, b.intersection[1], b.union[1]), (2, 2, 4));
    let json = serde_json::to_value(&b).unwrap();
    assert_eq!(json["fn"], 0);
    let m = serde_json::to_value(Metrics::default()).unwrap();
    for k in ["sen", "dsc", "pre", "miou"] {
        assert!(m.get(k).is_some());
    }
}
