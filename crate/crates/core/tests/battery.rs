use std::collections::HashSet;

use csunet_core::battery::{run_battery, BatteryOptions, Group, ISOLATED_TOL};
use csunet_core::engine::Fault;

#[test]
fn ops_and_blocks_pass_and_are_listed_once() {
    let report = run_battery(&BatteryOptions { network: false, ..Default::default() }).unwrap();
    for item in &report.items {
        assert!(item.pass, "{item:?}");
        assert!(item.checked > 0);
    }
    let names: HashSet<_> = report.items.iter().map(|i| i.name.as_str()).collect();
    assert_eq!(names.len(), report.items.len());
    for expected in ["conv3d", "maxpool3d", "linear", "batch_norm", "softmax_channels", "ce_loss", "dice_loss", "sipu", "crsu", "ceu", "cr_channel_residual", "se_gate"] {
        assert!(names.contains(expected), "{expected}");
    }
    for item in report.items.iter().filter(|i| ["conv3d", "conv3d_same", "maxpool3d", "linear"].contains(&i.name.as_str())) {
        assert_eq!(item.tol, ISOLATED_TOL);
        assert_eq!(item.group, Group::Op);
    }
}

#[test]
fn conv_sign_flip_is_caught_and_named() {
    let report = run_battery(&BatteryOptions {
        network: false,
        fault: Some(Fault::ConvBackwardSignFlip),
        ..Default::default()
    })
    .unwrap();
    assert!(!report.pass());
    let failed: Vec<_> = report.failures().map(|i| i.name.as_str()).collect();
    assert!(failed.contains(&"conv3d"), "{failed:?}");
    assert!(report.items.iter().find(|i| i.name == "relu").unwrap().pass);
}
