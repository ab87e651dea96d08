use csunet_core::phantom::{generate_phantom, rim_weight, PhantomSpec, GROUND_GLASS_CONTRAST, SOLID_CONTRAST};
use csunet_core::Error;

fn spec(extent: usize, r: f64, center: Option<[f64; 3]>) -> PhantomSpec {
    PhantomSpec {
        extent,
        nodule_radius_vox: r,
        nodule_center: center,
        ..Default::default()
    }
}

/// Integer lattice points within `r` of `c`.
fn lattice_count(c: [f64; 3], r: f64) -> usize {
    let reach = r.ceil() as i64 + 1;
    let base = c.map(|v| v.round() as i64);
    let mut n = 0;
    for a in -reach..=reach {
        for b in -reach..=reach {
            for d in -reach..=reach {
                let p = [base[0] + a, base[1] + b, base[2] + d];
                let q: f64 = (0..3).map(|i| (p[i] as f64 - c[i]).powi(2)).sum();
                if q <= r * r {
                    n += 1;
                }
            }
        }
    }
    n
}

fn fg(mask: &[u8]) -> usize {
    mask.iter().filter(|&&v| v == 1).count()
}

#[test]
fn radius_three_sphere_has_123_voxels() {
    let p = generate_phantom(&spec(16, 3.0, Some([8.0, 8.0, 8.0]))).unwrap();
    assert_eq!(lattice_count([8.0, 8.0, 8.0], 3.0), 123);
    assert_eq!(fg(p.mask.data()), 123);
    assert_eq!(p.image.shape(), &[1, 16, 16, 16]);
    assert_eq!(p.mask.shape(), &[1, 16, 16, 16]);
}

#[test]
fn mask_matches_lattice_count_for_random_centres() {
    for seed in 0..20 {
        let r = 2.0 + (seed as f64) * 0.1;
        let p = generate_phantom(&PhantomSpec { seed, ..spec(20, r, None) }).unwrap();
        assert_eq!(fg(p.mask.data()), lattice_count(p.center, r), "seed {seed}");
        assert!(p.center.iter().all(|&c| c - r >= 0.0 && c + r <= 19.0));
    }
}

#[test]
fn zero_contrast_leaves_only_noise() {
    let p = generate_phantom(&PhantomSpec {
        contrast: 0.0,
        noise_sigma: 0.1,
        ..spec(32, 6.0, Some([16.0, 16.0, 16.0]))
    })
    .unwrap();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in p.image.data().iter().zip(p.mask.data()) {
        if m == 1 {
            si += f64::from(v);
            ni += 1;
        } else {
            so += f64::from(v);
            no += 1;
        }
    }
    let gap = (si / ni as f64 - so / no as f64).abs();
    assert!(gap <= 3.0 * 0.1 / (ni as f64).sqrt(), "gap {gap}");
}

#[test]
fn noiseless_phantom_follows_rim_profile() {
    let c = [10.0, 9.5, 10.0];
    let p = generate_phantom(&PhantomSpec {
        noise_sigma: 0.0,
        ..spec(20, 4.0, Some(c))
    })
    .unwrap();
    let e = 20;
    for (i, &v) in p.image.data().iter().enumerate() {
        let (d, h, w) = (i / (e * e), (i / e) % e, i % e);
        let dist = ((d as f64 - c[0]).powi(2) + (h as f64 - c[1]).powi(2) + (w as f64 - c[2]).powi(2)).sqrt();
        let expect = if dist <= 3.5 { SOLID_CONTRAST } else if dist >= 4.5 { 0.0 } else { f64::from(v) };
        assert_eq!(f64::from(v), expect as f32 as f64);
    }
    assert_eq!(rim_weight(4.0, 4.0), 0.5);
    let mut prev = 1.0;
    for k in 0..=20 {
        let w = rim_weight(3.5 + k as f64 / 20.0, 4.0);
        assert!(w <= prev && (0.0..=1.0).contains(&w));
        prev = w;
    }
}

#[test]
fn same_seed_same_phantom() {
    let s = PhantomSpec { seed: 42, contrast: GROUND_GLASS_CONTRAST, ..spec(16, 3.0, None) };
    assert_eq!(generate_phantom(&s).unwrap(), generate_phantom(&s).unwrap());
    let other = generate_phantom(&PhantomSpec { seed: 43, ..s.clone() }).unwrap();
    assert_ne!(generate_phantom(&s).unwrap().image, other.image);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(matches!(
        generate_phantom(&spec(16, 3.0, Some([1.0, 8.0, 8.0]))),
        Err(Error::PhantomOutOfBounds(_))
    ));
    assert!(matches!(
        generate_phantom(&spec(16, 3.0, Some([8.0, 8.0, 13.0]))),
        Err(Error::PhantomOutOfBounds(_))
    ));
    assert!(matches!(generate_phantom(&spec(16, 1.5, None)), Err(Error::InvalidConfig(_))));
    assert!(matches!(generate_phantom(&spec(16, 4.5, None)), Err(Error::InvalidConfig(_))));
    assert!(generate_phantom(&PhantomSpec { noise_sigma: -1.0, ..spec(16, 3.0, None) }).is_err());
}
