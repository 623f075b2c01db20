use std::collections::HashSet;

use vessel_core::components::{connected_components, Connectivity};
use vessel_core::labelprop::vessel_mask;
use vessel_core::phantom::{generate_case, generate_suite, Bifurcation, Manifest, Split, Stenosis, SuiteConfig, VesselSpec};
use vessel_core::volume::{read_image, read_label, BACKGROUND, LUMEN, WALL};
use vessel_core::{Dims, LabelVolume, Spacing};

fn expected_class(spec: &VesselSpec, z: usize, y: usize, x: usize) -> u8 {
    let (r, t) = (spec.radius(z), spec.thickness(z));
    let d = spec
        .centers(z)
        .iter()
        .map(|&(cy, cx)| ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min);
    if d < r {
        LUMEN
    } else if d < r + t {
        WALL
    } else {
        BACKGROUND
    }
}

fn lumen_is_enclosed(gt: &LabelVolume) -> bool {
    let d = gt.dims;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                if gt.get(z, y, x) != LUMEN {
                    continue;
                }
                let nb = [(0, 0, 1), (0, 0, -1), (0, 1, 0), (0, -1, 0), (1, 0, 0), (-1, 0, 0)];
                for (dz, dy, dx) in nb {
                    let (a, b, c) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if a < 0 || b < 0 || c < 0 || a as usize >= d.d || b as usize >= d.h || c as usize >= d.w {
                        continue;
                    }
                    if gt.get(a as usize, b as usize, c as usize) == BACKGROUND {
                        return false;
                    }
                }
            }
        }
    }
    true
}

#[test]
fn straight_tube_matches_the_distance_rule() {
    let spec = VesselSpec::straight(16.0, 16.0, 4.0, 2.0);
    let dims = Dims::new(8, 32, 32);
    let c = generate_case(&[spec.clone()], dims, Spacing::isotropic(0.6), 4, 0.0, 0).unwrap();
    for z in 0..8 {
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(c.gt.get(z, y, x), expected_class(&spec, z, y, x), "({z},{y},{x})");
            }
        }
    }
    // lattice points with dy^2+dx^2 < 16: 45; < 36: 109
    let lumen = c.gt.slice_data(3).iter().filter(|&&v| v == LUMEN).count();
    let wall = c.gt.slice_data(3).iter().filter(|&&v| v == WALL).count();
    assert_eq!((lumen, wall), (45, 109 - 45));
    assert_eq!(c.gt.annotated_slices, (0..8).collect::<Vec<_>>());
    assert_eq!(c.sparse.annotated_slices, vec![0, 4]);
    assert_eq!(c.image.spacing, Spacing::isotropic(0.6));
}

#[test]
fn drifting_stenotic_tube_matches_the_distance_rule_and_encloses_lumen() {
    let spec = VesselSpec {
        drift_amplitude: 3.0,
        drift_period: 20.0,
        drift_phase: 0.4,
        stenosis: Some(Stenosis {
            center: 10.0,
            width: 3.0,
            depth: 0.5,
        }),
        wall_slope: 0.05,
        ..VesselSpec::straight(20.0, 20.0, 4.0, 1.5)
    };
    let dims = Dims::new(20, 40, 40);
    let c = generate_case(&[spec.clone()], dims, Spacing::isotropic(0.6), 4, 0.05, 3).unwrap();
    for z in 0..20 {
        for y in 0..40 {
            for x in 0..40 {
                assert_eq!(c.gt.get(z, y, x), expected_class(&spec, z, y, x));
            }
        }
    }
    assert!(lumen_is_enclosed(&c.gt));
    let n = dims.plane_len();
    for z in 0..20 {
        let want: &[u8] = if z % 4 == 0 { c.gt.slice_data(z) } else { &vec![0; n] };
        assert_eq!(c.sparse.slice_data(z), want, "slice {z}");
    }
    // the stenosis narrows the lumen
    let count = |z| c.gt.slice_data(z).iter().filter(|&&v| v == LUMEN).count();
    assert!(count(10) < count(0) / 2);
}

#[test]
fn noise_is_seeded_and_labels_are_not_noisy() {
    let spec = VesselSpec::straight(16.0, 16.0, 4.0, 2.0);
    let dims = Dims::new(6, 32, 32);
    let a = generate_case(&[spec.clone()], dims, Spacing::isotropic(0.6), 2, 0.1, 7).unwrap();
    let b = generate_case(&[spec.clone()], dims, Spacing::isotropic(0.6), 2, 0.1, 7).unwrap();
    let c = generate_case(&[spec], dims, Spacing::isotropic(0.6), 2, 0.1, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.image, c.image);
    assert_eq!(a.gt, c.gt);
    // intensity ordering survives modest noise on average
    let img = a.image.to_f32();
    let mean = |class| {
        let v: Vec<f32> = a.gt.data.iter().zip(&img).filter(|(l, _)| **l == class).map(|(_, &i)| i).collect();
        v.iter().sum::<f32>() / v.len() as f32
    };
    assert!(mean(LUMEN) > mean(WALL) && mean(WALL) > mean(BACKGROUND));
}

#[test]
fn bifurcation_splits_into_two_components() {
    let spec = VesselSpec {
        bifurcation: Some(Bifurcation {
            split_slice: 6,
            offsets: [(0.0, -7.0), (0.0, 7.0)],
            ramp: 10,
        }),
        ..VesselSpec::straight(20.0, 20.0, 3.0, 1.5)
    };
    let dims = Dims::new(20, 40, 40);
    let c = generate_case(&[spec.clone()], dims, Spacing::isotropic(0.6), 3, 0.0, 0).unwrap();
    let comps = |z| connected_components(&vessel_mask(&c.gt.extract_slice(z).unwrap()), Connectivity::Eight).len();
    assert_eq!(comps(5), 1);
    assert_eq!(comps(6), 1);
    assert_eq!(comps(19), 2);
    assert!(lumen_is_enclosed(&c.gt));
    // abrupt splits are allowed but leave the parent lumen uncovered
    let mut abrupt = spec;
    abrupt.bifurcation.as_mut().unwrap().ramp = 0;
    let a = generate_case(&[abrupt], dims, Spacing::isotropic(0.6), 3, 0.0, 0).unwrap();
    assert_eq!(connected_components(&vessel_mask(&a.gt.extract_slice(6).unwrap()), Connectivity::Eight).len(), 2);
    assert!(!lumen_is_enclosed(&a.gt));
}

#[test]
fn suite_follows_the_split_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SuiteConfig {
        dims: [16, 32, 32],
        stenosis_probability: 1.0,
        ..SuiteConfig::default()
    };
    let m = generate_suite(&cfg, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 10);
    let count = |s| m.split(s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (7, 1, 2));
    let ids: HashSet<&str> = m.entries.iter().map(|e| e.case_id.as_str()).collect();
    assert_eq!(ids.len(), 10);

    let loaded = Manifest::load(dir.path().join(Manifest::FILE_NAME)).unwrap();
    assert_eq!(loaded.entries, m.entries);
    let e = loaded.get("case_004").unwrap();
    let gt = read_label(loaded.resolve(&e.gt_path)).unwrap();
    let sparse = read_label(loaded.resolve(&e.sparse_path)).unwrap();
    let image = read_image(loaded.resolve(&e.image_path)).unwrap();
    assert_eq!(gt.dims, Dims::new(16, 32, 32));
    assert_eq!(image.dims, gt.dims);
    assert_eq!(sparse.annotated_slices, vec![0, 4, 8, 12]);
    assert!(lumen_is_enclosed(&gt));

    let again = tempfile::tempdir().unwrap();
    generate_suite(&cfg, again.path()).unwrap();
    for e in &m.entries {
        for p in [&e.image_path, &e.gt_path, &e.sparse_path] {
            assert_eq!(std::fs::read(dir.path().join(p)).unwrap(), std::fs::read(again.path().join(p)).unwrap());
        }
    }
}

#[test]
fn invalid_suites_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        SuiteConfig { n_cases: 0, ..SuiteConfig::default() },
        SuiteConfig { interval: 0, ..SuiteConfig::default() },
        SuiteConfig { split: [0, 0, 0], ..SuiteConfig::default() },
        SuiteConfig { vessels_per_case: 3, ..SuiteConfig::default() },
    ] {
        assert!(generate_suite(&cfg, dir.path()).is_err());
    }
    assert!(serde_json::from_str::<SuiteConfig>(r#"{"cases": 3}"#).is_err());
}
