use proptest::prelude::*;
use vessel_core::labelprop::{build_tracks, interpolate_centerline, propagate_aipl, propagate_cipl, SliceTrack, TrackEntry};
use vessel_core::metrics::class_metrics;
use vessel_core::phantom::{generate_case, PhantomCase, VesselSpec};
use vessel_core::volume::LUMEN;
use vessel_core::{Dims, LabelVolume, Spacing};

fn drifting(amplitude: f64, period: f64, phase: f64, k: usize) -> PhantomCase {
    let spec = VesselSpec {
        drift_amplitude: amplitude,
        drift_period: period,
        drift_phase: phase,
        ..VesselSpec::straight(24.0, 24.0, 4.0, 2.0)
    };
    generate_case(&[spec], Dims::new(25, 48, 48), Spacing::isotropic(0.6), k, 0.0, 0).unwrap()
}

/// Mean (y, x) of the vessel pixels on slice z, computed directly.
fn centroid(v: &LabelVolume, z: usize) -> Option<(f64, f64)> {
    let w = v.dims.w;
    let px: Vec<usize> = v.slice_data(z).iter().enumerate().filter(|(_, &c)| c != 0).map(|(i, _)| i).collect();
    (!px.is_empty()).then(|| {
        let n = px.len() as f64;
        (px.iter().map(|&i| (i / w) as f64).sum::<f64>() / n, px.iter().map(|&i| (i % w) as f64).sum::<f64>() / n)
    })
}

/// Shifts slice `src` of `v` by `(dy, dx)`, dropping pixels that leave the grid.
fn shifted(v: &LabelVolume, src: usize, dy: i64, dx: i64) -> Vec<u8> {
    let (h, w) = (v.dims.h as i64, v.dims.w as i64);
    let mut out = vec![0u8; (h * w) as usize];
    for (i, &c) in v.slice_data(src).iter().enumerate() {
        let (y, x) = ((i as i64) / w + dy, (i as i64) % w + dx);
        if c != 0 && (0..h).contains(&y) && (0..w).contains(&x) {
            out[(y * w + x) as usize] = c;
        }
    }
    out
}

#[test]
fn straight_tube_is_one_track_and_cipl_equals_aipl() {
    let c = drifting(0.0, 1.0, 0.0, 4);
    let tracks = build_tracks(&c.sparse, 10.0);
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0].entries.iter().map(|e| e.z).collect::<Vec<_>>(), c.sparse.annotated_slices);
    // every interpolated offset rounds to zero
    assert_eq!(propagate_cipl(&c.sparse, 10.0), propagate_aipl(&c.sparse));
    assert_eq!(propagate_cipl(&c.sparse, 10.0).data, c.gt.data);
}

#[test]
fn parallel_tubes_form_separate_tracks() {
    let a = VesselSpec::straight(24.0, 14.0, 3.0, 1.5);
    let b = VesselSpec::straight(24.0, 34.0, 3.0, 1.5);
    let c = generate_case(&[a, b], Dims::new(9, 48, 48), Spacing::isotropic(0.6), 4, 0.0, 0).unwrap();
    let tracks = build_tracks(&c.sparse, 10.0);
    assert_eq!(tracks.len(), 2);
    assert!(tracks.iter().all(|t| t.entries.len() == 3));
    // a radius too small to bridge even the first step starts a track per entry
    assert_eq!(build_tracks(&c.sparse, -1.0).len(), 6);
}

#[test]
fn single_annotated_slice_gives_single_entry_tracks() {
    let c = drifting(2.0, 20.0, 0.0, 100);
    assert_eq!(c.sparse.annotated_slices, vec![0]);
    let tracks = build_tracks(&c.sparse, 10.0);
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0].entries.len(), 1);
    let line = interpolate_centerline(&tracks[0]);
    assert_eq!((line.z_start, line.z_end()), (0, 0));
    assert_eq!(propagate_cipl(&c.sparse, 10.0).annotated_slices, vec![0]);
}

#[test]
fn centerline_interpolates_linearly() {
    let entry = |z, c| TrackEntry {
        z,
        pixels: vec![],
        centroid: c,
    };
    let t = SliceTrack {
        track_id: 0,
        entries: vec![entry(0, (10.0, 10.0)), entry(4, (18.0, 10.0))],
    };
    let line = interpolate_centerline(&t);
    assert_eq!(line.at(1), Some((12.0, 10.0)));
    assert_eq!(line.at(2), Some((14.0, 10.0)));
    assert_eq!(line.at(5), None);
}

#[test]
fn aipl_copies_nearest_slice_and_shows_a_staircase() {
    let c = drifting(3.0, 24.0, 0.0, 4);
    let a = propagate_aipl(&c.sparse);
    for z in 0..=c.sparse.annotated_slices.last().copied().unwrap() {
        let below = z / 4 * 4;
        let src = if z - below <= 2 { below } else { below + 4 };
        assert_eq!(a.slice_data(z), c.sparse.slice_data(src), "slice {z}");
    }
    let truth = centroid(&c.gt, 2).unwrap();
    let copied = centroid(&a, 2).unwrap();
    assert!((truth.0 - copied.0).hypot(truth.1 - copied.1) > 0.5);
}

#[test]
fn cipl_is_a_translate_along_the_centerline() {
    let c = drifting(3.0, 24.0, 0.7, 4);
    let sparse = &c.sparse;
    let cipl = propagate_cipl(sparse, 10.0);
    let ann = &sparse.annotated_slices;
    let n = sparse.dims.plane_len();
    let mut checked = 0;
    for pair in ann.windows(2) {
        let (z0, z1) = (pair[0], pair[1]);
        let (c0, c1) = (centroid(sparse, z0).unwrap(), centroid(sparse, z1).unwrap());
        for z in z0 + 1..z1 {
            let t = (z - z0) as f64 / (z1 - z0) as f64;
            let line = (c0.0 + t * (c1.0 - c0.0), c0.1 + t * (c1.1 - c0.1));
            let (src, cs) = if z - z0 <= z1 - z { (z0, c0) } else { (z1, c1) };
            let dy = (line.0 - cs.0).round() as i64;
            let dx = (line.1 - cs.1).round() as i64;
            assert_eq!(&cipl.data[z * n..(z + 1) * n], &shifted(sparse, src, dy, dx)[..], "slice {z}");
            let got = centroid(&cipl, z).unwrap();
            assert!((got.0 - line.0).hypot(got.1 - line.1) <= 0.5f64.sqrt() + 1e-9, "slice {z}");
            checked += 1;
        }
    }
    assert_eq!(checked, 18);
    for &z in ann {
        assert_eq!(cipl.slice_data(z), sparse.slice_data(z));
    }
}

#[test]
fn cipl_beats_aipl_on_drifting_vessels() {
    let c = drifting(4.0, 24.0, 0.0, 4);
    let dice = |v: &LabelVolume| class_metrics(v, &c.gt, LUMEN).unwrap().dice.unwrap();
    let a = dice(&propagate_aipl(&c.sparse));
    let ci = dice(&propagate_cipl(&c.sparse, 10.0));
    assert!(ci > a + 0.02, "cipl {ci} aipl {a}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn propagation_invariants(amp in 0.0f64..5.0, period in 12.0f64..60.0, phase in 0.0f64..6.3, k in 2usize..7) {
        let c = drifting(amp, period, phase, k);
        let a = propagate_aipl(&c.sparse);
        let ci = propagate_cipl(&c.sparse, 10.0);
        let last = *c.sparse.annotated_slices.last().unwrap();
        for &z in &c.sparse.annotated_slices {
            prop_assert_eq!(a.slice_data(z), c.sparse.slice_data(z));
            prop_assert_eq!(ci.slice_data(z), c.sparse.slice_data(z));
        }
        for z in last + 1..c.gt.dims.d {
            prop_assert!(a.slice_data(z).iter().all(|&v| v == 0));
            prop_assert!(ci.slice_data(z).iter().all(|&v| v == 0));
        }
        prop_assert!(ci.data.iter().chain(&a.data).all(|&v| v <= 2));
        // where the rounded shift is zero both methods paste the same plane
        for z in 0..=last {
            if c.sparse.is_annotated(z) {
                continue;
            }
            let z0 = z / k * k;
            let z1 = z0 + k;
            let (c0, c1) = (centroid(&c.sparse, z0).unwrap(), centroid(&c.sparse, z1).unwrap());
            let t = (z - z0) as f64 / k as f64;
            let src = if z - z0 <= z1 - z { c0 } else { c1 };
            let line = (c0.0 + t * (c1.0 - c0.0), c0.1 + t * (c1.1 - c0.1));
            if (line.0 - src.0).round() == 0.0 && (line.1 - src.1).round() == 0.0 {
                prop_assert_eq!(a.slice_data(z), ci.slice_data(z));
            }
        }
    }
}
