//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vessel_core::metrics::{asd, ConfusionCounts};
use vessel_core::srpl::{perturb_box, BoundingBox2D, PerturbationParams};
use vessel_core::volume::{read_volume, write_volume, VoxelData};
use vessel_core::{AnyVolume, Dims, LabelVolume, Spacing, Volume3D};

/// Counts by explicit four-way tally over coordinates.
pub fn counts(pred: &[u8], gt: &[u8]) -> [f64; 4] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..gt.len() {
        let p = pred[i] > 0;
        let g = gt[i] > 0;
        if p && g {
            tp += 1.0;
        } else if p {
            fp += 1.0;
        } else if g {
            fn_ += 1.0;
        } else {
            tn += 1.0;
        }
    }
    [tp, fp, fn_, tn]
}

fn surface(mask: &[u8], d: [usize; 3]) -> Vec<[usize; 3]> {
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d[0]
            && (y as usize) < d[1]
            && (x as usize) < d[2]
            && mask[(z as usize * d[1] + y as usize) * d[2] + x as usize] > 0
    };
    let mut out = Vec::new();
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if !inside(zi, yi, xi) {
                    continue;
                }
                let offs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if offs.iter().any(|&(a, b, c)| !inside(zi + a, yi + b, xi + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Symmetric mean surface distance by exhaustive pairwise search.
pub fn brute_asd(pred: &[u8], gt: &[u8], d: [usize; 3], s: [f64; 3]) -> Option<f64> {
    let a = surface(pred, d);
    let b = surface(gt, d);
    if a.is_empty() && b.is_empty() {
        return Some(0.0);
    }
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| {
        set.iter()
            .map(|q| {
                (0..3)
                    .map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = a.iter().map(|p| nearest(p, &b)).sum::<f64>() + b.iter().map(|p| nearest(p, &a)).sum::<f64>();
    Some(total / (a.len() + b.len()) as f64)
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

fn ratio(n: f64, d: f64) -> Option<f64> {
    (d > 0.0).then(|| n / d)
}

/// Compares the library metrics with the brute-force ones on `pairs`
/// random 5x5x5 mask pairs. Returns the number of mismatches and the
/// worst ASD deviation seen.
pub fn metric_agreement(pairs: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = [5, 5, 5];
    let dims = Dims::new(5, 5, 5);
    let mut bad = 0;
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let (pp, pg) = match i % 10 {
            0 => (0.0, rng.random_range(0.0..0.6)),
            1 => (0.0, 0.0),
            _ => (rng.random_range(0.0..0.9), rng.random_range(0.0..0.9)),
        };
        let pred: Vec<u8> = (0..125).map(|_| u8::from(rng.random_bool(pp))).collect();
        let gt: Vec<u8> = (0..125).map(|_| u8::from(rng.random_bool(pg))).collect();
        let s = [rng.random_range(0.3..2.0), rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)];

        let [tp, fp, fn_, tn] = counts(&pred, &gt);
        let c = ConfusionCounts::from_masks(&pred, &gt);
        let lib = [c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64];
        let ok_counts = lib.iter().zip([tp, fp, fn_, tn]).all(|(a, b)| (a - b).abs() <= 1e-9);
        let ok_ratios = close(c.dice(), ratio(2.0 * tp, 2.0 * tp + fp + fn_), 1e-9)
            && close(c.iou(), ratio(tp, tp + fp + fn_), 1e-9)
            && close(c.precision(), ratio(tp, tp + fp), 1e-9)
            && close(c.recall(), ratio(tp, tp + fn_), 1e-9);
        let mine = asd(&pred, &gt, dims, Spacing(s));
        let theirs = brute_asd(&pred, &gt, d, s);
        if let (Some(a), Some(b)) = (mine, theirs) {
            worst = worst.max((a - b).abs());
        }
        if !(ok_counts && ok_ratios && close(mine, theirs, 1e-6)) {
            bad += 1;
        }
    }
    (bad, worst)
}

/// Perturbations used for the 20-bin histogram: 10000 expected samples
/// per bin, a 1% standard error against the 5% tolerance.
pub const UNIFORMITY_DRAWS: usize = 100_000;

/// Summary of a batch of box perturbations.
#[derive(Debug)]
pub struct PerturbationStats {
    pub draws: usize,
    pub bound_violations: usize,
    pub size_changes: usize,
    /// Largest relative deviation of a histogram bin from its expected count.
    pub max_bin_deviation: f64,
}

/// Draws `n` perturbations of random boxes under random parameters and
/// histograms the normalised offsets `eps / delta` into 20 bins on [-1, 1].
pub fn perturbation_stats(n: usize, seed: u64) -> PerturbationStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bins = [0usize; 20];
    let mut stats = PerturbationStats {
        draws: 0,
        bound_violations: 0,
        size_changes: 0,
        max_bin_deviation: 0.0,
    };
    for _ in 0..n {
        let x0 = rng.random_range(0..100) as f64;
        let y0 = rng.random_range(0..100) as f64;
        let w = rng.random_range(1..40) as f64;
        let h = rng.random_range(1..40) as f64;
        let b = BoundingBox2D::new(x0, y0, x0 + w, y0 + h).unwrap();
        let p = PerturbationParams {
            scale: rng.random_range(0.01..0.5),
            max_noise: rng.random_range(0.5..8.0),
            ..PerturbationParams::default()
        };
        // reference values computed here, not via the library
        let sigma = w.min(h) * p.scale;
        let delta = p.max_noise.min(5.0 * sigma);
        let q = perturb_box(&b, &p, &mut rng);
        let ex = q.x0 - b.x0;
        let ey = q.y0 - b.y0;
        for e in [ex, ey] {
            if e.abs() > delta || delta > p.max_noise || delta > 5.0 * sigma {
                stats.bound_violations += 1;
            }
            let u = ((e / delta + 1.0) / 2.0 * 20.0).floor().clamp(0.0, 19.0) as usize;
            bins[u] += 1;
            stats.draws += 1;
        }
        if q.x1 - q.x0 != w || q.y1 - q.y0 != h || q.width() != b.width() || q.height() != b.height() {
            stats.size_changes += 1;
        }
    }
    let expected = stats.draws as f64 / 20.0;
    stats.max_bin_deviation = bins.iter().map(|&c| (c as f64 - expected).abs() / expected).fold(0.0, f64::max);
    stats
}

/// A random image or label volume; images alternate between u8 and f32
/// with arbitrary bit patterns (NaNs and infinities included).
pub fn random_volume<R: Rng>(rng: &mut R, i: usize) -> AnyVolume {
    let dims = Dims::new(rng.random_range(1..7), rng.random_range(1..9), rng.random_range(1..9));
    let spacing = Spacing([rng.random_range(0.05..4.0), rng.random_range(0.05..4.0), rng.random_range(0.05..4.0)]);
    match i % 3 {
        0 => {
            let data = (0..dims.len()).map(|_| f32::from_bits(rng.random())).collect();
            let mut v = Volume3D::new(dims, spacing, VoxelData::F32(data)).unwrap();
            if rng.random_bool(0.5) {
                v.intensity_range = Some((rng.random_range(-10.0..0.0), rng.random_range(0.0..10.0)));
            }
            AnyVolume::Image(v)
        }
        1 => {
            let data = (0..dims.len()).map(|_| rng.random()).collect();
            AnyVolume::Image(Volume3D::new(dims, spacing, VoxelData::U8(data)).unwrap())
        }
        _ => {
            let data = (0..dims.len()).map(|_| rng.random_range(0..3u8)).collect();
            let slices = (0..dims.d).filter(|_| rng.random_bool(0.4)).collect();
            AnyVolume::Label(LabelVolume::new(dims, spacing, data, slices).unwrap())
        }
    }
}

/// Writes and re-reads `n` random volumes under `dir`; returns how many
/// did not come back identical (voxel bits and metadata).
pub fn roundtrip_failures(n: usize, seed: u64, dir: &Path) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for i in 0..n {
        let v = random_volume(&mut rng, i);
        let path = dir.join(format!("v{i}.vvolh"));
        write_volume(&v, &path).unwrap();
        match read_volume(&path) {
            Ok(back) if back == v => {}
            _ => failures += 1,
        }
    }
    failures
}
