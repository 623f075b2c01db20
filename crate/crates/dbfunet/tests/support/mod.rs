//! Oracles shared by the block and model tests.
#![allow(dead_code)]

use dbfunet::blocks::{Bff, Dsd, Mlk, MlkOptions, Msda};
use dbfunet::gradcheck::{GradCheckOptions, GradCheckReport};
use dbfunet::{gradcheck, Graph, NetConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-5;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn mlk_options(use_msda: bool, gamma0: f32) -> MlkOptions {
    MlkOptions {
        mlp_ratio: 4,
        gamma0,
        kernels: [3, 5, 7],
        use_msda,
    }
}

/// Worst (f32, f64) relative error over the input and every parameter.
pub fn worst(r: &GradCheckReport) -> (f64, f64) {
    let w = |e: &dbfunet::gradcheck::GradErrors| e.params.iter().map(|(_, v)| *v).fold(e.input, f64::max);
    (w(&r.f32), w(&r.f64))
}

pub fn dsd_report() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let dsd = Dsd::new(&mut store, "dsd", 2, 4, &mut rng);
    let x = random(&[1, 2, 4, 4, 4], 2);
    gradcheck!(&store, &x, GradCheckOptions::default(), |g, s, x| dsd.forward(g, s, x))
}

pub fn msda_report() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let m = Msda::new(&mut store, "msda", 3, [3, 5, 7], &mut rng);
    let x = random(&[1, 3, 4, 4, 4], 6);
    gradcheck!(&store, &x, GradCheckOptions::default(), |g, s, x| m.forward(g, s, x))
}

pub fn mlk_report() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    // large layer scales so every branch carries real signal
    let m = Mlk::new(&mut store, "mlk", 4, mlk_options(true, 0.5), &mut rng);
    let x = random(&[1, 4, 4, 4, 4], 8);
    gradcheck!(&store, &x, GradCheckOptions::default(), |g, s, x| m.forward(g, s, x))
}

/// Gradients with respect to the deep and the shallow input in turn.
pub fn bff_reports() -> [GradCheckReport; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let b = Bff::new(&mut store, "bff", 4, 2, &mut rng);
    let shallow = random(&[1, 2, 4, 4, 3], 12);
    let deep = random(&[1, 4, 2, 2, 2], 13);
    let d = gradcheck!(&store, &deep, GradCheckOptions::default(), |g, s, d| {
        let sh = g.input(shallow.cast());
        b.forward(g, s, d, sh)
    });
    let s = gradcheck!(&store, &shallow, GradCheckOptions::default(), |g, s, sh| {
        let d = g.input(deep.cast());
        b.forward(g, s, d, sh)
    });
    [d, s]
}

/// Max |MLK(x) - (b + W x)| with zero layer scales, against a hand-rolled
/// 1x1x1 convolution using the block's output projection weights.
pub fn mlk_collapse_error() -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let m = Mlk::new(&mut store, "mlk", 4, mlk_options(true, 0.0), &mut rng);
    let x = random(&[2, 4, 4, 4, 4], 15);
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let y = m.forward(&mut g, &store, xv);
    let w = store.get(m.out.w).data();
    let b = store.get(m.out.b.unwrap()).data();
    let s = 64;
    let mut worst = 0.0f32;
    for bi in 0..2 {
        for c in 0..4 {
            for i in 0..s {
                let mut acc = b[c];
                for k in 0..4 {
                    acc += w[c * 4 + k] * x.data()[(bi * 4 + k) * s + i];
                }
                let got = g.value(y).data()[(bi * 4 + c) * s + i];
                worst = worst.max((got - acc).abs() / acc.abs().max(1.0));
            }
        }
    }
    worst
}

/// Max |DSD(x) - avgpool(x)| for a same-width DSD with all weights zeroed,
/// against brute-force ceil-mode pooling over the valid voxels.
pub fn dsd_pool_error() -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let dsd = Dsd::new(&mut store, "dsd", 3, 3, &mut rng);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let dims = [5usize, 4, 3];
    let x = random(&[1, 3, dims[0], dims[1], dims[2]], 17);
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let y = dsd.forward(&mut g, &store, xv);
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 3, 3, 2, 2]);
    let mut worst = 0.0f32;
    for c in 0..3 {
        for z in 0..3 {
            for yy in 0..2 {
                for xx in 0..2 {
                    let mut vals = Vec::new();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (iz, iy, ix) = (2 * z + dz, 2 * yy + dy, 2 * xx + dx);
                                if iz < dims[0] && iy < dims[1] && ix < dims[2] {
                                    vals.push(x.data()[((c * dims[0] + iz) * dims[1] + iy) * dims[2] + ix]);
                                }
                            }
                        }
                    }
                    let mean = vals.iter().sum::<f32>() / vals.len() as f32;
                    worst = worst.max((out.data()[((c * 3 + z) * 2 + yy) * 2 + xx] - mean).abs());
                }
            }
        }
    }
    worst
}

/// Largest |sum(attention) - 1| over a few random inputs.
pub fn attention_sum_deviation() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::new();
    let m = Msda::new(&mut store, "msda", 6, [3, 5, 7], &mut rng);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut g = Graph::inference();
        let x = g.input(random(&[1, 6, 8, 8, 8], 100 + seed));
        let (_, a) = m.forward_with_attention(&mut g, &store, x);
        let sum: f64 = g.value(a).data().iter().map(|&v| v as f64).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

// Counting oracle, written from the layer list rather than from the store.
fn pw(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}
fn dw(c: usize, k: usize) -> usize {
    c * k.pow(3) + c
}
fn ln(c: usize) -> usize {
    2 * c
}
fn mixer(cfg: &NetConfig, c: usize) -> usize {
    if cfg.use_msda {
        let dws: usize = cfg.msda_kernels.iter().map(|&k| dw(c, k) + pw(c, c)).sum();
        dws + (9 * c * 3 * c + 3 * c) + 2 * pw(3 * c, 3 * c) + pw(3 * c, c) + ln(c)
    } else {
        dw(c, 3) + pw(c, c)
    }
}
fn mlk(cfg: &NetConfig, c: usize) -> usize {
    let h = cfg.mlp_ratio * c;
    ln(c) + mixer(cfg, c) + c + ln(c) + pw(c, h) + pw(h, c) + c + pw(c, c)
}
fn dsd(ci: usize, co: usize) -> usize {
    dw(ci, 3) + pw(ci, 4 * ci) + pw(5 * ci, co) + if ci != co { ci * co } else { 0 }
}
pub fn count_oracle(cfg: &NetConfig) -> usize {
    let ch = &cfg.channels;
    let n = cfg.mlk_per_level;
    let mut total = cfg.in_channels * ch[0] * 27 + ch[0] + ln(ch[0]);
    for i in 0..ch.len() - 1 {
        total += 2 * n * mlk(cfg, ch[i]) + dsd(ch[i], ch[i + 1]) + pw(ch[i + 1], ch[i]);
        if cfg.use_bff {
            total += pw(ch[i + 1], ch[i]);
        }
    }
    total + mlk(cfg, ch[0]) + pw(ch[0], cfg.num_classes)
}
