//! Finite-difference verification of the analytic gradients of anything
//! recorded on a [`Graph`].
//!
//! The function under test is recorded twice, once in f32 and once in f64
//! (see [`gradcheck!`](crate::gradcheck!)). Finite differences are always
//! taken in f64, so round-off in the oracle is negligible and both analytic
//! gradients are compared against the same reference.
//!
//! The probe loss is `sum(r * y)` for a fixed random `r`. Input gradients
//! are checked coordinate by coordinate and compared as whole vectors. Each
//! parameter tensor is probed along its own gradient direction and along
//! random unit directions; the error of a directional derivative is
//! measured relative to the norm of that tensor's gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Default)]
pub struct GradErrors {
    /// ||g_fd - g|| / max(||g_fd||, ||g||) for the input gradient.
    pub input: f64,
    /// Worst |fd - analytic| / ||grad|| over the probed directions, per
    /// parameter tensor.
    pub params: Vec<(String, f64)>,
}

impl GradErrors {
    pub fn max(&self) -> f64 {
        self.params.iter().map(|p| p.1).fold(self.input, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// f32 analytic gradients against the f64 differences.
    pub f32: GradErrors,
    /// f64 analytic gradients against the f64 differences.
    pub f64: GradErrors,
}

/// Derivative at 0 of a scalar function, from Richardson-extrapolated
/// central differences at steps h0, h0/3, h0/9, h0/27. The estimate comes
/// from the adjacent pair of steps that agree best, which discards steps
/// that straddle a kink (max, argmax) or are dominated by truncation.
pub fn fd_derivative(f: &dyn Fn(f64) -> f64, h0: f64) -> f64 {
    let est: Vec<f64> = (0..4)
        .map(|i| {
            let h = h0 / 3f64.powi(i);
            let d1 = (f(h) - f(-h)) / (2.0 * h);
            let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
            (4.0 * d2 - d1) / 3.0
        })
        .collect();
    let best = (0..3)
        .min_by(|&a, &b| {
            let da = (est[a] - est[a + 1]).abs();
            let db = (est[b] - est[b + 1]).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    0.5 * (est[best] + est[best + 1])
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Largest finite-difference step.
    pub step: f64,
    pub directions_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            directions_per_param: 2,
            seed: 7,
        }
    }
}

/// Records `$body` for both precisions and runs [`check`]:
/// `gradcheck!(&store, &x, opts, |g, s, x| block.forward(g, s, x))`.
#[macro_export]
macro_rules! gradcheck {
    ($store:expr, $x:expr, $opts:expr, |$g:ident, $s:ident, $v:ident| $body:expr) => {
        $crate::gradcheck::check(
            $store,
            $x,
            $opts,
            |$g: &mut $crate::Graph<f32>, $s: &$crate::ParamStore<f32>, $v: $crate::Var| $body,
            |$g: &mut $crate::Graph<f64>, $s: &$crate::ParamStore<f64>, $v: $crate::Var| $body,
        )
    };
}

struct Analytic<T: Real> {
    input: Tensor<T>,
    params: Vec<(ParamId, Tensor<T>)>,
}

fn analytic<T: Real, F>(store: &ParamStore<T>, x: &Tensor<T>, probe: &Tensor<T>, f: &F) -> Analytic<T>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, store, xv);
    let l = g.weighted_sum(y, probe.clone());
    let grads = g.backward(l);
    Analytic {
        input: grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())),
        params: grads.params().map(|(id, t)| (id, t.clone())).collect(),
    }
}

fn to64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|a| a.to_f64().unwrap()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let num = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let m = dot(fd, fd).max(dot(an, an)).sqrt();
    if m < 1e-12 {
        num
    } else {
        num / m
    }
}

/// `f32_fn` and `f64_fn` must record the same function; parameters must be
/// taken from the store they are handed.
pub fn check<F32, F64>(store: &ParamStore, x: &Tensor, opts: GradCheckOptions, f32_fn: F32, f64_fn: F64) -> GradCheckReport
where
    F32: Fn(&mut Graph<f32>, &ParamStore<f32>, Var) -> Var,
    F64: Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let probe: Tensor = {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let y = f32_fn(&mut g, store, xv);
        let shape = g.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let store64: ParamStore<f64> = store.cast();
    let x64: Tensor<f64> = x.cast();
    let probe64: Tensor<f64> = probe.cast();
    let loss = |s: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let y = f64_fn(&mut g, s, xv);
        dot(g.value(y).data(), probe64.data())
    };

    let a32 = analytic(store, x, &probe, &f32_fn);
    let a64 = analytic(&store64, &x64, &probe64, &f64_fn);

    let fd_input: Vec<f64> = (0..x.len())
        .map(|i| {
            fd_derivative(
                &|e| {
                    let mut xp = x64.clone();
                    xp.data_mut()[i] += e;
                    loss(&store64, &xp)
                },
                opts.step,
            )
        })
        .collect();
    let mut out32 = GradErrors {
        input: vec_rel_err(&fd_input, &to64(a32.input.data())),
        params: Vec::new(),
    };
    let mut out64 = GradErrors {
        input: vec_rel_err(&fd_input, a64.input.data()),
        params: Vec::new(),
    };

    for (id, g64) in &a64.params {
        let g64 = g64.data();
        let g32 = a32
            .params
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, t)| to64(t.data()))
            .unwrap_or_else(|| vec![0.0; g64.len()]);
        let gnorm = dot(g64, g64).sqrt();
        // the gradient direction itself, then random unit directions
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        if gnorm > 0.0 {
            dirs.push(g64.iter().map(|v| v / gnorm).collect());
        }
        for _ in 0..opts.directions_per_param {
            let dir: Vec<f64> = (0..g64.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dot(&dir, &dir).sqrt();
            dirs.push(dir.iter().map(|v| v / norm).collect());
        }
        let base = store64.get(*id).clone();
        let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
        for dir in &dirs {
            let fd = fd_derivative(
                &|e| {
                    let mut s = store64.clone();
                    for (w, (&b0, &d)) in s.get_mut(*id).data_mut().iter_mut().zip(base.data().iter().zip(dir)) {
                        *w = b0 + e * d;
                    }
                    loss(&s, &x64)
                },
                opts.step,
            );
            let scale = gnorm.max(fd.abs());
            let rel = |an: f64| if scale < 1e-12 { (fd - an).abs() } else { (fd - an).abs() / scale };
            worst32 = worst32.max(rel(dot(&g32, dir)));
            worst64 = worst64.max(rel(dot(g64, dir)));
        }
        let name = store.name(*id).to_string();
        out32.params.push((name.clone(), worst32));
        out64.params.push((name, worst64));
    }
    GradCheckReport { f32: out32, f64: out64 }
}
