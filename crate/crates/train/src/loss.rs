//! Training losses, recorded as custom ops on the autodiff tape.

use dbfunet::tensor::Real;
use dbfunet::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const DICE_EPS: f64 = 1e-5;

/// Loss value split into its weighted terms (unweighted values).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegLossParts {
    pub ce: f64,
    pub dice: f64,
}

fn f64_of<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap()
}

/// Per-voxel softmax over the class axis of (B, C, ...) logits.
pub fn softmax_classes<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let s = logits.len() / (b * c);
    let mut p = logits.clone();
    let d = p.data_mut();
    for bi in 0..b {
        let base = bi * c * s;
        for v in 0..s {
            let mx = (0..c).map(|k| d[base + k * s + v]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (d[base + k * s + v] - mx).exp();
                d[base + k * s + v] = e;
                z += e;
            }
            for k in 0..c {
                d[base + k * s + v] /= z;
            }
        }
    }
    p
}

fn check_target(shape: &[usize], target: &[u8]) {
    let c = shape[1];
    let n: usize = shape.iter().product();
    assert_eq!(target.len() * c, n, "target must hold one class per voxel of {shape:?}");
    assert!(target.iter().all(|&t| (t as usize) < c), "target class out of range for {c} classes");
}

/// `w_ce * CE + w_dice * (1 - mean_c 2 sum(p q) / (sum p + sum q + eps))`.
/// CE is averaged over voxels; the soft-Dice sums run over the whole
/// batch. `target` holds one class id per voxel in (B, D, H, W) order.
pub fn seg_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &[u8], w_ce: f64, w_dice: f64) -> (Var, SegLossParts) {
    let z = g.value(logits);
    let shape = z.shape().to_vec();
    check_target(&shape, target);
    let (b, c) = (shape[0], shape[1]);
    let s = z.len() / (b * c);
    let n = (b * s) as f64;
    let p = softmax_classes(z);
    let pd = p.data();

    let mut ce = 0.0f64;
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    let mut qsum = vec![0.0f64; c];
    for bi in 0..b {
        for v in 0..s {
            let t = target[bi * s + v] as usize;
            // log-softmax directly from the logits for accuracy
            let zb = &z.data()[bi * c * s..];
            let mx = (0..c).map(|k| f64_of(zb[k * s + v])).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).map(|k| (f64_of(zb[k * s + v]) - mx).exp()).sum::<f64>().ln();
            ce += lse - f64_of(zb[t * s + v]);
            for k in 0..c {
                let pk = f64_of(pd[(bi * c + k) * s + v]);
                psum[k] += pk;
                if k == t {
                    inter[k] += pk;
                    qsum[k] += 1.0;
                }
            }
        }
    }
    ce /= n;
    let denom: Vec<f64> = (0..c).map(|k| psum[k] + qsum[k] + DICE_EPS).collect();
    let dice = 1.0 - (0..c).map(|k| 2.0 * inter[k] / denom[k]).sum::<f64>() / c as f64;
    let value = Tensor::from_vec(&[1], vec![T::of(w_ce * ce + w_dice * dice)]).unwrap();

    let target = target.to_vec();
    let out = g.custom(
        &[logits],
        value,
        Box::new(move |ctx| {
            let go = f64_of(ctx.grad.data()[0]);
            let mut gz = Tensor::zeros(&shape);
            let gd = gz.data_mut();
            let pd = p.data();
            let mut a = vec![0.0f64; c];
            let mut pk = vec![0.0f64; c];
            for bi in 0..b {
                for v in 0..s {
                    let t = target[bi * s + v] as usize;
                    for k in 0..c {
                        pk[k] = f64_of(pd[(bi * c + k) * s + v]);
                        let q = if k == t { 1.0 } else { 0.0 };
                        // d dice / d p_k
                        a[k] = -(2.0 / c as f64) * (q / denom[k] - inter[k] / (denom[k] * denom[k]));
                    }
                    let pa: f64 = (0..c).map(|k| pk[k] * a[k]).sum();
                    for k in 0..c {
                        let q = if k == t { 1.0 } else { 0.0 };
                        let d = w_ce * (pk[k] - q) / n + w_dice * pk[k] * (a[k] - pa);
                        gd[(bi * c + k) * s + v] = T::of(go * d);
                    }
                }
            }
            vec![Some(gz)]
        }),
    );
    (out, SegLossParts { ce, dice })
}

/// Relative weights and focusing parameter of [`prompt_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptLossConfig {
    pub w_focal: f64,
    pub w_dice: f64,
    pub w_iou: f64,
    pub gamma: f64,
}

impl Default for PromptLossConfig {
    fn default() -> Self {
        Self {
            w_focal: 20.0,
            w_dice: 1.0,
            w_iou: 1.0,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptLossParts {
    pub focal: f64,
    pub dice: f64,
    pub iou: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hard-mask IoU of `prob > 0.5` against `target`; 1 when both are empty.
pub fn hard_iou(prob: &[f64], target: &[u8]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&p, &t) in prob.iter().zip(target) {
        let (a, b) = (p > 0.5, t != 0);
        i += usize::from(a && b);
        u += usize::from(a || b);
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Loss of the promptable stand-in segmenter: focal loss on per-pixel
/// sigmoid logits, binary soft-Dice, and the squared error between the
/// predicted IoU (`iou_est`, shape (B, 1)) and the actual hard-mask IoU.
/// `logits` is (B, 1, ...); `target` is 0/1 per pixel.
pub fn prompt_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    iou_est: Var,
    target: &[u8],
    cfg: PromptLossConfig,
) -> (Var, PromptLossParts) {
    let z = g.value(logits);
    let shape = z.shape().to_vec();
    assert_eq!(shape[1], 1, "prompt loss takes single-channel logits");
    assert_eq!(z.len(), target.len());
    let b = shape[0];
    let s = z.len() / b;
    let iou_shape = g.shape(iou_est).to_vec();
    assert_eq!(iou_shape.iter().product::<usize>(), b, "one IoU estimate per sample");
    let est: Vec<f64> = g.value(iou_est).data().iter().map(|&v| f64_of(v)).collect();
    let p: Vec<f64> = z.data().iter().map(|&v| sigmoid(f64_of(v))).collect();
    let gamma = cfg.gamma;

    let mut focal = 0.0;
    for (&pi, &t) in p.iter().zip(target) {
        let pt = if t != 0 { pi } else { 1.0 - pi };
        focal -= (1.0 - pt).powf(gamma) * pt.max(f64::MIN_POSITIVE).ln();
    }
    focal /= p.len() as f64;
    let inter: f64 = p.iter().zip(target).map(|(&pi, &t)| if t != 0 { pi } else { 0.0 }).sum();
    let denom = p.iter().sum::<f64>() + target.iter().filter(|&&t| t != 0).count() as f64 + DICE_EPS;
    let dice = 1.0 - 2.0 * inter / denom;
    let actual: Vec<f64> = (0..b).map(|bi| hard_iou(&p[bi * s..(bi + 1) * s], &target[bi * s..(bi + 1) * s])).collect();
    let iou = est.iter().zip(&actual).map(|(e, a)| (e - a).powi(2)).sum::<f64>() / b as f64;
    let total = cfg.w_focal * focal + cfg.w_dice * dice + cfg.w_iou * iou;

    let target = target.to_vec();
    let value = Tensor::from_vec(&[1], vec![T::of(total)]).unwrap();
    let out = g.custom(
        &[logits, iou_est],
        value,
        Box::new(move |ctx| {
            let go = f64_of(ctx.grad.data()[0]);
            let n = p.len() as f64;
            let gz: Vec<T> = p
                .iter()
                .zip(&target)
                .map(|(&pi, &t)| {
                    let (pt, sign) = if t != 0 { (pi, 1.0) } else { (1.0 - pi, -1.0) };
                    let q = 1.0 - pt;
                    let lg = pt.max(f64::MIN_POSITIVE).ln();
                    // d focal / d z, written without dividing by pt
                    let dfocal = sign * (gamma * pt * q.powf(gamma) * lg - q.powf(gamma + 1.0)) / n;
                    let y = if t != 0 { 1.0 } else { 0.0 };
                    let ddice_dp = -2.0 * (y / denom - inter / (denom * denom));
                    let d = cfg.w_focal * dfocal + cfg.w_dice * ddice_dp * pi * (1.0 - pi);
                    T::of(go * d)
                })
                .collect();
            let ge: Vec<T> = est
                .iter()
                .zip(&actual)
                .map(|(e, a)| T::of(go * cfg.w_iou * 2.0 * (e - a) / b as f64))
                .collect();
            vec![
                Some(Tensor::from_vec(&shape, gz).unwrap()),
                Some(Tensor::from_vec(&iou_shape, ge).unwrap()),
            ]
        }),
    );
    (out, PromptLossParts { focal, dice, iou })
}
