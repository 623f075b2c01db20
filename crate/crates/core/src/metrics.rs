//! Overlap metrics and average surface distance for label volumes.

use serde::{Deserialize, Serialize};

use crate::volume::{Dims, LabelVolume, Spacing, VolumeError};

/// One-vs-rest voxel counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

pub fn confusion(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<ConfusionCounts, VolumeError> {
    pred.same_grid(gt)?;
    Ok(ConfusionCounts::from_masks(&pred.class_mask(class_id), &gt.class_mask(class_id)))
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the grid.
pub fn boundary_voxels(mask: &[u8], dims: Dims) -> Vec<usize> {
    let mut out = Vec::new();
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let i = dims.index(z, y, x);
                if mask[i] == 0 {
                    continue;
                }
                let edge = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == dims.d
                    || y + 1 == dims.h
                    || x + 1 == dims.w
                    || mask[i - 1] == 0
                    || mask[i + 1] == 0
                    || mask[i - dims.w] == 0
                    || mask[i + dims.w] == 0
                    || mask[i - dims.plane_len()] == 0
                    || mask[i + dims.plane_len()] == 0;
                if edge {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// seed voxel, via separable lower-envelope passes. `f64::INFINITY` when
/// there are no seeds.
pub fn squared_distance_transform(seeds: &[usize], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; dims.len()];
    for &s in seeds {
        f[s] = 0.0;
    }
    let [sz, sy, sx] = spacing.0;
    let strides = [dims.plane_len(), dims.w, 1];
    let lens = [dims.d, dims.h, dims.w];
    let weights = [sz * sz, sy * sy, sx * sx];
    let mut line = Vec::new();
    let mut out_line = Vec::new();
    for axis in 0..3 {
        let n = lens[axis];
        let stride = strides[axis];
        // every line start along this axis
        let starts: Vec<usize> = (0..dims.len())
            .filter(|&i| (i / stride) % n == 0)
            .collect();
        for start in starts {
            line.clear();
            line.extend((0..n).map(|k| f[start + k * stride]));
            out_line.resize(n, 0.0);
            envelope_1d(&line, weights[axis], &mut out_line);
            for k in 0..n {
                f[start + k * stride] = out_line[k];
            }
        }
    }
    f
}

fn envelope_1d(f: &[f64], w2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let cost = |q: usize| f[q] + w2 * (q * q) as f64;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (cost(q) - cost(p)) / (2.0 * w2 * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w2 * d * d + f[v[k]];
    }
}

/// Symmetric average surface distance in mm. `Some(0.0)` when both masks
/// are empty, `None` when exactly one is.
pub fn asd(pred: &[u8], gt: &[u8], dims: Dims, spacing: Spacing) -> Option<f64> {
    let bp = boundary_voxels(pred, dims);
    let bg = boundary_voxels(gt, dims);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let to_gt = squared_distance_transform(&bg, dims, spacing);
    let to_pred = squared_distance_transform(&bp, dims, spacing);
    let sum: f64 = bp.iter().map(|&i| to_gt[i].sqrt()).sum::<f64>() + bg.iter().map(|&i| to_pred[i].sqrt()).sum::<f64>();
    Some(sum / (bp.len() + bg.len()) as f64)
}

/// All five metrics for one class of one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub counts: ConfusionCounts,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub asd_mm: Option<f64>,
}

pub fn class_metrics(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<ClassMetrics, VolumeError> {
    pred.same_grid(gt)?;
    let p = pred.class_mask(class_id);
    let g = gt.class_mask(class_id);
    let counts = ConfusionCounts::from_masks(&p, &g);
    Ok(ClassMetrics {
        counts,
        dice: counts.dice(),
        iou: counts.iou(),
        precision: counts.precision(),
        recall: counts.recall(),
        asd_mm: asd(&p, &g, gt.dims, gt.spacing),
    })
}

/// Dice of one class restricted to a set of slices.
pub fn slice_dice(pred: &LabelVolume, gt: &LabelVolume, class_id: u8, z: usize) -> Option<f64> {
    let p: Vec<u8> = pred.slice_data(z).iter().map(|&v| u8::from(v == class_id)).collect();
    let g: Vec<u8> = gt.slice_data(z).iter().map(|&v| u8::from(v == class_id)).collect();
    ConfusionCounts::from_masks(&p, &g).dice()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_have_zero_asd_and_unit_overlap() {
        let dims = Dims::new(3, 3, 3);
        let mut m = vec![0u8; 27];
        m[13] = 1;
        m[14] = 1;
        let c = ConfusionCounts::from_masks(&m, &m);
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(c.dice(), Some(1.0));
        assert_eq!(asd(&m, &m, dims, Spacing::default()), Some(0.0));
    }

    #[test]
    fn asd_of_two_single_voxels() {
        let dims = Dims::new(1, 1, 4);
        let a = vec![1, 0, 0, 0];
        let b = vec![0, 0, 0, 1];
        assert_eq!(asd(&a, &b, dims, Spacing::default()), Some(3.0));
        let an = Spacing([1.0, 1.0, 0.5]);
        assert_eq!(asd(&a, &b, dims, an), Some(1.5));
    }

    #[test]
    fn asd_empty_cases() {
        let dims = Dims::new(1, 1, 2);
        assert_eq!(asd(&[0, 0], &[0, 0], dims, Spacing::default()), Some(0.0));
        assert_eq!(asd(&[1, 0], &[0, 0], dims, Spacing::default()), None);
    }

    #[test]
    fn distance_transform_without_seeds_is_infinite() {
        let d = squared_distance_transform(&[], Dims::new(2, 2, 2), Spacing::default());
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn undefined_ratios() {
        let c = ConfusionCounts {
            tn: 5,
            ..Default::default()
        };
        assert_eq!(c.dice(), None);
        assert_eq!(c.precision(), None);
        assert_eq!(c.total(), 5);
    }
}
