//! Sliding-window inference over whole volumes.

use dbfunet::{DbfUNet, Tensor};
use vessel_core::{LabelVolume, Volume3D};

use crate::data::normalize;
use crate::TrainError;

/// Tile start positions along one axis of length `n` (>= `patch`): a
/// regular grid with the given stride plus a final tile flush with the end.
pub fn tile_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(n >= patch && stride > 0);
    let mut s: Vec<usize> = (0..=n - patch).step_by(stride).collect();
    if *s.last().unwrap() != n - patch {
        s.push(n - patch);
    }
    s
}

/// Stride giving `overlap` fractional overlap between neighbouring tiles.
pub fn tile_stride(patch: usize, overlap: f64) -> usize {
    ((patch as f64 * (1.0 - overlap)).round() as usize).clamp(1, patch)
}

/// Mean class logits over overlapping tiles, (C, D, H, W) flattened.
/// Volumes smaller than a tile are padded with zeros (the normalised mean
/// intensity) and cropped back.
pub fn infer_logits(model: &DbfUNet, image: &Volume3D, patch: [usize; 3], overlap: f64) -> Result<Vec<f32>, TrainError> {
    let m = model.config.patch_multiple();
    if patch.iter().any(|&p| p == 0 || p % m != 0) {
        return Err(TrainError::Config(format!("tile {patch:?} must be positive multiples of {m}")));
    }
    let dims: [usize; 3] = image.dims.into();
    let padded: [usize; 3] = [0, 1, 2].map(|a| dims[a].max(patch[a]));
    let src = normalize(&image.to_f32());
    let mut vol = vec![0.0f32; padded.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let s = (z * dims[1] + y) * dims[2];
            let d = (z * padded[1] + y) * padded[2];
            vol[d..d + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
        }
    }
    let classes = model.config.num_classes;
    let np: usize = padded.iter().product();
    let mut sum = vec![0.0f32; classes * np];
    let mut count = vec![0u32; np];
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| tile_starts(padded[a], patch[a], tile_stride(patch[a], overlap)))
        .collect();
    let tv: usize = patch.iter().product();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let mut tile = Vec::with_capacity(tv);
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let s = ((z0 + z) * padded[1] + y0 + y) * padded[2] + x0;
                        tile.extend_from_slice(&vol[s..s + patch[2]]);
                    }
                }
                let x = Tensor::from_vec(&[1, 1, patch[0], patch[1], patch[2]], tile)?;
                let y = model.forward(&x)?;
                for c in 0..classes {
                    let yc = &y.data()[c * tv..(c + 1) * tv];
                    for z in 0..patch[0] {
                        for yy in 0..patch[1] {
                            let d = ((z0 + z) * padded[1] + y0 + yy) * padded[2] + x0;
                            let s = (z * patch[1] + yy) * patch[2];
                            for (o, &v) in sum[c * np + d..c * np + d + patch[2]].iter_mut().zip(&yc[s..s + patch[2]]) {
                                *o += v;
                            }
                            if c == 0 {
                                count[d..d + patch[2]].iter_mut().for_each(|n| *n += 1);
                            }
                        }
                    }
                }
            }
        }
    }
    let n: usize = dims.iter().product();
    let mut out = vec![0.0f32; classes * n];
    for c in 0..classes {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let s = (z * padded[1] + y) * padded[2];
                let d = (z * dims[1] + y) * dims[2];
                for x in 0..dims[2] {
                    out[c * n + d + x] = sum[c * np + s + x] / count[s + x] as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel argmax of class-major logits; ties go to the lower class.
pub fn argmax_classes(logits: &[f32], classes: usize) -> Vec<u8> {
    let n = logits.len() / classes;
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * n + i] > logits[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Segments a whole volume; every slice of the result counts as labelled.
pub fn infer(model: &DbfUNet, image: &Volume3D, patch: [usize; 3], overlap: f64) -> Result<LabelVolume, TrainError> {
    let logits = infer_logits(model, image, patch, overlap)?;
    let labels = argmax_classes(&logits, model.config.num_classes);
    Ok(LabelVolume::new(
        image.dims,
        image.spacing,
        labels,
        (0..image.dims.d).collect(),
    )?)
}
