//! One-way NIfTI-1 import into [`Volume3D`].
//!
//! Only uncompressed single-file `.nii` images are handled. The voxel grid is
//! mapped as x fastest, then y, then z, which coincides with the native zyx
//! layout; `pixdim[1..=3]` becomes the spacing. Orientation beyond axis order
//! is ignored.

use std::fs;
use std::path::Path;

use crate::volume::{Dims, Spacing, Volume3D, VolumeError, VoxelData};

const HEADER_LEN: usize = 348;

fn bad(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::Header {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn import_nifti(path: impl AsRef<Path>) -> Result<Volume3D, VolumeError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_nifti(&bytes).map_err(|reason| bad(path, reason))
}

/// Decodes an in-memory `.nii` file.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume3D, String> {
    if bytes.len() < HEADER_LEN {
        return Err("file shorter than a NIfTI-1 header".into());
    }
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err("gzip-compressed NIfTI is not supported; decompress first".into());
    }
    let little = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => true,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => false,
        _ => return Err("sizeof_hdr is not 348".into()),
    };
    let i16_at = |off: usize| {
        let b = [bytes[off], bytes[off + 1]];
        if little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |off: usize| {
        let b: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    if &bytes[344..347] != b"n+1" {
        return Err("only single-file NIfTI-1 (magic n+1) is supported".into());
    }

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("invalid dim[0] = {ndim}"));
    }
    let dim = |i: usize| -> usize {
        if (i as i16) <= ndim {
            i16_at(40 + 2 * i).max(1) as usize
        } else {
            1
        }
    };
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    if (4..=7).any(|i| dim(i) > 1) {
        return Err("volumes with more than three non-singleton axes are not supported".into());
    }
    let datatype = i16_at(70);
    let pix = |i: usize| f64::from(f32_at(76 + 4 * i)).abs();
    let spacing = Spacing([pix(3), pix(2), pix(1)].map(|s| if s > 0.0 { s } else { 1.0 }));
    let vox_offset = f32_at(108).max(HEADER_LEN as f32 + 4.0) as usize;
    let slope = f32_at(112);
    let inter = f32_at(116);

    let n = nx * ny * nz;
    let elem = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(format!("unsupported NIfTI datatype {other}")),
    };
    let payload = bytes
        .get(vox_offset..vox_offset + n * elem)
        .ok_or_else(|| format!("payload shorter than {} bytes", n * elem))?;

    let raw: Vec<f64> = payload
        .chunks_exact(elem)
        .map(|c| {
            let mut b = [0u8; 8];
            if little {
                b[..elem].copy_from_slice(c);
            } else {
                for (i, &v) in c.iter().rev().enumerate() {
                    b[i] = v;
                }
            }
            match datatype {
                2 => f64::from(b[0]),
                256 => f64::from(b[0] as i8),
                4 => f64::from(i16::from_le_bytes([b[0], b[1]])),
                512 => f64::from(u16::from_le_bytes([b[0], b[1]])),
                8 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                768 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                16 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                _ => f64::from_le_bytes(b),
            }
        })
        .collect();

    let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let dims = Dims::new(nz, ny, nx);
    let data = if datatype == 2 && !scaled {
        VoxelData::U8(raw.iter().map(|&v| v as u8).collect())
    } else {
        let (s, i) = if scaled {
            (f64::from(slope), f64::from(inter))
        } else {
            (1.0, 0.0)
        };
        VoxelData::F32(raw.iter().map(|&v| (v * s + i) as f32).collect())
    };
    Volume3D::new(dims, spacing, data).map_err(|e| e.to_string())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Minimal little-endian NIfTI-1 writer used to build fixtures.
    pub(crate) fn build_nii(nx: i16, ny: i16, nz: i16, pixdim: [f32; 3], datatype: i16, payload: &[u8]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dims = [3i16, nx, ny, nz, 1, 1, 1, 1];
        for (i, d) in dims.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        let pd = [1.0f32, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pd.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn imports_grid_and_spacing() {
        // 3 x 2 x 2 (x, y, z), i16 values equal to their linear index
        let payload: Vec<u8> = (0..12i16).flat_map(|v| v.to_le_bytes()).collect();
        let bytes = build_nii(3, 2, 2, [0.6, 0.7, 0.8], 4, &payload);
        let v = parse_nifti(&bytes).unwrap();
        assert_eq!(v.dims, Dims::new(2, 2, 3));
        assert_eq!(v.spacing.0, [0.8f32 as f64, 0.7f32 as f64, 0.6f32 as f64]);
        // voxel (z=1, y=0, x=2) = 2 + 3 * (0 + 2 * 1)
        assert_eq!(v.data.get_f32(v.dims.index(1, 0, 2)), 8.0);
    }

    #[test]
    fn u8_stays_u8_and_gzip_rejected() {
        let bytes = build_nii(2, 1, 1, [1.0, 1.0, 1.0], 2, &[7, 9]);
        let v = parse_nifti(&bytes).unwrap();
        assert_eq!(v.data, VoxelData::U8(vec![7, 9]));
        assert!(parse_nifti(&[0x1f, 0x8b, 0, 0]).is_err());
        let mut gz = vec![0x1f, 0x8b];
        gz.resize(400, 0);
        assert!(parse_nifti(&gz).unwrap_err().contains("gzip"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = build_nii(4, 4, 4, [1.0, 1.0, 1.0], 16, &[0; 10]);
        assert!(parse_nifti(&bytes).is_err());
    }
}
