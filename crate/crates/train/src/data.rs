//! Training cases and the foreground-biased patch sampler.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vessel_core::phantom::{Manifest, ManifestEntry};
use vessel_core::volume::{read_image, read_label};
use vessel_core::{Dims, LabelVolume, Spacing, Volume3D};

use crate::TrainError;

/// Which labels a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Gt,
    Aipl,
    Cipl,
    Srpl,
}

impl LabelSource {
    pub const ALL: [LabelSource; 4] = [Self::Gt, Self::Aipl, Self::Cipl, Self::Srpl];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gt => "gt",
            Self::Aipl => "aipl",
            Self::Cipl => "cipl",
            Self::Srpl => "srpl",
        }
    }

    /// Label file of a case: the manifest's ground truth, or
    /// `{labels_dir}/{case_id}_{source}.vvolh` for generated pseudo-labels.
    pub fn path(self, manifest: &Manifest, entry: &ManifestEntry, labels_dir: &Path) -> PathBuf {
        match self {
            Self::Gt => manifest.resolve(&entry.gt_path),
            _ => labels_dir.join(format!("{}_{}.vvolh", entry.case_id, self.name())),
        }
    }
}

impl std::str::FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown label source {s:?} (expected gt, aipl, cipl or srpl)"))
    }
}

/// Zero-mean, unit-variance intensities (statistics in f64). A constant
/// image maps to all zeros.
pub fn normalize(v: &[f32]) -> Vec<f32> {
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    v.iter().map(|&x| ((x as f64 - mean) * inv) as f32).collect()
}

/// One image with its labels, intensities normalised.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub dims: Dims,
    pub spacing: Spacing,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    /// Indices of non-background voxels, for foreground-centred patches.
    pub foreground: Vec<usize>,
}

impl Case {
    pub fn new(id: impl Into<String>, image: &Volume3D, labels: &LabelVolume) -> Result<Self, TrainError> {
        let id = id.into();
        if image.dims != labels.dims {
            return Err(TrainError::Data(format!(
                "case {id}: image {:?} and labels {:?} differ",
                image.dims, labels.dims
            )));
        }
        let foreground = (0..labels.data.len()).filter(|&i| labels.data[i] != 0).collect();
        Ok(Self {
            id,
            dims: image.dims,
            spacing: image.spacing,
            image: normalize(&image.to_f32()),
            labels: labels.data.clone(),
            foreground,
        })
    }

    /// Copies the patch at `origin` (z, y, x) into `img` and `lab`.
    pub fn patch(&self, origin: [usize; 3], size: [usize; 3], img: &mut Vec<f32>, lab: &mut Vec<u8>) {
        let d = self.dims;
        for z in 0..size[0] {
            for y in 0..size[1] {
                let src = d.index(origin[0] + z, origin[1] + y, origin[2]);
                img.extend_from_slice(&self.image[src..src + size[2]]);
                lab.extend_from_slice(&self.labels[src..src + size[2]]);
            }
        }
    }
}

/// Loads the cases of a manifest with labels from `source`.
pub fn load_cases<'a>(
    manifest: &Manifest,
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
    source: LabelSource,
    labels_dir: &Path,
) -> Result<Vec<Case>, TrainError> {
    entries
        .into_iter()
        .map(|e| {
            let image = read_image(manifest.resolve(&e.image_path))?;
            let labels = read_label(source.path(manifest, e, labels_dir))?;
            Case::new(e.case_id.clone(), &image, &labels)
        })
        .collect()
}

/// Draws patch origins. Even draws are centred (with jitter) on a random
/// foreground voxel, odd draws are uniform, so at least half of all
/// patches contain vessel whenever the case has any.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    rng: ChaCha8Rng,
    size: [usize; 3],
    draws: u64,
}

impl PatchSampler {
    pub fn new(size: [usize; 3], seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            size,
            draws: 0,
        }
    }

    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn origin(&mut self, case: &Case) -> Result<[usize; 3], TrainError> {
        let dims: [usize; 3] = case.dims.into();
        if dims.iter().zip(&self.size).any(|(n, p)| n < p) {
            return Err(TrainError::Data(format!(
                "case {} of size {dims:?} is smaller than the patch {:?}",
                case.id, self.size
            )));
        }
        let fg_draw = self.draws % 2 == 0 && !case.foreground.is_empty();
        self.draws += 1;
        let mut origin = [0; 3];
        if fg_draw {
            let idx = case.foreground[self.rng.random_range(0..case.foreground.len())];
            let (z, y, x) = case.dims.coords(idx);
            for (a, c) in [z, y, x].into_iter().enumerate() {
                let p = self.size[a];
                // the centre voxel lands anywhere in the middle half of the patch
                let offset = p / 4 + self.rng.random_range(0..p.div_ceil(2));
                origin[a] = c.saturating_sub(offset).min(dims[a] - p);
            }
        } else {
            for a in 0..3 {
                origin[a] = self.rng.random_range(0..=dims[a] - self.size[a]);
            }
        }
        Ok(origin)
    }
}
