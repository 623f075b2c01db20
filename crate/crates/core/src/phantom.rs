//! Procedural vascular phantoms: tubes with a lumen, an enclosing wall, a
//! drifting centerline, optional stenosis and optional bifurcation, plus
//! sparse "expert" labels kept on every k-th axial slice.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{
    write_image, write_label, Dims, LabelVolume, Spacing, Volume3D, VolumeError, BACKGROUND,
    LUMEN, WALL,
};

pub const LUMEN_INTENSITY: f32 = 0.9;
pub const WALL_INTENSITY: f32 = 0.5;
pub const BACKGROUND_INTENSITY: f32 = 0.1;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("vessel violates border clearance at slice {z}: centre ({cy:.2}, {cx:.2}), extent {extent:.2}")]
    Clearance { z: usize, cy: f64, cx: f64, extent: f64 },
    #[error("invalid vessel: {0}")]
    InvalidSpec(String),
    #[error("invalid suite config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stenosis {
    pub center: f64,
    pub width: f64,
    /// Fractional radius reduction at the centre, in [0, 1).
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bifurcation {
    pub split_slice: usize,
    /// In-plane (dy, dx) offsets of the two branches from the parent centerline.
    pub offsets: [(f64, f64); 2],
    /// Slices over which the branches move from the parent centerline out
    /// to their full offsets; 0 splits abruptly.
    #[serde(default)]
    pub ramp: usize,
}

/// Geometry of one vessel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselSpec {
    /// Helix axis (cy, cx) of the centerline.
    pub base: (f64, f64),
    pub drift_amplitude: f64,
    pub drift_period: f64,
    #[serde(default)]
    pub drift_phase: f64,
    pub lumen_radius: f64,
    #[serde(default)]
    pub stenosis: Option<Stenosis>,
    pub wall_thickness: f64,
    /// Change of wall thickness per slice.
    #[serde(default)]
    pub wall_slope: f64,
    #[serde(default)]
    pub bifurcation: Option<Bifurcation>,
}

impl VesselSpec {
    pub fn straight(cy: f64, cx: f64, radius: f64, wall: f64) -> Self {
        Self {
            base: (cy, cx),
            drift_amplitude: 0.0,
            drift_period: 1.0,
            drift_phase: 0.0,
            lumen_radius: radius,
            stenosis: None,
            wall_thickness: wall,
            wall_slope: 0.0,
            bifurcation: None,
        }
    }

    /// Parent centerline at slice z (before any bifurcation offset).
    pub fn center(&self, z: f64) -> (f64, f64) {
        if self.drift_amplitude == 0.0 {
            return self.base;
        }
        let theta = TAU * z / self.drift_period + self.drift_phase;
        (
            self.base.0 + self.drift_amplitude * theta.sin(),
            self.base.1 + self.drift_amplitude * theta.cos(),
        )
    }

    /// Active centerlines on slice z: one, or two past the split slice.
    pub fn centers(&self, z: usize) -> Vec<(f64, f64)> {
        let c = self.center(z as f64);
        match &self.bifurcation {
            Some(b) if z >= b.split_slice => {
                let t = if b.ramp == 0 {
                    1.0
                } else {
                    ((z - b.split_slice) as f64 / b.ramp as f64).min(1.0)
                };
                b.offsets.iter().map(|&(dy, dx)| (c.0 + t * dy, c.1 + t * dx)).collect()
            }
            _ => vec![c],
        }
    }

    pub fn radius(&self, z: usize) -> f64 {
        let mut r = self.lumen_radius;
        if let Some(s) = &self.stenosis {
            let u = (z as f64 - s.center) / s.width;
            r *= 1.0 - s.depth * (-u * u).exp();
        }
        r
    }

    pub fn thickness(&self, z: usize) -> f64 {
        self.wall_thickness + self.wall_slope * z as f64
    }

    pub fn validate(&self, dims: Dims) -> Result<(), PhantomError> {
        if !(self.drift_period > 0.0) {
            return Err(PhantomError::InvalidSpec("drift period must be positive".into()));
        }
        if let Some(s) = &self.stenosis {
            if !(0.0..1.0).contains(&s.depth) || !(s.width > 0.0) {
                return Err(PhantomError::InvalidSpec(format!(
                    "stenosis depth must lie in [0,1) and width be positive, got {s:?}"
                )));
            }
        }
        for z in 0..dims.d {
            let (r, t) = (self.radius(z), self.thickness(z));
            if r < 1.0 {
                return Err(PhantomError::InvalidSpec(format!("lumen radius {r:.3} < 1 at slice {z}")));
            }
            if t < 1.0 {
                return Err(PhantomError::InvalidSpec(format!("wall thickness {t:.3} < 1 at slice {z}")));
            }
            let extent = r + t;
            for (cy, cx) in self.centers(z) {
                let ok = cy - extent >= 0.0
                    && cx - extent >= 0.0
                    && cy + extent <= (dims.h - 1) as f64
                    && cx + extent <= (dims.w - 1) as f64;
                if !ok {
                    return Err(PhantomError::Clearance { z, cy, cx, extent });
                }
            }
        }
        Ok(())
    }
}

/// Image, dense ground truth and the interval-sampled sparse labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub image: Volume3D,
    pub gt: LabelVolume,
    pub sparse: LabelVolume,
}

/// Slices 0, k, 2k, ... below `depth`.
pub fn interval_slices(depth: usize, k: usize) -> Vec<usize> {
    (0..depth).step_by(k.max(1)).collect()
}

fn ramp(d: f64, edge: f64, inside: f32, outside: f32) -> f32 {
    // linear transition one voxel wide, centred on the edge
    let t = (d - edge + 0.5).clamp(0.0, 1.0) as f32;
    inside + (outside - inside) * t
}

pub fn generate_case(
    vessels: &[VesselSpec],
    dims: Dims,
    spacing: Spacing,
    interval: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PhantomCase, PhantomError> {
    if dims.is_empty() || interval == 0 {
        return Err(PhantomError::InvalidConfig(
            "dims and interval must be positive".into(),
        ));
    }
    for v in vessels {
        v.validate(dims)?;
    }
    let mut labels = vec![BACKGROUND; dims.len()];
    let mut intensity = vec![BACKGROUND_INTENSITY; dims.len()];
    for z in 0..dims.d {
        let geo: Vec<(f64, f64, Vec<(f64, f64)>)> = vessels
            .iter()
            .map(|v| (v.radius(z), v.thickness(z), v.centers(z)))
            .collect();
        for y in 0..dims.h {
            for x in 0..dims.w {
                let idx = dims.index(z, y, x);
                let mut class = BACKGROUND;
                let mut value = BACKGROUND_INTENSITY;
                for (r, t, centers) in &geo {
                    for &(cy, cx) in centers {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        if d < *r {
                            class = LUMEN;
                        } else if d < r + t && class != LUMEN {
                            class = WALL;
                        }
                        let v = if d < r + 0.5 {
                            ramp(d, *r, LUMEN_INTENSITY, WALL_INTENSITY)
                        } else {
                            ramp(d, r + t, WALL_INTENSITY, BACKGROUND_INTENSITY)
                        };
                        value = value.max(v);
                    }
                }
                labels[idx] = class;
                intensity[idx] = value;
            }
        }
    }

    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| PhantomError::InvalidConfig(format!("noise sigma: {e}")))?;
        for v in intensity.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let all: Vec<usize> = (0..dims.d).collect();
    let gt = LabelVolume::new(dims, spacing, labels, all)?;
    let sparse = sparsify(&gt, interval);
    let mut image = Volume3D::from_f32(dims, spacing, intensity)?;
    image.intensity_range = Some((f64::from(BACKGROUND_INTENSITY), f64::from(LUMEN_INTENSITY)));
    Ok(PhantomCase { image, gt, sparse })
}

/// Keeps labels only on every `k`-th slice.
pub fn sparsify(gt: &LabelVolume, k: usize) -> LabelVolume {
    let mut sparse = LabelVolume::empty(gt.dims, gt.spacing);
    let annotated = interval_slices(gt.dims.d, k);
    let n = gt.dims.plane_len();
    for &z in &annotated {
        sparse.data[z * n..(z + 1) * n].copy_from_slice(gt.slice_data(z));
    }
    sparse.annotated_slices = annotated;
    sparse
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image_path: String,
    pub gt_path: String,
    pub sparse_path: String,
    pub split: Split,
}

/// Case list with paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PhantomError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PhantomError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries = serde_json::from_str(&text)
            .map_err(|e| PhantomError::InvalidConfig(format!("manifest {}: {e}", path.display())))?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }
}

/// Random case family for [`generate_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_cases: usize,
    /// train:val:test ratio
    pub split: [usize; 3],
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub interval: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub vessels_per_case: usize,
    pub lumen_radius: [f64; 2],
    pub wall_thickness: [f64; 2],
    pub drift_amplitude: [f64; 2],
    pub drift_period: [f64; 2],
    pub stenosis_probability: f64,
    pub stenosis_depth: [f64; 2],
    pub bifurcation_probability: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_cases: 10,
            split: [7, 1, 2],
            dims: [64, 64, 64],
            spacing: [0.6, 0.6, 0.6],
            interval: 4,
            noise_sigma: 0.05,
            seed: 0,
            vessels_per_case: 1,
            lumen_radius: [3.0, 4.5],
            wall_thickness: [1.5, 2.5],
            drift_amplitude: [2.0, 4.0],
            drift_period: [24.0, 48.0],
            stenosis_probability: 0.5,
            stenosis_depth: [0.3, 0.5],
            bifurcation_probability: 0.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidConfig(m.into()));
        if self.n_cases == 0 {
            return bad("n_cases must be positive");
        }
        if self.split.iter().sum::<usize>() == 0 {
            return bad("split ratio must not be all zero");
        }
        if self.interval == 0 || self.dims.contains(&0) {
            return bad("interval and dims must be positive");
        }
        if !Spacing(self.spacing).is_valid() {
            return bad("spacing must be positive");
        }
        if !(1..=2).contains(&self.vessels_per_case) {
            return bad("vessels_per_case must be 1 or 2");
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims::from(self.dims)
    }

    /// Per-case split labels by largest remainder over the ratio.
    pub fn assignments(&self) -> Vec<Split> {
        let total: usize = self.split.iter().sum();
        let n = self.n_cases;
        let mut counts: Vec<usize> = self.split.iter().map(|r| n * r / total).collect();
        let mut rems: Vec<(usize, usize)> = self
            .split
            .iter()
            .enumerate()
            .map(|(i, r)| (n * r % total, i))
            .collect();
        rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut left = n - counts.iter().sum::<usize>();
        for (_, i) in rems {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        [Split::Train, Split::Val, Split::Test]
            .iter()
            .zip(counts)
            .flat_map(|(s, c)| std::iter::repeat_n(*s, c))
            .collect()
    }

    /// Draws the vessels of case `index` from its own seeded stream.
    pub fn sample_vessels(&self, index: usize) -> Vec<VesselSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index as u64));
        let dims = self.dims();
        let lanes = self.vessels_per_case;
        (0..lanes)
            .map(|lane| {
                let radius = uniform(&mut rng, self.lumen_radius);
                let wall = uniform(&mut rng, self.wall_thickness);
                let amp = uniform(&mut rng, self.drift_amplitude);
                let period = uniform(&mut rng, self.drift_period);
                let phase = rng.random_range(0.0..TAU);
                let stenosis = (rng.random::<f64>() < self.stenosis_probability).then(|| Stenosis {
                    center: rng.random_range(0.25..0.75) * dims.d as f64,
                    width: rng.random_range(3.0..6.0),
                    depth: uniform(&mut rng, self.stenosis_depth),
                });
                let extent = radius + wall;
                let bifurcation = (rng.random::<f64>() < self.bifurcation_probability).then(|| {
                    let spread = extent + 1.0;
                    Bifurcation {
                        split_slice: (rng.random_range(0.4..0.7) * dims.d as f64) as usize,
                        offsets: [(0.0, -spread), (0.0, spread)],
                        // half a wall per slice keeps the lumen enclosed
                        ramp: (2.0 * spread / wall).ceil() as usize,
                    }
                });
                let lane_w = dims.w as f64 / lanes as f64;
                let cx = lane_w * (lane as f64 + 0.5);
                let cy = dims.h as f64 / 2.0;
                // shrink drift until the helix and any branches clear the borders
                let mut spec = VesselSpec {
                    base: (cy, cx),
                    drift_amplitude: amp,
                    drift_period: period,
                    drift_phase: phase,
                    lumen_radius: radius,
                    stenosis,
                    wall_thickness: wall,
                    wall_slope: 0.0,
                    bifurcation,
                };
                while spec.validate(dims).is_err() && spec.drift_amplitude > 0.0 {
                    spec.drift_amplitude = (spec.drift_amplitude - 0.25).max(0.0);
                }
                spec
            })
            .collect()
    }
}

/// Writes every case plus `manifest.json` into `out_dir`.
pub fn generate_suite(config: &SuiteConfig, out_dir: impl AsRef<Path>) -> Result<Manifest, PhantomError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|source| PhantomError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let dims = config.dims();
    let spacing = Spacing(config.spacing);
    let mut entries = Vec::with_capacity(config.n_cases);
    for (i, split) in config.assignments().into_iter().enumerate() {
        let case_id = format!("case_{i:03}");
        let vessels = config.sample_vessels(i);
        let seed = config.seed.wrapping_add(i as u64);
        let case = generate_case(&vessels, dims, spacing, config.interval, config.noise_sigma, seed)?;
        let entry = ManifestEntry {
            image_path: format!("{case_id}_image.vvolh"),
            gt_path: format!("{case_id}_gt.vvolh"),
            sparse_path: format!("{case_id}_sparse.vvolh"),
            case_id,
            split,
        };
        write_image(&case.image, out_dir.join(&entry.image_path))?;
        write_label(&case.gt, out_dir.join(&entry.gt_path))?;
        write_label(&case.sparse, out_dir.join(&entry.sparse_path))?;
        entries.push(entry);
    }
    let manifest_path = out_dir.join(Manifest::FILE_NAME);
    let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|source| PhantomError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(Manifest {
        root: out_dir.to_path_buf(),
        entries,
    })
}
