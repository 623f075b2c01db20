//! Segmenter-refined pseudo-labels.
//!
//! Every C-IPL slice is re-segmented by a promptable 2D segmenter. Each
//! vessel component contributes a box prompt that is jittered `K` times with
//! size-adaptive uniform noise; the `K` masks are majority-voted. Lumen and
//! complete vessel are prompted separately, and the wall is recovered as
//! vessel minus lumen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::components::{connected_components, dilate_disk, Component, Connectivity};
use crate::labelprop::vessel_mask;
use crate::volume::{LabelVolume, Plane, Volume3D, VolumeError, BACKGROUND, LUMEN, WALL};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("segmenter failed: {0}")]
    Failed(String),
    #[error("segmenter returned a {got_h}x{got_w} mask for a {h}x{w} slice")]
    Shape {
        h: usize,
        w: usize,
        got_h: usize,
        got_w: usize,
    },
}

#[derive(Debug, Error)]
pub enum SrplError {
    #[error("slice {z}, component {component}: {source}")]
    Segment {
        z: usize,
        component: usize,
        #[source]
        source: SegmentError,
    },
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    MaskShape(usize, usize, usize, usize),
    #[error("vote threshold {tau} outside 1..={k}")]
    Threshold { tau: usize, k: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Axis-aligned box on one axial slice. Pixel `(y, x)` covers
/// `[x, x+1) x [y, y+1)`, so a component's tight box is `(min, max + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox2D {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, SrplError> {
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(SrplError::InvalidBox(format!("({x0}, {y0}, {x1}, {y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn of_component(c: &Component) -> Self {
        let (y0, x0, y1, x1) = c.bounds;
        Self {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: (x1 + 1) as f64,
            y1: (y1 + 1) as f64,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).abs()
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).abs()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.y0 + self.y1) / 2.0, (self.x0 + self.x1) / 2.0)
    }

    pub fn expand(&self, by: f64) -> Self {
        Self {
            x0: self.x0 - by,
            y0: self.y0 - by,
            x1: self.x1 + by,
            y1: self.y1 + by,
        }
    }

    /// Whether the centre of pixel (y, x) lies inside the box.
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationParams {
    /// Coefficient `s` in `sigma = min(w, h) * s`.
    pub scale: f64,
    /// Hard cap `M` on the noise amplitude, in voxels.
    pub max_noise: f64,
    /// Ensemble size `K`.
    pub ensemble: usize,
    /// Minimum number of votes `tau` for a foreground pixel.
    pub vote_threshold: usize,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self {
            scale: 0.1,
            max_noise: 5.0,
            ensemble: 10,
            vote_threshold: 5,
        }
    }
}

impl PerturbationParams {
    pub fn validate(&self) -> Result<(), SrplError> {
        if !(self.scale > 0.0) || !(self.max_noise > 0.0) {
            return Err(SrplError::Params("scale and max_noise must be positive".into()));
        }
        if self.ensemble == 0 {
            return Err(SrplError::Params("ensemble size must be at least 1".into()));
        }
        if !(1..=self.ensemble).contains(&self.vote_threshold) {
            return Err(SrplError::Threshold {
                tau: self.vote_threshold,
                k: self.ensemble,
            });
        }
        Ok(())
    }

    /// `(sigma, delta)` for a box: `sigma = min(w,h)*s`, `delta = min(M, 5 sigma)`.
    pub fn noise_bound(&self, b: &BoundingBox2D) -> (f64, f64) {
        let sigma = b.width().min(b.height()) * self.scale;
        (sigma, self.max_noise.min(5.0 * sigma))
    }
}

/// Offsets are drawn on a 2^-24 voxel grid so that shifting a box with
/// grid-aligned corners keeps its width and height bit-exact.
const OFFSET_QUANTUM: f64 = 1.0 / (1u64 << 24) as f64;

/// Uniform draw on `[-delta, delta]`, truncated towards zero onto the offset grid.
pub fn sample_offset<R: Rng + ?Sized>(delta: f64, rng: &mut R) -> f64 {
    if delta <= 0.0 {
        return 0.0;
    }
    let e: f64 = rng.random_range(-delta..=delta);
    (e / OFFSET_QUANTUM).trunc() * OFFSET_QUANTUM
}

/// Shifts the box by `(eps_x, eps_y)`, each uniform on `[-delta, delta]`.
pub fn perturb_box<R: Rng + ?Sized>(b: &BoundingBox2D, p: &PerturbationParams, rng: &mut R) -> BoundingBox2D {
    let (_, delta) = p.noise_bound(b);
    let ex = sample_offset(delta, rng);
    let ey = sample_offset(delta, rng);
    BoundingBox2D {
        x0: b.x0 + ex,
        y0: b.y0 + ey,
        x1: b.x1 + ex,
        y1: b.y1 + ey,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Foreground,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

/// Prompts for one segmenter call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSet {
    pub points: Vec<PointPrompt>,
    pub bbox: Option<BoundingBox2D>,
    pub prior_mask: Option<Plane<u8>>,
}

impl PromptSet {
    pub fn with_box(b: BoundingBox2D) -> Self {
        Self {
            bbox: Some(b),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.bbox.is_none() && self.prior_mask.is_none()
    }
}

/// Which structure a prompt asks for: the complete vessel (lumen and wall
/// merged) or the lumen alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Vessel,
    Lumen,
}

/// An axial image slice handed to a segmenter.
#[derive(Debug, Clone, Copy)]
pub struct SliceInput<'a> {
    pub z: usize,
    pub image: &'a Plane<f32>,
}

/// Promptable 2D segmenter. Implementations must return a 0/1 mask with the
/// slice's shape.
pub trait Segmenter: Send + Sync {
    fn segment(
        &self,
        input: SliceInput<'_>,
        prompts: &PromptSet,
        target: Structure,
    ) -> Result<Plane<u8>, SegmentError>;
}

fn checked_segment(
    seg: &dyn Segmenter,
    input: SliceInput<'_>,
    prompts: &PromptSet,
    target: Structure,
) -> Result<Plane<u8>, SegmentError> {
    let mut m = seg.segment(input, prompts, target)?;
    if m.h != input.image.h || m.w != input.image.w {
        return Err(SegmentError::Shape {
            h: input.image.h,
            w: input.image.w,
            got_h: m.h,
            got_w: m.w,
        });
    }
    for v in m.data.iter_mut() {
        *v = u8::from(*v != 0);
    }
    Ok(m)
}

/// Pixel is foreground iff at least `tau` masks vote for it.
pub fn vote_masks(masks: &[Plane<u8>], tau: usize) -> Result<Plane<u8>, SrplError> {
    let k = masks.len();
    if !(1..=k).contains(&tau) {
        return Err(SrplError::Threshold { tau, k });
    }
    let (h, w) = (masks[0].h, masks[0].w);
    if let Some(m) = masks.iter().find(|m| m.h != h || m.w != w) {
        return Err(SrplError::MaskShape(h, w, m.h, m.w));
    }
    let mut votes = vec![0usize; h * w];
    for m in masks {
        for (v, &px) in votes.iter_mut().zip(&m.data) {
            *v += usize::from(px != 0);
        }
    }
    Ok(Plane::from_vec(
        h,
        w,
        votes.into_iter().map(|v| u8::from(v >= tau)).collect(),
    ))
}

/// Complete-vessel mask: lumen or wall.
pub fn merge_labels(label: &Plane<u8>) -> Plane<u8> {
    vessel_mask(label)
}

/// Wall as the set difference `merged \ lumen`.
pub fn split_wall(merged: &Plane<u8>, lumen: &Plane<u8>) -> Plane<u8> {
    Plane::from_vec(
        merged.h,
        merged.w,
        merged
            .data
            .iter()
            .zip(&lumen.data)
            .map(|(&m, &l)| u8::from(m != 0 && l == 0))
            .collect(),
    )
}

/// Deterministic per-(seed, z, component, role) random stream.
pub fn stream_seed(seed: u64, z: usize, component: usize, role: u64) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [z as u64, component as u64, role] {
        x = x.wrapping_add(v.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
        x = x.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        x ^= x >> 29;
    }
    x
}

fn ensemble_mask(
    seg: &dyn Segmenter,
    input: SliceInput<'_>,
    bbox: &BoundingBox2D,
    target: Structure,
    p: &PerturbationParams,
    rng: &mut ChaCha8Rng,
) -> Result<Plane<u8>, SegmentError> {
    let masks = (0..p.ensemble)
        .map(|_| {
            let prompts = PromptSet::with_box(perturb_box(bbox, p, rng));
            checked_segment(seg, input, &prompts, target)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(vote_masks(&masks, p.vote_threshold).expect("validated threshold"))
}

/// Re-segments every vessel component of a C-IPL slice.
pub fn refine_slice(
    input: SliceInput<'_>,
    cipl_slice: &Plane<u8>,
    segmenter: &dyn Segmenter,
    p: &PerturbationParams,
    seed: u64,
) -> Result<Plane<u8>, SrplError> {
    p.validate()?;
    if !cipl_slice.same_shape(input.image) {
        return Err(SrplError::MaskShape(input.image.h, input.image.w, cipl_slice.h, cipl_slice.w));
    }
    let (h, w) = (cipl_slice.h, cipl_slice.w);
    let mut out = Plane::new(h, w);
    let comps = connected_components(&merge_labels(cipl_slice), Connectivity::Eight);
    for (ci, comp) in comps.iter().enumerate() {
        let ctx = |source| SrplError::Segment {
            z: input.z,
            component: ci,
            source,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, input.z, ci, 0));
        let merged = ensemble_mask(
            segmenter,
            input,
            &BoundingBox2D::of_component(comp),
            Structure::Vessel,
            p,
            &mut rng,
        )
        .map_err(ctx)?;

        let lumen_px: Vec<usize> = comp
            .pixels
            .iter()
            .copied()
            .filter(|&q| cipl_slice.data[q] == LUMEN)
            .collect();
        let lumen = if lumen_px.is_empty() {
            Plane::new(h, w)
        } else {
            let mut lm = Plane::new(h, w);
            for &q in &lumen_px {
                lm.data[q] = 1;
            }
            let lumen_box = connected_components(&lm, Connectivity::Eight)
                .iter()
                .map(BoundingBox2D::of_component)
                .reduce(|a, b| BoundingBox2D {
                    x0: a.x0.min(b.x0),
                    y0: a.y0.min(b.y0),
                    x1: a.x1.max(b.x1),
                    y1: a.y1.max(b.y1),
                })
                .expect("non-empty lumen");
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, input.z, ci, 1));
            ensemble_mask(segmenter, input, &lumen_box, Structure::Lumen, p, &mut rng).map_err(ctx)?
        };

        for q in 0..h * w {
            if merged.data[q] == 0 {
                continue;
            }
            if lumen.data[q] != 0 {
                out.data[q] = LUMEN;
            } else if out.data[q] != LUMEN {
                out.data[q] = WALL;
            }
        }
    }
    Ok(out)
}

/// Fuses expert slices (verbatim) with refined C-IPL slices.
pub fn refine_volume(
    image: &Volume3D,
    cipl: &LabelVolume,
    expert: &LabelVolume,
    segmenter: &dyn Segmenter,
    p: &PerturbationParams,
    seed: u64,
) -> Result<LabelVolume, SrplError> {
    if image.dims != cipl.dims {
        return Err(VolumeError::DimMismatch(image.dims, cipl.dims).into());
    }
    cipl.same_grid(expert)?;
    p.validate()?;
    let dims = cipl.dims;
    let n = dims.plane_len();
    let mut out = LabelVolume::empty(dims, cipl.spacing);
    let mut labeled = vec![false; dims.d];
    for &z in &expert.annotated_slices {
        out.data[z * n..(z + 1) * n].copy_from_slice(expert.slice_data(z));
        labeled[z] = true;
    }
    for &z in &cipl.annotated_slices {
        if expert.is_annotated(z) {
            continue;
        }
        let slice = cipl.extract_slice(z)?;
        labeled[z] = true;
        if slice.data.iter().all(|&v| v == BACKGROUND) {
            continue;
        }
        let img = image.extract_slice(z)?;
        let refined = refine_slice(SliceInput { z, image: &img }, &slice, segmenter, p, seed)?;
        out.data[z * n..(z + 1) * n].copy_from_slice(&refined.data);
    }
    out.annotated_slices = (0..dims.d).filter(|&z| labeled[z]).collect();
    Ok(out)
}

/// Outcome of [`iterative_prompt_refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub mask: Plane<u8>,
    pub segmenter_calls: usize,
    /// Error-pixel count (prediction XOR reference) after each call.
    pub error_counts: Vec<usize>,
}

fn xor(a: &Plane<u8>, b: &Plane<u8>) -> Plane<u8> {
    Plane::from_vec(
        a.h,
        a.w,
        a.data.iter().zip(&b.data).map(|(&x, &y)| u8::from((x != 0) != (y != 0))).collect(),
    )
}

/// Multi-prompt refinement against a reference mask: a random foreground
/// point or the reference box first, then one corrective point per round
/// sampled from the largest error region, with the previous prediction as
/// the mask prompt.
pub fn iterative_prompt_refine<R: Rng + ?Sized>(
    input: SliceInput<'_>,
    reference: &Plane<u8>,
    segmenter: &dyn Segmenter,
    target: Structure,
    rounds: usize,
    rng: &mut R,
) -> Result<IterativeOutcome, SrplError> {
    if rounds == 0 {
        return Err(SrplError::Params("at least one round is required".into()));
    }
    let fg: Vec<usize> = (0..reference.data.len()).filter(|&q| reference.data[q] != 0).collect();
    if fg.is_empty() {
        return Err(SrplError::Params("reference mask has no foreground".into()));
    }
    let w = reference.w;
    let ctx = |source| SrplError::Segment {
        z: input.z,
        component: 0,
        source,
    };

    let mut prompts = PromptSet::default();
    if rng.random_bool(0.5) {
        let q = fg[rng.random_range(0..fg.len())];
        prompts.points.push(PointPrompt {
            x: (q % w) as f64 + 0.5,
            y: (q / w) as f64 + 0.5,
            label: PointLabel::Foreground,
        });
    } else {
        let comps = connected_components(reference, Connectivity::Eight);
        let b = comps
            .iter()
            .map(BoundingBox2D::of_component)
            .reduce(|a, b| BoundingBox2D {
                x0: a.x0.min(b.x0),
                y0: a.y0.min(b.y0),
                x1: a.x1.max(b.x1),
                y1: a.y1.max(b.y1),
            })
            .expect("non-empty reference");
        prompts.bbox = Some(b);
    }
    let mut pred = checked_segment(segmenter, input, &prompts, target).map_err(ctx)?;
    let mut calls = 1;
    let mut error_counts = vec![xor(&pred, reference).count_nonzero()];

    for _ in 1..rounds {
        let err = xor(&pred, reference);
        if err.count_nonzero() == 0 {
            break;
        }
        let comps = connected_components(&err, Connectivity::Eight);
        let largest = comps
            .iter()
            .reduce(|a, b| if b.len() > a.len() { b } else { a })
            .expect("non-empty error");
        let q = largest.pixels[rng.random_range(0..largest.len())];
        prompts.points.push(PointPrompt {
            x: (q % w) as f64 + 0.5,
            y: (q / w) as f64 + 0.5,
            label: if reference.data[q] != 0 {
                PointLabel::Foreground
            } else {
                PointLabel::Background
            },
        });
        prompts.prior_mask = Some(pred.clone());
        pred = checked_segment(segmenter, input, &prompts, target).map_err(ctx)?;
        calls += 1;
        error_counts.push(xor(&pred, reference).count_nonzero());
    }
    Ok(IterativeOutcome {
        mask: pred,
        segmenter_calls: calls,
        error_counts,
    })
}

fn structure_mask(labels: &[u8], h: usize, w: usize, target: Structure) -> Plane<u8> {
    Plane::from_vec(
        h,
        w,
        labels
            .iter()
            .map(|&v| match target {
                Structure::Vessel => u8::from(v != BACKGROUND),
                Structure::Lumen => u8::from(v == LUMEN),
            })
            .collect(),
    )
}

/// Returns the ground-truth component best matching the prompts, optionally
/// dilated to mimic an imperfect model.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    pub gt: LabelVolume,
    pub dilate_radius: usize,
}

impl OracleSegmenter {
    pub fn new(gt: LabelVolume, dilate_radius: usize) -> Self {
        Self { gt, dilate_radius }
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(
        &self,
        input: SliceInput<'_>,
        prompts: &PromptSet,
        target: Structure,
    ) -> Result<Plane<u8>, SegmentError> {
        let dims = self.gt.dims;
        if input.z >= dims.d || input.image.h != dims.h || input.image.w != dims.w {
            return Err(SegmentError::Failed(format!(
                "slice {} ({}x{}) is outside the oracle's ground truth {:?}",
                input.z, input.image.h, input.image.w, dims
            )));
        }
        let (h, w) = (dims.h, dims.w);
        let truth = structure_mask(self.gt.slice_data(input.z), h, w, target);
        let comps = connected_components(&truth, Connectivity::Eight);
        let mut chosen: Vec<usize> = Vec::new();
        if let Some(b) = &prompts.bbox {
            let best = comps
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let overlap = c.pixels.iter().filter(|&&q| b.contains_pixel(q / w, q % w)).count();
                    (overlap, i)
                })
                .filter(|&(o, _)| o > 0)
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            chosen.extend(best.map(|(_, i)| i));
        } else if !prompts.points.is_empty() {
            for p in prompts.points.iter().filter(|p| p.label == PointLabel::Foreground) {
                let (y, x) = (p.y.floor() as usize, p.x.floor() as usize);
                if let Some(i) = comps.iter().position(|c| c.pixels.binary_search(&(y * w + x)).is_ok()) {
                    chosen.push(i);
                }
            }
        } else if let Some(prior) = &prompts.prior_mask {
            chosen.extend(
                (0..comps.len()).filter(|&i| comps[i].pixels.iter().any(|&q| prior.data[q] != 0)),
            );
        }
        let mut out = Plane::new(h, w);
        for i in chosen {
            for &q in &comps[i].pixels {
                out.data[q] = 1;
            }
        }
        Ok(dilate_disk(&out, self.dilate_radius))
    }
}

/// Intensity threshold inside the (expanded) box, keeping the connected
/// region under the box centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSegmenter {
    pub vessel_level: f32,
    pub lumen_level: f32,
    pub margin: f64,
}

impl Default for ThresholdSegmenter {
    fn default() -> Self {
        // midpoints between background/wall and wall/lumen phantom intensities
        Self {
            vessel_level: 0.3,
            lumen_level: 0.7,
            margin: 2.0,
        }
    }
}

impl Segmenter for ThresholdSegmenter {
    fn segment(
        &self,
        input: SliceInput<'_>,
        prompts: &PromptSet,
        target: Structure,
    ) -> Result<Plane<u8>, SegmentError> {
        let img = input.image;
        let (h, w) = (img.h, img.w);
        let level = match target {
            Structure::Vessel => self.vessel_level,
            Structure::Lumen => self.lumen_level,
        };
        let region = match (&prompts.bbox, prompts.points.first()) {
            (Some(b), _) => *b,
            (None, Some(p)) => BoundingBox2D {
                x0: p.x - 0.5,
                y0: p.y - 0.5,
                x1: p.x + 0.5,
                y1: p.y + 0.5,
            },
            (None, None) => {
                return Err(SegmentError::Failed("threshold segmenter needs a box or point".into()))
            }
        };
        let area = region.expand(self.margin);
        let mut fg = Plane::new(h, w);
        for y in 0..h {
            for x in 0..w {
                if area.contains_pixel(y, x) && img.get(y, x) >= level {
                    fg.set(y, x, 1);
                }
            }
        }
        let comps = connected_components(&fg, Connectivity::Eight);
        let (cy, cx) = region.center();
        let centre = (cy.floor().max(0.0) as usize).min(h - 1) * w + (cx.floor().max(0.0) as usize).min(w - 1);
        let pick = comps
            .iter()
            .find(|c| c.pixels.binary_search(&centre).is_ok())
            .or_else(|| comps.iter().reduce(|a, b| if b.len() > a.len() { b } else { a }));
        Ok(pick.map(|c| c.to_mask(h, w)).unwrap_or_else(|| Plane::new(h, w)))
    }
}
