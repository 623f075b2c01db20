//! A small trainable promptable 2D segmenter, standing in for a fine-tuned
//! foundation model in the refinement pipeline.
//!
//! It sees a square window around the prompt. Input channels: normalised
//! image, box mask, prior mask, foreground points, background points and a
//! structure flag (1 = lumen). Outputs are per-pixel logits plus an IoU
//! estimate, trained with [`prompt_loss`].

use dbfunet::blocks::{Conv, Pointwise};
use dbfunet::tensor::Real;
use dbfunet::{Adam, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vessel_core::components::{connected_components, dilate_disk, Connectivity};
use vessel_core::srpl::{
    perturb_box, BoundingBox2D, PerturbationParams, PointLabel, PointPrompt, PromptSet, SegmentError, Segmenter,
    SliceInput, Structure,
};
use vessel_core::volume::{BACKGROUND, LUMEN};
use vessel_core::{LabelVolume, Plane, Volume3D};

use crate::loss::{prompt_loss, PromptLossConfig, PromptLossParts};
use crate::TrainError;

const IN_CHANNELS: usize = 6;
const POINT_RADIUS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptNetConfig {
    pub width: usize,
    /// Side of the square window, a multiple of 2.
    pub window: usize,
}

impl Default for PromptNetConfig {
    fn default() -> Self {
        Self { width: 16, window: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct PromptNet {
    pub config: PromptNetConfig,
    pub store: ParamStore,
    c0: Conv,
    c1: Conv,
    c2: Conv,
    c3: Conv,
    out: Pointwise,
    iou_w: ParamId,
    iou_b: ParamId,
}

impl PromptNet {
    pub fn new(config: PromptNetConfig, seed: u64) -> Result<Self, TrainError> {
        if config.width == 0 || config.window < 4 || config.window % 2 != 0 {
            return Err(TrainError::Config(format!("bad prompt net config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let c0 = Conv::dense(&mut store, "c0", IN_CHANNELS, w, 3, &mut rng);
        let c1 = Conv::dense(&mut store, "c1", w, w, 3, &mut rng);
        let c2 = Conv::dense(&mut store, "c2", w, w, 3, &mut rng);
        let c3 = Conv::dense(&mut store, "c3", w, w, 3, &mut rng);
        let out = Pointwise::new(&mut store, "out", w, 1, true, &mut rng);
        let iou_w = store.add("iou.weight", Tensor::zeros(&[1, 3 * w]));
        let iou_b = store.add("iou.bias", Tensor::full(&[1], 0.5));
        Ok(Self {
            config,
            store,
            c0,
            c1,
            c2,
            c3,
            out,
            iou_w,
            iou_b,
        })
    }

    /// `x` is (B, 6, 1, S, S); returns logits (B, 1, 1, S, S) and IoU
    /// estimates (B, 1).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let s = g.shape(x)[3..].to_vec();
        let h0 = self.c0.forward(g, store, x);
        let h0 = g.gelu(h0);
        let h1 = self.c1.forward(g, store, h0);
        let h1 = g.gelu(h1);
        let p = g.avgpool2(h1);
        let h2 = self.c2.forward(g, store, p);
        let h2 = g.gelu(h2);
        let u = g.upsample2(h2, [1, s[0], s[1]]);
        let m = g.add(h1, u);
        let h3 = self.c3.forward(g, store, m);
        let h3 = g.gelu(h3);
        let logits = self.out.forward(g, store, h3);
        let stats = g.channel_stats(h3, T::of(1e-6));
        let w = g.param(store, self.iou_w);
        let b = g.param(store, self.iou_b);
        let iou = g.linear(stats, w, b);
        (logits, iou)
    }

    /// Top-left corner (y, x) of the window centred on `centre`.
    fn window_origin(&self, centre: (f64, f64)) -> (isize, isize) {
        let half = (self.config.window / 2) as isize;
        (centre.0.floor() as isize - half, centre.1.floor() as isize - half)
    }

    /// Builds the six input channels of one window.
    fn encode(&self, image: &Plane<f32>, prompts: &PromptSet, target: Structure, origin: (isize, isize)) -> Vec<f32> {
        let s = self.config.window;
        let n = s * s;
        let mut x = vec![0.0f32; IN_CHANNELS * n];
        let norm = crate::data::normalize(&image.data);
        let inside = |y: isize, xx: isize| y >= 0 && xx >= 0 && (y as usize) < image.h && (xx as usize) < image.w;
        for wy in 0..s {
            for wx in 0..s {
                let (y, xx) = (origin.0 + wy as isize, origin.1 + wx as isize);
                let i = wy * s + wx;
                if inside(y, xx) {
                    let (y, xx) = (y as usize, xx as usize);
                    x[i] = norm[y * image.w + xx];
                    if let Some(b) = &prompts.bbox {
                        x[n + i] = f32::from(u8::from(b.contains_pixel(y, xx)));
                    }
                    if let Some(m) = &prompts.prior_mask {
                        x[2 * n + i] = f32::from(u8::from(m.get(y, xx) != 0));
                    }
                }
                let (cy, cx) = (y as f64 + 0.5, xx as f64 + 0.5);
                for p in &prompts.points {
                    if (p.y - cy).hypot(p.x - cx) <= POINT_RADIUS {
                        let ch = if p.label == PointLabel::Foreground { 3 } else { 4 };
                        x[ch * n + i] = 1.0;
                    }
                }
                if target == Structure::Lumen {
                    x[5 * n + i] = 1.0;
                }
            }
        }
        x
    }

    fn centre_of(prompts: &PromptSet) -> Option<(f64, f64)> {
        if let Some(b) = &prompts.bbox {
            return Some(b.center());
        }
        let fg: Vec<&PointPrompt> = prompts.points.iter().filter(|p| p.label == PointLabel::Foreground).collect();
        let pts = if fg.is_empty() { prompts.points.iter().collect() } else { fg };
        if !pts.is_empty() {
            let n = pts.len() as f64;
            return Some((pts.iter().map(|p| p.y).sum::<f64>() / n, pts.iter().map(|p| p.x).sum::<f64>() / n));
        }
        let m = prompts.prior_mask.as_ref()?;
        let on: Vec<usize> = (0..m.data.len()).filter(|&i| m.data[i] != 0).collect();
        if on.is_empty() {
            return None;
        }
        let n = on.len() as f64;
        Some((
            on.iter().map(|&i| (i / m.w) as f64 + 0.5).sum::<f64>() / n,
            on.iter().map(|&i| (i % m.w) as f64 + 0.5).sum::<f64>() / n,
        ))
    }

    /// Mask and IoU estimate for one prompt set.
    pub fn predict(&self, image: &Plane<f32>, prompts: &PromptSet, target: Structure) -> Option<(Plane<u8>, f64)> {
        let centre = Self::centre_of(prompts)?;
        let origin = self.window_origin(centre);
        let s = self.config.window;
        let x = Tensor::from_vec(&[1, IN_CHANNELS, 1, s, s], self.encode(image, prompts, target, origin)).unwrap();
        let mut g = Graph::inference();
        let xv = g.input(x);
        let (logits, iou) = self.forward(&mut g, &self.store, xv);
        let mut out = Plane::new(image.h, image.w);
        let l = g.value(logits).data();
        for wy in 0..s {
            for wx in 0..s {
                let (y, xx) = (origin.0 + wy as isize, origin.1 + wx as isize);
                if y >= 0 && xx >= 0 && (y as usize) < image.h && (xx as usize) < image.w && l[wy * s + wx] > 0.0 {
                    out.set(y as usize, xx as usize, 1);
                }
            }
        }
        Some((out, g.value(iou).data()[0] as f64))
    }
}

impl Segmenter for PromptNet {
    fn segment(&self, input: SliceInput<'_>, prompts: &PromptSet, target: Structure) -> Result<Plane<u8>, SegmentError> {
        self.predict(input.image, prompts, target)
            .map(|(m, _)| m)
            .ok_or_else(|| SegmentError::Failed("prompt net needs a box, a point or a non-empty prior mask".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub loss: PromptLossConfig,
    pub perturbation: PerturbationParams,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            lr: 2e-3,
            seed: 0,
            loss: PromptLossConfig::default(),
            perturbation: PerturbationParams::default(),
        }
    }
}

fn structure_mask(labels: &[u8], h: usize, w: usize, target: Structure) -> Plane<u8> {
    let data = labels
        .iter()
        .map(|&v| match target {
            Structure::Vessel => u8::from(v != BACKGROUND),
            Structure::Lumen => u8::from(v == LUMEN),
        })
        .collect();
    Plane::from_vec(h, w, data)
}

fn shifted(m: &Plane<u8>, dy: isize, dx: isize) -> Plane<u8> {
    let mut out = Plane::new(m.h, m.w);
    for y in 0..m.h {
        for x in 0..m.w {
            let (sy, sx) = (y as isize - dy, x as isize - dx);
            if sy >= 0 && sx >= 0 && (sy as usize) < m.h && (sx as usize) < m.w {
                out.set(y, x, m.get(sy as usize, sx as usize));
            }
        }
    }
    out
}

fn pixel_point(q: usize, w: usize, label: PointLabel) -> PointPrompt {
    PointPrompt {
        x: (q % w) as f64 + 0.5,
        y: (q / w) as f64 + 0.5,
        label,
    }
}

/// One training example: a random vessel component of a random annotated
/// slice, prompted by a perturbed box, a foreground point, or a corrupted
/// prior mask with one corrective point (the later rounds of iterative
/// prompting).
fn draw_example(
    cases: &[(Volume3D, LabelVolume)],
    cfg: &PromptTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(Plane<f32>, PromptSet, Structure, Plane<u8>)> {
    let (img, lab) = &cases[rng.random_range(0..cases.len())];
    if lab.annotated_slices.is_empty() {
        return None;
    }
    let z = lab.annotated_slices[rng.random_range(0..lab.annotated_slices.len())];
    let target = if rng.random_bool(0.5) { Structure::Vessel } else { Structure::Lumen };
    let (h, w) = (lab.dims.h, lab.dims.w);
    let truth = structure_mask(lab.slice_data(z), h, w, target);
    let comps = connected_components(&truth, Connectivity::Eight);
    if comps.is_empty() {
        return None;
    }
    let comp = &comps[rng.random_range(0..comps.len())];
    let mask = comp.to_mask(h, w);
    let prompts = match rng.random_range(0..3) {
        0 => PromptSet::with_box(perturb_box(&BoundingBox2D::of_component(comp), &cfg.perturbation, rng)),
        1 => PromptSet {
            points: vec![pixel_point(comp.pixels[rng.random_range(0..comp.len())], w, PointLabel::Foreground)],
            ..PromptSet::default()
        },
        _ => {
            let prior = if rng.random_bool(0.5) {
                dilate_disk(&mask, rng.random_range(1..3))
            } else {
                shifted(&mask, rng.random_range(-2i32..=2) as isize, rng.random_range(-2i32..=2) as isize)
            };
            let errors: Vec<usize> = (0..h * w).filter(|&q| (prior.data[q] != 0) != (mask.data[q] != 0)).collect();
            let points = if errors.is_empty() {
                Vec::new()
            } else {
                let q = errors[rng.random_range(0..errors.len())];
                let label = if mask.data[q] != 0 { PointLabel::Foreground } else { PointLabel::Background };
                vec![pixel_point(q, w, label)]
            };
            if prior.count_nonzero() == 0 {
                return None;
            }
            PromptSet {
                points,
                prior_mask: Some(prior),
                ..PromptSet::default()
            }
        }
    };
    Some((img.extract_slice(z).ok()?, prompts, target, mask))
}

/// Trains a fresh [`PromptNet`] on the annotated slices of `cases` (sparse
/// expert labels are enough); returns it with the per-step loss terms.
pub fn train_prompt_net(
    cases: &[(Volume3D, LabelVolume)],
    net_cfg: PromptNetConfig,
    cfg: &PromptTrainConfig,
) -> Result<(PromptNet, Vec<PromptLossParts>), TrainError> {
    if cases.is_empty() || cfg.batch_size == 0 {
        return Err(TrainError::Config("prompt net training needs cases and a positive batch size".into()));
    }
    let mut net = PromptNet::new(net_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(&net.store, cfg.lr);
    let s = net_cfg.window;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x = Vec::with_capacity(cfg.batch_size * IN_CHANNELS * s * s);
        let mut t = Vec::with_capacity(cfg.batch_size * s * s);
        let mut drawn = 0;
        let mut attempts = 0;
        while drawn < cfg.batch_size {
            attempts += 1;
            if attempts > 1000 * cfg.batch_size {
                return Err(TrainError::Data("no labelled vessel slices to train the prompt net on".into()));
            }
            let Some((img, prompts, target, mask)) = draw_example(cases, cfg, &mut rng) else { continue };
            let Some(centre) = PromptNet::centre_of(&prompts) else { continue };
            let origin = net.window_origin(centre);
            x.extend(net.encode(&img, &prompts, target, origin));
            for wy in 0..s {
                for wx in 0..s {
                    let (y, xx) = (origin.0 + wy as isize, origin.1 + wx as isize);
                    let on = y >= 0 && xx >= 0 && (y as usize) < mask.h && (xx as usize) < mask.w && mask.get(y as usize, xx as usize) != 0;
                    t.push(u8::from(on));
                }
            }
            drawn += 1;
        }
        let mut g = Graph::new();
        let xv = g.input(Tensor::from_vec(&[cfg.batch_size, IN_CHANNELS, 1, s, s], x)?);
        let (logits, iou) = net.forward(&mut g, &net.store, xv);
        let (loss, parts) = prompt_loss(&mut g, logits, iou, &t, cfg.loss);
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::Diverged { epoch: 0, step, loss: value });
        }
        let grads = g.backward(loss);
        adam.step(&mut net.store, grads.params());
        history.push(parts);
    }
    Ok((net, history))
}
