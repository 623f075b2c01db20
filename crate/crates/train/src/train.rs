//! Patch-based training loop.

use std::io::Write;
use std::path::Path;

use dbfunet::{checkpoint, Adam, DbfUNet, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Case, PatchSampler};
use crate::loss::{seg_loss, SegLossParts};
use crate::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch: [usize; 3],
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
    /// Patches drawn from every training case per epoch.
    pub patches_per_case: usize,
    pub w_ce: f64,
    pub w_dice: f64,
    pub seed: u64,
    /// Save `epoch_NNN.ckpt` every this many epochs; 0 keeps only the final model.
    pub checkpoint_every: usize,
    /// Tile overlap fraction for sliding-window inference.
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch: [32; 3],
            batch_size: 2,
            lr: 5e-4,
            epochs: 40,
            patches_per_case: 2,
            w_ce: 1.0,
            w_dice: 1.0,
            seed: 0,
            checkpoint_every: 0,
            overlap: 0.5,
        }
    }
}

impl TrainConfig {
    /// The documented full-size setting.
    pub fn paper_scale() -> Self {
        Self {
            patch: [128; 3],
            epochs: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self, multiple: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.patch.iter().any(|&p| p == 0 || p % multiple != 0) {
            return bad(format!("patch {:?} must be positive multiples of {multiple}", self.patch));
        }
        if self.batch_size == 0 || self.patches_per_case == 0 {
            return bad("batch_size and patches_per_case must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.w_ce >= 0.0 && self.w_dice >= 0.0 && self.w_ce + self.w_dice > 0.0) {
            return bad("loss weights must be non-negative and not both zero".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must be in [0, 1), got {}", self.overlap));
        }
        Ok(())
    }
}

/// One optimiser step of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub components: SegLossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<LossRecord>,
    pub epoch_means: Vec<f64>,
}

/// Trains `model` in place. Patch order depends only on `cfg.seed`. With
/// `out_dir`, writes `loss_trace.jsonl`, periodic checkpoints and the final
/// `model.ckpt` there.
pub fn train(
    model: &mut DbfUNet,
    cases: &[Case],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    meta: serde_json::Value,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(model.config.patch_multiple())?;
    if cases.is_empty() {
        return Err(TrainError::Data("no training cases".into()));
    }
    let mut trace_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join("loss_trace.jsonl"))?))
        }
        None => None,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = PatchSampler::new(cfg.patch, cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(&model.store, cfg.lr);
    let [pd, ph, pw] = cfg.patch;
    let vox = pd * ph * pw;
    let mut trace = Vec::new();
    let mut epoch_means = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut draws: Vec<usize> = (0..cases.len()).flat_map(|c| std::iter::repeat_n(c, cfg.patches_per_case)).collect();
        draws.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let batches = draws.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for batch in batches {
            let mut img = Vec::with_capacity(batch.len() * vox);
            let mut lab = Vec::with_capacity(batch.len() * vox);
            for &c in batch {
                let origin = sampler.origin(&cases[c])?;
                cases[c].patch(origin, cfg.patch, &mut img, &mut lab);
            }
            let x = Tensor::from_vec(&[batch.len(), 1, pd, ph, pw], img)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let logits = model.forward_graph(&mut g, xv, None)?;
            let (loss, parts) = seg_loss(&mut g, logits, &lab, cfg.w_ce, cfg.w_dice);
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss: value });
            }
            let grads = g.backward(loss);
            if let Some((id, _)) = grads.params().find(|(_, t)| !t.all_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    epoch,
                    step,
                    param: model.store.name(id).to_string(),
                });
            }
            adam.step(&mut model.store, grads.params());
            let rec = LossRecord {
                epoch,
                step,
                loss: value,
                components: parts,
            };
            if let Some(f) = &mut trace_file {
                serde_json::to_writer(&mut *f, &rec).map_err(|e| TrainError::Data(e.to_string()))?;
                f.write_all(b"\n")?;
            }
            trace.push(rec);
            sum += value;
            step += 1;
        }
        epoch_means.push(sum / n_batches as f64);
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let m = checkpoint_meta(&meta, cfg, epoch + 1);
                checkpoint::save(model, m, &d.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some(f) = &mut trace_file {
        f.flush()?;
    }
    if let Some(d) = out_dir {
        checkpoint::save(model, checkpoint_meta(&meta, cfg, cfg.epochs), &d.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { trace, epoch_means })
}

fn checkpoint_meta(meta: &serde_json::Value, cfg: &TrainConfig, epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "epoch": epoch,
        "train": cfg,
        "run": meta,
    })
}
