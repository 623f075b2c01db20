//! The pipeline steps behind each subcommand. Every step reads and writes
//! plain files so steps can be rerun independently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dbfunet::{checkpoint, DbfUNet, NetConfig};
use serde::{Deserialize, Serialize};
use vessel_core::labelprop::{propagate_aipl, propagate_cipl};
use vessel_core::metrics::slice_dice;
use vessel_core::phantom::{generate_suite, Manifest, Split};
use vessel_core::srpl::{refine_volume, OracleSegmenter, Segmenter};
use vessel_core::volume::{read_image, read_label, write_label, LUMEN, WALL};
use vessel_core::{LabelVolume, Volume3D};
use vessel_train::prompt::train_prompt_net;
use vessel_train::{evaluate_pairs, infer, load_cases, train, LabelSource, MetricReport, TrainConfig};

use crate::config::{ExperimentConfig, InterpMethod, SegmenterKind, SrplConfig};

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let path = if path.is_dir() { path.join(Manifest::FILE_NAME) } else { path.to_path_buf() };
    Ok(Manifest::load(&path)?)
}

fn entries(m: &Manifest, split: Option<Split>) -> Vec<&vessel_core::phantom::ManifestEntry> {
    m.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)).collect()
}

pub fn label_path(dir: &Path, case_id: &str, source: &str) -> PathBuf {
    dir.join(format!("{case_id}_{source}.vvolh"))
}

pub fn interp_volume(sparse: &LabelVolume, method: InterpMethod, match_radius: f64) -> LabelVolume {
    match method {
        InterpMethod::Aipl => propagate_aipl(sparse),
        InterpMethod::Cipl => propagate_cipl(sparse, match_radius),
    }
}

/// Writes `{case}_{method}.vvolh` for every case.
pub fn interp(manifest: &Manifest, method: InterpMethod, match_radius: f64, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for e in &manifest.entries {
        let sparse = read_label(manifest.resolve(&e.sparse_path))?;
        let dense = interp_volume(&sparse, method, match_radius);
        write_label(&dense, label_path(out_dir, &e.case_id, method.name()))?;
    }
    Ok(())
}

/// Builds the segmenter for one case. The prompt network is fitted once on
/// the expert slices of the training split and shared.
enum SegmenterSource {
    Shared(Box<dyn Segmenter>),
    Oracle(usize),
}

fn segmenter_source(manifest: &Manifest, cfg: &SrplConfig, seed: u64) -> Result<SegmenterSource> {
    Ok(match cfg.segmenter {
        SegmenterKind::Threshold => SegmenterSource::Shared(Box::new(cfg.threshold)),
        SegmenterKind::Oracle => SegmenterSource::Oracle(cfg.oracle_dilate),
        SegmenterKind::Promptnet => {
            let cases = entries(manifest, Some(Split::Train))
                .into_iter()
                .map(|e| Ok((read_image(manifest.resolve(&e.image_path))?, read_label(manifest.resolve(&e.sparse_path))?)))
                .collect::<Result<Vec<(Volume3D, LabelVolume)>>>()?;
            let train_cfg = vessel_train::prompt::PromptTrainConfig {
                seed,
                ..cfg.prompt_train
            };
            let (net, _) = train_prompt_net(&cases, cfg.prompt_net, &train_cfg)?;
            SegmenterSource::Shared(Box::new(net))
        }
    })
}

/// Refines each case's C-IPL labels (`{case}_cipl.vvolh` in `labels_dir`)
/// into `{case}_srpl.vvolh` in `out_dir`; expert slices are kept verbatim.
pub fn refine(manifest: &Manifest, labels_dir: &Path, cfg: &SrplConfig, seed: u64, out_dir: &Path) -> Result<()> {
    cfg.perturbation.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let source = segmenter_source(manifest, cfg, seed)?;
    for e in &manifest.entries {
        let image = read_image(manifest.resolve(&e.image_path))?;
        let sparse = read_label(manifest.resolve(&e.sparse_path))?;
        let cipl_path = label_path(labels_dir, &e.case_id, "cipl");
        let cipl = read_label(&cipl_path).with_context(|| format!("C-IPL labels for {} (run interp first)", e.case_id))?;
        let oracle;
        let seg: &dyn Segmenter = match &source {
            SegmenterSource::Shared(s) => s.as_ref(),
            SegmenterSource::Oracle(r) => {
                oracle = OracleSegmenter::new(read_label(manifest.resolve(&e.gt_path))?, *r);
                &oracle
            }
        };
        let out = refine_volume(&image, &cipl, &sparse, seg, &cfg.perturbation, seed)
            .with_context(|| format!("refining {}", e.case_id))?;
        write_label(&out, label_path(out_dir, &e.case_id, "srpl"))?;
    }
    Ok(())
}

/// Refines one volume. The oracle needs `gt`; the prompt network is fitted
/// on this volume's expert slices.
pub fn refine_single(
    image: &Volume3D,
    cipl: &LabelVolume,
    expert: &LabelVolume,
    gt: Option<LabelVolume>,
    cfg: &SrplConfig,
    seed: u64,
) -> Result<LabelVolume> {
    let seg: Box<dyn Segmenter> = match cfg.segmenter {
        SegmenterKind::Threshold => Box::new(cfg.threshold),
        SegmenterKind::Oracle => {
            let Some(gt) = gt else { bail!("the oracle segmenter needs --gt") };
            Box::new(OracleSegmenter::new(gt, cfg.oracle_dilate))
        }
        SegmenterKind::Promptnet => {
            let train_cfg = vessel_train::prompt::PromptTrainConfig {
                seed,
                ..cfg.prompt_train
            };
            let (net, _) = train_prompt_net(&[(image.clone(), expert.clone())], cfg.prompt_net, &train_cfg)?;
            Box::new(net)
        }
    };
    Ok(refine_volume(image, cipl, expert, seg.as_ref(), &cfg.perturbation, seed)?)
}

/// Trains a fresh network on the training split and writes its outputs to
/// `out_dir`.
pub fn train_model(
    manifest: &Manifest,
    source: LabelSource,
    labels_dir: &Path,
    net: &NetConfig,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<DbfUNet> {
    let cases = load_cases(manifest, manifest.split(Split::Train), source, labels_dir)?;
    if cases.is_empty() {
        bail!("the manifest has no training cases");
    }
    let mut model = DbfUNet::new(net.clone(), seed)?;
    let meta = serde_json::json!({ "labels_source": source, "seed": seed });
    train(&mut model, &cases, cfg, out_dir, meta)?;
    Ok(model)
}

/// Segments every case of `split` into `{case}_pred.vvolh` and scores them
/// against the ground truth.
pub fn predict_and_evaluate(
    model: &DbfUNet,
    manifest: &Manifest,
    split: Split,
    cfg: &TrainConfig,
    pred_dir: Option<&Path>,
) -> Result<MetricReport> {
    let mut loaded = Vec::new();
    for e in manifest.split(split) {
        let image = read_image(manifest.resolve(&e.image_path))?;
        let pred = infer(model, &image, cfg.patch, cfg.overlap)?;
        if let Some(d) = pred_dir {
            std::fs::create_dir_all(d)?;
            write_label(&pred, label_path(d, &e.case_id, "pred"))?;
        }
        loaded.push((e.case_id.clone(), pred, read_label(manifest.resolve(&e.gt_path))?));
    }
    if loaded.is_empty() {
        bail!("the manifest has no {split:?} cases");
    }
    Ok(evaluate_pairs(loaded.iter().map(|(i, p, g)| (i.as_str(), p, g)))?)
}

pub fn load_model(path: &Path) -> Result<DbfUNet> {
    let (model, _) = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

pub const PSEUDO_LABELS: [&str; 3] = ["aipl", "cipl", "srpl"];

/// Lumen and wall Dice of one pseudo-label volume against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub lumen_dice: Option<f64>,
    pub wall_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub case_id: String,
    pub z: usize,
    /// Lumen Dice per method on this slice.
    pub lumen: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub cases: BTreeMap<String, BTreeMap<String, MethodScore>>,
    /// Per-slice lumen Dice on the slices without expert labels.
    pub slices: Vec<SliceScore>,
    /// Mean over cases, per method.
    pub mean: BTreeMap<String, MethodScore>,
    /// Methods by mean lumen Dice, best first.
    pub ranking: Vec<String>,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Scores the A-IPL, C-IPL and S-RPL labels found in `labels_dir` against
/// the phantom ground truth. Missing methods are skipped.
pub fn compare(manifest: &Manifest, labels_dir: &Path) -> Result<CompareReport> {
    let methods: Vec<&str> = PSEUDO_LABELS
        .into_iter()
        .filter(|m| manifest.entries.iter().all(|e| label_path(labels_dir, &e.case_id, m).exists()))
        .collect();
    if methods.is_empty() {
        bail!("no complete set of pseudo-labels in {}", labels_dir.display());
    }
    let mut cases = BTreeMap::new();
    let mut slices = Vec::new();
    for e in &manifest.entries {
        let gt = read_label(manifest.resolve(&e.gt_path))?;
        let sparse = read_label(manifest.resolve(&e.sparse_path))?;
        let labels: Vec<(&str, LabelVolume)> = methods
            .iter()
            .map(|m| Ok((*m, read_label(label_path(labels_dir, &e.case_id, m))?)))
            .collect::<Result<_>>()?;
        let mut scores = BTreeMap::new();
        for (m, l) in &labels {
            scores.insert(
                m.to_string(),
                MethodScore {
                    lumen_dice: vessel_core::metrics::class_metrics(l, &gt, LUMEN)?.dice,
                    wall_dice: vessel_core::metrics::class_metrics(l, &gt, WALL)?.dice,
                },
            );
        }
        cases.insert(e.case_id.clone(), scores);
        for z in (0..gt.dims.d).filter(|&z| !sparse.is_annotated(z)) {
            slices.push(SliceScore {
                case_id: e.case_id.clone(),
                z,
                lumen: labels.iter().map(|(m, l)| (m.to_string(), slice_dice(l, &gt, LUMEN, z))).collect(),
            });
        }
    }
    let mean: BTreeMap<String, MethodScore> = methods
        .iter()
        .map(|m| {
            (
                m.to_string(),
                MethodScore {
                    lumen_dice: mean_of(cases.values().map(|c| c[*m].lumen_dice)),
                    wall_dice: mean_of(cases.values().map(|c| c[*m].wall_dice)),
                },
            )
        })
        .collect();
    let mut ranking: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
    ranking.sort_by(|a, b| {
        let key = |m: &String| mean[m].lumen_dice.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then(a.cmp(b))
    });
    Ok(CompareReport {
        cases,
        slices,
        mean,
        ranking,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CompareReport {
    /// One row per case and method, then the means.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,method,lumen_dice,wall_dice\n");
        let rows = self.cases.iter().map(|(c, m)| (c.as_str(), m)).chain([("mean", &self.mean)]);
        for (case, methods) in rows {
            for (m, sc) in methods {
                let _ = writeln!(s, "{case},{m},{},{}", cell(sc.lumen_dice), cell(sc.wall_dice));
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("compare.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("compare.csv"), self.to_csv())?;
        Ok(())
    }

    pub fn mean_lumen(&self, method: &str) -> Option<f64> {
        self.mean.get(method).and_then(|m| m.lumen_dice)
    }
}

/// The four ablation rows: (BFF, MSDA) switches.
pub const ABLATION_ROWS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub bff: bool,
    pub msda: bool,
    pub params: usize,
    pub lumen: vessel_train::eval::MeanMetrics,
    pub wall: vessel_train::eval::MeanMetrics,
}

pub fn row_name(bff: bool, msda: bool) -> String {
    format!("{},{}", if bff { "BFF" } else { "-" }, if msda { "MSDA" } else { "-" })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub labels_source: LabelSource,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, bff: bool, msda: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.bff == bff && r.msda == msda)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bff,msda,params,lumen_dice,lumen_iou,lumen_pre,lumen_rec,lumen_asd_mm,wall_dice,wall_iou,wall_pre,wall_rec,wall_asd_mm\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", u8::from(r.bff), u8::from(r.msda), r.params);
            for m in [&r.lumen, &r.wall] {
                for v in [m.dice, m.iou, m.precision, m.recall, m.asd_mm] {
                    let _ = write!(s, ",{}", cell(v));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("ablation.csv"), self.to_csv())?;
        Ok(())
    }
}

/// Trains one model per row with identical seeds and data, then scores each
/// on the test split. `out_dir` receives one subdirectory per row.
pub fn ablate(
    manifest: &Manifest,
    rows: &[(bool, bool)],
    cfg: &ExperimentConfig,
    labels_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut out = Vec::new();
    for &(bff, msda) in rows {
        let net = NetConfig {
            use_bff: bff,
            use_msda: msda,
            ..cfg.net.clone()
        };
        let dir = out_dir.map(|d| d.join(format!("bff{}_msda{}", u8::from(bff), u8::from(msda))));
        let model = train_model(manifest, cfg.labels_source, labels_dir, &net, &cfg.train, cfg.seed, dir.as_deref())?;
        let report = predict_and_evaluate(&model, manifest, Split::Test, &cfg.train, None)?;
        out.push(AblationRow {
            bff,
            msda,
            params: model.store.total(),
            lumen: report.mean["lumen"].clone(),
            wall: report.mean["wall"].clone(),
        });
    }
    Ok(AblationReport {
        labels_source: cfg.labels_source,
        rows: out,
    })
}

/// Layout of a `run-all` work directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn phantom(&self) -> PathBuf {
        self.root.join("phantom")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn pred(&self) -> PathBuf {
        self.root.join("pred")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// phantom -> interp -> refine -> train -> eval -> compare (-> ablate).
pub fn run_all(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    let l = RunLayout { root: root.to_path_buf() };
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let manifest = generate_suite(&cfg.phantom, l.phantom())?;
    for method in [InterpMethod::Aipl, InterpMethod::Cipl] {
        interp(&manifest, method, cfg.interp.match_radius, &l.labels())?;
    }
    refine(&manifest, &l.labels(), &cfg.srpl, cfg.seed, &l.labels())?;
    let model = train_model(&manifest, cfg.labels_source, &l.labels(), &cfg.net, &cfg.train, cfg.seed, Some(&l.model()))?;
    let report = predict_and_evaluate(&model, &manifest, Split::Test, &cfg.train, Some(&l.pred()))?;
    report.write(&l.reports(), "metrics")?;
    compare(&manifest, &l.labels())?.write(&l.reports())?;
    if cfg.ablate {
        ablate(&manifest, &ABLATION_ROWS, cfg, &l.labels(), Some(&root.join("ablation")))?.write(&l.reports())?;
    }
    Ok(())
}
