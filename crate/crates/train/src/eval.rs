//! Per-case, per-class metric reports in JSON and CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vessel_core::metrics::{class_metrics, ClassMetrics};
use vessel_core::volume::{read_label, LUMEN, WALL};
use vessel_core::LabelVolume;

use crate::TrainError;

pub const CLASSES: [(u8, &str); 2] = [(LUMEN, "lumen"), (WALL, "wall")];
pub const CSV_HEADER: &str = "case,class,dice,iou,pre,rec,asd_mm";

/// File-name suffixes stripped to recover a case id, e.g. `case_003_gt`.
pub const CASE_SUFFIXES: [&str; 6] = ["_gt", "_pred", "_aipl", "_cipl", "_srpl", "_label"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub classes: BTreeMap<String, ClassMetrics>,
}

/// Mean of each metric over the cases where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub asd_mm: Option<f64>,
    /// Cases left out of the ASD mean because exactly one mask was empty.
    pub asd_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: BTreeMap<String, MeanMetrics>,
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics for already-loaded (case id, prediction, ground truth) triples,
/// kept in the given order.
pub fn evaluate_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a LabelVolume, &'a LabelVolume)>,
) -> Result<MetricReport, TrainError> {
    let mut cases = Vec::new();
    for (id, pred, gt) in pairs {
        let mut classes = BTreeMap::new();
        for (c, name) in CLASSES {
            classes.insert(name.to_string(), class_metrics(pred, gt, c)?);
        }
        cases.push(CaseMetrics {
            case_id: id.to_string(),
            classes,
        });
    }
    let mut means = BTreeMap::new();
    for (_, name) in CLASSES {
        let ms: Vec<&ClassMetrics> = cases.iter().map(|c| &c.classes[name]).collect();
        means.insert(
            name.to_string(),
            MeanMetrics {
                dice: mean(ms.iter().map(|m| m.dice)),
                iou: mean(ms.iter().map(|m| m.iou)),
                precision: mean(ms.iter().map(|m| m.precision)),
                recall: mean(ms.iter().map(|m| m.recall)),
                asd_mm: mean(ms.iter().map(|m| m.asd_mm)),
                asd_undefined: ms.iter().filter(|m| m.asd_mm.is_none()).count(),
            },
        );
    }
    Ok(MetricReport { cases, mean: means })
}

/// Case id of a label file: the stem with one known suffix removed.
pub fn case_id_of(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".vvolh")?;
    Some(
        CASE_SUFFIXES
            .iter()
            .find_map(|s| stem.strip_suffix(s))
            .unwrap_or(stem)
            .to_string(),
    )
}

fn list_cases(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>, TrainError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(id) = case_id_of(&path) {
            if out.insert(id.clone(), path).is_some() {
                return Err(TrainError::Data(format!("case {id} appears twice in {}", dir.display())));
            }
        }
    }
    Ok(out)
}

/// Matches `.vvolh` label files of two directories by case id. Cases present
/// on only one side are an error listing all of them.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport, TrainError> {
    let preds = list_cases(pred_dir)?;
    let gts = list_cases(gt_dir)?;
    let unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() || preds.is_empty() {
        return Err(TrainError::Unmatched(unmatched));
    }
    let loaded: Vec<(String, LabelVolume, LabelVolume)> = preds
        .iter()
        .map(|(id, p)| Ok((id.clone(), read_label(p)?, read_label(&gts[id])?)))
        .collect::<Result<_, TrainError>>()?;
    evaluate_pairs(loaded.iter().map(|(i, p, g)| (i.as_str(), p, g)))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    /// One row per case and class; undefined values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cases {
            for (_, name) in CLASSES {
                let m = &c.classes[name];
                let _ = writeln!(
                    s,
                    "{},{name},{},{},{},{},{}",
                    c.case_id,
                    cell(m.dice),
                    cell(m.iou),
                    cell(m.precision),
                    cell(m.recall),
                    cell(m.asd_mm)
                );
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `{stem}.json` and `{stem}.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }

    pub fn mean_dice(&self, class: &str) -> Option<f64> {
        self.mean.get(class).and_then(|m| m.dice)
    }
}
