//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;
#[path = "../../dbfunet/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dbfseg::config::{InterpMethod, SegmenterKind, SrplConfig};
use dbfseg::pipeline::{self, label_path};
use dbfseg::ExperimentConfig;
use dbfunet::gradcheck::GradCheckOptions;
use dbfunet::{gradcheck, param_report, DbfUNet, NetConfig, ParamStore};
use vessel_core::metrics::slice_dice;
use vessel_core::phantom::{generate_suite, Manifest, SuiteConfig};
use vessel_core::volume::{read_label, LUMEN, WALL};
use vessel_train::loss::seg_loss;
use vessel_train::{LabelSource, TrainConfig};

type Outcome = (bool, String);

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let (bad, worst) = oracles::metric_agreement(200, 2024);
    let secs = t.elapsed().as_secs_f64();
    (bad == 0 && secs < 10.0, format!("{bad}/200 pairs disagree, worst ASD gap {worst:.2e} mm, {secs:.2} s"))
}

fn perturbation() -> Outcome {
    let s = oracles::perturbation_stats(10_000, 1);
    let u = oracles::perturbation_stats(oracles::UNIFORMITY_DRAWS, 2);
    let ok = s.bound_violations + s.size_changes + u.bound_violations + u.size_changes == 0 && u.max_bin_deviation < 0.05;
    (
        ok,
        format!(
            "{} offsets: {} bound violations, {} size changes; max bin deviation {:.2}% over {} offsets",
            s.draws,
            s.bound_violations,
            s.size_changes,
            100.0 * u.max_bin_deviation,
            u.draws
        ),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let [bff_deep, bff_shallow] = support::bff_reports();
    let x = support::random(&[2, 3, 2, 2, 2], 7);
    let target: Vec<u8> = (0..16).map(|i| ((i * 7 + 1) % 3) as u8).collect();
    let loss = gradcheck!(&ParamStore::new(), &x, GradCheckOptions::default(), |g, _s, v| seg_loss(g, v, &target, 1.0, 1.0).0);
    let reports = [
        ("DSD", support::dsd_report()),
        ("MSDA", support::msda_report()),
        ("MLK", support::mlk_report()),
        ("BFF(deep)", bff_deep),
        ("BFF(shallow)", bff_shallow),
        ("seg_loss", loss),
    ];
    let secs = t.elapsed().as_secs_f64();
    let mut ok = secs < 60.0;
    let mut parts = Vec::new();
    for (name, r) in &reports {
        let (e32, _) = support::worst(r);
        ok &= e32 < 1e-3;
        parts.push(format!("{name} {e32:.1e}"));
    }
    (ok, format!("worst f32 relative error: {}; {secs:.1} s", parts.join(", ")))
}

fn collapses() -> Outcome {
    let mlk = support::mlk_collapse_error();
    let pool = support::dsd_pool_error();
    let attn = support::attention_sum_deviation();
    (
        mlk <= 1e-6 && pool == 0.0 && attn <= 1e-6,
        format!("MLK vs pointwise {mlk:.1e}, DSD vs avgpool {pool:.1e}, |sum(attention) - 1| {attn:.1e}"),
    )
}

fn oracle_identity(m: &Manifest, labels: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let cfg = SrplConfig {
        segmenter: SegmenterKind::Oracle,
        oracle_dilate: 0,
        ..SrplConfig::default()
    };
    pipeline::refine(m, labels, &cfg, 0, out)?;
    let (mut refined, mut perfect, mut expert, mut verbatim) = (0, 0, 0, 0);
    for e in &m.entries {
        let gt = read_label(m.resolve(&e.gt_path))?;
        let sparse = read_label(m.resolve(&e.sparse_path))?;
        let cipl = read_label(label_path(labels, &e.case_id, "cipl"))?;
        let srpl = read_label(label_path(out, &e.case_id, "srpl"))?;
        for z in 0..gt.dims.d {
            if sparse.is_annotated(z) {
                expert += 1;
                verbatim += usize::from(srpl.slice_data(z) == sparse.slice_data(z));
            } else if cipl.is_annotated(z) && cipl.slice_data(z).iter().any(|&v| v != 0) {
                refined += 1;
                let dice_one = [LUMEN, WALL].iter().all(|&c| slice_dice(&srpl, &gt, c, z).is_none_or(|d| d == 1.0));
                perfect += usize::from(dice_one && srpl.slice_data(z) == gt.slice_data(z));
            }
        }
    }
    Ok((
        refined > 0 && perfect == refined && verbatim == expert,
        format!("{perfect}/{refined} refined slices equal ground truth, {verbatim}/{expert} expert slices byte-identical"),
    ))
}

fn ordering(m: &Manifest, labels: &Path, started: Instant) -> anyhow::Result<Outcome> {
    for method in [InterpMethod::Aipl, InterpMethod::Cipl] {
        pipeline::interp(m, method, vessel_core::labelprop::DEFAULT_MATCH_RADIUS, labels)?;
    }
    pipeline::refine(m, labels, &SrplConfig::default(), 0, labels)?;
    let report = pipeline::compare(m, labels)?;
    let secs = started.elapsed().as_secs_f64();
    let [a, c, s] = ["aipl", "cipl", "srpl"].map(|k| report.mean_lumen(k).unwrap_or(f64::NAN));
    Ok((
        s >= c && c >= a && c - a >= 0.02 && secs < 300.0,
        format!("mean lumen Dice S-RPL {s:.4}, C-IPL {c:.4}, A-IPL {a:.4} (C-A {:.4}); {secs:.1} s", c - a),
    ))
}

fn training(m: &Manifest, labels: &Path) -> anyhow::Result<Outcome> {
    let cfg = ExperimentConfig {
        net: NetConfig::desk(),
        train: TrainConfig::default(),
        labels_source: LabelSource::Gt,
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let report = pipeline::ablate(m, &[(false, false), (true, true)], &cfg, labels, None)?;
    let secs = t.elapsed().as_secs_f64();
    let lumen = |bff, msda| report.row(bff, msda).and_then(|r| r.lumen.dice).unwrap_or(f64::NAN);
    let (full, plain) = (lumen(true, true), lumen(false, false));
    Ok((
        full >= 0.80 && full >= plain && secs < 1200.0,
        format!(
            "{} epochs, patch {:?}, {} training cases: test lumen Dice (BFF,MSDA) {full:.4}, (-,-) {plain:.4}; {secs:.0} s",
            cfg.train.epochs,
            cfg.train.patch,
            m.split(vessel_core::phantom::Split::Train).count()
        ),
    ))
}

fn parameters() -> Outcome {
    let count = |cfg: NetConfig| {
        let net = DbfUNet::new(cfg.clone(), 0).unwrap();
        let r = param_report(&net.store, &cfg);
        (r.total, support::count_oracle(&cfg))
    };
    let (paper, paper_oracle) = count(NetConfig::paper_scale());
    let (desk, desk_oracle) = count(NetConfig::desk());
    (
        paper == paper_oracle && desk == desk_oracle && paper <= 5_000_000 && desk <= 1_000_000,
        format!("paper-scale {paper} (oracle {paper_oracle}), desk {desk} (oracle {desk_oracle})"),
    )
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(tmp: &Path) -> anyhow::Result<Outcome> {
    let cfg = ExperimentConfig {
        phantom: SuiteConfig {
            n_cases: 3,
            split: [1, 1, 1],
            dims: [16, 24, 24],
            ..SuiteConfig::default()
        },
        net: NetConfig {
            channels: vec![4, 8],
            ..NetConfig::default()
        },
        train: TrainConfig {
            patch: [8, 16, 16],
            epochs: 2,
            checkpoint_every: 1,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let cfg_path = tmp.join("tiny.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)?;
    let run = |name: &str| -> anyhow::Result<std::path::PathBuf> {
        let out = tmp.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_dbfseg"))
            .args(["--config".as_ref(), cfg_path.as_os_str(), "run-all".as_ref(), "--out".as_ref(), out.as_os_str()])
            .status()?;
        anyhow::ensure!(status.success(), "run-all exited with {status}");
        Ok(out)
    };
    let (a, b) = (run("first")?, run("second")?);
    let (fa, fb) = (files_under(&a), files_under(&b));
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| std::fs::read(a.join(p)).ok() != std::fs::read(b.join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let kinds = |ext: &str| fa.iter().filter(|p| p.to_string_lossy().ends_with(ext)).count();
    Ok((
        fa == fb && differing.is_empty() && kinds(".ckpt") > 0 && kinds("_srpl.vvolh") > 0 && kinds(".csv") > 0,
        format!(
            "{} files ({} label/image volumes, {} checkpoints, {} reports), {} differ",
            fa.len(),
            kinds(".vvolh"),
            kinds(".ckpt"),
            kinds(".csv") + kinds(".json"),
            differing.len()
        ),
    ))
}

fn round_trip(tmp: &Path) -> Outcome {
    let failures = oracles::roundtrip_failures(1000, 10, tmp);
    (failures == 0, format!("{failures}/1000 volumes changed (u8 and f32 images, u8 labels)"))
}

fn report(n: usize, outcome: anyhow::Result<Outcome>) -> bool {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    println!("criterion {n:>2}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let suite_dir = tmp.path().join("suite");
    let labels = tmp.path().join("labels");
    let mut all = true;
    all &= report(1, Ok(metric_oracle()));
    all &= report(2, Ok(perturbation()));
    all &= report(3, Ok(gradients()));
    all &= report(4, Ok(collapses()));

    let started = Instant::now();
    let suite = generate_suite(&SuiteConfig::default(), &suite_dir);
    let six = suite.as_ref().map_err(|e| anyhow::anyhow!("{e}")).and_then(|m| ordering(m, &labels, started));
    let five = suite
        .as_ref()
        .map_err(|e| anyhow::anyhow!("{e}"))
        .and_then(|m| oracle_identity(m, &labels, &tmp.path().join("oracle")));
    all &= report(5, five);
    all &= report(6, six);
    all &= report(7, suite.as_ref().map_err(|e| anyhow::anyhow!("{e}")).and_then(|m| training(m, &labels)));
    all &= report(8, Ok(parameters()));
    all &= report(9, determinism(tmp.path()));
    let rt = tmp.path().join("roundtrip");
    std::fs::create_dir_all(&rt).expect("round-trip dir");
    all &= report(10, Ok(round_trip(&rt)));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
