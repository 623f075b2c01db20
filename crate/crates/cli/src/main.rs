use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use dbfseg::config::{InterpMethod, SegmenterKind};
use dbfseg::pipeline::{self, ABLATION_ROWS};
use dbfseg::ExperimentConfig;
use vessel_core::phantom::{generate_suite, Split};
use vessel_core::volume::{read_image, read_label, write_label};
use vessel_train::{evaluate_dirs, LabelSource};

#[derive(Parser)]
#[command(name = "dbfseg", version, about = "Sparse-annotation vessel segmentation pipeline")]
struct Cli {
    /// Experiment config (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom suite and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Densify sparse labels by slice interpolation, for one volume
    /// (`--in`, `--out` a file) or every case of a manifest (`--out` a directory).
    Interp {
        #[arg(long, required_unless_present = "input", conflicts_with = "input")]
        manifest: Option<PathBuf>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: InterpMethod,
        #[arg(long)]
        match_radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine C-IPL labels with a promptable segmenter, for one volume
    /// (`--image`, `--cipl`, `--expert`) or every case of a manifest.
    Refine {
        #[arg(long, requires = "labels", required_unless_present = "image", conflicts_with = "image")]
        manifest: Option<PathBuf>,
        /// Directory holding `{case}_cipl.vvolh`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, requires_all = ["cipl", "expert"])]
        image: Option<PathBuf>,
        #[arg(long)]
        cipl: Option<PathBuf>,
        #[arg(long)]
        expert: Option<PathBuf>,
        /// Ground truth for the oracle segmenter in single-volume mode.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        segmenter: Option<SegmenterKind>,
        /// Ensemble size.
        #[arg(long)]
        k: Option<usize>,
        /// Vote threshold.
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        max_noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the network on the training split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels_source: Option<LabelSource>,
        /// Directory holding generated pseudo-labels.
        #[arg(long, default_value = ".")]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score predictions: either label directories, or a checkpoint run on a split.
    Eval {
        #[arg(long, requires = "gt", conflicts_with_all = ["checkpoint", "manifest"])]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank A-IPL, C-IPL and S-RPL labels against the ground truth.
    Compare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the four BFF/MSDA ablation rows.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = ".")]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// phantom, interp, refine, train, eval and compare in one go.
    RunAll {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => anyhow::bail!("unknown split {s:?} (expected train, val or test)"),
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load_or_default(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Phantom { out, seed, cases } => {
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            if let Some(n) = cases {
                cfg.phantom.n_cases = n;
            }
            generate_suite(&cfg.phantom, &out)?;
        }
        Cmd::Interp { manifest, input, method, match_radius, out } => {
            if let Some(r) = match_radius {
                cfg.interp.match_radius = r;
            }
            cfg.validate()?;
            match (manifest, input) {
                (Some(m), _) => pipeline::interp(&pipeline::load_manifest(&m)?, method, cfg.interp.match_radius, &out)?,
                (None, Some(i)) => {
                    let dense = pipeline::interp_volume(&read_label(&i)?, method, cfg.interp.match_radius);
                    write_label(&dense, &out)?;
                }
                (None, None) => unreachable!("clap requires one input"),
            }
        }
        Cmd::Refine { manifest, labels, image, cipl, expert, gt, out, segmenter, k, tau, scale, max_noise, seed } => {
            let p = &mut cfg.srpl.perturbation;
            if let Some(k) = k {
                p.ensemble = k;
                if tau.is_none() {
                    p.vote_threshold = k.div_ceil(2);
                }
            }
            p.vote_threshold = tau.unwrap_or(p.vote_threshold);
            p.scale = scale.unwrap_or(p.scale);
            p.max_noise = max_noise.unwrap_or(p.max_noise);
            cfg.srpl.segmenter = segmenter.unwrap_or(cfg.srpl.segmenter);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            match (manifest, labels, image, cipl, expert) {
                (Some(m), Some(l), ..) => pipeline::refine(&pipeline::load_manifest(&m)?, &l, &cfg.srpl, cfg.seed, &out)?,
                (None, _, Some(i), Some(c), Some(e)) => {
                    let gt = gt.map(|g| read_label(&g)).transpose()?;
                    let srpl = pipeline::refine_single(
                        &read_image(&i)?,
                        &read_label(&c)?,
                        &read_label(&e)?,
                        gt,
                        &cfg.srpl,
                        cfg.seed,
                    )?;
                    write_label(&srpl, &out)?;
                }
                _ => unreachable!("clap requires one complete input set"),
            }
        }
        Cmd::Train { manifest, labels_source, labels, out, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let source = labels_source.unwrap_or(cfg.labels_source);
            cfg.validate()?;
            let m = pipeline::load_manifest(&manifest)?;
            pipeline::train_model(&m, source, &labels, &cfg.net, &cfg.train, cfg.seed, Some(&out))?;
        }
        Cmd::Eval { pred, gt, checkpoint, manifest, split, out } => {
            let report = match (pred, gt, checkpoint, manifest) {
                (Some(p), Some(g), None, None) => evaluate_dirs(&p, &g)?,
                (None, None, Some(c), Some(m)) => {
                    let model = pipeline::load_model(&c)?;
                    let m = pipeline::load_manifest(&m)?;
                    pipeline::predict_and_evaluate(&model, &m, parse_split(&split)?, &cfg.train, Some(&out))?
                }
                _ => anyhow::bail!("eval needs --pred and --gt, or --checkpoint and --manifest"),
            };
            report.write(&out, "metrics")?;
        }
        Cmd::Compare { manifest, labels, out } => {
            let m = pipeline::load_manifest(&manifest)?;
            pipeline::compare(&m, &labels)?.write(&out)?;
        }
        Cmd::Ablate { manifest, labels, out } => {
            cfg.validate()?;
            let m = pipeline::load_manifest(&manifest)?;
            pipeline::ablate(&m, &ABLATION_ROWS, &cfg, &labels, Some(&out))?.write(&out)?;
        }
        Cmd::RunAll { out } => {
            let root = out.unwrap_or_else(|| cfg.work_dir.clone());
            pipeline::run_all(&cfg, Path::new(&root))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
