use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use loradet_core::config::ExperimentConfig;
use loradet_core::detector::{
    apply_policy, evaluate, gradcheck, gradcheck_point, synth_sample, DetectorConfig, DetectorModel, Domain,
    EvalMetrics, FinetunePolicy, SceneSample, GRAD_FLOOR,
};
use loradet_core::experiment::{self, Splits};
use loradet_core::linalg::{ErrorMetric, Matrix};
use loradet_core::package::{
    apply_package, base_archive, build_package, checkpoint_archive, load_base, load_checkpoint, load_dataset,
    save_dataset, uplink_time, EntryRole, TensorArchive, UplinkBudget,
};
use loradet_core::rank::{analyze_matrices, emit_report, select_rank, RankCriterion};
use loradet_core::Error;

#[derive(Parser)]
#[command(name = "loradet", version, about = "LoRA fine-tuning, rank analysis and delta packaging for a toy oriented detector")]
struct Cli {
    /// Experiment config (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining, fine-tuning and test scenes.
    SynthData,
    /// Train a fresh model on D1 and store its weights as the base.
    Pretrain,
    /// Fine-tune the base on the D1+D2 mixture.
    Finetune {
        #[arg(long)]
        policy: Option<String>,
    },
    /// Truncation-error curves for every weight matrix of an archive.
    AnalyzeRank {
        /// Defaults to the merged weights, then the base.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Pick the smallest rank with absolute error at most this.
        #[arg(long, conflicts_with = "budget")]
        tolerance: Option<f64>,
        /// Pick the largest rank with compressed ratio at most this.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract the trainable tensors of the fine-tuned checkpoint.
    Package {
        #[arg(long)]
        policy: Option<String>,
    },
    /// Merge the package into the base weights.
    Apply,
    /// Transfer time of a package over a link.
    UplinkSim {
        /// Link rate in bits per second.
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        package: Option<PathBuf>,
        /// Multiplier for framing and protocol overhead.
        #[arg(long, default_value_t = 1.0)]
        overhead: f64,
    },
    /// AP50 and friends on the held-out mixture.
    Eval {
        /// Defaults to the merged weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Every policy when omitted.
        #[arg(long)]
        policy: Option<String>,
        /// Check the configured model instead of the small built-in one.
        #[arg(long)]
        full_size: bool,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

struct Paths {
    dir: PathBuf,
}

impl Paths {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Argument(_)) => 2,
        Some(Error::Integrity(_) | Error::Format(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("LDET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LDET_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn parse_policy(name: Option<&str>, cfg: &ExperimentConfig) -> Result<FinetunePolicy> {
    Ok(match name {
        Some(n) => n.parse()?,
        None => cfg.policy,
    })
}

fn read_archive(path: &Path, what: &str) -> Result<TensorArchive> {
    TensorArchive::read(path).with_context(|| format!("reading {what}"))
}

fn load_model(cfg: &ExperimentConfig, archive: &TensorArchive) -> Result<DetectorModel> {
    let mut model = DetectorModel::new(&cfg.detector, cfg.seed)?;
    if archive.entries().iter().any(|e| e.role == EntryRole::LoraA) {
        load_checkpoint(&mut model.store, archive)?;
    } else {
        load_base(&mut model.store, archive)?;
    }
    Ok(model)
}

fn print_metrics(label: &str, m: &EvalMetrics) {
    let per_class: Vec<String> = m
        .per_class_ap
        .iter()
        .map(|ap| ap.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}")))
        .collect();
    println!(
        "{label}: AP50 {:.4} (per class {}), mean IoU {:.4}, accuracy {:.4}",
        m.ap50,
        per_class.join(" "),
        m.mean_iou,
        m.accuracy
    );
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let paths = Paths { dir: cfg.workdir.clone() };

    match cli.command {
        Command::SynthData => {
            std::fs::create_dir_all(&paths.dir)
                .with_context(|| format!("creating {}", paths.dir.display()))?;
            let splits = Splits::generate(&cfg)?;
            for (name, data) in [
                ("pretrain.ldet", &splits.pretrain),
                ("finetune.ldet", &splits.finetune),
                ("test.ldet", &splits.test),
            ] {
                save_dataset(&paths.file(name), data)?;
                println!("wrote {} scenes to {}", data.len(), paths.file(name).display());
            }
        }
        Command::Pretrain => {
            let data = load_dataset(&paths.file("pretrain.ldet")).context("reading pretraining scenes")?;
            let (model, log) = experiment::pretrain(&cfg, &data)?;
            for (e, l) in log.epoch_losses.iter().enumerate() {
                println!("epoch {e}: loss {l:.6}");
            }
            base_archive(&model.store)?.write(&paths.file("base.ldet"))?;
            println!("wrote {}", paths.file("base.ldet").display());
        }
        Command::Finetune { policy } => {
            let policy = parse_policy(policy.as_deref(), &cfg)?;
            let base = experiment::model_from_base(&cfg, &read_archive(&paths.file("base.ldet"), "base weights")?)?;
            let mask = apply_policy(&base.store, policy)?;
            println!(
                "policy {policy}: trainable ratio {:.6} ({} of {} parameters)",
                mask.ratio(),
                mask.trainable,
                mask.total
            );
            let data = load_dataset(&paths.file("finetune.ldet")).context("reading fine-tuning scenes")?;
            let (model, _, log) = experiment::finetune(&cfg, &base, policy, &data)?;
            for (e, l) in log.epoch_losses.iter().enumerate() {
                println!("epoch {e}: loss {l:.6}");
            }
            checkpoint_archive(&model.store)?.write(&paths.file("checkpoint.ldet"))?;
            println!("wrote {}", paths.file("checkpoint.ldet").display());
        }
        Command::AnalyzeRank { weights, tolerance, budget, out } => {
            let path = weights.unwrap_or_else(|| {
                let merged = paths.file("merged.ldet");
                if merged.exists() {
                    merged
                } else {
                    paths.file("base.ldet")
                }
            });
            let archive = read_archive(&path, "weights")?;
            let mut items: Vec<(String, Matrix)> = Vec::new();
            for e in archive.entries() {
                if e.role == EntryRole::Base && e.dims.len() == 2 && e.dims[0] >= 2 && e.dims[1] >= 2 && e.name.ends_with(".w") {
                    items.push((e.name.clone(), e.to_matrix()?));
                }
            }
            let curves = analyze_matrices(&items, ErrorMetric::Frobenius)?;
            let criterion = match (tolerance, budget) {
                (Some(t), _) => Some(RankCriterion::ErrorTolerance(t)),
                (_, Some(p)) => Some(RankCriterion::ParamBudget(p)),
                _ => None,
            };
            let mut selections = Vec::new();
            if let Some(c) = criterion {
                for curve in &curves {
                    match select_rank(curve, c) {
                        Ok(s) => {
                            println!("{}: rank {} (p {:.4}, error {:.4e})", s.name, s.rank, s.p, s.error);
                            selections.push(s);
                        }
                        Err(Error::Selection(msg)) => eprintln!("warning: no rank satisfies {msg}"),
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            let dir = out.unwrap_or_else(|| paths.file("rank"));
            let files = emit_report(&dir, &curves, &selections)?;
            println!("analyzed {} matrices, wrote {} files to {}", curves.len(), files.len(), dir.display());
        }
        Command::Package { policy } => {
            let policy = parse_policy(policy.as_deref(), &cfg)?;
            let model = load_model(&cfg, &read_archive(&paths.file("checkpoint.ldet"), "checkpoint")?)?;
            let mask = apply_policy(&model.store, policy)?;
            let pkg = build_package(&model.store, &mask)?;
            pkg.write(&paths.file("package.ldet"))?;
            let full = base_archive(&model.store)?.byte_len();
            println!(
                "package: {} tensors, {} bytes ({:.4} of the {full}-byte full weights; trainable ratio {:.4})",
                pkg.len(),
                pkg.byte_len(),
                pkg.byte_len() as f64 / full as f64,
                mask.ratio()
            );
        }
        Command::Apply => {
            let base = read_archive(&paths.file("base.ldet"), "base weights")?;
            let pkg = read_archive(&paths.file("package.ldet"), "package")?;
            let merged = apply_package(&base, &pkg)?;
            merged.write(&paths.file("merged.ldet"))?;
            let changed = base.entries().iter().filter(|e| merged.get(&e.name) != Some(*e)).count();
            println!("merged {} package entries; {changed} base tensors changed", pkg.len());
        }
        Command::UplinkSim { rate, package, overhead } => {
            let budget = UplinkBudget::new(rate, overhead)?;
            let path = package.unwrap_or_else(|| paths.file("package.ldet"));
            let bytes = read_archive(&path, "package")?.byte_len() as u64;
            println!("{bytes} bytes at {rate} bit/s: {:.2} s", uplink_time(bytes, &budget));
        }
        Command::Eval { weights } => {
            let path = weights.unwrap_or_else(|| paths.file("merged.ldet"));
            let model = load_model(&cfg, &read_archive(&path, "weights")?)?;
            let test = load_dataset(&paths.file("test.ldet")).context("reading test scenes")?;
            let split = |d: Domain| -> Vec<SceneSample> { test.iter().filter(|s| s.domain == d).cloned().collect() };
            print_metrics("mixture", &evaluate(&model, &test, 0.5)?);
            for d in [Domain::D1, Domain::D2] {
                let part = split(d);
                if !part.is_empty() {
                    print_metrics(&d.to_string(), &evaluate(&model, &part, 0.5)?);
                }
            }
        }
        Command::Gradcheck { policy, full_size, step } => {
            let detector = if full_size { cfg.detector.clone() } else { DetectorConfig::tiny() };
            let policies = match policy {
                Some(p) => vec![p.parse::<FinetunePolicy>()?],
                None => FinetunePolicy::ALL.to_vec(),
            };
            let mut model = DetectorModel::new(&detector, cfg.seed)?;
            gradcheck_point(&mut model, cfg.seed, 0.1)?;
            let sample = synth_sample(cfg.seed, Domain::D2, 0, detector.backbone.image_size);
            let mut worst = 0f64;
            for p in policies {
                let mask = apply_policy(&model.store, p)?;
                let report = gradcheck(&model, &mask.mask, &sample, step)?;
                println!("{p}: {} scalars, max relative error {:.3e}", report.checked, report.max_rel_error);
                worst = worst.max(report.max_rel_error);
            }
            if worst > 1e-4 {
                bail!(Error::Numeric(format!(
                    "gradient mismatch {worst:.3e} exceeds 1e-4 (relative, floor {GRAD_FLOOR})"
                )));
            }
        }
    }
    Ok(())
}
