//! Experiment harness CLI.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/format error,
//! 4 numeric failure (non-finite loss). `FP_SEED` overrides the seed of any
//! seeded subcommand.

use clap::{Parser, Subcommand, ValueEnum};
use frostbit_core::data::{
    save_features_bin, save_targets_csv, split, synth_generate, TargetRecord, TaskName, TaskSpec,
};
use frostbit_core::distill::{
    collapse_diagnostics, distill_step, noise_dropout_augment, DistillConfig, DistillState, ProjectionNet,
};
use frostbit_core::error::Error;
use frostbit_core::owm::{AdamConfig, AdamState};
use frostbit_core::report::{
    curves_to_csv, curves_to_svg, parse_curves_csv, parse_records_csv, records_to_csv, records_to_markdown,
    RecordRow,
};
use frostbit_core::tensor::Tensor;
use frostbit_core::train::{ablate, train, AblationRow, ExperimentConfig, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "frostbit", version, about = "Training-strategy experiments over frozen features")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    #[value(name = "MRD1")]
    Mrd1,
    #[value(name = "MRD2")]
    Mrd2,
    #[value(name = "LF")]
    Lf,
}

impl From<TaskArg> for TaskName {
    fn from(t: TaskArg) -> TaskName {
        match t {
            TaskArg::Mrd1 => TaskName::Mrd1,
            TaskArg::Mrd2 => TaskName::Mrd2,
            TaskArg::Lf => TaskName::Lf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset: targets CSV plus FPFT feature file.
    Generate {
        #[arg(long)]
        task: TaskArg,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Train one experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Prefix for `<prefix>.metrics.csv` and `<prefix>.curves.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the encoding × loss × OR ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the student-teacher distillation loop on toy data.
    Distill {
        #[arg(long, default_value_t = 0.1)]
        tps: f64,
        #[arg(long, default_value_t = 0.04)]
        tpt: f64,
        /// Teacher EMA momentum.
        #[arg(long, default_value_t = 0.996)]
        l: f64,
        /// Center EMA momentum.
        #[arg(long, default_value_t = 0.9)]
        m: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV log: step,loss,teacher_student_divergence,center_norm.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reformat a records CSV, optionally plotting learning curves.
    Report {
        #[arg(long, value_name = "CSV")]
        r#in: PathBuf,
        #[arg(long, value_enum)]
        format: ReportFormat,
        /// Write a learning-curve SVG here (needs --curve-data).
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Curves CSV emitted by `train --out`.
        #[arg(long)]
        curve_data: Option<PathBuf>,
    },
}

fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var("FP_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("FP_SEED must be an unsigned integer: {e}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = ExperimentConfig::from_json_str(&text)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<frostbit_core::data::Dataset, Error> {
    match (&cfg.data_features, &cfg.data_targets) {
        (Some(feat_path), Some(target_path)) => {
            let features = frostbit_core::data::load_features_bin(feat_path)?;
            let parsed = frostbit_core::data::load_targets_csv(target_path)?;
            for rej in &parsed.rejected {
                eprintln!("warning: rejected row at line {}: {}", rej.line, rej.reason);
            }
            let targets: Vec<f64> = parsed
                .records
                .iter()
                .filter(|r| r.task == cfg.task)
                .map(|r| r.value_mm)
                .collect();
            if targets.len() != features.shape()[0] {
                return Err(Error::Config(format!(
                    "{} feature rows but {} {} targets",
                    features.shape()[0],
                    targets.len(),
                    cfg.task
                )));
            }
            frostbit_core::data::Dataset::new(features, targets, frostbit_core::data::Provenance::File)
        }
        (None, None) => synth_generate(&cfg.task_spec(), cfg.synth_n, cfg.synth_dim, cfg.synth_noise, cfg.seed),
        _ => Err(Error::Config(
            "data_features and data_targets must be set together".into(),
        )),
    }
}

fn single_row(cfg: &ExperimentConfig, metrics: frostbit_core::train::MetricsRecord) -> AblationRow {
    AblationRow {
        task: cfg.task,
        head: cfg.head,
        loss_label: match cfg.loss {
            frostbit_core::train::LossKind::Mse => "MSE".to_string(),
            frostbit_core::train::LossKind::Mae => "MAE".to_string(),
            frostbit_core::train::LossKind::Bce => "BCE".to_string(),
            frostbit_core::train::LossKind::Focal => format!("Focal {}", cfg.loss_gamma),
        },
        gamma: cfg.loss_gamma,
        encoding_label: if cfg.encoding_enabled { "Classification" } else { "Regression" }.to_string(),
        or_enabled: cfg.or_enabled,
        metrics,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Generate { task, n, dim, noise, seed, out_prefix } => {
            let seed = seed_override()?.unwrap_or(seed);
            let spec = TaskSpec::for_task(task.into());
            let data = synth_generate(&spec, n, dim, noise, seed)?;
            let records: Vec<TargetRecord> = data
                .targets
                .iter()
                .enumerate()
                .map(|(i, &v)| TargetRecord {
                    id: i as u64,
                    task: spec.name,
                    value_mm: v,
                })
                .collect();
            let csv_path = path_with_suffix(&out_prefix, ".targets.csv");
            let bin_path = path_with_suffix(&out_prefix, ".features.fpft");
            save_targets_csv(&csv_path, &records)?;
            save_features_bin(&bin_path, &data.features)?;
            println!(
                "generated {} {} samples (dim {dim}, noise {noise}, seed {seed})",
                n, spec.name
            );
            println!("  targets:  {}", csv_path.display());
            println!("  features: {}", bin_path.display());
            Ok(())
        }
        Cmd::Train { config, out } => {
            let cfg = load_config(&config)?;
            let data = load_dataset(&cfg)?;
            let splits = split(data.len(), cfg.seed)?;
            let (_, metrics) = train(&cfg, &data, &splits)?;
            println!(
                "task={} head={:?} loss={:?} gamma={} encoding={} or={} mse={} mae={} r2={}",
                cfg.task,
                cfg.head,
                cfg.loss,
                cfg.loss_gamma,
                cfg.encoding_enabled,
                cfg.or_enabled,
                metrics.mse,
                metrics.mae,
                metrics.r2
            );
            if let Some(prefix) = out {
                let row = single_row(&cfg, metrics.clone());
                std::fs::write(path_with_suffix(&prefix, ".metrics.csv"), records_to_csv(&[row]))?;
                std::fs::write(
                    path_with_suffix(&prefix, ".curves.csv"),
                    curves_to_csv(&metrics.learning_curve),
                )?;
            }
            Ok(())
        }
        Cmd::Ablate { config, grid, out } => {
            let cfg = load_config(&config)?;
            let grid = match grid {
                Some(path) => GridSpec::from_json_str(&std::fs::read_to_string(path)?)?,
                None => GridSpec::default(),
            };
            let data = load_dataset(&cfg)?;
            let splits = split(data.len(), cfg.seed)?;
            let rows = ablate(&cfg, &grid, &data, &splits)?;
            let csv = records_to_csv(&rows);
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    println!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Distill { tps, tpt, l, m, steps, seed, out } => {
            let seed = seed_override()?.unwrap_or(seed);
            let cfg = DistillConfig {
                tps,
                tpt,
                teacher_momentum: l,
                center_momentum: m,
            };
            let dim = 8;
            let k = 16;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Two-cluster toy corpus.
            let n = 64;
            let mut rows = Vec::with_capacity(n * dim);
            for i in 0..n {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                for j in 0..dim {
                    let center = sign * if j % 2 == 0 { 1.5 } else { -1.0 };
                    rows.push(center + rng.random_range(-0.2..0.2));
                }
            }
            let batch = Tensor::new(vec![n, dim], rows).map_err(|e| Error::Config(e.to_string()))?;

            let net = ProjectionNet::seeded(dim, 32, k, &mut rng);
            let mut state = DistillState::new(net, cfg)?;
            let mut adam = AdamState::new(AdamConfig::default());
            let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd157);
            let mut log = String::from("step,loss,teacher_student_divergence,center_norm\n");
            let mut last = None;
            for step in 0..steps {
                let entry = {
                    let augment = noise_dropout_augment(0.1, 0.1, &mut aug_rng);
                    distill_step(&mut state, &batch, augment, &mut adam)?
                };
                if !entry.loss.is_finite() {
                    return Err(Error::NonFinite(format!("distill loss became {} at step {step}", entry.loss)));
                }
                log.push_str(&format!(
                    "{step},{},{},{}\n",
                    entry.loss, entry.teacher_student_divergence, entry.center_norm
                ));
                last = Some(entry);
            }
            let diag = collapse_diagnostics(&state, &batch)?;
            if let Some(entry) = last {
                println!(
                    "distilled {steps} steps: final loss {}, divergence {}, mean-teacher entropy {:.4}",
                    entry.loss, entry.teacher_student_divergence, diag.mean_entropy
                );
            }
            if let Some(path) = out {
                std::fs::write(&path, log)?;
                println!("log: {}", path.display());
            }
            Ok(())
        }
        Cmd::Report { r#in, format, curves, curve_data } => {
            let rows: Vec<RecordRow> = parse_records_csv(&std::fs::read_to_string(&r#in)?)?;
            match format {
                ReportFormat::Csv => {
                    // Re-emission after validation.
                    println!("{}", frostbit_core::report::RECORDS_HEADER);
                    for r in &rows {
                        println!(
                            "{},{},{},{},{},{},{},{},{}",
                            r.task, r.head, r.loss, r.gamma, r.encoding, r.or_enabled, r.mse, r.mae, r.r2
                        );
                    }
                }
                ReportFormat::Markdown => print!("{}", records_to_markdown(&rows)),
            }
            match (curves, curve_data) {
                (Some(svg_path), Some(data_path)) => {
                    let curve = parse_curves_csv(&std::fs::read_to_string(&data_path)?)?;
                    std::fs::write(&svg_path, curves_to_svg(&curve)?)?;
                    eprintln!("curves: {}", svg_path.display());
                }
                (Some(_), None) => {
                    return Err(Error::Config("--curves needs --curve-data <csv>".into()));
                }
                _ => {}
            }
            Ok(())
        }
    }
}

fn path_with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
