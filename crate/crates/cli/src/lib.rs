//! Subcommands of the `lamae` binary.
//!
//! Every subcommand reads the same flat `key = value` configuration; `--set`
//! overrides single keys after the file is applied.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lamae_core::config::Mode;
use lamae_core::data::manifest::{write_dataset, FrameStorage, Header, LabelInfo};
use lamae_core::data::synth::{generate_dataset, predicates};
use lamae_core::plot::emit_plots;
use lamae_core::report::{aggregate, top_codes_by_f1};
use lamae_core::train::{evaluate, Dataset, EvalReport, MetricsLog, Trainer};
use lamae_core::{LamaeError, Result, RunConfig};
use lamae_tensor::{DType, Float};

#[derive(Debug, Parser)]
#[command(name = "lamae", version, about = "Latent-attention masked autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-reconstruction pretraining.
    Pretrain(RunArgs),
    /// Finetune a pretrained checkpoint on labels or a regression target.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Train the head only.
        #[arg(long)]
        frozen: bool,
    },
    /// Evaluate a finetuned checkpoint and write a JSON report.
    Eval(RunArgs),
    /// Write a synthetic dataset (PGM frames plus manifest).
    Generate(RunArgs),
    /// Render loss, learning-rate, and per-code charts.
    Plot {
        /// Metrics logs (CSV) to draw loss curves from.
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        /// Evaluation reports to draw per-code bars from.
        #[arg(long = "report")]
        reports: Vec<PathBuf>,
        /// Configuration whose schedule gives the learning-rate curve.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Merge per-seed reports into a mean ± std table.
    Aggregate {
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "aggregate")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    /// Reads the configuration; `mode` picks the run mode given the one the
    /// file declares.
    pub fn load(&self, mode: impl FnOnce(Mode) -> Mode) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| LamaeError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = RunConfig::from_text(&text)?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| LamaeError::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.model = cfg.model.normalized();
        cfg.mode = mode(cfg.mode);
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(args) => train(args.load(|_| Mode::Pretrain)?, args),
        Command::Finetune { run, frozen } => {
            let cfg = run.load(|declared| {
                if *frozen || declared == Mode::FinetuneFrozen {
                    Mode::FinetuneFrozen
                } else {
                    Mode::FinetuneFull
                }
            })?;
            train(cfg, run)
        }
        Command::Eval(args) => eval(args),
        Command::Generate(args) => generate(args),
        Command::Plot {
            logs,
            reports,
            config,
            out,
        } => plot(logs, reports, config.as_deref(), out),
        Command::Aggregate { reports, out } => aggregate_reports(reports, out),
    }
}

fn train(cfg: RunConfig, args: &RunArgs) -> Result<()> {
    let out = args.out_dir(cfg.mode.name());
    let data = Dataset::load(&cfg)?;
    match cfg.dtype {
        DType::F32 => train_as::<f32>(&cfg, &data, &out),
        DType::F64 => train_as::<f64>(&cfg, &data, &out),
    }
}

fn train_as<T: Float>(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<()> {
    let mut t = Trainer::<T>::new(cfg)?;
    let result = t.run(data, Some(out));
    if result.is_err() {
        // Keep the log of what ran; the last good checkpoint is left in place.
        let _ = fs::create_dir_all(out)
            .and_then(|_| fs::write(out.join("metrics.csv"), t.log.to_csv().unwrap_or_default()));
    }
    result?;
    println!(
        "{} {}: {} steps, final loss {:.6}, outputs in {}",
        cfg.mode.name(),
        cfg.model.variant.name(),
        t.step,
        t.trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn eval(args: &RunArgs) -> Result<()> {
    let cfg = args.load(|_| Mode::Eval)?;
    let data = Dataset::load(&cfg)?;
    let report = match cfg.dtype {
        DType::F32 => evaluate::<f32>(&cfg, &data)?,
        DType::F64 => evaluate::<f64>(&cfg, &data)?,
    };
    let out = args.out_dir("eval");
    fs::create_dir_all(&out).map_err(|e| LamaeError::Io {
        path: out.clone(),
        source: e,
    })?;
    let path = out.join("report.json");
    write(&path, &report.to_json()?)?;
    if let Some(c) = &report.classification {
        println!(
            "{} {}: macro AUROC {:.4}, macro F1 {:.4} ({} codes excluded)",
            report.variant,
            report.split,
            c.macro_auroc.value,
            c.macro_f1,
            c.macro_auroc.excluded.len()
        );
    }
    if let Some(r) = &report.regression {
        println!(
            "{} {}: MAE {:.4} over {} studies",
            report.variant, report.split, r.mae, r.n
        );
    }
    Ok(())
}

fn generate(args: &RunArgs) -> Result<()> {
    let cfg = args.load(|_| Mode::Generate)?;
    let studies = generate_dataset(&cfg.generator, cfg.seed)?;
    let header = Header {
        labels: predicates(cfg.generator.label_set)
            .iter()
            .map(|p| LabelInfo {
                name: p.name.into(),
                rule: Some(p.rule.into()),
            })
            .collect(),
        generator: Some(
            cfg.to_text()
                .lines()
                .filter(|l| l.starts_with("gen_") || l.starts_with("seed "))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
    };
    let out = args.out_dir("data");
    let manifest = write_dataset(&out, &studies, Some(&header), FrameStorage::Pgm)?;
    println!("wrote {} studies, manifest {}", studies.len(), manifest.display());
    Ok(())
}

fn stem(p: &Path) -> String {
    let parent = p
        .parent()
        .and_then(|d| d.file_name())
        .map(|s| s.to_string_lossy().into_owned());
    let file = p
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    match parent {
        Some(d) if !d.is_empty() => format!("{d}_{file}"),
        _ => file,
    }
}

fn plot(logs: &[PathBuf], reports: &[PathBuf], config: Option<&Path>, out: &Path) -> Result<()> {
    let logs = logs
        .iter()
        .map(|p| Ok((stem(p), MetricsLog::read(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let reports = reports
        .iter()
        .map(|p| Ok((stem(p), EvalReport::read(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let schedule = match config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| LamaeError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let cfg = RunConfig::from_text(&text)?;
            if !cfg.schedule.total_epochs.is_finite() {
                return Err(LamaeError::Config("the schedule needs `epochs` to plot".into()));
            }
            Some(cfg.schedule)
        }
        None => None,
    };
    let files = emit_plots(&logs, &reports, schedule.as_ref(), out)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn aggregate_reports(paths: &[PathBuf], out: &Path) -> Result<()> {
    let reports = paths.iter().map(|p| EvalReport::read(p)).collect::<Result<Vec<_>>>()?;
    let table = aggregate(&reports)?;
    fs::create_dir_all(out).map_err(|e| LamaeError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let md = table.to_markdown();
    write(&out.join("table.md"), &md)?;
    write(&out.join("table.csv"), &table.to_csv()?)?;
    let top = top_codes_by_f1(&reports, 10);
    if !top.is_empty() {
        let mut csv = String::from("code,mean_f1,mean_auroc\n");
        for c in &top {
            csv.push_str(&format!(
                "{},{},{}\n",
                c.code,
                c.mean_f1,
                c.mean_auroc.map_or(String::new(), |a| a.to_string())
            ));
        }
        write(&out.join("top_codes.csv"), &csv)?;
    }
    print!("{md}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LamaeError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
