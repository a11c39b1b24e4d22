//! Command-line interface: `summarize`, `count`, `sweep`, `gradcheck` and
//! `train`.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analytics::{count_config, sweep_ratio, write_sweep_csv, CountReport};
use crate::channel_ops::SplitRatio;
use crate::checkpoint;
use crate::data::{self, Dataset, Normalization, Variant};
use crate::error::{Error, Result};
use crate::network::{ArchConfig, ArchRow, Family, Model, Width};
use crate::params::Parameters;
use crate::train::{self, gradcheck, TrainConfig};

pub const DATA_ENV: &str = "AUGSHUFFLE_DATA";

#[derive(Parser, Debug)]
#[command(
    name = "augshuffle",
    version,
    about = "AugShuffleNet / ShuffleNetV2 builder, cost counter and toy trainer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the layer table of one model.
    Summarize(ModelArgs),
    /// Count multiply-adds and parameters.
    Count(CountArgs),
    /// Count an augmented model at several split ratios (CSV).
    Sweep(SweepArgs),
    /// Compare every backward rule with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a model on a small CIFAR subset.
    Train(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Aug,
    V2,
    /// Both families side by side (count only).
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

fn parse_width(s: &str) -> std::result::Result<Width, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ratio(s: &str) -> std::result::Result<SplitRatio, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    SplitRatio::new(v).map_err(|e| e.to_string())
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "aug")]
    pub family: FamilyArg,
    #[arg(long, value_parser = parse_width, default_value = "1.0")]
    pub width: Width,
    /// Split ratio of the augmented blocks (default 0.375).
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<SplitRatio>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct CountArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Include the per-layer table in text output.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long, value_parser = parse_width, default_value = "1.5")]
    pub width: Width,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, value_parser = parse_ratio, value_delimiter = ',', default_value = "0.125,0.25,0.375")]
    pub ratios: Vec<SplitRatio>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 3)]
    pub instances: usize,
    /// Skip the whole-network check.
    #[arg(long)]
    pub no_network: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturb the analytic gradients; every check must then fail.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "aug")]
    pub family: FamilyArg,
    #[arg(long, value_parser = parse_width, default_value = "0.5")]
    pub width: Width,
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<SplitRatio>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Directory with the CIFAR binary files.
    #[arg(long, env = DATA_ENV)]
    pub data: Option<PathBuf>,
    /// Train on a generated class-structured dataset instead of CIFAR.
    #[arg(long)]
    pub synthetic: bool,
    /// Number of training images used.
    #[arg(long, default_value_t = 500)]
    pub subset: usize,
    /// Number of test images evaluated each epoch (0 disables).
    #[arg(long, default_value_t = 200)]
    pub test_subset: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_augment: bool,
    /// Output directory for `metrics.csv` and `model.bin`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// The command ran but a validation it performs failed.
    Failed(String),
}

fn single_family(f: FamilyArg) -> Result<Family> {
    match f {
        FamilyArg::Aug => Ok(Family::AugShuffleNet),
        FamilyArg::V2 => Ok(Family::ShuffleNetV2),
        FamilyArg::Both => Err(Error::Usage(
            "--family both is only supported by count".into(),
        )),
    }
}

fn config_for(
    family: Family,
    width: Width,
    classes: usize,
    ratio: Option<SplitRatio>,
) -> Result<ArchConfig> {
    ArchConfig::new(family, width, classes, ratio)
}

/// Machine-readable form of `summarize`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ArchConfig,
    pub rows: Vec<ArchRow>,
    pub total_madds: u64,
    pub total_params: u64,
}

pub fn summarize(cfg: &ArchConfig) -> Result<ModelSummary> {
    let model = Model::<f32>::build(cfg.clone(), 0)?;
    let report = crate::analytics::count_network(&model)?;
    Ok(ModelSummary {
        config: cfg.clone(),
        rows: model.architecture()?,
        total_madds: report.total_madds,
        total_params: report.total_params,
    })
}

fn dash(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

fn title(cfg: &ArchConfig) -> String {
    match cfg.split_ratio {
        Some(r) => format!(
            "{} {} (r = {r}, {} classes)",
            cfg.family, cfg.width, cfg.num_classes
        ),
        None => format!("{} {} ({} classes)", cfg.family, cfg.width, cfg.num_classes),
    }
}

fn write_summary_text(s: &ModelSummary, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{}", title(&s.config))?;
    writeln!(
        out,
        "{:<11} {:>8} {:>6} {:>7} {:>7} {:>9}",
        "layer", "output", "ksize", "stride", "repeat", "channels"
    )?;
    for r in &s.rows {
        let size = r
            .output_size
            .map(|v| format!("{v}x{v}"))
            .unwrap_or_else(|| "-".into());
        let k = r
            .kernel
            .map(|v| format!("{v}x{v}"))
            .unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<11} {:>8} {:>6} {:>7} {:>7} {:>9}",
            r.layer,
            size,
            k,
            dash(r.stride),
            dash(r.repeat),
            r.channels
        )?;
    }
    writeln!(
        out,
        "total: {:.2}M MAdds, {:.2}M params ({} / {})",
        s.total_madds as f64 / 1e6,
        s.total_params as f64 / 1e6,
        s.total_madds,
        s.total_params
    )?;
    Ok(())
}

fn write_count_text(reports: &[CountReport], layers: bool, out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "{:<28} {:>12} {:>9} {:>12} {:>9}",
        "model", "MAdds", "(M)", "params", "(M)"
    )?;
    for r in reports {
        writeln!(
            out,
            "{:<28} {:>12} {:>9.2} {:>12} {:>9.2}",
            r.model,
            r.total_madds,
            r.madds_millions(),
            r.total_params,
            r.params_millions()
        )?;
    }
    if let [aug, v2] = reports {
        writeln!(
            out,
            "ratio {} / {}: MAdds {:.4}, params {:.4}",
            aug.model,
            v2.model,
            aug.total_madds as f64 / v2.total_madds as f64,
            aug.total_params as f64 / v2.total_params as f64
        )?;
    }
    if layers {
        for r in reports {
            writeln!(out, "\n{}", r.model)?;
            writeln!(
                out,
                "{:<34} {:<16} {:>14} {:>12} {:>10}",
                "layer", "kind", "output", "MAdds", "params"
            )?;
            for l in &r.layers {
                let [c, h, w] = l.output_shape;
                writeln!(
                    out,
                    "{:<34} {:<16} {:>14} {:>12} {:>10}",
                    l.name,
                    l.kind,
                    format!("{c}x{h}x{w}"),
                    l.madds,
                    l.params()
                )?;
            }
        }
    }
    Ok(())
}

fn write_count_csv(reports: &[CountReport], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "layer",
        "kind",
        "madds",
        "weight_params",
        "norm_params",
    ])?;
    for r in reports {
        for l in &r.layers {
            w.write_record([
                r.model.clone(),
                l.name.clone(),
                l.kind.clone(),
                l.madds.to_string(),
                l.weight_params.to_string(),
                l.norm_params.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn with_output(
    path: &Option<PathBuf>,
    stdout: &mut dyn Write,
    f: impl FnOnce(&mut dyn Write) -> Result<()>,
) -> Result<()> {
    match path {
        Some(p) => {
            let mut file = std::io::BufWriter::new(fs::File::create(p)?);
            f(&mut file)?;
            file.flush()?;
            Ok(())
        }
        None => f(stdout),
    }
}

fn cmd_summarize(a: &ModelArgs, stdout: &mut dyn Write) -> Result<Outcome> {
    let cfg = config_for(single_family(a.family)?, a.width, a.classes, a.ratio)?;
    let s = summarize(&cfg)?;
    with_output(&a.out, stdout, |out| match a.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, &s)?;
            writeln!(out)?;
            Ok(())
        }
        Format::Text => write_summary_text(&s, out),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "layer",
                "output_size",
                "kernel",
                "stride",
                "repeat",
                "channels",
            ])?;
            for r in &s.rows {
                let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    r.layer.clone(),
                    opt(r.output_size),
                    opt(r.kernel),
                    opt(r.stride),
                    opt(r.repeat),
                    r.channels.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        }
    })?;
    Ok(Outcome::Ok)
}

fn cmd_count(a: &CountArgs, stdout: &mut dyn Write) -> Result<Outcome> {
    let m = &a.model;
    let configs = match m.family {
        FamilyArg::Both => vec![
            config_for(Family::AugShuffleNet, m.width, m.classes, m.ratio)?,
            config_for(Family::ShuffleNetV2, m.width, m.classes, None)?,
        ],
        f => vec![config_for(single_family(f)?, m.width, m.classes, m.ratio)?],
    };
    let reports = configs
        .iter()
        .map(count_config)
        .collect::<Result<Vec<_>>>()?;
    with_output(&m.out, stdout, |out| match m.format {
        Format::Text => write_count_text(&reports, a.layers, out),
        Format::Csv => write_count_csv(&reports, out),
        Format::Json => {
            if let [one] = reports.as_slice() {
                serde_json::to_writer_pretty(&mut *out, one)?;
            } else {
                serde_json::to_writer_pretty(&mut *out, &reports)?;
            }
            writeln!(out)?;
            Ok(())
        }
    })?;
    Ok(Outcome::Ok)
}

fn cmd_sweep(a: &SweepArgs, stdout: &mut dyn Write) -> Result<Outcome> {
    if a.ratios.is_empty() {
        return Err(Error::Usage("--ratios needs at least one value".into()));
    }
    let cfg = ArchConfig::new(Family::AugShuffleNet, a.width, a.classes, None)?;
    let rows = sweep_ratio(&cfg, &a.ratios)?;
    with_output(&a.out, stdout, |out| match a.format {
        Format::Csv => write_sweep_csv(&rows, out),
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, &rows)?;
            writeln!(out)?;
            Ok(())
        }
        Format::Text => {
            let base = rows.last().expect("at least one row");
            writeln!(
                out,
                "{:>6} {:>12} {:>10} {:>8} {:>8}",
                "r", "MAdds", "params", "MAdds%", "params%"
            )?;
            for r in &rows {
                writeln!(
                    out,
                    "{:>6} {:>12} {:>10} {:>8.1} {:>8.1}",
                    r.r,
                    r.madds,
                    r.params,
                    100.0 * r.madds as f64 / base.madds as f64,
                    100.0 * r.params as f64 / base.params as f64
                )?;
            }
            writeln!(out, "(percentages relative to r = {})", base.r)?;
            Ok(())
        }
    })?;
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> Result<Outcome> {
    let report = gradcheck::run(gradcheck::GradcheckOptions {
        seed: a.seed,
        instances: a.instances.max(1),
        network: !a.no_network,
        corrupt: a.corrupt_backward,
    })?;
    with_output(&a.out, stdout, |out| {
        match a.format {
            Format::Json => {
                serde_json::to_writer_pretty(&mut *out, &report)?;
                writeln!(out)?;
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(&mut *out);
                for row in &report.rows {
                    w.serialize(row)?;
                }
                w.flush()?;
            }
            Format::Text => {
                for r in &report.rows {
                    writeln!(
                        out,
                        "{:<4} {:<28} max rel error {:.3e} (tol {:.0e}, {} instances)",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.op,
                        r.max_error,
                        r.tolerance,
                        r.instances
                    )?;
                }
            }
        }
        Ok(())
    })?;
    let failed: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op.as_str())
        .collect();
    Ok(if failed.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Failed(format!("gradient check failed for: {}", failed.join(", ")))
    })
}

fn toy_data(a: &TrainArgs, variant: Variant) -> Result<(Dataset, Option<Dataset>)> {
    let (train, test) = match (&a.data, a.synthetic) {
        (_, true) => {
            // Round-trip through the binary format so the loader is exercised.
            let dir = a.out.join("synthetic");
            let train = data::synthetic(variant.num_classes(), a.subset, a.seed ^ 0x5eed);
            // Same prototypes, fresh images: generate past the training set and drop it.
            let mut test = data::synthetic(
                variant.num_classes(),
                a.test_subset + train.len(),
                a.seed ^ 0x5eed,
            );
            test.pixels.drain(..train.len() * data::PIXELS);
            test.labels.drain(..train.len());
            data::write_cifar(&dir, variant, &train, &test)?;
            data::load_cifar_any(&dir, variant)?
        }
        (Some(dir), false) => data::load_cifar_any(dir, variant)?,
        (None, false) => {
            return Err(Error::Usage(format!(
                "no dataset: pass --data DIR (or set {DATA_ENV}) or use --synthetic"
            )))
        }
    };
    let train = train.take(a.subset);
    let test = (a.test_subset > 0 && !test.is_empty()).then(|| test.take(a.test_subset));
    Ok((train, test))
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write) -> Result<Outcome> {
    let variant = match a.classes {
        10 => Variant::Cifar10,
        100 => Variant::Cifar100,
        n => {
            return Err(Error::Usage(format!(
                "--classes must be 10 or 100 for CIFAR, got {n}"
            )))
        }
    };
    let cfg = config_for(single_family(a.family)?, a.width, a.classes, a.ratio)?;
    fs::create_dir_all(&a.out)?;
    let (train_set, test_set) = toy_data(a, variant)?;
    let norm = Normalization::from_dataset(&train_set);
    let mut model = Model::<f32>::build(cfg, a.seed)?;
    let mut tcfg = TrainConfig::new(a.epochs, a.seed);
    tcfg.optim.batch_size = a.batch_size;
    tcfg.augment = !a.no_augment;

    if a.format == Format::Text {
        writeln!(
            stdout,
            "training {} on {} images ({} params), {} epochs",
            model.config.tag(),
            train_set.len(),
            model.learnable_count(),
            a.epochs
        )?;
    }
    let mut print_err = None;
    let history = train::train_loop(
        &mut model,
        &train_set,
        test_set.as_ref(),
        &norm,
        &tcfg,
        |m| {
            if a.format != Format::Text {
                return;
            }
            let test = m
                .test_acc
                .map(|t| format!(" test_acc {t:.3}"))
                .unwrap_or_default();
            if let Err(e) = writeln!(
                stdout,
                "epoch {:>3} lr {:.5} loss {:.4} train_acc {:.3}{test}",
                m.epoch, m.lr, m.train_loss, m.train_acc
            ) {
                print_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = print_err {
        return Err(e.into());
    }

    let metrics_path = a.out.join("metrics.csv");
    train::write_metrics_csv(&history, fs::File::create(&metrics_path)?)?;
    let model_path = a.out.join("model.bin");
    checkpoint::save(&model_path, &model, Some(norm))?;

    // The saved file must reproduce the evaluation exactly.
    let eval_set = test_set.as_ref().unwrap_or(&train_set);
    let before = train::evaluate(&model, eval_set, &norm, a.batch_size)?;
    let (reloaded, header) = checkpoint::load(&model_path)?;
    let after = train::evaluate(
        &reloaded,
        eval_set,
        &header.normalization.unwrap_or(norm),
        a.batch_size,
    )?;
    match a.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *stdout, &history)?;
            writeln!(stdout)?;
        }
        Format::Csv => train::write_metrics_csv(&history, &mut *stdout)?,
        Format::Text => writeln!(
            stdout,
            "wrote {} and {}; eval accuracy {before:.4} (reloaded {after:.4})",
            metrics_path.display(),
            model_path.display()
        )?,
    }
    Ok(if before == after {
        Outcome::Ok
    } else {
        Outcome::Failed(format!(
            "reloaded model accuracy {after} differs from {before}"
        ))
    })
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<Outcome> {
    match &cli.command {
        Command::Summarize(a) => cmd_summarize(a, stdout),
        Command::Count(a) => cmd_count(a, stdout),
        Command::Sweep(a) => cmd_sweep(a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
    }
}

/// Parse `args` (including the program name) and run.
pub fn run_args<I, S>(args: I, stdout: &mut dyn Write) -> Result<Outcome>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(&cli, stdout)
}
