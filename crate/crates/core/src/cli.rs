//! Command-line interface: pretraining, evaluation, sparsity statistics,
//! checkpoint export, and configuration validation.
//!
//! Every failure surfaces as one `error: ...` line on stderr; exit codes are
//! 0 on success, 2 for usage or configuration problems, 1 for runtime
//! failures. Runs write a `manifest.txt` (code version + resolved
//! configuration) sufficient to reproduce them.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::arch::TrunkParams;
use crate::checkpoint::{load_trainer, save_trainer, trunk_sha256, LoadedCheckpoint};
use crate::config::{DataSource, RunConfig};
use crate::data::{
    gen_synthetic, load_cifar10, load_cifar100, split_three_way, Dataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{self, Manifest};
use crate::rng::{sample_without_replacement, RngKey};
use crate::train::Trainer;

#[derive(Debug, Parser)]
#[command(
    name = "metacl",
    version,
    about = "Meta-pretraining of visual representations for continual few-shot learning"
)]
pub struct Cli {
    /// Run single-threaded (results are bit-identical either way).
    #[arg(long, global = true)]
    pub serial: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a trunk; writes metrics, checkpoints and a manifest.
    Pretrain {
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override run.total_steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Override run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the continual few-shot protocol on a checkpointed trunk.
    Metatest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Representation sparsity statistics of a checkpointed trunk.
    Sparsity {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Magnitude threshold for the near-zero fraction.
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        /// Number of images sampled for the statistics.
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Write the magnitude histogram as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump a checkpoint's parameters to CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a configuration file and print the resolved values.
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parse argv and dispatch; the binary's whole behavior.
pub fn main_from_args() -> ExitCode {
    let cli = Cli::parse();
    crate::parallel::set_parallel(!cli.serial);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Execute one subcommand.
pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, steps, seed, out, resume } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(steps) = steps {
                cfg.total_steps = steps;
                cfg.warmup = cfg.warmup.min(steps);
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = out.to_string_lossy().into_owned();
            }
            cfg.validate()?;
            pretrain(&cfg, resume.as_deref())
        }
        Command::Metatest { config, checkpoint, out } => {
            let cfg = load_config(config.as_deref())?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            metatest(&cfg, &checkpoint, &out)
        }
        Command::Sparsity { config, checkpoint, tau, samples, out } => {
            let cfg = load_config(config.as_deref())?;
            sparsity(&cfg, &checkpoint, tau, samples, out.as_deref())
        }
        Command::Export { checkpoint, out } => export(&checkpoint, &out),
        Command::ValidateConfig { config } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.echo());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse_file(p),
        None => RunConfig::parse(""),
    }
}

/// All splits a data source provides.
struct Splits {
    train: Option<Dataset>,
    val: Option<Dataset>,
    test: Option<Dataset>,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                classes: cfg.data.classes,
                per_class: cfg.data.per_class,
                hw: cfg.data.hw,
                difficulty: cfg.data.difficulty,
            };
            let full = gen_synthetic(&spec, cfg.data.seed);
            let (train, val, test) = split_three_way(&full, cfg.data.seed)?;
            Ok(Splits { train: Some(train), val: Some(val), test: Some(test) })
        }
        DataSource::Cifar10 => {
            let train = load_cifar10(Path::new(&cfg.data.path))?;
            Ok(Splits { train: Some(train), val: None, test: None })
        }
        DataSource::Cifar100 => {
            let (val, test) = load_cifar100(Path::new(&cfg.data.path), cfg.data.seed)?;
            Ok(Splits { train: None, val: Some(val), test: Some(test) })
        }
    }
}

fn write_manifest(dir: &Path, command: &str, extra: &[(&str, &str)], cfg: &RunConfig) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("manifest.code_version = {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("manifest.command = {command}\n"));
    for (k, v) in extra {
        text.push_str(&format!("manifest.{k} = {v}\n"));
    }
    text.push_str(&cfg.echo());
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

/// Reject checkpoints whose stored configuration would not reproduce the
/// parameters being loaded.
fn check_compatible(loaded: &LoadedCheckpoint, cfg: &RunConfig, full_settings: bool) -> Result<()> {
    let stored = RunConfig::parse(&loaded.config_echo).map_err(|e| {
        Error::Checkpoint(format!("checkpoint carries an unreadable config echo: {e}"))
    })?;
    if full_settings {
        if stored.train_settings() != cfg.train_settings() {
            return Err(Error::Config(
                "checkpoint was written under different training settings; \
                 resume with the original configuration"
                    .into(),
            ));
        }
    } else if stored.trunk_config() != cfg.trunk_config() {
        return Err(Error::Config(format!(
            "checkpoint trunk {:?} does not match configured trunk {:?}",
            stored.trunk_config(),
            cfg.trunk_config()
        )));
    }
    Ok(())
}

fn trunk_from_checkpoint(loaded: &LoadedCheckpoint, cfg: &RunConfig) -> Result<TrunkParams> {
    let trunk_cfg = cfg.trunk_config();
    let mut trunk = TrunkParams::init(&trunk_cfg, RngKey::from_seed(0))?;
    trunk.load_flat(&loaded.snapshot.trunk_flat)?;
    Ok(trunk)
}

fn pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    if cfg.data.source == DataSource::Cifar100 {
        return Err(Error::Config(
            "data.source = cifar100 provides no meta-train split; \
             pretrain needs synthetic or cifar10"
                .into(),
        ));
    }
    let splits = load_splits(cfg)?;
    let train_data = splits
        .train
        .ok_or_else(|| Error::Config("data source provided no meta-train split".into()))?;
    let mut trainer = Trainer::new(cfg.train_settings(), &train_data)?;

    let resuming = resume.is_some();
    if let Some(ckpt) = resume {
        let loaded = load_trainer(ckpt)?;
        check_compatible(&loaded, cfg, true)?;
        trainer.restore(&loaded.snapshot)?;
        eprintln!("resumed at step {} from {}", trainer.step, ckpt.display());
    }

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let resume_note = resume.map(|p| p.display().to_string()).unwrap_or_default();
    let extra: Vec<(&str, &str)> =
        if resuming { vec![("resumed_from", resume_note.as_str())] } else { Vec::new() };
    write_manifest(&out_dir, "pretrain", &extra, cfg)?;

    let metrics_path = out_dir.join("metrics.csv");
    let timings_path = out_dir.join("timings.csv");
    let mut metrics = open_csv(&metrics_path, "step,loss,fresh_acc,queue_acc,lr,grad_norm", resuming)?;
    let mut timings = open_csv(&timings_path, "step,wall_ms", resuming)?;

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let echo = cfg.echo();
    let progress_every = (cfg.total_steps / 20).max(1);
    while trainer.step < cfg.total_steps {
        let t0 = Instant::now();
        let m = trainer.meta_step()?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let queue_acc = m.queue_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            metrics,
            "{},{},{},{},{},{}",
            m.step, m.loss, m.fresh_accuracy, queue_acc, m.lr, m.grad_norm
        )?;
        writeln!(timings, "{},{wall_ms}", m.step)?;
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
            save_trainer(&ckpt_path, &trainer, &echo)?;
        }
        if trainer.step % progress_every == 0 || trainer.step == cfg.total_steps {
            eprintln!(
                "step {}/{} loss {:.4} fresh_acc {:.3}",
                trainer.step, cfg.total_steps, m.loss, m.fresh_accuracy
            );
        }
    }
    metrics.flush()?;
    timings.flush()?;
    save_trainer(&ckpt_path, &trainer, &echo)?;
    println!(
        "pretrain complete: {} steps (seed {}); trunk sha256 {}",
        trainer.step,
        cfg.seed,
        trunk_sha256(&trainer.trunk)
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn open_csv(path: &Path, header: &str, append: bool) -> Result<std::io::BufWriter<File>> {
    let file = if append {
        File::options().append(true).create(true).open(path)?
    } else {
        File::create(path)?
    };
    let fresh = file.metadata()?.len() == 0;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

fn metatest(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    if cfg.data.source == DataSource::Cifar10 {
        return Err(Error::Config(
            "data.source = cifar10 provides no meta-val/meta-test splits; \
             metatest needs synthetic or cifar100"
                .into(),
        ));
    }
    let loaded = load_trainer(checkpoint)?;
    check_compatible(&loaded, cfg, false)?;
    let trunk = trunk_from_checkpoint(&loaded, cfg)?;
    let hash = trunk_sha256(&trunk);

    let splits = load_splits(cfg)?;
    let (val, test) = match (splits.val, splits.test) {
        (Some(v), Some(t)) => (v, t),
        _ => return Err(Error::Config("data source provided no evaluation splits".into())),
    };
    let manifest = Manifest {
        checkpoint_hash: hash.clone(),
        config_echo: cfg.echo(),
        seed: cfg.eval.seed,
    };
    let report = eval::sweep(&cfg.trunk_config(), &trunk, &val, &test, &cfg.eval, manifest)?;

    std::fs::create_dir_all(out_dir)?;
    let rows_path = out_dir.join("cfsl_rows.csv");
    let summary_path = out_dir.join("cfsl_summary.csv");
    std::fs::write(&rows_path, eval::rows_csv(&report))?;
    std::fs::write(&summary_path, eval::summary_csv(&report))?;
    write_manifest(
        out_dir,
        "metatest",
        &[("checkpoint_sha256", hash.as_str())],
        cfg,
    )?;
    for row in &report.rows {
        println!(
            "C={}: accuracy {:.4} +/- {:.4} over {} tasks (lr {})",
            row.length,
            row.mean_accuracy,
            row.stderr,
            row.task_accuracies.len(),
            row.selected_lr
        );
    }
    println!("rows: {}", rows_path.display());
    println!("summary: {}", summary_path.display());
    Ok(())
}

fn sparsity(
    cfg: &RunConfig,
    checkpoint: &Path,
    tau: f64,
    samples: usize,
    out: Option<&Path>,
) -> Result<()> {
    let loaded = load_trainer(checkpoint)?;
    check_compatible(&loaded, cfg, false)?;
    let trunk = trunk_from_checkpoint(&loaded, cfg)?;

    let splits = load_splits(cfg)?;
    let data = splits
        .test
        .or(splits.val)
        .or(splits.train)
        .ok_or_else(|| Error::Config("data source provides no images".into()))?;
    let count = samples.min(data.len()).max(1);
    let mut rng = RngKey::from_seed(cfg.eval.seed).child(crate::rng::tag::EVAL_TASK).rng();
    let picks = sample_without_replacement(&mut rng, data.len(), count);
    let images: Vec<&crate::augment::Image> = picks.iter().map(|&i| &data.images[i]).collect();

    let report = eval::sparsity_report(&cfg.trunk_config(), &trunk, &images, tau)?;
    println!(
        "sparsity over {} images ({}-dim features, tau {}): exact-zero {:.4}, |a|<=tau {:.4}",
        report.samples, report.dim, report.tau, report.frac_exact_zero, report.frac_below_tau
    );
    if let Some(path) = out {
        let mut csv = String::from("bin_upper_edge,count\n");
        for (edge, count) in &report.histogram {
            csv.push_str(&format!("{edge},{count}\n"));
        }
        std::fs::write(path, csv)?;
        println!("histogram: {}", path.display());
    }
    Ok(())
}

fn export(checkpoint: &Path, out: &Path) -> Result<()> {
    let loaded = load_trainer(checkpoint)?;
    let stored = RunConfig::parse(&loaded.config_echo).map_err(|e| {
        Error::Checkpoint(format!("checkpoint carries an unreadable config echo: {e}"))
    })?;
    let trunk = trunk_from_checkpoint(&loaded, &stored)?;

    let mut csv = String::from("blob,index,value\n");
    for (name, buf) in trunk.named_buffers() {
        for (i, v) in buf.iter().enumerate() {
            csv.push_str(&format!("{name},{i},{v}\n"));
        }
    }
    let snap = &loaded.snapshot;
    for (name, buf) in [
        ("head.w", &snap.head_w),
        ("head.b", &snap.head_b),
        ("adam.m", &snap.moments.m),
        ("adam.v", &snap.moments.v),
    ] {
        for (i, v) in buf.iter().enumerate() {
            csv.push_str(&format!("{name},{i},{v}\n"));
        }
    }
    std::fs::write(out, csv)?;
    println!(
        "exported step-{} checkpoint ({} parameter blobs) to {}",
        snap.step,
        loaded.blob_names.len(),
        out.display()
    );
    Ok(())
}
