use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use revseg::config::TrainConfig;
use revseg::data::cache::{generate_dataset, load_split, DataSpec};
use revseg::gradcheck::suite::{self, Module};
use revseg::model::count_params_flops;
use revseg::train::{evaluate, train, write_report, Checkpoint};

#[derive(Parser)]
#[command(name = "revseg", version, about = "Reverse-attention pyramid segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config; writes log.csv and checkpoints into OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Repeat the run with these seeds (one subdirectory each).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Evaluate a checkpoint on a dataset split directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; a CSV with per-image rows is written next to it.
        #[arg(long)]
        report: PathBuf,
        /// Training config whose model hash must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print parameter and FLOP counts for the config's model.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input_size: usize,
    },
    /// Generate a synthetic dataset from a TOML spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run finite-difference gradient checks.
    Gradcheck {
        /// tensor, losses, encoder, rabifpn or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run_train(config: &Path, out: &Path, seeds: &[u64]) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let data = cfg.data.load(base)?;
    let runs: Vec<(TrainConfig, PathBuf)> = if seeds.is_empty() {
        vec![(cfg.clone(), out.to_path_buf())]
    } else {
        seeds
            .iter()
            .map(|&s| (TrainConfig { seed: s, ..cfg.clone() }, out.join(format!("seed{s}"))))
            .collect()
    };
    for (cfg, dir) in runs {
        let outcome = train(&cfg, &data, Some(&dir))?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        let last = outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
        println!(
            "{}: {} steps, final loss {last:.5}, checkpoint {}",
            dir.display(),
            outcome.log.len(),
            dir.join("last.ckpt").display()
        );
    }
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, report: &Path, config: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let expected = match config {
        Some(p) => Some(TrainConfig::load(p)?.model.hash()),
        None => None,
    };
    let data = load_split(data)?;
    let r = evaluate(&ckpt, &data, expected.as_deref())?;
    write_report(&r, report)?;
    println!(
        "mDice {:.4} ± {:.4}, mIoU {:.4} ± {:.4} over {} rows",
        r.dice.mean,
        r.dice.std,
        r.iou.mean,
        r.iou.std,
        r.per_image.len()
    );
    if let Some(m) = &r.micro {
        for c in &m.per_class {
            println!("class {}: micro dice {:.4}, micro iou {:.4}", c.class.unwrap_or(0), c.dice, c.iou);
        }
        println!("generic: micro dice {:.4}, micro iou {:.4}", m.generic.dice, m.generic.iou);
    }
    Ok(())
}

fn run_gradcheck(module: &str, seed: u64) -> Result<bool> {
    let module: Module = module.parse()?;
    let reports = suite::run(module, seed)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<20} {} checked {:>5}  max rel err {:.2e}  one-sided {}  refined {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.checked,
            r.max_rel_err,
            r.one_sided,
            r.refined
        );
        ok &= r.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seeds } => run_train(&config, &out, &seeds),
        Command::Eval {
            checkpoint,
            data,
            report,
            config,
        } => run_eval(&checkpoint, &data, &report, config.as_deref()),
        Command::Stats { config, input_size } => (|| {
            let cfg = TrainConfig::load(&config)?;
            if input_size % 32 != 0 {
                bail!("input size {input_size} must be a multiple of 32");
            }
            let c = count_params_flops(&cfg.model, input_size)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
            Ok(())
        })(),
        Command::GenData { spec, out } => (|| {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: DataSpec = toml::from_str(&text)?;
            for dir in generate_dataset(&spec, &out)? {
                println!("{}", dir.display());
            }
            Ok(())
        })(),
        Command::Gradcheck { module, seed } => match run_gradcheck(&module, seed) {
            Ok(true) => Ok(()),
            Ok(false) => Err(anyhow::anyhow!("gradient check failed")),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
