use std::path::{Path, PathBuf};

use ablate_core::archive::TensorArchive;
use ablate_core::experiment::{calibrate_for, pairs_for, run_experiment, ExperimentConfig, MetricReport};
use ablate_core::plots::emit_plots;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Register-token ablation experiments on vision transformers.
#[derive(Parser, Debug)]
#[command(name = "ablate-lab", version)]
struct Cli {
    /// Worker threads for batch and resampling loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (.toml or .json).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seeds with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute per-slot token statistics and save them as `calibration.tarc` + `calibration.json`.
    Calibrate(Common),
    /// Run every intervention and write `report.json`, `report.csv` and `samples.tarc`.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write plots into `<out>/plots`.
        #[arg(long)]
        plots: bool,
    },
    /// Write a synthetic correspondence pair manifest to `pairs.json`.
    Pairs {
        #[command(flatten)]
        common: Common,
        /// Number of pairs (default: the config's correspondence task, else 200).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Print a saved report.
    Report {
        /// `report.json` or the directory holding it.
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Draw figures from a run directory.
    Plots {
        /// Run directory with `report.json` (and optionally `samples.tarc`).
        path: PathBuf,
        /// Destination; defaults to `<path>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut config =
        ExperimentConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(seed) = c.seed {
        config.seeds = vec![seed];
    }
    if let Some(b) = c.batch_size {
        if b == 0 {
            bail!("--batch-size must be at least 1");
        }
        config.batch_size = b;
    }
    if let Some(out) = &c.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn report_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Calibrate(common) => {
            let mut config = load_config(&common)?;
            if let (Some(seed), Some(cal)) = (common.seed, config.calibration.as_mut()) {
                cal.seed = seed;
            }
            let model = config.model.load()?;
            let dataset = config.dataset.open()?;
            let stats = calibrate_for(&config, &model, dataset.as_ref())?;
            create_dir(&config.output_dir)?;
            stats.save(&config.output_dir, "calibration")?;
            println!(
                "calibration {} ({} images) -> {}",
                stats.id(),
                stats.sample_count,
                config.output_dir.join("calibration.tarc").display()
            );
        }
        Command::Run { common, plots } => {
            let config = load_config(&common)?;
            let out = run_experiment(&config)?;
            let dir = &config.output_dir;
            out.report.write(dir)?;
            out.samples.write(&dir.join("samples.tarc"))?;
            print!("{}", out.report.summary_table());
            if plots {
                let p = emit_plots(&out.report, Some(&out.samples), &dir.join("plots"))?;
                println!("{} plots written, {} skipped", p.written.len(), p.skipped.len());
            }
            println!("report -> {}", dir.join("report.json").display());
        }
        Command::Pairs { common, count } => {
            let config = load_config(&common)?;
            let seed = config.seeds[0];
            let manifest = pairs_for(&config, count, seed)?;
            create_dir(&config.output_dir)?;
            let path = config.output_dir.join("pairs.json");
            std::fs::write(&path, manifest.to_json()? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "{} pairs ({} skipped) -> {}",
                manifest.pairs.len(),
                manifest.skipped,
                path.display()
            );
        }
        Command::Report { path, format } => {
            let report = MetricReport::read(&report_path(&path))?;
            match format {
                Format::Table => print!("{}", report.summary_table()),
                Format::Json => print!("{}", report.to_json()?),
                Format::Csv => print!("{}", report.to_csv()?),
            }
        }
        Command::Plots { path, out } => {
            let report = MetricReport::read(&report_path(&path))?;
            let run_dir = if path.is_dir() {
                path.clone()
            } else {
                path.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            let samples_path = run_dir.join("samples.tarc");
            let samples = if samples_path.is_file() {
                Some(TensorArchive::read(&samples_path)?)
            } else {
                None
            };
            let dest = out.unwrap_or_else(|| run_dir.join("plots"));
            let p = emit_plots(&report, samples.as_ref(), &dest)?;
            for f in &p.written {
                println!("wrote {}", f.display());
            }
            for s in &p.skipped {
                println!("skipped {s}");
            }
        }
    }
    Ok(())
}
