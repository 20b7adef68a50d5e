use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use periop_core::config::PipelineConfig;
use periop_core::pipeline::{cmd_compare, cmd_features, cmd_label, cmd_run, cmd_synth, Stage, StageError};

#[derive(Parser)]
#[command(name = "periop", version, about = "Perioperative acute kidney injury risk pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct Common {
    /// INI configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed (and the synthetic cohort seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as CSV files.
    Synth(Common),
    /// Run the full pipeline and write a report.
    Run(Common),
    /// Print the AUROC grid and NRI from a report and write figure5.csv.
    Compare {
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute baseline creatinine and KDIGO labels.
    Label(Common),
    /// Clean, featurize and encode.
    Features(Common),
}

fn config_error(source: periop_core::Error) -> StageError {
    StageError {
        stage: Stage::Config,
        source,
    }
}

/// Loads the configuration and applies overrides; returns it with the
/// directory standalone stages write to.
fn resolve(c: &Common, stage_dir: &str) -> Result<(PipelineConfig, PathBuf), StageError> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::from_file(path).map_err(config_error)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
        cfg.synth.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().map_err(config_error)?;
    let dir = match &c.out {
        Some(out) => out.clone(),
        None => cfg.out_dir.join(format!("{stage_dir}-{}", cfg.hash())),
    };
    Ok((cfg, dir))
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::Synth(c) => {
            let (cfg, dir) = resolve(&c, "synth")?;
            let m = cmd_synth(&cfg, &dir)?;
            println!(
                "wrote {} patients to {} (7-day prevalence {:.4}, target {:.4})",
                m.n_patients,
                dir.display(),
                m.realized_prevalence_7day,
                m.target_prevalence_7day
            );
        }
        Command::Run(c) => {
            let (cfg, _) = resolve(&c, "run")?;
            let dir = cmd_run(&cfg)?;
            let cmp = cmd_compare(&dir.join("report.json"), &dir)?;
            print!("{}", cmp.text);
            println!("run directory: {}", dir.display());
        }
        Command::Compare { report, out } => {
            let dir = out.unwrap_or_else(|| report.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let cmp = cmd_compare(&report, &dir)?;
            print!("{}", cmp.text);
            println!("wrote {}", dir.join("figure5.csv").display());
        }
        Command::Label(c) => {
            let (cfg, dir) = resolve(&c, "label")?;
            let l = cmd_label(&cfg, &dir)?;
            println!(
                "labeled {} patients ({} excluded without baseline) into {}",
                l.labels.len(),
                l.excluded.len(),
                dir.display()
            );
        }
        Command::Features(c) => {
            let (cfg, dir) = resolve(&c, "features")?;
            let m = cmd_features(&cfg, &dir)?;
            println!("wrote {} x {} feature matrix to {}", m.ids.len(), m.columns.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
