use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxdistill::dataset_io;
use voxdistill::experiment::{self, ExperimentConfig, GenerateOutcome};
use voxdistill::Error;

#[derive(Parser)]
#[command(name = "voxdistill", version, about = "Semi-supervised volumetric segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Replace an existing dataset whose manifest differs.
        #[arg(long)]
        force: bool,
    },
    /// Train a student/teacher pair.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: FlagArgs,
        /// Run directory (defaults to <output_dir>/run_seed<seed>).
        #[arg(long = "run_dir", alias = "run-dir")]
        run_dir: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the final student of a run on the test split.
    Evaluate {
        #[arg(long = "run_dir", alias = "run-dir")]
        run_dir: PathBuf,
        /// Dataset directory (defaults to the one recorded in the run config).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the ablation matrix and write comparison tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names (overrides the config).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Comma-separated training seeds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Skip the dropout sweep.
        #[arg(long = "no_dropout_sweep", alias = "no-dropout-sweep")]
        no_dropout_sweep: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "output_dir", alias = "output-dir")]
    output_dir: Option<PathBuf>,
    #[arg(long = "dataset_dir", alias = "dataset-dir")]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "t_max", alias = "t-max")]
    t_max: Option<usize>,
    #[arg(long = "n_labeled", alias = "n-labeled")]
    n_labeled: Option<usize>,
    #[arg(long = "n_unlabeled", alias = "n-unlabeled")]
    n_unlabeled: Option<usize>,
    #[arg(long = "n_test", alias = "n-test")]
    n_test: Option<usize>,
}

#[derive(Args)]
struct FlagArgs {
    #[arg(long = "disable_contrast", alias = "disable-contrast")]
    disable_contrast: bool,
    #[arg(long = "disable_pd", alias = "disable-pd")]
    disable_pd: bool,
    #[arg(long = "disable_sdm_loss", alias = "disable-sdm-loss")]
    disable_sdm_loss: bool,
    #[arg(long = "disable_consistency", alias = "disable-consistency")]
    disable_consistency: bool,
    #[arg(long = "disable_sdm_feature", alias = "disable-sdm-feature")]
    disable_sdm_feature: bool,
    #[arg(long = "dropout_p", alias = "dropout-p")]
    dropout_p: Option<f64>,
    #[arg(long = "pool_size", alias = "pool-size")]
    pool_size: Option<usize>,
}

fn load_config(common: &Common) -> voxdistill::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &common.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &common.dataset_dir {
        cfg.dataset.dir = v.clone();
    }
    if let Some(v) = common.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = common.t_max {
        cfg.train.t_max = v;
    }
    if let Some(v) = common.n_labeled {
        cfg.dataset.n_labeled = v;
    }
    if let Some(v) = common.n_unlabeled {
        cfg.dataset.n_unlabeled = v;
    }
    if let Some(v) = common.n_test {
        cfg.dataset.n_test = v;
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &FlagArgs) {
    let a = &mut cfg.ablation;
    a.disable_contrast |= f.disable_contrast;
    a.disable_pd |= f.disable_pd;
    a.disable_sdm_loss |= f.disable_sdm_loss;
    a.disable_consistency |= f.disable_consistency;
    a.disable_sdm_feature |= f.disable_sdm_feature;
    if f.dropout_p.is_some() {
        a.dropout_p = f.dropout_p;
    }
    if f.pool_size.is_some() {
        a.pool_size = f.pool_size;
    }
}

fn dataset_for(dir: &Path) -> voxdistill::Result<voxdistill::synth::DatasetSplit> {
    Ok(dataset_io::load_split(dir)?.0)
}

fn run(cli: Cli) -> voxdistill::Result<()> {
    match cli.command {
        Command::Generate { common, force } => {
            let cfg = load_config(&common)?;
            let (manifest, outcome) = experiment::cmd_generate(&cfg, force)?;
            let (l, u, t) = manifest.counts();
            let verb = match outcome {
                GenerateOutcome::Created => "created",
                GenerateOutcome::Verified => "verified",
                GenerateOutcome::Overwritten => "overwrote",
            };
            println!("{verb} {} ({l} labeled / {u} unlabeled / {t} test)", cfg.dataset.dir.display());
        }
        Command::Train {
            common,
            flags,
            run_dir,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            apply_flags(&mut cfg, &flags);
            let split = experiment::load_or_build(&cfg.dataset)?;
            let run_dir = run_dir.unwrap_or_else(|| experiment::default_run_dir(&cfg));
            let state = experiment::cmd_train(&cfg, &split, &run_dir, resume.as_deref())?;
            println!("trained {} iterations into {}", state.t, run_dir.display());
        }
        Command::Evaluate { run_dir, dataset } => {
            let dir = match dataset {
                Some(d) => d,
                None => ExperimentConfig::load(&run_dir.join(experiment::RUN_CONFIG))?.dataset.dir,
            };
            let report = experiment::cmd_evaluate(&run_dir, &dataset_for(&dir)?)?;
            println!("{}", serde_json::to_string_pretty(&report.to_json()).map_err(Error::from)?);
        }
        Command::Ablate {
            common,
            variants,
            seeds,
            no_dropout_sweep,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variants {
                cfg.ablate.variants = v;
            }
            if let Some(s) = seeds {
                cfg.ablate.seeds = s;
            }
            if no_dropout_sweep {
                cfg.ablate.dropout_sweep.clear();
            }
            let split = experiment::load_or_build(&cfg.dataset)?;
            let out = cfg.output_dir.join("ablation");
            let table = experiment::cmd_ablate(&cfg, &split, Some(&out))?;
            print!("{}", table.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error [{}]: {e}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
