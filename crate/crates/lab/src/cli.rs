//! Command-line interface. Failures print a JSON object with `error` and
//! `kind` keys on stderr and exit nonzero.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::{ErrorReport, LabError};
use crate::run::{self, EvalInputs, RunDir, TrainKind};
use crate::synth::{MaskSource, SynthRequest, SynthSet};

#[derive(Debug, Parser)]
#[command(name = "lesion-synth", version, about = "Lesion synthesis on synthetic phantoms")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults to the run's config.lock.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Texture,
    Mask,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset into <out>/data.
    PhantomGen {
        #[arg(long)]
        preset: Option<String>,
        /// Pathological cases in total.
        #[arg(long)]
        pathological: Option<usize>,
        #[arg(long)]
        normal: Option<usize>,
        /// Pathological cases held out for testing.
        #[arg(long)]
        test: Option<usize>,
    },
    /// Cluster lesion histograms of the training cases.
    HistCluster {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a texture or mask diffusion model.
    Train {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Texture method; the configured engine method by default.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Synthesize a P', N' or N'' case set.
    Synth {
        #[arg(long)]
        method: Option<String>,
        /// P', N' or N'' (or p_prime, n_prime, n_double_prime).
        #[arg(long)]
        set: String,
        /// copy, hand_crafted or diffmask.
        #[arg(long, default_value = "diffmask")]
        mask_source: String,
        /// Generations per normal case for N''.
        #[arg(long)]
        multiplier: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train and score segmenters, and measure synthesis quality.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Synthetic manifests; every manifest under <out>/synth by default.
        #[arg(long)]
        synth: Vec<PathBuf>,
        /// Training settings such as P or P+N'.
        #[arg(long)]
        setting: Vec<String>,
        #[arg(long)]
        texture_checkpoint: Vec<PathBuf>,
    },
    /// Render tables and figures from existing reports.
    Report {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Builds the effective configuration: the `--config` file, else an
/// existing `config.lock` in the run directory, else defaults; then flags.
pub fn effective_config(cli: &Cli) -> anyhow::Result<(ExperimentConfig, RunDir)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(ExperimentConfig::default().output_dir));
            let lock = out.join(run::LOCK_FILE);
            if lock.exists() {
                ExperimentConfig::load(&lock)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::PhantomGen {
            preset,
            pathological,
            normal,
            test,
        } => {
            if let Some(p) = preset {
                cfg.data.preset = p.clone();
                cfg.data.phantom = None;
                cfg.data.roi = None;
            }
            if let Some(n) = pathological {
                cfg.data.pathological = *n;
            }
            if let Some(n) = normal {
                cfg.data.normal = *n;
            }
            if let Some(n) = test {
                cfg.data.test_pathological = *n;
            }
        }
        Command::HistCluster { k: Some(k), .. } => cfg.texture_control.clusters = *k,
        _ => {}
    }
    cfg.validate()?;
    let run = RunDir::new(&cfg.output_dir);
    Ok((cfg, run))
}

pub fn execute(cli: &Cli) -> anyhow::Result<PathBuf> {
    let (cfg, run) = effective_config(cli)?;
    let manifest = |m: &Option<PathBuf>| m.clone().unwrap_or_else(|| run.manifest());
    let out = match &cli.command {
        Command::PhantomGen { .. } => run::cmd_phantom_gen(&cfg, &run)?,
        Command::HistCluster { manifest: m, .. } => run::cmd_hist_cluster(&cfg, &run, &manifest(m))?,
        Command::Train {
            kind,
            method,
            manifest: m,
        } => {
            let kind = match kind {
                KindArg::Texture => TrainKind::Texture,
                KindArg::Mask => TrainKind::Mask,
            };
            let method = method.clone().unwrap_or_else(|| cfg.engine.method.clone());
            run::cmd_train(&cfg, &run, kind, &method, &manifest(m))?
        }
        Command::Synth {
            method,
            set,
            mask_source,
            multiplier,
            manifest: m,
        } => {
            let set: SynthSet = set.parse()?;
            let req = SynthRequest {
                method: method.clone().unwrap_or_else(|| cfg.engine.method.clone()),
                set,
                mask_source: mask_source.parse::<MaskSource>()?,
                multiplier: multiplier.unwrap_or(if set == SynthSet::NDoublePrime { 2 } else { 1 }),
            };
            if req.multiplier == 0 {
                return Err(LabError::Invalid("--multiplier must be positive".into()).into());
            }
            run::cmd_synth(&cfg, &run, &req, &manifest(m))?
        }
        Command::Eval {
            manifest: m,
            synth,
            setting,
            texture_checkpoint,
        } => {
            let inputs = EvalInputs {
                synth: synth.clone(),
                settings: setting.clone(),
                texture_checkpoints: texture_checkpoint.clone(),
            };
            run::cmd_eval(&cfg, &run, &manifest(m), &inputs)?
        }
        Command::Report { manifest: m } => run::cmd_report(&cfg, &run, &manifest(m))?,
    };
    Ok(out)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let report = ErrorReport {
                error: e.render().to_string().trim().to_string(),
                kind: "usage".into(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => {
            let report = ErrorReport::from_anyhow(&e);
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            1
        }
    }
}
