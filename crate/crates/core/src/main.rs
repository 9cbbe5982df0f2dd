use std::path::PathBuf;

use anyhow::Context;
use bae::attribute::AttributeMode;
use bae::harness::commands::{self, EnhanceOptions};
use bae::harness::config::ExperimentConfig;
use bae::harness::enhance::Method;
use bae::sampler::SamplerKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bae", version, about = "Attribute enhancement by sampling style-transfer styles")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Regression,
    Binary,
}

impl From<Mode> for AttributeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Regression => AttributeMode::Regression,
            Mode::Binary => AttributeMode::Binary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    Bae,
    Abae,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Mh,
    Langevin,
    Hmc,
}

#[derive(clap::Args)]
struct EnhanceArgs {
    /// Repeat for several methods; baseline, bae and abae when omitted.
    #[arg(long, value_enum)]
    method: Vec<MethodArg>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Initial step size. Repeat to search a grid; one run per point.
    #[arg(long)]
    tau: Vec<f64>,
    /// Normalisation exponent. Repeat to search a grid.
    #[arg(long)]
    lambda: Vec<f64>,
    /// Fixed stylization strength in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Samples per chain.
    #[arg(long = "samples")]
    samples: Option<usize>,
    /// Enhancement seed (a stream under the master seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Only the first N test images.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long, default_value = "run")]
    name: String,
    #[arg(long)]
    overwrite: bool,
}

impl EnhanceArgs {
    fn grid(&self) -> Vec<EnhanceOptions> {
        EnhanceOptions {
            methods: self
                .method
                .iter()
                .map(|m| match m {
                    MethodArg::Baseline => Method::Baseline,
                    MethodArg::Bae => Method::Bae,
                    MethodArg::Abae => Method::Abae,
                    MethodArg::Random => Method::Random,
                })
                .collect(),
            sampler: self.sampler.map(|s| match s {
                SamplerArg::Mh => SamplerKind::MetropolisHastings,
                SamplerArg::Langevin => SamplerKind::Langevin,
                SamplerArg::Hmc => SamplerKind::Hamiltonian,
            }),
            tau: None,
            lambda: None,
            alpha: self.alpha,
            samples: self.samples,
            seed: self.seed,
            images: self.images,
            name: self.name.clone(),
            overwrite: self.overwrite,
        }
        .grid(&self.tau, &self.lambda)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file with the defaults for an attribute.
    InitConfig {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "regression")]
        mode: Mode,
        /// Smaller networks and schedules.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        master_seed: Option<u64>,
    },
    /// Generate the synthetic corpora.
    GenData {
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the encoder/decoder pair.
    TrainCodec,
    /// Train the internal and external attribute predictors.
    TrainPredictors {
        /// Attributes to train for; the configured one when omitted.
        #[arg(long, value_enum)]
        mode: Vec<Mode>,
    },
    /// Train the style generator on the encoded style corpus.
    TrainGan,
    /// Sample and rank stylizations with the internal predictor.
    Enhance(EnhanceArgs),
    /// Score a ranked run with the external predictor.
    Evaluate {
        /// Repeat to evaluate several runs, e.g. every point of a grid.
        #[arg(long, default_value = "run")]
        name: Vec<String>,
    },
    /// Write CSV, JSON, SVG and PNG outputs for an evaluated run.
    Report {
        #[arg(long, default_value = "run")]
        name: Vec<String>,
    },
    /// Every stage in sequence.
    All(EnhanceArgs),
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    let msg = match cli.command {
        Command::InitConfig {
            path,
            mode,
            quick,
            master_seed,
        } => {
            let mut c = if quick {
                ExperimentConfig::quick(mode.into())
            } else {
                ExperimentConfig::for_mode(mode.into())
            };
            c.out_dir = cfg.out_dir.clone();
            c.master_seed = master_seed.unwrap_or(c.master_seed);
            c.save(&path)?;
            format!("wrote {}", path.display())
        }
        Command::GenData { overwrite } => commands::gen_data(&cfg, overwrite)?,
        Command::TrainCodec => commands::train_codec_cmd(&cfg)?,
        Command::TrainPredictors { mode } => {
            let modes: Vec<AttributeMode> = mode.into_iter().map(Into::into).collect();
            commands::train_predictors_cmd(&cfg, &modes)?
        }
        Command::TrainGan => commands::train_gan_cmd(&cfg)?,
        Command::Enhance(args) => {
            let lines: Vec<String> =
                args.grid().iter().map(|o| commands::enhance(&cfg, o)).collect::<Result<_, _>>()?;
            lines.join("\n")
        }
        Command::Evaluate { name } => each(&name, |n| commands::evaluate(&cfg, n))?,
        Command::Report { name } => each(&name, |n| commands::report(&cfg, n))?,
        Command::All(args) => commands::run_all(&cfg, &args.grid())?,
    };
    println!("{msg}");
    Ok(())
}

/// Runs `f` per run name, labelling each output when there are several.
fn each(names: &[String], f: impl Fn(&str) -> bae::Result<String>) -> bae::Result<String> {
    if names.len() == 1 {
        return f(&names[0]);
    }
    let mut lines = vec![];
    for n in names {
        lines.push(format!("[{n}]"));
        lines.push(f(n)?);
    }
    Ok(lines.join("\n"))
}
