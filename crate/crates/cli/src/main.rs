//! `metainflect`: train, fine-tune, evaluate and ablate inflection models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 training
//! divergence. Anything else signals an internal error.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Override;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] metainflect::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// A child run of a sweep failed with this exit code.
    #[error("{message}")]
    Child { code: u8, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use metainflect::Error as E;
        match self {
            CliError::Core(E::Diverged { .. }) => 3,
            CliError::Core(
                E::Shape { .. } | E::Unbound { .. } | E::Unevaluated { .. } | E::NonScalarLoss { .. } | E::NonDeterministic { .. },
            ) => 1,
            CliError::Child { code, .. } => *code,
            _ => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "metainflect", version, about = "Meta-learned morphological inflection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every training command. Flags override the config file.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML; `${VAR}` and `${VAR:-default}` are expanded)
    #[arg(short, long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Architecture: med or pg
    #[arg(long)]
    pub model: Option<String>,
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Directory of <language>/{train,dev,test}.tsv files
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Target language
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated source languages
    #[arg(long, value_delimiter = ',')]
    pub sources: Option<Vec<String>>,
    /// Comma-separated development languages for model selection
    #[arg(long, value_delimiter = ',')]
    pub dev_languages: Option<Vec<String>>,
    /// Meta-training epochs (also the default for joint training)
    #[arg(long)]
    pub meta_epochs: Option<usize>,
    /// Inner-loop learning rate
    #[arg(long)]
    pub inner_lr: Option<f64>,
    /// Outer learning rate
    #[arg(long)]
    pub outer_lr: Option<f64>,
    /// Inner steps per task
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Learning rate of joint and monolingual training
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minimum fine-tuning epochs
    #[arg(long)]
    pub finetune_min_epochs: Option<usize>,
    /// Monolingual training epochs
    #[arg(long)]
    pub mono_epochs: Option<usize>,
    /// Beam width for test decoding (1 = greedy)
    #[arg(long)]
    pub beam: Option<usize>,
    /// Set any config key, e.g. `--set meta.clip_norm=1.0` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = Override::parse)]
    pub set: Vec<Override>,
}

impl Common {
    fn overrides(&self) -> Vec<Override> {
        use toml::Value as V;
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<V>| {
            if let Some(v) = v {
                o.push(Override::new(k, v));
            }
        };
        let list = |l: &Option<Vec<String>>| l.as_ref().map(|l| V::Array(l.iter().cloned().map(V::String).collect()));
        put("model", self.model.clone().map(V::String));
        put("seed", self.seed.map(|s| V::Integer(s as i64)));
        put("target", self.target.clone().map(V::String));
        put("sources", list(&self.sources));
        put("dev_languages", list(&self.dev_languages));
        put("meta.meta_epochs", self.meta_epochs.map(|n| V::Integer(n as i64)));
        put("meta.inner_lr", self.inner_lr.map(V::Float));
        put("meta.outer_lr", self.outer_lr.map(V::Float));
        put("meta.inner_steps", self.inner_steps.map(|n| V::Integer(n as i64)));
        put("meta.lr", self.lr.map(V::Float));
        put("meta.finetune_min_epochs", self.finetune_min_epochs.map(|n| V::Integer(n as i64)));
        put("meta.mono_epochs", self.mono_epochs.map(|n| V::Integer(n as i64)));
        put("decode.beam", self.beam.map(|n| V::Integer(n as i64)));
        if let Some(p) = &self.out_dir {
            o.push(Override::path("out_dir", p));
        }
        if let Some(p) = &self.data_dir {
            o.push(Override::path("data_dir", p));
        }
        o.extend(self.set.iter().cloned());
        o
    }

    pub fn load(&self) -> Result<config::ExperimentConfig, CliError> {
        config::ExperimentConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Two related sources and a target of the same family
    Transfer,
    /// The transfer family plus an unrelated two-language family
    TwoFamilies,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train an initialization on the source languages (first-order MAML)
    MetaTrain(Common),
    /// Jointly train on the source languages
    MultitaskTrain {
        #[command(flatten)]
        common: Common,
        /// Also train on the target language's training data
        #[arg(long)]
        include_target: bool,
    },
    /// Train on the target language alone
    MonoTrain(Common),
    /// Fine-tune a pretrained checkpoint on the target language
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from
        #[arg(long, value_name = "FILE")]
        init: PathBuf,
    },
    /// Score a checkpoint on a dataset and print `accuracy=<value>`
    Evaluate {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset (lemma<TAB>form<TAB>tags)
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Language of the dataset; defaults to the checkpoint's target
        #[arg(long)]
        language: Option<String>,
        /// Beam width (1 = greedy)
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Maximum output length; defaults to lemma length + 20
        #[arg(long)]
        max_len: Option<usize>,
        /// Write report.json, report.txt and predictions.tsv here
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Run one regime end to end: pretrain, fine-tune, score the target's test split
    Run {
        #[command(flatten)]
        common: Common,
        /// maml, multitask, multitask+ft, maml+ft or mono; defaults to the config's regime
        #[arg(long)]
        regime: Option<String>,
    },
    /// Compare source sets drawn from the target's family and from other families
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes among ALL, LF, OtherLF, SINGLE
        #[arg(long, value_delimiter = ',', default_value = "ALL,LF,OtherLF,SINGLE")]
        modes: Vec<String>,
        /// Pretraining regime: maml+ft or multitask+ft
        #[arg(long, default_value = "maml+ft")]
        regime: String,
        /// Comma-separated languages never used as sources
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
    },
    /// Generate a synthetic language family as TSV files
    Synth {
        /// Family spec (TOML)
        #[arg(long, value_name = "FILE", conflicts_with = "preset", required_unless_present = "preset")]
        spec: Option<PathBuf>,
        /// Built-in family instead of a spec file
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Training examples per source language (presets only)
        #[arg(long, default_value_t = 2000)]
        source_train: usize,
        /// Training examples of the target language (presets only)
        #[arg(long, default_value_t = 100)]
        target_train: usize,
        /// Dev examples per language (presets only)
        #[arg(long, default_value_t = 100)]
        dev: usize,
        /// Test examples per language (presets only)
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Run regimes over several seeds in child processes and tabulate the results
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Comma-separated regimes; defaults to the config's regime
        #[arg(long, value_delimiter = ',')]
        regimes: Vec<String>,
        /// Child runs executed in parallel
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MetaTrain(c) => commands::meta_train(&c),
        Command::MultitaskTrain { common, include_target } => commands::multitask_train(&common, include_target),
        Command::MonoTrain(c) => commands::mono_train(&c),
        Command::Finetune { common, init } => commands::finetune(&common, &init),
        Command::Evaluate {
            checkpoint,
            data,
            language,
            beam,
            max_len,
            out_dir,
        } => commands::evaluate(&checkpoint, &data, language.as_deref(), beam, max_len, out_dir.as_deref()),
        Command::Run { common, regime } => commands::run(&common, regime.as_deref()),
        Command::Ablate {
            common,
            modes,
            regime,
            exclude,
        } => commands::ablate(&common, &modes, &regime, &exclude),
        Command::Synth {
            spec,
            preset,
            source_train,
            target_train,
            dev,
            test,
            seed,
            out_dir,
        } => {
            let sizes = [source_train, target_train, dev, test];
            commands::synth(spec.as_deref(), preset, sizes, seed, &out_dir)
        }
        Command::Sweep {
            common,
            seeds,
            regimes,
            jobs,
        } => commands::sweep(&common, &seeds, &regimes, jobs),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
