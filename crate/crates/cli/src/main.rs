use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use fusemt::experiment::{self, ExperimentConfig, LoadedModel, Stage};
use fusemt::provider::ContextProvider;

#[derive(Parser, Debug)]
#[command(name = "fusemt", version, about = "Context-fused translation experiments at desk scale")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment configuration (`key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Overrides one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel corpus.
    GenData,
    /// Pretrain the context provider with masked language modelling.
    PretrainProvider,
    /// Train one model.
    Train {
        /// stage1, stage2 or joint-random-init; defaults to the config's `stage`.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Beam-decode raw source sentences with a trained checkpoint.
    Decode {
        #[arg(long)]
        model: PathBuf,
        /// Provider checkpoint, required for fused models.
        #[arg(long)]
        provider: Option<PathBuf>,
        /// One source sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// Preceding sentences, line-aligned with `--input`, for document mode.
        #[arg(long)]
        prev: Option<PathBuf>,
    },
    /// Corpus BLEU and sequence accuracy of a hypothesis file.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Train every ablation variant and tabulate the results.
    Ablate,
    /// Train the fused model once per drop-net rate.
    DropnetSweep,
    /// Compare decoding time of the baseline and the fused model.
    BenchInference,
}

/// Failures the operator can fix by changing the invocation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn resolve_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("config file {} does not exist", p.display())));
            }
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    for o in &g.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(usage(format!("`--set {o}` is not of the form KEY=VALUE")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    let out = &cli.global.out;
    match cli.command {
        Command::GenData => {
            let data = experiment::run_gen_data(&cfg, out)?;
            info!(
                "wrote {} / {} / {} pairs to {}",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                out.join("data").display()
            );
        }
        Command::PretrainProvider => {
            let p = experiment::run_pretrain_provider(&cfg, out)?;
            println!("provider {}", p.param_hash());
        }
        Command::Train { stage } => {
            if let Some(s) = stage {
                cfg.stage = s.parse::<Stage>()?;
            }
            let m = experiment::run_train(&cfg, out)?;
            println!("test_bleu={} test_seq_acc={}", m.bleu, m.seq_acc);
        }
        Command::Decode {
            model,
            provider,
            input,
            prev,
        } => {
            require_file(&model, "model checkpoint")?;
            require_file(&input, "input file")?;
            let loaded = LoadedModel::load(&model)?;
            let provider = match provider {
                Some(p) => {
                    require_file(&p, "provider checkpoint")?;
                    Some(ContextProvider::load(&p)?)
                }
                None => None,
            };
            let sources = experiment::read_lines(&input)?;
            let prev = match prev {
                Some(p) => {
                    require_file(&p, "preceding-sentence file")?;
                    Some(experiment::read_lines(&p)?)
                }
                None => None,
            };
            let hyps = loaded.translate(provider.as_ref(), &sources, prev.as_deref(), &cfg.decode)?;
            fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
            fs::write(out.join("decode.hyp"), hyps.join("\n") + "\n")?;
            for h in hyps {
                println!("{h}");
            }
        }
        Command::Score { hyp, reference } => {
            require_file(&hyp, "hypothesis file")?;
            require_file(&reference, "reference file")?;
            let hyps = experiment::read_lines(&hyp)?;
            let refs = experiment::read_lines(&reference)?;
            if hyps.len() != refs.len() {
                return Err(usage(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
            }
            print!("{}", experiment::score_block(&hyps, &refs, None)?);
        }
        Command::Ablate => {
            let rows = experiment::run_ablate(&cfg, out)?;
            print!("{}", experiment::ablation_csv(&rows));
        }
        Command::DropnetSweep => {
            let runs = experiment::run_dropnet_sweep(&cfg, out)?;
            info!("{} runs written to {}", runs.len(), out.display());
        }
        Command::BenchInference => {
            let r = experiment::run_bench_inference(&cfg, out)?;
            print!("{}", r.to_csv());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<fusemt::Error>() {
        Some(fusemt::Error::Config(_)) | Some(fusemt::Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
