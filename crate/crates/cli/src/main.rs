//! Command-line front end: corpus generation, training, evaluation,
//! gradient checks and baselines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lgi_core::data::{self, Corpus, SynthConfig};
use lgi_core::error::ErrorClass;
use lgi_core::lgvti::{FusionKind, LocalContext, StageOrder};
use lgi_core::losses::LossConfig;
use lgi_core::metrics::{baseline_predict, evaluate, BaselineKind, EvalReport};
use lgi_core::model::{check_model_gradient, prepare_all, ModelConfig, Variant};
use lgi_core::train::{apply_overrides, evaluate_model, train, Checkpoint, TrainConfig};
use lgi_core::{Error, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "lgi", version, about = "Temporal grounding with local-global video-text interactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus. Extra `--key value` pairs override the generator config.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 400)]
        n_val: usize,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Train a model. Extra `--key value` pairs override the training config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        csv: bool,
    },
    /// Compare analytic and numeric gradients of the full objective on a random model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 6)]
        t: usize,
        #[arg(long, default_value_t = 5)]
        l: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "lgi")]
        variant: String,
        #[arg(long, default_value = "hadamard")]
        fusion: String,
        /// `res_block`, `masked_nl` or `none`.
        #[arg(long, default_value = "res_block")]
        local: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Score a reference predictor on a corpus split.
    Baseline {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        csv: bool,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::InvalidArgument(format!("expected `--key value`, got `{arg}`")))?;
        match key.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| Error::InvalidArgument(format!("missing value for `--{key}`")))?;
                pairs.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(pairs)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
}

fn print_report(report: &EvalReport, csv: bool) -> Result<()> {
    if csv {
        println!("{}", report.csv_header());
        println!("{}", report.to_csv_line());
    } else {
        println!("{}", serde_json::to_string_pretty(report)?);
    }
    Ok(())
}

fn split_of(dir: &Path, split: &str) -> Result<Vec<data::GroundingSample>> {
    match split {
        "train" | "val" => data::load_split(dir, split),
        other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, raw: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| Error::InvalidArgument(format!("unknown {what} `{raw}`")))
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenerateData {
            out,
            config,
            n_train,
            n_val,
            overrides,
        } => {
            let base = match config {
                Some(p) => load_json(&p)?,
                None => SynthConfig::default(),
            };
            let cfg: SynthConfig = apply_overrides(&base, &parse_overrides(&overrides)?)?;
            let corpus = data::generate(&cfg, n_train, n_val)?;
            let manifest = corpus.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Train {
            data,
            out,
            config,
            overrides,
        } => {
            let mut base = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            base.apply_env()?;
            let cfg = apply_overrides(&base, &parse_overrides(&overrides)?)?;
            let corpus = Corpus::load(&data)?;
            let outcome = train(&cfg, &corpus, Some(&out))?;
            for h in &outcome.history {
                eprintln!(
                    "epoch {:>3}  loss {:.4} (reg {:.4} tag {:.4} dqa {:.4})  val R@0.5 {:.2} mIoU {:.2}",
                    h.epoch,
                    h.total,
                    h.l_reg,
                    h.l_tag,
                    h.l_dqa,
                    h.val.recall(0.5).unwrap_or(0.0),
                    h.val.miou
                );
            }
            let best = &outcome.history[outcome.best_epoch - 1];
            println!("{}", serde_json::to_string_pretty(&best.val)?);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            csv,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let samples = split_of(&data, &split)?;
            let prepared = prepare_all(&samples, &ckpt.vocab, ckpt.model.config.segments)?;
            print_report(&evaluate_model(&ckpt.model, &prepared)?, csv)?;
        }
        Command::Gradcheck {
            d,
            t,
            l,
            n,
            seed,
            variant,
            fusion,
            local,
            eps,
        } => {
            let local = match local.as_str() {
                "res_block" => LocalContext::ResBlock { kernel: 3 },
                "masked_nl" => LocalContext::MaskedNl { blocks: 1, window: 3 },
                "none" => LocalContext::None,
                other => return Err(Error::InvalidArgument(format!("unknown local context `{other}`"))),
            };
            let config = ModelConfig {
                vocab_size: 12,
                d_v: 4,
                d,
                segments: t,
                steps: n,
                variant: parse_enum::<Variant>("variant", &variant)?,
                fusion: parse_enum::<FusionKind>("fusion", &fusion)?,
                local,
                global_blocks: 1,
                order: StageOrder::FusionLocalGlobal,
                position_embedding: true,
                mask_padding: false,
            };
            let err = check_model_gradient(&config, l, &LossConfig::default(), seed, eps)?;
            println!("max relative error {err:.3e}");
            return Ok(err < GRADCHECK_TOLERANCE);
        }
        Command::Baseline {
            kind,
            data,
            seed,
            split,
            csv,
        } => {
            let kind: BaselineKind = kind.parse()?;
            let train_gts = data::gts(&data::load_split(&data, "train")?);
            let target = data::gts(&split_of(&data, &split)?);
            let preds = baseline_predict(kind, &train_gts, target.len(), seed)?;
            print_report(&evaluate(&preds, &target)?, csv)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
