//! `htformer` command-line front end.
//!
//! Every subcommand reads the experiment configuration (`--config FILE`,
//! optional) and accepts any configuration key as a `--key value` flag,
//! e.g. `--ht-frequency 0.2 --ht-placement uniform --seeds 0,1,2`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use htformer::config::parse_override_args;
use htformer::diffcore::{load_checkpoint, save_checkpoint};
use htformer::masks::{causal_mask, check_mask, ht_mask, Selection, TokenLayout, TokenTag};
use htformer::model::{Model, Pooling};
use htformer::pipeline::{
    accuracy, extract_embeddings_multi, finetune, load_embeddings, pretrain, prepare, prepare_for, roc_auc, run_experiment,
    save_embeddings, ExperimentConfig, LogisticRegression, Mode, Objective, Prepared,
};
use htformer::rng;
use htformer::seqdata::Dataset;
use htformer::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "htformer", version, about = "History-token transformers for event sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Flat key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Ntp,
    Coles,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic toy dataset as NDJSON plus its schema file.
    GenToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Schema file to write; defaults to `<out>.schema.toml`.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Self-supervised pretraining; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ntp")]
        objective: ObjectiveArg,
        /// Train without history tokens.
        #[arg(long)]
        no_ht: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replace the heads of a checkpoint with a classifier and train end to end.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write sequence embeddings as NDJSON.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One of ht, last, mean, cls.
        #[arg(long, default_value = "ht")]
        pooling: Pooling,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Predict labels, either with a fine-tuned checkpoint or with a
    /// logistic regression fitted on training embeddings.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        /// Fine-tuned checkpoint; predicts the configured test split.
        #[arg(long, conflicts_with_all = ["train_embeddings", "test_embeddings"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "test_embeddings")]
        train_embeddings: Option<PathBuf>,
        #[arg(long, requires = "train_embeddings")]
        test_embeddings: Option<PathBuf>,
        /// NDJSON predictions `{id, label, probabilities}`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured method and seed; write the CSV report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Summary table file; printed to stdout when absent.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// History-token frequency × probability grid; write the CSV report.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Attention-mask utilities.
    Masks {
        #[command(subcommand)]
        command: MasksCommand,
    },
}

#[derive(Subcommand, Debug)]
enum MasksCommand {
    /// Print the 0/1 attention grid of a layout.
    Dump {
        /// Token string over `E` (event), `H` (history) and `P` (padding).
        #[arg(long)]
        layout: String,
        /// `last` or `random`; `causal` for the plain causal mask.
        #[arg(long, default_value = "last")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Long flag names clap knows for the subcommand path in `args`.
fn known_flags(args: &[String]) -> BTreeSet<String> {
    let mut cmd = Cli::command();
    let mut flags = BTreeSet::from(["help".to_string(), "version".to_string()]);
    for a in args.iter().skip(1) {
        if a.starts_with('-') {
            continue;
        }
        let Some(sub) = cmd.find_subcommand(a).cloned() else { break };
        cmd = sub;
        flags.extend(cmd.get_arguments().filter_map(|arg| arg.get_long().map(str::to_string)));
    }
    flags
}

/// Separates configuration overrides from the flags clap handles.
fn split_args(args: &[String]) -> (Vec<String>, Vec<String>) {
    let known = known_flags(args);
    let mut cli = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let name = a.strip_prefix("--").map(|n| n.split('=').next().unwrap_or(n));
        match name {
            Some(n) if !n.is_empty() && !known.contains(n) => {
                overrides.push(a.clone());
                if !a.contains('=') && i + 1 < args.len() && !args[i + 1].starts_with("--") {
                    overrides.push(args[i + 1].clone());
                    i += 1;
                }
            }
            _ => cli.push(a.clone()),
        }
        i += 1;
    }
    (cli, overrides)
}

fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    ExperimentConfig::load(common.config.as_deref(), overrides)
}

fn pick(prep: &Prepared, split: SplitArg) -> Dataset {
    match split {
        SplitArg::Train => prep.train.clone(),
        SplitArg::Val => prep.val.clone(),
        SplitArg::Test => prep.test.clone(),
        SplitArg::All => {
            let mut seqs = prep.train.sequences.clone();
            seqs.extend(prep.val.sequences.iter().cloned());
            seqs.extend(prep.test.sequences.iter().cloned());
            seqs.sort_by(|a, b| a.id.cmp(&b.id));
            Dataset { schema: prep.train.schema.clone(), sequences: seqs }
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&load_checkpoint(path)?)
}

fn write_report(report: &htformer::pipeline::MetricsReport, out: &Path, summary: Option<&Path>) -> Result<()> {
    std::fs::write(out, report.to_csv())?;
    match summary {
        Some(p) => std::fs::write(p, report.summary())?,
        None => print!("{}", report.summary()),
    }
    eprintln!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn write_predictions(path: &Path, ids: &[String], labels: &[i64], probs: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ((id, l), p) in ids.iter().zip(labels).zip(probs) {
        serde_json::to_writer(&mut w, &json!({ "id": id, "label": l, "probabilities": p }))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn report_scores(classes: &[i64], truth: &[i64], pred: &[i64], probs: &[Vec<f64>]) -> Result<()> {
    println!("accuracy {:.6}", accuracy(pred, truth)?);
    if classes.len() == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let labels: Vec<bool> = truth.iter().map(|t| *t == classes[1]).collect();
        if let Ok(auc) = roc_auc(&scores, &labels) {
            println!("roc_auc {auc:.6}");
        }
    }
    Ok(())
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<()> {
    match command {
        Command::GenToy { common, out, schema_out } => {
            let cfg = load_config(&common, overrides)?;
            let data = htformer::toygen::generate_dataset(&cfg.toy())?;
            data.save(&out)?;
            let schema_path = schema_out.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".schema.toml");
                p.into()
            });
            std::fs::write(&schema_path, data.schema.to_toml())?;
            eprintln!("wrote {} sequences to {} (schema {})", data.len(), out.display(), schema_path.display());
        }
        Command::Pretrain { common, out, objective, no_ht, seed } => {
            let cfg = load_config(&common, overrides)?;
            let prep = prepare(&cfg)?;
            let objective = match objective {
                ObjectiveArg::Ntp => Objective::Ntp,
                ObjectiveArg::Coles => Objective::Coles,
            };
            let ht = (objective == Objective::Ntp && !no_ht).then(|| cfg.ht());
            let mut model = cfg.build_model(&prep.train.schema, prep.time, seed)?;
            let report = pretrain(&mut model, &prep.train, &prep.val, &cfg.train(seed, objective, ht))?;
            save_checkpoint(&out, &model.to_checkpoint()?)?;
            eprintln!(
                "best validation loss {:.6} at epoch {} ({} epochs run); wrote {}",
                report.best_val,
                report.best_epoch,
                report.val_history.len() - 1,
                out.display()
            );
        }
        Command::Finetune { common, checkpoint, task, out, seed } => {
            let cfg = load_config(&common, overrides)?;
            let model = load_model(&checkpoint)?;
            let prep = prepare_for(&cfg, Some(model.schema()))?;
            let classes = *prep.classes.get(&task).ok_or_else(|| Error::config(format!("unknown task `{task}`")))?;
            let tc = cfg.train(seed, Objective::Ntp, Some(cfg.ht()));
            let (tuned, report) = finetune(&model, &prep.train, &prep.val, &task, classes, &tc)?;
            save_checkpoint(&out, &tuned.to_checkpoint()?)?;
            eprintln!("best validation accuracy {:.6} at epoch {}; wrote {}", report.best_val, report.best_epoch, out.display());
        }
        Command::Embed { common, checkpoint, out, pooling, split } => {
            let cfg = load_config(&common, overrides)?;
            let model = load_model(&checkpoint)?;
            let prep = prepare_for(&cfg, Some(model.schema()))?;
            let data = pick(&prep, split);
            let records = extract_embeddings_multi(&model, &data, &[pooling], cfg.max_len, cfg.exec)?;
            save_embeddings(&records[0], &out)?;
            eprintln!("wrote {} embeddings to {}", records[0].len(), out.display());
        }
        Command::Classify { common, task, checkpoint, train_embeddings, test_embeddings, out } => {
            let cfg = load_config(&common, overrides)?;
            if let Some(ck) = checkpoint {
                let model = load_model(&ck)?;
                match model.classifier() {
                    Some(c) if c.task == task => {}
                    _ => return Err(Error::config(format!("checkpoint has no classifier for `{task}`"))),
                }
                let prep = prepare_for(&cfg, Some(model.schema()))?;
                let test = &prep.test;
                let mut probs = Vec::with_capacity(test.len());
                for s in &test.sequences {
                    probs.push(model.predict_proba(&s.truncate_suffix(cfg.max_len))?);
                }
                let pred: Vec<i64> = probs
                    .iter()
                    .map(|p| p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b }) as i64)
                    .collect();
                let truth = test.labels(&task)?;
                let classes: Vec<i64> = (0..probs.first().map_or(0, Vec::len) as i64).collect();
                report_scores(&classes, &truth, &pred, &probs)?;
                if let Some(p) = out {
                    let ids: Vec<String> = test.sequences.iter().map(|s| s.id.clone()).collect();
                    write_predictions(&p, &ids, &pred, &probs)?;
                }
            } else {
                let (Some(tr), Some(te)) = (train_embeddings, test_embeddings) else {
                    return Err(Error::config("give --checkpoint or both --train-embeddings and --test-embeddings"));
                };
                let train = load_embeddings(&tr)?;
                let test = load_embeddings(&te)?;
                let (x, y) = htformer::pipeline::embed::task_matrix(&train, &task)?;
                let (tx, ty) = htformer::pipeline::embed::task_matrix(&test, &task)?;
                let seed = cfg.seeds.first().copied().unwrap_or(0);
                let lr = LogisticRegression::fit(&x, &y, cfg.downstream_l2, seed)?;
                let probs: Vec<Vec<f64>> = tx.iter().map(|v| lr.predict_proba(v)).collect();
                let pred: Vec<i64> = tx.iter().map(|v| lr.predict(v)).collect();
                report_scores(lr.classes(), &ty, &pred, &probs)?;
                if let Some(p) = out {
                    let ids: Vec<String> = test.iter().filter(|r| r.labels.contains_key(&task)).map(|r| r.id.clone()).collect();
                    write_predictions(&p, &ids, &pred, &probs)?;
                }
            }
        }
        Command::Evaluate { common, out, summary } => {
            let mut cfg = load_config(&common, overrides)?;
            cfg.mode = Mode::Table;
            write_report(&run_experiment(&cfg)?, &out, summary.as_deref())?;
        }
        Command::Sweep { common, out, summary } => {
            let mut cfg = load_config(&common, overrides)?;
            cfg.mode = Mode::Sweep;
            write_report(&run_experiment(&cfg)?, &out, summary.as_deref())?;
        }
        Command::Masks { command: MasksCommand::Dump { layout, strategy, seed } } => {
            if !overrides.is_empty() {
                return Err(Error::config("`masks dump` takes no configuration keys"));
            }
            let layout = TokenLayout::from_symbols(&layout)?;
            let mask = if strategy == "causal" {
                causal_mask(&layout)?
            } else {
                let selection: Selection = strategy.parse()?;
                ht_mask(&layout, selection, &mut rng::seeded(seed))?
            };
            let symbols: String = layout.tags.iter().map(|t: &TokenTag| t.symbol()).collect();
            println!("  {symbols}");
            for (row, line) in mask.render().lines().enumerate() {
                println!("{} {line}", symbols.chars().nth(row).unwrap_or(' '));
            }
            let report = check_mask(&mask, &layout);
            if !report.is_clean() {
                return Err(Error::Mask(format!("{report:?}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_target(false).init();
    let args: Vec<String> = std::env::args().collect();
    let (cli_args, override_args) = split_args(&args);
    let cli = Cli::parse_from(cli_args);
    let result = parse_override_args(&override_args).and_then(|o| run(cli.command, &o));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
