use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use imn::checkpoint;
use imn::config::RunConfig;
use imn::data::{parse_aspect_file, parse_raw_lines};
use imn::error::ImnError;
use imn::metrics::{compute_metrics, Prediction};
use imn::pipeline::{run_training, CHECKPOINT_FILE};
use imn::training::{predict_spans, EpochLog, TrainObserver};

#[derive(Parser)]
#[command(name = "imn", version, about = "Train, evaluate and run the interactive multi-task ABSA network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config and write the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a labeled aspect file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Where to write the JSON report (default: next to the checkpoint).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Extract aspect and opinion terms from raw text, one sentence per line.
    Tag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<ImnError> for Failure {
    fn from(e: ImnError) -> Self {
        match e {
            ImnError::Config(_) | ImnError::Parse { .. } => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Prints epoch lines as they happen and keeps them for the log file.
#[derive(Default)]
struct Progress {
    lines: Vec<String>,
}

impl TrainObserver for Progress {
    fn on_pretrain_epoch(&mut self, epoch: usize, loss: f64) {
        let line = format!("pretrain {epoch} doc_loss {loss:.6}");
        eprintln!("{line}");
        self.lines.push(line);
    }

    fn on_epoch(&mut self, log: &EpochLog) {
        let line = log.line();
        eprintln!("{line}");
        self.lines.push(line);
    }
}

fn train(config: &Path, seed: Option<u64>, overrides: &[String]) -> Result<(), Failure> {
    let mut cfg = RunConfig::from_file(config)?;
    let cwd = std::env::current_dir().unwrap_or_default();
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim(), &cwd)?;
    }
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    cfg.validate(true)?;
    let dir = cfg.checkpoint_dir.clone().expect("validated");

    let mut progress = Progress::default();
    let run = run_training(&cfg, &mut progress)?;
    let best = run
        .outcome
        .best()
        .ok_or_else(|| Failure::runtime("training ran no epochs"))?;

    fs::create_dir_all(&dir)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
    let dev: Vec<String> = run.outcome.dev_indices.iter().map(usize::to_string).collect();
    let mut log = format!("dev_sentences {}\n", dev.join(","));
    log.push_str(&progress.lines.join("\n"));
    let _ = write!(log, "\nbest_epoch {} dev_f1_i {:.2}\n", best.epoch, best.dev.f1_i * 100.0);
    write_file(&dir.join("train.log"), &log)?;
    write_file(&dir.join("dev_report.txt"), &format!("{}\n", best.dev))?;
    write_file(&dir.join("dev_report.json"), &format!("{:#}\n", best.dev.to_json()))?;
    write_file(&dir.join("run.cfg"), &cfg.to_kv())?;
    if let Some(test) = &cfg.test {
        let gold = parse_aspect_file(test)?;
        let report = evaluate(&run.model, &run.vocab, &gold, &cfg)?;
        write_file(&dir.join("test_report.json"), &format!("{:#}\n", report.to_json()))?;
    }
    checkpoint::save(dir.join(CHECKPOINT_FILE), &cfg, &run.vocab, &run.model)?;
    println!("best epoch {} dev F1-I {:.2}", best.epoch, best.dev.f1_i * 100.0);
    println!("{}", best.dev);
    println!("checkpoint written to {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn evaluate(
    model: &imn::model::Imn,
    vocab: &imn::vocab::Vocabulary,
    gold: &[imn::data::AspectInstance],
    cfg: &RunConfig,
) -> Result<imn::metrics::EvalReport, Failure> {
    let sentences: Vec<&[String]> = gold.iter().map(|i| i.tokens.as_slice()).collect();
    let preds = predict_spans(model, vocab, &sentences, cfg.training.iterations, cfg.training.batch_size)?;
    Ok(compute_metrics(&preds, gold)?)
}

fn eval(checkpoint: &Path, test: &Path, report: Option<&Path>) -> Result<(), Failure> {
    let ck = checkpoint::load(checkpoint)?;
    let gold = parse_aspect_file(test)?;
    if gold.is_empty() {
        return Err(Failure::usage(format!("{} contains no sentences", test.display())));
    }
    let total: usize = gold.iter().map(|i| i.len()).sum();
    let unknown = gold
        .iter()
        .flat_map(|i| &i.tokens)
        .filter(|t| ck.vocab.lookup(t).is_none())
        .count();
    if unknown > 0 {
        eprintln!("warning: {unknown} of {total} test tokens are not in the checkpoint vocabulary and map to UNK");
    }
    let r = evaluate(&ck.model, &ck.vocab, &gold, &ck.config)?;
    println!("{r}");
    let path = match report {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("eval_report.json"),
    };
    write_file(&path, &format!("{:#}\n", r.to_json()))?;
    Ok(())
}

fn render_tags(tokens: &[String], pred: &Prediction) -> String {
    let mut out = format!("sentence: {}\n", tokens.join(" "));
    let text = |s: &imn::metrics::Span| tokens[s.start..=s.end].join(" ");
    for s in &pred.aspects {
        let sentiment = s.sentiment.map_or("-", |v| v.as_str());
        let _ = writeln!(out, "aspect\t{}\t{}\t{}-{}", text(s), sentiment, s.start, s.end);
    }
    for s in &pred.opinions {
        let _ = writeln!(out, "opinion\t{}\t{}-{}", text(s), s.start, s.end);
    }
    out
}

fn tag(checkpoint: &Path, input: &Path) -> Result<(), Failure> {
    let ck = checkpoint::load(checkpoint)?;
    let text = fs::read_to_string(input)
        .map_err(|e| Failure::runtime(format!("cannot read {}: {e}", input.display())))?;
    let sentences = parse_raw_lines(&text);
    let refs: Vec<&[String]> = sentences.iter().map(|s| s.as_slice()).collect();
    let preds = predict_spans(
        &ck.model,
        &ck.vocab,
        &refs,
        ck.config.training.iterations,
        ck.config.training.batch_size,
    )?;
    let blocks: Vec<String> = sentences
        .iter()
        .zip(&preds)
        .map(|(s, p)| render_tags(s, p))
        .collect();
    print!("{}", blocks.join("\n"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            seed,
            overrides,
        } => train(config, *seed, overrides),
        Command::Eval {
            checkpoint,
            test,
            report,
        } => eval(checkpoint, test, report.as_deref()),
        Command::Tag { checkpoint, input } => tag(checkpoint, input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
