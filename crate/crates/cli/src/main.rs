use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use constpath::autodiff::{GradCheckOptions, Stencil};
use constpath::corpus::{load_corpus, save_corpus, write_corpus, Ontology, Sentence};
use constpath::evaluation::evaluate;
use constpath::model::{Config, Model, PipelineMode, Preset, Task};
use constpath::training::{train, write_metric_log};
use constpath::{check, synth, trace};

/// Frame-semantic parsing with constituency path features.
#[derive(Parser)]
#[command(name = "constpath", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus and its ontology.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint and a metric log.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated corpus.
    Eval(EvalArgs),
    /// Write predicted annotations for every sentence.
    Predict(PredictArgs),
    /// Compare analytic and numeric gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Dump intermediate values for one sentence.
    Trace(TraceArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    sentences: usize,
    /// Corpus output (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Ontology output (JSON).
    #[arg(long)]
    ontology: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Override a configuration key, e.g. `--set lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Disable the GCN; path features become zeros of the same width.
    #[arg(long)]
    no_gcn: bool,
}

impl ConfigArgs {
    fn resolve(&self, extra: Vec<(String, String)>) -> Result<Config, CliError> {
        let base = match &self.config {
            Some(path) => Config::load(path).map_err(at(path))?,
            None => Config::preset(self.preset),
        };
        let mut pairs = self
            .overrides
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                    .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{kv}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        pairs.extend(extra);
        if self.no_gcn {
            pairs.push(("use_gcn".into(), "false".into()));
        }
        Ok(base.with_overrides(&pairs)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ModeArgs {
    /// Use gold targets and lexical units.
    #[arg(long)]
    gold_targets: bool,
    /// Use gold targets and frames; implies --gold-targets.
    #[arg(long)]
    gold_frames: bool,
}

impl ModeArgs {
    fn mode(&self) -> PipelineMode {
        if self.gold_frames {
            PipelineMode::GoldFrames
        } else if self.gold_targets {
            PipelineMode::GoldTargets
        } else {
            PipelineMode::Full
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the task the checkpoint was trained for.
    #[arg(long)]
    task: Option<Task>,
    #[command(flatten)]
    mode: ModeArgs,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    mode: ModeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Entries sampled per parameter; 0 checks every entry.
    #[arg(long, default_value_t = 0)]
    entries: usize,
    #[arg(long, default_value_t = check::default_options().tolerance)]
    tolerance: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = check::CHECK_EPS)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = StencilArg::Central4)]
    stencil: StencilArg,
    /// Check at the configured widths instead of shrinking them first.
    #[arg(long)]
    full_width: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StencilArg {
    Central2,
    Central4,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based sentence index in the corpus.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(constpath::Error),
    GradCheck(String),
}

impl From<constpath::Error> for CliError {
    fn from(e: constpath::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

/// Names the file in I/O errors.
fn at<P: AsRef<Path>>(path: P) -> impl Fn(constpath::Error) -> CliError {
    move |e| match e {
        constpath::Error::Io(io) => CliError::Data(
            io::Error::new(io.kind(), format!("{}: {io}", path.as_ref().display())).into(),
        ),
        other => CliError::Data(other),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    if args.sentences == 0 {
        return Err(CliError::Usage("--sentences must be at least 1".into()));
    }
    let corpus = synth::generate(args.seed, args.sentences)?;
    save_corpus(&corpus, &args.out)?;
    synth::ontology().save(&args.ontology)?;
    log::info!("wrote {} sentences to {}", corpus.len(), args.out.display());
    Ok(())
}

fn required(value: Option<String>, what: &str) -> Result<String, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("no {what} given (flag or config key)")))
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut extra = Vec::new();
    let mut set = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            extra.push((key.to_string(), serde_json::Value::String(v).to_string()));
        }
    };
    set("task", args.task.map(|t| t.name().to_string()));
    let path = |p: Option<PathBuf>| p.map(|p| p.to_string_lossy().into_owned());
    set("train_data", path(args.train));
    set("dev_data", path(args.dev));
    set("ontology", path(args.ontology));
    set("output_dir", path(args.output_dir));
    let config = args.config.resolve(extra)?;

    let train_path = required(config.train_data.clone(), "training data")?;
    let train_set = load_corpus(&train_path).map_err(at(&train_path))?;
    let dev_set: Vec<Sentence> = match &config.dev_data {
        Some(p) => load_corpus(p).map_err(at(p))?,
        None => Vec::new(),
    };
    let onto_path = required(config.ontology.clone(), "ontology")?;
    let ontology = Ontology::load(&onto_path).map_err(at(&onto_path))?;
    let out_dir = PathBuf::from(config.output_dir.clone().unwrap_or_else(|| "run".into()));
    fs::create_dir_all(&out_dir)?;

    let mut model = Model::from_corpus(config.clone(), &train_set, ontology)?;
    if let Some(vectors) = &config.token_vectors {
        let n = model.load_token_vectors(vectors).map_err(at(vectors))?;
        log::info!("loaded {n} token vectors");
    }
    let outcome = train(model, &train_set, &dev_set)?;
    outcome.model.save(out_dir.join("model.json"))?;
    write_metric_log(
        &outcome.log,
        BufWriter::new(fs::File::create(out_dir.join("metrics.csv"))?),
    )?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;
    println!(
        "best epoch {} metric {:.6} after {} epochs ({:?}); wrote {}",
        outcome.best_epoch,
        outcome.best_metric,
        outcome.log.len(),
        outcome.stop,
        out_dir.join("model.json").display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let model = Model::load(&args.checkpoint).map_err(at(&args.checkpoint))?;
    let corpus = load_corpus(&args.data).map_err(at(&args.data))?;
    let task = args.task.unwrap_or(model.config.task);
    let report = evaluate(&model, &corpus, task, args.mode.mode())?;
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<(), CliError> {
    let model = Model::load(&args.checkpoint).map_err(at(&args.checkpoint))?;
    let corpus = load_corpus(&args.data).map_err(at(&args.data))?;
    let mode = args.mode.mode();
    let mut predicted = Vec::with_capacity(corpus.len());
    for s in &corpus {
        let p = model.predict(s, mode)?;
        predicted.push(Sentence {
            annotations: p.annotations,
            ..s.clone()
        });
    }
    let mut out = output(args.out.as_deref())?;
    write_corpus(&predicted, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let mut config = args.config.resolve(Vec::new())?;
    if !args.full_width {
        config = check::reduced_widths(&config);
    }
    let opts = GradCheckOptions {
        eps: args.eps,
        stencil: match args.stencil {
            StencilArg::Central2 => Stencil::Central2,
            StencilArg::Central4 => Stencil::Central4,
        },
        tolerance: args.tolerance,
        max_entries_per_param: (args.entries > 0).then_some(args.entries),
        ..check::default_options()
    };
    let checks = check::check_losses(&config, opts)?;
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &checks)?;
    writeln!(out)?;
    out.flush()?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({:e})", c.task, c.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

fn run_trace(args: TraceArgs) -> Result<(), CliError> {
    let model = Model::load(&args.checkpoint).map_err(at(&args.checkpoint))?;
    let corpus = load_corpus(&args.data).map_err(at(&args.data))?;
    let sentence = corpus.get(args.index).ok_or_else(|| {
        CliError::Usage(format!(
            "sentence index {} out of range ({} sentences)",
            args.index,
            corpus.len()
        ))
    })?;
    let text = trace::generate_trace(&model, sentence)?;
    let mut out = output(args.out.as_deref())?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Trace(a) => run_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::GradCheck(m)) => {
            eprintln!("gradient check failed: {m}");
            ExitCode::from(3)
        }
    }
}
