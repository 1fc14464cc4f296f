//! `rtformer` command line: train, evaluate, sample from and analyze byte-level
//! models, and run the attention cost benchmark.
//!
//! Artifacts live under `$RTFORMER_RUNS/<digest>-s<seed>/` (default root
//! `./runs`). Exit codes: 0 success, 1 usage, 2 bad input, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rtformer::analysis::{jsd_report, scaling_benchmark, BenchKind};
use rtformer::model::SampleOptions;
use rtformer::training::{checkpoint, eval_windows, evaluate, CorpusWindows, TrainState, Trainer};
use rtformer::{load_byte_corpus, ByteCorpus, RunConfig};

const RUNS_ENV: &str = "RTFORMER_RUNS";
const FINAL_CHECKPOINT: &str = "final.rtck";

#[derive(Parser)]
#[command(name = "rtformer", version, about = "Routing attention language models over raw bytes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a byte corpus.
    Train(TrainArgs),
    /// Report validation loss of a trained run.
    Eval(EvalArgs),
    /// Generate bytes with nucleus sampling.
    Sample(SampleArgs),
    /// Jensen-Shannon divergence between attention heads.
    Analyze(AnalyzeArgs),
    /// Count attention multiply-accumulates per pattern and length.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Override `train.steps`.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Evaluate this checkpoint instead of the run's final one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Nucleus probability mass.
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Number of bytes to generate.
    #[arg(long, default_value_t = 256)]
    length: usize,
    #[arg(long, default_value = "The ")]
    prefix: String,
    /// Output file; defaults to `sample.txt` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Random windows to average over.
    #[arg(long, default_value_t = 10)]
    runs: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096])]
    ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "dense,local,routing")]
    kinds: Vec<String>,
    /// Head dimension.
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<rtformer::Error>().map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Analyze(a) => analyze(a),
        Command::Bench(a) => bench(a),
    }
}

/// A validated config together with its run directory and corpus.
struct Run {
    config: RunConfig,
    dir: PathBuf,
    corpus: ByteCorpus,
}

impl Run {
    fn open(args: &RunArgs, steps: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(&args.config)
            .with_context(|| format!("reading config {}", args.config.display()))?;
        let mut config = RunConfig::parse(&text)?;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        if let Some(steps) = steps {
            config.steps = steps;
        }
        if let Some(data) = &args.data {
            config.data_path = Some(data.clone());
        }
        config.validate()?;
        let Some(path) = config.data_path.clone() else {
            return Err(rtformer::Error::Config("no corpus: set data.path or pass --data".into()).into());
        };
        // Relative corpus paths are taken from the config file's directory.
        let path = match args.config.parent() {
            Some(base) if path.is_relative() && !path.exists() => base.join(path),
            _ => path,
        };
        let corpus = load_byte_corpus(&path, config.split)?;
        let root = std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        let dir = root.join(config.run_name());
        Ok(Self { config, dir, corpus })
    }

    fn eval_tokens(&self) -> &[u32] {
        if self.corpus.validation().is_empty() {
            self.corpus.train()
        } else {
            self.corpus.validation()
        }
    }

    fn load(&self, path: Option<&Path>) -> Result<TrainState> {
        let path = path.map_or_else(|| self.dir.join(FINAL_CHECKPOINT), Path::to_path_buf);
        if !path.exists() {
            bail!(rtformer::Error::Checkpoint(format!(
                "{} not found; run `rtformer train` with this config first",
                path.display()
            )));
        }
        Ok(checkpoint::load(&path, &self.config.model)?)
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let run = Run::open(&args.run, args.steps)?;
    fs::create_dir_all(&run.dir).with_context(|| format!("creating {}", run.dir.display()))?;
    fs::write(run.dir.join("config.cfg"), run.config.serialize())?;

    let n = run.config.model.max_seq;
    let source = CorpusWindows::new(run.corpus.train(), n)?;
    let windows = eval_windows(run.eval_tokens(), n, run.config.eval_windows)?;
    let state = TrainState::new(run.config.model.clone(), run.config.seed)?;
    let tc = run.config.train_config(Some(run.dir.join("checkpoints")));
    let mut trainer = Trainer::new(state, tc)?;
    let report = trainer.run(&source, &windows, run.config.steps)?;

    fs::write(run.dir.join("report.tsv"), report.to_tsv())?;
    fs::write(run.dir.join("timings.tsv"), report.timings_tsv())?;
    checkpoint::save(&trainer.state, &run.dir.join(FINAL_CHECKPOINT))?;
    print!("{}", report.to_tsv());
    eprintln!("run directory: {}", run.dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let run = Run::open(&args.run, None)?;
    let state = run.load(args.checkpoint.as_deref())?;
    let windows = eval_windows(run.eval_tokens(), run.config.model.max_seq, run.config.eval_windows)?;
    let m = evaluate(&state.model, &windows, state.seed)?;
    let table = format!(
        "step\tnats\tbits_per_dim\tperplexity\n{}\t{:.6}\t{:.6}\t{:.6}\n",
        state.step, m.nats, m.bits_per_dim, m.perplexity
    );
    fs::write(run.dir.join("eval.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    let run = Run::open(&args.run, None)?;
    let state = run.load(None)?;
    let prefix: Vec<u32> = args.prefix.bytes().map(u32::from).collect();
    let opts = SampleOptions { p: args.p, temperature: args.temperature, seed: run.config.seed };
    let ids = state.model.sample(&prefix, args.length, &opts)?;
    let bytes = ids
        .iter()
        .map(|&t| u8::try_from(t).with_context(|| format!("sampled id {t} is not a byte")))
        .collect::<Result<Vec<u8>>>()?;
    let out = args.out.unwrap_or_else(|| run.dir.join("sample.txt"));
    fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} bytes to {}", bytes.len(), out.display());
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let run = Run::open(&args.run, None)?;
    let state = run.load(None)?;
    let report = jsd_report(&state.model, run.eval_tokens(), args.runs, run.config.seed)?;
    let tsv = report.to_tsv();
    fs::write(run.dir.join("jsd.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let kinds = args
        .kinds
        .iter()
        .map(|k| k.parse::<BenchKind>())
        .collect::<rtformer::Result<Vec<_>>>()?;
    let report = scaling_benchmark(&args.ns, &kinds, args.d, args.seed)?;
    print!("{}", report.to_tsv());
    Ok(())
}
