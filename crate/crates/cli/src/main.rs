use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reflectforge::config::PipelineConfig;
use reflectforge::emit::{stats_for_file, training_file_name};
use reflectforge::pipeline::{Pipeline, PipelineError, RunOptions, Stage, StageSummary};
use reflectforge::trajectory::{AblationMode, SpecialTokens};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "reflectforge", version, about = "Build reflective training data and evaluate models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline TOML file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Resumable {
    #[command(flatten)]
    common: Common,
    /// Continue from the last checkpoint instead of starting over.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load, validate and screen the raw corpora.
    Ingest(Common),
    /// Locate erroneous steps (RG1 and RG2).
    Pinpoint(Resumable),
    /// Generate reflection question, answer and correction per pinpoint.
    Reflect(Resumable),
    /// Replay reflections with the filter model and keep reliable ones.
    Filter(Resumable),
    /// Draw the per-source training subset.
    Sample(Common),
    /// Write training files, token manifest and per-mode stats.
    Emit {
        #[command(flatten)]
        common: Common,
        /// Restrict output to these ablation modes.
        #[arg(long = "mode")]
        modes: Vec<AblationMode>,
    },
    /// Print statistics for emitted training files.
    Stats {
        /// Config used to locate outputs and special tokens.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Training file to inspect; defaults to every mode in the output dir.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long = "mode")]
        modes: Vec<AblationMode>,
    },
    /// Score the eval target on the configured benchmarks.
    Eval(Common),
    /// Run several stages in order.
    Pipeline {
        #[command(flatten)]
        run: Resumable,
        /// Stages to run; all when omitted.
        #[arg(long = "stage")]
        stages: Vec<Stage>,
        /// Validate config and inputs without calling any backend.
        #[arg(long)]
        dry_run: bool,
    },
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::load(&common.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn pipeline(common: &Common) -> Result<Pipeline, Failure> {
    Ok(Pipeline::new(load(common)?)?)
}

fn print_summaries(summaries: &[StageSummary]) {
    for s in summaries {
        println!("{:<9} {:>6} -> {:<6} {}", s.stage.as_str(), s.input, s.output, s.artifact.display());
    }
}

fn stats(config: Option<&Path>, file: Option<&Path>, modes: &[AblationMode]) -> Result<(), Failure> {
    let (tokens, out_dir) = match config {
        Some(p) => {
            let cfg = PipelineConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?;
            (cfg.emit.tokens, Some(cfg.paths.outputs))
        }
        None => (SpecialTokens::default(), None),
    };
    let files: Vec<PathBuf> = match (file, out_dir) {
        (Some(f), _) => vec![f.to_path_buf()],
        (None, Some(dir)) => {
            let modes = if modes.is_empty() { &AblationMode::ALL[..] } else { modes };
            modes.iter().map(|&m| dir.join(training_file_name(m))).collect()
        }
        (None, None) => return Err(Failure::Config("pass --file or --config".into())),
    };
    let mut all = serde_json::Map::new();
    for f in files {
        let s = stats_for_file(&f, &tokens).map_err(|e| Failure::Stage(e.to_string()))?;
        all.insert(f.display().to_string(), serde_json::to_value(s).expect("serializable"));
    }
    println!("{}", serde_json::to_string_pretty(&all).expect("serializable"));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let single = |common: &Common, stage: Stage, resume: bool| -> Result<(), Failure> {
        let p = pipeline(common)?;
        let s = match stage {
            Stage::Ingest => p.ingest()?,
            Stage::Pinpoint => p.pinpoint(resume)?,
            Stage::Reflect => p.reflect(resume)?,
            Stage::Filter => p.filter(resume)?,
            Stage::Sample => p.sample()?,
            Stage::Emit => p.emit()?,
        };
        print_summaries(&[s]);
        Ok(())
    };
    match cli.command {
        Command::Ingest(c) => single(&c, Stage::Ingest, false),
        Command::Pinpoint(r) => single(&r.common, Stage::Pinpoint, r.resume),
        Command::Reflect(r) => single(&r.common, Stage::Reflect, r.resume),
        Command::Filter(r) => single(&r.common, Stage::Filter, r.resume),
        Command::Sample(c) => single(&c, Stage::Sample, false),
        Command::Emit { common, modes } => {
            let mut cfg = load(&common)?;
            if !modes.is_empty() {
                cfg.emit.modes = modes;
            }
            let s = Pipeline::new(cfg)?.emit()?;
            print_summaries(&[s]);
            Ok(())
        }
        Command::Stats { config, file, modes } => stats(config.as_deref(), file.as_deref(), &modes),
        Command::Eval(c) => {
            let results = pipeline(&c)?.eval()?;
            for r in &results {
                let mean = r.mean_accuracy.map(|m| format!("{m:.3}")).unwrap_or_else(|| "n/a".into());
                println!("{:<16} items={:<5} repeats={} accuracy={mean}", r.benchmark, r.items, r.repeats.len());
            }
            Ok(())
        }
        Command::Pipeline { run, stages, dry_run } => {
            let p = pipeline(&run.common)?;
            let opts = RunOptions {
                stages: if stages.is_empty() { Stage::ALL.to_vec() } else { stages },
                resume: run.resume,
                dry_run,
            };
            let summaries = p.run(&opts)?;
            if dry_run {
                println!("config ok; would run: {}", summaries.iter().map(|s| s.stage.as_str()).collect::<Vec<_>>().join(", "));
            } else {
                print_summaries(&summaries);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("stage failed: {msg}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
