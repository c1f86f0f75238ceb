//! Command-line verbs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use clonebench_core::corpus::io::{read_avatar, read_pairs, write_pairs};
use clonebench_core::corpus::{
    build_benchmark, convert_avatar, required_sample_size, sample_uniform, strip_source, Language, SamplingSpec,
};
use clonebench_core::demo::write_demo;
use clonebench_core::gateway::{BackendMode, Gateway};
use clonebench_core::pipeline::{mine_bias, run_ablation, run_eval, Experiment, ExperimentConfig, StoredRun};
use clonebench_core::report::{ablation_text, eval_text};

use crate::service::{self, ServiceState, TOKEN_VAR};

#[derive(Debug, Parser)]
#[command(name = "clonebench", version, about = "Evaluate prompt-driven code clone detection, mine its biases and test prompt lessons")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Answer every prompt from this fixture file, without network access.
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Skip malformed input lines instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn avatar translation records into labelled clone pairs.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        negatives: usize,
    },
    /// Size and draw a benchmark sample.
    Sample(SampleArgs),
    /// Remove comments from a source file, or from every pair in a pair file.
    StripComments {
        input: PathBuf,
        /// Language of a single source file; omit for pair files.
        #[arg(long)]
        language: Option<Language>,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the configured prompt (or the ablation, if enabled in the config).
    Eval,
    /// Run the lesson ablation: default, each lesson, all lessons.
    Ablate,
    /// Collect confidences and rationales for a run's mistakes and categorise them.
    Mine {
        #[arg(long)]
        run: String,
    },
    /// Print a stored run's report.
    Report {
        #[arg(long)]
        run: String,
        #[arg(long)]
        json: bool,
    },
    /// Serve the triage HTTP interface.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write a synthetic dataset, replay fixture and config for offline runs.
    Demo {
        dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        pairs: usize,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Pair file to sample from. Without it only the size is printed.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Fixed sample size.
    #[arg(long)]
    size: Option<usize>,
    /// Population size when no input is given.
    #[arg(long)]
    population: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
    /// Draw uniformly instead of half clones, half non-clones.
    #[arg(long)]
    unbalanced: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Convert { input, output, negatives } => convert(g, input, output, *negatives),
        Command::Sample(args) => sample(g, args),
        Command::StripComments { input, language, output } => strip(g, input, *language, output.as_deref()),
        Command::Eval => {
            let exp = experiment(g)?;
            if exp.config.ablation {
                ablate(&exp)
            } else {
                eval(&exp)
            }
        }
        Command::Ablate => ablate(&experiment(g)?),
        Command::Mine { run } => mine(&experiment(g)?, run),
        Command::Report { run, json } => report(g, run, *json),
        Command::Serve { addr } => serve(&experiment(g)?, *addr),
        Command::Demo { dir, pairs } => {
            let files = write_demo(dir, *pairs, g.seed.unwrap_or(42))?;
            println!("dataset  {}", files.dataset.display());
            println!("fixture  {}", files.fixture.display());
            println!("config   {}", files.config.display());
            Ok(())
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().context("this command needs --config")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(fixture) = &g.replay {
        cfg.backend.mode = BackendMode::Replay;
        cfg.backend.cache_path = Some(fixture.clone());
    }
    if g.lenient {
        cfg.dataset.lenient = true;
    }
    Ok(cfg)
}

fn experiment(g: &Global) -> Result<Experiment> {
    Ok(Experiment::load(load_config(g)?)?)
}

fn gateway(exp: &Experiment) -> Result<Gateway> {
    Gateway::from_config(exp.config.backend.clone()).context("cannot set up the model backend")
}

fn eval(exp: &Experiment) -> Result<()> {
    let out = run_eval(exp, &gateway(exp)?)?;
    print!("{}", eval_text(&out.report));
    println!("\n{}", out.dir.display());
    Ok(())
}

fn ablate(exp: &Experiment) -> Result<()> {
    let out = run_ablation(exp, &gateway(exp)?)?;
    print!("{}", ablation_text(&out.report));
    println!("\n{}", out.dir.display());
    Ok(())
}

fn mine(exp: &Experiment, run_id: &str) -> Result<()> {
    let run = StoredRun::open(&exp.config.output_dir, run_id)?;
    let mined = mine_bias(&run, &exp.taxonomy, &exp.config.mining, &gateway(exp)?)?;
    print!("{}", mined.report.to_text());
    println!("\n{}", mined.dir.display());
    Ok(())
}

fn report(g: &Global, run_id: &str, json: bool) -> Result<()> {
    let output_dir = match &g.out {
        Some(out) => out.clone(),
        None => load_config(g)?.output_dir,
    };
    let run = StoredRun::open(&output_dir, run_id)?;
    if json {
        print!("{}", run.report_json()?);
    } else {
        print!("{}", run.report_text()?);
        for id in run.mining_ids()? {
            if let Some(m) = run.mining(&id)? {
                print!("\n{}", m.report.to_text());
            }
        }
    }
    Ok(())
}

fn serve(exp: &Experiment, addr: SocketAddr) -> Result<()> {
    let token = std::env::var(TOKEN_VAR).ok();
    if token.is_none() {
        log::warn!("{TOKEN_VAR} is not set; the service accepts unauthenticated requests");
    }
    let state = ServiceState::new(exp, token)?;
    tokio::runtime::Runtime::new()?.block_on(service::serve(state, addr))
}

fn convert(g: &Global, input: &Path, output: &Path, negatives: usize) -> Result<()> {
    let f = File::open(input).with_context(|| format!("cannot open {}", input.display()))?;
    let loaded = read_avatar(BufReader::new(f), g.lenient)?;
    for s in &loaded.skipped {
        log::warn!("skipped line {}: {}", s.line, s.message);
    }
    let conv = convert_avatar(&loaded.records, negatives, g.seed.unwrap_or(0))?;
    for w in &conv.warnings {
        log::warn!("{w:?}");
    }
    write_pairs(BufWriter::new(File::create(output)?), &conv.pairs)?;
    eprintln!(
        "{} records -> {} pairs ({} clones)",
        loaded.records.len(),
        conv.pairs.len(),
        conv.positives()
    );
    Ok(())
}

fn sample(g: &Global, a: &SampleArgs) -> Result<()> {
    let pairs = match &a.input {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
            Some(read_pairs(BufReader::new(f), g.lenient)?.records)
        }
        None => None,
    };
    let population = match (&pairs, a.population) {
        (Some(p), _) => p.len() as u64,
        (None, Some(n)) => n,
        (None, None) => bail!("give --input or --population"),
    };
    let size = match a.size {
        Some(n) => n,
        None => required_sample_size(&SamplingSpec {
            population_size: population,
            confidence_level: a.confidence,
            margin_of_error: a.margin,
            seed: g.seed.unwrap_or(0),
            balanced: !a.unbalanced,
        })? as usize,
    };
    let Some(pairs) = pairs else {
        println!("{size}");
        return Ok(());
    };
    let seed = g.seed.unwrap_or(0);
    let picked = if a.unbalanced {
        sample_uniform(&pairs, size, seed)?
    } else {
        build_benchmark(&pairs, size + size % 2, seed)?
    };
    match &a.output {
        Some(path) => write_pairs(BufWriter::new(File::create(path)?), &picked)?,
        None => write_pairs(std::io::stdout().lock(), &picked)?,
    }
    eprintln!("sampled {} of {population} pairs", picked.len());
    Ok(())
}

fn strip(g: &Global, input: &Path, language: Option<Language>, output: Option<&Path>) -> Result<()> {
    let mut sink: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    match language {
        Some(lang) => {
            let mut text = String::new();
            File::open(input)?.read_to_string(&mut text)?;
            sink.write_all(strip_source(&text, lang)?.as_bytes())?;
        }
        None => {
            let f = File::open(input).with_context(|| format!("cannot open {}", input.display()))?;
            let pairs = read_pairs(BufReader::new(f), g.lenient)?.records;
            let stripped = pairs.iter().map(|p| p.without_comments()).collect::<Result<Vec<_>, _>>()?;
            write_pairs(&mut sink, &stripped)?;
        }
    }
    sink.flush()?;
    Ok(())
}
