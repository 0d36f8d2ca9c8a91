use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aes_core::metrics::qwk;
use aes_core::runner::{self, ExperimentConfig, HeadKind, Layout, Stage};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aes", version, about = "Long-essay scoring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus, split it and write corpus statistics.
    Ingest(StageArgs),
    /// Run every configured summarizer over the corpus.
    Summarize(StageArgs),
    /// Embed the summaries with every provider.
    Embed(StageArgs),
    /// Train the selected heads and write test predictions.
    Train(StageArgs),
    /// Recompute QWK from the predictions and write the manifest.
    Evaluate(StageArgs),
    /// Write result tables from the manifest.
    Report(StageArgs),
    /// Write length histogram data.
    Hist(StageArgs),
    /// All stages in order.
    Run(StageArgs),
    /// QWK between two integer columns of a CSV file, printed to 6 decimals.
    Qwk(QwkArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    PerProviderHead,
    MlpConcat,
    BoosterPair,
    VotingEnsemble,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::PerProviderHead => HeadKind::PerProviderHead,
            HeadArg::MlpConcat => HeadKind::MlpConcat,
            HeadArg::BoosterPair => HeadKind::BoosterPair,
            HeadArg::VotingEnsemble => HeadKind::VotingEnsemble,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `corpus.path`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Overrides `split.seed`.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Overrides `heads.selected`; repeat for several heads.
    #[arg(long = "head", value_enum)]
    heads: Vec<HeadArg>,
}

impl StageArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(c) = &self.corpus {
            cfg.corpus.path = c.clone();
        }
        if let Some(s) = self.split_seed {
            cfg.split.seed = s;
        }
        if !self.heads.is_empty() {
            cfg.heads.selected = self.heads.iter().map(|&h| h.into()).collect();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct QwkArgs {
    /// CSV file with a header row.
    csv: PathBuf,
    /// Column of the first rater.
    #[arg(long, default_value = "label")]
    a: String,
    /// Column of the second rater.
    #[arg(long, default_value = "prediction")]
    b: String,
    /// Number of score categories.
    #[arg(long, default_value_t = 6)]
    categories: usize,
}

fn read_columns(path: &Path, a: &str, b: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{} has no column {name:?}", path.display()))
    };
    let (ia, ib) = (index(a)?, index(b)?);
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<u8> {
            rec.get(j)
                .unwrap_or("")
                .trim()
                .parse()
                .with_context(|| format!("row {}: rating is not a small integer", i + 1))
        };
        xa.push(parse(ia)?);
        xb.push(parse(ib)?);
    }
    if xa.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok((xa, xb))
}

fn stage(args: &StageArgs, stage: Stage) -> Result<()> {
    let cfg = args.load()?;
    runner::run_stage(&cfg, stage)?;
    let layout = Layout::new(&cfg.output_dir);
    match stage {
        Stage::Evaluate => print_rows(&layout)?,
        Stage::Report => println!("{}", layout.reports().display()),
        _ => {}
    }
    Ok(())
}

fn print_rows(layout: &Layout) -> Result<()> {
    let manifest = runner::read_manifest(layout.manifest())?;
    let mut rows = manifest.report_rows();
    runner::sort_rows(&mut rows);
    print!("{}", runner::render_text_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => stage(&a, Stage::Ingest),
        Command::Summarize(a) => stage(&a, Stage::Summarize),
        Command::Embed(a) => stage(&a, Stage::Embed),
        Command::Train(a) => stage(&a, Stage::Train),
        Command::Evaluate(a) => stage(&a, Stage::Evaluate),
        Command::Report(a) => stage(&a, Stage::Report),
        Command::Hist(a) => stage(&a, Stage::Hist),
        Command::Run(a) => {
            let cfg = a.load()?;
            runner::run_experiment(&cfg)?;
            print_rows(&Layout::new(&cfg.output_dir))
        }
        Command::Qwk(a) => {
            let (x, y) = read_columns(&a.csv, &a.a, &a.b)?;
            println!("{:.6}", qwk(&x, &y, a.categories)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
