use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use logex::eval::EvalReport;
use logex::guidance::Objective;
use logex::pipeline::{
    emit_report, run_method_suite, ExperimentConfig, LedgerEntry, Method, ReportFormat, Runner, Stage, ROOT_ENV,
};

#[derive(Parser)]
#[command(name = "logex", version, about = "Tail-class detection with adapted, guided diffusion")]
struct Cli {
    /// Experiments root; artifacts go to `<root>/<experiment>/<stage>/`.
    #[arg(long, global = true, env = ROOT_ENV)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Also run missing upstream stages instead of failing.
    #[arg(long)]
    with_upstream: bool,
}

#[derive(Args)]
struct Cell {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "ce")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GuidanceFlags {
    #[arg(long)]
    confidence_threshold: Option<f64>,
    #[arg(long)]
    max_outer_steps: Option<usize>,
    #[arg(long)]
    latent_lr: Option<f64>,
    #[arg(long)]
    sampling_steps: Option<usize>,
    #[arg(long)]
    optimize_conditioning: bool,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    TargetConfidence,
    Entropy,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum DiffusionCmd {
    /// Train the conditional denoiser on the full train split.
    Train(Common),
    /// Finetune low-rank adapters on tail classes.
    Lora(Common),
}

#[derive(Subcommand)]
enum Command {
    /// Write a desk-scale experiment config.
    Init {
        #[arg(long, default_value = "desk")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render or ingest the corpus.
    Corpus(Common),
    /// Train the auxiliary classifier.
    Train(Cell),
    /// Denoiser training and adapter finetuning.
    #[command(subcommand)]
    Diffusion(DiffusionCmd),
    /// Finetune low-rank adapters on tail classes.
    Lora(Common),
    /// Guided generation of tail images.
    Generate {
        #[command(flatten)]
        cell: Cell,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Train the final classifier for a method.
    Retrain(Cell),
    /// Score and evaluate a method's classifier on the test split.
    Eval(Cell),
    /// Every configured method and seed, then the reports.
    Suite(Common),
    /// Re-emit a suite report from its CSV.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Vec<FormatArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::read(path).with_context(|| format!("loading {}", path.display()))
}

fn stage(root: Option<&PathBuf>, common: &Common, cfg: ExperimentConfig, st: Stage, method: Method, seed: u64) -> Result<LedgerEntry> {
    let runner = Runner::new(cfg, root.map(PathBuf::as_path))?;
    let mut runner = if common.with_upstream { runner } else { runner.only(st) };
    Ok(runner.stage(st, method, seed)?)
}

fn print_entry(e: &LedgerEntry) {
    println!("{} [{}] {:?} {} ({:.1}s)", e.stage, e.key, e.status, e.dir.display(), e.wall_time_s);
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.root.as_ref();
    match cli.command {
        Command::Init { name, out } => {
            std::fs::write(&out, ExperimentConfig::desk(&name).to_toml()?)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Corpus(c) => print_entry(&stage(root, &c, load(&c.config)?, Stage::Corpus, Method::Ce, 0)?),
        Command::Diffusion(DiffusionCmd::Train(c)) => {
            print_entry(&stage(root, &c, load(&c.config)?, Stage::Diffusion, Method::Ce, 0)?)
        }
        Command::Diffusion(DiffusionCmd::Lora(c)) | Command::Lora(c) => {
            print_entry(&stage(root, &c, load(&c.config)?, Stage::Lora, Method::Ce, 0)?)
        }
        Command::Train(c) => {
            let cfg = load(&c.common.config)?;
            print_entry(&stage(root, &c.common, cfg, Stage::AuxClassifier, Method::Ce, c.seed)?)
        }
        Command::Generate { cell, guidance } => {
            let mut cfg = load(&cell.common.config)?;
            let method: Method = cell.method.parse()?;
            if !method.uses_synthetic() {
                bail!("method {method} does not generate images");
            }
            let g = &mut cfg.guidance;
            if let Some(v) = guidance.confidence_threshold {
                g.confidence_threshold = v;
            }
            if let Some(v) = guidance.max_outer_steps {
                g.max_outer_steps = v;
            }
            if let Some(v) = guidance.latent_lr {
                g.latent_lr = v;
            }
            if let Some(v) = guidance.sampling_steps {
                g.sampling_steps = v;
            }
            if let Some(o) = guidance.objective {
                g.objective = match o {
                    ObjectiveArg::TargetConfidence => Objective::TargetConfidence,
                    ObjectiveArg::Entropy => Objective::Entropy,
                };
            }
            g.optimize_conditioning |= guidance.optimize_conditioning;
            if let Some(n) = guidance.per_class {
                cfg.generated_per_class = Some(n);
            }
            cfg.validate()?;
            print_entry(&stage(root, &cell.common, cfg, Stage::Generate, method, cell.seed)?)
        }
        Command::Retrain(c) => {
            let cfg = load(&c.common.config)?;
            print_entry(&stage(root, &c.common, cfg, Stage::Retrain, c.method.parse()?, c.seed)?)
        }
        Command::Eval(c) => {
            let cfg = load(&c.common.config)?;
            let e = stage(root, &c.common, cfg, Stage::Evaluate, c.method.parse()?, c.seed)?;
            print_entry(&e);
            let dir = Runner::new(load(&c.common.config)?, root.map(PathBuf::as_path))?.dir.join(&e.dir);
            println!("{}", std::fs::read_to_string(dir.join("metrics.json"))?);
        }
        Command::Suite(c) => {
            let out = run_method_suite(load(&c.config)?, root.map(PathBuf::as_path))?;
            println!("{}", out.report.to_markdown());
            if let Some(z) = &out.zoo {
                println!("{}", z.to_markdown());
            }
            for f in &out.failures {
                eprintln!("failed: {} seed {}: {}", f.method, f.seed, f.reason);
            }
            println!("stages executed: {}, cached: {}", out.executed, out.cached);
        }
        Command::Report { common, format, out } => {
            let cfg = load(&common.config)?;
            let dir = logex::pipeline::experiment_dir(root.map(PathBuf::as_path), &cfg.name).join("report");
            let csv = std::fs::read_to_string(dir.join("report.csv"))
                .with_context(|| format!("no suite report in {}; run `logex suite` first", dir.display()))?;
            let report = EvalReport::from_csv(&csv)?;
            let formats: Vec<ReportFormat> = format
                .iter()
                .map(|f| match f {
                    FormatArg::Csv => ReportFormat::Csv,
                    FormatArg::Markdown => ReportFormat::Markdown,
                })
                .collect();
            for p in emit_report(&report, &formats, out.as_deref().unwrap_or(&dir))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
