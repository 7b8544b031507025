use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spkmetric::checkpoint::{load_checkpoint, save_checkpoint};
use spkmetric::config::ExperimentConfig;
use spkmetric::eval::{evaluate, write_score_csv};
use spkmetric::objective::Registry;
use spkmetric::report::{read_runs_csv, render_table, summarize, write_runs_csv, write_summary_csv};
use spkmetric::synth::{export_corpus, generate, load_corpus, Corpus};
use spkmetric::trainer::{train, train_sweep};

/// Train and evaluate speaker-embedding objectives on synthetic open-set corpora.
#[derive(Parser)]
#[command(name = "spkmetric", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Replace the configured seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, manifest and trial list.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per repeat and save checkpoints and telemetry.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus written by `generate`; generated in memory from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Objective to train instead of the configured one.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Train and evaluate every grid cell, then write the result table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Only run cells of this objective.
        #[arg(long)]
        objective: Option<String>,
        /// Trainings to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a checkpoint on a corpus' trial list.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for the report and per-trial scores; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the table of a sweep results directory.
    Report {
        /// Directory containing `runs.csv`.
        results: PathBuf,
        /// Where to write `table.txt` and `summary.csv`; defaults to the results directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        objective: Option<String>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn corpus_for(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Corpus> {
    match dir {
        Some(d) => load_corpus(d).with_context(|| format!("reading corpus {}", d.display())),
        None => Ok(generate(&cfg.data)?),
    }
}

fn check_objective(name: Option<&str>) -> Result<()> {
    if let Some(n) = name {
        let registry = Registry::builtin();
        if !registry.contains(n) {
            return Err(spkmetric::Error::Config(format!(
                "unknown objective `{n}`; expected one of: {}",
                registry.names().collect::<Vec<_>>().join(", ")
            ))
            .into());
        }
    }
    Ok(())
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = load_config(common.config.as_deref(), common.seed_override)?;
    let corpus = generate(&cfg.data)?;
    export_corpus(&corpus, &common.out).with_context(|| format!("writing {}", common.out.display()))?;
    println!(
        "wrote {} train and {} test speakers, {} trials to {}",
        corpus.train.index.speaker_count(),
        corpus.test.index.speaker_count(),
        corpus.trials.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, corpus: Option<&Path>, objective: Option<&str>) -> Result<()> {
    check_objective(objective)?;
    let cfg = load_config(common.config.as_deref(), common.seed_override)?;
    let corpus = corpus_for(&cfg, corpus)?;
    let mut run = cfg.run_config();
    if let Some(name) = objective {
        run.objective.name = name.to_string();
        Registry::builtin().build(&run.objective)?;
    }
    fs::create_dir_all(&common.out)?;
    let base = run.train.seed;
    for r in 0..run.train.repeats {
        let mut cfg_r = run.clone();
        cfg_r.train.seed = base.wrapping_add(r as u64);
        let seed = cfg_r.train.seed;
        log::info!("training {} with seed {seed}", cfg_r.objective.name);
        let outcome = train(&cfg_r, &corpus.train)?;
        let ckpt = common.out.join(format!("model_seed{seed}.ckpt"));
        save_checkpoint(&ckpt, &outcome.embedder, &outcome.loss_params)?;
        fs::write(common.out.join(format!("telemetry_seed{seed}.txt")), outcome.telemetry.to_text())?;
        let last = outcome.telemetry.records.last().map_or(f64::NAN, |r| r.loss);
        println!("{}: final loss {last} ({} steps)", ckpt.display(), outcome.telemetry.total_steps());
    }
    Ok(())
}

fn cmd_sweep(common: &Common, corpus: Option<&Path>, objective: Option<&str>, jobs: usize) -> Result<()> {
    check_objective(objective)?;
    let cfg = load_config(common.config.as_deref(), common.seed_override)?;
    let corpus = corpus_for(&cfg, corpus)?;
    let cells = ExperimentConfig::filter_objective(cfg.sweep_cells()?, objective);
    if cells.is_empty() {
        bail!("no sweep cells left after filtering");
    }
    log::info!("{} cells x {} repeats on {jobs} workers", cells.len(), cfg.train.repeats);
    let outcome = train_sweep(&cells, cfg.train.repeats, &corpus, &cfg.eval, jobs)?;

    let tele_dir = common.out.join("telemetry");
    fs::create_dir_all(&tele_dir)?;
    for (run, tele) in outcome.runs.iter().zip(&outcome.telemetry) {
        if let Some(t) = tele {
            let label: String = run
                .hyperparameters
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
                .collect();
            let name = format!("{}_{label}_seed{}.txt", run.objective, run.seed);
            fs::write(tele_dir.join(name), t.to_text())?;
        }
    }
    write_runs_csv(fs::File::create(common.out.join("runs.csv"))?, &outcome.runs)?;
    write_report(&outcome.runs, &common.out)?;
    let failed = outcome.runs.iter().filter(|r| r.eer.is_none()).count();
    if failed > 0 {
        bail!("{failed} of {} runs failed; see runs.csv", outcome.runs.len());
    }
    Ok(())
}

fn write_report(runs: &[spkmetric::report::RunRecord], out: &Path) -> Result<()> {
    let registry = Registry::builtin();
    let rows = summarize(runs, &registry);
    let table = render_table(&rows, &registry);
    fs::create_dir_all(out)?;
    fs::write(out.join("table.txt"), &table)?;
    write_summary_csv(fs::File::create(out.join("summary.csv"))?, &rows)?;
    print!("{table}");
    Ok(())
}

fn cmd_evaluate(config: Option<&Path>, checkpoint: &Path, corpus: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, None)?;
    let (embedder, _) = load_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let corpus = load_corpus(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let (report, scored) = evaluate(&embedder, &corpus.test, &corpus.trials, &cfg.eval)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.txt"), &text)?;
        let mut w = std::io::BufWriter::new(fs::File::create(dir.join("scores.csv"))?);
        write_score_csv(&mut w, &corpus.test, &corpus.trials, &scored)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_report(results: &Path, out: Option<&Path>, objective: Option<&str>) -> Result<()> {
    check_objective(objective)?;
    let path = results.join("runs.csv");
    let file = fs::File::open(&path).with_context(|| format!("no results at {}", path.display()))?;
    let mut runs = read_runs_csv(file)?;
    if let Some(name) = objective {
        runs.retain(|r| r.objective == name);
    }
    if runs.is_empty() {
        bail!("{} holds no result rows", path.display());
    }
    write_report(&runs, out.unwrap_or(results))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { common } => cmd_generate(common),
        Command::Train {
            common,
            corpus,
            objective,
        } => cmd_train(common, corpus.as_deref(), objective.as_deref()),
        Command::Sweep {
            common,
            corpus,
            objective,
            jobs,
        } => cmd_sweep(common, corpus.as_deref(), objective.as_deref(), *jobs),
        Command::Evaluate {
            config,
            checkpoint,
            corpus,
            out,
        } => cmd_evaluate(config.as_deref(), checkpoint, corpus, out.as_deref()),
        Command::Report {
            results,
            out,
            objective,
        } => cmd_report(results, out.as_deref(), objective.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .any(|c| c.downcast_ref::<spkmetric::Error>().is_some_and(spkmetric::Error::is_validation));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
