use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use forge_core::audit::{default_annotators, render_report, sample_for_audit, AuditStore};
use forge_core::bench::{emit_report, BenchReport, GroupScores, PairwiseCase, PointwiseCase, ReportFormat};
use forge_core::model::{encode_record, read_records, PreferencePair, Record};
use forge_core::pipeline::{
    merge_files, render_stats, resume, run_config, stage_stats, synthetic_corpus, MergeOptions, Pipeline,
    PipelineConfig, PipelineError, RunSummary,
};

/// Exit status when a run stops at a stage with pending work.
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "forge", version, about = "Build and evaluate AI-judged preference datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic reference corpus and a desk-scale config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the cinematic flow and assemble its pairs.
    Cinematic(ConfigArg),
    /// Run the non-cinematic flow and assemble its pairs.
    Noncinematic(ConfigArg),
    /// Run every flow enabled in the config.
    Run(ConfigArg),
    /// Re-assemble the dataset from all accepted pairs in a run directory.
    Assemble {
        #[arg(long, default_value = ".")]
        run: PathBuf,
    },
    /// Combine a run's dataset with external preference pairs.
    Merge {
        #[arg(long)]
        external: PathBuf,
        #[arg(long, default_value = ".")]
        run: PathBuf,
        #[arg(long, default_value = "external")]
        source_tag: String,
        /// Keep a seeded subset of this many external records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Continue an interrupted run.
    Resume { run_dir: PathBuf },
    /// Print the stage statistics of a run.
    Stats {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = StatsFormat::Table)]
        format: StatsFormat,
    },
    /// Reward-model benchmark reports.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
    /// Human audit of a dataset.
    Audit {
        #[command(subcommand)]
        which: AuditCommand,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsFormat {
    Table,
    Records,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "table")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    Pairwise {
        #[arg(long)]
        cases: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    Pointwise {
        #[arg(long)]
        cases: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    Poster {
        #[arg(long)]
        scores: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Sample tasks from a dataset (first start only) and serve them.
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Comma-separated annotator ids.
        #[arg(long, value_delimiter = ',')]
        annotators: Option<Vec<String>>,
        /// Task and annotation directory; defaults to `audit/` next to the dataset.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Sample uniformly instead of in proportion to policy strata.
        #[arg(long)]
        uniform: bool,
    },
    /// Print the alignment report of an audit store.
    Report {
        #[arg(long)]
        store: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(stage) = err.downcast_ref::<PipelineError>().and_then(PipelineError::stage) {
                eprintln!("error: aborted at stage {stage}: {err:#}");
                eprintln!("hint: fix the judge and run `forge resume <run-dir>`");
                return ExitCode::from(EXIT_ABORTED);
            }
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, seed } => {
            let corpus = synthetic_corpus(seed);
            corpus.write(&out.join("corpus"))?;
            let config = PipelineConfig::desk(seed, "corpus", "run");
            std::fs::write(out.join("forge.toml"), config.to_toml())?;
            println!(
                "wrote {} samples in {} groups and {}",
                corpus.samples.len(),
                corpus.groups.len(),
                out.join("forge.toml").display()
            );
        }
        Command::Cinematic(c) => report_run(pipeline(&c.config)?.run_cinematic()?),
        Command::Noncinematic(c) => report_run(pipeline(&c.config)?.run_noncinematic()?),
        Command::Run(c) => {
            let p = pipeline(&c.config)?;
            let flows = p.config().flows.clone();
            report_run(p.run(&flows)?)
        }
        Command::Assemble { run } => {
            let mut config = run_config(&run)?;
            config.paths.output = run.clone();
            report_run(Pipeline::new(config)?.assemble()?)
        }
        Command::Merge {
            external,
            run,
            source_tag,
            limit,
            seed,
        } => {
            let manifest = merge_files(
                &run,
                &external,
                &MergeOptions {
                    source_tag,
                    limit,
                    seed,
                },
            )?;
            println!("merged {} records", manifest.record_count);
            for (source, n) in &manifest.sources {
                println!("  {source}: {n}");
            }
        }
        Command::Resume { run_dir } => report_run(resume(&run_dir)?),
        Command::Stats { run_dir, format } => {
            let stats = stage_stats(&run_dir)?;
            match format {
                StatsFormat::Table => print!("{}", render_stats(&stats)),
                StatsFormat::Records => {
                    for s in &stats {
                        println!("{}", encode_record(s)?);
                    }
                }
            }
        }
        Command::Bench { which } => bench(which)?,
        Command::Audit { which } => audit(which)?,
    }
    Ok(())
}

fn pipeline(config: &Path) -> Result<Pipeline> {
    let config = PipelineConfig::load(config)?;
    Ok(Pipeline::new(config)?)
}

fn report_run(summary: RunSummary) {
    print!("{}", render_stats(&summary.stats));
    println!();
    println!("dataset: {} pairs", summary.manifest.record_count);
    println!(
        "orientation: {} chosen-first, {} chosen-second",
        summary.orientation.chosen_first, summary.orientation.chosen_second
    );
    println!("manifest digest: {}", summary.manifest.digest());
    println!("run directory: {}", summary.run_dir.display());
}

fn load<R: Record>(path: &Path) -> Result<Vec<R>> {
    read_records(path).with_context(|| format!("reading {}", path.display()))
}

fn bench(which: BenchCommand) -> Result<()> {
    let (report, args) = match which {
        BenchCommand::Pairwise { cases, report } => {
            (BenchReport::from_pairwise(load::<PairwiseCase>(&cases)?)?, report)
        }
        BenchCommand::Pointwise { cases, report } => {
            (BenchReport::from_pointwise(load::<PointwiseCase>(&cases)?)?, report)
        }
        BenchCommand::Poster { scores, report } => (BenchReport::from_poster(load::<GroupScores>(&scores)?)?, report),
    };
    let format: ReportFormat = args.format.parse()?;
    let text = emit_report(&report, format);
    match args.out {
        Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn audit(which: AuditCommand) -> Result<()> {
    match which {
        AuditCommand::Serve {
            dataset,
            n,
            seed,
            port,
            host,
            annotators,
            store,
            uniform,
        } => {
            let annotators = annotators.unwrap_or_else(default_annotators);
            if annotators.is_empty() {
                bail!("at least one annotator is needed");
            }
            let dir = store.unwrap_or_else(|| dataset.parent().unwrap_or(Path::new(".")).join("audit"));
            let store = AuditStore::open_or_create(
                &dir,
                || {
                    let pairs: Vec<PreferencePair> = read_records(&dataset)?;
                    sample_for_audit(&pairs, n, seed, !uniform)
                },
                &annotators,
            )?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
            let tasks = store.tasks().len();
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(forge_audit::serve(store, addr, |bound| {
                println!(
                    "serving {tasks} audit tasks on http://{bound} (store {})",
                    dir.display()
                );
            }))?;
        }
        AuditCommand::Report { store } => {
            let store = AuditStore::open(&store)?;
            print!("{}", render_report(&store.report()));
        }
    }
    Ok(())
}
