mod config;
mod exit;
mod stages;
mod workdir;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ex2_core::bench::{generate_benchmark, BenchmarkConfig};
use ex2_core::dataset::{write_dataset, Example, Partition, SlicingConfig};

use crate::exit::Failure;
use crate::stages::{Ctx, StageResult};
use crate::workdir::Workdir;

#[derive(Parser)]
#[command(name = "ex2", version, about = "Synthesize training data for few-shot slices from many-shot exemplars")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, default_value = "ex2.json")]
    config: PathBuf,
    /// Artifact directory; overrides the config's `workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["stub", "oracle", "remote"])]
    backend: Option<String>,
    /// Fold to operate on when the plan has several.
    #[arg(long, global = true)]
    fold: Option<String>,
    /// Overwrite artifacts produced under a different configuration.
    #[arg(long, global = true)]
    force: bool,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Override a config value, e.g. `--set teacher.k=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Exit with code 4 when augmentation falls short of its quota.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the dataset into slices and plan the folds.
    Slice,
    /// Truncate few-shot slices for the selected fold.
    Truncate,
    /// Build the teacher corpus from many-shot slices.
    BuildTeacher,
    /// Generate synthetic examples for few-shot slices.
    Augment,
    /// Accept, reject or edit synthetic examples interactively.
    Review,
    /// Assemble the baseline, upsampled and augmented training sets.
    Mix {
        /// Use reviewed examples instead of the raw synthetic output.
        #[arg(long)]
        curated: bool,
    },
    /// Write student input/target files for every condition.
    ExportStudent,
    /// Score the reference student, or external predictions.
    Eval {
        /// JSONL of `{"id", "prediction"}` for the test partition.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Partition to score.
        #[arg(long, value_enum, default_value_t = On::Test)]
        on: On,
    },
    /// Check the workdir against its manifest.
    Verify,
    /// Run every stage except review, for each selected fold.
    Run,
    /// Write a synthetic benchmark dataset with ready-made configs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum On {
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Benchmark,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            // wrapped errors often repeat their source's text
            let mut message = failure.error.to_string();
            for cause in failure.error.chain().skip(1) {
                let cause = cause.to_string();
                if !message.contains(&cause) {
                    message = format!("{message}: {cause}");
                }
            }
            eprintln!("error: {message}");
            ExitCode::from(failure.code)
        }
    }
}

fn context(cli: &Cli) -> StageResult<Ctx> {
    let mut overrides = Vec::new();
    if let Some(kind) = &cli.backend {
        overrides.push(format!("backend.kind={kind}"));
    }
    overrides.extend(cli.overrides.iter().cloned());
    let loaded = config::load_config(&cli.config, &overrides, cli.seed)?;
    let root = cli
        .workdir
        .clone()
        .or_else(|| loaded.config.workdir.clone())
        .unwrap_or_else(|| PathBuf::from("ex2-work"));
    Ok(Ctx {
        config: loaded.config,
        config_hash: loaded.hash,
        wd: Workdir::open(&root)?,
        force: cli.force,
        strict: cli.strict,
        fold: cli.fold.clone(),
        quiet: cli.quiet,
    })
}

fn check_shortfall(ctx: &Ctx, shortfall: usize) -> StageResult {
    if shortfall > 0 {
        log::warn!("augmentation fell {shortfall} example(s) short of its targets");
        if ctx.strict {
            return Err(Failure::shortfall(anyhow!("{shortfall} synthetic example(s) short of target")));
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> StageResult {
    match &cli.command {
        Command::Synth { out, preset } => return synth(out, *preset, cli.seed.unwrap_or(0)),
        Command::Verify => return verify(&cli),
        _ => {}
    }
    let ctx = context(&cli)?;
    match cli.command {
        Command::Slice => stages::slice(&ctx),
        Command::Truncate => ctx.folds(false)?.iter().try_for_each(|f| stages::truncate(&ctx, f)),
        Command::BuildTeacher => ctx.folds(false)?.iter().try_for_each(|f| stages::build_teacher(&ctx, f)),
        Command::Augment => {
            let mut shortfall = 0;
            for f in ctx.folds(false)? {
                shortfall += stages::augment_stage(&ctx, &f)?;
            }
            check_shortfall(&ctx, shortfall)
        }
        Command::Review => {
            let fold = ctx.folds(false)?.remove(0);
            let stdin = std::io::stdin();
            stages::review(&ctx, &fold, &mut stdin.lock(), &mut std::io::stdout())
        }
        Command::Mix { curated } => ctx.folds(false)?.iter().try_for_each(|f| stages::mix(&ctx, f, curated)),
        Command::ExportStudent => ctx.folds(false)?.iter().try_for_each(|f| stages::export_student(&ctx, f)),
        Command::Eval { predictions, on } => {
            let on = match on {
                On::Dev => Partition::Dev,
                On::Test => Partition::Test,
            };
            ctx.folds(false)?
                .iter()
                .try_for_each(|f| stages::eval(&ctx, f, predictions.as_deref(), on).map(|_| ()))
        }
        Command::Run => {
            stages::slice(&ctx)?;
            let mut shortfall = 0;
            for f in ctx.folds(true)? {
                stages::truncate(&ctx, &f)?;
                stages::build_teacher(&ctx, &f)?;
                shortfall += stages::augment_stage(&ctx, &f)?;
                stages::mix(&ctx, &f, false)?;
                stages::export_student(&ctx, &f)?;
                stages::eval(&ctx, &f, None, Partition::Test)?;
            }
            check_shortfall(&ctx, shortfall)
        }
        Command::Synth { .. } | Command::Verify => unreachable!("handled above"),
    }
}

fn verify(cli: &Cli) -> StageResult {
    let root = match &cli.workdir {
        Some(root) => root.clone(),
        None => {
            let loaded = config::load_config(&cli.config, &cli.overrides, cli.seed)?;
            loaded.config.workdir.unwrap_or_else(|| PathBuf::from("ex2-work"))
        }
    };
    if !root.is_dir() {
        return Err(Failure::upstream(anyhow!("workdir {} does not exist", root.display())));
    }
    let problems = Workdir::open_readonly(&root).verify()?;
    if problems.is_empty() {
        if !cli.quiet {
            println!("ok: every artifact matches the manifest");
        }
        return Ok(());
    }
    for p in &problems {
        println!("{p}");
    }
    Err(Failure::validation(anyhow!("{} problem(s) in {}", problems.len(), root.display())))
}

fn synth(out: &Path, preset: Preset, seed: u64) -> StageResult {
    let (cfg, k) = match preset {
        Preset::Toy => (BenchmarkConfig { seed, ..BenchmarkConfig::toy() }, 3),
        Preset::Benchmark => (BenchmarkConfig { seed, ..BenchmarkConfig::default() }, 10),
    };
    let bench = generate_benchmark(&cfg);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for part in Partition::ALL {
        let rows = bench.dataset.iter().filter(|e| bench.partition[&e.id] == part);
        write_dataset(out.join(part.file_name()), rows).context("writing split")?;
    }
    let pool: Vec<&Example> = bench.hidden_pools.values().flatten().collect();
    write_dataset(out.join("pool.jsonl"), pool).context("writing pool")?;

    let base = serde_json::json!({
        "dataset": ".",
        "seed": seed,
        "slicing": SlicingConfig::by_label("intent"),
        "protocol": { "few_shot": bench.few_shot },
        "teacher": { "k": k },
        "backend": { "kind": "stub" },
    });
    let mut oracle = base.clone();
    oracle["backend"] = serde_json::json!({ "kind": "oracle", "pool": "pool.jsonl" });
    for (name, value) in [("config.json", base), ("config.oracle.json", oracle)] {
        let mut f = std::fs::File::create(out.join(name)).with_context(|| format!("writing {name}"))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&value).context("encoding config")?)?;
    }
    println!(
        "wrote {} examples and a pool of {} to {}",
        bench.dataset.len(),
        bench.hidden_pools.values().map(Vec::len).sum::<usize>(),
        out.display()
    );
    Ok(())
}
