use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use evalinstruct::jobs::{self, BackendKind, Config, JobError, Overrides};
use evalinstruct::model::Locale;
use evalinstruct::pipeline::BuildOptions;
use evalinstruct::synth::SynthSpec;

/// Build critique training data with a judge model and meta-evaluate judges.
#[derive(Debug, Parser)]
#[command(name = "evalinstruct", version)]
struct Cli {
    /// TOML configuration; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_locale)]
    locale: Option<Locale>,
    #[arg(long, global = true, value_parser = ["live", "mock", "oracle"])]
    backend: Option<String>,
    #[arg(long, global = true)]
    max_inflight: Option<usize>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expand seed queries into a balanced, filtered query set.
    Augment {
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run or resume the construction stages.
    Build {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Persist this stage and stop.
        #[arg(long, value_parser = evalinstruct::pipeline::STAGES)]
        stop_after: Option<String>,
    },
    /// Write the four training streams of a finished run.
    EmitSft {
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Skip the mirrored pairwise records.
        #[arg(long)]
        no_swap: bool,
    },
    /// Correlation and agreement reports for evaluator outputs.
    MetaEval {
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Revise responses under reference-free critiques.
    Refine {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus for offline runs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long, default_value_t = 4)]
        models: usize,
    },
}

fn parse_locale(s: &str) -> Result<Locale, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn load_config(cli: &Cli) -> Result<Config, JobError> {
    let mut config = match &cli.config {
        Some(path) if !path.is_file() => return Err(JobError::MissingInput(path.clone())),
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let backend = cli
        .backend
        .as_deref()
        .map(|b| b.parse::<BackendKind>())
        .transpose()
        .map_err(JobError::Config)?;
    config.apply(&Overrides {
        seed: cli.seed,
        locale: cli.locale,
        backend,
        max_inflight: cli.max_inflight,
        cache_dir: cli.cache_dir.clone(),
    })?;
    Ok(config)
}

fn set(slot: &mut PathBuf, value: &Option<PathBuf>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(&cli)?;
    match &cli.command {
        Command::Augment { seeds, output } => {
            set(&mut config.augment.seeds, seeds);
            set(&mut config.augment.output, output);
            let out = jobs::cmd_augment(&config)?;
            println!("wrote {} queries to {}", out.queries, out.output.display());
            for (category, n) in &out.report.per_category {
                println!("  {category}: {n}");
            }
            for s in &out.report.shortages {
                println!("  shortage: {s:?}");
            }
            println!("report: {}", out.report_path.display());
        }
        Command::Build {
            queries,
            samples,
            run_dir,
            stop_after,
        } => {
            set(&mut config.build.queries, queries);
            set(&mut config.build.samples, samples);
            set(&mut config.build.run_dir, run_dir);
            let options = BuildOptions {
                stop_after: stop_after.clone(),
            };
            let summary = jobs::cmd_build(&config, &options)?;
            if !summary.reused.is_empty() {
                println!("reused stages: {}", summary.reused.join(", "));
            }
            for l in &summary.state.ledger {
                println!(
                    "{:<15} in {:>6}  out {:>6}  dropped {:>5}",
                    l.stage,
                    l.input,
                    l.output,
                    l.dropped()
                );
            }
            match summary.manifest.filter_rate {
                Some(r) => println!(
                    "filter rate: {:.2}% of pairs ({}/{}), {:.2}% of records",
                    r.pair_level * 100.0,
                    r.filtered_pairs,
                    r.candidate_pairs,
                    r.record_level * 100.0
                ),
                None => println!("stopped before cross validation"),
            }
            println!("run directory: {}", config.build.run_dir.display());
        }
        Command::EmitSft {
            run_dir,
            output_dir,
            no_swap,
        } => {
            if let Some(d) = run_dir {
                config.emit_sft.run_dir = Some(d.clone());
            }
            set(&mut config.emit_sft.output_dir, output_dir);
            config.emit_sft.swap_augment &= !no_swap;
            let out = jobs::cmd_emit_sft(&config)?;
            println!("point_r / point_rf / pair_r / pair_rf");
            println!("{}", out.counts);
            println!("wrote {}", out.output_dir.display());
        }
        Command::MetaEval { output_dir } => {
            set(&mut config.meta_eval.output_dir, output_dir);
            let out = jobs::cmd_meta_eval(&config)?;
            if !out.correlation_table.is_empty() {
                print!("{}", out.correlation_table);
            }
            if !out.agreement_table.is_empty() {
                println!();
                print!("{}", out.agreement_table);
            }
        }
        Command::Refine { input, output } => {
            set(&mut config.refine.input, input);
            set(&mut config.refine.output, output);
            let items = jobs::cmd_refine(&config)?;
            let changed = items.iter().filter(|i| i.changed).count();
            println!(
                "refined {} of {} responses into {}",
                changed,
                items.len(),
                config.refine.output.display()
            );
        }
        Command::Synth {
            out,
            queries,
            models,
        } => {
            let spec = SynthSpec {
                queries: *queries,
                models_per_query: *models,
                ..Default::default()
            };
            let corpus = jobs::write_synth(out, &config, spec)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} queries and {} samples to {}",
                corpus.queries.len(),
                corpus.samples.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<JobError>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
