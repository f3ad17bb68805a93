//! Command-line entry point for the fact-verification pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use factdpo::generation::Backend;
use factdpo::pipeline::{
    cmd_cross_eval, cmd_eval, cmd_gen, cmd_pairs, cmd_synth, cmd_train, CrossEvalArgs, RunConfig,
    TrainArgs, TrainResult,
};
use factdpo::{Error, Split, Variant};

#[derive(Parser, Debug)]
#[command(
    name = "factdpo",
    version,
    about = "Self-instructed fact verification with constrained DPO"
)]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training objective.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Leave counterfactual records and tips out of the training pairs.
    #[arg(long, global = true)]
    no_counterfactual: bool,
    /// One pair per record regardless of difficulty.
    #[arg(long, global = true)]
    flat_sampling: bool,
    /// Directory holding the split claim files.
    #[arg(long, global = true)]
    claims: Option<PathBuf>,
    /// Generations cache file.
    #[arg(long, global = true)]
    generations: Option<PathBuf>,
    /// Training pairs file.
    #[arg(long, global = true)]
    pairs: Option<PathBuf>,
    /// Counterfactual records merged into the training pool.
    #[arg(long, global = true)]
    counterfactuals: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus split 80/10/10.
    Synth {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        contradiction_rate: Option<f64>,
    },
    /// Run the four generation settings and fill the cache.
    Gen {
        #[arg(long, value_parser = parse_backend)]
        backend: Option<Backend>,
        #[arg(long)]
        endpoint_url: Option<String>,
        #[arg(long)]
        model_name: Option<String>,
        /// Samples per record and setting.
        #[arg(long)]
        num_generations: Option<usize>,
        /// Mock probability of answering with the gold label.
        #[arg(long)]
        mock_p: Option<f64>,
    },
    /// Build training and validation preference pairs.
    Pairs,
    /// Train the policy adapters.
    Train {
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from a resumable checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step and write a resumable checkpoint.
        #[arg(long)]
        pause_at: Option<u64>,
        /// Start from an existing base checkpoint, skipping the warm-up.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Base name of the report files.
        #[arg(long, default_value = "report")]
        name: String,
    },
    /// Evaluate a checkpoint on a corpus disjoint from its training data.
    CrossEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Claims file of the foreign corpus.
        #[arg(long)]
        foreign: PathBuf,
        #[arg(long)]
        train_corpus: Option<String>,
        #[arg(long)]
        eval_corpus: Option<String>,
        #[arg(long, default_value = "cross_report")]
        name: String,
    },
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "mock" => Ok(Backend::Mock),
        "endpoint" => Ok(Backend::Endpoint),
        _ => Err(format!("unknown backend {s:?}; expected mock or endpoint")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(v) = cli.variant {
        cfg.hyper.variant = v;
    }
    cfg.pairs.exclude_counterfactual |= cli.no_counterfactual;
    cfg.pairs.flat_sampling |= cli.flat_sampling;
    // Path flags are taken relative to the working directory, not the output directory.
    let absolute = |p: &PathBuf| std::path::absolute(p).unwrap_or_else(|_| p.clone());
    if let Some(p) = &cli.claims {
        cfg.paths.claims = Some(absolute(p));
    }
    if let Some(p) = &cli.generations {
        cfg.paths.generations = Some(absolute(p));
    }
    if let Some(p) = &cli.pairs {
        cfg.paths.pairs = Some(absolute(p));
    }
    if let Some(p) = &cli.counterfactuals {
        cfg.paths.counterfactuals = Some(absolute(p));
    }
    match &cli.command {
        Command::Synth {
            size,
            contradiction_rate,
        } => {
            if let Some(s) = size {
                cfg.synth.size = *s;
            }
            if let Some(r) = contradiction_rate {
                cfg.synth.contradiction_rate = *r;
            }
        }
        Command::Gen {
            backend,
            endpoint_url,
            model_name,
            num_generations,
            mock_p,
        } => {
            if let Some(b) = backend {
                cfg.generator.backend = *b;
            }
            if let Some(u) = endpoint_url {
                cfg.generator.endpoint_url = Some(u.clone());
            }
            if let Some(m) = model_name {
                cfg.generator.model_name = Some(m.clone());
            }
            if let Some(k) = num_generations {
                cfg.hyper.num_generations = *k;
            }
            if let Some(p) = mock_p {
                cfg.generator.mock.p = *p;
            }
        }
        Command::Train { max_steps, .. } => {
            if let Some(m) = max_steps {
                cfg.trainer.max_steps = *m;
            }
        }
        Command::Eval {
            checkpoint, split, ..
        } => {
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(absolute(c));
            }
            if let Some(s) = split {
                cfg.eval.split = *s;
            }
        }
        Command::CrossEval { checkpoint, .. } => {
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(absolute(c));
            }
        }
        Command::Pairs => {}
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Synth { .. } => {
            let [tr, va, te] = cmd_synth(&cfg)?;
            println!(
                "wrote {} records: train {tr}, validation {va}, test {te}",
                tr + va + te
            );
        }
        Command::Gen { .. } => {
            let s = cmd_gen(&cfg)?;
            for (id, e) in &s.failures {
                eprintln!("record {id}: {e}");
            }
            println!(
                "records {}, settings generated {}, cache hits {}, backend calls {}, failures {}",
                s.records,
                s.settings_run,
                s.cache_hits,
                s.backend_calls,
                s.failures.len()
            );
            if let Some((id, e)) = s.failures.first() {
                return Err(Error::Backend {
                    status: None,
                    message: format!("{} records failed, first {id}: {e}", s.failures.len()),
                });
            }
        }
        Command::Pairs => {
            let s = cmd_pairs(&cfg)?;
            for (id, why) in &s.skipped {
                eprintln!("skipped {id}: {why}");
            }
            println!(
                "records {}, pairs {}, validation pairs {}, skipped {}",
                s.records,
                s.pairs,
                s.validation_pairs,
                s.skipped.len()
            );
        }
        Command::Train {
            resume,
            pause_at,
            base,
            ..
        } => {
            let absolute = |p: &PathBuf| std::path::absolute(p).unwrap_or_else(|_| p.clone());
            let args = TrainArgs {
                resume: resume.as_ref().map(absolute),
                pause_at: *pause_at,
                base: base.as_ref().map(absolute),
            };
            match cmd_train(&cfg, &args)? {
                TrainResult::Paused { step, checkpoint } => {
                    println!("paused at step {step}; resume from {}", checkpoint.display());
                }
                TrainResult::Finished(s) => println!(
                    "variant {}, steps {}, best step {}, mu ({}, {}), validation delta chosen {:.6}, delta rejected {:.6}",
                    s.variant.name(),
                    s.steps,
                    s.best_step,
                    s.mu1,
                    s.mu2,
                    s.delta_chosen,
                    s.delta_rejected
                ),
            }
        }
        Command::Eval { name, .. } => {
            let r = cmd_eval(&cfg, name)?;
            println!(
                "accuracy {:.4}, macro_f1 {:.4}, unparsed {}, records {}",
                r.overall.accuracy, r.overall.macro_f1, r.unparsed_count, r.overall.count
            );
        }
        Command::CrossEval {
            foreign,
            train_corpus,
            eval_corpus,
            name,
            ..
        } => {
            let args = CrossEvalArgs {
                foreign: std::path::absolute(foreign).unwrap_or_else(|_| foreign.clone()),
                train_corpus: train_corpus.clone(),
                eval_corpus: eval_corpus.clone(),
            };
            let r = cmd_cross_eval(&cfg, &args, name)?;
            println!(
                "{} -> {}: accuracy {:.4}, macro_f1 {:.4}",
                r.train_corpus.as_deref().unwrap_or("?"),
                r.eval_corpus.as_deref().unwrap_or("?"),
                r.overall.accuracy,
                r.overall.macro_f1
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli).context("factdpo failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
