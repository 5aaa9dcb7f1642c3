//! `tokenwise`: run request traces through the serving core, generate
//! synthetic traces and profile linear-op tilings.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 input (trace, config or
//! profile) error, 3 dense recompute check failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tokenwise_core::config::Config;
use tokenwise_core::engine::{Engine, Mode};
use tokenwise_core::planner::ProfileStore;
use tokenwise_core::sim::profile_linear;
use tokenwise_core::smooth_gemm::{smooth_shape, QUANTUM};
use tokenwise_core::spec_decode::{HashProposer, SpecShape};
use tokenwise_core::trace::{gen_trace, parse_trace, write_trace, GenParams, TraceProfile};

#[derive(Parser)]
#[command(
    name = "tokenwise",
    version,
    about = "Token-wise P/D/V serving simulator and reference runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a JSONL request trace and report latency and throughput in ticks.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "simulate")]
        mode: Mode,
        /// Compare every generated token's logits with a dense recompute
        /// (numeric mode only).
        #[arg(long)]
        check: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        plot_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a seeded synthetic trace.
    GenTrace {
        #[arg(long)]
        profile: TraceProfile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        /// Attach a speculative tree of this width to every request.
        #[arg(long, requires = "spec_depth")]
        spec_width: Option<usize>,
        #[arg(long, requires = "spec_width")]
        spec_depth: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Profile tile primitive and swizzle order of every linear op at each
    /// smoothed token count up to the chunk budget.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Outcome {
    Done,
    CheckFailed,
}

fn input<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>, what: &str) -> Result<T> {
    r.map_err(|e| e.into().context(InputMarker).context(what.to_string()))
}

/// Context attached to errors caused by bad input files (exit code 2).
#[derive(Debug)]
struct InputMarker;

impl std::fmt::Display for InputMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("invalid input")
    }
}

fn read(path: &Path) -> Result<String> {
    input(fs::read_to_string(path), &format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => {
            let mut cfg = input(Config::parse(&read(p)?), &format!("config {}", p.display()))?;
            // A relative profile path is relative to the config file.
            if let (Some(prof), Some(dir)) = (&mut cfg.linear.profile, p.parent()) {
                if prof.is_relative() {
                    *prof = dir.join(&*prof);
                }
            }
            Ok(cfg)
        }
        None => Ok(Config::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing stdout"),
        _ => Ok(()),
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Run {
            trace,
            config,
            mode,
            check,
            report,
            plot_csv,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let requests = input(parse_trace(&read(&trace)?), &format!("trace {}", trace.display()))?;
            let profile = match &cfg.linear.profile {
                Some(p) => input(ProfileStore::parse(&read(p)?), &format!("profile {}", p.display()))?,
                None => ProfileStore::new(),
            };
            let vocab = cfg.model.vocab as u32;
            let mut engine = Engine::new(cfg, mode, None, Box::new(HashProposer::new(seed, vocab)), seed)?;
            engine.set_profile(profile);
            engine.set_record_logits(check && mode == Mode::Numeric);
            engine.run(requests)?;
            let mut rep = engine.report();
            let mut outcome = Outcome::Done;
            if check {
                anyhow::ensure!(mode == Mode::Numeric, "--check needs --mode numeric");
                let c = engine.check();
                if !c.passed {
                    eprintln!(
                        "check failed: max abs logit error {:.3e} exceeds {:.0e}",
                        c.max_abs_err, c.tolerance
                    );
                    outcome = Outcome::CheckFailed;
                }
                rep.check = Some(c);
            }
            if let Some(p) = plot_csv {
                write(&p, &engine.plot_csv())?;
            }
            let json = rep.to_json() + "\n";
            match report {
                Some(p) => write(&p, &json)?,
                None => emit(&json)?,
            }
            Ok(outcome)
        }
        Command::GenTrace {
            profile,
            seed,
            count,
            spec_width,
            spec_depth,
            out,
        } => {
            let params = GenParams {
                spec: spec_width
                    .zip(spec_depth)
                    .map(|(width, depth)| SpecShape { width, depth }),
                ..GenParams::default()
            };
            let text = write_trace(&gen_trace(profile, seed, count as usize, &params));
            match out {
                Some(p) => write(&p, &text)?,
                None => emit(&text)?,
            }
            Ok(Outcome::Done)
        }
        Command::Profile { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let budget = cfg.sched.budget;
            let mut ms: Vec<usize> = (1..=budget)
                .map(|t| smooth_shape(t, budget, cfg.linear.smooth_step).next_multiple_of(QUANTUM))
                .collect();
            ms.dedup();
            let store = profile_linear(&cfg.model.dims(), &ms, &cfg.hw);
            write(&out, &store.to_string())?;
            eprintln!("profiled {} shapes into {}", store.len(), out.display());
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputMarker>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
