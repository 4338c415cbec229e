//! Command-line entry points. `main` only parses arguments and maps the
//! returned [`ExitCode`].

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::scenario::{emit_scenario, load_scenario, ScenarioError};
use crate::services::compare_overhead;
use crate::sim::{run, sweep, Mode, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "hamanet", version, about = "Community routing simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a scenario and print its report.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 if a runtime invariant was violated.
        #[arg(long)]
        strict: bool,
    },
    /// Compare transmissions against flooding for 1..=K mirrored messages.
    Compare {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        messages: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario under many seeds in parallel.
    Sweep {
        scenario: PathBuf,
        /// Comma-separated seeds or half-open ranges, e.g. `1,5,10..20`.
        #[arg(long, value_parser = parse_seeds, default_value = "0..8")]
        seeds: SeedList,
        /// Run the flooding baseline instead of communities.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario and list every problem found.
    Validate { scenario: PathBuf },
    /// Print a scenario in canonical form.
    Fmt { scenario: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

pub fn parse_seeds(text: &str) -> Result<SeedList, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("bad seed {s:?}: {e}"));
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a >= b {
                    return Err(format!("empty seed range {part:?}"));
                }
                out.extend(a..b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(out))
}

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Io = 1,
    Invalid = 2,
    Assertion = 3,
}

fn scenario_error(e: ScenarioError, err: &mut dyn Write) -> ExitCode {
    let _ = writeln!(err, "error: {e}");
    match e {
        ScenarioError::Io { .. } => ExitCode::Io,
        _ => ExitCode::Invalid,
    }
}

fn emit(text: &str, out: Option<&PathBuf>, stdout: &mut dyn Write, err: &mut dyn Write) -> ExitCode {
    let res = match out {
        Some(p) => fs::write(p, text),
        None => stdout.write_all(text.as_bytes()),
    };
    match res {
        Ok(()) => ExitCode::Ok,
        Err(e) => {
            let _ = writeln!(err, "error: cannot write output: {e}");
            ExitCode::Io
        }
    }
}

pub fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> ExitCode {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            trace,
            out,
            strict,
        } => {
            let world = match load_scenario(&scenario) {
                Ok(w) => w,
                Err(e) => return scenario_error(e, stderr),
            };
            let result = run(&world, seed, RunOptions::default());
            if let Some(path) = trace {
                let written = fs::File::create(&path).and_then(|f| result.trace.write_to(io::BufWriter::new(f)));
                if let Err(e) = written {
                    let _ = writeln!(stderr, "error: cannot write trace {}: {e}", path.display());
                    return ExitCode::Io;
                }
            }
            for e in &result.report.step_errors {
                let _ = writeln!(stderr, "warning: {e}");
            }
            let code = emit(&result.report.to_json(), out.as_ref(), stdout, stderr);
            if code != ExitCode::Ok {
                return code;
            }
            if strict && !result.report.audit.is_empty() {
                for a in &result.report.audit {
                    let _ = writeln!(stderr, "assertion failed: {a}");
                }
                return ExitCode::Assertion;
            }
            ExitCode::Ok
        }
        Command::Compare {
            scenario,
            seed,
            messages,
            out,
        } => {
            let world = match load_scenario(&scenario) {
                Ok(w) => w,
                Err(e) => return scenario_error(e, stderr),
            };
            let report = compare_overhead(&world, seed, messages);
            emit(&report.to_json(), out.as_ref(), stdout, stderr)
        }
        Command::Sweep {
            scenario,
            seeds,
            baseline,
            out,
        } => {
            let world = match load_scenario(&scenario) {
                Ok(w) => w,
                Err(e) => return scenario_error(e, stderr),
            };
            let opts = RunOptions {
                mode: if baseline { Mode::Baseline } else { Mode::Hamanet },
                ..RunOptions::default()
            };
            emit(&sweep(&world, &seeds.0, opts).to_json(), out.as_ref(), stdout, stderr)
        }
        Command::Fmt { scenario } => match load_scenario(&scenario) {
            Ok(w) => emit(&emit_scenario(&w), None, stdout, stderr),
            Err(e) => scenario_error(e, stderr),
        },
        Command::Validate { scenario } => match load_scenario(&scenario) {
            Ok(w) => {
                let _ = writeln!(
                    stdout,
                    "ok: {} nodes, {} edges, {} cultures, {} steps",
                    w.nodes.len(),
                    w.topology.edges().len(),
                    w.registry.cultures().count(),
                    w.steps.len()
                );
                ExitCode::Ok
            }
            Err(e) => scenario_error(e, stderr),
        },
    }
}
