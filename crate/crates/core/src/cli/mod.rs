//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 invalid
//! configuration, 3 flow stalled or update impossible.

pub mod config;
pub mod gradcheck;
pub mod run;
pub mod selftest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::filter::Method;

#[derive(Debug, Parser)]
#[command(name = "flowfilt", version, about = "Degeneracy-free particle filtering by distance-minimizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario described by a TOML file.
    Run {
        config: PathBuf,
        /// Output directory (defaults to `output.dir` next to the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of flow-recursive, flow-iterative, reweight, sir.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write per-stage particle traces.
        #[arg(long)]
        trace: bool,
    },
    /// Compare analytic derivatives with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Run the built-in acceptance checks.
    Selftest {
        /// List the checks without running them.
        #[arg(long)]
        list: bool,
        /// Force the step count of every flow integration.
        #[arg(long, value_name = "K")]
        flow_steps: Option<usize>,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FLOW: i32 = 3;

fn runtime_exit(err: &Error) -> i32 {
    let mut e = err;
    while let Error::AtStep { source, .. } = e {
        e = source;
    }
    match e {
        Error::FlowStalled { .. } | Error::UpdateImpossible => EXIT_FLOW,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run { config, out, methods, seed, trace } => cmd_run(config, out, methods, seed, trace),
        Command::Gradcheck { trials, seed, inject_sign_flip } => {
            match gradcheck::run(&gradcheck::GradcheckOptions { trials, seed, inject_sign_flip }) {
                Ok(r) => {
                    println!(
                        "trials {}  worst relative error: gradient {:.3e}  hessian {:.3e}  J {:.3e}",
                        r.trials, r.worst_gradient, r.worst_hessian, r.worst_j
                    );
                    match r.first_failure {
                        None => {
                            println!("PASS");
                            EXIT_OK
                        }
                        Some(s) => {
                            println!("FAIL at seed {s} (rerun with --seed {s} --trials 1)");
                            EXIT_FAILURE
                        }
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    runtime_exit(&e)
                }
            }
        }
        Command::Selftest { list, flow_steps } => cmd_selftest(list, flow_steps),
    }
}

fn cmd_run(path: PathBuf, out: Option<PathBuf>, methods: Option<Vec<String>>, seed: Option<u64>, trace: bool) -> i32 {
    let loaded = match config::load(&path) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let methods = match methods {
        None => None,
        Some(names) => {
            let mut parsed = Vec::new();
            for n in names {
                match Method::parse(n.trim()) {
                    Some(m) => parsed.push(m),
                    None => {
                        eprintln!("config error: `--methods`: unknown method `{n}`");
                        return EXIT_CONFIG;
                    }
                }
            }
            Some(parsed)
        }
    };
    let opts = run::RunOptions { out, methods, seed, trace };
    match run::execute(loaded, &opts) {
        Ok((report, dir)) => {
            println!(
                "{}: {} methods, {} records, config {} -> {}",
                report.scenario,
                report.methods.len(),
                report.records.len(),
                &report.config_hash[..12],
                dir.display()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            runtime_exit(&e)
        }
    }
}

fn cmd_selftest(list: bool, flow_steps: Option<usize>) -> i32 {
    let checks = selftest::suite();
    if list {
        for c in &checks {
            println!("{:>2}  {}", c.id, c.name);
        }
        return EXIT_OK;
    }
    let opts = selftest::SuiteOptions { flow_steps };
    let mut failed = 0;
    for c in &checks {
        let o = selftest::evaluate(c, &opts);
        if !o.passed {
            failed += 1;
        }
        println!("{:>2}  {:<32} {}  {}", c.id, c.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed == 0 { EXIT_OK } else { EXIT_FAILURE }
}
