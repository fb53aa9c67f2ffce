//! `saliency-audit`: train toy classifiers, explain them and run the sanity
//! checks, writing canonical JSON run records.

mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::Parser;
use serde::Serialize;
use serde_json::json;

use saliency_audit::report::{canonical_json, flatten_csv, RunRecord};

use args::{Cli, Command, Output};

pub const SEED_ENV: &str = "SALIENCY_AUDIT_SEED";

/// Invalid arguments caught after parsing; exits with status 2 like clap's
/// own usage errors.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")).into()),
        Err(_) => Ok(flag),
    }
}

fn emit(out: &Output, config: &impl Serialize, run: impl FnOnce(u64) -> Result<serde_json::Value>) -> Result<()> {
    let seed = effective_seed(out.seed)?;
    let command: Vec<String> = std::env::args().skip(1).collect();
    let start = Instant::now();
    let results = run(seed)?;
    let mut record = RunRecord::new(command, seed, config, &results)?;
    if out.timing {
        record.timing = Some(json!({ "total_seconds": start.elapsed().as_secs_f64() }));
    }
    let value = serde_json::to_value(&record)?;
    let text = canonical_json(&value)?;
    match &out.out {
        Some(p) => commands::write_file(p, &text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if let Some(p) = &out.csv {
        commands::write_file(p, &flatten_csv(&value)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => emit(&a.output, a, |s| commands::train(a, s)),
        Command::Explain(a) => emit(&a.output, a, |s| commands::explain_cmd(a, s)),
        Command::SanityCascade(a) => emit(&a.output, a, |s| commands::cascade(a, s)),
        Command::SanityData(a) => emit(&a.output, a, |s| commands::data_randomization(a, s)),
        Command::Sweep(a) => emit(&a.output, a, |s| commands::sweep(a, s)),
        Command::Metrics(a) => emit(&a.output, a, |s| commands::metrics(a, s)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
