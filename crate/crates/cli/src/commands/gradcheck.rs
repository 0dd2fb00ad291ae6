use std::io::Write;

use lsat_core::gradsuite::{cases, format_table, injected_fault_case, run_cases, CaseResult, Scope};

use crate::error::{CliError, CliResult};
use crate::GradcheckArgs;

/// Runs the requested scopes (all when `None`), plus the faulty primitive
/// when `inject_fault` is set.
pub fn sweep(scope: Option<Scope>, seed: u64, inject_fault: bool) -> Vec<CaseResult> {
    let scopes: Vec<Scope> = scope.map_or_else(|| Scope::ALL.to_vec(), |s| vec![s]);
    let mut all: Vec<_> = scopes.into_iter().flat_map(cases).collect();
    if inject_fault {
        all.push(injected_fault_case());
    }
    run_cases(&all, seed)
}

pub fn run(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let results = sweep(args.scope, args.seed, args.inject_fault);
    let _ = write!(out, "{}", format_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let _ = writeln!(out, "{} cases, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
