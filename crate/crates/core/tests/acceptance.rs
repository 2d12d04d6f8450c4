use std::process::ExitCode;

use flowfilt::cli::selftest::{evaluate, suite, SuiteOptions};

fn main() -> ExitCode {
    let opts = SuiteOptions::default();
    let mut failures = 0;
    for check in suite() {
        let outcome = evaluate(&check, &opts);
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {} [{}] {}: {}", check.id, verdict, check.name, outcome.detail);
        if !outcome.passed {
            failures += 1;
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
