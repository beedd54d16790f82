//! Runs every property suite and prints a one-line verdict per suite.

use spcon::verify::{run_all, VerifyContext};

fn main() {
    let report = run_all(&VerifyContext::default());
    for s in &report.suites {
        println!(
            "{} {:<22} {:>6} checks in {:.2}s",
            if s.passed { "ok  " } else { "FAIL" },
            s.name,
            s.checks,
            s.seconds
        );
        for f in &s.failures {
            println!("     {f}");
        }
    }
    if !report.passed() {
        std::process::exit(1);
    }
}
