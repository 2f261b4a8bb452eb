//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line; the
//! process exits non-zero when any criterion fails.
//!
//! Positional arguments select criteria by substring, as with the standard
//! test harness: `cargo test -p ffpe --test acceptance -- kappa`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[path = "../common.rs"]
mod common;
mod oracles;
mod pipeline;
mod training;

use std::time::Instant;

/// Outcome of one criterion: a detail line on success, a reason on failure.
pub type Outcome = Result<String, String>;

/// Fail with a formatted reason unless `cond` holds.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    ("fid_oracle", oracles::fid_oracle),
    ("patch_nce_oracle", oracles::patch_nce_oracle),
    ("gradient_suite", oracles::gradient_suite),
    ("fleiss_kappa", oracles::kappa),
    ("pipeline_roundtrip", pipeline::roundtrip),
    ("training_determinism", training::determinism),
    ("training_smoke", training::smoke),
    ("cli_chain", pipeline::cli_chain),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in CRITERIA {
            println!("{name}: test");
        }
        return;
    }
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
