//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each. Pass criterion numbers as arguments to run a subset.

mod attention;
mod common;
mod gradients;
mod masking;
mod memorization;
mod message_passing;
mod metric_oracle;
mod sampling;
mod schedule;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::Outcome;

struct Criterion {
    number: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn criteria() -> Vec<Criterion> {
    let secs = |s| Some(Duration::from_secs(s));
    vec![
        Criterion { number: 1, name: "gradient correctness", limit: secs(60), run: gradients::run },
        Criterion { number: 2, name: "attention laws", limit: secs(10), run: attention::run },
        Criterion { number: 3, name: "loss masking", limit: secs(1), run: masking::run },
        Criterion { number: 4, name: "training schedule discipline", limit: None, run: schedule::run },
        Criterion { number: 5, name: "metric oracle", limit: secs(30), run: metric_oracle::run },
        Criterion { number: 6, name: "scheduled sampling decay", limit: None, run: sampling::run },
        Criterion { number: 7, name: "memorization", limit: secs(300), run: memorization::run },
        Criterion { number: 8, name: "message-passing efficacy", limit: None, run: message_passing::run },
    ]
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria() {
        if !selected.is_empty() && !selected.contains(&c.number) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::fail(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = c.limit.is_none_or(|l| elapsed <= l);
        let pass = outcome.pass && in_time;
        let limit = c.limit.map_or(String::new(), |l| format!(", limit {}s", l.as_secs()));
        println!(
            "{} criterion {}: {}: {} [{:.2}s{limit}]",
            if pass { "PASS" } else { "FAIL" },
            c.number,
            c.name,
            outcome.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failures += 1;
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
