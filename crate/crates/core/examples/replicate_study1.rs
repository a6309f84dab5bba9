//! Replicates the bundled negligence study end to end on the mock provider
//! and prints the effect table.
//!
//! `cargo run --release --example replicate_study1 -- 7`

use std::path::PathBuf;

use srct::pipeline::{self, RunOptions};
use srct::report::{fmt3, RowSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let out = PathBuf::from(format!("runs/study1-example-seed{seed}"));
    let loaded = pipeline::resolve_spec("study1")?;
    let summary = pipeline::replicate(&loaded, &RunOptions::mock(seed), &out)?;
    let c = &summary.manifest.counts;
    println!("{} personas, {} trials, {} valid, rejected {:?}", c.personas, c.transcripts, c.valid, c.rejected);
    for r in &summary.analysis.inputs.effects {
        let who = match r.source {
            RowSource::Human => format!("human/{}", r.model_id),
            RowSource::Model => r.model_id.clone(),
        };
        let ci = match (r.ci_low, r.ci_high) {
            (Some(lo), Some(hi)) => format!("[{}, {}]", fmt3(lo), fmt3(hi)),
            _ => String::new(),
        };
        println!("{:<16} {:<12} {:>7} {:<20} {}", who, r.factor, fmt3(r.delta_mean), ci, r.stars);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
