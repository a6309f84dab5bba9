//! Runs the negligence study with and without persona preambles and
//! reports how much each arm's effect tracks the human effect.
//!
//! `cargo run --release --example persona_ablation -- out/ablation`

use std::fs;
use std::path::PathBuf;

use srct::pipeline::{self, RunOptions};
use srct::report::fmt3;
use srct::fixtures;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/persona-ablation".into()));
    let spec_path = fixtures::STUDY1.materialize(&out.join("input"))?;
    let text = fs::read_to_string(&spec_path)?.replace(r#"persona_arm = "persona""#, r#"persona_arm = "both""#);
    fs::write(&spec_path, text)?;

    let loaded = pipeline::resolve_spec(spec_path.to_str().expect("utf-8 path"))?;
    let opts = RunOptions {
        bootstrap_reps: Some(500),
        ..RunOptions::mock(11)
    };
    let summary = pipeline::replicate(&loaded, &opts, &out.join("run"))?;
    let inputs = &summary.analysis.inputs;
    for row in inputs.alignment.iter().filter(|r| r.factor == "commonality") {
        let shown = |x: Option<f64>| x.map(fmt3).unwrap_or_else(|| "-".into());
        println!(
            "{:<8} ratio persona {:>6}  no persona {:>6}  alignment {:>6}",
            row.model_id,
            shown(row.ratio_persona),
            shown(row.ratio_no_persona),
            shown(row.alignment)
        );
    }
    match inputs.aggregate_alignment_percent {
        Some(a) => println!("aggregate alignment: {a:.1}%"),
        None => println!("aggregate alignment: undefined"),
    }
    println!("report: {}", out.join("run").join(pipeline::REPORT_FILE).display());
    Ok(())
}
