//! Samples a synthetic population and compares realized marginals with the
//! profile's targets.
//!
//! `cargo run --example population_sampling -- 500 42`

use srct::population::{compose_personality, sample_population, validate_marginals, Attribute, DemographicSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(42);

    let spec = DemographicSpec::us_adults().with_seed(seed);
    let personas = sample_population(&spec, n)?;
    println!("{}", serde_json::to_string_pretty(&personas[0])?);
    println!("personality: {}\n", compose_personality(&personas[0]));

    let report = validate_marginals(&personas, &spec, 0.05);
    for attr in [Attribute::Gender, Attribute::Race, Attribute::PoliticalLean] {
        let a = report.attribute(attr).expect("every attribute is reported");
        println!("{:<16} max deviation {:.3}", attr.as_str(), a.max_deviation);
        for c in &a.categories {
            println!("  {:<28} target {:.3} realized {:.3}", c.category, c.target, c.realized);
        }
    }
    println!("\nall marginals within 0.05: {}", report.pass());
    Ok(())
}
