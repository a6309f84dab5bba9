//! Plans a within-subject and a between-subject study and prints how trials
//! are laid out.

use std::collections::BTreeMap;

use srct::design::{self, FactorRole};
use srct::fixtures;
use srct::population::{sample_population, DemographicSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let personas = sample_population(&DemographicSpec::us_adults(), 6)?;

    let within = fixtures::STUDY1.source()?.spec;
    let conditions = design::expand_conditions(&within.factors_with(FactorRole::Within));
    println!("{}: {} conditions, {} vignettes", within.name, conditions.len(), within.vignettes.len());
    let plans = design::plan(&within, &personas)?;
    println!("{} trials for {} personas x {} models", plans.len(), personas.len(), within.models.len());
    for p in plans.iter().filter(|p| p.subject_id == personas[0].id && p.model_id == within.models[0]) {
        println!("  position {} {:<10} {:?}", p.position, p.session_vignettes[0], p.condition);
    }

    let between = fixtures::STUDY3.source()?.spec;
    let plans = design::plan(&between, &personas)?;
    let mut arms: BTreeMap<&str, usize> = BTreeMap::new();
    for p in plans.iter().filter(|p| p.model_id == between.models[0]) {
        *arms.entry(p.condition["misrepresentation"].as_str()).or_default() += 1;
    }
    println!("\n{}: arm sizes for {}: {arms:?}", between.name, between.models[0]);

    let first = &plans[0];
    let messages = design::render_trial_prompt(first, &between, Some("You are a test persona."))?;
    println!("\nfirst prompt ({} messages):\n{}", messages.len(), messages.last().unwrap().content);
    Ok(())
}
