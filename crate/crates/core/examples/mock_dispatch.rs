//! Dispatches a small study to the planted mock provider on a virtual clock.
//! Runs in milliseconds and never touches the network.

use std::sync::Arc;

use srct::dispatch::mock::{MockProvider, PlantedPolicy};
use srct::dispatch::{Dispatcher, ProviderConfig, VirtualClock};
use srct::population::{sample_population, DemographicSpec};
use srct::{design, fixtures, pipeline, seed};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = fixtures::STUDY3.source()?.spec;
    spec.models.truncate(2);
    let personas = sample_population(&DemographicSpec::us_adults(), 10)?;
    let plans = design::plan(&spec, &personas)?;
    let jobs = pipeline::build_jobs(&spec, &plans, &personas)?;

    let policy = Arc::new(PlantedPolicy::new(&spec, seed::derive(spec.seed, &["mock"])).inject_invalid(&plans));
    let clock = Arc::new(VirtualClock::new());
    let mut dispatcher = Dispatcher::new(clock, seed::derive(spec.seed, &["dispatch"])).with_parallelism(4);
    for model in &spec.models {
        dispatcher.register(ProviderConfig::mock(model), Arc::new(MockProvider::new(policy.clone())))?;
    }
    let records = dispatcher.run_batch_blocking(&jobs, None)?;
    for r in records.iter().take(3) {
        println!("{} [{:?}, {} attempt(s)]\n{}\n", r.trial_id, r.outcome, r.attempts, r.completion);
    }
    println!("{} transcripts, virtual time {} ms", records.len(), dispatcher.clock().now_ms());
    Ok(())
}
