//! Run directories and the stages that fill them.
//!
//! A run directory holds every artifact of one experiment run:
//!
//! ```text
//! spec.toml          copy of the spec bytes (hashed in the manifest)
//! baseline.csv       copy of the human baseline, when one is known
//! population.jsonl   personas
//! plans.jsonl        trial plans
//! transcripts.jsonl  one record per trial
//! responses.jsonl    structured answers
//! audit.csv          seeded sample for manual review
//! effects.csv        marginal effects, human rows first
//! alignment.csv      persona ablation alignment
//! equivalence.csv    TOST results
//! figures/*.jsonl    figure data
//! analysis.json      everything report.md shows
//! report.md
//! manifest.json
//! ```
//!
//! Each stage reads what earlier stages wrote, so any stage can be rerun on
//! its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::baseline::Baseline;
use crate::design::{self, Arm, ExperimentSpec, SpecSource, TrialPlan};
use crate::dispatch::mock::{MockProvider, PlantedPolicy};
use crate::dispatch::{
    self, Clock, Dispatcher, LogProgress, ProviderConfig, SystemClock, TranscriptRecord, TrialJob,
    VirtualClock,
};
use crate::extraction::{self, Extractor, StructuredResponse, Validity};
use crate::population::{self, DemographicSpec, Persona, AGE_CEILING, AGE_FLOOR, DEFAULT_PREAMBLE};
use crate::report::{
    self, AlignmentRow, Bar, BarPair, Counts, EffectRow, EquivalenceRow, Figure, ProviderInfo, ReportInputs,
    RunManifest, Seeds, SoftwareInfo, SpecInfo, Timestamps,
};
use crate::stats::{self, AlignmentScore, ArmScores, Bands, LevelScores};
use crate::{fixtures, jsonl, seed, Error, Result};

pub const SPEC_FILE: &str = "spec.toml";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const POPULATION_FILE: &str = "population.jsonl";
pub const PLANS_FILE: &str = "plans.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const AUDIT_FILE: &str = "audit.csv";
pub const EFFECTS_FILE: &str = "effects.csv";
pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const EQUIVALENCE_FILE: &str = "equivalence.csv";
pub const FIGURES_DIR: &str = "figures";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const REPORT_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Label of the effect rows pooled over all models.
pub const POOLED: &str = "all-models";
const AUDIT_SIZE: usize = 50;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    pub mock: bool,
    pub providers: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub temperature: Option<f64>,
    pub bootstrap_reps: Option<usize>,
    pub population: Option<PathBuf>,
    pub baselines: Option<PathBuf>,
}

impl RunOptions {
    pub fn mock(seed: u64) -> Self {
        RunOptions {
            seed,
            mock: true,
            ..RunOptions::default()
        }
    }
}

/// A spec plus the human baseline that goes with it.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub source: SpecSource,
    pub origin: String,
    pub baseline: Option<Vec<u8>>,
}

/// Resolves a spec argument: a spec file, a directory holding `spec.toml`,
/// or the name of a bundled fixture (`study1`, `fixtures/study1`).
pub fn resolve_spec(arg: &str) -> Result<LoadedSpec> {
    let path = Path::new(arg);
    if path.exists() {
        let file = if path.is_dir() { path.join(SPEC_FILE) } else { path.to_path_buf() };
        let source = SpecSource::load(&file)?;
        let baseline = match (&source.spec.analysis.baseline, &source.base_dir) {
            (Some(name), dir) => {
                let p = dir.as_deref().unwrap_or(Path::new(".")).join(name);
                Some(fs::read(&p).map_err(|e| Error::io(&p, e))?)
            }
            (None, _) => None,
        };
        return Ok(LoadedSpec {
            source,
            origin: file.display().to_string(),
            baseline,
        });
    }
    if let Some(f) = fixtures::by_name(arg) {
        return Ok(LoadedSpec {
            source: f.source()?,
            origin: format!("fixtures/{}", f.name),
            baseline: f.baseline.map(|b| b.as_bytes().to_vec()),
        });
    }
    Err(Error::Config(format!("spec `{arg}` is neither a file, a directory nor a bundled fixture")))
}

fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    Ok(report::read_manifest(&run_dir.join(MANIFEST_FILE))?)
}

/// Rehashes the artifacts and writes the manifest.
fn save_manifest(run_dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.artifacts = artifact_hashes(run_dir)?;
    report::write_manifest(manifest, &run_dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn artifact_hashes(run_dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(run_dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, seed::sha256_hex(&bytes));
        }
    }
    Ok(out)
}

/// The run directory's spec, with the run seed in force.
fn run_spec(run_dir: &Path, manifest: &RunManifest) -> Result<ExperimentSpec> {
    let path = run_dir.join(SPEC_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let source = SpecSource::parse(bytes, Some(run_dir.to_path_buf()), &path.display().to_string())?;
    let mut spec = source.spec;
    spec.seed = manifest.seeds.planning;
    Ok(spec)
}

fn label<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn now_ms(mock: bool) -> u64 {
    if mock {
        VirtualClock::new().now_ms()
    } else {
        SystemClock.now_ms()
    }
}

fn demographics(spec: &ExperimentSpec, base_dir: Option<&Path>) -> Result<DemographicSpec> {
    Ok(match &spec.population.demographics {
        Some(file) => DemographicSpec::load(&base_dir.unwrap_or(Path::new(".")).join(file))?,
        None => DemographicSpec::us_adults(),
    })
}

fn personas_for(loaded: &LoadedSpec, opts: &RunOptions, demo: &DemographicSpec) -> Result<Vec<Persona>> {
    let spec = &loaded.source.spec;
    let file = opts.population.clone().or_else(|| {
        spec.population
            .file
            .as_ref()
            .map(|f| loaded.source.base_dir.as_deref().unwrap_or(Path::new(".")).join(f))
    });
    if let Some(file) = file {
        return Ok(population::load_population_with(&file, demo)?);
    }
    let n = spec
        .population
        .n
        .ok_or_else(|| Error::Config("the spec needs population.n or population.file".into()))?;
    Ok(population::sample_population(demo, n)?)
}

fn disclosures(demo: &DemographicSpec) -> BTreeMap<String, String> {
    let (mu, sigma) = demo.age_lognormal();
    BTreeMap::from([
        (
            "age-distribution".into(),
            format!(
                "log-normal matched to mean {} and median {} (mu {mu:.4}, sigma {sigma:.4}), rounded and clamped to [{}, {}]",
                demo.age.mean,
                demo.age.median,
                demo.age.min.max(AGE_FLOOR),
                demo.age.max.min(AGE_CEILING)
            ),
        ),
        (
            "iq-distribution".into(),
            format!("normal(mean {}, sd {}) clamped to [{}, {}]", demo.iq.mean, demo.iq.sd, demo.iq.min, demo.iq.max),
        ),
        ("names".into(), "first names drawn from the bundled table by gender and race, last names by race".into()),
        (
            "categorical-attributes".into(),
            "drawn independently from each attribute's marginal distribution".into(),
        ),
        (
            "provider-settings".into(),
            "temperature 1.0 unless overridden; other settings are listed per provider".into(),
        ),
    ])
}

/// Samples or loads the population, plans every trial and starts the
/// manifest. The run seed replaces the spec's seed.
pub fn plan(loaded: &LoadedSpec, opts: &RunOptions, run_dir: &Path) -> Result<RunManifest> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut spec = loaded.source.spec.clone();
    spec.seed = opts.seed;
    let seeds = Seeds {
        run: opts.seed,
        population: spec.population.seed.unwrap_or_else(|| seed::derive(opts.seed, &["population"])),
        planning: opts.seed,
        dispatch: seed::derive(opts.seed, &["dispatch"]),
        analysis: seed::derive(opts.seed, &["analysis"]),
    };
    let demo = demographics(&spec, loaded.source.base_dir.as_deref())?.with_seed(seeds.population);
    let personas = personas_for(loaded, opts, &demo)?;
    let plans = design::plan(&spec, &personas)?;
    log::info!("planned {} trials over {} personas", plans.len(), personas.len());

    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = run_dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(SPEC_FILE, &loaded.source.bytes)?;
    let baseline = match &opts.baselines {
        Some(p) => Some(fs::read(p).map_err(|e| Error::io(p, e))?),
        None => loaded.baseline.clone(),
    };
    if let Some(b) = &baseline {
        write(BASELINE_FILE, b)?;
    }
    population::save_population(&run_dir.join(POPULATION_FILE), &personas)?;
    jsonl::write(&run_dir.join(PLANS_FILE), &plans)?;

    let mut manifest = RunManifest {
        software: SoftwareInfo::default(),
        spec: SpecInfo {
            name: spec.name.clone(),
            source: loaded.origin.clone(),
            hash: loaded.source.hash(),
        },
        seeds,
        mock: opts.mock,
        parallelism: opts.parallelism,
        temperature_override: opts.temperature,
        bootstrap_reps: opts.bootstrap_reps,
        providers: Vec::new(),
        counts: Counts {
            personas: personas.len(),
            plans: plans.len(),
            ..Counts::default()
        },
        timestamps: Timestamps {
            planned_ms: Some(now_ms(opts.mock)),
            dispatch_started_ms: None,
            dispatch_finished_ms: None,
            clock: if opts.mock { "virtual" } else { "system" }.into(),
        },
        disclosures: disclosures(&demo),
        artifacts: BTreeMap::new(),
    };
    save_manifest(run_dir, &mut manifest)?;
    Ok(manifest)
}

/// Renders every plan into the messages its session receives.
pub fn build_jobs(spec: &ExperimentSpec, plans: &[TrialPlan], personas: &[Persona]) -> Result<Vec<TrialJob>> {
    let by_id: BTreeMap<&str, &Persona> = personas.iter().map(|p| (p.id.as_str(), p)).collect();
    let template = spec.preamble_template.as_deref().unwrap_or(DEFAULT_PREAMBLE);
    plans
        .iter()
        .map(|plan| {
            let persona = match &plan.persona_id {
                Some(id) => Some(
                    (*by_id
                        .get(id.as_str())
                        .ok_or_else(|| Error::Config(format!("trial {} names unknown persona {id}", plan.trial_id)))?)
                    .clone(),
                ),
                None => None,
            };
            let preamble = persona
                .as_ref()
                .map(|p| population::render_persona_preamble(p, template))
                .transpose()?;
            let messages = design::render_trial_prompt(plan, spec, preamble.as_deref())?;
            Ok(TrialJob {
                plan: plan.clone(),
                messages,
                persona,
            })
        })
        .collect()
}

fn provider_info(c: &ProviderConfig) -> ProviderInfo {
    ProviderInfo {
        provider_id: c.provider_id.clone(),
        family: label(&c.family),
        model: c.model.clone(),
        endpoint: c.endpoint(),
        temperature: c.temperature,
        max_output_tokens: c.max_output_tokens,
        max_concurrent: c.max_concurrent,
        requests_per_minute: c.requests_per_minute,
        max_attempts: c.retry.max_attempts,
        backoff_base_secs: c.retry.backoff_base_secs,
    }
}

/// Builds the dispatcher for a run: the planted mock, or HTTP providers
/// from the providers table. Credentials are checked here.
fn dispatcher_for(spec: &ExperimentSpec, plans: &[TrialPlan], manifest: &RunManifest, opts: &RunOptions) -> Result<Dispatcher> {
    let mut dispatcher = if opts.mock {
        let clock: Arc<dyn Clock> = Arc::new(VirtualClock::new());
        let mut d = Dispatcher::new(clock, manifest.seeds.dispatch);
        let policy = Arc::new(PlantedPolicy::new(spec, seed::derive(manifest.seeds.run, &["mock"])).inject_invalid(plans));
        for model in &spec.models {
            let mut config = ProviderConfig::mock(model);
            if let Some(t) = opts.temperature {
                config.temperature = t;
            }
            d.register(config, Arc::new(MockProvider::new(policy.clone())))?;
        }
        d
    } else {
        let path = opts
            .providers
            .as_ref()
            .ok_or_else(|| Error::Config("a providers table (--providers) is required without --mock".into()))?;
        let mut configs = dispatch::load_provider_configs(path)?;
        for config in &mut configs {
            if let Some(t) = opts.temperature {
                config.temperature = t;
            }
            config.validate()?;
        }
        if let Some(missing) = spec.models.iter().find(|m| !configs.iter().any(|c| &c.provider_id == *m)) {
            return Err(dispatch::DispatchError::UnknownModel(missing.clone()).into());
        }
        Dispatcher::with_http_providers(Arc::new(SystemClock), manifest.seeds.dispatch, configs)?
    };
    if let Some(p) = opts.parallelism {
        dispatcher = dispatcher.with_parallelism(p);
    }
    Ok(dispatcher)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchSummary {
    pub transcripts: usize,
    pub outcomes: BTreeMap<String, usize>,
}

impl DispatchSummary {
    pub fn all_ok(&self) -> bool {
        self.outcomes.keys().all(|k| k == "ok")
    }
}

/// Runs every planned trial and writes the transcripts.
pub fn dispatch(run_dir: &Path, opts: &RunOptions) -> Result<DispatchSummary> {
    let mut manifest = read_manifest(run_dir)?;
    let spec = run_spec(run_dir, &manifest)?;
    let plans: Vec<TrialPlan> = jsonl::read(&run_dir.join(PLANS_FILE))?;
    let personas = population::load_population(&run_dir.join(POPULATION_FILE))?;
    let jobs = build_jobs(&spec, &plans, &personas)?;
    let dispatcher = dispatcher_for(&spec, &plans, &manifest, opts)?;
    if opts.mock && dispatcher.network_providers() > 0 {
        return Err(Error::Config("mock runs must not use network providers".into()));
    }
    let started = dispatcher.clock().now_ms();
    let records = dispatcher.run_batch_blocking(&jobs, Some(&LogProgress))?;
    let finished = dispatcher.clock().now_ms();
    jsonl::write(&run_dir.join(TRANSCRIPTS_FILE), &records)?;

    let mut outcomes = BTreeMap::new();
    for r in &records {
        *outcomes.entry(label(&r.outcome)).or_insert(0) += 1;
    }
    manifest.mock = opts.mock;
    manifest.parallelism = opts.parallelism;
    manifest.temperature_override = opts.temperature;
    manifest.providers = dispatcher.provider_configs().map(provider_info).collect();
    manifest.counts.transcripts = records.len();
    manifest.counts.outcomes = outcomes.clone();
    manifest.timestamps.dispatch_started_ms = Some(started);
    manifest.timestamps.dispatch_finished_ms = Some(finished);
    save_manifest(run_dir, &mut manifest)?;
    Ok(DispatchSummary {
        transcripts: records.len(),
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractSummary {
    pub responses: usize,
    pub valid: usize,
    pub rejected: BTreeMap<String, usize>,
}

/// Extracts structured answers from every transcript and draws the audit
/// sample.
pub fn extract(run_dir: &Path) -> Result<ExtractSummary> {
    let transcripts_path = run_dir.join(TRANSCRIPTS_FILE);
    if !transcripts_path.is_file() {
        return Err(Error::MissingTranscripts(run_dir.display().to_string()));
    }
    let mut manifest = read_manifest(run_dir)?;
    let spec = run_spec(run_dir, &manifest)?;
    let transcripts: Vec<TranscriptRecord> = jsonl::read(&transcripts_path)?;
    let plans: Vec<TrialPlan> = jsonl::read(&run_dir.join(PLANS_FILE))?;
    let by_trial: BTreeMap<&str, &TrialPlan> = plans.iter().map(|p| (p.trial_id.as_str(), p)).collect();
    let extractor = Extractor::rule_based();
    let responses: Vec<StructuredResponse> = transcripts
        .par_iter()
        .map(|t| {
            let questions: Vec<_> = match by_trial.get(t.trial_id.as_str()) {
                Some(plan) => plan
                    .session_vignettes
                    .iter()
                    .flat_map(|v| plan.question_order.get(v).into_iter().flatten())
                    .filter_map(|q| spec.question(q).cloned())
                    .collect(),
                None => spec.questions.clone(),
            };
            extractor.extract(t, &questions)
        })
        .collect();
    jsonl::write(&run_dir.join(RESPONSES_FILE), &responses)?;
    let k = AUDIT_SIZE.min(responses.len());
    let audit = extraction::audit_sample(&responses, &transcripts, k, manifest.seeds.analysis)?;
    extraction::write_audit_worksheet(&run_dir.join(AUDIT_FILE), &audit)?;

    let valid = responses.iter().filter(|r| r.validity.is_valid()).count();
    let mut rejected = BTreeMap::new();
    for r in &responses {
        if let Validity::Invalid(reason) = r.validity {
            *rejected.entry(reason.as_str().to_string()).or_insert(0) += 1;
        }
    }
    manifest.counts.responses = responses.len();
    manifest.counts.valid = valid;
    manifest.counts.rejected = rejected.clone();
    manifest
        .disclosures
        .insert("extraction".into(), "rule-based grammar; unresolved, refused or out-of-range answers are rejected".into());
    save_manifest(run_dir, &mut manifest)?;
    Ok(ExtractSummary {
        responses: responses.len(),
        valid,
        rejected,
    })
}

/// One valid response joined with its plan.
#[derive(Debug, Clone)]
pub struct Observation {
    pub model_id: String,
    pub arm: Arm,
    pub condition: design::Condition,
    /// Value per scale question, binary question and composite score.
    pub values: BTreeMap<String, f64>,
}

pub fn observations(spec: &ExperimentSpec, plans: &[TrialPlan], responses: &[StructuredResponse]) -> Vec<Observation> {
    let by_trial: BTreeMap<&str, &TrialPlan> = plans.iter().map(|p| (p.trial_id.as_str(), p)).collect();
    responses
        .iter()
        .filter(|r| r.validity.is_valid())
        .filter_map(|r| {
            let plan = by_trial.get(r.trial_id.as_str())?;
            let mut values: BTreeMap<String, f64> = r.answers.iter().map(|(k, &v)| (k.clone(), v as f64)).collect();
            if let Some(c) = &spec.analysis.composite {
                if let (Some(&v), Some(&conf)) = (r.answers.get(&c.verdict), r.answers.get(&c.confidence)) {
                    if let Ok(s) = stats::composite_negligence_score(v, conf) {
                        values.insert(c.name.clone(), s.value() as f64);
                    }
                }
            }
            Some(Observation {
                model_id: plan.model_id.clone(),
                arm: plan.arm,
                condition: plan.condition.clone(),
                values,
            })
        })
        .collect()
}

fn select(obs: &[Observation], arm: Arm, model: &str, outcome: &str, level: Option<(&str, &str)>) -> Vec<f64> {
    obs.iter()
        .filter(|o| o.arm == arm && (model == POOLED || o.model_id == model))
        .filter(|o| level.is_none_or(|(f, l)| o.condition.get(f).map(String::as_str) == Some(l)))
        .filter_map(|o| o.values.get(outcome).copied())
        .collect()
}

/// Everything the analysis stage produced.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub inputs: ReportInputs,
    pub figures: Vec<(String, Figure)>,
}

#[derive(Debug, Clone, Copy)]
struct Settings {
    reps: usize,
    level: f64,
    seed: u64,
}

fn reference_group(spec: &ExperimentSpec) -> &str {
    spec.analysis.equivalence.as_ref().map(|e| e.reference.as_str()).unwrap_or("lay")
}

/// Computes effects, alignment, equivalence and figure data from
/// observations. Pure: no files are touched.
pub fn compute_analysis(
    spec: &ExperimentSpec,
    obs: &[Observation],
    baseline: Option<&Baseline>,
    reps: usize,
    analysis_seed: u64,
) -> Result<Analysis> {
    let s = Settings {
        reps,
        level: spec.analysis.confidence_level,
        seed: analysis_seed,
    };
    let arms = spec.arms();
    let mut models: Vec<&str> = spec.models.iter().map(String::as_str).collect();
    models.push(POOLED);
    let reference = reference_group(spec);

    let mut effects = Vec::new();
    let mut figures = Vec::new();
    for e in &spec.analysis.effects {
        if let Some(b) = baseline {
            for group in b.groups() {
                if let Some(d) = b.delta(&group, &e.outcome, &e.factor, &e.from, &e.to) {
                    effects.push(EffectRow::human(&group, &e.outcome, &e.factor, &e.from, &e.to, d));
                }
            }
        }
        let human_delta = baseline.and_then(|b| b.delta(reference, &e.outcome, &e.factor, &e.from, &e.to));
        for &arm in &arms {
            let mut pairs = Vec::new();
            for &model in &models {
                let from = select(obs, arm, model, &e.outcome, Some((&e.factor, &e.from)));
                let to = select(obs, arm, model, &e.outcome, Some((&e.factor, &e.to)));
                let scores = LevelScores {
                    factor: &e.factor,
                    from: &e.from,
                    to: &e.to,
                    from_scores: &from,
                    to_scores: &to,
                };
                let seed = seed::derive(s.seed, &["effect", arm.as_str(), model, &e.factor, &e.outcome]);
                let estimate = match stats::marginal_effect(scores, s.reps, seed, s.level) {
                    Ok(est) => est,
                    Err(err) => {
                        log::warn!("no {} effect for {model} ({}): {err}", e.factor, arm.as_str());
                        continue;
                    }
                };
                if model != POOLED {
                    pairs.push(BarPair {
                        model_id: model.to_string(),
                        left: Bar {
                            model_id: model.to_string(),
                            value: stats::mean(&from),
                            ci_low: None,
                            ci_high: None,
                        },
                        right: Bar {
                            model_id: model.to_string(),
                            value: stats::mean(&to),
                            ci_low: None,
                            ci_high: None,
                        },
                        stars: estimate.stars().to_string(),
                    });
                }
                effects.push(EffectRow::model(model, arm.as_str(), &e.outcome, &estimate));
            }
            if !pairs.is_empty() {
                figures.push((
                    format!("effect-{}-{}-{}", e.outcome, e.factor, arm.as_str()),
                    Figure::PairedBars {
                        title: format!("{} by {} ({})", e.outcome, e.factor, arm.as_str()),
                        outcome: e.outcome.clone(),
                        left_label: e.from.clone(),
                        right_label: e.to.clone(),
                        pairs,
                        human_delta,
                    },
                ));
            }
        }
    }

    let mut alignment_rows = Vec::new();
    let mut alignment_scores = Vec::new();
    if arms.contains(&Arm::Persona) && arms.contains(&Arm::NoPersona) {
        for e in &spec.analysis.effects {
            let dh = baseline.and_then(|b| b.delta(reference, &e.outcome, &e.factor, &e.from, &e.to));
            for model in &spec.models {
                let pick = |arm, level: &str| select(obs, arm, model, &e.outcome, Some((&e.factor, level)));
                let (pf, pt) = (pick(Arm::Persona, &e.from), pick(Arm::Persona, &e.to));
                let (nf, nt) = (pick(Arm::NoPersona, &e.from), pick(Arm::NoPersona, &e.to));
                let score = match dh {
                    None => AlignmentScore::undefined("no human delta"),
                    Some(dh) => {
                        let seed = seed::derive(s.seed, &["alignment", model, &e.factor, &e.outcome]);
                        stats::alignment_bootstrap(
                            ArmScores { from: &pf, to: &pt },
                            ArmScores { from: &nf, to: &nt },
                            dh,
                            s.reps,
                            seed,
                            s.level,
                        )
                        .unwrap_or_else(|err| AlignmentScore::undefined(&err.to_string()))
                    }
                }
                .labelled(model, &e.factor);
                alignment_rows.push(AlignmentRow::new(&e.outcome, dh, &score));
                alignment_scores.push(score);
            }
        }
    }

    let mut equivalence = Vec::new();
    if let Some(eq) = &spec.analysis.equivalence {
        let b = baseline.ok_or_else(|| Error::Config("equivalence analysis needs a human baseline".into()))?;
        for q in &eq.questions {
            let reference_band = b
                .band(&eq.reference, q)
                .ok_or_else(|| Error::Config(format!("baseline has no {} band for `{q}`", eq.reference)))?;
            let bands = Bands {
                lay: b.band("lay", q),
                professional: b.band("professional", q),
            };
            for &arm in &arms {
                let mut bars = Vec::new();
                for model in &spec.models {
                    let scores = select(obs, arm, model, q, None);
                    let mut r = match stats::tost_equivalence(&scores, reference_band, eq.margin_sd * reference_band.sd, eq.alpha, bands) {
                        Ok(r) => r,
                        Err(err) => {
                            log::warn!("no equivalence test for {model} on {q} ({}): {err}", arm.as_str());
                            continue;
                        }
                    };
                    r.model_id = model.clone();
                    r.question_id = q.clone();
                    let seed = seed::derive(s.seed, &["bar", arm.as_str(), model, q]);
                    let ci = stats::bootstrap_ci(&scores, s.reps, seed, s.level)?;
                    bars.push(Bar {
                        model_id: model.clone(),
                        value: r.model_mean,
                        ci_low: Some(ci.0.min(r.model_mean)),
                        ci_high: Some(ci.1.max(r.model_mean)),
                    });
                    equivalence.push(EquivalenceRow::new(arm.as_str(), &r));
                }
                if !bars.is_empty() {
                    figures.push((
                        format!("bands-{q}-{}", arm.as_str()),
                        Figure::BarsWithHumanBand {
                            title: format!("{q} ({})", arm.as_str()),
                            question: q.clone(),
                            bars,
                            lay: bands.lay,
                            professional: bands.professional,
                        },
                    ));
                }
            }
        }
    }

    let title = if spec.description.is_empty() {
        spec.name.clone()
    } else {
        format!("{}: {}", spec.name, spec.description)
    };
    Ok(Analysis {
        inputs: ReportInputs {
            title,
            effects,
            aggregate_alignment_percent: stats::aggregate_alignment(&alignment_scores),
            alignment: alignment_rows,
            equivalence,
        },
        figures,
    })
}

/// Extracts if needed, then runs the statistics and writes the tables, figure
/// data and `analysis.json`. Output goes to `out`, the run directory by
/// default.
pub fn analyze(run_dir: &Path, out: Option<&Path>, opts: &RunOptions) -> Result<Analysis> {
    if !run_dir.join(TRANSCRIPTS_FILE).is_file() {
        return Err(Error::MissingTranscripts(run_dir.display().to_string()));
    }
    extract(run_dir)?;
    let mut manifest = read_manifest(run_dir)?;
    let spec = run_spec(run_dir, &manifest)?;
    let plans: Vec<TrialPlan> = jsonl::read(&run_dir.join(PLANS_FILE))?;
    let responses: Vec<StructuredResponse> = jsonl::read(&run_dir.join(RESPONSES_FILE))?;
    let baseline_path = opts.baselines.clone().unwrap_or_else(|| run_dir.join(BASELINE_FILE));
    let baseline = if baseline_path.is_file() {
        Some(Baseline::load(&baseline_path)?)
    } else if opts.baselines.is_some() {
        return Err(Error::Config(format!("baseline {} not found", baseline_path.display())));
    } else {
        None
    };
    if opts.bootstrap_reps.is_some() {
        manifest.bootstrap_reps = opts.bootstrap_reps;
    }
    let reps = manifest.bootstrap_reps.unwrap_or(spec.analysis.bootstrap_reps);
    let obs = observations(&spec, &plans, &responses);
    let analysis = compute_analysis(&spec, &obs, baseline.as_ref(), reps, manifest.seeds.analysis)?;

    let out = out.unwrap_or(run_dir);
    let figures_dir = out.join(FIGURES_DIR);
    fs::create_dir_all(&figures_dir).map_err(|e| Error::io(&figures_dir, e))?;
    let i = &analysis.inputs;
    if !i.effects.is_empty() {
        report::emit_effect_table(&i.effects, &out.join(EFFECTS_FILE))?;
    }
    if !i.alignment.is_empty() {
        report::emit_alignment_table(&i.alignment, &out.join(ALIGNMENT_FILE))?;
    }
    if !i.equivalence.is_empty() {
        report::emit_equivalence_table(&i.equivalence, &out.join(EQUIVALENCE_FILE))?;
    }
    for (name, figure) in &analysis.figures {
        report::emit_figure_data(figure, &figures_dir.join(format!("{name}.jsonl")))?;
    }
    let path = out.join(ANALYSIS_FILE);
    let text = serde_json::to_string_pretty(&analysis.inputs).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let d = &mut manifest.disclosures;
    d.insert(
        "composite-score".into(),
        "+confidence for a negligent verdict, -confidence otherwise; 21 points on [-10, 10]".into(),
    );
    d.insert(
        "effects".into(),
        format!(
            "mean(to) - mean(from) per model and pooled; Welch p-values; {reps}-replicate percentile bootstrap {}% intervals (type-7 quantiles), widened to contain the point estimate",
            spec.analysis.confidence_level * 100.0
        ),
    );
    d.insert(
        "alignment".into(),
        "persona/human minus no-persona/human effect ratio; undefined without a nonzero human delta; aggregate is the mean of defined per-(model, factor) values times 100".into(),
    );
    if let Some(eq) = &spec.analysis.equivalence {
        d.insert(
            "equivalence".into(),
            format!(
                "TOST against the {} mean with margin {} x its SD, alpha {}; band membership is mean within one SD",
                eq.reference, eq.margin_sd, eq.alpha
            ),
        );
    }
    d.insert("rounding".into(), "report.md rounds to 3 decimals, ties to even; CSV files keep full precision".into());
    save_manifest(run_dir, &mut manifest)?;
    Ok(analysis)
}

/// Renders `report.md` from `analysis.json` and the manifest.
pub fn report(run_dir: &Path) -> Result<PathBuf> {
    let path = run_dir.join(ANALYSIS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let inputs: ReportInputs = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut manifest = read_manifest(run_dir)?;
    let md = report::render_markdown(&inputs, &manifest);
    let out = run_dir.join(REPORT_FILE);
    fs::write(&out, md).map_err(|e| Error::io(&out, e))?;
    save_manifest(run_dir, &mut manifest)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub dispatch: DispatchSummary,
    pub analysis: Analysis,
}

/// Every stage, start to finish.
pub fn replicate(loaded: &LoadedSpec, opts: &RunOptions, run_dir: &Path) -> Result<RunSummary> {
    plan(loaded, opts, run_dir)?;
    let dispatch = dispatch(run_dir, opts)?;
    let analysis = analyze(run_dir, None, opts)?;
    report(run_dir)?;
    Ok(RunSummary {
        manifest: read_manifest(run_dir)?,
        dispatch,
        analysis,
    })
}

/// Reruns a recorded run into `out` with the manifest's seeds and settings.
/// Refuses when the spec next to the manifest no longer matches its hash.
pub fn reproduce(manifest_path: &Path, out: &Path, providers: Option<PathBuf>) -> Result<RunSummary> {
    let manifest = report::read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let spec_path = dir.join(SPEC_FILE);
    let bytes = fs::read(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let actual = seed::sha256_hex(&bytes);
    if actual != manifest.spec.hash {
        return Err(Error::SpecHashMismatch {
            expected: manifest.spec.hash,
            actual,
        });
    }
    let source = SpecSource::parse(bytes, Some(dir.to_path_buf()), &spec_path.display().to_string())?;
    let baseline_path = dir.join(BASELINE_FILE);
    let baseline = baseline_path
        .is_file()
        .then(|| fs::read(&baseline_path).map_err(|e| Error::io(&baseline_path, e)))
        .transpose()?;
    let loaded = LoadedSpec {
        source,
        origin: manifest.spec.source.clone(),
        baseline,
    };
    let population = dir.join(POPULATION_FILE);
    let opts = RunOptions {
        seed: manifest.seeds.run,
        mock: manifest.mock,
        providers,
        parallelism: manifest.parallelism,
        temperature: manifest.temperature_override,
        bootstrap_reps: manifest.bootstrap_reps,
        population: population.is_file().then_some(population),
        baselines: None,
    };
    replicate(&loaded, &opts, out)
}
