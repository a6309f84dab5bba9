//! In-process providers for tests and offline runs.
//!
//! [`MockProvider`] wraps a [`ResponsePolicy`]. [`PlantedPolicy`] is the
//! policy used by offline replications: it draws a latent score per outcome
//! from a known model (baseline, planted factor shifts, persona and model
//! offsets, noise) and writes a free-text answer stating it.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, Clock, Completion, FinishReason, ProviderError, TrialContext};
use crate::design::{AnswerKind, Arm, ExperimentSpec, QuestionItem, TrialPlan};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    Text(String),
    /// Fails this attempt with a retryable error.
    Transient(String),
    /// The provider itself declines (content filter).
    ProviderRefusal,
    /// Output cut at the token limit.
    Truncated(String),
}

pub trait ResponsePolicy: Send + Sync {
    fn respond(&self, request: &ChatRequest, context: &TrialContext<'_>) -> MockReply;
}

impl<F> ResponsePolicy for F
where
    F: Fn(&ChatRequest, &TrialContext<'_>) -> MockReply + Send + Sync,
{
    fn respond(&self, request: &ChatRequest, context: &TrialContext<'_>) -> MockReply {
        self(request, context)
    }
}

/// Counts calls and in-flight requests, and can simulate latency and
/// transient failures.
pub struct MockProvider {
    policy: Arc<dyn ResponsePolicy>,
    fail_first: u32,
    latency: Option<(Arc<dyn Clock>, Duration)>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockProvider {
    pub fn new(policy: Arc<dyn ResponsePolicy>) -> Self {
        MockProvider {
            policy,
            fail_first: 0,
            latency: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest, &TrialContext<'_>) -> MockReply + Send + Sync + 'static,
    {
        Self::new(Arc::new(f))
    }

    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::from_fn(move |_, _| MockReply::Text(text.clone()))
    }

    /// The first `n` attempts of every trial fail transiently.
    pub fn failing_first(mut self, n: u32) -> Self {
        self.fail_first = n;
        self
    }

    /// Each call sleeps `latency` on `clock` before answering.
    pub fn with_latency(mut self, clock: Arc<dyn Clock>, latency: Duration) -> Self {
        self.latency = Some((clock, latency));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatProvider for MockProvider {
    async fn complete(&self, request: &ChatRequest, context: &TrialContext<'_>) -> Result<Completion, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some((clock, latency)) = &self.latency {
            clock.sleep(*latency).await;
        }
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        if context.attempt <= self.fail_first {
            return Err(ProviderError::Transient(format!("simulated failure {}", context.attempt)));
        }
        match self.policy.respond(request, context) {
            MockReply::Text(text) => Ok(Completion::stop(text)),
            MockReply::Transient(msg) => Err(ProviderError::Transient(msg)),
            MockReply::ProviderRefusal => Ok(Completion {
                text: String::new(),
                finish: FinishReason::Refusal,
            }),
            MockReply::Truncated(text) => Ok(Completion {
                text,
                finish: FinishReason::Length,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub factor: String,
    pub level: String,
    /// Added to the outcome's latent mean when the factor is at `level`.
    pub shift: f64,
    pub outcome: String,
}

fn one() -> f64 {
    1.0
}

/// Ground truth for a [`PlantedPolicy`], read from a spec's `[mock]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    #[serde(default = "one")]
    pub noise_sd: f64,
    /// SD of a per-(subject, outcome) offset.
    #[serde(default)]
    pub persona_sd: f64,
    /// Planted shifts are scaled by `1 + model_spread * u` per model, with
    /// `u` evenly spaced on [-1, 1] over the spec's model list.
    #[serde(default)]
    pub model_spread: f64,
    /// SD of a per-(model, outcome) baseline offset.
    #[serde(default)]
    pub model_offset_sd: f64,
    /// Multiplies planted shifts in the no-persona arm.
    #[serde(default = "one")]
    pub no_persona_effect_scale: f64,
    #[serde(default)]
    pub no_persona_shift: f64,
    /// Latent mean per outcome. Defaults to 0 for the composite and the scale
    /// midpoint for questions.
    #[serde(default)]
    pub baseline: BTreeMap<String, f64>,
    #[serde(default)]
    pub effects: Vec<PlantedEffect>,
    /// Trials forced to produce an invalid response.
    #[serde(default)]
    pub invalid_responses: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            noise_sd: 1.0,
            persona_sd: 0.0,
            model_spread: 0.0,
            model_offset_sd: 0.0,
            no_persona_effect_scale: 1.0,
            no_persona_shift: 0.0,
            baseline: BTreeMap::new(),
            effects: Vec::new(),
            invalid_responses: 0,
        }
    }
}

/// Ways an injected trial goes wrong. Cycled in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    RefusalText,
    Unparseable,
    OutOfRange,
    ProviderRefusal,
    Truncated,
    Transport,
}

impl FailureMode {
    pub const ALL: [FailureMode; 6] = [
        FailureMode::RefusalText,
        FailureMode::Unparseable,
        FailureMode::OutOfRange,
        FailureMode::ProviderRefusal,
        FailureMode::Truncated,
        FailureMode::Transport,
    ];
}

pub struct PlantedPolicy {
    spec: ExperimentSpec,
    planted: PlantedSpec,
    seed: u64,
    injected: HashMap<String, FailureMode>,
}

impl PlantedPolicy {
    /// Uses the spec's `[mock]` table, or an all-default truth if absent.
    pub fn new(spec: &ExperimentSpec, seed: u64) -> Self {
        let planted = spec.mock.clone().unwrap_or_default();
        PlantedPolicy {
            spec: spec.clone(),
            planted,
            seed,
            injected: HashMap::new(),
        }
    }

    pub fn with_truth(spec: &ExperimentSpec, planted: PlantedSpec, seed: u64) -> Self {
        PlantedPolicy {
            spec: spec.clone(),
            planted,
            seed,
            injected: HashMap::new(),
        }
    }

    /// Picks `invalid_responses` trials by seeded sampling without
    /// replacement and assigns failure modes in rotation.
    pub fn inject_invalid(mut self, plans: &[TrialPlan]) -> Self {
        let k = self.planted.invalid_responses.min(plans.len());
        let mut rng = seed::rng_for(self.seed, &["inject"]);
        let mut indices: Vec<usize> = (0..plans.len()).collect();
        for i in 0..k {
            let j = i + seed::index(&mut rng, plans.len() - i);
            indices.swap(i, j);
        }
        let mut chosen: Vec<usize> = indices[..k].to_vec();
        chosen.sort_unstable();
        self.injected = chosen
            .into_iter()
            .enumerate()
            .map(|(n, i)| (plans[i].trial_id.clone(), FailureMode::ALL[n % FailureMode::ALL.len()]))
            .collect();
        self
    }

    pub fn injected(&self) -> &HashMap<String, FailureMode> {
        &self.injected
    }

    fn model_multiplier(&self, model: &str) -> f64 {
        let models = &self.spec.models;
        let Some(k) = models.iter().position(|m| m == model) else {
            return 1.0;
        };
        if models.len() < 2 {
            return 1.0;
        }
        let u = 2.0 * k as f64 / (models.len() - 1) as f64 - 1.0;
        1.0 + self.planted.model_spread * u
    }

    fn normal(&self, labels: &[&str]) -> f64 {
        let mut rng = seed::rng_for(self.seed, labels);
        StandardNormal.sample(&mut rng)
    }

    fn default_mean(&self, outcome: &str) -> f64 {
        match self.spec.question(outcome) {
            Some(q) => {
                let (lo, hi) = q.bounds();
                (lo + hi) as f64 / 2.0
            }
            None => 0.0,
        }
    }

    /// Latent (unrounded, unclamped) value for an outcome in one trial.
    pub fn latent(&self, plan: &TrialPlan, outcome: &str, rng: &mut ChaCha8Rng) -> f64 {
        let p = &self.planted;
        let mut mean = p.baseline.get(outcome).copied().unwrap_or_else(|| self.default_mean(outcome));
        if p.model_offset_sd > 0.0 {
            mean += p.model_offset_sd * self.normal(&["model-offset", &plan.model_id, plan.arm.as_str(), outcome]);
        }
        if plan.arm == Arm::NoPersona {
            mean += p.no_persona_shift;
        }
        let arm_scale = if plan.arm == Arm::NoPersona {
            p.no_persona_effect_scale
        } else {
            1.0
        };
        let multiplier = self.model_multiplier(&plan.model_id);
        for effect in &p.effects {
            if effect.outcome == outcome && plan.condition.get(&effect.factor) == Some(&effect.level) {
                mean += effect.shift * multiplier * arm_scale;
            }
        }
        if p.persona_sd > 0.0 {
            mean += p.persona_sd * self.normal(&["subject-offset", &plan.model_id, &plan.subject_id, outcome]);
        }
        let z: f64 = StandardNormal.sample(rng);
        mean + p.noise_sd * z
    }

    /// True answers for every question in the session, keyed by question id.
    pub fn answers(&self, plan: &TrialPlan, rng: &mut ChaCha8Rng) -> BTreeMap<String, i64> {
        let mut answers = BTreeMap::new();
        let composite = self.spec.analysis.composite.as_ref();
        for vid in &plan.session_vignettes {
            for qid in plan.question_order.get(vid).into_iter().flatten() {
                if answers.contains_key(qid) {
                    continue;
                }
                let Some(q) = self.spec.question(qid) else { continue };
                match composite {
                    Some(c) if c.verdict == *qid || c.confidence == *qid => {
                        let s = self.latent(plan, &c.name, rng).clamp(-10.0, 10.0).round() as i64;
                        answers.insert(c.verdict.clone(), i64::from(s > 0));
                        answers.insert(c.confidence.clone(), s.abs());
                    }
                    _ => {
                        let (lo, hi) = q.bounds();
                        let x = self.latent(plan, qid, rng);
                        let value = match q.kind {
                            AnswerKind::Binary { .. } => i64::from(x > 0.0),
                            AnswerKind::Scale { .. } => x.clamp(lo as f64, hi as f64).round() as i64,
                        };
                        answers.insert(qid.clone(), value);
                    }
                }
            }
        }
        answers
    }

    fn write_answers(&self, plan: &TrialPlan, answers: &BTreeMap<String, i64>, name: &str, rng: &mut ChaCha8Rng) -> String {
        let mut lines = vec![pick(rng, OPENINGS).replace("{name}", name)];
        if rng.random_bool(0.5) {
            lines.push(pick(rng, REASONING).to_string());
        }
        for vid in &plan.session_vignettes {
            for qid in plan.question_order.get(vid).into_iter().flatten() {
                let (Some(q), Some(&value)) = (self.spec.question(qid), answers.get(qid)) else {
                    continue;
                };
                lines.push(answer_sentence(q, value, rng));
            }
        }
        if rng.random_bool(0.3) {
            lines.push(pick(rng, CLOSINGS).to_string());
        }
        lines.join(if rng.random_bool(0.5) { "\n" } else { " " })
    }

    fn reply(&self, context: &TrialContext<'_>) -> MockReply {
        let plan = context.plan;
        let mut rng = seed::rng_for(self.seed, &["mock", &plan.trial_id]);
        let name = context.persona.map(|p| p.first_name().to_string()).unwrap_or_else(|| "the reader".into());
        let mut answers = self.answers(plan, &mut rng);
        match self.injected.get(&plan.trial_id) {
            None => MockReply::Text(self.write_answers(plan, &answers, &name, &mut rng)),
            Some(FailureMode::RefusalText) => MockReply::Text(pick(&mut rng, REFUSALS).to_string()),
            Some(FailureMode::Unparseable) => MockReply::Text(pick(&mut rng, EVASIONS).to_string()),
            Some(FailureMode::ProviderRefusal) => MockReply::ProviderRefusal,
            Some(FailureMode::Transport) => MockReply::Transient("simulated outage".into()),
            Some(FailureMode::Truncated) => {
                let full = self.write_answers(plan, &answers, &name, &mut rng);
                MockReply::Truncated(full.chars().take(full.chars().count() / 3).collect())
            }
            Some(FailureMode::OutOfRange) => {
                let scale = answers
                    .keys()
                    .find(|qid| matches!(self.spec.question(qid).map(|q| &q.kind), Some(AnswerKind::Scale { .. })))
                    .cloned();
                match scale {
                    Some(qid) => {
                        let (_, hi) = self.spec.question(&qid).expect("answered question exists").bounds();
                        answers.insert(qid, hi + 2);
                        MockReply::Text(self.write_answers(plan, &answers, &name, &mut rng))
                    }
                    None => MockReply::Text(pick(&mut rng, EVASIONS).to_string()),
                }
            }
        }
    }
}

impl ResponsePolicy for PlantedPolicy {
    fn respond(&self, _request: &ChatRequest, context: &TrialContext<'_>) -> MockReply {
        self.reply(context)
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[seed::index(rng, options.len())]
}

const OPENINGS: &[&str] = &[
    "Speaking as {name}, here is how I see it.",
    "Let me think this through from where I stand.",
    "Okay. I read the story twice before answering.",
    "As {name}, my honest take follows.",
    "This one made me stop and think for a minute.",
];

const REASONING: &[&str] = &[
    "People in everyday life have to weigh what is reasonable against what is practical.",
    "I tried to picture what an ordinary person would have done in that spot.",
    "What matters most to me is whether the harm was foreseeable.",
    "Bargains should be kept, but the circumstances also count.",
];

const CLOSINGS: &[&str] = &[
    "That is my view.",
    "That is where I land.",
    "Those are my answers.",
];

const REFUSALS: &[&str] = &[
    "I'm sorry, but I can't roleplay as this person or give a judgment on this case.",
    "I refuse to roleplay this.",
    "As an AI, I am not able to take on this character or answer these questions.",
];

const EVASIONS: &[&str] = &[
    "This is a difficult case and reasonable people could disagree. I would need more facts before deciding.",
    "There are good arguments on every side here, and I would rather not pick.",
];

const NUMBER_WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

fn answer_sentence(q: &QuestionItem, value: i64, rng: &mut ChaCha8Rng) -> String {
    let label = q.display_label();
    let lower = label.to_lowercase();
    match &q.kind {
        AnswerKind::Binary { positive, negative } => {
            let term = if value == 1 { positive } else { negative };
            match seed::index(rng, 3) {
                0 => format!("{label}: {term}."),
                1 => format!("My verdict is that the conduct was {term}."),
                _ => format!("All things considered, I find it {term}."),
            }
        }
        AnswerKind::Scale { hi, .. } => {
            let word = usize::try_from(value).ok().and_then(|v| NUMBER_WORDS.get(v).copied());
            match seed::index(rng, 5) {
                0 => format!("{label}: {value}"),
                1 => format!("My {lower} rating is {value} out of {hi}."),
                2 => format!("On {lower}, I'd say {value}."),
                3 => format!("For {lower} I would give it a {value}/{hi}."),
                _ => match word {
                    Some(w) => format!("I'd put {lower} at {w}."),
                    None => format!("I'd put {lower} at {value}."),
                },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Condition;

    fn plan(model: &str, condition: &[(&str, &str)]) -> TrialPlan {
        TrialPlan {
            trial_id: format!("p-{model}-s-0"),
            subject_id: "s".into(),
            persona_id: None,
            model_id: model.into(),
            arm: Arm::Persona,
            condition: condition.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<Condition>(),
            vignette_order: vec![],
            position: 0,
            session_vignettes: vec![],
            question_order: BTreeMap::new(),
            seed: 0,
        }
    }

    fn spec() -> ExperimentSpec {
        ExperimentSpec::from_toml_str(
            r#"
name = "t"
design = "between"
seed = 1
models = ["a", "b", "c"]
[[factors]]
name = "f"
levels = ["x", "y"]
role = "between"
[[questions]]
id = "q"
prompt = "Rate it."
kind = { type = "scale", lo = 1, hi = 7 }
[[vignettes]]
id = "v"
body = "Body."
questions = ["q"]
"#,
        )
        .unwrap()
    }

    #[test]
    fn multipliers_average_to_one() {
        let truth = PlantedSpec {
            model_spread: 0.4,
            ..PlantedSpec::default()
        };
        let policy = PlantedPolicy::with_truth(&spec(), truth, 1);
        let m: Vec<f64> = ["a", "b", "c"].iter().map(|m| policy.model_multiplier(m)).collect();
        assert!((m.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!((m[0] - 0.6).abs() < 1e-12 && (m[2] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn planted_shift_applies_only_at_level() {
        let truth = PlantedSpec {
            noise_sd: 0.0,
            baseline: BTreeMap::from([("q".to_string(), 3.0)]),
            effects: vec![PlantedEffect {
                factor: "f".into(),
                level: "y".into(),
                shift: 2.0,
                outcome: "q".into(),
            }],
            ..PlantedSpec::default()
        };
        let policy = PlantedPolicy::with_truth(&spec(), truth, 1);
        let mut rng = seed::rng(0);
        assert_eq!(policy.latent(&plan("b", &[("f", "x")]), "q", &mut rng), 3.0);
        assert_eq!(policy.latent(&plan("b", &[("f", "y")]), "q", &mut rng), 5.0);
    }

    #[test]
    fn injection_is_seeded_and_exact() {
        let plans: Vec<TrialPlan> = (0..50)
            .map(|i| TrialPlan {
                trial_id: format!("t{i}"),
                ..plan("a", &[])
            })
            .collect();
        let truth = PlantedSpec {
            invalid_responses: 7,
            ..PlantedSpec::default()
        };
        let a = PlantedPolicy::with_truth(&spec(), truth.clone(), 5).inject_invalid(&plans);
        let b = PlantedPolicy::with_truth(&spec(), truth, 5).inject_invalid(&plans);
        assert_eq!(a.injected().len(), 7);
        assert_eq!(a.injected(), b.injected());
    }
}
