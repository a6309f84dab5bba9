//! Experiment specifications and randomized trial plans.
//!
//! An [`ExperimentSpec`] lists vignettes, factors, questions and models.
//! The planners turn it into [`TrialPlan`]s:
//!
//! - within-subject: every subject sees every combination of the
//!   within-subject factors exactly once. Each vignette is its own session.
//!   Each subject gets a fresh seeded bijection from vignettes to
//!   combinations and a seeded presentation order.
//! - between-subject: subjects are assigned to one condition by seeded block
//!   randomization within each model stratum. They see every vignette in one
//!   session.
//!
//! Plans depend only on `(spec, personas)`, so re-planning is idempotent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::mock::PlantedSpec;
use crate::population::Persona;
use crate::seed;
use crate::template::{Template, TemplateError};

pub const DEFAULT_RESPONSE_INSTRUCTION: &str = "Answer in your own words and explain your reasoning. \
Then finish with one line per question, in the form `Label: answer`, using the label shown in brackets.";

pub type Condition = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("factor `{factor}`: {reason}")]
    InvalidFactor { factor: String, reason: String },
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("within-subject design has {combinations} factor combinations but {vignettes} vignettes")]
    CombinationMismatch { combinations: usize, vignettes: usize },
    #[error("between-subject design needs at least one between-subject factor")]
    NoBetweenFactor,
    #[error("vignette `{vignette}`: unresolved slot `{slot}`")]
    UnresolvedSlot { vignette: String, slot: String },
    #[error("plan `{trial}` does not match the spec: {reason}")]
    PlanMismatch { trial: String, reason: String },
    #[error("experiment spec {path}: {message}")]
    SpecParse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorRole {
    Within,
    Between,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFactor")]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub role: FactorRole,
}

#[derive(Deserialize)]
struct RawFactor {
    name: String,
    levels: Vec<String>,
    role: FactorRole,
}

impl TryFrom<RawFactor> for Factor {
    type Error = DesignError;

    fn try_from(raw: RawFactor) -> Result<Self, Self::Error> {
        Factor::new(raw.name, raw.levels, raw.role)
    }
}

impl Factor {
    pub fn new(name: impl Into<String>, levels: Vec<String>, role: FactorRole) -> Result<Self, DesignError> {
        let name = name.into();
        if levels.len() < 2 {
            return Err(DesignError::InvalidFactor {
                factor: name,
                reason: format!("needs at least 2 levels, got {}", levels.len()),
            });
        }
        let unique: BTreeSet<&String> = levels.iter().collect();
        if unique.len() != levels.len() {
            return Err(DesignError::InvalidFactor {
                factor: name,
                reason: "level labels must be unique".into(),
            });
        }
        Ok(Factor { name, levels, role })
    }

    pub fn within(name: &str, levels: &[&str]) -> Result<Self, DesignError> {
        Self::new(name, levels.iter().map(|s| s.to_string()).collect(), FactorRole::Within)
    }

    pub fn between(name: &str, levels: &[&str]) -> Result<Self, DesignError> {
        Self::new(name, levels.iter().map(|s| s.to_string()).collect(), FactorRole::Between)
    }

    pub fn has_level(&self, level: &str) -> bool {
        self.levels.iter().any(|l| l == level)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AnswerKind {
    /// A yes/no judgment. `positive` is the term for verdict 1.
    Binary { positive: String, negative: String },
    /// An integer rating on `[lo, hi]`.
    Scale { lo: i64, hi: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub id: String,
    pub prompt: String,
    pub kind: AnswerKind,
    #[serde(default)]
    pub scale_meaning: String,
    /// Words a response may use to refer to this question. The first label is
    /// shown to the model; the id is always accepted.
    #[serde(default)]
    pub labels: Vec<String>,
}

impl QuestionItem {
    pub fn display_label(&self) -> String {
        let raw = self.labels.first().unwrap_or(&self.id);
        let mut chars = raw.chars();
        match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    }

    pub fn all_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.labels.iter().map(|l| l.to_lowercase()).collect();
        let id = self.id.to_lowercase().replace('_', " ");
        if !labels.contains(&id) {
            labels.push(id);
        }
        labels
    }

    pub fn bounds(&self) -> (i64, i64) {
        match &self.kind {
            AnswerKind::Binary { .. } => (0, 1),
            AnswerKind::Scale { lo, hi } => (*lo, *hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vignette {
    pub id: String,
    pub body: String,
    pub questions: Vec<String>,
    /// Per-factor text substituted for each level. Falls back to the label.
    #[serde(default)]
    pub level_text: BTreeMap<String, BTreeMap<String, String>>,
}

impl Vignette {
    pub fn level_text(&self, factor: &str, level: &str) -> String {
        self.level_text
            .get(factor)
            .and_then(|m| m.get(level))
            .cloned()
            .unwrap_or_else(|| level.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    Within,
    Between,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PersonaArm {
    #[default]
    Persona,
    NoPersona,
    Both,
}

impl PersonaArm {
    pub fn arms(self) -> Vec<Arm> {
        match self {
            PersonaArm::Persona => vec![Arm::Persona],
            PersonaArm::NoPersona => vec![Arm::NoPersona],
            PersonaArm::Both => vec![Arm::Persona, Arm::NoPersona],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Persona,
    NoPersona,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Persona => "persona",
            Arm::NoPersona => "no-persona",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Arm::Persona => "p",
            Arm::NoPersona => "np",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PopulationRef {
    /// Number of personas to sample from the demographic profile.
    pub n: Option<usize>,
    pub seed: Option<u64>,
    /// Demographic profile file; the bundled US adult profile when absent.
    pub demographics: Option<String>,
    /// Pre-built population file. Takes precedence over sampling.
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub name: String,
    pub verdict: String,
    pub confidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub factor: String,
    pub from: String,
    pub to: String,
    /// A scale question id or the composite score name.
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceSpec {
    pub questions: Vec<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Margin as a multiple of the reference group's SD.
    #[serde(default = "default_margin_sd")]
    pub margin_sd: f64,
    #[serde(default = "default_reference")]
    pub reference: String,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_margin_sd() -> f64 {
    0.5
}
fn default_reference() -> String {
    "lay".into()
}
fn default_reps() -> usize {
    10_000
}
fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    #[serde(default = "default_reps")]
    pub bootstrap_reps: usize,
    #[serde(default = "default_level")]
    pub confidence_level: f64,
    #[serde(default)]
    pub composite: Option<CompositeSpec>,
    #[serde(default)]
    pub effects: Vec<EffectSpec>,
    #[serde(default)]
    pub equivalence: Option<EquivalenceSpec>,
    /// Human baseline table, relative to the spec file.
    #[serde(default)]
    pub baseline: Option<String>,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            bootstrap_reps: default_reps(),
            confidence_level: default_level(),
            composite: None,
            effects: Vec::new(),
            equivalence: None,
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub design: DesignKind,
    pub seed: u64,
    #[serde(default)]
    pub persona_arm: PersonaArm,
    pub models: Vec<String>,
    #[serde(default)]
    pub shuffle_questions: bool,
    #[serde(default)]
    pub preamble_template: Option<String>,
    #[serde(default = "default_instruction")]
    pub response_instruction: String,
    #[serde(default)]
    pub population: PopulationRef,
    #[serde(default)]
    pub factors: Vec<Factor>,
    pub questions: Vec<QuestionItem>,
    pub vignettes: Vec<Vignette>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub mock: Option<PlantedSpec>,
}

fn default_instruction() -> String {
    DEFAULT_RESPONSE_INSTRUCTION.to_string()
}

/// A parsed spec together with the exact bytes it came from.
#[derive(Debug, Clone)]
pub struct SpecSource {
    pub spec: ExperimentSpec,
    pub bytes: Vec<u8>,
    pub base_dir: Option<PathBuf>,
}

impl SpecSource {
    pub fn hash(&self) -> String {
        seed::sha256_hex(&self.bytes)
    }

    pub fn parse(bytes: Vec<u8>, base_dir: Option<PathBuf>, shown: &str) -> Result<Self, DesignError> {
        let text = String::from_utf8(bytes.clone()).map_err(|e| DesignError::SpecParse {
            path: shown.to_string(),
            message: e.to_string(),
        })?;
        let spec = ExperimentSpec::from_toml_str(&text).map_err(|e| match e {
            DesignError::SpecParse { message, .. } => DesignError::SpecParse {
                path: shown.to_string(),
                message,
            },
            other => other,
        })?;
        Ok(SpecSource { spec, bytes, base_dir })
    }

    pub fn load(path: &Path) -> Result<Self, DesignError> {
        let bytes = std::fs::read(path).map_err(|source| DesignError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(bytes, path.parent().map(Path::to_path_buf), &path.display().to_string())
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, DesignError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| DesignError::SpecParse {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn question(&self, id: &str) -> Option<&QuestionItem> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn vignette(&self, id: &str) -> Option<&Vignette> {
        self.vignettes.iter().find(|v| v.id == id)
    }

    pub fn factor(&self, name: &str) -> Option<&Factor> {
        self.factors.iter().find(|f| f.name == name)
    }

    pub fn factors_with(&self, role: FactorRole) -> Vec<Factor> {
        self.factors.iter().filter(|f| f.role == role).cloned().collect()
    }

    pub fn arms(&self) -> Vec<Arm> {
        self.persona_arm.arms()
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        let bad = |msg: String| Err(DesignError::InvalidSpec(msg));
        if self.models.is_empty() {
            return bad("model_ids must not be empty".into());
        }
        if self.models.iter().collect::<BTreeSet<_>>().len() != self.models.len() {
            return bad("model ids must be unique".into());
        }
        if self.vignettes.is_empty() {
            return bad("at least one vignette is required".into());
        }
        let names: BTreeSet<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        if names.len() != self.factors.len() {
            return bad("factor names must be unique".into());
        }
        let within = self.factors_with(FactorRole::Within);
        let between = self.factors_with(FactorRole::Between);
        match self.design {
            DesignKind::Within if !between.is_empty() => {
                return bad("within-subject design cannot carry between-subject factors".into())
            }
            DesignKind::Between if between.is_empty() => return Err(DesignError::NoBetweenFactor),
            DesignKind::Between if !within.is_empty() => {
                return bad("mixed designs are not supported; between-subject designs take only between-subject factors".into())
            }
            _ => {}
        }

        let mut question_ids = BTreeSet::new();
        for q in &self.questions {
            if !question_ids.insert(q.id.as_str()) {
                return bad(format!("duplicate question id `{}`", q.id));
            }
            if let AnswerKind::Scale { lo, hi } = q.kind {
                if lo >= hi {
                    return bad(format!("question `{}`: scale needs lo < hi", q.id));
                }
            }
        }

        let mut vignette_ids = BTreeSet::new();
        let mut session_questions = BTreeSet::new();
        for v in &self.vignettes {
            if !vignette_ids.insert(v.id.as_str()) {
                return bad(format!("duplicate vignette id `{}`", v.id));
            }
            for qid in &v.questions {
                if !question_ids.contains(qid.as_str()) {
                    return bad(format!("vignette `{}` references unknown question `{qid}`", v.id));
                }
                if self.design == DesignKind::Between && !session_questions.insert(qid.clone()) {
                    return bad(format!(
                        "question `{qid}` appears in several vignettes; between-subject sessions need distinct question ids"
                    ));
                }
            }
            let template = Template::parse(&v.body);
            for slot in template.slots() {
                if !names.contains(slot) {
                    return bad(format!("vignette `{}` has slot `{slot}` that names no factor", v.id));
                }
            }
            for f in &within {
                let count = template.slot_count(&f.name);
                if count != 1 {
                    return bad(format!(
                        "vignette `{}` must contain slot `{}` exactly once, found {count}",
                        v.id, f.name
                    ));
                }
            }
            for (factor, levels) in &v.level_text {
                let Some(f) = self.factor(factor) else {
                    return bad(format!("vignette `{}` gives level text for unknown factor `{factor}`", v.id));
                };
                for level in levels.keys() {
                    if !f.has_level(level) {
                        return bad(format!("vignette `{}`: `{level}` is not a level of `{factor}`", v.id));
                    }
                }
            }
        }

        let a = &self.analysis;
        if let Some(c) = &a.composite {
            match self.question(&c.verdict).map(|q| &q.kind) {
                Some(AnswerKind::Binary { .. }) => {}
                _ => return bad(format!("composite verdict `{}` must be a binary question", c.verdict)),
            }
            match self.question(&c.confidence).map(|q| &q.kind) {
                Some(AnswerKind::Scale { lo: 0, hi: 10 }) => {}
                _ => return bad(format!("composite confidence `{}` must be a 0-10 scale question", c.confidence)),
            }
        }
        for e in &a.effects {
            let Some(f) = self.factor(&e.factor) else {
                return bad(format!("effect names unknown factor `{}`", e.factor));
            };
            if !f.has_level(&e.from) || !f.has_level(&e.to) || e.from == e.to {
                return bad(format!("effect on `{}` needs two distinct levels of the factor", e.factor));
            }
            let composite = a.composite.as_ref().is_some_and(|c| c.name == e.outcome);
            let scale = matches!(self.question(&e.outcome).map(|q| &q.kind), Some(AnswerKind::Scale { .. }));
            if !composite && !scale {
                return bad(format!("effect outcome `{}` is neither the composite nor a scale question", e.outcome));
            }
        }
        if let Some(eq) = &a.equivalence {
            for qid in &eq.questions {
                if !matches!(self.question(qid).map(|q| &q.kind), Some(AnswerKind::Scale { .. })) {
                    return bad(format!("equivalence question `{qid}` must be a scale question"));
                }
            }
            if !(eq.margin_sd > 0.0) || !(eq.alpha > 0.0 && eq.alpha < 1.0) {
                return bad("equivalence needs margin_sd > 0 and alpha in (0, 1)".into());
            }
        }
        if a.bootstrap_reps < 100 || !(a.confidence_level > 0.0 && a.confidence_level < 1.0) {
            return bad("analysis needs bootstrap_reps >= 100 and confidence_level in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub trial_id: String,
    pub subject_id: String,
    /// Absent in the no-persona arm.
    pub persona_id: Option<String>,
    pub model_id: String,
    pub arm: Arm,
    /// Factor levels in force for this session.
    pub condition: Condition,
    /// The subject's full vignette presentation order.
    pub vignette_order: Vec<String>,
    /// Index of this session within the subject's sequence.
    pub position: usize,
    /// Vignettes shown in this session, in order.
    pub session_vignettes: Vec<String>,
    pub question_order: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

/// Full cartesian product of the factors' levels. The last factor varies
/// fastest. An empty factor list yields the single empty condition.
pub fn expand_conditions(factors: &[Factor]) -> Vec<Condition> {
    let mut conditions = vec![Condition::new()];
    for factor in factors {
        conditions = conditions
            .into_iter()
            .flat_map(|c| {
                factor.levels.iter().map(move |level| {
                    let mut next = c.clone();
                    next.insert(factor.name.clone(), level.clone());
                    next
                })
            })
            .collect();
    }
    conditions
}

struct Subject<'a> {
    id: String,
    persona: Option<&'a Persona>,
}

fn subjects<'a>(arm: Arm, personas: &'a [Persona]) -> Vec<Subject<'a>> {
    personas
        .iter()
        .enumerate()
        .map(|(i, p)| match arm {
            Arm::Persona => Subject {
                id: p.id.clone(),
                persona: Some(p),
            },
            Arm::NoPersona => Subject {
                id: format!("anon-{:05}", i + 1),
                persona: None,
            },
        })
        .collect()
}

fn question_order(spec: &ExperimentSpec, vignette: &Vignette, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<String> {
    let mut order = vignette.questions.clone();
    if spec.shuffle_questions {
        seed::shuffle(rng, &mut order);
    }
    order
}

/// Plans a within-subject design: one session per (subject, model, vignette).
pub fn plan_within_subject(
    spec: &ExperimentSpec,
    personas: &[Persona],
    models: &[String],
) -> Result<Vec<TrialPlan>, DesignError> {
    let combinations = expand_conditions(&spec.factors_with(FactorRole::Within));
    if combinations.len() != spec.vignettes.len() {
        return Err(DesignError::CombinationMismatch {
            combinations: combinations.len(),
            vignettes: spec.vignettes.len(),
        });
    }
    let mut plans = Vec::with_capacity(spec.arms().len() * models.len() * personas.len() * spec.vignettes.len());
    for arm in spec.arms() {
        for model in models {
            for subject in subjects(arm, personas) {
                let mut rng = seed::rng_for(spec.seed, &["within", arm.as_str(), model, &subject.id]);
                let pairing = seed::permutation(&mut rng, combinations.len());
                let order = seed::permutation(&mut rng, spec.vignettes.len());
                let vignette_order: Vec<String> = order.iter().map(|&i| spec.vignettes[i].id.clone()).collect();
                for (position, &vi) in order.iter().enumerate() {
                    let vignette = &spec.vignettes[vi];
                    let trial_id = format!("{}-{}-{}-{}", arm.short(), model, subject.id, position);
                    let questions = question_order(spec, vignette, &mut rng);
                    plans.push(TrialPlan {
                        seed: seed::derive(spec.seed, &["trial", &trial_id]),
                        trial_id,
                        subject_id: subject.id.clone(),
                        persona_id: subject.persona.map(|p| p.id.clone()),
                        model_id: model.clone(),
                        arm,
                        condition: combinations[pairing[vi]].clone(),
                        vignette_order: vignette_order.clone(),
                        position,
                        session_vignettes: vec![vignette.id.clone()],
                        question_order: BTreeMap::from([(vignette.id.clone(), questions)]),
                    });
                }
            }
        }
    }
    Ok(plans)
}

/// Plans a between-subject design: one session per (subject, model). Within
/// each (arm, model) stratum, conditions are dealt in shuffled blocks of size
/// `|conditions|`, so arm sizes differ by at most one.
pub fn plan_between_subject(
    spec: &ExperimentSpec,
    personas: &[Persona],
    models: &[String],
) -> Result<Vec<TrialPlan>, DesignError> {
    let between = spec.factors_with(FactorRole::Between);
    if between.is_empty() {
        return Err(DesignError::NoBetweenFactor);
    }
    let conditions = expand_conditions(&between);
    let mut plans = Vec::with_capacity(spec.arms().len() * models.len() * personas.len());
    for arm in spec.arms() {
        for model in models {
            let mut block_rng = seed::rng_for(spec.seed, &["blocks", arm.as_str(), model]);
            let mut block: Vec<usize> = Vec::new();
            for subject in subjects(arm, personas) {
                if block.is_empty() {
                    block = seed::permutation(&mut block_rng, conditions.len());
                    block.reverse();
                }
                let condition = conditions[block.pop().expect("refilled above")].clone();
                let mut rng = seed::rng_for(spec.seed, &["between", arm.as_str(), model, &subject.id]);
                let order = seed::permutation(&mut rng, spec.vignettes.len());
                let vignette_order: Vec<String> = order.iter().map(|&i| spec.vignettes[i].id.clone()).collect();
                let question_order = order
                    .iter()
                    .map(|&i| {
                        let v = &spec.vignettes[i];
                        (v.id.clone(), question_order(spec, v, &mut rng))
                    })
                    .collect();
                let trial_id = format!("{}-{}-{}-0", arm.short(), model, subject.id);
                plans.push(TrialPlan {
                    seed: seed::derive(spec.seed, &["trial", &trial_id]),
                    trial_id,
                    subject_id: subject.id,
                    persona_id: subject.persona.map(|p| p.id.clone()),
                    model_id: model.clone(),
                    arm,
                    condition,
                    session_vignettes: vignette_order.clone(),
                    vignette_order,
                    position: 0,
                    question_order,
                });
            }
        }
    }
    Ok(plans)
}

/// Plans with the planner matching the spec's design kind.
pub fn plan(spec: &ExperimentSpec, personas: &[Persona]) -> Result<Vec<TrialPlan>, DesignError> {
    match spec.design {
        DesignKind::Within => plan_within_subject(spec, personas, &spec.models),
        DesignKind::Between => plan_between_subject(spec, personas, &spec.models),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Renders one vignette with its questions as the user-facing text.
pub fn render_vignette(
    spec: &ExperimentSpec,
    vignette: &Vignette,
    condition: &Condition,
    questions: &[String],
) -> Result<String, DesignError> {
    let body = Template::parse(&vignette.body)
        .render(|slot| condition.get(slot).map(|level| vignette.level_text(slot, level)))
        .map_err(|TemplateError::UnknownSlot(slot)| DesignError::UnresolvedSlot {
            vignette: vignette.id.clone(),
            slot,
        })?;
    let mut text = body.trim_end().to_string();
    text.push_str("\n\nQuestions:\n");
    for (k, qid) in questions.iter().enumerate() {
        let q = spec.question(qid).ok_or_else(|| DesignError::InvalidSpec(format!("unknown question `{qid}`")))?;
        let hint = match &q.kind {
            AnswerKind::Binary { positive, negative } => format!(" ({positive} / {negative})"),
            AnswerKind::Scale { .. } if !q.scale_meaning.is_empty() => format!(" ({})", q.scale_meaning),
            AnswerKind::Scale { lo, hi } => format!(" ({lo} to {hi})"),
        };
        text.push_str(&format!("{}. [{}] {}{}\n", k + 1, q.display_label(), q.prompt, hint));
    }
    text.push('\n');
    text.push_str(&spec.response_instruction);
    Ok(text)
}

/// The ordered messages for one session: the persona preamble (if any) as a
/// system message, then one user message per session vignette.
pub fn render_trial_prompt(
    plan: &TrialPlan,
    spec: &ExperimentSpec,
    preamble: Option<&str>,
) -> Result<Vec<ChatMessage>, DesignError> {
    let mut messages = Vec::with_capacity(plan.session_vignettes.len() + 1);
    if let Some(preamble) = preamble {
        messages.push(ChatMessage::system(preamble));
    }
    for vid in &plan.session_vignettes {
        let vignette = spec.vignette(vid).ok_or_else(|| DesignError::PlanMismatch {
            trial: plan.trial_id.clone(),
            reason: format!("unknown vignette `{vid}`"),
        })?;
        let questions = plan.question_order.get(vid).ok_or_else(|| DesignError::PlanMismatch {
            trial: plan.trial_id.clone(),
            reason: format!("no question order for `{vid}`"),
        })?;
        messages.push(ChatMessage::user(render_vignette(spec, vignette, &plan.condition, questions)?));
    }
    Ok(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{sample_population, DemographicSpec};

    const SPEC: &str = r#"
name = "t"
design = "within"
seed = 11
models = ["m1", "m2"]

[[factors]]
name = "commonality"
levels = ["uncommon", "common"]
role = "within"

[[factors]]
name = "cost"
levels = ["low", "high"]
role = "within"

[[questions]]
id = "negligent"
prompt = "Was Pat negligent?"
kind = { type = "binary", positive = "negligent", negative = "not negligent" }

[[questions]]
id = "confidence"
prompt = "How confident are you?"
kind = { type = "scale", lo = 0, hi = 10 }

[[vignettes]]
id = "a"
body = "A: the precaution is {commonality}; it costs {cost}."
questions = ["negligent", "confidence"]

[[vignettes]]
id = "b"
body = "B: {commonality} / {cost}."
questions = ["negligent", "confidence"]

[[vignettes]]
id = "c"
body = "C: {commonality} / {cost}."
questions = ["negligent", "confidence"]

[[vignettes]]
id = "d"
body = "D: {commonality} / {cost}."
questions = ["negligent", "confidence"]
"#;

    fn spec() -> ExperimentSpec {
        ExperimentSpec::from_toml_str(SPEC).unwrap()
    }

    fn people(n: usize) -> Vec<Persona> {
        sample_population(&DemographicSpec::us_adults(), n).unwrap()
    }

    #[test]
    fn two_by_two_gives_four_conditions() {
        let s = spec();
        let c = expand_conditions(&s.factors);
        assert_eq!(c.len(), 4);
        assert_eq!(c[0]["commonality"], "uncommon");
        assert_eq!(c[0]["cost"], "low");
        assert_eq!(c[1]["cost"], "high");
        assert_eq!(c[3]["commonality"], "common");
    }

    #[test]
    fn single_level_factor_rejected() {
        assert!(matches!(
            Factor::within("x", &["only"]),
            Err(DesignError::InvalidFactor { .. })
        ));
        assert!(Factor::within("x", &["a", "a"]).is_err());
    }

    #[test]
    fn three_binary_factors_give_eight() {
        let fs = vec![
            Factor::within("a", &["0", "1"]).unwrap(),
            Factor::within("b", &["0", "1"]).unwrap(),
            Factor::within("c", &["0", "1"]).unwrap(),
        ];
        let all = expand_conditions(&fs);
        assert_eq!(all.len(), 8);
        let distinct: BTreeSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn within_counts() {
        let s = spec();
        let plans = plan_within_subject(&s, &people(3), &s.models).unwrap();
        assert_eq!(plans.len(), 3 * 2 * 4);
        let ids: BTreeSet<_> = plans.iter().map(|p| &p.trial_id).collect();
        assert_eq!(ids.len(), plans.len());
    }

    #[test]
    fn mismatch_names_both_counts() {
        let mut s = spec();
        s.vignettes.pop();
        match plan_within_subject(&s, &people(1), &s.models) {
            Err(DesignError::CombinationMismatch { combinations, vignettes }) => {
                assert_eq!((combinations, vignettes), (4, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn one_vignette_one_combination_identity() {
        let mut s = spec();
        s.factors.clear();
        s.vignettes.truncate(1);
        s.vignettes[0].body = "Plain text.".into();
        let plans = plan_within_subject(&s, &people(1), &s.models[..1]).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].vignette_order, vec!["a".to_string()]);
        assert_eq!(plans[0].question_order["a"], vec!["negligent", "confidence"]);
    }

    #[test]
    fn no_persona_first_message_is_vignette() {
        let s = spec();
        let plans = plan_within_subject(&s, &people(1), &s.models).unwrap();
        let msgs = render_trial_prompt(&plans[0], &s, None).unwrap();
        assert_eq!(msgs[0].role, Role::User);
        assert!(msgs[0].content.contains("the precaution is") || msgs[0].content.contains(" / "));
    }

    #[test]
    fn preamble_leads() {
        let s = spec();
        let plans = plan_within_subject(&s, &people(1), &s.models).unwrap();
        let msgs = render_trial_prompt(&plans[0], &s, Some("You are Pat.")).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0], ChatMessage::system("You are Pat."));
    }

    #[test]
    fn missing_level_is_unresolved_slot() {
        let s = spec();
        let mut plan = plan_within_subject(&s, &people(1), &s.models).unwrap().remove(0);
        plan.condition.remove("cost");
        match render_trial_prompt(&plan, &s, None) {
            Err(DesignError::UnresolvedSlot { slot, .. }) => assert_eq!(slot, "cost"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn slot_count_enforced() {
        let text = SPEC.replace("body = \"D: {commonality} / {cost}.\"", "body = \"D: {cost}.\"");
        assert!(matches!(
            ExperimentSpec::from_toml_str(&text),
            Err(DesignError::InvalidSpec(msg)) if msg.contains("exactly once")
        ));
    }

    #[test]
    fn empty_models_rejected() {
        let text = SPEC.replace("models = [\"m1\", \"m2\"]", "models = []");
        assert!(ExperimentSpec::from_toml_str(&text).is_err());
    }

    fn between_spec(levels: &[&str]) -> ExperimentSpec {
        let mut s = spec();
        s.design = DesignKind::Between;
        s.factors = vec![Factor::between("arm", levels).unwrap()];
        s.vignettes.truncate(1);
        s.vignettes[0].body = "Condition {arm}.".into();
        s.shuffle_questions = true;
        s.validate().unwrap();
        s
    }

    fn arm_sizes(plans: &[TrialPlan]) -> BTreeMap<(String, String), usize> {
        let mut sizes = BTreeMap::new();
        for p in plans {
            *sizes.entry((p.model_id.clone(), p.condition["arm"].clone())).or_default() += 1;
        }
        sizes
    }

    #[test]
    fn fifty_seven_split_29_28() {
        let s = between_spec(&["x", "y"]);
        let plans = plan_between_subject(&s, &people(57), &s.models).unwrap();
        for model in &s.models {
            let mut sizes: Vec<usize> = arm_sizes(&plans)
                .into_iter()
                .filter(|((m, _), _)| m == model)
                .map(|(_, n)| n)
                .collect();
            sizes.sort_unstable();
            assert_eq!(sizes, vec![28, 29]);
        }
    }

    #[test]
    fn four_subjects_four_conditions() {
        let s = between_spec(&["a", "b", "c", "d"]);
        let plans = plan_between_subject(&s, &people(4), &s.models[..1]).unwrap();
        let sizes = arm_sizes(&plans);
        assert_eq!(sizes.len(), 4);
        assert!(sizes.values().all(|&n| n == 1));
    }

    #[test]
    fn between_needs_between_factor() {
        let s = spec();
        assert!(matches!(
            plan_between_subject(&s, &people(2), &s.models),
            Err(DesignError::NoBetweenFactor)
        ));
    }

    #[test]
    fn replanning_is_idempotent() {
        let s = spec();
        let p = people(5);
        assert_eq!(plan(&s, &p).unwrap(), plan(&s, &p).unwrap());
    }
}
