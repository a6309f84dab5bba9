//! Synthetic persona populations.
//!
//! A [`DemographicSpec`] holds independent categorical marginals and the
//! age and IQ distributions. [`sample_population`] draws personas from it
//! deterministically, and [`render_persona_preamble`] turns a persona into
//! the roleplay preamble sent ahead of each vignette.
//!
//! Each persona draws from its own stream, derived from the spec seed and the
//! persona's index, so a population of `n` is a prefix of one of size `n + 1`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;
use crate::seed;
use crate::template::{Template, TemplateError};

const US_ADULTS_TOML: &str = include_str!("../data/us_adults.toml");
const NAMES_CSV: &str = include_str!("../data/names.csv");

pub const AGE_FLOOR: u32 = 18;
pub const AGE_CEILING: u32 = 100;
pub const IQ_FLOOR: i32 = 55;
pub const IQ_CEILING: i32 = 145;
const SUM_TOLERANCE: f64 = 1e-9;

/// Roleplay preamble used when a spec does not provide its own.
pub const DEFAULT_PREAMBLE: &str = "You are roleplaying as {name}. {last_name} is a {age} year old \
{race} {gender_noun}. Politically, {subject_pronoun} is {political_lean}. Personality description: \
{personality_text}\n\nFrom here on out, you will be roleplaying this character, answering from \
their own perspective, not your own. Simulate their knowledge, value, and beliefs.";

#[derive(Debug, Error)]
pub enum PopulationError {
    #[error("invalid demographic spec: {attribute}: {reason}")]
    InvalidSpec { attribute: String, reason: String },
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("preamble template: {0}")]
    Template(#[from] TemplateError),
    #[error("{path}: record {index}: {message}")]
    MalformedRecord {
        path: String,
        index: usize,
        message: String,
    },
    #[error("{path}: record {index}: field `{field}`: {message}")]
    InvalidField {
        path: String,
        index: usize,
        field: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("demographic spec {path}: {message}")]
    SpecParse { path: String, message: String },
}

/// The categorical persona attributes, in sampling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Gender,
    Race,
    PoliticalLean,
    Education,
    IncomeBracket,
    Employment,
    Homeownership,
    Religion,
    MaritalStatus,
}

impl Attribute {
    pub const ALL: [Attribute; 9] = [
        Attribute::Gender,
        Attribute::Race,
        Attribute::PoliticalLean,
        Attribute::Education,
        Attribute::IncomeBracket,
        Attribute::Employment,
        Attribute::Homeownership,
        Attribute::Religion,
        Attribute::MaritalStatus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Race => "race",
            Attribute::PoliticalLean => "political_lean",
            Attribute::Education => "education",
            Attribute::IncomeBracket => "income_bracket",
            Attribute::Employment => "employment",
            Attribute::Homeownership => "homeownership",
            Attribute::Religion => "religion",
            Attribute::MaritalStatus => "marital_status",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeParams {
    pub mean: f64,
    pub median: f64,
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqParams {
    pub mean: f64,
    pub sd: f64,
    pub min: i32,
    pub max: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicSpec {
    pub seed: u64,
    pub age: AgeParams,
    pub iq: IqParams,
    pub marginals: BTreeMap<Attribute, BTreeMap<String, f64>>,
}

impl DemographicSpec {
    /// The bundled US adult profile.
    pub fn us_adults() -> Self {
        toml::from_str(US_ADULTS_TOML).expect("bundled demographic profile parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PopulationError> {
        let spec: Self = toml::from_str(text).map_err(|e| PopulationError::SpecParse {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, PopulationError> {
        let text = std::fs::read_to_string(path).map_err(|source| PopulationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: Self = toml::from_str(&text).map_err(|e| PopulationError::SpecParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PopulationError> {
        let invalid = |attribute: &str, reason: String| PopulationError::InvalidSpec {
            attribute: attribute.to_string(),
            reason,
        };
        for attribute in Attribute::ALL {
            let Some(marginal) = self.marginals.get(&attribute) else {
                return Err(invalid(attribute.as_str(), "marginal missing".into()));
            };
            if marginal.is_empty() {
                return Err(invalid(attribute.as_str(), "no categories".into()));
            }
            for (label, p) in marginal {
                if !(0.0..=1.0).contains(p) {
                    return Err(invalid(
                        attribute.as_str(),
                        format!("probability {p} for `{label}` outside [0, 1]"),
                    ));
                }
            }
            let total: f64 = marginal.values().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(invalid(
                    attribute.as_str(),
                    format!("probabilities sum to {total}, not 1"),
                ));
            }
        }
        let age = &self.age;
        if !(AGE_FLOOR <= age.min && age.min < age.max && age.max <= AGE_CEILING) {
            return Err(invalid(
                "age",
                format!("bounds [{}, {}] must satisfy 18 <= min < max <= 100", age.min, age.max),
            ));
        }
        if !(age.median > 0.0 && age.mean >= age.median) {
            return Err(invalid(
                "age",
                "log-normal fit needs median > 0 and mean >= median".into(),
            ));
        }
        let iq = &self.iq;
        if !(IQ_FLOOR <= iq.min && iq.min < iq.max && iq.max <= IQ_CEILING) || !(iq.sd >= 0.0) {
            return Err(invalid(
                "iq",
                format!("bounds [{}, {}] must lie within [55, 145] with sd >= 0", iq.min, iq.max),
            ));
        }
        Ok(())
    }

    /// Log-normal (mu, sigma) whose median and mean match the age parameters.
    pub fn age_lognormal(&self) -> (f64, f64) {
        let mu = self.age.median.ln();
        let sigma = (2.0 * (self.age.mean / self.age.median).ln()).max(0.0).sqrt();
        (mu, sigma)
    }

    pub fn categories(&self, attribute: Attribute) -> impl Iterator<Item = &str> {
        self.marginals
            .get(&attribute)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub name: String,
    pub age: u32,
    pub gender: String,
    pub race: String,
    pub political_lean: String,
    pub education: String,
    pub income_bracket: String,
    pub employment: String,
    pub homeownership: String,
    pub religion: String,
    pub marital_status: String,
    pub iq: i32,
    pub personality_text: String,
}

impl Persona {
    pub fn attribute(&self, attribute: Attribute) -> &str {
        match attribute {
            Attribute::Gender => &self.gender,
            Attribute::Race => &self.race,
            Attribute::PoliticalLean => &self.political_lean,
            Attribute::Education => &self.education,
            Attribute::IncomeBracket => &self.income_bracket,
            Attribute::Employment => &self.employment,
            Attribute::Homeownership => &self.homeownership,
            Attribute::Religion => &self.religion,
            Attribute::MaritalStatus => &self.marital_status,
        }
    }

    fn attribute_mut(&mut self, attribute: Attribute) -> &mut String {
        match attribute {
            Attribute::Gender => &mut self.gender,
            Attribute::Race => &mut self.race,
            Attribute::PoliticalLean => &mut self.political_lean,
            Attribute::Education => &mut self.education,
            Attribute::IncomeBracket => &mut self.income_bracket,
            Attribute::Employment => &mut self.employment,
            Attribute::Homeownership => &mut self.homeownership,
            Attribute::Religion => &mut self.religion,
            Attribute::MaritalStatus => &mut self.marital_status,
        }
    }

    pub fn first_name(&self) -> &str {
        self.name.split_whitespace().next().unwrap_or(&self.name)
    }

    pub fn last_name(&self) -> &str {
        self.name.split_whitespace().last().unwrap_or(&self.name)
    }

    fn pronouns(&self) -> (&'static str, &'static str, &'static str, &'static str) {
        match self.gender.to_ascii_lowercase().as_str() {
            "female" | "woman" | "f" => ("woman", "she", "her", "her"),
            "male" | "man" | "m" => ("man", "he", "him", "his"),
            _ => ("person", "they", "them", "their"),
        }
    }

    /// Value for a template slot: any persona field, plus `first_name`,
    /// `last_name`, `gender_noun` and the three pronoun forms.
    pub fn slot(&self, name: &str) -> Option<String> {
        let (noun, subject, object, possessive) = self.pronouns();
        let value = match name {
            "id" => self.id.clone(),
            "name" => self.name.clone(),
            "age" => self.age.to_string(),
            "iq" => self.iq.to_string(),
            "personality_text" => self.personality_text.clone(),
            "first_name" => self.first_name().to_string(),
            "last_name" => self.last_name().to_string(),
            "gender_noun" => noun.to_string(),
            "subject_pronoun" => subject.to_string(),
            "object_pronoun" => object.to_string(),
            "possessive_pronoun" => possessive.to_string(),
            other => {
                let attribute = Attribute::ALL.into_iter().find(|a| a.as_str() == other)?;
                self.attribute(attribute).to_string()
            }
        };
        Some(value)
    }

    /// Checks the persona invariants. On failure returns the offending field.
    pub fn check(&self, spec: &DemographicSpec) -> Result<(), (String, String)> {
        if self.id.trim().is_empty() {
            return Err(("id".into(), "empty".into()));
        }
        if !(AGE_FLOOR..=AGE_CEILING).contains(&self.age) {
            return Err(("age".into(), format!("{} outside [18, 100]", self.age)));
        }
        if !(IQ_FLOOR..=IQ_CEILING).contains(&self.iq) {
            return Err(("iq".into(), format!("{} outside [55, 145]", self.iq)));
        }
        for attribute in Attribute::ALL {
            let value = self.attribute(attribute);
            let known = spec
                .marginals
                .get(&attribute)
                .is_some_and(|m| m.contains_key(value));
            if !known {
                return Err((
                    attribute.as_str().to_string(),
                    format!("`{value}` is not a declared category"),
                ));
            }
        }
        Ok(())
    }
}

struct NameTable {
    first: BTreeMap<(String, String), Vec<String>>,
    last: BTreeMap<String, Vec<String>>,
    any_first: Vec<String>,
    any_last: Vec<String>,
}

fn names() -> &'static NameTable {
    static TABLE: OnceLock<NameTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = NameTable {
            first: BTreeMap::new(),
            last: BTreeMap::new(),
            any_first: Vec::new(),
            any_last: Vec::new(),
        };
        let mut reader = csv::Reader::from_reader(NAMES_CSV.as_bytes());
        for row in reader.records() {
            let row = row.expect("bundled name table parses");
            let (kind, gender, race, name) = (&row[0], &row[1], &row[2], row[3].to_string());
            match kind {
                "first" => {
                    table
                        .first
                        .entry((gender.to_string(), race.to_string()))
                        .or_default()
                        .push(name.clone());
                    table.any_first.push(name);
                }
                _ => {
                    table.last.entry(race.to_string()).or_default().push(name.clone());
                    table.any_last.push(name);
                }
            }
        }
        table
    })
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, pool: &'a [String]) -> &'a str {
    &pool[seed::index(rng, pool.len())]
}

fn draw_category<R: Rng + ?Sized>(rng: &mut R, marginal: &BTreeMap<String, f64>) -> String {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last = None;
    for (label, p) in marginal {
        cumulative += p;
        if *p > 0.0 {
            last = Some(label);
            if u < cumulative {
                return label.clone();
            }
        }
    }
    // Rounding left u above the final cumulative sum.
    last.expect("validated marginal has mass").clone()
}

/// Draws `n` personas from `spec`. Deterministic in `(spec, n)`.
pub fn sample_population(spec: &DemographicSpec, n: usize) -> Result<Vec<Persona>, PopulationError> {
    if n == 0 {
        return Err(PopulationError::EmptyPopulation);
    }
    spec.validate()?;
    let (mu, sigma) = spec.age_lognormal();
    let age_dist = LogNormal::new(mu, sigma).map_err(|e| PopulationError::InvalidSpec {
        attribute: "age".into(),
        reason: e.to_string(),
    })?;
    let iq_dist = Normal::new(spec.iq.mean, spec.iq.sd).map_err(|e| PopulationError::InvalidSpec {
        attribute: "iq".into(),
        reason: e.to_string(),
    })?;
    let table = names();

    let personas = (0..n)
        .map(|i| {
            let mut rng = seed::rng_for(spec.seed, &["persona", &i.to_string()]);
            let mut persona = Persona {
                id: format!("P{:05}", i + 1),
                name: String::new(),
                age: 0,
                gender: String::new(),
                race: String::new(),
                political_lean: String::new(),
                education: String::new(),
                income_bracket: String::new(),
                employment: String::new(),
                homeownership: String::new(),
                religion: String::new(),
                marital_status: String::new(),
                iq: 0,
                personality_text: String::new(),
            };
            for attribute in Attribute::ALL {
                *persona.attribute_mut(attribute) = draw_category(&mut rng, &spec.marginals[&attribute]);
            }
            let age = age_dist.sample(&mut rng).round();
            persona.age = age.clamp(spec.age.min as f64, spec.age.max as f64) as u32;
            let iq = iq_dist.sample(&mut rng).round();
            persona.iq = iq.clamp(spec.iq.min as f64, spec.iq.max as f64) as i32;

            let first_pool = table
                .first
                .get(&(persona.gender.clone(), persona.race.clone()))
                .unwrap_or(&table.any_first);
            let last_pool = table.last.get(&persona.race).unwrap_or(&table.any_last);
            let first = pick(&mut rng, first_pool).to_string();
            let last = pick(&mut rng, last_pool);
            persona.name = format!("{first} {last}");
            persona.personality_text = compose_personality(&persona);
            persona
        })
        .collect();
    Ok(personas)
}

fn iq_descriptor(iq: i32) -> &'static str {
    match iq {
        ..=84 => "below-average",
        85..=115 => "average",
        _ => "above-average",
    }
}

/// Template-composed personality text built from the persona's attributes.
pub fn compose_personality(persona: &Persona) -> String {
    let (_, subject, _, possessive) = persona.pronouns();
    let subject_cap = capitalize(subject);
    let be = if subject == "they" { "are" } else { "is" };
    format!(
        "{first}, at {age}, is {marital} and has a {education} education ({education_label}). \
{subject_cap} {be} {employment} with household income in the {income} bracket and \
{home}. {possessive_cap} faith is {religion}, and {subject} {be} {lean} politically. \
An IQ of {iq} places {first} in the {iq_desc} range.",
        first = persona.first_name(),
        age = persona.age,
        marital = persona.marital_status.to_lowercase(),
        education = if persona.education.starts_with("Less") { "limited" } else { "formal" },
        education_label = persona.education.to_lowercase(),
        employment = persona.employment.to_lowercase(),
        income = persona.income_bracket,
        home = match persona.homeownership.as_str() {
            "Homeowner" => "owns a home".to_string(),
            "Renter" => "rents".to_string(),
            other => other.to_lowercase(),
        },
        possessive_cap = capitalize(possessive),
        religion = persona.religion,
        lean = persona.political_lean,
        iq = persona.iq,
        iq_desc = iq_descriptor(persona.iq),
    )
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Substitutes every slot of `template` from the persona.
pub fn render_persona_preamble(persona: &Persona, template: &str) -> Result<String, PopulationError> {
    Ok(Template::parse(template).render(|name| persona.slot(name))?)
}

pub fn save_population(path: &Path, personas: &[Persona]) -> Result<(), jsonl::JsonlError> {
    jsonl::write(path, personas)
}

/// Loads a population file and validates it against the bundled categories.
pub fn load_population(path: &Path) -> Result<Vec<Persona>, PopulationError> {
    load_population_with(path, &DemographicSpec::us_adults())
}

/// Loads a population file (JSON lines, or a single JSON array) and checks
/// every record against the persona invariants under `spec`'s categories.
pub fn load_population_with(path: &Path, spec: &DemographicSpec) -> Result<Vec<Persona>, PopulationError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| PopulationError::Io {
        path: shown.clone(),
        source,
    })?;
    let values: Vec<serde_json::Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| PopulationError::MalformedRecord {
            path: shown.clone(),
            index: 0,
            message: e.to_string(),
        })?
    } else {
        let mut values = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let value = serde_json::from_str(line).map_err(|e| PopulationError::MalformedRecord {
                path: shown.clone(),
                index: values.len(),
                message: e.to_string(),
            })?;
            values.push(value);
        }
        values
    };

    let mut seen = HashSet::new();
    let mut personas = Vec::with_capacity(values.len());
    for (index, value) in values.into_iter().enumerate() {
        let raw: RawPersona = serde_json::from_value(value).map_err(|e| PopulationError::MalformedRecord {
            path: shown.clone(),
            index,
            message: e.to_string(),
        })?;
        let persona = raw.into_persona();
        persona.check(spec).map_err(|(field, message)| PopulationError::InvalidField {
            path: shown.clone(),
            index,
            field,
            message,
        })?;
        if !seen.insert(persona.id.clone()) {
            return Err(PopulationError::InvalidField {
                path: shown,
                index,
                field: "id".into(),
                message: format!("duplicate id `{}`", persona.id),
            });
        }
        personas.push(persona);
    }
    log::info!("loaded {} personas from {shown}", personas.len());
    Ok(personas)
}

/// Accepts the canonical field names and the aliases used by externally
/// authored persona files.
#[derive(Deserialize)]
struct RawPersona {
    id: IdValue,
    name: String,
    age: i64,
    gender: String,
    race: String,
    #[serde(alias = "politics", alias = "political_affiliation", alias = "party")]
    political_lean: String,
    education: String,
    #[serde(alias = "income")]
    income_bracket: String,
    employment: String,
    #[serde(alias = "home_ownership", alias = "housing")]
    homeownership: String,
    religion: String,
    #[serde(alias = "marital")]
    marital_status: String,
    iq: i64,
    #[serde(alias = "personality", alias = "description")]
    personality_text: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdValue {
    Text(String),
    Number(i64),
}

impl RawPersona {
    fn into_persona(self) -> Persona {
        Persona {
            id: match self.id {
                IdValue::Text(s) => s,
                IdValue::Number(n) => n.to_string(),
            },
            name: self.name,
            // Out-of-range values saturate so the range check can report them.
            age: self.age.clamp(0, u32::MAX as i64) as u32,
            gender: self.gender,
            race: self.race,
            political_lean: self.political_lean,
            education: self.education,
            income_bracket: self.income_bracket,
            employment: self.employment,
            homeownership: self.homeownership,
            religion: self.religion,
            marital_status: self.marital_status,
            iq: self.iq.clamp(i32::MIN as i64, i32::MAX as i64) as i32,
            personality_text: self.personality_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryDeviation {
    pub category: String,
    pub target: f64,
    pub realized: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeReport {
    pub attribute: Attribute,
    pub categories: Vec<CategoryDeviation>,
    pub max_deviation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalReport {
    pub tolerance: f64,
    pub attributes: Vec<AttributeReport>,
}

impl MarginalReport {
    pub fn pass(&self) -> bool {
        self.attributes.iter().all(|a| a.pass)
    }

    pub fn attribute(&self, attribute: Attribute) -> Option<&AttributeReport> {
        self.attributes.iter().find(|a| a.attribute == attribute)
    }
}

/// Compares realized category shares with the spec's targets.
pub fn validate_marginals(population: &[Persona], spec: &DemographicSpec, tolerance: f64) -> MarginalReport {
    let n = population.len().max(1) as f64;
    let attributes = Attribute::ALL
        .into_iter()
        .map(|attribute| {
            let marginal = spec.marginals.get(&attribute).cloned().unwrap_or_default();
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for persona in population {
                *counts.entry(persona.attribute(attribute)).or_default() += 1;
            }
            let labels: BTreeSet<&str> = marginal
                .keys()
                .map(String::as_str)
                .chain(counts.keys().copied())
                .collect();
            let categories: Vec<CategoryDeviation> = labels
                .into_iter()
                .map(|label| {
                    let target = marginal.get(label).copied().unwrap_or(0.0);
                    let realized = counts.get(label).copied().unwrap_or(0) as f64 / n;
                    CategoryDeviation {
                        category: label.to_string(),
                        target,
                        realized,
                        deviation: (realized - target).abs(),
                    }
                })
                .collect();
            let max_deviation = categories.iter().map(|c| c.deviation).fold(0.0, f64::max);
            AttributeReport {
                attribute,
                categories,
                max_deviation,
                pass: max_deviation <= tolerance,
            }
        })
        .collect();
    MarginalReport { tolerance, attributes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn female_only() -> DemographicSpec {
        let mut spec = DemographicSpec::us_adults();
        spec.marginals
            .insert(Attribute::Gender, BTreeMap::from([("female".to_string(), 1.0)]));
        spec
    }

    #[test]
    fn bundled_profile_is_valid() {
        DemographicSpec::us_adults().validate().unwrap();
    }

    #[test]
    fn degenerate_gender_marginal() {
        let people = sample_population(&female_only(), 3).unwrap();
        assert_eq!(people.len(), 3);
        assert!(people.iter().all(|p| p.gender == "female"));
    }

    #[test]
    fn same_seed_same_people() {
        let spec = DemographicSpec::us_adults();
        let a = serde_json::to_vec(&sample_population(&spec, 50).unwrap()).unwrap();
        let b = serde_json::to_vec(&sample_population(&spec, 50).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = sample_population(&spec.clone().with_seed(1), 50).unwrap();
        assert_ne!(a, serde_json::to_vec(&c).unwrap());
    }

    #[test]
    fn prefix_stable() {
        let spec = DemographicSpec::us_adults();
        let small = sample_population(&spec, 10).unwrap();
        let large = sample_population(&spec, 20).unwrap();
        assert_eq!(small[..], large[..10]);
    }

    #[test]
    fn non_normalized_marginal_is_named() {
        let mut spec = DemographicSpec::us_adults();
        spec.marginals.get_mut(&Attribute::Religion).unwrap().insert("Jedi".into(), 0.3);
        match sample_population(&spec, 5) {
            Err(PopulationError::InvalidSpec { attribute, .. }) => assert_eq!(attribute, "religion"),
            other => panic!("expected invalid spec, got {other:?}"),
        }
    }

    #[test]
    fn zero_personas_rejected() {
        assert!(matches!(
            sample_population(&DemographicSpec::us_adults(), 0),
            Err(PopulationError::EmptyPopulation)
        ));
    }

    #[test]
    fn bad_age_bounds_rejected() {
        let mut spec = DemographicSpec::us_adults();
        spec.age.min = 17;
        assert!(matches!(spec.validate(), Err(PopulationError::InvalidSpec { attribute, .. }) if attribute == "age"));
    }

    #[test]
    fn lognormal_fit_matches_mean_and_median() {
        let (mu, sigma) = DemographicSpec::us_adults().age_lognormal();
        assert!((mu.exp() - 43.0).abs() < 1e-12);
        assert!(((mu + sigma * sigma / 2.0).exp() - 46.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_personas_satisfy_invariants() {
        let spec = DemographicSpec::us_adults();
        for p in sample_population(&spec, 500).unwrap() {
            p.check(&spec).unwrap();
            assert!(!crate::template::has_slot_marker(&p.personality_text));
        }
    }

    fn mart() -> Persona {
        Persona {
            id: "p1".into(),
            name: "Mart Alvarez".into(),
            age: 61,
            gender: "woman".into(),
            race: "Hispanic".into(),
            political_lean: "Lean Democrat".into(),
            education: "High school graduate".into(),
            income_bracket: "$75K to less than $150K".into(),
            employment: "Employed".into(),
            homeownership: "Homeowner".into(),
            religion: "Mainline Protestant".into(),
            marital_status: "Married".into(),
            iq: 102,
            personality_text: "Steady and warm.".into(),
        }
    }

    #[test]
    fn renders_sample_persona() {
        let out = render_persona_preamble(
            &mart(),
            "You are roleplaying as {name}. {name} is a {age} year old {race} {gender}.",
        )
        .unwrap();
        assert_eq!(out, "You are roleplaying as Mart Alvarez. Mart Alvarez is a 61 year old Hispanic woman.");
    }

    #[test]
    fn zero_slot_template_verbatim() {
        let t = "Answer as yourself.";
        assert_eq!(render_persona_preamble(&mart(), t).unwrap(), t);
    }

    #[test]
    fn unknown_slot_named() {
        let err = render_persona_preamble(&mart(), "{shoe_size}").unwrap_err();
        assert!(err.to_string().contains("shoe_size"));
    }

    #[test]
    fn default_preamble_resolves_and_ends_with_directive() {
        let out = render_persona_preamble(&mart(), DEFAULT_PREAMBLE).unwrap();
        assert!(!crate::template::has_slot_marker(&out));
        assert!(out.starts_with("You are roleplaying as Mart Alvarez. Alvarez is a 61 year old Hispanic woman."));
        assert!(out.ends_with("Simulate their knowledge, value, and beliefs."));
    }

    #[test]
    fn marginal_report_flags_deviation() {
        let spec = DemographicSpec::us_adults();
        let people = sample_population(&female_only(), 40).unwrap();
        let report = validate_marginals(&people, &spec, 0.02);
        let gender = report.attribute(Attribute::Gender).unwrap();
        assert!(!gender.pass);
        assert!((gender.max_deviation - 0.5).abs() < 1e-12);
        assert!(validate_marginals(&people, &spec, 1.0).pass());
    }
}
