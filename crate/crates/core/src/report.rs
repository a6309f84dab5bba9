//! Tables, figure data and the run manifest.
//!
//! CSV tables keep full precision so they read back exactly. Only the
//! human-readable `report.md` rounds, to three decimals with ties to even.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{
    significance_label, AlignmentScore, AlignmentValue, Band, BandMembership, EffectEstimate, EffectMethod,
    EquivalenceResult, EquivalenceVerdict,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to emit: {0}")]
    Empty(&'static str),
    #[error("figure `{figure}` needs both a lay and a professional band")]
    MissingBand { figure: String },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSource {
    Human,
    Model,
}

/// One row of the effect table. Human rows carry only the delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub source: RowSource,
    /// Model id, `all-models` for the pooled row, or the human group.
    pub model_id: String,
    pub arm: String,
    pub outcome: String,
    pub factor: String,
    pub from: String,
    pub to: String,
    pub delta_mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
    pub n_from: Option<usize>,
    pub n_to: Option<usize>,
    pub method: Option<EffectMethod>,
}

impl EffectRow {
    pub fn model(model_id: &str, arm: &str, outcome: &str, e: &EffectEstimate) -> Self {
        EffectRow {
            source: RowSource::Model,
            model_id: model_id.to_string(),
            arm: arm.to_string(),
            outcome: outcome.to_string(),
            factor: e.factor.clone(),
            from: e.from.clone(),
            to: e.to.clone(),
            delta_mean: e.delta_mean,
            ci_low: Some(e.ci_low),
            ci_high: Some(e.ci_high),
            p_value: Some(e.p_value),
            stars: significance_label(e.p_value).to_string(),
            n_from: Some(e.n_from),
            n_to: Some(e.n_to),
            method: Some(e.method),
        }
    }

    pub fn human(group: &str, outcome: &str, factor: &str, from: &str, to: &str, delta: f64) -> Self {
        EffectRow {
            source: RowSource::Human,
            model_id: group.to_string(),
            arm: String::new(),
            outcome: outcome.to_string(),
            factor: factor.to_string(),
            from: from.to_string(),
            to: to.to_string(),
            delta_mean: delta,
            ci_low: None,
            ci_high: None,
            p_value: None,
            stars: String::new(),
            n_from: None,
            n_to: None,
            method: None,
        }
    }

    /// The estimate behind a model row.
    pub fn estimate(&self) -> Option<EffectEstimate> {
        Some(EffectEstimate {
            factor: self.factor.clone(),
            from: self.from.clone(),
            to: self.to.clone(),
            delta_mean: self.delta_mean,
            ci_low: self.ci_low?,
            ci_high: self.ci_high?,
            p_value: self.p_value?,
            n_from: self.n_from?,
            n_to: self.n_to?,
            method: self.method?,
        })
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// Writes the effect table. Human rows go first; other rows keep their order.
pub fn emit_effect_table(rows: &[EffectRow], path: &Path) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty("effect table"));
    }
    let mut ordered: Vec<&EffectRow> = rows.iter().filter(|r| r.source == RowSource::Human).collect();
    ordered.extend(rows.iter().filter(|r| r.source == RowSource::Model));
    write_csv(path, &ordered)
}

pub fn read_effect_table(path: &Path) -> Result<Vec<EffectRow>, ReportError> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub model_id: String,
    pub outcome: String,
    pub factor: String,
    pub delta_human: Option<f64>,
    pub ratio_persona: Option<f64>,
    pub ratio_no_persona: Option<f64>,
    pub alignment: Option<f64>,
    pub status: String,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
}

impl AlignmentRow {
    pub fn new(outcome: &str, delta_human: Option<f64>, score: &AlignmentScore) -> Self {
        let status = match &score.alignment {
            AlignmentValue::Defined { .. } => "defined".to_string(),
            AlignmentValue::Undefined { reason } => format!("undefined: {reason}"),
        };
        AlignmentRow {
            model_id: score.model_id.clone(),
            outcome: outcome.to_string(),
            factor: score.factor.clone(),
            delta_human,
            ratio_persona: score.ratio_persona,
            ratio_no_persona: score.ratio_no_persona,
            alignment: score.value(),
            status,
            ci_low: score.ci_low,
            ci_high: score.ci_high,
            p_value: score.p_value,
        }
    }
}

pub fn emit_alignment_table(rows: &[AlignmentRow], path: &Path) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty("alignment table"));
    }
    write_csv(path, rows)
}

pub fn read_alignment_table(path: &Path) -> Result<Vec<AlignmentRow>, ReportError> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub model_id: String,
    pub arm: String,
    pub question_id: String,
    pub n: usize,
    pub model_mean: f64,
    pub model_sd: f64,
    pub reference_mean: f64,
    pub reference_sd: f64,
    pub margin: f64,
    pub alpha: f64,
    pub tost_p_lower: f64,
    pub tost_p_upper: f64,
    pub verdict: EquivalenceVerdict,
    pub band_membership: BandMembership,
}

impl EquivalenceRow {
    pub fn new(arm: &str, r: &EquivalenceResult) -> Self {
        EquivalenceRow {
            model_id: r.model_id.clone(),
            arm: arm.to_string(),
            question_id: r.question_id.clone(),
            n: r.n,
            model_mean: r.model_mean,
            model_sd: r.model_sd,
            reference_mean: r.reference_mean,
            reference_sd: r.reference_sd,
            margin: r.margin,
            alpha: r.alpha,
            tost_p_lower: r.tost_p_lower,
            tost_p_upper: r.tost_p_upper,
            verdict: r.verdict,
            band_membership: r.band_membership,
        }
    }
}

pub fn emit_equivalence_table(rows: &[EquivalenceRow], path: &Path) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty("equivalence table"));
    }
    write_csv(path, rows)
}

pub fn read_equivalence_table(path: &Path) -> Result<Vec<EquivalenceRow>, ReportError> {
    read_csv(path)
}

/// A model's bar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub model_id: String,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// A model's two bars, e.g. the two levels of a factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarPair {
    pub model_id: String,
    pub left: Bar,
    pub right: Bar,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Figure {
    /// One bar per model against lay and professional mean ± SD bands.
    BarsWithHumanBand {
        title: String,
        question: String,
        bars: Vec<Bar>,
        lay: Option<Band>,
        professional: Option<Band>,
    },
    /// Two bars per model, with an optional human reference difference.
    PairedBars {
        title: String,
        outcome: String,
        left_label: String,
        right_label: String,
        pairs: Vec<BarPair>,
        human_delta: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum FigureRecord {
    Value {
        figure: String,
        kind: String,
        question: String,
        model_id: String,
        value: f64,
        ci_low: Option<f64>,
        ci_high: Option<f64>,
        band_membership: BandMembership,
    },
    Band {
        figure: String,
        kind: String,
        question: String,
        group: String,
        mean: f64,
        sd: f64,
        low: f64,
        high: f64,
    },
    Pair {
        figure: String,
        kind: String,
        outcome: String,
        model_id: String,
        left_label: String,
        left_value: f64,
        left_ci_low: Option<f64>,
        left_ci_high: Option<f64>,
        right_label: String,
        right_value: f64,
        right_ci_low: Option<f64>,
        right_ci_high: Option<f64>,
        difference: f64,
        stars: String,
    },
    HumanReference {
        figure: String,
        kind: String,
        outcome: String,
        delta: f64,
    },
}

impl Figure {
    pub fn records(&self) -> Result<Vec<FigureRecord>, ReportError> {
        match self {
            Figure::BarsWithHumanBand {
                title,
                question,
                bars,
                lay,
                professional,
            } => {
                if bars.is_empty() {
                    return Err(ReportError::Empty("figure has no models"));
                }
                let (Some(lay), Some(pro)) = (lay, professional) else {
                    return Err(ReportError::MissingBand { figure: title.clone() });
                };
                let kind = "bars-with-human-band".to_string();
                let mut records: Vec<FigureRecord> = bars
                    .iter()
                    .map(|b| FigureRecord::Value {
                        figure: title.clone(),
                        kind: kind.clone(),
                        question: question.clone(),
                        model_id: b.model_id.clone(),
                        value: b.value,
                        ci_low: b.ci_low,
                        ci_high: b.ci_high,
                        band_membership: BandMembership::classify(b.value, Some(lay), Some(pro)),
                    })
                    .collect();
                for (group, band) in [("lay", lay), ("professional", pro)] {
                    records.push(FigureRecord::Band {
                        figure: title.clone(),
                        kind: kind.clone(),
                        question: question.clone(),
                        group: group.into(),
                        mean: band.mean,
                        sd: band.sd,
                        low: band.low(),
                        high: band.high(),
                    });
                }
                Ok(records)
            }
            Figure::PairedBars {
                title,
                outcome,
                left_label,
                right_label,
                pairs,
                human_delta,
            } => {
                if pairs.is_empty() {
                    return Err(ReportError::Empty("figure has no models"));
                }
                let kind = "paired-bars".to_string();
                let mut records: Vec<FigureRecord> = pairs
                    .iter()
                    .map(|p| FigureRecord::Pair {
                        figure: title.clone(),
                        kind: kind.clone(),
                        outcome: outcome.clone(),
                        model_id: p.model_id.clone(),
                        left_label: left_label.clone(),
                        left_value: p.left.value,
                        left_ci_low: p.left.ci_low,
                        left_ci_high: p.left.ci_high,
                        right_label: right_label.clone(),
                        right_value: p.right.value,
                        right_ci_low: p.right.ci_low,
                        right_ci_high: p.right.ci_high,
                        difference: p.right.value - p.left.value,
                        stars: p.stars.clone(),
                    })
                    .collect();
                if let Some(delta) = human_delta {
                    records.push(FigureRecord::HumanReference {
                        figure: title.clone(),
                        kind,
                        outcome: outcome.clone(),
                        delta: *delta,
                    });
                }
                Ok(records)
            }
        }
    }
}

/// Writes one JSON record per line. Returns the record count.
pub fn emit_figure_data(figure: &Figure, path: &Path) -> Result<usize, ReportError> {
    let records = figure.records()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).map_err(|source| ReportError::Json {
            path: path.display().to_string(),
            source,
        })?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(records.len())
}

pub fn read_figure_data(path: &Path) -> Result<Vec<FigureRecord>, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| ReportError::Json {
                path: path.display().to_string(),
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftwareInfo {
    pub name: String,
    pub version: String,
}

impl Default for SoftwareInfo {
    fn default() -> Self {
        SoftwareInfo {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecInfo {
    pub name: String,
    /// Where the spec was read from when the run started.
    pub source: String,
    /// SHA-256 of the spec file bytes.
    pub hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub population: u64,
    pub planning: u64,
    pub dispatch: u64,
    pub analysis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub provider_id: String,
    pub family: String,
    pub model: String,
    pub endpoint: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_concurrent: usize,
    pub requests_per_minute: Option<f64>,
    pub max_attempts: u32,
    pub backoff_base_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub personas: usize,
    pub plans: usize,
    pub transcripts: usize,
    pub responses: usize,
    pub valid: usize,
    pub rejected: BTreeMap<String, usize>,
    pub outcomes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub planned_ms: Option<u64>,
    pub dispatch_started_ms: Option<u64>,
    pub dispatch_finished_ms: Option<u64>,
    /// `virtual` under the mock provider, otherwise `system`.
    pub clock: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: SoftwareInfo,
    pub spec: SpecInfo,
    pub seeds: Seeds,
    pub mock: bool,
    pub parallelism: Option<usize>,
    pub temperature_override: Option<f64>,
    /// Replaces the spec's bootstrap replicate count when set.
    #[serde(default)]
    pub bootstrap_reps: Option<usize>,
    pub providers: Vec<ProviderInfo>,
    pub counts: Counts,
    pub timestamps: Timestamps,
    /// Modelling choices that the results depend on.
    pub disclosures: BTreeMap<String, String>,
    /// SHA-256 of each artifact in the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    /// `|plans| = |transcripts| >= |valid|`, once dispatch has run.
    pub fn counts_consistent(&self) -> bool {
        let c = &self.counts;
        (c.transcripts == 0 || c.plans == c.transcripts) && c.valid <= c.transcripts.max(c.responses)
    }
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<(), ReportError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Rounds to three decimals, ties to even, for display.
pub fn fmt3(x: f64) -> String {
    let r = (x * 1000.0).round_ties_even() / 1000.0;
    let s = format!("{r:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn opt3(x: Option<f64>) -> String {
    x.map(fmt3).unwrap_or_else(|| "n/a".into())
}

/// Everything `report.md` shows. All values come from the analysis stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub title: String,
    pub effects: Vec<EffectRow>,
    pub alignment: Vec<AlignmentRow>,
    pub aggregate_alignment_percent: Option<f64>,
    pub equivalence: Vec<EquivalenceRow>,
}

pub fn render_markdown(inputs: &ReportInputs, manifest: &RunManifest) -> String {
    let mut md = String::new();
    let c = &manifest.counts;
    md.push_str(&format!("# {}\n\n", inputs.title));
    md.push_str(&format!(
        "Spec `{}` (sha256 `{}`), seed {}, {} provider(s){}.\n\n",
        manifest.spec.name,
        manifest.spec.hash,
        manifest.seeds.run,
        manifest.providers.len(),
        if manifest.mock { ", mock" } else { "" }
    ));
    md.push_str("## Counts\n\n| plans | transcripts | responses | valid |\n|---|---|---|---|\n");
    md.push_str(&format!("| {} | {} | {} | {} |\n\n", c.plans, c.transcripts, c.responses, c.valid));
    if !c.rejected.is_empty() {
        md.push_str("Rejected: ");
        let parts: Vec<String> = c.rejected.iter().map(|(k, v)| format!("{k} {v}")).collect();
        md.push_str(&parts.join(", "));
        md.push_str(".\n\n");
    }
    if !inputs.effects.is_empty() {
        md.push_str("## Effects\n\n| source | model | arm | outcome | factor | from → to | delta | 95% CI | p | |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &inputs.effects {
            let ci = match (r.ci_low, r.ci_high) {
                (Some(l), Some(h)) => format!("[{}, {}]", fmt3(l), fmt3(h)),
                _ => "n/a".into(),
            };
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} → {} | {} | {} | {} | {} |\n",
                if r.source == RowSource::Human { "human" } else { "model" },
                r.model_id,
                r.arm,
                r.outcome,
                r.factor,
                r.from,
                r.to,
                fmt3(r.delta_mean),
                ci,
                opt3(r.p_value),
                r.stars
            ));
        }
        md.push('\n');
    }
    if !inputs.alignment.is_empty() {
        md.push_str("## Alignment\n\n| model | factor | ratio (persona) | ratio (no persona) | alignment | CI | p |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for r in &inputs.alignment {
            let ci = match (r.ci_low, r.ci_high) {
                (Some(l), Some(h)) => format!("[{}, {}]", fmt3(l), fmt3(h)),
                _ => "n/a".into(),
            };
            let value = match r.alignment {
                Some(a) => fmt3(a),
                None => r.status.clone(),
            };
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.model_id,
                r.factor,
                opt3(r.ratio_persona),
                opt3(r.ratio_no_persona),
                value,
                ci,
                opt3(r.p_value)
            ));
        }
        md.push_str(&format!(
            "\nAggregate alignment: {}\n\n",
            inputs
                .aggregate_alignment_percent
                .map(|a| format!("{}%", fmt3(a)))
                .unwrap_or_else(|| "undefined".into())
        ));
    }
    if !inputs.equivalence.is_empty() {
        md.push_str("## Equivalence\n\n| model | arm | question | mean | reference | margin | p lower | p upper | verdict | bands |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &inputs.equivalence {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} ± {} | {} | {} | {} | {} | {} |\n",
                r.model_id,
                r.arm,
                r.question_id,
                fmt3(r.model_mean),
                fmt3(r.reference_mean),
                fmt3(r.reference_sd),
                fmt3(r.margin),
                fmt3(r.tost_p_lower),
                fmt3(r.tost_p_upper),
                match r.verdict {
                    EquivalenceVerdict::Equivalent => "equivalent",
                    EquivalenceVerdict::NotShown => "not shown",
                },
                r.band_membership
            ));
        }
        md.push('\n');
    }
    md.push_str("## Disclosures\n\n");
    for (k, v) in &manifest.disclosures {
        md.push_str(&format!("- **{k}**: {v}\n"));
    }
    md.push_str("\nNumbers are rounded to three decimals, ties to even. The CSV tables hold full precision.\n");
    md
}
