//! Human baseline tables.
//!
//! Two CSV layouts are accepted. Lines starting with `#` are comments.
//!
//! Summary layout, one row per statistic:
//!
//! ```text
//! kind,group,question,factor,from,to,mean,sd,n,delta
//! summary,lay,fairness,,,,4.2,1.7,56,
//! effect,lay,negligence_score,commonality,uncommon,common,,,,5.0
//! ```
//!
//! `summary` rows give a group's mean, SD and count for a question.
//! `effect` rows give a group's mean difference between two factor levels.
//!
//! Trial-level layout, one row per human answer:
//!
//! ```text
//! subject_id,group,question,condition,value
//! h001,lay,negligence_score,commonality=common;cost=low,6
//! ```
//!
//! Summaries and deltas are computed from trial-level rows on demand.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{self, Band};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: row {row}: {message}")]
    InvalidRow { path: String, row: usize, message: String },
    #[error("{path}: unrecognized header; expected the summary or trial-level layout")]
    UnknownLayout { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    Summary,
    Effect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub kind: RowKind,
    pub group: String,
    pub question: String,
    #[serde(default)]
    pub factor: Option<String>,
    #[serde(default)]
    pub from: Option<String>,
    #[serde(default)]
    pub to: Option<String>,
    #[serde(default)]
    pub mean: Option<f64>,
    #[serde(default)]
    pub sd: Option<f64>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub subject_id: String,
    pub group: String,
    pub question: String,
    /// `factor=level` pairs separated by `;`. May be empty.
    #[serde(default)]
    pub condition: String,
    pub value: f64,
}

impl TrialRow {
    fn level_of(&self, factor: &str) -> Option<&str> {
        self.condition
            .split(';')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| k.trim() == factor)
            .map(|(_, v)| v.trim())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Baseline {
    pub rows: Vec<BaselineRow>,
    pub trials: Vec<TrialRow>,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, BaselineError> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| BaselineError::Csv {
            path: path.display().to_string(),
            source,
        })
}

impl Baseline {
    /// Reads either layout, chosen by the header.
    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let shown = path.display().to_string();
        let csv_err = |source| BaselineError::Csv {
            path: shown.clone(),
            source,
        };
        let mut r = reader(path)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        let has = |name: &str| headers.iter().any(|h| h == name);
        let mut baseline = Baseline::default();
        if has("kind") {
            for (i, row) in r.deserialize::<BaselineRow>().enumerate() {
                let row = row.map_err(csv_err)?;
                let bad = |message: &str| BaselineError::InvalidRow {
                    path: shown.clone(),
                    row: i + 1,
                    message: message.into(),
                };
                match row.kind {
                    RowKind::Summary if row.mean.is_none() || row.sd.is_none() => {
                        return Err(bad("summary rows need mean and sd"))
                    }
                    RowKind::Summary if row.sd.is_some_and(|s| s < 0.0) => return Err(bad("sd is negative")),
                    RowKind::Effect if row.factor.is_none() || row.from.is_none() || row.to.is_none() || row.delta.is_none() => {
                        return Err(bad("effect rows need factor, from, to and delta"))
                    }
                    _ => {}
                }
                baseline.rows.push(row);
            }
        } else if has("value") && has("subject_id") {
            for row in r.deserialize::<TrialRow>() {
                baseline.trials.push(row.map_err(csv_err)?);
            }
        } else {
            return Err(BaselineError::UnknownLayout { path: shown });
        }
        Ok(baseline)
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        let err = |source| BaselineError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for row in &self.rows {
            w.serialize(row).map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))
    }

    /// Mean ± SD for a group's answers to a question.
    pub fn band(&self, group: &str, question: &str) -> Option<Band> {
        let row = self
            .rows
            .iter()
            .find(|r| r.kind == RowKind::Summary && r.group == group && r.question == question && r.factor.is_none());
        if let Some(r) = row {
            return Some(Band {
                mean: r.mean?,
                sd: r.sd?,
            });
        }
        let values: Vec<f64> = self
            .trials
            .iter()
            .filter(|t| t.group == group && t.question == question)
            .map(|t| t.value)
            .collect();
        (values.len() >= 2).then(|| Band {
            mean: stats::mean(&values),
            sd: stats::sd(&values),
        })
    }

    pub fn count(&self, group: &str, question: &str) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::Summary && r.group == group && r.question == question && r.factor.is_none())
            .and_then(|r| r.n)
            .or_else(|| {
                let n = self.trials.iter().filter(|t| t.group == group && t.question == question).count();
                (n > 0).then_some(n)
            })
    }

    /// The group's `mean(to) - mean(from)` for an outcome. Reversed effect
    /// rows are negated.
    pub fn delta(&self, group: &str, outcome: &str, factor: &str, from: &str, to: &str) -> Option<f64> {
        for r in self.rows.iter().filter(|r| r.kind == RowKind::Effect && r.group == group && r.question == outcome) {
            if r.factor.as_deref() != Some(factor) {
                continue;
            }
            match (r.from.as_deref(), r.to.as_deref()) {
                (Some(f), Some(t)) if f == from && t == to => return r.delta,
                (Some(f), Some(t)) if f == to && t == from => return r.delta.map(|d| -d),
                _ => {}
            }
        }
        let level = |l: &str| -> Vec<f64> {
            self.trials
                .iter()
                .filter(|t| t.group == group && t.question == outcome && t.level_of(factor) == Some(l))
                .map(|t| t.value)
                .collect()
        };
        let (a, b) = (level(from), level(to));
        (!a.is_empty() && !b.is_empty()).then(|| stats::mean(&b) - stats::mean(&a))
    }

    pub fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .rows
            .iter()
            .map(|r| r.group.clone())
            .chain(self.trials.iter().map(|t| t.group.clone()))
            .collect();
        groups.sort();
        groups.dedup();
        groups
    }

    /// Per-level trial scores, for resampling the human side.
    pub fn level_scores(&self, group: &str, outcome: &str, factor: &str) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in self.trials.iter().filter(|t| t.group == group && t.question == outcome) {
            if let Some(level) = t.level_of(factor) {
                out.entry(level.to_string()).or_default().push(t.value);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        std::fs::write(
            &path,
            "# note\nkind,group,question,factor,from,to,mean,sd,n,delta\n\
             summary,lay,fairness,,,,4.2,1.7,56,\n\
             effect,lay,score,commonality,uncommon,common,,,,5.0\n",
        )
        .unwrap();
        let b = Baseline::load(&path).unwrap();
        assert_eq!(b.band("lay", "fairness"), Some(Band { mean: 4.2, sd: 1.7 }));
        assert_eq!(b.count("lay", "fairness"), Some(56));
        assert_eq!(b.delta("lay", "score", "commonality", "uncommon", "common"), Some(5.0));
        assert_eq!(b.delta("lay", "score", "commonality", "common", "uncommon"), Some(-5.0));
        assert_eq!(b.delta("lay", "score", "cost", "low", "high"), None);
    }

    #[test]
    fn trial_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(
            &path,
            "subject_id,group,question,condition,value\n\
             a,lay,score,f=x,1\nb,lay,score,f=x,3\nc,lay,score,f=y,6\nd,lay,score,f=y,8\n",
        )
        .unwrap();
        let b = Baseline::load(&path).unwrap();
        assert_eq!(b.delta("lay", "score", "f", "x", "y"), Some(5.0));
        assert_eq!(b.band("lay", "score").unwrap().mean, 4.5);
    }

    #[test]
    fn unknown_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(Baseline::load(&path), Err(BaselineError::UnknownLayout { .. })));
    }
}
