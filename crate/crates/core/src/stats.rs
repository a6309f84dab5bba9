//! Composite scores, effect estimates, the persona-ablation alignment metric
//! and equivalence tests.
//!
//! Every bootstrap replicate draws from its own stream derived from the
//! caller's seed and the replicate index, so the rayon-parallel loop gives
//! the same result as a serial one.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("{what} = {value} is out of bounds")]
    OutOfBounds { what: &'static str, value: i64 },
    #[error("level `{level}` has {n} observations; at least {min} are needed")]
    TooFewObservations { level: String, n: usize, min: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("{0}")]
    InvalidParameter(String),
}

/// Signed confidence on [-10, 10].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct NegligenceScore(i8);

impl NegligenceScore {
    pub const MIN: i64 = -10;
    pub const MAX: i64 = 10;

    pub fn new(value: i64) -> Result<Self, StatsError> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Ok(NegligenceScore(value as i8))
        } else {
            Err(StatsError::OutOfBounds { what: "score", value })
        }
    }

    pub fn value(self) -> i64 {
        i64::from(self.0)
    }

    /// All 21 scores in order.
    pub fn all() -> impl Iterator<Item = NegligenceScore> {
        (Self::MIN..=Self::MAX).map(|v| NegligenceScore(v as i8))
    }
}

impl TryFrom<i64> for NegligenceScore {
    type Error = StatsError;
    fn try_from(value: i64) -> Result<Self, StatsError> {
        Self::new(value)
    }
}

impl From<NegligenceScore> for i64 {
    fn from(s: NegligenceScore) -> i64 {
        s.value()
    }
}

/// `+confidence` for a negligent verdict (1), `-confidence` otherwise (0).
pub fn composite_negligence_score(verdict: i64, confidence: i64) -> Result<NegligenceScore, StatsError> {
    if !(0..=1).contains(&verdict) {
        return Err(StatsError::OutOfBounds { what: "verdict", value: verdict });
    }
    if !(0..=10).contains(&confidence) {
        return Err(StatsError::OutOfBounds {
            what: "confidence",
            value: confidence,
        });
    }
    NegligenceScore::new(if verdict == 1 { confidence } else { -confidence })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n - 1 denominator).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Linear-interpolation quantile of sorted data (the common "type 7").
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn t_dist(df: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    /// mean(b) - mean(a).
    pub delta: f64,
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

/// Welch's unequal-variance t-test of `b` against `a`.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    for (name, xs) in [("from", a), ("to", b)] {
        if xs.len() < 2 {
            return Err(StatsError::TooFewObservations {
                level: name.into(),
                n: xs.len(),
                min: 2,
            });
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let delta = mean(b) - mean(a);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        let (t, p) = if delta == 0.0 { (0.0, 1.0) } else { (delta.signum() * f64::INFINITY, 0.0) };
        return Ok(WelchResult {
            delta,
            t,
            df: na + nb - 2.0,
            p,
        });
    }
    let t = delta / se2.sqrt();
    let df = se2.powi(2) / (va.powi(2) / (na - 1.0) + vb.powi(2) / (nb - 1.0));
    let p = (2.0 * t_dist(df).sf(t.abs())).min(1.0);
    Ok(WelchResult { delta, t, df, p })
}

fn check_bootstrap(reps: usize, level: f64) -> Result<(), StatsError> {
    if reps < 100 {
        return Err(StatsError::InvalidParameter(format!("bootstrap needs at least 100 resamples, got {reps}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::InvalidParameter(format!("confidence level {level} is not in (0, 1)")));
    }
    Ok(())
}

fn resample_mean(xs: &[f64], rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..xs.len() {
        total += xs[seed::index(rng, xs.len())];
    }
    total / xs.len() as f64
}

/// Bootstrap distribution of any statistic. Replicate `r` uses the stream
/// `(seed, "boot", r)`.
pub fn bootstrap_distribution<F>(reps: usize, seed: u64, statistic: F) -> Vec<f64>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
{
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng_for(seed, &["boot", &r.to_string()]);
            statistic(&mut rng)
        })
        .collect()
}

fn percentile_interval(mut stats: Vec<f64>, level: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    (quantile_sorted(&stats, alpha / 2.0), quantile_sorted(&stats, 1.0 - alpha / 2.0))
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], reps: usize, seed: u64, level: f64) -> Result<(f64, f64), StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    check_bootstrap(reps, level)?;
    let stats = bootstrap_distribution(reps, seed, |rng| resample_mean(values, rng));
    Ok(percentile_interval(stats, level))
}

/// Percentile bootstrap interval for `mean(b) - mean(a)`, resampling each
/// group independently.
pub fn bootstrap_diff_ci(a: &[f64], b: &[f64], reps: usize, seed: u64, level: f64) -> Result<(f64, f64), StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    check_bootstrap(reps, level)?;
    let stats = bootstrap_distribution(reps, seed, |rng| resample_mean(b, rng) - resample_mean(a, rng));
    Ok(percentile_interval(stats, level))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectMethod {
    /// Welch p, Welch t interval.
    Welch,
    /// Welch p, percentile bootstrap interval.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub factor: String,
    pub from: String,
    pub to: String,
    pub delta_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub n_from: usize,
    pub n_to: usize,
    pub method: EffectMethod,
}

impl EffectEstimate {
    pub fn stars(&self) -> &'static str {
        significance_label(self.p_value)
    }

    /// The same comparison read in the other direction.
    pub fn reversed(&self) -> EffectEstimate {
        EffectEstimate {
            from: self.to.clone(),
            to: self.from.clone(),
            delta_mean: -self.delta_mean,
            ci_low: -self.ci_high,
            ci_high: -self.ci_low,
            n_from: self.n_to,
            n_to: self.n_from,
            ..self.clone()
        }
    }
}

/// Scores for the two levels being compared.
#[derive(Debug, Clone, Copy)]
pub struct LevelScores<'a> {
    pub factor: &'a str,
    pub from: &'a str,
    pub to: &'a str,
    pub from_scores: &'a [f64],
    pub to_scores: &'a [f64],
}

/// `mean(to) - mean(from)` with a Welch p-value and a percentile bootstrap
/// interval. Two constant groups with equal means give p = 1 and [0, 0].
pub fn marginal_effect(scores: LevelScores<'_>, reps: usize, seed: u64, level: f64) -> Result<EffectEstimate, StatsError> {
    for (name, xs) in [(scores.from, scores.from_scores), (scores.to, scores.to_scores)] {
        if xs.len() < 2 {
            return Err(StatsError::TooFewObservations {
                level: name.to_string(),
                n: xs.len(),
                min: 2,
            });
        }
    }
    let welch = welch_test(scores.from_scores, scores.to_scores)?;
    let (mut low, mut high) = bootstrap_diff_ci(scores.from_scores, scores.to_scores, reps, seed, level)?;
    // Percentile bounds of a skewed resample can miss the point estimate.
    low = low.min(welch.delta);
    high = high.max(welch.delta);
    Ok(EffectEstimate {
        factor: scores.factor.to_string(),
        from: scores.from.to_string(),
        to: scores.to.to_string(),
        delta_mean: welch.delta,
        ci_low: low,
        ci_high: high,
        p_value: welch.p,
        n_from: scores.from_scores.len(),
        n_to: scores.to_scores.len(),
        method: EffectMethod::Bootstrap,
    })
}

/// Like [`marginal_effect`] with a Welch t interval instead of a bootstrap.
pub fn welch_effect(scores: LevelScores<'_>, level: f64) -> Result<EffectEstimate, StatsError> {
    let welch = welch_test(scores.from_scores, scores.to_scores)?;
    let se = (variance(scores.from_scores) / scores.from_scores.len() as f64
        + variance(scores.to_scores) / scores.to_scores.len() as f64)
        .sqrt();
    let half = if se == 0.0 { 0.0 } else { t_dist(welch.df).inverse_cdf(0.5 + level / 2.0) * se };
    Ok(EffectEstimate {
        factor: scores.factor.to_string(),
        from: scores.from.to_string(),
        to: scores.to.to_string(),
        delta_mean: welch.delta,
        ci_low: welch.delta - half,
        ci_high: welch.delta + half,
        p_value: welch.p,
        n_from: scores.from_scores.len(),
        n_to: scores.to_scores.len(),
        method: EffectMethod::Welch,
    })
}

/// `***` below 0.001, `**` below 0.01, `*` below 0.05, otherwise `ns`.
pub fn significance_label(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum AlignmentValue {
    Defined { value: f64 },
    Undefined { reason: String },
}

impl AlignmentValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            AlignmentValue::Defined { value } => Some(*value),
            AlignmentValue::Undefined { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub model_id: String,
    pub factor: String,
    pub ratio_persona: Option<f64>,
    pub ratio_no_persona: Option<f64>,
    pub alignment: AlignmentValue,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
}

impl AlignmentScore {
    pub fn value(&self) -> Option<f64> {
        self.alignment.value()
    }

    pub fn undefined(reason: &str) -> Self {
        AlignmentScore {
            model_id: String::new(),
            factor: String::new(),
            ratio_persona: None,
            ratio_no_persona: None,
            alignment: AlignmentValue::Undefined { reason: reason.into() },
            ci_low: None,
            ci_high: None,
            p_value: None,
        }
    }

    pub fn labelled(mut self, model_id: &str, factor: &str) -> Self {
        self.model_id = model_id.to_string();
        self.factor = factor.to_string();
        self
    }
}

/// Alignment from the two model-to-human ratios: `persona - no_persona`.
pub fn alignment_from_ratios(ratio_persona: f64, ratio_no_persona: f64) -> AlignmentScore {
    if !ratio_persona.is_finite() || !ratio_no_persona.is_finite() {
        return AlignmentScore::undefined("non-finite ratio");
    }
    AlignmentScore {
        ratio_persona: Some(ratio_persona),
        ratio_no_persona: Some(ratio_no_persona),
        alignment: AlignmentValue::Defined {
            value: ratio_persona - ratio_no_persona,
        },
        ..AlignmentScore::undefined("")
    }
}

/// `delta_persona / delta_human - delta_no_persona / delta_human`. Undefined
/// when the human delta is zero or any input is not finite.
pub fn alignment(delta_persona: f64, delta_no_persona: f64, delta_human: f64) -> AlignmentScore {
    if delta_human == 0.0 {
        return AlignmentScore::undefined("human delta is zero");
    }
    if ![delta_persona, delta_no_persona, delta_human].iter().all(|x| x.is_finite()) {
        return AlignmentScore::undefined("non-finite delta");
    }
    alignment_from_ratios(delta_persona / delta_human, delta_no_persona / delta_human)
}

/// Trial-level scores behind one arm's effect.
#[derive(Debug, Clone, Copy)]
pub struct ArmScores<'a> {
    pub from: &'a [f64],
    pub to: &'a [f64],
}

impl ArmScores<'_> {
    fn delta(&self) -> f64 {
        mean(self.to) - mean(self.from)
    }
}

/// [`alignment`] with a percentile bootstrap interval and a two-sided
/// bootstrap p-value for alignment = 0. The human delta is held fixed.
pub fn alignment_bootstrap(
    persona: ArmScores<'_>,
    no_persona: ArmScores<'_>,
    delta_human: f64,
    reps: usize,
    seed: u64,
    level: f64,
) -> Result<AlignmentScore, StatsError> {
    for xs in [persona.from, persona.to, no_persona.from, no_persona.to] {
        if xs.is_empty() {
            return Err(StatsError::EmptyInput);
        }
    }
    let mut score = alignment(persona.delta(), no_persona.delta(), delta_human);
    if score.value().is_none() {
        return Ok(score);
    }
    check_bootstrap(reps, level)?;
    let stats = bootstrap_distribution(reps, seed, |rng| {
        let dp = resample_mean(persona.to, rng) - resample_mean(persona.from, rng);
        let dn = resample_mean(no_persona.to, rng) - resample_mean(no_persona.from, rng);
        (dp - dn) / delta_human
    });
    let below = stats.iter().filter(|&&s| s <= 0.0).count() as f64 / reps as f64;
    let above = stats.iter().filter(|&&s| s >= 0.0).count() as f64 / reps as f64;
    let (low, high) = percentile_interval(stats, level);
    let value = score.value().expect("checked above");
    score.ci_low = Some(low.min(value));
    score.ci_high = Some(high.max(value));
    score.p_value = Some((2.0 * below.min(above)).min(1.0));
    Ok(score)
}

/// Mean of the defined alignment values, as a percentage.
pub fn aggregate_alignment(scores: &[AlignmentScore]) -> Option<f64> {
    let values: Vec<f64> = scores.iter().filter_map(AlignmentScore::value).collect();
    if values.is_empty() {
        None
    } else {
        Some(mean(&values) * 100.0)
    }
}

/// A reference interval `mean ± sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub sd: f64,
}

impl Band {
    pub fn low(&self) -> f64 {
        self.mean - self.sd
    }

    pub fn high(&self) -> f64 {
        self.mean + self.sd
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low() <= x && x <= self.high()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandMembership {
    WithinLay,
    WithinProfessional,
    Both,
    Neither,
}

impl BandMembership {
    pub fn classify(x: f64, lay: Option<&Band>, professional: Option<&Band>) -> Self {
        let in_lay = lay.is_some_and(|b| b.contains(x));
        let in_pro = professional.is_some_and(|b| b.contains(x));
        match (in_lay, in_pro) {
            (true, true) => BandMembership::Both,
            (true, false) => BandMembership::WithinLay,
            (false, true) => BandMembership::WithinProfessional,
            (false, false) => BandMembership::Neither,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BandMembership::WithinLay => "within-lay",
            BandMembership::WithinProfessional => "within-professional",
            BandMembership::Both => "both",
            BandMembership::Neither => "neither",
        }
    }
}

impl fmt::Display for BandMembership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquivalenceVerdict {
    Equivalent,
    NotShown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub model_id: String,
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

/// Reference bands used for membership.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Bands {
    pub lay: Option<Band>,
    pub professional: Option<Band>,
}

/// Two one-sided t-tests of `H0: mean <= reference - margin` and
/// `H0: mean >= reference + margin`. Equivalent iff both p-values are below
/// `alpha`.
pub fn tost_equivalence(
    scores: &[f64],
    reference: Band,
    margin: f64,
    alpha: f64,
    bands: Bands,
) -> Result<EquivalenceResult, StatsError> {
    if scores.len() < 2 {
        return Err(StatsError::TooFewObservations {
            level: "model".into(),
            n: scores.len(),
            min: 2,
        });
    }
    if !(reference.sd > 0.0) {
        return Err(StatsError::InvalidParameter(format!("reference sd must be positive, got {}", reference.sd)));
    }
    if !(margin > 0.0) {
        return Err(StatsError::InvalidParameter(format!("margin must be positive, got {margin}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidParameter(format!("alpha {alpha} is not in (0, 1)")));
    }
    let n = scores.len() as f64;
    let m = mean(scores);
    let s = sd(scores);
    let se = s / n.sqrt();
    let (lower, upper) = (reference.mean - margin, reference.mean + margin);
    let (p_lower, p_upper) = if se == 0.0 {
        (if m > lower { 0.0 } else { 1.0 }, if m < upper { 0.0 } else { 1.0 })
    } else {
        let t = t_dist(n - 1.0);
        (t.sf((m - lower) / se), t.cdf((m - upper) / se))
    };
    let verdict = if p_lower.max(p_upper) < alpha {
        EquivalenceVerdict::Equivalent
    } else {
        EquivalenceVerdict::NotShown
    };
    Ok(EquivalenceResult {
        model_id: String::new(),
        question_id: String::new(),
        n: scores.len(),
        model_mean: m,
        model_sd: s,
        reference_mean: reference.mean,
        reference_sd: reference.sd,
        margin,
        alpha,
        tost_p_lower: p_lower,
        tost_p_upper: p_upper,
        verdict,
        band_membership: BandMembership::classify(m, bands.lay.as_ref(), bands.professional.as_ref()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn composite_boundaries() {
        assert_eq!(composite_negligence_score(1, 10).unwrap().value(), 10);
        assert_eq!(composite_negligence_score(0, 10).unwrap().value(), -10);
        assert_eq!(composite_negligence_score(1, 0).unwrap().value(), 0);
        assert_eq!(composite_negligence_score(0, 0).unwrap().value(), 0);
        assert!(composite_negligence_score(2, 3).is_err());
        assert!(composite_negligence_score(1, 11).is_err());
        assert_eq!(NegligenceScore::all().count(), 21);
    }

    #[test]
    fn labels() {
        assert_eq!(significance_label(0.0005), "***");
        assert_eq!(significance_label(0.005), "**");
        assert_eq!(significance_label(0.03), "*");
        assert_eq!(significance_label(0.05), "ns");
    }

    #[test]
    fn identical_samples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let e = marginal_effect(
            LevelScores {
                factor: "f",
                from: "a",
                to: "b",
                from_scores: &xs,
                to_scores: &xs,
            },
            200,
            1,
            0.95,
        )
        .unwrap();
        assert_eq!(e.delta_mean, 0.0);
        assert!(e.p_value >= 0.99);
    }

    #[test]
    fn degenerate_constant_groups() {
        let xs = [3.0; 5];
        let e = marginal_effect(
            LevelScores {
                factor: "f",
                from: "a",
                to: "b",
                from_scores: &xs,
                to_scores: &xs,
            },
            200,
            1,
            0.95,
        )
        .unwrap();
        assert_eq!((e.p_value, e.ci_low, e.ci_high), (1.0, 0.0, 0.0));
    }

    #[test]
    fn bootstrap_constant_and_seeded() {
        assert_eq!(bootstrap_ci(&[2.5; 10], 500, 3, 0.95).unwrap(), (2.5, 2.5));
        let xs: Vec<f64> = (0..30).map(|i| (i * 7 % 11) as f64).collect();
        assert_eq!(bootstrap_ci(&xs, 500, 3, 0.95).unwrap(), bootstrap_ci(&xs, 500, 3, 0.95).unwrap());
        assert!(bootstrap_ci(&[], 500, 3, 0.95).is_err());
        assert!(bootstrap_ci(&xs, 50, 3, 0.95).is_err());
    }

    #[test]
    fn alignment_cases() {
        assert!(alignment(2.6, 2.6, 5.0).value().unwrap().abs() == 0.0);
        let a = alignment_from_ratios(0.91, 0.6).value().unwrap();
        assert!((a - 0.31).abs() <= f64::EPSILON);
        let u = alignment(1.0, 2.0, 0.0);
        assert!(matches!(u.alignment, AlignmentValue::Undefined { .. }));
        assert!(u.ratio_persona.is_none());
    }

    #[test]
    fn tost_basics() {
        let near = [5.0, 5.01, 4.99, 5.0, 5.0];
        let r = tost_equivalence(&near, Band { mean: 5.0, sd: 1.0 }, 0.5, 0.05, Bands::default()).unwrap();
        assert_eq!(r.verdict, EquivalenceVerdict::Equivalent);
        let far = [6.0, 6.01, 5.99, 6.0, 6.0];
        let r = tost_equivalence(&far, Band { mean: 5.0, sd: 1.0 }, 0.5, 0.05, Bands::default()).unwrap();
        assert_eq!(r.verdict, EquivalenceVerdict::NotShown);
        assert!(tost_equivalence(&near, Band { mean: 5.0, sd: 0.0 }, 0.5, 0.05, Bands::default()).is_err());
    }

    proptest! {
        #[test]
        fn alignment_antisymmetric(p in -20.0f64..20.0, n in -20.0f64..20.0, h in 0.1f64..10.0) {
            let a = alignment(p, n, h).value().unwrap();
            let b = alignment(n, p, h).value().unwrap();
            prop_assert_eq!(a, -b);
        }

        #[test]
        fn reversal_negates_delta(a in prop::collection::vec(-10.0f64..10.0, 3..20), b in prop::collection::vec(-10.0f64..10.0, 3..20)) {
            let forward = welch_test(&a, &b).unwrap();
            let back = welch_test(&b, &a).unwrap();
            prop_assert!((forward.delta + back.delta).abs() < 1e-12);
            prop_assert!((forward.p - back.p).abs() < 1e-12);
        }

        #[test]
        fn tost_monotone_in_margin(xs in prop::collection::vec(0.0f64..7.0, 3..30), m in 0.05f64..3.0, extra in 0.0f64..3.0) {
            let reference = Band { mean: 3.5, sd: 1.0 };
            let narrow = tost_equivalence(&xs, reference, m, 0.05, Bands::default()).unwrap();
            let wide = tost_equivalence(&xs, reference, m + extra, 0.05, Bands::default()).unwrap();
            if narrow.verdict == EquivalenceVerdict::Equivalent {
                prop_assert_eq!(wide.verdict, EquivalenceVerdict::Equivalent);
            }
        }
    }
}
