use proptest::prelude::*;

use srct::design::{AnswerKind, ChatMessage, QuestionItem};
use srct::dispatch::{ChatRequest, Outcome, TranscriptRecord};
use srct::population::{sample_population, Attribute, DemographicSpec};
use srct::stats::{self, Band, BandMembership, LevelScores};
use srct::extraction::{InvalidReason, Validity};
use srct::{extraction, seed};

fn scale(id: &str, lo: i64, hi: i64) -> QuestionItem {
    QuestionItem {
        id: id.into(),
        prompt: String::new(),
        kind: AnswerKind::Scale { lo, hi },
        scale_meaning: String::new(),
        labels: vec![id.into()],
    }
}

fn transcript(text: String) -> TranscriptRecord {
    TranscriptRecord {
        trial_id: "t".into(),
        session_id: "s".into(),
        provider_id: "p".into(),
        request: ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("q")],
            temperature: 1.0,
            max_tokens: 1,
        },
        completion: text,
        requested_at_ms: 0,
        responded_at_ms: 0,
        attempts: 1,
        outcome: Outcome::Ok,
        error: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn population_is_seed_deterministic(seed in any::<u64>(), n in 1usize..40) {
        let spec = DemographicSpec::us_adults().with_seed(seed);
        let a = sample_population(&spec, n).unwrap();
        let b = sample_population(&spec, n).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        for p in &a {
            prop_assert!(p.check(&spec).is_ok());
            prop_assert!(spec.categories(Attribute::Gender).any(|c| c == p.attribute(Attribute::Gender)));
        }
    }

    #[test]
    fn derived_seeds_depend_on_every_label(seed in any::<u64>(), a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
        prop_assume!(a != b);
        prop_assert_ne!(seed::derive(seed, &[&a]), seed::derive(seed, &[&b]));
        prop_assert_ne!(seed::derive(seed, &[&a, &b]), seed::derive(seed, &[&b, &a]));
        prop_assert_eq!(seed::derive(seed, &[&a]), seed::derive(seed, &[&a]));
    }

    #[test]
    fn permutations_are_permutations(seed in any::<u64>(), n in 0usize..30) {
        let mut p = seed::permutation(&mut seed::rng(seed), n);
        p.sort();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn extracted_values_stay_in_range(text in "([ -~]{0,40}(fairness|Fairness: |[0-9]{1,2}|ten|out of)){0,4}", lo in 0i64..3, span in 1i64..10) {
        let q = scale("fairness", lo, lo + span);
        let r = extraction::extract_structured(&transcript(text), &[q]);
        match r.validity {
            Validity::Valid => prop_assert!((lo..=lo + span).contains(&r.answers["fairness"])),
            // Out-of-range values are kept for the audit trail.
            Validity::Invalid(InvalidReason::OutOfRange) => {
                prop_assert!(r.answers.values().any(|v| !(lo..=lo + span).contains(v)))
            }
            Validity::Invalid(_) => prop_assert!(r.answers.is_empty()),
        }
    }

    #[test]
    fn stated_scale_answers_are_found(v in 1i64..=7, filler in "[a-z ]{0,40}") {
        let text = format!("{filler}. Fairness: {v}");
        let r = extraction::extract_structured(&transcript(text), &[scale("fairness", 1, 7)]);
        prop_assert_eq!(r.answers.get("fairness"), Some(&v));
    }

    #[test]
    fn effect_reverses_cleanly(
        a in prop::collection::vec(-10.0f64..10.0, 3..20),
        b in prop::collection::vec(-10.0f64..10.0, 3..20),
        seed in any::<u64>(),
    ) {
        let fwd = stats::marginal_effect(LevelScores { factor: "f", from: "x", to: "y", from_scores: &a, to_scores: &b }, 100, seed, 0.95);
        let (Ok(fwd), Ok(w)) = (fwd, stats::welch_test(&b, &a)) else { return Ok(()) };
        prop_assert!(fwd.ci_low <= fwd.delta_mean && fwd.delta_mean <= fwd.ci_high);
        prop_assert!((fwd.delta_mean + w.delta).abs() < 1e-12);
        prop_assert!((fwd.p_value - w.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&fwd.p_value));
    }

    #[test]
    fn band_edges_are_inside(mean in -5.0f64..5.0, sd in 0.0f64..3.0) {
        let band = Band { mean, sd };
        prop_assert!(band.contains(band.low()) && band.contains(band.high()));
        prop_assert_eq!(BandMembership::classify(band.high(), Some(&band), None), BandMembership::WithinLay);
        prop_assert_eq!(BandMembership::classify(band.low(), None, Some(&band)), BandMembership::WithinProfessional);
    }

    #[test]
    fn quantiles_are_monotone(mut xs in prop::collection::vec(-100.0f64..100.0, 1..50), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        xs.sort_by(f64::total_cmp);
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let (a, b) = (stats::quantile_sorted(&xs, lo), stats::quantile_sorted(&xs, hi));
        prop_assert!(a <= b);
        prop_assert!(xs[0] <= a && b <= xs[xs.len() - 1]);
    }
}
