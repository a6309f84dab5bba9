use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use srct::pipeline::{self, RunOptions};
use srct::report::{read_alignment_table, read_effect_table, read_equivalence_table, read_manifest, RowSource};
use srct::Error;

fn quick(seed: u64) -> RunOptions {
    RunOptions {
        bootstrap_reps: Some(100),
        ..RunOptions::mock(seed)
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn study3_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = pipeline::resolve_spec("study3").unwrap();
    let summary = pipeline::replicate(&loaded, &quick(11), dir.path()).unwrap();
    let m = &summary.manifest;
    assert!(m.counts_consistent());
    assert_eq!(m.counts.plans, 9 * 57);
    assert!(m.mock);

    let effects = read_effect_table(&dir.path().join(pipeline::EFFECTS_FILE)).unwrap();
    let pooled: Vec<_> = effects
        .iter()
        .filter(|r| r.source == RowSource::Model && r.model_id == pipeline::POOLED)
        .collect();
    assert_eq!(pooled.len(), 2);
    for row in pooled {
        assert!(row.delta_mean > 0.5, "{row:?}");
        assert!(row.p_value.unwrap() < 0.001);
        assert!(row.ci_low.unwrap() <= row.delta_mean && row.delta_mean <= row.ci_high.unwrap());
    }
    assert!(!dir.path().join(pipeline::EQUIVALENCE_FILE).exists());
    let report = fs::read_to_string(dir.path().join(pipeline::REPORT_FILE)).unwrap();
    assert!(report.contains(pipeline::POOLED));
}

#[test]
fn analyze_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = pipeline::resolve_spec("study2").unwrap();
    pipeline::replicate(&loaded, &quick(4), dir.path()).unwrap();
    let first = (read(dir.path(), pipeline::EQUIVALENCE_FILE), read(dir.path(), pipeline::ANALYSIS_FILE));
    let other = tempfile::tempdir().unwrap();
    pipeline::analyze(dir.path(), Some(other.path()), &quick(4)).unwrap();
    assert_eq!(first.0, read(other.path(), pipeline::EQUIVALENCE_FILE));
    pipeline::analyze(dir.path(), None, &quick(4)).unwrap();
    assert_eq!(first.1, read(dir.path(), pipeline::ANALYSIS_FILE));

    let rows = read_equivalence_table(&dir.path().join(pipeline::EQUIVALENCE_FILE)).unwrap();
    let arms: BTreeMap<&str, usize> = rows.iter().fold(BTreeMap::new(), |mut acc, r| {
        *acc.entry(r.arm.as_str()).or_default() += 1;
        acc
    });
    assert_eq!(arms.get("persona"), Some(&36));
    assert_eq!(arms.get("no-persona"), Some(&36));
}

#[test]
fn both_arms_give_alignment_rows() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = srct::fixtures::STUDY1.materialize(&dir.path().join("spec")).unwrap();
    let text = fs::read_to_string(&spec_path).unwrap();
    fs::write(&spec_path, text.replace(r#"persona_arm = "persona""#, r#"persona_arm = "both""#)).unwrap();
    let loaded = pipeline::resolve_spec(spec_path.to_str().unwrap()).unwrap();
    assert_eq!(loaded.source.spec.persona_arm, srct::design::PersonaArm::Both);
    let run = dir.path().join("run");
    let summary = pipeline::replicate(&loaded, &quick(8), &run).unwrap();
    let aggregate = summary.analysis.inputs.aggregate_alignment_percent.unwrap();
    assert!(aggregate.is_finite());
    let rows = read_alignment_table(&run.join(pipeline::ALIGNMENT_FILE)).unwrap();
    let common: Vec<_> = rows.iter().filter(|r| r.factor == "commonality").collect();
    assert_eq!(common.len(), 12);
    for r in &common {
        assert_eq!(r.delta_human, Some(5.0));
        assert!(r.alignment.is_some_and(f64::is_finite), "{r:?}");
    }
    // The human study reports no cost effect, so cost alignment is undefined.
    assert!(rows.iter().filter(|r| r.factor == "cost").all(|r| r.alignment.is_none()));
}

#[test]
fn extract_without_transcripts_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = pipeline::resolve_spec("study3").unwrap();
    pipeline::plan(&loaded, &quick(1), dir.path()).unwrap();
    assert!(matches!(pipeline::extract(dir.path()), Err(Error::MissingTranscripts(_))));
}

#[test]
fn reproduce_checks_the_spec_hash() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let loaded = pipeline::resolve_spec("study3").unwrap();
    pipeline::replicate(&loaded, &quick(21), &run).unwrap();

    let again = dir.path().join("again");
    pipeline::reproduce(&run.join(pipeline::MANIFEST_FILE), &again, None).unwrap();
    for name in [pipeline::PLANS_FILE, pipeline::TRANSCRIPTS_FILE, pipeline::RESPONSES_FILE, pipeline::EFFECTS_FILE] {
        assert_eq!(read(&run, name), read(&again, name), "{name}");
    }

    let spec = run.join(pipeline::SPEC_FILE);
    let mut text = fs::read_to_string(&spec).unwrap();
    text.push_str("\n# edited\n");
    fs::write(&spec, text).unwrap();
    let err = pipeline::reproduce(&run.join(pipeline::MANIFEST_FILE), &dir.path().join("third"), None).unwrap_err();
    assert!(matches!(err, Error::SpecHashMismatch { .. }));
}

#[test]
fn manifest_records_settings() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = pipeline::resolve_spec("study3").unwrap();
    let opts = RunOptions {
        temperature: Some(0.2),
        parallelism: Some(3),
        ..quick(5)
    };
    pipeline::replicate(&loaded, &opts, dir.path()).unwrap();
    let m = read_manifest(&dir.path().join(pipeline::MANIFEST_FILE)).unwrap();
    assert_eq!(m.seeds.run, 5);
    assert_eq!(m.temperature_override, Some(0.2));
    assert_eq!(m.parallelism, Some(3));
    assert_eq!(m.bootstrap_reps, Some(100));
    let transcripts = fs::read_to_string(dir.path().join(pipeline::TRANSCRIPTS_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(transcripts.lines().next().unwrap()).unwrap();
    assert_eq!(first["request"]["temperature"], 0.2);
}
