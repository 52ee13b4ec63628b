use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use omni_forge::filter::completeness_request;
use omni_forge::manifest::validate_manifest;
use omni_forge::pipeline::asr_request;
use omni_forge::qa::qa_request;
use omni_forge::record::read_records;
use omni_forge::service::{record_failure, record_fixture};
use omni_forge::{
    mix_datasets, run_pipeline, Clients, FixtureClient, ForgeError, Manifest, MixRecipe, PipelineConfig, ServiceRole,
    Task, VideoRecord,
};
use serde::Deserialize;

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[derive(Deserialize)]
struct Replies {
    id: String,
    asr: Option<String>,
    filter: Option<String>,
    qa: Option<String>,
}

struct Fixtures {
    asr: FixtureClient,
    filter: FixtureClient,
    qa: FixtureClient,
}

impl Fixtures {
    fn new(dir: &Path) -> Self {
        Self {
            asr: FixtureClient::new(ServiceRole::Asr, dir),
            filter: FixtureClient::new(ServiceRole::FilterLlm, dir),
            qa: FixtureClient::new(ServiceRole::QaVlm, dir),
        }
    }

    fn clients(&self) -> Clients<'_> {
        Clients { asr: &self.asr, filter: &self.filter, qa: &self.qa }
    }
}

fn run(records: &[VideoRecord], seed: u64) -> Manifest {
    let fx = Fixtures::new(&golden().join("fixtures"));
    run_pipeline(records, &fx.clients(), &PipelineConfig::default(), seed).unwrap().0
}

/// Rewrites `fixtures/` from `replies.jsonl`. A reply starting with `!`
/// records a failure.
#[test]
#[ignore]
fn regenerate_fixtures() {
    let dir = golden().join("fixtures");
    let _ = std::fs::remove_dir_all(&dir);
    let records = read_records(golden().join("records.jsonl")).unwrap();
    let text = std::fs::read_to_string(golden().join("replies.jsonl")).unwrap();
    for line in text.lines() {
        let r: Replies = serde_json::from_str(line).unwrap();
        let rec = records.iter().find(|x| x.id == r.id).unwrap();
        let put = |req, reply: &str| match reply.strip_prefix('!') {
            Some(msg) => record_failure(&dir, &req, msg).unwrap(),
            None => record_fixture(&dir, &req, reply).unwrap(),
        };
        if let Some(a) = &r.asr {
            put(asr_request(rec), a);
        }
        let subtitle = rec.subtitle.clone().or(r.asr.clone()).unwrap_or_default();
        if let Some(f) = &r.filter {
            put(completeness_request(&subtitle), f);
        }
        if let Some(q) = &r.qa {
            put(qa_request(rec, &subtitle), q);
        }
    }
}

#[test]
fn verdicts_match_hand_computed_table() {
    let records = read_records(golden().join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 30);
    let manifest = run(&records, 7);
    validate_manifest(&manifest, &records).unwrap();
    let by_id: BTreeMap<&str, _> =
        manifest.entries.iter().filter(|e| e.task != Task::VideoAsr).map(|e| (e.id.as_str(), e)).collect();
    assert_eq!(by_id.len(), 30);

    let mut rows = csv::Reader::from_path(golden().join("expected.csv")).unwrap();
    let mut checked = 0;
    for row in rows.records() {
        let row = row.unwrap();
        let e = by_id[&row[0]];
        assert_eq!(e.task.as_str(), &row[1], "{}", &row[0]);
        match e.verdicts.last() {
            None => assert!(row[2].is_empty(), "{} has no verdicts", &row[0]),
            Some(v) => {
                let stage = serde_json::to_value(v.stage).unwrap();
                assert_eq!(stage.as_str().unwrap(), &row[2], "{}", &row[0]);
                assert_eq!(v.pass.to_string(), &row[3], "{}", &row[0]);
                assert_eq!(v.detail, &row[4], "{}", &row[0]);
            }
        }
        checked += 1;
    }
    assert_eq!(checked, 30);

    let qa = manifest.entries.iter().filter(|e| e.task == Task::VideoQa).count();
    let asr: Vec<_> = manifest.entries.iter().filter(|e| e.task == Task::VideoAsr).collect();
    assert_eq!(qa, 14);
    assert_eq!(asr.len(), qa);
    assert_eq!(by_id["g08"].subtitle.as_deref(), asr.iter().find(|e| e.id == "g08").unwrap().subtitle.as_deref());
    assert_eq!(manifest.header.counts["discarded"], 14);
    assert_eq!(manifest.header.counts["rejected"], 2);
}

#[test]
fn two_runs_are_byte_identical() {
    let records = read_records(golden().join("records.jsonl")).unwrap();
    let a = run(&records, 11).to_jsonl().unwrap();
    let b = run(&records, 11).to_jsonl().unwrap();
    assert_eq!(a, b);
    assert_eq!(Manifest::parse(&a).unwrap().to_jsonl().unwrap(), a);
}

#[test]
fn subtitle_fraction_is_seeded() {
    let records = read_records(golden().join("records.jsonl")).unwrap();
    let fx = Fixtures::new(&golden().join("fixtures"));
    let cfg = PipelineConfig { subtitle_fraction: "1/2".parse().unwrap(), ..Default::default() };
    let asr_ids = |seed| {
        let (m, _) = run_pipeline(&records, &fx.clients(), &cfg, seed).unwrap();
        m.entries.into_iter().filter(|e| e.task == Task::VideoAsr).map(|e| e.id).collect::<Vec<_>>()
    };
    assert_eq!(asr_ids(1).len(), 7);
    assert_eq!(asr_ids(1), asr_ids(1));
    assert_ne!(asr_ids(1), asr_ids(2));
}

#[test]
fn missing_fixture_surfaces_as_pipeline_failure() {
    let mut records = read_records(golden().join("records.jsonl")).unwrap();
    records[9].subtitle = Some("an unrecorded subtitle".into());
    let fx = Fixtures::new(&golden().join("fixtures"));
    let err = run_pipeline(&records, &fx.clients(), &PipelineConfig::default(), 0).unwrap_err();
    assert!(matches!(err, ForgeError::Service { .. }), "{err}");
}

#[test]
fn two_thirds_mix_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let n = 17_800;
    let entries = (0..n)
        .map(|i| omni_forge::ManifestEntry {
            id: format!("v{i:05}"),
            source: "academic".into(),
            subtitle: None,
            qa: Vec::new(),
            verdicts: Vec::new(),
            task: Task::VideoQa,
            instruction: None,
        })
        .collect();
    Manifest::new("curate", 0, entries).write(dir.path().join("academic.jsonl")).unwrap();
    let recipe_path = dir.path().join("mix.toml");
    std::fs::write(
        &recipe_path,
        "name = \"stage3\"\nseed = 4\n[[source]]\nname = \"academic\"\npath = \"academic.jsonl\"\nfraction = \"2/3\"\n",
    )
    .unwrap();
    let (recipe, manifests) = MixRecipe::load(&recipe_path).unwrap();
    let a = mix_datasets(&recipe, &manifests, recipe.seed).unwrap();
    assert_eq!(a.entries.len(), 2 * n / 3);
    assert_eq!(a.header.recipe, "stage3");
    let b = mix_datasets(&recipe, &manifests, recipe.seed).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
}
