use std::path::PathBuf;

use lowres_core::corpus::{humanize_count, CorpusManifest};
use lowres_core::databuild::{read_preferences, DatasetManifest};
use lowres_core::evalharness::{load_task_dir, run_suite, shots_for, TaskKind};
use lowres_core::model::{ModelConfig, Params, Positional};
use lowres_core::tokenizer::Vocab;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn corpus_manifest_totals() {
    let m = CorpusManifest::load(fixture("zelaihandi.toml")).unwrap();
    assert_eq!(m.entries.len(), 16);
    assert_eq!(humanize_count(m.totals.documents), "1.61M");
    assert_eq!(humanize_count(m.totals.words), "512M");
    assert_eq!(humanize_count(m.totals.tokens), "1.55B");
    assert!(m.entries.iter().all(|e| !e.license.is_empty()));
}

#[test]
fn instruction_dataset_rows() {
    let nr = DatasetManifest::load(fixture("no_robots_eu.toml")).unwrap().stats();
    assert_eq!((nr.count_label().as_str(), nr.avg_words), ("9.5K", 157.9));
    let so = DatasetManifest::load(fixture("slimorca_eu.toml")).unwrap().stats();
    assert_eq!((so.count_label().as_str(), so.avg_words), ("518K", 227.8));
}

#[test]
fn preference_example_parses() {
    let t = read_preferences(fixture("preference_example.jsonl")).unwrap();
    assert_eq!(t.len(), 1);
    assert!(t[0].validate().is_ok());
    assert_ne!(t[0].chosen, t[0].rejected);
}

#[test]
fn forced_model_is_perfect_on_fixture_tasks() {
    let tasks = load_task_dir(fixture("tasks")).unwrap();
    assert!(tasks.len() >= 5);
    assert!(tasks.iter().any(|t| t.kind == TaskKind::MinimalPair));
    for t in &tasks {
        assert_eq!(t.n_shot, shots_for(&t.name), "{}", t.name);
    }
    let v = Vocab::bytes_only();
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: v.size(),
        max_seq_len: 1024,
        positional: Positional::Rotary,
        seed: 0,
    };
    let a = v.encode("A")[0];
    let p = Params::always_predicting(&cfg, a, 20.0).unwrap();
    let report = run_suite(&p, &cfg, &v, &tasks, 7, "eu").unwrap();
    assert!(report.excluded.is_empty(), "{:?}", report.excluded);
    for r in &report.tasks {
        assert_eq!(r.accuracy, 100.0, "{}", r.name);
    }
    assert_eq!(report.average, 100.0);
}
