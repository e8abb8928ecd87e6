use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sgcap::cli::main_with_args;
use sgcap::config::TripletModeKind;
use sgcap::dataset::{Dataset, Featurizer, ImageRecord, Split, TripletRecord};
use sgcap::toy;
use sgcap_core::features::WordVectorTable;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("sgcap").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
        }
    }
    out
}

/// A toy corpus plus a config that trains for only a few epochs.
fn toy_corpus(dir: &Path, images: usize) -> (PathBuf, PathBuf) {
    assert_eq!(run(&["make-toy-data", "--out", s(dir), "--images", &images.to_string(), "--seed", "2"]), 0);
    let conf = dir.join("quick.conf");
    let base = fs::read_to_string(dir.join(toy::CONFIG_FILE)).unwrap();
    fs::write(&conf, base + "phase1.max_epochs = 3\nphase2.epochs = 1\nvse.epochs = 2\n").unwrap();
    (dir.join(toy::DATASET_FILE), conf)
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.jsonl");
    let out = tmp.path().join("out");
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["train-xe", "--out", s(&out)]), 2);
    assert_eq!(run(&["evaluate", "--dataset", s(&missing)]), 2);
    assert_eq!(run(&["train-xe", "--dataset", s(&missing), "--out", s(&out), "--config", "/no/such.conf"]), 2);
    let args = ["train-scst", "--dataset", s(&missing), "--checkpoint", "x", "--out", s(&out), "--alpha", "1.5"];
    assert_eq!(run(&args), 2);
    assert_eq!(run(&["train-xe", "--dataset", s(&missing), "--out", s(&out)]), 1);
}

#[test]
fn toy_data_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, seed) in dirs.iter().zip(["7", "7", "8"]) {
        assert_eq!(run(&["make-toy-data", "--out", s(d), "--images", "20", "--seed", seed]), 0);
    }
    let (a, b, c) = (files(&dirs[0]), files(&dirs[1]), files(&dirs[2]));
    assert_eq!(a.len(), 20 + 3);
    assert_eq!(a, b);
    assert_ne!(a[Path::new(toy::DATASET_FILE)], c[Path::new(toy::DATASET_FILE)]);

    let ds = Dataset::load(&dirs[0].join(toy::DATASET_FILE)).unwrap();
    assert!(ds.records.iter().all(|r| !r.triplets.is_empty() && r.triplets.len() <= 20));
    assert_eq!(ds.split(Split::Val).len() + ds.split(Split::Test).len(), 2);
}

#[test]
fn impossible_toy_request_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["make-toy-data", "--out", s(tmp.path()), "--vocab-size", "5"]), 2);
}

#[test]
fn featurizer_keeps_the_twenty_most_confident_triplets() {
    let mut table = WordVectorTable::new(2);
    table.insert("cat", vec![1.0, 0.0]).unwrap();
    table.insert("mat", vec![0.0, 1.0]).unwrap();
    let f = Featurizer::new(table, TripletModeKind::Mean, 20);
    let rec = ImageRecord {
        id: "x".into(),
        split: Split::Train,
        captions: vec!["a cat".into()],
        triplets: (0..25)
            .map(|i| TripletRecord {
                s: "cat".into(),
                p: "on".into(),
                o: "mat".into(),
                score: f64::from(i) / 25.0,
            })
            .collect(),
        feature_file: "x.sgaf".into(),
    };
    let rows = f.relationship_rows(&rec).unwrap();
    assert_eq!((rows.rows, rows.cols), (20, 2));
}

#[test]
fn training_captioning_and_evaluation_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (ds, conf) = toy_corpus(&data, 12);
    let root = tmp.path();

    let vocab = root.join("vocab.txt");
    assert_eq!(run(&["build-vocab", "--dataset", s(&ds), "--out", s(&vocab), "--config", s(&conf)]), 0);
    let vocab_text = fs::read_to_string(&vocab).unwrap();
    for line in vocab_text.lines() {
        let (word, count) = line.split_once(' ').unwrap();
        assert!(!word.is_empty() && count.parse::<usize>().unwrap() >= 1);
    }

    let xe = root.join("xe");
    assert_eq!(run(&["train-xe", "--dataset", s(&ds), "--out", s(&xe), "--config", s(&conf)]), 0);
    let log = fs::read_to_string(xe.join("train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i);
        assert!(l["loss"].as_f64().is_some() && l["val_cider"].as_f64().is_some() && l["lr"].as_f64().is_some());
        assert!(l.get("mean_reward").is_none());
    }
    let ck = xe.join("checkpoint.sgck");

    let caps = root.join("test_captions.jsonl");
    assert_eq!(run(&["caption", "--checkpoint", s(&ck), "--dataset", s(&ds), "--out", s(&caps), "--config", s(&conf)]), 0);
    let dataset = Dataset::load(&ds).unwrap();
    let test_ids: Vec<&str> = dataset.split(Split::Test).iter().map(|r| r.id.as_str()).collect();
    let written: Vec<Value> = fs::read_to_string(&caps).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(written.iter().map(|v| v["id"].as_str().unwrap()).collect::<Vec<_>>(), test_ids);
    assert!(written.iter().all(|v| v["caption"].is_string() && v.as_object().unwrap().len() == 2));

    let report = root.join("eval.json");
    assert_eq!(run(&["evaluate", "--dataset", s(&ds), "--checkpoint", s(&ck), "--out", s(&report), "--config", s(&conf)]), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider", "ciderD"] {
        assert!(r[key].as_f64().is_some(), "{key}");
    }
    assert_eq!(r["meteor"], "-");

    // Reference captions scored against themselves.
    let refs = root.join("refs.jsonl");
    let lines: String = dataset
        .split(Split::Test)
        .iter()
        .map(|rec| serde_json::json!({"id": rec.id, "caption": rec.captions[0]}).to_string() + "\n")
        .collect();
    fs::write(&refs, lines).unwrap();
    assert_eq!(run(&["evaluate", "--dataset", s(&ds), "--captions", s(&refs), "--out", s(&report)]), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["bleu1"], 1.0);
    assert_eq!(r["bleu4"], 1.0);
    assert_eq!(r["rougeL"], 1.0);

    // Cached relationship features give the same captions as computing them on the fly.
    let cache = root.join("rel");
    assert_eq!(run(&["featurize", "--dataset", s(&ds), "--out", s(&cache), "--config", s(&conf)]), 0);
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 12);
    let cached_conf = data.join("cached.conf");
    let text = fs::read_to_string(&conf).unwrap() + &format!("features.rel_cache = {}\n", cache.display());
    fs::write(&cached_conf, text).unwrap();
    let caps2 = root.join("cached_captions.jsonl");
    assert_eq!(
        run(&["caption", "--checkpoint", s(&ck), "--dataset", s(&ds), "--out", s(&caps2), "--config", s(&cached_conf)]),
        0
    );
    assert_eq!(fs::read(&caps).unwrap(), fs::read(&caps2).unwrap());

    let cov = root.join("coverage.json");
    assert_eq!(run(&["coverage-stats", "--dataset", s(&ds), "--out", s(&cov)]), 0);
    let stats: Vec<Value> = serde_json::from_str(&fs::read_to_string(&cov).unwrap()).unwrap();
    assert_eq!(stats.len(), 3);
    for st in &stats {
        let ratio = st["ratio"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ratio));
        let subject = st["subject"].as_array().unwrap();
        assert!(subject[0].as_u64() <= subject[1].as_u64());
    }
}

#[test]
fn scst_with_language_reward_logs_mean_reward() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, conf) = toy_corpus(&tmp.path().join("data"), 10);
    let xe = tmp.path().join("xe");
    let scst = tmp.path().join("scst");
    assert_eq!(run(&["train-xe", "--dataset", s(&ds), "--out", s(&xe), "--config", s(&conf)]), 0);
    let ck = xe.join("checkpoint.sgck");
    let base = ["train-scst", "--dataset", s(&ds), "--checkpoint", s(&ck), "--out", s(&scst), "--config", s(&conf)];
    // The default reward needs a VSE checkpoint.
    assert_eq!(run(&base), 2);
    let mut args = base.to_vec();
    args.extend(["--reward", "cider"]);
    assert_eq!(run(&args), 0);
    let line: Value = serde_json::from_str(fs::read_to_string(scst.join("train_log.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(line["mean_reward"].as_f64().unwrap().is_finite());
    assert!(line.get("loss").is_none());
}

#[test]
fn grad_audit_writes_a_passing_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("audit.json");
    assert_eq!(run(&["grad-audit", "--out", s(&out), "--seed", "4"]), 0);
    let report: Vec<Value> = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.len(), 10);
    for e in &report {
        assert_eq!(e["passed"], true, "{e}");
        assert_eq!(e["seeds"].as_array().unwrap().len(), 3);
    }
}
