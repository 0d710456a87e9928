mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use baklava::alloc::{uniform_plan, AllocationPlan, PLAN_FORMAT};
use baklava::cli::{ConsistencyReport, EvalReport, CONSISTENCY_FORMAT, EVAL_FORMAT};
use baklava::io::{
    decode_tokens, decode_weights, encode_text, encode_weights, load_json, load_model, save_json,
    save_model, Corpus, RunManifest,
};
use baklava::model::init_model;
use baklava::profile::{ImportanceProfile, PROFILE_FORMAT};
use baklava::search::{SearchReport, SweepReport, SEARCH_FORMAT, SWEEP_FORMAT};
use baklava::{Error, ModelConfig};
use proptest::prelude::*;

use common::data_dir;

fn bklv(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bklv"))
        .args(args)
        .env("BKLV_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bklv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data(name: &str) -> PathBuf {
    data_dir().join(name)
}

#[test]
fn weights_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bklv");
    let model = init_model(&ModelConfig::default().with_seed(3)).unwrap();
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.weights(), model.weights());
    assert_eq!(std::fs::read(&path).unwrap(), encode_weights(&model));
}

#[test]
fn corrupt_weight_files_name_the_problem() {
    let model = init_model(&ModelConfig::default()).unwrap();
    let bytes = encode_weights(&model);
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = std::str::from_utf8(&bytes[..nl]).unwrap();

    let field_of = |b: Vec<u8>| match decode_weights(&b) {
        Err(Error::Format { field, .. }) => field,
        other => panic!("expected a format error, got {:?}", other.map(|_| ())),
    };
    assert_eq!(field_of(bytes[..bytes.len() - 4].to_vec()), "tensors");
    let bad_format = header.replace("bklv1", "bklv9");
    assert_eq!(field_of([bad_format.as_bytes(), &bytes[nl..]].concat()), "format");
    let no_seed = header.replace(",\"seed\":0", "");
    assert_eq!(field_of([no_seed.as_bytes(), &bytes[nl..]].concat()), "seed");
    assert_eq!(field_of(b"no newline".to_vec()), "header");
}

#[test]
fn artifacts_round_trip_and_check_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default();
    let plan = uniform_plan(&cfg, 0.37, 4).unwrap();
    let p = dir.path().join("plan.json");
    save_json(&plan, &p).unwrap();
    let back: AllocationPlan = load_json(&p, PLAN_FORMAT).unwrap();
    assert_eq!(back, plan);
    match load_json::<ImportanceProfile>(&p, PROFILE_FORMAT) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "format"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tokenizer_and_corpus() {
    assert_eq!(encode_text(b"ab"), vec![256, 97, 98]);
    assert_eq!(decode_tokens(&[256, 104, 105]), "hi");
    let c = Corpus::from_documents([&b"ab"[..], &b"cde"[..]]);
    assert_eq!(c.token_ids, vec![256, 97, 98, 256, 99, 100, 101]);
    assert_eq!(c.len(), 7);
}

proptest! {
    #[test]
    fn plans_survive_json(c in 0.02f64..=1.0, sinks in 0usize..8) {
        let cfg = ModelConfig::default();
        if let Ok(plan) = uniform_plan(&cfg, c, sinks) {
            let text = serde_json::to_string(&plan).unwrap();
            let back: AllocationPlan = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, plan);
        }
    }
}

#[test]
fn cli_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("model.bklv");
    let small = [
        "--layers", "2", "--q-heads", "4", "--kv-heads", "2", "--head-dim", "8", "--d-ff", "64",
        "--max-context", "64", "--seed", "5",
    ];
    let mut args = vec!["init-model", "--out", s(&model)];
    args.extend(small);
    ok(&args);
    assert!(RunManifest::path_for(&model).exists());

    let profile = d.join("profile.json");
    let (pt, pc) = (data("prompt_text.txt"), data("prompt_code.rs.txt"));
    let profile_args = [
        "profile", "--model", s(&model), "--prompt", s(&pt), "--prompt", s(&pc), "--out",
        s(&profile), "--heatmap",
    ];
    ok(&profile_args);
    let first = std::fs::read(&profile).unwrap();
    ok(&profile_args);
    assert_eq!(first, std::fs::read(&profile).unwrap(), "profile rerun differs");
    let prof: ImportanceProfile = load_json(&profile, PROFILE_FORMAT).unwrap();
    let maps = prof.per_token_similarity.unwrap();
    assert_eq!(maps[0].layers[0].len(), std::fs::read(&pt).unwrap().len() + 1);

    let plan = d.join("plan.json");
    let out = ok(&[
        "plan", "--model", s(&model), "--profile", s(&profile), "--strategy", "baklava",
        "--compression", "0.5", "--t", "0.7", "--r", "0.2", "--out", s(&plan),
    ]);
    assert!(out.contains("baklava plan"), "{out}");

    let corpus = data("corpus.txt");
    let eval = d.join("eval.json");
    let out = ok(&[
        "eval", "--model", s(&model), "--corpus", s(&corpus), "--plan", s(&plan), "--out",
        s(&eval),
    ]);
    assert!(out.starts_with("perplexity "), "{out}");
    let report: EvalReport = load_json(&eval, EVAL_FORMAT).unwrap();
    assert!(report.perplexity.is_finite());
    assert_eq!(report.memory.total_bytes, 2 * 8 * 2 * 128);

    let search = d.join("search.json");
    let heat = d.join("heat.txt");
    ok(&[
        "search", "--model", s(&model), "--profile", s(&profile), "--corpus", s(&corpus),
        "--compression", "0.3", "--t-grid", "0.6,0.8", "--r-grid", "0.1,0.4", "--out",
        s(&search), "--heatmap", s(&heat),
    ]);
    let sr: SearchReport = load_json(&search, SEARCH_FORMAT).unwrap();
    assert_eq!(sr.grid.len(), 4);
    assert!(std::fs::read_to_string(&heat).unwrap().contains("best:"));
    let manifest: RunManifest =
        serde_json::from_slice(&std::fs::read(RunManifest::path_for(&search)).unwrap()).unwrap();
    assert_eq!(manifest.outputs.len(), 2);
    assert!(manifest.verify().unwrap());

    let sweep = d.join("sweep.json");
    let out = ok(&[
        "sweep", "--model", s(&model), "--corpus", s(&corpus), "--compression", "0.25",
        "--window", "1", "--profile", s(&profile), "--out", s(&sweep),
    ]);
    assert!(out.contains("spearman"), "{out}");
    let sw: SweepReport = load_json(&sweep, SWEEP_FORMAT).unwrap();
    assert_eq!(sw.scores.len(), 2);

    let out = ok(&["generate", "--model", s(&model), "--plan", s(&plan), "--prompt", "hello", "--steps", "5"]);
    assert!(out.contains("steps 5"), "{out}");

    let cons = d.join("cons.json");
    ok(&[
        "consistency", "--model", s(&model), "--prompt", s(&pt), "--prompt", s(&pc), "--out",
        s(&cons),
    ]);
    let cr: ConsistencyReport = load_json(&cons, CONSISTENCY_FORMAT).unwrap();
    assert!(cr.per_layer_spearman.iter().all(|v| (-1.0..=1.0).contains(v)));

    // tampering is detected
    std::fs::write(&plan, b"{}").unwrap();
    let m: RunManifest =
        serde_json::from_slice(&std::fs::read(RunManifest::path_for(&eval)).unwrap()).unwrap();
    assert!(!m.verify().unwrap());
}

#[test]
fn floor_violation_exits_with_violation_list() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.bklv");
    ok(&["init-model", "--out", s(&model)]);
    let plan = dir.path().join("p.json");
    let out = bklv(&[
        "plan", "--model", s(&model), "--strategy", "uniform", "--compression", "0.001",
        "--out", s(&plan),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    let first = &v.as_array().unwrap()[0];
    assert_eq!(first["kind"], "below_floor");
    assert_eq!(first["layer"], 0);
    assert!(!plan.exists());

    let out = bklv(&["plan", "--model", s(&model), "--strategy", "bogus", "--compression", "0.5", "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(1));
    let out = bklv(&["eval", "--model", "/nonexistent", "--corpus", "x", "--plan", "y"]);
    assert_eq!(out.status.code(), Some(1));
}
