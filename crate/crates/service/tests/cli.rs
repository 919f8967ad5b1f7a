use std::path::Path;
use std::process::Command;

use refgame_core::checkpoint::CheckpointStore;
use refgame_core::context::read_contexts;
use refgame_core::synthetic::read_objects;
use refgame_service::agents::CheckpointAgents;
use refgame_service::engine::{ContextPool, Engine, LoggedRequest, Role, SessionRequest, Submission};

const TINY: &str = r#"
[world]
objects = 60
trials_per_game = 20

[split]
min_count = 1

[listener]
max_epochs = 2

[speaker]
max_epochs = 2
select_every = 1

[evaluation]
seeds = [1, 2]
samples = 3
alphas = [0.0, 1.0]
betas = [0.0, 1.0]
lesion_fractions = [0.0, 0.5]

[service]
samples = 3
"#;

fn refgame(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_refgame"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir.join("w"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "refgame {args:?} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn pipeline_verbs_chain_through_the_work_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let w = dir.join("w");

    assert!(refgame(dir, &["synth-world"]).contains("60 objects"));
    assert!(w.join("world/renders/obj0000.svg").exists());
    refgame(dir, &["preprocess"]);
    refgame(dir, &["train-listener", "--id", "lis"]);
    refgame(dir, &["train-speaker", "--id", "spk", "--selector", "lis"]);
    assert!(refgame(dir, &["evaluate", "--listener", "lis"]).contains("overall"));
    assert!(refgame(dir, &["evaluate", "--speaker", "spk", "--evaluator", "lis", "--internal", "lis"]).contains("2 seeds"));
    assert!(refgame(dir, &["sweep", "--speaker", "spk", "--internal", "lis", "--evaluator", "lis"]).contains("best alpha"));
    assert!(refgame(dir, &["pmi", "--min-count", "1"]).contains("pmi"));
    let world = w.join("world");
    assert!(refgame(dir, &["lesion", "--parts", "--listener", "lis", "--world", world.to_str().unwrap()]).contains("Mentioned"));
    refgame(dir, &["generate", "--speaker", "spk", "--listener", "lis"]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(w.join("generated/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["utterances"], 360);

    // Play a short session against the trained checkpoints, then replay and ingest it.
    let objects = read_objects(&world.join("objects.jsonl")).unwrap();
    let contexts = read_contexts(&world.join("contexts.jsonl")).unwrap();
    let agents = CheckpointAgents::new(CheckpointStore::new(w.join("checkpoints")), 0.6, 1.0, 3);
    let data = dir.join("service");
    let engine = Engine::open(ContextPool::new(objects, contexts).unwrap(), Box::new(agents), Some(&data)).unwrap();
    let request = SessionRequest { role: Role::HumanListener, speaker_id: Some("spk".into()), listener_id: Some("lis".into()), rounds: Some(3), seed: 4 };
    engine.apply(LoggedRequest::CreateSession { session_id: "s".into(), created_at: 1, request }).unwrap();
    for round in 0..3 {
        let submission = Submission { round, choice: Some(round % 3), utterance: None, latency_ms: 10 };
        engine.apply(LoggedRequest::SubmitRound { session_id: "s".into(), submission }).unwrap();
    }
    let log = data.join("requests.jsonl");
    let into = dir.join("replayed");
    refgame(dir, &["replay", "--log", log.to_str().unwrap(), "--into", into.to_str().unwrap()]);
    for file in ["requests.jsonl", "store.json", "results.jsonl"] {
        assert_eq!(std::fs::read(data.join(file)).unwrap(), std::fs::read(into.join(file)).unwrap(), "{file}");
    }
    let table = refgame(dir, &["evaluate", "--records", data.join("results.jsonl").to_str().unwrap()]);
    assert!(table.lines().any(|l| l.starts_with("overall") && l.contains(" 3 ")), "{table}");
}

#[test]
fn unknown_config_keys_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[listener]\nhiden = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_refgame"))
        .args(["--config", tmp.path().join("bad.toml").to_str().unwrap(), "--out", tmp.path().join("w").to_str().unwrap(), "synth-world"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));
}
