use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use duet_core::features::mdseq;
use duet_core::losses::read_log;
use duet_core::model::load_checkpoint;
use serde_json::Value;
use tempfile::TempDir;

fn duet() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_duet"));
    c.env_remove("DUET_DATA_DIR").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    duet().args(args).output().expect("spawn duet")
}

fn ok(args: &[&str]) -> Value {
    let o = run(args);
    assert!(o.status.success(), "duet {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

const SMALL: [&str; 8] = ["--set", "train.t=8", "--set", "train.batch_size=2", "--set", "eval.chunk=8", "--set", "eval.generations=2"];

/// A tiny dataset and a few training steps, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        ok(&["synth", "--out", s(&data), "--train", "3", "--test", "1", "--frames", "16", "--seed", "4"]);
        let run = dir.path().join("run");
        let manifest = data.join("manifest.json");
        let mut args = vec!["train", "--data", s(&manifest), "--steps", "3", "--out", s(&run)];
        args.extend(SMALL);
        ok(&args);
        Fixture { _dir: dir, data, run }
    })
}

fn train_into(out: &Path, extra: &[&str]) -> Value {
    let f = fixture();
    let manifest = f.data.join("manifest.json");
    let mut args = vec!["train", "--data", s(&manifest), "--steps", "3", "--out", s(out)];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args)
}

fn first_file(dir: &Path, suffix: &str) -> PathBuf {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().ends_with(suffix))
        .collect();
    v.sort();
    v.remove(0)
}

#[test]
fn training_writes_artifacts_and_is_deterministic() {
    let f = fixture();
    for name in ["config.json", "train_log.csv", "checkpoint.mdck", "eval.json", "eval.csv"] {
        assert!(f.run.join(name).exists(), "{name} missing");
    }
    let rows = read_log(std::fs::File::open(f.run.join("train_log.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    let again = TempDir::new().unwrap();
    train_into(again.path(), &[]);
    for name in ["train_log.csv", "eval.json"] {
        assert_eq!(std::fs::read(f.run.join(name)).unwrap(), std::fs::read(again.path().join(name)).unwrap(), "{name}");
    }
    let a = load_checkpoint(f.run.join("checkpoint.mdck")).unwrap();
    let b = load_checkpoint(again.path().join("checkpoint.mdck")).unwrap();
    assert_eq!(a.music_to_dance, b.music_to_dance);
    assert_eq!(a.dance_to_music, b.dance_to_music);
    assert_eq!(a.meta.step, 3);
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(f.run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["provenance"]["train.t"], "flag");
    assert_eq!(cfg["provenance"]["music_to_dance.d_model"], "default");
}

#[test]
fn disabled_terms_log_zero() {
    let dir = TempDir::new().unwrap();
    train_into(dir.path(), &["--no-gw", "--no-cycle"]);
    let rows = read_log(std::fs::File::open(dir.path().join("train_log.csv")).unwrap()).unwrap();
    for r in rows {
        assert_eq!(r.gw, 0.0);
        assert_eq!(r.dance_cycle, 0.0);
        assert_eq!(r.music_cycle, 0.0);
        assert!(r.dance_reconstruction > 0.0);
    }
}

#[test]
fn generation_is_seeded() {
    let f = fixture();
    let ck = f.run.join("checkpoint.mdck");
    let music = first_file(&f.data, "_music.mdseq");
    let dir = TempDir::new().unwrap();
    let gen = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&["generate", "--checkpoint", s(&ck), "--input", s(&music), "--direction", "music-to-dance", "--seed", seed, "--out", s(&out)]);
        std::fs::read(out).unwrap()
    };
    let a = gen("1", "a.mdseq");
    let b = gen("1", "b.mdseq");
    let c = gen("2", "c.mdseq");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let d = mdseq::decode_dance(&a).unwrap();
    assert_eq!(d.len(), mdseq::load_music(&music).unwrap().len());
}

#[test]
fn dance_to_music_emits_symbolic_frames() {
    let f = fixture();
    let ck = f.run.join("checkpoint.mdck");
    let dance = first_file(&f.data, "_dance.mdseq");
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.mdseq");
    let v = ok(&["generate", "--checkpoint", s(&ck), "--input", s(&dance), "--direction", "d2m", "--out", s(&out)]);
    assert_eq!(v["channels"], 13);
    let m = mdseq::load_music(&out).unwrap();
    assert!(m.is_symbolic());
    for t in 0..m.len() {
        assert!(m.beat(t) == 0.0 || m.beat(t) == 1.0);
    }
}

fn error_of(o: &Output) -> Value {
    assert!(o.stdout.is_empty());
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().expect("stderr has a line");
    serde_json::from_str(last).expect("stderr error is JSON")
}

#[test]
fn wrong_modality_is_an_input_error() {
    let f = fixture();
    let ck = f.run.join("checkpoint.mdck");
    let dance = first_file(&f.data, "_dance.mdseq");
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.mdseq");
    let o = run(&["generate", "--checkpoint", s(&ck), "--input", s(&dance), "--direction", "m2d", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_of(&o)["error"], "modality-mismatch");
    assert!(!out.exists());
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.mdck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = dir.path().join("o.mdseq");
    let o = run(&["generate", "--checkpoint", s(&junk), "--input", s(&junk), "--direction", "m2d", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_of(&o)["error"], "bad-magic");

    let missing = dir.path().join("nope.mdck");
    let o = run(&["generate", "--checkpoint", s(&missing), "--input", s(&junk), "--direction", "m2d", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(error_of(&o)["error"], "io");

    assert_eq!(run(&["generate", "--bogus"]).status.code(), Some(2));
    let o = run(&["config", "--set", "train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_of(&o)["error"], "invalid-config");
    let o = run(&["config", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_layers_record_provenance() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"seed": 5, "train": {"batch_size": 8}}"#).unwrap();
    let v = ok(&["config", "--config", s(&file), "--seed", "6"]);
    assert_eq!(v["config"]["seed"], 6);
    assert_eq!(v["config"]["train"]["batch_size"], 8);
    assert_eq!(v["provenance"]["seed"], "flag");
    assert_eq!(v["provenance"]["train.batch_size"], "file");
    let o = duet().args(["config"]).env("DUET_DATA_DIR", dir.path()).output().unwrap();
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["provenance"]["data.manifest"], "env");
    let paper = ok(&["config", "--preset", "paper"]);
    assert_eq!(paper["config"]["music_to_dance"]["d_model"], 512);
    assert_eq!(paper["config"]["train"]["t"], 75);
}

#[test]
fn eval_of_truth_against_itself() {
    let f = fixture();
    let dance = first_file(&f.data, "_dance.mdseq");
    let music = first_file(&f.data, "_music.mdseq");
    let v = ok(&[
        "eval", "--dance", s(&dance), "--dance", s(&dance), "--dance-truth", s(&dance), "--music", s(&music),
        "--music-truth", s(&music), "--key", "A minor",
    ]);
    assert!(v["frechet"].as_f64().unwrap().abs() < 1e-12);
    assert!(v["diversity"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(v["notes_accuracy"], 1.0);
    assert_eq!(v["sequences"].as_array().unwrap().len(), 1);
}

#[test]
fn eval_of_a_checkpoint() {
    let f = fixture();
    let ck = f.run.join("checkpoint.mdck");
    let manifest = f.data.join("manifest.json");
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("e.csv");
    let v = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&manifest), "--csv", s(&csv)]);
    assert_eq!(v["sequences"].as_array().unwrap().len(), 1);
    for k in ["frechet", "diversity", "beats_alignment", "notes_accuracy"] {
        assert!(v[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 2);
}

#[test]
fn gw_of_identical_inputs_is_near_zero() {
    let dir = TempDir::new().unwrap();
    let x = dir.path().join("x.json");
    std::fs::write(&x, "[[0.0, 0.0], [1.0, 0.0], [1.0, 2.0], [-1.0, 1.0]]").unwrap();
    let v = ok(&["gw", "--x", s(&x), "--y", s(&x)]);
    assert!(v["value"].as_f64().unwrap() < 1e-3);
    let plan = v["plan"].as_array().unwrap();
    assert_eq!(plan.len(), 4);
    for (i, row) in plan.iter().enumerate() {
        let total: f64 = row.as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((total - 0.25).abs() < 1e-6);
        assert!(row[i].as_f64().unwrap() > 0.2);
    }
    let y = dir.path().join("y.json");
    std::fs::write(&y, "[[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]]").unwrap();
    let o = run(&["gw", "--x", s(&x), "--y", s(&y)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn plot_writes_valid_svg_and_csv() {
    let f = fixture();
    let music = first_file(&f.data, "_music.mdseq");
    let dir = TempDir::new().unwrap();
    ok(&["plot", "--music", s(&music), "--truth", s(&music), "--out", s(dir.path())]);
    let svg = std::fs::read_to_string(dir.path().join("notes.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let csv = std::fs::read_to_string(dir.path().join("notes.csv")).unwrap();
    let frames = mdseq::load_music(&music).unwrap().len();
    assert_eq!(csv.lines().count(), frames + 1);
}
