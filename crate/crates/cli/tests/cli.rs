use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dna_core::checkpoint;
use dna_core::config::RunConfig;
use dna_core::model::DnaModel;

fn dna() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dna"));
    c.env_remove("DNA_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    dna().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

const TRACE_LM: &str = r#"
seed = 4

[model]
d_embed = 16
d_mlp = 32
n_head = 2
n_backbone = 1
s_max = 9
k = 1
pool = { transformer-block = 4, identity = 1 }
task = { kind = "causal-lm", vocab = 16, context = 16 }

[train]
steps = 5
batch_size = 4
schedule = { kind = "constant", lr = 1e-3 }

[data]
kind = "periodic"
period = 8
length = 512

[trace]
sequences = 10
batch_size = 4
"#;

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = run(&["train", "--config", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.toml"), "{}", stderr(&o));
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "-c", s(&smoke_config()), "-O", "no_such_field=1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_field"));
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "-c", s(&smoke_config()), "--override", "steps=0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = RunConfig::load(&smoke_config(), &["steps=0".into()]).unwrap().config;
    let init = DnaModel::<f32>::new(cfg.model.clone(), cfg.model_seed()).unwrap();
    let saved: DnaModel<f32> = checkpoint::load(&out.join("checkpoint")).unwrap();
    assert!(saved.params == init.params);
    let resolved = std::fs::read_to_string(out.join("resolved.toml")).unwrap();
    assert!(resolved.contains("# override train.steps = 0"), "{resolved}");
    let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn smoke_training_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = run(&["train", "-c", s(&smoke_config()), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
    assert!(metrics.starts_with("step\tloss\t"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, seed) in [(&a, "5"), (&b, "6")] {
        let o = run(&["train", "-c", s(&smoke_config()), "--seed", seed, "-O", "steps=0", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let blob = |p: &Path| std::fs::read(p.join("checkpoint/params.bin")).unwrap();
    assert_ne!(blob(&a), blob(&b));
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = dna()
        .env("DNA_OUTPUT_ROOT", dir.path())
        .args(["train", "-c", s(&smoke_config()), "-O", "steps=0"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("train/checkpoint/manifest.json").exists());
}

fn train_trace_lm(dir: &Path) -> PathBuf {
    let cfg = dir.join("lm.toml");
    std::fs::write(&cfg, TRACE_LM).unwrap();
    let o = run(&["train", "-c", s(&cfg), "--out", s(&dir.join("train"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

#[test]
fn trace_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_trace_lm(dir.path());
    let ckpt = dir.path().join("train/checkpoint");
    let mut texts = Vec::new();
    for name in ["t1", "t2"] {
        let out = dir.path().join(name);
        let o = run(&["trace", "-c", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        texts.push(std::fs::read_to_string(out.join("trace.jsonl")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    let lines: Vec<&str> = texts[0].lines().collect();
    assert_eq!(lines.len(), 10);
    let mut ribbons = 0;
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["seq_id"], i as u64);
        for r in v["ribbons"].as_array().unwrap() {
            let steps = r.as_array().unwrap();
            assert_eq!(steps.len(), 8);
            assert!(steps.iter().all(|s| s.as_array().unwrap().len() == 1));
            ribbons += 1;
        }
    }
    assert_eq!(ribbons, 160);
}

#[test]
fn trace_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_trace_lm(dir.path());
    let ckpt = dir.path().join("train/checkpoint");
    let o = run(&["trace", "-c", s(&cfg), "-O", "model.k=2", "--checkpoint", s(&ckpt), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn analyze_is_reproducible_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_trace_lm(dir.path());
    let ckpt = dir.path().join("train/checkpoint");
    let tr = dir.path().join("tr");
    assert!(run(&["trace", "-c", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&tr)]).status.success());
    let trace = tr.join("trace.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["analyze", "--trace", s(&trace), "-c", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in [
        "rank_frequency.tsv",
        "effective_topk.tsv",
        "sequence_reuse.tsv",
        "compute_histogram.tsv",
        "flow_visits.tsv",
        "flow_transitions.tsv",
        "summary.json",
    ] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name}");
        assert!(!x.is_empty(), "{name}");
    }

    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"seq_id\": 2, oops";
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let o = run(&["analyze", "--trace", s(&bad), "--out", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.jsonl:3"), "{}", stderr(&o));
}

#[test]
fn dream_writes_images() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("t");
    assert!(run(&["train", "-c", s(&smoke_config()), "-O", "steps=0", "--out", s(&train)]).status.success());
    let out = dir.path().join("d");
    let o = run(&["dream", "-c", s(&smoke_config()), "--checkpoint", s(&train.join("checkpoint")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ppm = std::fs::read(out.join("dream.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
    let obj = std::fs::read_to_string(out.join("objective.tsv")).unwrap();
    assert_eq!(obj.lines().count(), 1 + 32);
}

#[test]
fn dream_needs_a_vision_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_trace_lm(dir.path());
    let o = run(&["dream", "-c", s(&cfg), "--checkpoint", s(&dir.path().join("train/checkpoint")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_filter_and_checkpoint_integrity() {
    let o = run(&["verify", "--filter", "gradient"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("gradient-integrity"), "{stdout}");
    assert_eq!(stdout.matches("[PASS]").count(), 1);

    let o = run(&["verify", "--filter", "no-such-criterion"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("t");
    assert!(run(&["train", "-c", s(&smoke_config()), "-O", "steps=0", "--out", s(&train)]).status.success());
    let blob = train.join("checkpoint/params.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&blob, bytes).unwrap();
    let o = run(&["verify", "--filter", "6", "--checkpoint", s(&train.join("checkpoint"))]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("[FAIL] checkpoint"), "{stdout}");
    assert!(stdout.to_lowercase().contains("sha256") || stdout.contains("checksum"), "{stdout}");
}
