use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_videosaur"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../testdata").join(name)
}

fn schema(name: &str) -> jsonschema::JSONSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::JSONSchema::compile(&value).expect("schema compiles")
}

fn assert_valid(schema_name: &str, value: &Value) {
    let s = schema(schema_name);
    let msgs: Vec<String> = match s.validate(value) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{schema_name}: {msgs:?}\n{value:#}");
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A model small enough to train a few steps in well under a second.
const TINY: &[&str] = &[
    "--set=data.grid_rows=4",
    "--set=data.grid_cols=4",
    "--set=data.num_sprites=2",
    "--set=data.min_size=1",
    "--set=data.max_size=2",
    "--set=data.clip_len=4",
    "--set=segment_len=3",
    "--set=model.num_slots=4",
    "--set=model.slot_dim=8",
    "--set=model.input_mlp_hidden=8",
    "--set=model.predictor_hidden=16",
    "--set=model.decoder.hidden=16",
    "--set=model.decoder.alloc_hidden=16",
    "--set=features.width=8",
    "--set=batch_size=2",
    "--set=num_videos=8",
    "--set=total_steps=6",
    "--set=checkpoint_every=3",
    "--set=log_every=2",
    "--set=optim.warmup_steps=2",
];

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn targets_reproduce_golden_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.vstp");
    let o = run(&[
        "targets",
        "--features",
        data("two_patch.vsft").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--k",
        "1",
        "--tau",
        "0.075",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(data("two_patch_k1.vstp")).unwrap());

    let stats: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!(stats["num_videos"], 2);
    // One row of the second video has only negative similarities.
    assert_eq!(stats["degenerate_rows"], 1);
}

#[test]
fn targets_reject_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vsft");
    let mut bytes = fs::read(data("two_patch.vsft")).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&bad, &bytes).unwrap();
    let out = dir.path().join("t.vstp");
    let o = run(&["targets", "--features", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.vsft"), "{}", stderr(&o));

    let missing = dir.path().join("missing.vsft");
    let o = run(&["targets", "--features", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&[
        "targets",
        "--features",
        data("two_patch.vsft").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--k",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_name_the_key_or_file() {
    let o = run(&["config", "--set", "loss.tau=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.tau"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"model": {"num_slots": 4, "slots_dim": 3}}"#).unwrap();
    let o = run(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("slots_dim"), "{}", stderr(&o));
    assert!(stderr(&o).contains("c.json"), "{}", stderr(&o));

    let o = run(&["config", "--config", dir.path().join("none.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_output_matches_schema_and_round_trips() {
    let o = run(&["config", "--set", "loss.temperature=0.1", "--set", "model.decoder.kind=broadcast"]);
    let v = stdout_json(&o);
    assert_valid("config.schema.json", &v);
    assert_eq!(v["loss"]["temperature"], 0.1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    let again = stdout_json(&run(&["config", "--config", path.to_str().unwrap()]));
    assert_eq!(v, again);
}

#[test]
fn train_eval_render_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let o = train_tiny(&run_dir, &["--until", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run_dir.join("checkpoint.vsck");
    assert!(ckpt.exists());

    let o = train_tiny(&run_dir, &["--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = fs::read(&ckpt).unwrap();

    let straight = dir.path().join("straight");
    assert!(train_tiny(&straight, &[]).status.success());
    assert_eq!(resumed, fs::read(straight.join("checkpoint.vsck")).unwrap());

    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // Resuming under a different config names the differing key.
    let o = train_tiny(&run_dir, &["--resume", "--set=loss.temperature=0.2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.temperature"), "{}", stderr(&o));

    let ck = ckpt.to_str().unwrap();
    let v = stdout_json(&run(&["eval", "--checkpoint", ck, "--slots", "6", "--videos", "3"]));
    assert_valid("eval.schema.json", &v);
    assert_eq!(v["num_slots"], 6);
    assert_eq!(v["trained_slots"], 4);
    assert_eq!(v["step"], 6);
    for key in ["fg_ari_video", "mbo_video", "fg_ari_image", "mbo_image"] {
        assert!(v["metrics"][key].as_f64().unwrap().is_finite(), "{key}");
    }
    let again = stdout_json(&run(&["eval", "--checkpoint", ck, "--slots", "6", "--videos", "3"]));
    assert_eq!(v, again);

    let o = run(&["eval", "--checkpoint", ck, "--set", "loss.shift=0"]);
    assert_eq!(o.status.code(), Some(1));

    let img = dir.path().join("img");
    let o = run(&["render", "--checkpoint", ck, "--out", img.to_str().unwrap(), "--videos", "1", "--scale", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ppm = fs::read(img.join("video000_frame00_pred.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);
    let pgm = fs::read(img.join("video000_frame03_slot3.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
}

#[test]
fn corrupt_checkpoint_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("x.vsck");
    fs::write(&ck, b"VSCK\x01\x00").unwrap();
    let o = run(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x.vsck"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_numerical_abort() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(&dir.path().join("run"), &["--set=optim.peak_lr=1e200", "--set=optim.warmup_steps=0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bench_reports_slot_scaling() {
    let mixer = stdout_json(&run(&["bench", "--decoder", "mixer", "--slots", "4,32", "--reps", "15"]));
    assert_valid("bench.schema.json", &mixer);
    let broadcast = stdout_json(&run(&["bench", "--decoder", "broadcast", "--slots", "4,32", "--reps", "5"]));
    assert_valid("bench.schema.json", &broadcast);
    let ratio = |v: &Value, k: &str| v["ratio"][k].as_f64().unwrap();
    assert!(ratio(&mixer, "time") < 2.0, "{mixer:#}");
    assert!(ratio(&mixer, "flops") < 2.0, "{mixer:#}");
    assert!(ratio(&broadcast, "time") > 4.0, "{broadcast:#}");
    assert!(ratio(&broadcast, "flops") > 4.0, "{broadcast:#}");

    let o = run(&["bench", "--decoder", "transformer"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_feeds_the_targets_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("export");
    let mut args = vec!["export", "--out", out.to_str().unwrap(), "--videos", "2"];
    args.extend_from_slice(TINY);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let masks = fs::read(out.join("masks.vsmk")).unwrap();
    assert_eq!(&masks[..4], b"VSMK");
    assert_eq!(masks.len(), 4 + 4 + 12 + 2 * 4 * 16 * 2);

    let t = dir.path().join("t.vstp");
    let o = run(&[
        "targets",
        "--features",
        out.join("targets.vsft").to_str().unwrap(),
        "--out",
        t.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&t).unwrap();
    // Header plus [2 videos, 3 pairs, 16, 16] f32 values.
    assert_eq!(bytes.len(), 4 + 4 + 16 + 2 * 3 * 16 * 16 * 4);
}
