use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
# small and quick
window = 24
horizon = 4
period = 24
dilations = 1,4
hidden = 8
state_width = 8
context_batch = 2
contexts_per_target = 1
conv_channels = 4
bptt = 24
epochs = 2
";

fn ctxrnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxrnn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ctxrnn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), CONFIG).unwrap();
    ok(dir.path(), &["synth", "--set", "n=4", "--set", "T=300", "--seed", "3", "--out", "p.csv"]);
    dir
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("s.txt"), "n = 3\nT = 120\ncoupling = 0>1:0.5,1>2\n").unwrap();
    ok(p, &["synth", "--spec", "s.txt", "--seed", "3", "--out", "a.csv"]);
    ok(p, &["synth", "--spec", "s.txt", "--seed", "3", "--out", "b.csv"]);
    let a = fs::read(p.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(p.join("b.csv")).unwrap());
    let stdout = ok(p, &["synth", "--spec", "s.txt", "--seed", "3"]).stdout;
    assert_eq!(stdout, a);
    let other = ok(p, &["synth", "--spec", "s.txt", "--seed", "4"]).stdout;
    assert_ne!(other, a);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 121);
    assert!(text.starts_with("timestamp,s0,s1,s2\n"));
}

#[test]
fn pipeline_runs_and_repeats_byte_for_byte() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["select-context", "--panel", "p.csv", "--config", "c.txt", "--out", "map.txt"]);
    let map = fs::read_to_string(p.join("map.txt")).unwrap();
    assert!(map.lines().any(|l| l.starts_with("GLOBAL: ")), "{map}");
    assert_eq!(map.lines().count(), 5);

    for name in ["m1.bin", "m2.bin"] {
        ok(
            p,
            &["train", "--panel", "p.csv", "--map", "map.txt", "--config", "c.txt", "--seed", "7", "--out", name, "--log", "log.csv"],
        );
    }
    let m1 = fs::read(p.join("m1.bin")).unwrap();
    assert_eq!(&m1[..4], b"CTXR");
    assert_eq!(m1, fs::read(p.join("m2.bin")).unwrap());
    let log = fs::read_to_string(p.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(p, &["predict", "--model", "m1.bin", "--panel", "p.csv", "--out", "f1.csv"]);
    let f2 = ok(p, &["predict", "--model", "m2.bin", "--panel", "p.csv"]).stdout;
    let f1 = fs::read(p.join("f1.csv")).unwrap();
    assert_eq!(f1, f2);
    let text = String::from_utf8(f1).unwrap();
    // header plus 4 series x 4 steps, starting one step past the panel
    assert_eq!(text.lines().count(), 17);
    assert!(text.lines().nth(1).unwrap().starts_with("2015-06-13T12:00:00,s0,"));

    let report = ok(p, &["evaluate", "--model", "m1.bin", "--panel", "p.csv"]).stdout;
    let json: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let rse = json["rse"].as_f64().unwrap();
    let corr = json["corr"].as_f64().unwrap();
    assert!(rse >= 0.0 && (-1.0..=1.0).contains(&corr));
    assert_eq!(json["per_horizon"].as_object().unwrap().len(), 4);
    assert_eq!(json["config"]["window"], "24");
}

#[test]
fn seed_flag_changes_the_model() {
    let dir = setup();
    let p = dir.path();
    let args = |seed: &'static str, out: &'static str| {
        ["train", "--panel", "p.csv", "--config", "c.txt", "--set", "epochs=1", "--seed", seed, "--out", out]
    };
    ok(p, &args("1", "a.bin"));
    ok(p, &args("2", "b.bin"));
    assert_ne!(fs::read(p.join("a.bin")).unwrap(), fs::read(p.join("b.bin")).unwrap());
}

#[test]
fn ablate_prints_three_variants() {
    let dir = setup();
    let p = dir.path();
    let out = ok(
        p,
        &["ablate", "--panel", "p.csv", "--config", "c.txt", "--set", "epochs=1", "--seed", "1", "--json", "r.json"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let modes: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(modes, ["full", "global-only", "no-context"]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
    assert_eq!(json[2]["config"]["mode"], "no-context");
}

#[test]
fn exit_codes() {
    let dir = setup();
    let p = dir.path();
    let code = |args: &[&str]| ctxrnn(p, args).status.code();
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["train", "--panel", "p.csv"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["train", "--panel", "p.csv", "--out", "x.bin", "--set", "bogus=1"]), Some(1));
    assert_eq!(code(&["train", "--panel", "p.csv", "--out", "x.bin", "--set", "q_lower=0.9"]), Some(1));
    assert_eq!(code(&["train", "--panel", "missing.csv", "--out", "x.bin"]), Some(2));
    fs::write(p.join("bad.csv"), "t,a\n0,1\n1,x\n").unwrap();
    assert_eq!(code(&["select-context", "--panel", "bad.csv", "--out", "m.txt"]), Some(2));
    fs::write(p.join("junk.bin"), b"CTXR\x01\x00\x00\x00").unwrap();
    assert_eq!(code(&["predict", "--model", "junk.bin", "--panel", "p.csv"]), Some(2));
    fs::write(p.join("map.txt"), "0: 9\nGLOBAL: 9\n").unwrap();
    assert_eq!(
        code(&["train", "--panel", "p.csv", "--map", "map.txt", "--config", "c.txt", "--out", "x.bin"]),
        Some(2)
    );
    // an enormous step size pushes the parameters to non-finite values
    assert_eq!(
        code(&["train", "--panel", "p.csv", "--config", "c.txt", "--set", "lr_schedule=1:1e300", "--out", "x.bin"]),
        Some(3)
    );
}
