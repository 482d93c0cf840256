use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
epochs = 2
batch_size = 8
lr = 1e-3
layers = 1
hidden = 16
heads = 2
time_features = 16
upsampler_iters = 50
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meshdiff"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn meshdiff")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

/// Small dataset plus a two-epoch checkpoint at `run/last.ckpt`.
fn trained(dir: &Path) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(dir, &["gen-data", "--out", "data", "--samples", "16", "--val", "6", "--seed", "1"]);
    ok(dir, &["train", "--config", "tiny.toml", "--data", "data", "--out", "run", "--seed", "2"]);
}

/// Every file below `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["gen-data", "--out", "x"]), 2, "missing seed");
    assert_eq!(code(d, &["gen-data", "--out", "x", "--seed", "1", "--bogus"]), 2);
    assert_eq!(code(d, &["frobnicate"]), 2);
    fs::write(d.join("bad.toml"), "[gen-data]\nsampels = 3\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.toml", "gen-data", "--out", "x", "--seed", "1"]), 2);
    assert_eq!(code(d, &["eval", "--gen", "a", "--ref", "b", "--out", "r.csv", "--metrics", "fid"]), 2);
    assert_eq!(code(d, &["--help"]), 0);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["sample", "--ckpt", "missing.ckpt", "--out", "o", "--seed", "1"]), 3);
    assert_eq!(code(d, &["inspect", "--ckpt", "missing.ckpt"]), 3);
    fs::write(d.join("junk.ckpt"), "not a checkpoint\n").unwrap();
    assert_eq!(code(d, &["inspect", "--ckpt", "junk.ckpt"]), 3);
    assert_eq!(code(d, &["train", "--data", "nowhere", "--out", "r", "--seed", "1"]), 3);
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["gen-data", "--out", "data", "--samples", "8", "--val", "2", "--seed", "1"]);
    let args = [
        "train", "--config", "tiny.toml", "--data", "data", "--out", "run", "--seed", "2", "--lr", "1e30",
        "--epochs", "4", "--lr-drop-epoch", "4",
    ];
    assert_eq!(code(d, &args), 4);
}

#[test]
fn flags_override_config_and_banner_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let stdout = ok(d, &["sample", "--ckpt", "run/last.ckpt", "--out", "a", "--n", "2", "--seed", "5"]);
    assert!(stdout.contains("steps = 10"), "default steps in banner:\n{stdout}");
    assert!(stdout.contains("seed = 5"));
    // the echoed banner is a config file for the same run
    fs::rename(d.join("a"), d.join("first")).unwrap();
    ok(d, &["--config", "first/sample.config.toml", "sample"]);
    assert_eq!(snapshot(&d.join("first")), snapshot(&d.join("a")));

    fs::write(d.join("s.toml"), "[sample]\nsteps = 3\nn = 1\n").unwrap();
    let stdout = ok(
        d,
        &["--config", "s.toml", "sample", "--ckpt", "run/last.ckpt", "--out", "b", "--steps", "4", "--seed", "5"],
    );
    assert!(stdout.contains("steps = 4") && stdout.contains("n = 1"), "{stdout}");
    assert_eq!(fs::read_dir(d.join("b")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "obj")).count(), 1);
}

#[test]
fn zero_guidance_matches_omitted_guidance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let base = ["sample", "--ckpt", "run/last.ckpt", "--n", "2", "--seed", "7", "--joints", "data/val/00000.joints"];
    ok(d, &[&base[..], &["--out", "plain"]].concat());
    ok(d, &[&base[..], &["--out", "zero", "--cfg", "0"]].concat());
    let strip = |m: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        m.into_iter().filter(|(p, _)| p != Path::new("sample.config.toml")).collect()
    };
    assert_eq!(strip(snapshot(&d.join("plain"))), strip(snapshot(&d.join("zero"))));
    ok(d, &[&base[..], &["--out", "guided", "--cfg", "1"]].concat());
    assert_ne!(
        fs::read(d.join("plain/00000.obj")).unwrap(),
        fs::read(d.join("guided/00000.obj")).unwrap()
    );
    assert_eq!(code(d, &["sample", "--ckpt", "run/last.ckpt", "--out", "x", "--seed", "1", "--cfg", "1"]), 2);
}

#[test]
fn eval_on_identical_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(
        d,
        &["eval", "--gen", "data/val", "--ref", "data/val", "--out", "r.csv", "--metrics", "mmd,cov,mpjpe,mpve"],
    );
    let csv = fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(csv, "metric,value\nmmd_chamfer,0\ncov_chamfer,100\nmpjpe,0\nmpve,0\n");
}

#[test]
fn checkpoint_rejects_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["gen-data", "--out", "data", "--samples", "4", "--val", "2", "--seed", "1"]);
    ok(d, &["train", "--config", "tiny.toml", "--data", "data", "--out", "run", "--seed", "2", "--epochs", "0"]);
    // zero epochs writes nothing to sample from
    assert_eq!(code(d, &["sample", "--ckpt", "run/last.ckpt", "--out", "o", "--seed", "1"]), 3);
}
