use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mkcache::cli::main_with;
use mkcache::{load_bank, CacheModel};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mkcache").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn fixture(dir: &Path, kind: &str) -> PathBuf {
    let out = dir.join(kind);
    let (code, stdout, err) = run(&[
        "synth-fixture",
        "--kind",
        kind,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    PathBuf::from(stdout.trim())
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mkcache");
    let status = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = Command::new(bin)
        .args(["eval", "--manifest", "/nonexistent/manifest.json"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("/nonexistent"));
    let status = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path(), "complementary");
    let m = manifest.to_str().unwrap();
    assert_eq!(run(&["eval"]).0, 1);
    assert_eq!(run(&["eval", "--manifest", m, "--mode", "median"]).0, 1);
    assert_eq!(
        run(&["train", "--manifest", m, "--batch-size", "0", "--out", "x"]).0,
        1
    );
    assert_eq!(run(&["build", "--manifest", m]).0, 1);
    assert_eq!(
        run(&[
            "train",
            "--manifest",
            m,
            "--detach-weights",
            "--loss-branch",
            "--out",
            "x"
        ])
        .0,
        1
    );
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path(), "complementary");
    let m = manifest.to_str().unwrap();
    // Four support samples per class exist; ask for more.
    let (code, _, err) = run(&["eval", "--manifest", m, "--shots", "9"]);
    assert_eq!(code, 2);
    assert!(err.contains("alpha"), "{err}");
    let (code, _, _) = run(&["eval", "--manifest", m, "--synthetic-k", "17"]);
    assert_eq!(code, 2);

    fs::write(
        tmp.path().join("complementary/clip_query.mkeb"),
        b"MKEBjunk",
    )
    .unwrap();
    assert_eq!(run(&["eval", "--manifest", m]).0, 2);
}

#[test]
fn sweep_and_ablate_row_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path(), "complementary");
    let m = manifest.to_str().unwrap();
    let out = tmp.path().join("reports");
    let o = out.to_str().unwrap();

    let (code, stdout, err) = run(&[
        "sweep",
        "--manifest",
        m,
        "--beta-grid",
        "--epochs",
        "0",
        "--out",
        o,
    ]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("beta\t0.4\t"));
    assert_eq!(fs::read_to_string(out.join("sweep.tsv")).unwrap(), stdout);

    let (_, stdout, _) = run(&["sweep", "--manifest", m, "--kprime-grid", "--epochs", "0"]);
    assert_eq!(stdout.lines().count(), 5);
    let (_, stdout, _) = run(&["sweep", "--manifest", m, "--epochs", "0"]);
    assert_eq!(stdout.lines().count(), 11);

    let (code, stdout, _) = run(&["ablate", "--manifest", m, "--epochs", "0"]);
    assert_eq!(code, 0);
    let modes: Vec<&str> = stdout
        .lines()
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(
        modes,
        [
            "clip_only",
            "dino_only",
            "average",
            "maximum",
            "adaptive_clip_base",
            "adaptive_dino_base",
            "adaptive_zs_base"
        ]
    );
    for line in stdout.lines() {
        assert_eq!(line.split('\t').count(), 5);
        assert!(line.ends_with("\t90"));
    }
}

#[test]
fn eval_of_built_checkpoint_equals_fresh_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path(), "complementary");
    let m = manifest.to_str().unwrap();
    let o = tmp.path().join("build");
    assert_eq!(
        run(&["build", "--manifest", m, "--out", o.to_str().unwrap()]).0,
        0
    );
    let ckpt = o.join("cache.mkcp");
    let (_, from_ckpt, _) = run(&[
        "eval",
        "--manifest",
        m,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let (_, fresh, _) = run(&["eval", "--manifest", m]);
    assert_eq!(from_ckpt, fresh);
    assert_eq!(fresh.split('\t').count(), 4);
}

#[test]
fn train_writes_checkpoint_and_trace_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path(), "complementary");
    let m = manifest.to_str().unwrap();
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let o = tmp.path().join(name);
        let (code, _, err) = run(&[
            "train",
            "--manifest",
            m,
            "--epochs",
            "3",
            "--batch-size",
            "8",
            "--out",
            o.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        artifacts.push((
            fs::read(o.join("cache.mkcp")).unwrap(),
            fs::read_to_string(o.join("loss.tsv")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0], artifacts[1]);
    let trace = &artifacts[0].1;
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.starts_with("1\t"));
    // 4 real + 2 synthetic rows per class.
    let cache = CacheModel::from_bytes(&artifacts[0].0).unwrap();
    assert_eq!(cache.keys_clip().rows(), 18);
    assert_eq!(cache.values().column_sums(), vec![6, 6, 6]);
}

#[test]
fn zero_shot_expansion_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path(), "complementary");
    let m = manifest.to_str().unwrap();
    let o = tmp.path().join("expand");
    let (code, stdout, err) = run(&[
        "expand",
        "--manifest",
        m,
        "--shots",
        "0",
        "--synthetic-k",
        "3",
        "--out",
        o.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(stdout, "9\t3\n");
    let bank = load_bank(o.join("support_clip.mkeb"), false).unwrap();
    assert_eq!(bank.labels().unwrap(), &[0, 0, 0, 1, 1, 1, 2, 2, 2]);

    let (code, stdout, _) = run(&[
        "eval",
        "--manifest",
        m,
        "--shots",
        "0",
        "--synthetic-k",
        "3",
    ]);
    assert_eq!(code, 0);
    assert!(stdout.ends_with("\t90\n"));
    // Neither real nor synthetic rows: nothing to cache.
    assert_eq!(
        run(&[
            "eval",
            "--manifest",
            m,
            "--shots",
            "0",
            "--synthetic-k",
            "0"
        ])
        .0,
        1
    );
}

#[test]
fn fixture_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fixture(&tmp.path().join("1"), "clusters");
    let b = fixture(&tmp.path().join("2"), "clusters");
    let dir_a = a.parent().unwrap();
    let dir_b = b.parent().unwrap();
    let mut names: Vec<_> = fs::read_dir(dir_a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        assert_eq!(
            fs::read(dir_a.join(&name)).unwrap(),
            fs::read(dir_b.join(&name)).unwrap()
        );
    }
}
