use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rshd::io::{read_matrix, Manifest};

const TINY: &str = r#"
n_trials = 300
k_list = [0.0, 20.0, 50.0]
eps_list = [1.0, 4.0]

[synth]
n_speakers = 8
utterances_per_speaker = 12
t_range = [6, 10]

[pse_train]
lr = 0.001
epochs = 2

[embedder]
epochs = 5
"#;

fn rshd(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rshd"));
    cmd.args(args).env_remove("RSHD_NUM_WORKERS");
    if let Some(w) = workers {
        cmd.env("RSHD_NUM_WORKERS", w);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = rshd(args, None);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(args: &[&str], code: i32, category: &str) {
    let out = rshd(args, None);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with(&format!("{category}: ")), "{args:?}: {err}");
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Work {
    fn new() -> Work {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Work {
            config: config.display().to_string(),
            _dir: dir,
            root,
        }
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    /// Every stage of the pipeline into `<root>/<tag>`.
    fn pipeline(&self, tag: &str, workers: Option<&str>) {
        let p = |rel: &str| self.p(&format!("{tag}/{rel}"));
        let common = ["--config", self.config.as_str(), "--seed", "5"];
        let steps: Vec<Vec<String>> = vec![
            vec!["gen-data".into(), "--out".into(), p("data")],
            vec![
                "train-sid".into(),
                "--data".into(),
                p("data/sid.jsonl"),
                "--out".into(),
                p("sid.ckpt"),
            ],
            vec![
                "build-saliency".into(),
                "--data".into(),
                p("data/sid.jsonl"),
                "--sid".into(),
                p("sid.ckpt"),
                "--out".into(),
                p("saliency"),
            ],
            vec![
                "train-pse".into(),
                "--saliency".into(),
                p("saliency"),
                "--out".into(),
                p("pse.ckpt"),
            ],
            vec![
                "train-embedder".into(),
                "--data".into(),
                p("data/asv_train.jsonl"),
                "--sid".into(),
                p("sid.ckpt"),
                "--out".into(),
                p("embedder.ckpt"),
            ],
            vec![
                "train-classifier".into(),
                "--data".into(),
                p("data/sid.jsonl"),
                "--out".into(),
                p("classifier.ckpt"),
            ],
            vec![
                "sweep".into(),
                "--data".into(),
                p("data/asv_eval.jsonl"),
                "--embedder".into(),
                p("embedder.ckpt"),
                "--classifier".into(),
                p("classifier.ckpt"),
                "--pse".into(),
                p("pse.ckpt"),
                "--out".into(),
                p("sweep.csv"),
            ],
        ];
        for step in steps {
            let mut args: Vec<&str> = step.iter().map(String::as_str).collect();
            args.extend_from_slice(&common);
            let out = rshd(&args, workers);
            assert!(
                out.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    }
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn pipeline_is_bit_reproducible_across_worker_counts() {
    let w = Work::new();
    w.pipeline("a", Some("1"));
    w.pipeline("b", Some("3"));
    for f in [
        "sid.ckpt",
        "pse.ckpt",
        "embedder.ckpt",
        "classifier.ckpt",
        "sweep.csv",
        "saliency/saliency.jsonl",
    ] {
        assert_eq!(bytes(w.p(&format!("a/{f}"))), bytes(w.p(&format!("b/{f}"))), "{f}");
    }
    let csv = std::fs::read_to_string(w.p("a/sweep.csv")).unwrap();
    assert!(csv.starts_with("# seed=5\n# config_digest="));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 2 * 2);
}

#[test]
fn sanitize_k_zero_is_identity_and_k_positive_is_not() {
    let w = Work::new();
    ok(&["gen-data", "--config", &w.config, "--out", &w.p("data")]);
    let data = w.p("data/asv_eval.jsonl");
    let run = |k: &str, out: &str| {
        let o = ok(&[
            "sanitize", "--config", &w.config, "--data", &data, "--mode", "random", "--k", k, "--out", out,
        ]);
        serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()
    };
    let summary = run("0", &w.p("clean"));
    assert_eq!(summary["changed_positions"], 0);
    let src = Manifest::read(&data).unwrap();
    let dst = Manifest::read(w.p("clean/manifest.jsonl")).unwrap();
    assert_eq!(src.records.len(), dst.records.len());
    for (a, b) in src.records.iter().zip(&dst.records) {
        let xa = read_matrix(w.root.join("data").join(&a.path)).unwrap();
        let xb = read_matrix(w.root.join("clean").join(&b.path)).unwrap();
        assert!(xa.bit_eq(&xb));
    }
    assert!(run("30", &w.p("noisy"))["changed_positions"].as_u64().unwrap() > 0);
}

#[test]
fn existing_output_needs_force() {
    let w = Work::new();
    ok(&["gen-data", "--config", &w.config, "--out", &w.p("data")]);
    let before = bytes(w.p("data/sid.jsonl"));
    fails(&["gen-data", "--config", &w.config, "--out", &w.p("data")], 1, "config");
    assert_eq!(before, bytes(w.p("data/sid.jsonl")));
    ok(&["gen-data", "--config", &w.config, "--out", &w.p("data"), "--force"]);
    assert_eq!(before, bytes(w.p("data/sid.jsonl")));
}

#[test]
fn corrupt_inputs_fail_without_output() {
    let w = Work::new();
    ok(&["gen-data", "--config", &w.config, "--out", &w.p("data")]);
    let sid = w.p("data/sid.jsonl");
    ok(&[
        "train-sid",
        "--config",
        &w.config,
        "--data",
        &sid,
        "--out",
        &w.p("sid.ckpt"),
    ]);
    let full = bytes(w.p("sid.ckpt"));
    std::fs::write(w.p("cut.ckpt"), &full[..full.len() / 2]).unwrap();
    fails(
        &[
            "build-saliency",
            "--config",
            &w.config,
            "--data",
            &sid,
            "--sid",
            &w.p("cut.ckpt"),
            "--out",
            &w.p("sal"),
        ],
        1,
        "io",
    );
    assert!(!Path::new(&w.p("sal")).exists());

    // a truncated matrix is only found while loading; the old output must survive
    ok(&[
        "train-classifier",
        "--config",
        &w.config,
        "--data",
        &sid,
        "--out",
        &w.p("clf.ckpt"),
    ]);
    let m = Manifest::read(&sid).unwrap();
    let mat = w.root.join("data").join(&m.records[0].path);
    let b = bytes(&mat);
    std::fs::write(&mat, &b[..b.len() - 3]).unwrap();
    let old = bytes(w.p("clf.ckpt"));
    fails(
        &[
            "train-classifier",
            "--config",
            &w.config,
            "--data",
            &sid,
            "--out",
            &w.p("clf.ckpt"),
            "--force",
        ],
        1,
        "io",
    );
    assert_eq!(old, bytes(w.p("clf.ckpt")));
    let leftovers: Vec<_> = std::fs::read_dir(&w.root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".partial-"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn usage_errors() {
    let w = Work::new();
    fails(&["gen-data", "--bogus", "--out", &w.p("x")], 2, "config");
    fails(
        &[
            "sanitize",
            "--data",
            &w.p("missing.jsonl"),
            "--mode",
            "random",
            "--out",
            &w.p("x"),
        ],
        1,
        "io",
    );
    fails(
        &[
            "sanitize",
            "--data",
            &w.p("missing.jsonl"),
            "--mode",
            "bogus",
            "--out",
            &w.p("x"),
        ],
        2,
        "config",
    );
    ok(&["gen-data", "--config", &w.config, "--out", &w.p("data")]);
    let data = w.p("data/sid.jsonl");
    fails(
        &["sanitize", "--config", &w.config, "--data", &data, "--out", &w.p("x")],
        1,
        "config",
    );
    fails(
        &[
            "sanitize",
            "--config",
            &w.config,
            "--data",
            &data,
            "--mode",
            "random",
            "--k",
            "101",
            "--out",
            &w.p("x"),
        ],
        1,
        "config",
    );
    let out = rshd(&["gen-data", "--config", &w.config, "--out", &w.p("d2")], Some("0"));
    assert_eq!(out.status.code(), Some(1));
    for bad in [
        "no_such_field = 1\n",
        "[synth]\nn_speakerz = 3\n",
        "n_trials = \"many\"\n",
    ] {
        std::fs::write(w.p("bad.toml"), bad).unwrap();
        fails(
            &["gen-data", "--config", &w.p("bad.toml"), "--out", &w.p("d3")],
            1,
            "config",
        );
    }
    assert!(rshd(&["--help"], None).status.success());
}
