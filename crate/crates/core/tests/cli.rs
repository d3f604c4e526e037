use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spankl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spankl"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("spawn spankl")
}

fn ok(args: &[&str]) -> String {
    let out = spankl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    spankl(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A toy corpus and a 3-task benchmark built from it.
fn fixture(tmp: &Path) -> (PathBuf, PathBuf) {
    let corpus = tmp.join("corpus");
    let bench = tmp.join("bench");
    ok(&["generate-toy", "--out", s(&corpus), "--sentences", "120", "--seed", "2"]);
    ok(&["synthesize", "--corpus", s(&corpus), "--out", s(&bench), "--seed", "2"]);
    (corpus, bench)
}

fn small_config(tmp: &Path, extra: &str) -> PathBuf {
    let p = tmp.join("small.toml");
    std::fs::write(&p, format!("epochs = 2\nd_model = 16\nheads = 2\nd_out = 8\n{extra}")).unwrap();
    p
}

#[test]
fn synthesis_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, a) = fixture(tmp.path());
    let b = tmp.path().join("bench2");
    ok(&["synthesize", "--corpus", s(&corpus), "--out", s(&b), "--seed", "2"]);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.contains_key(Path::new("task_3/test.txt")));
    assert!(fa.contains_key(Path::new("manifest.json")));
    assert_eq!(fa, fb);

    let c = tmp.path().join("bench3");
    ok(&["synthesize", "--corpus", s(&corpus), "--out", s(&c), "--seed", "3"]);
    assert_ne!(fa, files(&c));
}

#[test]
fn every_setup_synthesizes() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, _) = fixture(tmp.path());
    for setup in ["split-all", "split-filter", "filter-all", "filter-filter"] {
        let out = tmp.path().join(setup);
        ok(&["synthesize", "--corpus", s(&corpus), "--out", s(&out), "--setup", setup]);
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["config"]["setup"], setup);
        assert_eq!(m["created_unix"], 1700000000u64);
    }
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bench) = fixture(tmp.path());
    let cfg = small_config(tmp.path(), "");
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    ok(&["train", "--benchmark", s(&bench), "--config", s(&cfg), "--out", s(&full)]);
    ok(&["train", "--benchmark", s(&bench), "--config", s(&cfg), "--out", s(&part), "--stop-after", "1"]);
    assert!(part.join("step_1").join("step.json").is_file());
    assert!(!part.join("step_2").exists());
    ok(&["train", "--benchmark", s(&bench), "--config", s(&cfg), "--out", s(&part), "--resume"]);
    for f in ["metrics.tsv", "curve.csv", "step_2/teacher_digest.txt", "step_3/teacher_digest.txt", "step_3/model.ckpt"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
    assert!(!full.join("step_1").join("teacher_digest.txt").exists());
}

#[test]
fn baselines_train_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, bench) = fixture(tmp.path());
    let cfg = small_config(tmp.path(), "");
    for model in ["addner", "extendner", "spankl"] {
        let out = tmp.path().join(model);
        ok(&["train", "--benchmark", s(&bench), "--config", s(&cfg), "--out", s(&out), "--model", model]);
        let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
        assert!(metrics.lines().skip(1).all(|l| l.starts_with(model)));
        assert_eq!(metrics.lines().filter(|l| l.contains("\tMACRO\t")).count(), 3);
        let pred = ok(&["predict", "--model", s(&out.join("step_3")), "--input", s(&corpus.join("test.txt"))]);
        let test_sentences = std::fs::read_to_string(corpus.join("test.txt"))
            .unwrap()
            .split("\n\n")
            .filter(|b| !b.trim().is_empty())
            .count();
        assert_eq!(pred.lines().count(), test_sentences);
        for line in pred.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["tokens"].is_array() && v["pred"].is_array());
        }
    }
}

#[test]
fn report_aggregates_cl_and_noncl_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bench) = fixture(tmp.path());
    let cfg = small_config(tmp.path(), "seeds = [0, 1]\n");
    let cl = tmp.path().join("cl");
    let noncl = tmp.path().join("noncl");
    ok(&["train", "--benchmark", s(&bench), "--config", s(&cfg), "--out", s(&cl)]);
    ok(&["train", "--benchmark", s(&bench), "--config", s(&cfg), "--out", s(&noncl), "--mode", "noncl"]);
    assert!(cl.join("seed_1").join("run.json").is_file());
    let rep = tmp.path().join("report");
    let table = ok(&["report", "--runs", s(&cl), s(&noncl), "--out", s(&rep)]);
    assert!(table.contains("spankl cl alpha=1 beta=1\tmedian"));
    assert!(table.contains("spankl noncl\tmedian"));
    assert!(table.contains("delta median\t0.00"));
    for f in ["table.txt", "report.json", "curves.csv", "manifest.json"] {
        assert!(rep.join(f).is_file(), "{f}");
    }

    let other = tmp.path().join("other_bench");
    ok(&[
        "synthesize",
        "--corpus",
        s(&tmp.path().join("corpus")),
        "--out",
        s(&other),
        "--setup",
        "filter-filter",
    ]);
    let foreign = tmp.path().join("foreign");
    ok(&["train", "--benchmark", s(&other), "--config", s(&small_config(tmp.path(), "")), "--out", s(&foreign)]);
    assert_eq!(code(&["report", "--runs", s(&cl), s(&foreign), "--out", s(&tmp.path().join("r2"))]), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, bench) = fixture(tmp.path());
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synthesize", "--corpus", s(&corpus), "--out", "x", "--setup", "split-most"]), 1);
    assert_eq!(code(&["train", "--benchmark", s(&bench), "--out", "y", "--epochs", "0"]), 1);

    let unknown = tmp.path().join("unknown.toml");
    std::fs::write(&unknown, "epochz = 3\n").unwrap();
    let out = spankl(&["train", "--benchmark", s(&bench), "--config", s(&unknown), "--out", "z"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    assert_eq!(code(&["train", "--benchmark", s(&tmp.path().join("missing")), "--out", "w"]), 2);

    let broken = tmp.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    for f in ["train.txt", "dev.txt", "test.txt"] {
        std::fs::write(broken.join(f), "a\tB-PER\nb\tI-PER\tO\n").unwrap();
    }
    let out = spankl(&["synthesize", "--corpus", s(&broken), "--out", s(&tmp.path().join("nb"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn sweep_writes_runs_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, _) = fixture(tmp.path());
    let cfg = small_config(tmp.path(), "seeds = [0, 1]\n");
    let out = tmp.path().join("sweep");
    let table = ok(&["sweep", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&out), "--noncl"]);
    assert!(table.contains("delta median"));
    for seed in [0, 1] {
        for mode in ["cl", "noncl"] {
            assert!(out.join(format!("perm_1/seed_{seed}/{mode}/run.json")).is_file());
        }
    }
    assert!(out.join("report.json").is_file());
}
