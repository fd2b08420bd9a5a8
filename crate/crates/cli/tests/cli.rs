use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_annotator");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("ANNOTATOR_API_KEY")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const PEOPLE: [&str; 6] = ["Peter", "Maria", "Kofi", "Aiko", "Lars", "Priya"];
const SURNAMES: [&str; 5] = ["Blackburn", "Santos", "Annan", "Sato", "Berg"];
const PLACES: [&str; 5] = ["Paris", "Lagos", "Osaka", "Lima", "Oslo"];
const ORGS: [&str; 4] = ["Reuters", "UNICEF", "Siemens", "FIFA"];
const VERBS: [&str; 4] = ["visited", "left", "praised", "joined"];

/// Four-column CoNLL text (token, POS, chunk, NER) with `n` varied sentences.
fn synthetic_conll(n: usize) -> String {
    let mut out = String::from("-DOCSTART- -X- -X- O\n\n");
    for i in 0..n {
        let mut rows: Vec<(String, &str)> = Vec::new();
        rows.push((PEOPLE[i % 6].into(), "B-PER"));
        if i % 3 == 0 {
            rows.push((SURNAMES[i % 5].into(), "I-PER"));
        }
        rows.push((VERBS[i % 4].into(), "O"));
        if i % 2 == 0 {
            rows.push((ORGS[i % 4].into(), "B-ORG"));
            rows.push(("in".into(), "O"));
        }
        rows.push((PLACES[(i / 2) % 5].into(), "B-LOC"));
        rows.push(("on".into(), "O"));
        rows.push((format!("day{i}"), "O"));
        rows.push((".".into(), "O"));
        for (tok, tag) in rows {
            out.push_str(&format!("{tok} NN I-NP {tag}\n"));
        }
        out.push('\n');
    }
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        std::fs::write(data.join("train.txt"), synthetic_conll(n)).unwrap();
        std::fs::write(data.join("valid.txt"), synthetic_conll(7)).unwrap();
        std::fs::write(data.join("test.txt"), synthetic_conll(9)).unwrap();
        Workspace { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&self.read(rel)).unwrap()
    }

    fn annotate(&self, extra: &[&str]) -> Output {
        let mut args = vec![
            "annotate",
            "--data",
            "data",
            "--tag-col",
            "3",
            "--mode",
            "rag",
            "--m",
            "25",
            "--fraction",
            "0.3",
            "--seed",
            "7",
        ];
        args.extend_from_slice(extra);
        run(self.path(), &args)
    }
}

#[test]
fn usage_errors_exit_64_and_help_exits_0() {
    let ws = Workspace::new(10);
    assert_eq!(code(&run(ws.path(), &["annotate", "--no-such-flag"])), 64);
    assert_eq!(code(&run(ws.path(), &["frobnicate"])), 64);
    let out = run(ws.path(), &["annotate", "--mode", "sideways"]);
    assert_eq!(code(&out), 64);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid value"));
    assert_eq!(code(&run(ws.path(), &["--help"])), 0);
    assert_eq!(code(&run(ws.path(), &["--version"])), 0);
}

#[test]
fn ingest_reports_statistics_for_the_tag_column() {
    let ws = Workspace::new(10);
    let stdout = ok(
        ws.path(),
        &[
            "ingest",
            "--format",
            "conll",
            "--tag-col",
            "3",
            "data/",
            "--out",
            "stats.json",
        ],
    );
    let stats: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(stats["sentences"]["train"], 10);
    assert_eq!(stats["sentences"]["valid"], 7);
    assert_eq!(stats["sentences"]["test"], 9);
    assert_eq!(ws.json("stats.json"), stats);
    assert!(ws.path().join("ingest.manifest.json").is_file());
}

#[test]
fn echo_gold_rag_run_evaluates_to_perfect_f1() {
    let ws = Workspace::new(120);
    let out = ws.annotate(&["--provider", "mock:echo-gold", "--out", "runs/rag"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = ok(ws.path(), &["evaluate", "--run", "runs/rag"]);
    let overall = stdout.lines().find(|l| l.starts_with("overall")).unwrap();
    assert!(overall.contains("100.00  100.00  100.00"), "{stdout}");
    let metrics = ws.json("runs/rag/metrics.json");
    assert_eq!(metrics["f1"], 100.0);
    let report = ws.json("runs/rag/report.json");
    assert_eq!(report["sample_space"], 36);
    assert_eq!(report["targets"], 84);
    assert_eq!(report["unmatched"], 0);
}

#[test]
fn empty_mock_keeps_every_target_with_zero_f1() {
    let ws = Workspace::new(100);
    let out = ws.annotate(&["--provider", "mock:empty", "--out", "runs/empty"]);
    assert_eq!(code(&out), 0);
    ok(ws.path(), &["evaluate", "--run", "runs/empty"]);
    let metrics = ws.json("runs/empty/metrics.json");
    assert_eq!(metrics["f1"], 0.0);
    assert_eq!(metrics["tp"], 0);
    assert_eq!(metrics["fp"], 0);
    let annotated = String::from_utf8(ws.read("runs/empty/annotated.conll")).unwrap();
    assert_eq!(
        annotated.split("\n\n").filter(|s| !s.trim().is_empty()).count(),
        100 - 30
    );
}

#[test]
fn every_run_writes_a_manifest_listing_hashed_outputs() {
    let ws = Workspace::new(100);
    assert_eq!(
        code(&ws.annotate(&["--provider", "mock:echo-gold", "--out", "runs/a"])),
        0
    );
    let manifest = ws.json("runs/a/manifest.json");
    let outputs = manifest["outputs"].as_array().unwrap();
    let names: Vec<&str> = outputs
        .iter()
        .map(|o| {
            Path::new(o["path"].as_str().unwrap())
                .file_name()
                .unwrap()
                .to_str()
                .unwrap()
        })
        .collect();
    for f in [
        "annotated.conll",
        "report.json",
        "split.json",
        "transcript.jsonl",
        "prompts.jsonl",
        "provenance.jsonl",
    ] {
        assert!(names.contains(&f), "{f} missing from {names:?}");
    }
    for o in outputs {
        assert_eq!(o["sha256"].as_str().unwrap().len(), 64);
    }
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["config"]["run"]["m"], 25);
    assert!(manifest["rng_algorithm"].as_str().unwrap().starts_with("splitmix64"));
}

#[test]
fn replay_reproduces_outputs_byte_for_byte() {
    let ws = Workspace::new(100);
    assert_eq!(
        code(&ws.annotate(&["--provider", "mock:echo-gold", "--out", "runs/orig"])),
        0
    );
    for out in ["runs/replay1", "runs/replay2"] {
        let o = ws.annotate(&["--replay", "runs/orig/transcript.jsonl", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "annotated.conll",
        "report.json",
        "split.json",
        "transcript.jsonl",
        "provenance.jsonl",
    ] {
        let a = ws.read(&format!("runs/replay1/{f}"));
        assert_eq!(a, ws.read(&format!("runs/replay2/{f}")), "{f} differs between replays");
        assert_eq!(
            a,
            ws.read(&format!("runs/orig/{f}")),
            "{f} differs from the recorded run"
        );
    }
}

#[test]
fn replay_of_a_different_configuration_is_a_provider_failure() {
    let ws = Workspace::new(100);
    assert_eq!(
        code(&ws.annotate(&["--provider", "mock:echo-gold", "--out", "runs/orig"])),
        0
    );
    let mut args = vec![
        "annotate",
        "--data",
        "data",
        "--tag-col",
        "3",
        "--mode",
        "icl",
        "--m",
        "5",
    ];
    args.extend([
        "--fraction",
        "0.3",
        "--seed",
        "7",
        "--replay",
        "runs/orig",
        "--out",
        "runs/other",
    ]);
    assert_eq!(code(&run(ws.path(), &args)), 2);
}

#[test]
fn validation_errors_exit_1() {
    let ws = Workspace::new(30);
    // x = 9 sample-space sentences cannot supply 25 examples.
    let out = ws.annotate(&["--provider", "mock:echo-gold", "--out", "runs/x"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds sample space"));
    assert!(!ws.path().join("runs/x").exists());
    let out = run(
        ws.path(),
        &[
            "annotate",
            "--data",
            "data",
            "--mode",
            "icl",
            "--m",
            "2",
            "--seed",
            "1",
            "--provider",
            "mock:empty",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 1, "missing fraction");
    let out = run(ws.path(), &["evaluate", "--run", "nowhere"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unreachable_provider_fails_fast_with_exit_2() {
    let ws = Workspace::new(100);
    let cache = ws.path().join("cache.embc");
    let out = ws.annotate(&[
        "--provider",
        "openai:gpt-4o-mini",
        "--endpoint",
        "http://127.0.0.1:9/v1/chat/completions",
        "--embed-cache",
        cache.to_str().unwrap(),
        "--out",
        "runs/net",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    // The probe runs before anything is embedded.
    assert!(std::fs::metadata(&cache).map(|m| m.len() <= 5).unwrap_or(true));
    assert!(!ws.path().join("runs/net/annotated.conll").exists());
}

#[test]
fn config_files_drive_runs_and_flags_override_them() {
    let ws = Workspace::new(100);
    let cfg = "corpus = \"synthetic\"\ndata = \"data\"\ntag_col = 3\nmode = \"icl\"\nm = 50\nfraction = 0.3\n\
               seeds = [1, 2]\nprovider = \"mock:echo-gold\"\nout = \"runs/cfg\"\n";
    std::fs::write(ws.path().join("run.toml"), cfg).unwrap();
    // m = 50 > x = 30 from the file; the flag brings it back in range.
    assert_eq!(code(&run(ws.path(), &["annotate", "--config", "run.toml"])), 1);
    ok(ws.path(), &["annotate", "--config", "run.toml", "--m", "5"]);
    for seed in [1, 2] {
        let report = ws.json(&format!("runs/cfg/seed-{seed}/report.json"));
        assert_eq!(report["corpus"], "synthetic");
        assert_eq!(report["m"], 5);
        assert_eq!(report["seed"], seed);
    }
    let stdout = ok(
        ws.path(),
        &["evaluate", "--run", "runs/cfg/seed-1", "--run", "runs/cfg/seed-2"],
    );
    assert!(stdout.contains("2 runs: P 100.00 ± 0.00"), "{stdout}");
}

#[test]
fn config_with_a_credential_is_rejected() {
    let ws = Workspace::new(30);
    for body in [
        "mode = \"icl\"\napi_key = \"abc\"\n",
        "mode = \"icl\"\nprovider = \"sk-proj-0123456789abcdefghijklmn\"\n",
    ] {
        std::fs::write(ws.path().join("bad.toml"), body).unwrap();
        let out = run(ws.path(), &["annotate", "--config", "bad.toml"]);
        assert_eq!(code(&out), 1);
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("credential"), "{stderr}");
        assert!(stderr.contains("WARN"), "{stderr}");
    }
}

#[test]
fn stats_writes_the_documented_files() {
    let ws = Workspace::new(10);
    let scores = "condition,a,b,c\nd1,90,80,70\nd2,91,81,71\nd3,92,82,72\n";
    std::fs::write(ws.path().join("scores.csv"), scores).unwrap();
    let stdout = ok(ws.path(), &["stats", "--scores", "scores.csv", "--alpha", "0.01"]);
    assert!(stdout.contains("chi2 = 6.0000"), "{stdout}");
    for f in [
        "friedman.json",
        "conover.csv",
        "conover.json",
        "cd.csv",
        "cd.json",
        "stats.manifest.json",
    ] {
        assert!(ws.path().join(f).is_file(), "{f}");
    }
    let f = ws.json("friedman.json");
    assert!((f["chi2"].as_f64().unwrap() - 6.0).abs() < 1e-9);
    assert!((f["p_value"].as_f64().unwrap() - (-3.0f64).exp()).abs() < 1e-12);
    assert_eq!(f["rejected"], false);
    let cd = String::from_utf8(ws.read("cd.csv")).unwrap();
    assert_eq!(cd, "method,mean_rank,group\na,1,0\nb,2,1\nc,3,2\n");
    assert_eq!(
        code(&run(
            ws.path(),
            &["stats", "--scores", "scores.csv", "--adjust", "sideways"]
        )),
        64
    );
    std::fs::write(ws.path().join("bad.csv"), "condition,a\nd1,1\n").unwrap();
    assert_eq!(code(&run(ws.path(), &["stats", "--scores", "bad.csv"])), 1);
}

#[test]
fn report_merges_runs_into_table_heatmap_and_scores() {
    let ws = Workspace::new(80);
    for (mode, m) in [("icl", "5"), ("rag", "5"), ("icl", "10"), ("rag", "10")] {
        let out = format!("runs/{mode}-{m}");
        let args = [
            "annotate",
            "--data",
            "data",
            "--tag-col",
            "3",
            "--mode",
            mode,
            "--m",
            m,
            "--fraction",
            "0.3",
            "--seed",
            "1,2",
            "--provider",
            "mock:echo-gold",
            "--out",
            &out,
        ];
        ok(ws.path(), &args);
        ok(
            ws.path(),
            &[
                "evaluate",
                "--run",
                &format!("{out}/seed-1"),
                "--run",
                &format!("{out}/seed-2"),
            ],
        );
    }
    ok(ws.path(), &["report", "--runs", "runs", "--out", "summary"]);
    let table = String::from_utf8(ws.read("summary/table.txt")).unwrap();
    assert!(table.contains("model: mock:echo-gold"));
    assert!(table.contains("100.00 ± 0.00"));
    let heatmap = String::from_utf8(ws.read("summary/heatmap.csv")).unwrap();
    assert_eq!(
        heatmap.lines().next().unwrap(),
        "corpus,m,fraction,method,mock:echo-gold"
    );
    assert_eq!(heatmap.lines().count(), 5);
    let scores = String::from_utf8(ws.read("summary/scores.csv")).unwrap();
    assert_eq!(
        scores.lines().next().unwrap(),
        "condition,mock:echo-gold ICL,mock:echo-gold RAG w/hashed-bag-256"
    );
    assert_eq!(scores.lines().count(), 3);
    let summary = ws.json("summary/report.json");
    assert_eq!(summary.as_array().unwrap().len(), 4);
    assert_eq!(summary[0]["seeds"], serde_json::json!([1, 2]));
}

fn hash_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = walk(root)
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn no_subcommand_mutates_its_inputs() {
    let ws = Workspace::new(100);
    let data_before = hash_tree(&ws.path().join("data"));
    ok(ws.path(), &["ingest", "--tag-col", "3", "data"]);
    ok(
        ws.path(),
        &[
            "split",
            "--data",
            "data",
            "--tag-col",
            "3",
            "--fraction",
            "0.3",
            "--seed",
            "3",
            "--out",
            "s/split.json",
        ],
    );
    ok(
        ws.path(),
        &[
            "embed",
            "--data",
            "data",
            "--tag-col",
            "3",
            "--fraction",
            "0.3",
            "--seed",
            "3",
            "--embed-dim",
            "64",
            "--embed-cache",
            "c.embc",
            "--index-out",
            "s/index.vidx",
        ],
    );
    assert_eq!(
        code(&ws.annotate(&["--provider", "mock:echo-gold", "--out", "runs/a"])),
        0
    );
    let run_before = hash_tree(&ws.path().join("runs/a"));
    assert_eq!(code(&ws.annotate(&["--replay", "runs/a", "--out", "runs/b"])), 0);
    assert_eq!(hash_tree(&ws.path().join("runs/a")), run_before);
    assert_eq!(hash_tree(&ws.path().join("data")), data_before);
    let split = ws.json("s/split.json");
    assert_eq!(split["sample_space"].as_array().unwrap().len(), 30);
    // A second embed pass is served entirely from the cache.
    let stdout = ok(
        ws.path(),
        &[
            "embed",
            "--data",
            "data",
            "--tag-col",
            "3",
            "--fraction",
            "0.3",
            "--seed",
            "3",
            "--embed-dim",
            "64",
            "--embed-cache",
            "c.embc",
            "--index-out",
            "s/index2.vidx",
        ],
    );
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["vectors"], 30);
    assert_eq!(ws.read("s/index.vidx"), ws.read("s/index2.vidx"));
}
