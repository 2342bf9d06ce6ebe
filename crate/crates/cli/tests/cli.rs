use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::tempdir;

fn dycklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dycklab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for out in [&a, &b] {
        let o = dycklab(&[
            "gen-corpus",
            "--k",
            "2",
            "--D",
            "3",
            "--min-len",
            "4",
            "--max-len",
            "40",
            "--num-tokens",
            "2000",
            "--seed",
            "11",
            "--out",
            path(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("interior length histogram"));
    }
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    let text = String::from_utf8(text).unwrap();
    assert!(text.starts_with("# k=2 D=3 seed=11\n"));
    let tokens: usize = text.lines().skip(1).map(|l| l.split(' ').count()).sum();
    assert!(tokens >= 2000);
}

#[test]
fn gen_corpus_errors() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("c.txt");
    let o = dycklab(&[
        "gen-corpus",
        "--k",
        "2",
        "--D",
        "3",
        "--min-len",
        "9",
        "--max-len",
        "9",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no nonempty balanced string"));

    let o = dycklab(&[
        "gen-corpus",
        "--k",
        "2",
        "--D",
        "3",
        "--max-len",
        "10",
        "--num-tokens",
        "10",
        "--out",
        path(&dir.path().join("missing/c.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot write"));
}

#[test]
fn verify_recognize_exhaustive() {
    let dir = tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = dycklab(&[
        "verify",
        "recognize",
        "--k",
        "2",
        "--D",
        "2",
        "--exhaustive",
        "8",
        "--report",
        path(&report),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("100.00% agreement"));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    // every interior string of length 0..=8 over 4 symbols
    assert_eq!(r["tested"], (0..=8).map(|l| 4u64.pow(l)).sum::<u64>());
    assert_eq!(r["tested"], r["passed"]);
    assert_eq!(r["failed"], 0);
    assert!(r["first_failure"].is_null());
}

#[test]
fn verify_generate_corpus() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("test.txt");
    let report = dir.path().join("r.json");
    let o = dycklab(&[
        "gen-corpus",
        "--k",
        "8",
        "--D",
        "10",
        "--min-len",
        "20",
        "--max-len",
        "200",
        "--num-tokens",
        "3000",
        "--seed",
        "5",
        "--out",
        path(&corpus),
    ]);
    assert!(o.status.success());
    let o = dycklab(&[
        "verify",
        "generate",
        "--corpus",
        path(&corpus),
        "--report",
        path(&report),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["metrics"]["legal_set_agreement"], 1.0);
    assert_eq!(r["metrics"]["close_bracket_accuracy"], 1.0);
    assert_eq!(r["parameters"]["k"], 8);
}

#[test]
fn verify_generate_catches_non_members() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("mixed.txt");
    // a member, a mismatch and a string that is too deep for D=2
    fs::write(
        &corpus,
        "# k=2 D=2 seed=0\n0 2 4 5 3 1\n0 2 5 1\n0 2 2 2 3 3 3 1\n",
    )
    .unwrap();
    let o = dycklab(&["verify", "generate", "--corpus", path(&corpus)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("tested 3  passed 3"));
}

#[test]
fn low_precision_failures_come_with_an_adversarial_pair() {
    let dir = tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = dycklab(&[
        "verify",
        "recognize",
        "--k",
        "1",
        "--D",
        "2",
        "--precision",
        "fp:6",
        "--n",
        "256",
        "--report",
        path(&report),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["failed"].as_u64().unwrap() > 0);
    assert_eq!(
        r["tested"].as_u64().unwrap(),
        r["passed"].as_u64().unwrap() + r["failed"].as_u64().unwrap()
    );
    let pair = &r["adversarial_pair"];
    assert_eq!(pair["frac_bits"], 6);
    assert_ne!(pair["member"], pair["non_member"]);

    let o = dycklab(&[
        "verify",
        "recognize",
        "--k",
        "1",
        "--D",
        "2",
        "--precision",
        "fp:20",
        "--n",
        "256",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn corpus_parse_errors_name_the_line() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("bad.txt");
    fs::write(&corpus, "# k=1 D=2 seed=0\n0 2 3 1\n0 2 q 1\n").unwrap();
    let o = dycklab(&["verify", "recognize", "--corpus", path(&corpus)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn verify_needs_a_source() {
    let o = dycklab(&["verify", "recognize", "--k", "1", "--D", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dycklab(&[
        "verify",
        "recognize",
        "--k",
        "1",
        "--D",
        "2",
        "--precision",
        "fp",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_csv_and_jsonl() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let o = dycklab(&[
        "sweep",
        "--k",
        "1",
        "--D",
        "2",
        "--p",
        "4..=6,20",
        "--n",
        "64,128",
        "--trials",
        "100",
        "--seed",
        "3",
        "--out",
        path(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("p,n,trials,accuracy,failure_example_id"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * 2);
    let mut failure_ids = Vec::new();
    for r in &rows {
        let acc: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        if r[0] == "20" {
            assert_eq!(acc, 1.0);
        }
        if !r[4].is_empty() {
            failure_ids.push(r[4].to_string());
        }
    }
    let jsonl = fs::read_to_string(dir.path().join("sweep.failures.jsonl")).unwrap();
    let ids: Vec<String> = jsonl
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids, failure_ids);
    assert!(!ids.is_empty());
}

#[test]
fn export_weights_is_stable_and_round_trips() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = dycklab(&[
            "export-weights",
            "recognize",
            "--k",
            "2",
            "--D",
            "3",
            "--n-max",
            "64",
            "--out",
            path(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("4 layers"));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let net = dycklab::Network::from_json(&text).unwrap();
    assert_eq!(net.layers.len(), 4);
    let built = dycklab::recognizer::build_recognizer(2, 3, 64).unwrap();
    assert_eq!(net, built);

    let g = dir.path().join("g.json");
    let o = dycklab(&[
        "export-weights",
        "generate",
        "--k",
        "2",
        "--D",
        "3",
        "--n-max",
        "64",
        "--out",
        path(&g),
    ]);
    assert!(o.status.success());
    let net = dycklab::Network::from_json(&fs::read_to_string(&g).unwrap()).unwrap();
    assert_eq!(net.layers.len(), 2);
}
