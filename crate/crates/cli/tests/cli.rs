use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ftm_cli::manifest::RunManifest;
use ftm_core::synth::CorpusSpec;

const TINY: &str = "[corpus]\nseed = 11\n\
    train = { vt_directed = 6, vt_undirected = 4, tb_directed = 5, tb_undirected = 4 }\n\
    eval = { vt_directed = 3, vt_undirected = 3, tb_directed = 3, tb_undirected = 3 }\n\
    [train]\npretrain_steps = 2\nfinetune_steps = 2\neval_every = 1\n";

fn ftm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run ftm")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Work { dir }
    }

    fn p(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn corpus(&self) -> String {
        ok(ftm(&["gen-data", "--config", &self.p("tiny.toml"), "--out", &self.p("corpus")]));
        self.p("corpus")
    }
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn gen_data_writes_one_record_per_utterance() {
    let w = Work::new();
    let corpus = w.corpus();
    let spec: CorpusSpec = toml::from_str(&std::fs::read_to_string(w.path("corpus/corpus.toml")).unwrap()).unwrap();
    let lines = std::fs::read_to_string(Path::new(&corpus).join("manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), spec.train.total() + spec.eval.total());
    assert_eq!(spec.train.total() + spec.eval.total(), 19 + 12);
    let m = RunManifest::load(&w.path("corpus/run_manifest.json")).unwrap();
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.seed, 11);
    assert!(m.outputs.iter().any(|f| f == "manifest.jsonl"));
}

#[test]
fn malformed_config_names_the_field_and_exits_2() {
    let w = Work::new();
    std::fs::write(w.path("bad.toml"), "[corpus]\nseeed = 3\n").unwrap();
    let out = ftm(&["gen-data", "--config", &w.p("bad.toml"), "--out", &w.p("c")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeed"));

    let out = ftm(&["gen-data", "--config", &w.p("tiny.toml"), "--set", "model.block_shift=0", "--out", &w.p("c")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("block_shift"));
}

#[test]
fn environment_overrides_the_file_and_flags_override_both() {
    let w = Work::new();
    let run = |env: Option<&str>, set: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ftm"));
        cmd.args(["gen-data", "--config", &w.p("tiny.toml"), "--out", &w.p(out)]);
        if let Some(v) = env {
            cmd.env("FTM_CORPUS__SEED", v);
        }
        if let Some(s) = set {
            cmd.args(["--set", s]);
        }
        ok(cmd.output().unwrap());
        RunManifest::load(&w.path(out).join("run_manifest.json")).unwrap().seed
    };
    assert_eq!(run(None, None, "a"), 11);
    assert_eq!(run(Some("21"), None, "b"), 21);
    assert_eq!(run(Some("21"), Some("corpus.seed=31"), "c"), 31);
}

#[test]
fn existing_output_is_never_overwritten_without_force() {
    let w = Work::new();
    w.corpus();
    let out = ftm(&["gen-data", "--config", &w.p("tiny.toml"), "--out", &w.p("corpus")]);
    assert_eq!(out.status.code(), Some(2));
    ok(ftm(&["gen-data", "--config", &w.p("tiny.toml"), "--out", &w.p("corpus"), "--force"]));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let w = Work::new();
    let out = ftm(&["train", "--config", &w.p("tiny.toml"), "--corpus", &w.p("nowhere"), "--out", &w.p("t")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diverging_training_exits_4() {
    let w = Work::new();
    let corpus = w.corpus();
    let out = ftm(&[
        "train", "--config", &w.p("tiny.toml"), "--set", "train.lr=1e30", "--set", "train.pretrain_steps=6",
        "--corpus", &corpus, "--out", &w.p("t"),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_and_traj_produce_their_tables() {
    let w = Work::new();
    let corpus = w.corpus();
    ok(ftm(&["train", "--config", &w.p("tiny.toml"), "--corpus", &corpus, "--kind", "stcn", "--out", &w.p("m")]));
    for f in ["model.ftmc", "pretrain.ftmc", "train_log.csv", "train_holdout.csv", "config.toml"] {
        assert!(w.path("m").join(f).is_file(), "{f}");
    }
    assert_eq!(csv_rows(&w.path("m/train_log.csv")).len(), 2);

    let out = ok(ftm(&["eval", "--checkpoint", &w.p("m"), "--corpus", &corpus, "--out", &w.p("e")]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("eer"));
    let metrics = csv_rows(&w.path("e/results/metrics.csv"));
    assert_eq!(metrics.iter().filter(|r| &r[0] == "eer").count(), 2);
    for inv in ["vt", "tb"] {
        assert!(w.path("e/results").join(format!("det_{inv}.csv")).is_file());
        assert!(w.path("e/results").join(format!("early_mitigation_{inv}.csv")).is_file());
    }

    ok(ftm(&["traj", "--checkpoint", &w.p("m"), "--corpus", &corpus, "--out", &w.p("tr")]));
    assert!(!csv_rows(&w.path("tr/results/trajectories.csv")).is_empty());
}

#[test]
fn a2a_has_no_trajectory() {
    let w = Work::new();
    let corpus = w.corpus();
    ok(ftm(&["train", "--config", &w.p("tiny.toml"), "--corpus", &corpus, "--kind", "a2a", "--out", &w.p("m")]));
    let out = ftm(&["traj", "--checkpoint", &w.p("m"), "--corpus", &corpus, "--out", &w.p("tr")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn matrix_fills_every_cell() {
    let w = Work::new();
    let corpus = w.corpus();
    ok(ftm(&["matrix", "--config", &w.p("tiny.toml"), "--corpus", &corpus, "--out", &w.p("mx")]));
    let rows = csv_rows(&w.path("mx/results/matrix.csv"));
    assert_eq!(rows.len(), 3 * 4 * 2);
    for r in &rows {
        let eer: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&eer));
    }
    for tag in ["vt", "tb", "vt_tb"] {
        for kind in ["stcn", "slstm", "save", "a2a"] {
            assert!(w.path("mx/models").join(format!("{tag}-{kind}.ftmc")).is_file(), "{tag}-{kind}");
        }
    }
}

#[test]
fn bench_reports_each_kind_and_length() {
    let w = Work::new();
    let out = ok(ftm(&[
        "bench", "--lengths", "128,256,512,1024", "--repeats", "3", "--out", &w.p("b"),
    ]));
    let rows = csv_rows(&w.path("b/results/bench.csv"));
    assert_eq!(rows.len(), 4 * 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("peak_bytes"));
    let out = ftm(&["bench", "--lengths", "128", "--repeats", "1", "--out", &w.p("b2")]);
    assert_eq!(out.status.code(), Some(2));
}
