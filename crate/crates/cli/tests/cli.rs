use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hogrn::checkpoint::Checkpoint;
use hogrn::evaluation::{evaluate_split, Directions, KnownFacts};
use hogrn::kgdata::Dataset;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn hogrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hogrn"))
        .args(args)
        .env_remove("HOGRN_DATA_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn kv(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
        .to_string()
}

fn train_toy(dir: &Path, data: &str, extra: &[&str]) -> Output {
    let data = fixture(data);
    let mut args = vec![
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
        "--dim",
        "8",
        "--max-epochs",
        "10",
        "--patience",
        "50",
        "--learning-rate",
        "0.05",
    ];
    args.extend_from_slice(extra);
    hogrn(&args)
}

#[test]
fn stats_on_toy_fixture_matches_hand_count() {
    let data = fixture("toy");
    let out = hogrn(&["stats", "--format", "kv", "--data-dir", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    // 12 ring edges plus 6 skips from even nodes; odd skips are held out.
    assert_eq!(kv(&text, "entities"), "12");
    assert_eq!(kv(&text, "relations"), "2");
    assert_eq!(kv(&text, "train"), "18");
    assert_eq!(kv(&text, "valid"), "3");
    assert_eq!(kv(&text, "test"), "3");
    assert_eq!(kv(&text, "average_out_degree"), "1.5000");
    // six nodes with out-degree 2, six with 1
    assert_eq!(kv(&text, "median_out_degree"), "1.5");
}

#[test]
fn data_dir_comes_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_hogrn"))
        .args(["stats", "--format", "kv"])
        .env("HOGRN_DATA_DIR", fixture("triangle"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(kv(&stdout(&out), "entities"), "3");
}

#[test]
fn stats_on_empty_directory_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hogrn(&["stats", "--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.txt"), "{}", stderr(&out));
}

#[test]
fn train_writes_checkpoint_and_one_log_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_toy(dir.path(), "toy", &["--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("model.ckpt").is_file());
    assert!(dir.path().join("model.manifest.json").is_file());
    let log = fs::read_to_string(dir.path().join("epochs.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 10);
    for (i, line) in lines.iter().enumerate() {
        assert!(line.starts_with(&format!("epoch={} loss=", i + 1)), "{line}");
    }
}

#[test]
fn seed_is_mandatory_for_train() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_toy(dir.path(), "toy", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--seed"));
}

#[test]
fn same_seed_gives_identical_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_toy(a.path(), "toy", &["--seed", "11"]);
    let rb = train_toy(b.path(), "toy", &["--seed", "11"]);
    assert!(ra.status.success() && rb.status.success());
    // wall-clock seconds close each line and legitimately differ
    let log = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("epochs.log"))
            .unwrap()
            .lines()
            .map(|l| l.split(" seconds=").next().unwrap().to_string())
            .collect()
    };
    assert_eq!(log(a.path()).len(), 10);
    assert_eq!(log(a.path()), log(b.path()));
    assert_eq!(kv(&stdout(&ra), "best_valid_mrr"), kv(&stdout(&rb), "best_valid_mrr"));
}

#[test]
fn ablation_flag_is_recorded_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_toy(dir.path(), "toy", &["--seed", "1", "--ablation", "hogrn-r"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("model.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["train"]["variant"], "hogrn-r");
    assert_eq!(manifest["model"]["variant"], "hogrn-r");
    let names: Vec<&str> = manifest["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["entity_embedding", "relation_embedding"]);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# toy\ndim = 4\nlayers = 1\nhead = transe\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = train_toy(&out_dir, "toy", &["--seed", "2", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = Checkpoint::load(&out_dir.join("model.ckpt")).unwrap();
    // --dim 8 from the command line beats dim = 4 from the file
    assert_eq!(ckpt.manifest.train.dim, 8);
    assert_eq!(ckpt.manifest.train.layers, 1);
    assert_eq!(ckpt.manifest.model.head.to_string(), "transe");
}

#[test]
fn unknown_config_key_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "dropout = 0.2\n").unwrap();
    let out = train_toy(dir.path(), "toy", &["--seed", "2", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown key `dropout`"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_toy(dir.path(), "toy", &["--seed", "2", "--learning-rate", "1e200"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn eval_matches_in_process_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_toy(dir.path(), "toy", &["--seed", "5"]).status.success());
    let data_dir = fixture("toy");
    let ckpt_path = dir.path().join("model.ckpt");
    let out = hogrn(&[
        "eval",
        "--data-dir",
        data_dir.to_str().unwrap(),
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--format",
        "kv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let data = Dataset::load(&data_dir).unwrap();
    let model = Checkpoint::load(&ckpt_path).unwrap().model().unwrap();
    let (states, _) = model.encode(&data.extended_graph().unwrap()).unwrap();
    let known = KnownFacts::from_store(&data.store, 2);
    let report =
        evaluate_split(&states, model.config.head, &data.store.test, &known, Directions::Both)
            .unwrap();
    assert_eq!(stdout(&out), report.to_key_values());
}

#[test]
fn perfect_checkpoint_reports_100() {
    // valid and test hold the same three training triples, so a checkpoint
    // selected at 100 on valid is perfect on test too
    let dir = tempfile::tempdir().unwrap();
    let data_dir = fixture("memorize");
    let out = hogrn(&[
        "train",
        "--data-dir",
        data_dir.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--seed",
        "0",
        "--dim",
        "32",
        "--max-epochs",
        "150",
        "--patience",
        "150",
        "--learning-rate",
        "0.05",
        "--aux-weight",
        "0",
        "--mask-ratio",
        "0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(kv(&stdout(&out), "best_valid_mrr"), "100.00");
    let ckpt = dir.path().join("model.ckpt");
    let out = hogrn(&[
        "eval",
        "--data-dir",
        data_dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mrr_line = stdout(&out).lines().find(|l| l.starts_with("mrr")).unwrap().to_string();
    assert_eq!(mrr_line.split_whitespace().nth(1), Some("100.00"));
}

#[test]
fn eval_with_missing_checkpoint_fails() {
    let data = fixture("toy");
    let out = hogrn(&[
        "eval",
        "--data-dir",
        data.to_str().unwrap(),
        "--checkpoint",
        "/nonexistent/model.ckpt",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/model.ckpt"));
}

#[test]
fn eval_against_other_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_toy(dir.path(), "toy", &["--seed", "5"]).status.success());
    let other = fixture("triangle");
    let ckpt = dir.path().join("model.ckpt");
    let out = hogrn(&[
        "eval",
        "--data-dir",
        other.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

fn triangle_checkpoint(dir: &Path) -> PathBuf {
    let out = train_toy(dir, "triangle", &["--seed", "0", "--max-epochs", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("model.ckpt")
}

fn explain_triangle(ckpt: &Path, format: &str, head: &str) -> Output {
    let data = fixture("triangle");
    hogrn(&[
        "explain",
        "--data-dir",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--head",
        head,
        "--relation",
        "colleague_of",
        "--tail",
        "carol",
        "--format",
        format,
    ])
}

#[test]
fn explain_triangle_finds_direct_and_two_hop_paths() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = triangle_checkpoint(dir.path());
    let out = explain_triangle(&ckpt, "json", "alice");
    assert!(out.status.success(), "{}", stderr(&out));
    let records: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let records = records.as_array().unwrap();
    assert_eq!(records.len(), 2);
    let mut shapes: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            r["hops"]
                .as_array()
                .unwrap()
                .iter()
                .map(|h| h["relation"].as_str().unwrap().to_string())
                .collect()
        })
        .collect();
    shapes.sort();
    assert_eq!(shapes, [vec!["colleague_of".to_string()], vec!["knows".into(), "works_with".into()]]);
    for r in records {
        let score = r["score"].as_f64().unwrap();
        assert!(score > 0.0 && score <= 1.0);
    }
}

#[test]
fn explain_dot_output_parses() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = triangle_checkpoint(dir.path());
    let out = explain_triangle(&ckpt, "dot", "alice");
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let ast = dot_parser::ast::Graph::try_from(text.as_str()).expect("valid DOT");
    let graph = dot_parser::canonical::Graph::from(ast);
    assert!(graph.is_digraph);
    assert_eq!(graph.nodes.set.len(), 3);
    // three path edges plus the dashed query edge
    assert_eq!(graph.edges.set.len(), 4);
}

#[test]
fn explain_unknown_entity_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = triangle_checkpoint(dir.path());
    let out = explain_triangle(&ckpt, "json", "mallory");
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("mallory"), "{}", stderr(&out));
}

#[test]
fn sparsify_keeps_requested_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("toy");
    let args = |out: &Path| {
        vec![
            "sparsify".to_string(),
            "--data-dir".into(),
            data.to_str().unwrap().into(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
            "--keep".into(),
            "0.5".into(),
            "--seed".into(),
            "4".into(),
        ]
    };
    let run = |out: &Path| {
        let a = args(out);
        hogrn(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let out = run(&dir.path().join("a"));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(kv(&stdout(&out), "kept_train"), "9");
    let train = fs::read_to_string(dir.path().join("a/train.txt")).unwrap();
    assert_eq!(train.lines().count(), 9);
    assert_eq!(
        fs::read_to_string(dir.path().join("a/test.txt")).unwrap(),
        fs::read_to_string(data.join("test.txt")).unwrap()
    );
    assert!(run(&dir.path().join("b")).status.success());
    assert_eq!(train, fs::read_to_string(dir.path().join("b/train.txt")).unwrap());
}

#[test]
fn selfcheck_passes_and_catches_injected_fault() {
    let ok = hogrn(&["selfcheck"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("0 failed"));

    let bad = hogrn(&["selfcheck", "--inject-fault", "gelu"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).contains("FAIL grad/gelu"));

    let unknown = hogrn(&["selfcheck", "--inject-fault", "warp"]);
    assert_eq!(unknown.status.code(), Some(1));
}
