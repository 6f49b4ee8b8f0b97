use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_instructforge"));
    c.env("RUST_LOG", "warn");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mock_run(out: &Path, extra: &[&str]) -> Output {
    let cfg = configs().join("reasoning_mock.toml");
    let mut args = vec!["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "target_count=12"];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn run_writes_every_artifact_and_resumes_as_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let first = mock_run(&out, &[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    for f in ["manifest.json", "records.jsonl", "rollouts.jsonl", "verdicts.jsonl", "kept.jsonl", "funnel.json", "stats.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let before = fs::read(out.join("kept.jsonl")).unwrap();
    let again = mock_run(&out, &[]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("already complete"));
    assert_eq!(fs::read(out.join("kept.jsonl")).unwrap(), before);

    let stats = run(&["stats", out.to_str().unwrap()]);
    assert!(stats.status.success());
    let text = stdout(&stats);
    assert!(text.contains("self_consistency") && text.contains("answer_consistency"), "{text}");
    let json = run(&["stats", "--json", out.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["generation"]["records"], 12);
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = configs().join("reasoning_mock.toml");
    let base = ["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "target_count=5"];
    let early = bin().arg("filter").args(base).output().unwrap();
    assert_eq!(early.status.code(), Some(2), "filter before rollout is a config error");
    for stage in ["generate", "rollout", "filter"] {
        let o = bin().arg(stage).args(base).output().unwrap();
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read_to_string(out.join("records.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_value = mock_run(&dir.path().join("a"), &["--set", "k_rollout=many"]);
    assert_eq!(bad_value.status.code(), Some(2));

    assert!(mock_run(&dir.path().join("b"), &[]).status.success());
    let changed = mock_run(&dir.path().join("b"), &["--set", "seed=77"]);
    assert_eq!(changed.status.code(), Some(2), "manifest mismatch");

    let malformed = mock_run(&dir.path().join("c"), &["--set", "backend.world.malformed_rate=1.0"]);
    assert_eq!(malformed.status.code(), Some(4), "{}", String::from_utf8_lossy(&malformed.stderr));

    let cfg = dir.path().join("http.toml");
    let pool = configs().join("seeds_reasoning.jsonl");
    fs::write(
        &cfg,
        format!(
            "mode = \"reasoning\"\ntemplate_id = \"reasoning_cot_solve\"\npool = {:?}\ntarget_count = 1\n\
             [gateway]\nmax_attempts = 2\ninitial_backoff_ms = 1\n\
             [backend]\ntype = \"http\"\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"\ntimeout_secs = 2\n",
            pool.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = dir.path().join("d");
    let unreachable = run(&["generate", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(unreachable.status.code(), Some(3), "{}", String::from_utf8_lossy(&unreachable.stderr));
}

#[test]
fn mock_override_replaces_the_http_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("reasoning_http.toml");
    let out = dir.path().join("run");
    let o = run(&[
        "run",
        "-c",
        cfg.to_str().unwrap(),
        "--backend",
        "mock",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "target_count=4",
        "--set",
        &format!("record_transcript={:?}", dir.path().join("t.jsonl").to_str().unwrap()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("t.jsonl").exists());
}

#[test]
fn verify_reports_equivalence() {
    let yes = run(&["verify", "\\frac{6}{8}", "0.75"]);
    assert_eq!(yes.status.code(), Some(0));
    assert!(stdout(&yes).contains("equivalent"));
    assert_eq!(run(&["verify", "\\sqrt{8}", "2\\sqrt{2}"]).status.code(), Some(0));
    assert_eq!(run(&["verify", "2", "3"]).status.code(), Some(1));
    assert_eq!(run(&["verify", "???", "3"]).status.code(), Some(4));
}

#[test]
fn render_template_matches_the_golden_fixture() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/reasoning_cot_solve.txt");
    let o = run(&[
        "render-template",
        "reasoning_cot_solve",
        "--first",
        "What is the sum of the first 10 positive integers?",
        "--second",
        "If 3x + 2 = 11, what is x?",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), format!("{}\n", fs::read_to_string(golden).unwrap()));
    let raw = run(&["render-template", "if_no_cot"]);
    assert!(stdout(&raw).contains("{INSTRUCTION 1}"));
}

#[test]
fn taxonomy_lists_eight_categories() {
    let o = run(&["taxonomy"]);
    assert_eq!(stdout(&o).lines().count(), 8);
    assert!(stdout(&o).contains("Writing & Storytelling"));
}
