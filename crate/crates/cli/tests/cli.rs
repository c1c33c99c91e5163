use std::path::{Path, PathBuf};

use bubblekit::engine::FederationExport;
use serde_json::Value;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn bubblectl(repo: &Path, args: &[&str]) -> Run {
    let mut argv: Vec<String> = vec!["bubblectl".into(), "--repo".into(), repo.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = bubblectl::dispatch(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn ok(repo: &Path, args: &[&str]) -> String {
    let r = bubblectl(repo, args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.err);
    r.out
}

fn json(repo: &Path, args: &[&str]) -> Value {
    let mut with = vec!["--json"];
    with.extend_from_slice(args);
    serde_json::from_str(&ok(repo, &with)).unwrap()
}

fn repo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["init"]);
    dir
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(format!("{name}.json"))
}

#[test]
fn clone_and_dissolve_reproduce_the_reuse_example() {
    let dir = repo();
    let r = dir.path();
    ok(r, &["create", "B1", "--text", "req/1=requirement 1"]);
    ok(r, &["derive", "B1", "--name", "B2"]);
    ok(r, &["commit", "B2", "--text", "req/1a=refined 1a"]);
    ok(r, &["clone", "B2", "--name", "B3"]);
    let view = ok(r, &["resolve", "B3"]);
    assert!(view.contains("req/1\t") && view.contains("req/1a\t"), "{view}");
    assert_eq!(ok(r, &["cat", "B3", "req/1a"]), "refined 1a\n");

    ok(r, &["commit", "B3", "--text", "req/1a=updated 1b"]);
    let d = json(r, &["dissolve", "B3", "B2"]);
    assert_eq!(d["historical_origins"].as_array().unwrap().len(), 1);
    let examined = ok(r, &["examine", "B3"]);
    assert!(examined.contains("B3 -> B1 [structural]"), "{examined}");
    assert!(examined.contains("B3 -> B2 [historical]"), "{examined}");
}

#[test]
fn upstream_commit_leaves_one_pending_signal() {
    let dir = repo();
    let r = dir.path();
    ok(r, &["create", "B-T1", "--text", "src/f.c=v1"]);
    ok(r, &["derive", "B-T1", "--name", "B-T2"]);
    ok(r, &["commit", "B-T1", "--text", "src/f.c=v2"]);
    let listed = json(r, &["stress", "list", "B-T2"]);
    assert_eq!(listed["pending"].as_array().unwrap().len(), 1);
    let decided = ok(r, &["--actor", "maria", "stress", "decline", "B-T2"]);
    assert!(decided.contains("pinned old values"), "{decided}");
    assert_eq!(ok(r, &["cat", "B-T2", "src/f.c"]), "v1\n");
    let log = std::fs::read_to_string(r.join("log/stress.log")).unwrap();
    assert!(log.trim_end().ends_with("decline maria"), "{log}");
    assert!(ok(r, &["stress", "list", "B-T2"]).starts_with("no pending signals"));
}

#[test]
fn load_bearing_retract_fails_with_its_code() {
    let dir = repo();
    let r = dir.path();
    ok(r, &["create", "Ba", "--text", "a=1"]);
    ok(r, &["derive", "Ba", "--name", "Bx"]);
    ok(r, &["commit", "Bx", "--text", "a=2"]);
    ok(r, &["derive", "Bx", "--name", "Bc"]);
    let run = bubblectl(r, &["retract", "Bx"]);
    assert_eq!(run.code, 1);
    assert!(run.err.contains("NOT_RETRACTABLE"), "{}", run.err);
    let run = bubblectl(r, &["--json", "retract", "Bx"]);
    let body: Value = serde_json::from_str(&run.out).unwrap();
    assert_eq!(body["error"]["code"], "NOT_RETRACTABLE");
}

#[test]
fn usage_errors_exit_two() {
    let dir = repo();
    assert_eq!(bubblectl(dir.path(), &["derive", "B1"]).code, 2);
    assert_eq!(bubblectl(dir.path(), &["frobnicate"]).code, 2);
}

#[test]
fn missing_repository_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = bubblectl(dir.path(), &["stats"]);
    assert_eq!(run.code, 1);
    assert!(run.err.contains("NO_REPOSITORY"));
}

#[test]
fn json_export_round_trips_through_the_exporter_schema() {
    let dir = repo();
    let r = dir.path();
    ok(r, &["create", "lib", "--text", "x.h=int x;"]);
    ok(r, &["create", "app", "--text", "main.c=int main;"]);
    ok(r, &["embed", "app", "lib", "--mount", "vendor/lib"]);
    ok(r, &["constraints", "add", "app", "--forbid-path", "**/*.o"]);
    let text = ok(r, &["export", "json"]);
    let parsed = FederationExport::parse(&text).unwrap();
    assert_eq!(parsed.bubbles.len(), 2);
    let listed: FederationExport = serde_json::from_value(json(r, &["list"])).unwrap();
    assert_eq!(listed, parsed);
    let as_json: FederationExport = serde_json::from_value(json(r, &["export", "json"])).unwrap();
    assert_eq!(as_json, parsed);
    let dot = ok(r, &["export", "dot"]);
    assert!(dot.contains("style=dotted, label=\"vendor/lib/\""), "{dot}");
    assert!(ok(r, &["constraints", "check", "app"]).contains("all constraints hold"));
}

#[test]
fn ambiguous_and_unknown_references() {
    let dir = repo();
    let r = dir.path();
    ok(r, &["create", "same"]);
    ok(r, &["create", "same"]);
    assert!(bubblectl(r, &["resolve", "same"]).err.contains("AMBIGUOUS_REF"));
    assert!(bubblectl(r, &["resolve", "nobody"]).err.contains("UNKNOWN_REF"));
}

#[test]
fn stats_and_gc() {
    let dir = repo();
    let r = dir.path();
    ok(r, &["create", "a", "--text", "f=1"]);
    ok(r, &["commit", "a", "--text", "f=2"]);
    let stats = json(r, &["stats"]);
    assert_eq!(stats["bubbles"], 1);
    assert_eq!(stats["change_sets"], 1);
    let gc = json(r, &["gc"]);
    assert!(gc["blobs_removed"].as_u64().is_some());
}

#[test]
fn scenario_run_reports_fixture_results() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    let dot = r.join("decline_fork_retract.dot");
    let out = ok(r, &["scenario", "run", fixture("decline_fork_retract").to_str().unwrap(), "--dot", dot.to_str().unwrap()]);
    assert!(out.starts_with("scenario decline_fork_retract"), "{out}");
    assert!(std::fs::read_to_string(&dot).unwrap().contains("retracted"));

    let out = ok(r, &["scenario", "run", fixture("forbidden_provenance").to_str().unwrap()]);
    assert!(out.contains("embed -> CONSTRAINT_VIOLATION"), "{out}");

    let cmp = json(r, &["scenario", "run", fixture("fix_fan_out").to_str().unwrap(), "--compare-baselines"]);
    assert_eq!(cmp["comparison"]["baseline"]["applications"], 7);
    assert_eq!(cmp["comparison"]["baseline"]["unfixed_heads"], 1);
    assert_eq!(cmp["comparison"]["bubble"]["commits"], 1);
    assert_eq!(cmp["comparison"]["bubble"]["new_blobs"], 1);
    assert_eq!(cmp["comparison"]["bubble"]["pending_signals"], 1);
}

#[test]
fn gov_run_reports_each_governor() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gov", "run", fixture("cross_governor").to_str().unwrap(), "--seed", "3"]);
    for g in ["g1", "g2", "g3"] {
        assert!(out.contains(&format!("  {g}: owns")), "{out}");
    }
    assert!(out.contains("0 pending signals"), "{out}");
}

#[test]
fn bad_script_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(fixture("clone_dissolve")).unwrap().replace("\"parent\": \"B1\"", "\"parent\": \"B0\"");
    std::fs::write(&path, text).unwrap();
    let run = bubblectl(dir.path(), &["scenario", "run", path.to_str().unwrap()]);
    assert_eq!(run.code, 1);
    assert!(run.err.contains("SCRIPT_ERROR") && run.err.contains("line 12"), "{}", run.err);
}
