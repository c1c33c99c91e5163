use std::path::PathBuf;

use bubblekit::governor::{GovernorId, Partition, TransportContract};
use bubblekit::scenario::{run_scenario_with, Governance, RunOptions, ScenarioReport};
use bubblekit::Error;

const FIXTURES: [&str; 5] = ["clone_dissolve", "cross_governor", "decline_fork_retract", "forbidden_provenance", "fix_fan_out"];

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(format!("{name}.json"));
    std::fs::read_to_string(path).unwrap()
}

fn quiet() -> RunOptions {
    RunOptions { governance: None, interactive: false }
}

fn three_governors(seed: u64) -> Governance {
    let ids: Vec<GovernorId> = ["g1", "g2", "g3"].into_iter().map(GovernorId::new).collect();
    Governance {
        transport: TransportContract {
            seed,
            latency: (1, 5),
            partitions: vec![Partition { start: 3, end: 25, between: (ids[0].clone(), ids[2].clone()) }],
            ..TransportContract::default()
        },
        governors: ids,
        ..Governance::default()
    }
}

fn run(name: &str, options: RunOptions) -> ScenarioReport {
    match run_scenario_with(&fixture(name), options) {
        Ok(r) => r,
        Err(e) => panic!("{name}: {e}"),
    }
}

#[test]
fn every_fixture_runs_under_its_own_governance() {
    for name in FIXTURES {
        let report = run(name, quiet());
        assert!(report.events.iter().all(|e| e.line > 0), "{name}");
    }
}

#[test]
fn every_fixture_runs_on_three_governors() {
    for name in FIXTURES {
        run(name, RunOptions { governance: Some(three_governors(11)), interactive: false });
    }
}

#[test]
fn forbidden_provenance_records_the_violation_code() {
    let report = run("forbidden_provenance", quiet());
    let embed = report.events.iter().find(|e| e.op == "embed").unwrap();
    assert_eq!(embed.status, "CONSTRAINT_VIOLATION");
    assert!(report.bubble("H").unwrap().embeds.is_empty());
}

#[test]
fn fix_fan_out_leaves_one_signal_pending() {
    let report = run("fix_fan_out", quiet());
    assert_eq!(report.pending, 1);
    assert_eq!(report.bubble("head8").unwrap().pending.len(), 1);
    assert_eq!(report.duplicate_deliveries, 0);
}

#[test]
fn failed_expectation_reports_its_line() {
    let text = fixture("clone_dissolve").replace("\"parents\": [\"B1\"]", "\"parents\": [\"B2\"]");
    match run_scenario_with(&text, quiet()) {
        Err(Error::Script { line, message }) => {
            assert_eq!(line, 19, "{message}");
            assert!(message.contains("parents"), "{message}");
        }
        other => panic!("expected a script error, got {other:?}"),
    }
}

#[test]
fn undefined_bubble_is_a_script_error() {
    let text = fixture("clone_dissolve").replace("\"source\": \"B2\", \"name\": \"B3\"", "\"source\": \"B7\", \"name\": \"B3\"");
    assert!(matches!(run_scenario_with(&text, quiet()), Err(Error::Script { line: 14, .. })));
}
