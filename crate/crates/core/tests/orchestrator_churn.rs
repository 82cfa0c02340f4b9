mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{churn_script, Script};
use laeids::classify::Tier;
use laeids::orchestrator::{
    handle_event, run_scenario, AlertAction, EventBody, OrchestratorConfig, OrchestratorState, PerceptionEvent,
    Severity,
};
use laeids::swarm_env::default_profiles;

#[test]
fn churn_trace_matches_hand_expectation() {
    let (bundle, corpus) = common::small_bundle();
    let events = churn_script(&corpus);
    let run = run_scenario(&events, &bundle, &OrchestratorConfig::default()).unwrap();

    let severities: Vec<Severity> = run.alerts.iter().map(|a| a.severity).collect();
    assert_eq!(
        severities,
        [
            Severity::Intrusion,
            Severity::Info,
            Severity::Info,
            Severity::Suspect,
            Severity::Suspect,
            Severity::Intrusion
        ]
    );
    let nodes: Vec<&str> = run.alerts.iter().map(|a| a.node_id.as_str()).collect();
    assert_eq!(nodes, ["B", "B", "B", "C", "A", "C"]);
    let actions: Vec<AlertAction> = run.alerts.iter().map(|a| a.action).collect();
    assert_eq!(
        actions,
        [
            AlertAction::Isolated,
            AlertAction::None,
            AlertAction::None,
            AlertAction::Reported,
            AlertAction::Reported,
            AlertAction::Isolated
        ]
    );

    let isolated: BTreeSet<String> = ["B", "C"].iter().map(|s| s.to_string()).collect();
    assert_eq!(run.state.isolated, isolated);
    assert_eq!(run.state.dropped_batches, BTreeMap::from([("B".to_string(), 2)]));
    assert_eq!(run.summary.isolated_nodes, ["B", "C"]);

    assert_eq!(run.alerts[4].verdicts.len(), 4);
    assert!(run.alerts[4].verdicts.iter().all(|v| v.tier == Tier::Light));
    assert_eq!(run.alerts[4].verdicts.iter().filter(|v| v.is_malicious).count(), 1);
    assert_eq!(run.state.nodes["A"].tier, Tier::Light);

    // A, B(attack), C(benign), A, C(attack): 5 classified batches of 4.
    assert_eq!(run.verdicts.len(), 20);
}

#[test]
fn isolation_is_absorbing() {
    let (bundle, corpus) = common::small_bundle();
    let cfg = OrchestratorConfig::default();
    let mut state = OrchestratorState::default();
    let events = churn_script(&corpus);
    for e in &events[..4] {
        handle_event(&mut state, &bundle, &cfg, e);
    }
    assert!(state.is_isolated("B"));
    let mut script = Script::new(&corpus);
    for round in 0..6 {
        let t = events[3].timestamp_us + 1 + round as u64;
        let body = match round % 3 {
            0 => EventBody::NodeLeave,
            1 => EventBody::NodeJoin {
                profile: default_profiles("synthetic")[2].clone(),
            },
            _ => {
                script.traffic("B", 0, 2);
                script.events.pop().unwrap().body
            }
        };
        let out = handle_event(
            &mut state,
            &bundle,
            &cfg,
            &PerceptionEvent {
                node_id: "B".into(),
                timestamp_us: t,
                body,
            },
        );
        assert!(out.verdicts.is_empty());
        assert!(state.is_isolated("B"));
    }
    assert_eq!(state.dropped("B"), 2);
}
