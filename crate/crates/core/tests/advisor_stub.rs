mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::{directive_json, stub_server, StubReply};
use laeids::advisor::{AdviceSource, RemoteAdvisor, RemoteAdvisorConfig};
use laeids::pso_select::{
    query_repository, select_features, DeviceProfile, FeatureMask, KnowledgeRepository, MatchKind, RepositoryEntry,
    SelectionConfig, SelectionResult,
};

const KEY_ENV: &str = "LAEIDS_STUB_API_KEY";
const KEY: &str = "sk-stub-secret";

fn config(endpoint: String, timeout_s: f64, max_retries: u32) -> RemoteAdvisorConfig {
    std::env::set_var(KEY_ENV, KEY);
    RemoteAdvisorConfig {
        endpoint,
        timeout_s,
        max_retries,
        api_key_env: KEY_ENV.into(),
        ..RemoteAdvisorConfig::default()
    }
}

fn run(replies: Vec<StubReply>, timeout_s: f64, max_retries: u32) -> (SelectionResult, RemoteAdvisor, usize) {
    let (url, count) = stub_server(replies);
    let mut advisor = RemoteAdvisor::new(config(url, timeout_s, max_retries));
    let data = common::toy_dataset(90, 5, 2, 12);
    let (a, b): (Vec<usize>, Vec<usize>) = (0..data.rows).partition(|r| r % 3 != 0);
    let cfg = SelectionConfig {
        particles: 4,
        epochs: 4,
        seed: 2,
        ..SelectionConfig::default()
    };
    let result = select_features(&data.subset(&a), &data.subset(&b), &cfg, &mut advisor).unwrap();
    for record in &result.log {
        record.params_used.validate().unwrap();
        record.next_params.validate().unwrap();
        assert_eq!(
            record.source == AdviceSource::Fallback,
            record.fallback_reason.is_some()
        );
    }
    let log = serde_json::to_string(&advisor.exchanges).unwrap();
    assert!(!log.contains(KEY));
    (result, advisor, count.load(Ordering::SeqCst))
}

#[test]
fn valid_replies_are_installed() {
    let (result, advisor, requests) = run(
        vec![StubReply::Content(directive_json(0.6, 1.2, 2.1, "HEALTHY"))],
        5.0,
        2,
    );
    assert_eq!(requests, 4);
    assert_eq!(advisor.exchanges.len(), 4);
    for record in &result.log {
        assert_eq!(record.source, AdviceSource::Remote);
        assert_eq!(
            (
                record.next_params.inertia_weight,
                record.next_params.cognitive,
                record.next_params.social
            ),
            (0.6, 1.2, 2.1)
        );
    }
}

#[test]
fn fenced_reply_is_accepted() {
    let fenced = format!("```json\n{}\n```", directive_json(0.5, 1.0, 1.0, "STAGNATION"));
    let (result, _, _) = run(vec![StubReply::Content(fenced)], 5.0, 0);
    assert!(result.log.iter().all(|r| r.source == AdviceSource::Remote));
}

#[test]
fn malformed_replies_fall_back_without_retry() {
    let replies = vec![
        StubReply::Content("I think you should raise the inertia.".into()),
        StubReply::Content(r#"{"w": 0.5, "c1": 1.0}"#.into()),
        StubReply::Content(r#"{"w": 0.5, "c1": 1.0, "c2": 1.0, "diagnosis": "UNSURE", "rationale": ""}"#.into()),
    ];
    let (result, _, requests) = run(replies, 5.0, 3);
    assert_eq!(requests, 4);
    for record in &result.log {
        assert_eq!(record.source, AdviceSource::Fallback);
        assert!(record
            .fallback_reason
            .as_deref()
            .unwrap()
            .starts_with("malformed response"));
    }
}

#[test]
fn out_of_range_values_are_clamped() {
    let (result, _, _) = run(
        vec![StubReply::Content(directive_json(9.0, -3.0, 40.0, "DIVERGENT_SEARCH"))],
        5.0,
        0,
    );
    for record in &result.log {
        assert_eq!(record.source, AdviceSource::Remote);
        let p = record.next_params;
        assert_eq!((p.inertia_weight, p.cognitive, p.social), (1.2, 0.0, 4.0));
    }
}

#[test]
fn timeouts_are_retried_then_fall_back() {
    let (result, advisor, requests) = run(vec![StubReply::Stall(Duration::from_secs(3))], 0.25, 1);
    assert_eq!(requests, 8);
    assert_eq!(advisor.exchanges.len(), 8);
    for record in &result.log {
        assert_eq!(record.source, AdviceSource::Fallback);
        assert_eq!(record.fallback_reason.as_deref(), Some("request timed out"));
    }
}

#[test]
fn server_errors_are_retried() {
    let replies = vec![
        StubReply::Status(500),
        StubReply::Content(directive_json(0.8, 1.0, 1.0, "HEALTHY")),
    ];
    let (result, advisor, requests) = run(replies, 5.0, 1);
    assert_eq!(requests, 8);
    assert!(result.log.iter().all(|r| r.source == AdviceSource::Remote));
    let statuses: Vec<Option<u16>> = advisor.exchanges.iter().map(|e| e.status).collect();
    assert_eq!(statuses[..2], [Some(500), Some(200)]);

    let (result, _, _) = run(vec![StubReply::Status(503)], 5.0, 2);
    assert!(result
        .log
        .iter()
        .all(|r| r.fallback_reason.as_deref() == Some("http error: status 503")));
}

#[test]
fn mixed_faults_always_complete() {
    let replies = vec![
        StubReply::Content(directive_json(0.7, 1.4, 1.6, "HEALTHY")),
        StubReply::Content("{not json".into()),
        StubReply::Content(directive_json(-1.0, 7.0, f64::MAX, "PREMATURE_CONVERGENCE")),
        StubReply::Stall(Duration::from_secs(2)),
        StubReply::Status(500),
    ];
    let (result, _, _) = run(replies, 0.25, 0);
    assert_eq!(result.log.len(), 4);
    let sources: Vec<AdviceSource> = result.log.iter().map(|r| r.source).collect();
    assert_eq!(
        sources,
        [
            AdviceSource::Remote,
            AdviceSource::Fallback,
            AdviceSource::Remote,
            AdviceSource::Fallback
        ]
    );
}

#[test]
fn missing_key_falls_back_without_contacting_the_endpoint() {
    let (url, count) = stub_server(vec![StubReply::Content(directive_json(0.6, 1.2, 2.1, "HEALTHY"))]);
    let mut advisor = RemoteAdvisor::new(RemoteAdvisorConfig {
        endpoint: url,
        api_key_env: "LAEIDS_STUB_KEY_THAT_IS_NEVER_SET".into(),
        ..RemoteAdvisorConfig::default()
    });
    let data = common::toy_dataset(60, 4, 2, 1);
    let (a, b): (Vec<usize>, Vec<usize>) = (0..data.rows).partition(|r| r % 2 == 0);
    let cfg = SelectionConfig {
        particles: 3,
        epochs: 2,
        ..SelectionConfig::default()
    };
    let result = select_features(&data.subset(&a), &data.subset(&b), &cfg, &mut advisor).unwrap();
    assert!(result.log.iter().all(|r| r.source == AdviceSource::Fallback));
    assert_eq!(count.load(Ordering::SeqCst), 0);
}

fn repo() -> KnowledgeRepository {
    let entry = |id: &str, class: &str, attributes: Vec<f64>| RepositoryEntry {
        id: id.into(),
        profile: DeviceProfile {
            device_class: class.into(),
            attributes,
            schema: "toy".into(),
        },
        mask: Some(FeatureMask::full(3)),
        fitness: Some(1.0),
        run_digest: None,
        error: None,
    };
    KnowledgeRepository {
        version: 1,
        schema: "toy".into(),
        feature_count: 3,
        entries: vec![
            entry("e0", "quadrotor", vec![1.0, 2.0]),
            entry("e1", "fixed_wing", vec![5.0, 1.0]),
            entry("e2", "ground_sensor", vec![0.1, 9.0]),
        ],
    }
}

fn novel() -> DeviceProfile {
    DeviceProfile {
        device_class: "balloon".into(),
        attributes: vec![1.2, 2.5],
        schema: "toy".into(),
    }
}

#[test]
fn repository_pick_is_honoured_only_for_candidates() {
    let repo = repo();
    let baseline = query_repository(&repo, &novel(), None).unwrap();
    assert_eq!(baseline.kind, MatchKind::Similarity);
    let other = if baseline.entry_id == "e2" { "e1" } else { "e2" };

    let (url, _) = stub_server(vec![StubReply::Content(format!(r#"{{"entry_id": "{other}"}}"#))]);
    let mut advisor = RemoteAdvisor::new(config(url, 5.0, 0));
    let picked = query_repository(&repo, &novel(), Some(&mut advisor)).unwrap();
    assert_eq!((picked.kind, picked.entry_id.as_str()), (MatchKind::AdvisorPick, other));

    for reply in [
        StubReply::Content(r#"{"entry_id": "e9"}"#.into()),
        StubReply::Status(500),
    ] {
        let (url, _) = stub_server(vec![reply]);
        let mut advisor = RemoteAdvisor::new(config(url, 5.0, 0));
        let m = query_repository(&repo, &novel(), Some(&mut advisor)).unwrap();
        assert_eq!(m, baseline);
    }

    let exact = DeviceProfile {
        device_class: "fixed_wing".into(),
        ..novel()
    };
    let (url, count) = stub_server(vec![StubReply::Content(r#"{"entry_id": "e0"}"#.into())]);
    let mut advisor = RemoteAdvisor::new(config(url, 5.0, 0));
    let m = query_repository(&repo, &exact, Some(&mut advisor)).unwrap();
    assert_eq!((m.kind, m.entry_id.as_str()), (MatchKind::ExactClass, "e1"));
    assert_eq!(count.load(Ordering::SeqCst), 0);
}
