#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use laeids::advisor::RuleAdvisor;
use laeids::classify::{ClassifierInput, Dataset, ModelBundle, ModelPool, ResourceStatus, TierPolicy};
use laeids::diffusion::{pretrain, PretrainConfig};
use laeids::harness::{representations, PreparedSplit};
use laeids::imaging::{fit_scaler, session_to_image, ImageConfig};
use laeids::ingest::FlowSession;
use laeids::orchestrator::{EventBody, PerceptionEvent, PipelineBundle};
use laeids::pso_select::{build_repository, FeatureMask, ProfileDataset, SelectionConfig};
use laeids::swarm_env::{default_profiles, synth_corpus, synth_schema, SynthConfig};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Compares `actual` with a frozen fixture. With `LAEIDS_REGEN_FIXTURES=1`
/// the fixture is rewritten instead.
pub fn check_fixture(name: &str, actual: &str) {
    let path = fixture_path(name);
    if std::env::var("LAEIDS_REGEN_FIXTURES").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("fixture {name} unreadable ({e}); regenerate with LAEIDS_REGEN_FIXTURES=1"));
    assert!(expected == actual, "fixture {name} differs from the current output");
}

/// Deterministic LCG so the toy data does not depend on the crate's RNG.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407))
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Binary toy data: the label is `x0 + ... + x{k-1} > k/2` plus a little
/// label noise; the remaining features are pure noise.
pub fn toy_dataset(rows: usize, features: usize, informative: usize, seed: u64) -> Dataset {
    let mut rng = Lcg::new(seed);
    let mut xs = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x: Vec<f64> = (0..features).map(|_| rng.next_f64()).collect();
        let s: f64 = x[..informative].iter().sum();
        let mut y = usize::from(s > informative as f64 / 2.0);
        if rng.next_f64() < 0.03 {
            y = 1 - y;
        }
        xs.push(x);
        labels.push(y);
    }
    Dataset::from_rows(&xs, labels, 2).unwrap()
}

pub fn small_corpus(seed: u64) -> Vec<FlowSession> {
    synth_corpus(&SynthConfig {
        n_benign: 60,
        n_malicious: 60,
        payload_len: 64,
        seed,
        ..SynthConfig::default()
    })
}

pub fn small_image() -> ImageConfig {
    ImageConfig::new(8, 8, laeids::imaging::ImageSource::PayloadBytes).unwrap()
}

pub fn small_pretrain() -> PretrainConfig {
    PretrainConfig {
        epochs: 3,
        batch_size: 16,
        hidden: vec![16, 8],
        steps: 20,
        seed: 5,
        dataset: "synthetic".into(),
        ..PretrainConfig::default()
    }
}

pub fn small_selection() -> SelectionConfig {
    SelectionConfig {
        particles: 6,
        epochs: 5,
        seed: 5,
        ..SelectionConfig::default()
    }
}

/// A complete online bundle built from the small synthetic corpus, plus the
/// corpus itself (the models have seen every session).
pub fn small_bundle() -> (PipelineBundle, Vec<FlowSession>) {
    let corpus = small_corpus(11);
    let schema = synth_schema();
    let image = small_image();
    let scaler = fit_scaler(&corpus).unwrap();
    let images: Vec<_> = corpus
        .iter()
        .map(|s| session_to_image(s, &image, Some(&scaler)).unwrap())
        .collect();
    let memory = pretrain(&images, &small_pretrain()).unwrap();
    let labels: Vec<usize> = corpus
        .iter()
        .map(|s| schema.class_index(s.label.as_deref().unwrap()).unwrap())
        .collect();
    let rows: Vec<Vec<f64>> = corpus.iter().map(|s| s.tabular_features.clone()).collect();
    let tabular = Dataset::from_rows(&rows, labels, 2).unwrap();
    let profiles = default_profiles(&schema.name);
    let datasets: Vec<ProfileDataset> = (0..profiles.len())
        .map(|i| {
            let (fit, val): (Vec<usize>, Vec<usize>) = (0..tabular.rows).partition(|r| (r + i) % 3 != 0);
            ProfileDataset {
                train: tabular.subset(&fit),
                val: tabular.subset(&val),
            }
        })
        .collect();
    let repository = build_repository(
        &schema.name,
        &profiles,
        &datasets,
        &small_selection(),
        &mut RuleAdvisor::default(),
    )
    .unwrap();
    let split = PreparedSplit {
        tabular,
        representation: representations(&corpus, &image, &scaler, &memory).unwrap(),
    };
    let mut masks = vec![FeatureMask::full(schema.feature_count())];
    for e in &repository.entries {
        if let Some(m) = &e.mask {
            if !masks.contains(m) {
                masks.push(m.clone());
            }
        }
    }
    let pools = masks
        .iter()
        .map(|m| {
            let data = split.inputs(None, m, ClassifierInput::Combined);
            ModelPool::train(&data, m, data.cols - m.count(), &schema.class_names, 3, false).unwrap()
        })
        .collect();
    let models = ModelBundle {
        schema_name: schema.name.clone(),
        schema_digest: String::new(),
        class_names: schema.class_names.clone(),
        input: ClassifierInput::Combined,
        scaler: Some(scaler),
        memory_digest: String::new(),
        pools,
    };
    (
        PipelineBundle {
            image,
            memory,
            repository,
            models,
            policy: TierPolicy::default(),
        },
        corpus,
    )
}

pub struct Script {
    pub events: Vec<PerceptionEvent>,
    benign: Vec<FlowSession>,
    malicious: Vec<FlowSession>,
}

impl Script {
    pub fn new(corpus: &[FlowSession]) -> Self {
        let pick = |class: &str| {
            corpus
                .iter()
                .filter(|s| s.label.as_deref() == Some(class))
                .cloned()
                .collect()
        };
        Script {
            events: Vec::new(),
            benign: pick("benign"),
            malicious: pick("malicious"),
        }
    }

    pub fn push(&mut self, node: &str, body: EventBody) {
        let timestamp_us = (self.events.len() as u64 + 1) * 1_000;
        self.events.push(PerceptionEvent {
            node_id: node.into(),
            timestamp_us,
            body,
        });
    }

    pub fn join(&mut self, node: &str, profile: usize) {
        let profile = default_profiles("synthetic")[profile].clone();
        self.push(node, EventBody::NodeJoin { profile });
    }

    pub fn traffic(&mut self, node: &str, malicious: usize, benign: usize) {
        let n = self.events.len();
        let mut sessions: Vec<FlowSession> = Vec::new();
        sessions.extend(self.malicious.iter().cycle().skip(n).take(malicious).cloned());
        sessions.extend(self.benign.iter().cycle().skip(n).take(benign).cloned());
        self.push(node, EventBody::TrafficBatch { sessions });
    }
}

/// JOIN A, JOIN B, A benign, B attack, B dropped, LEAVE B, JOIN B, B dropped,
/// C unknown benign, A low battery, A one-in-four attack, C attack.
pub fn churn_script(corpus: &[FlowSession]) -> Vec<PerceptionEvent> {
    let mut s = Script::new(corpus);
    s.join("A", 0);
    s.join("B", 1);
    s.traffic("A", 0, 4);
    s.traffic("B", 4, 0);
    s.traffic("B", 0, 4);
    s.push("B", EventBody::NodeLeave);
    s.join("B", 1);
    s.traffic("B", 0, 4);
    s.traffic("C", 0, 4);
    s.push(
        "A",
        EventBody::ResourceUpdate {
            status: ResourceStatus::new(0.1, 0.2, 0.9).unwrap(),
        },
    );
    s.traffic("A", 1, 3);
    s.traffic("C", 4, 0);
    assert_eq!(s.events.len(), 12);
    s.events
}

/// What a stub chat endpoint answers with.
#[derive(Clone, Debug)]
pub enum StubReply {
    /// A chat-completions envelope whose message content is this text.
    Content(String),
    Status(u16),
    /// Sleep this long before answering with a valid reply.
    Stall(Duration),
}

pub fn directive_json(w: f64, c1: f64, c2: f64, diagnosis: &str) -> String {
    format!(r#"{{"w": {w}, "c1": {c1}, "c2": {c2}, "diagnosis": "{diagnosis}", "rationale": "stub"}}"#)
}

fn envelope(content: &str) -> String {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
    })
    .to_string()
}

/// Plain-HTTP stub answering request `i` with `replies[i % len]`. Returns
/// the endpoint URL and a request counter.
pub fn stub_server(replies: Vec<StubReply>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let counter = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let i = counter.fetch_add(1, Ordering::SeqCst);
            let reply = replies[i % replies.len()].clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = l.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; length];
                let _ = reader.read_exact(&mut body);
                let (status, text) = match reply {
                    StubReply::Content(c) => (200, envelope(&c)),
                    StubReply::Status(s) => (s, r#"{"error":"stub"}"#.to_string()),
                    StubReply::Stall(d) => {
                        std::thread::sleep(d);
                        (200, envelope(&directive_json(0.7, 1.5, 1.5, "HEALTHY")))
                    }
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.flush();
            });
        }
    });
    (url, count)
}
