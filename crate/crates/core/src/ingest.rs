//! Flow-record loading, packet sessionization and identity scrubbing.
//!
//! Two input paths feed the pipeline: labeled tabular CSV files whose
//! columns become `tabular_features`, and raw packet lists whose payloads
//! are grouped into direction-normalized sessions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default idle gap, in seconds, that closes a session.
pub const DEFAULT_IDLE_TIMEOUT_S: f64 = 64.0;

const ANON_SRC: &str = "ANON_A";
const ANON_DST: &str = "ANON_B";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input file not found: {0}")]
    MissingFile(String),
    #[error("header does not match schema, unmatched columns: {}", .0.join(", "))]
    SchemaMismatch(Vec<String>),
    #[error("no valid rows in input ({skipped} skipped)")]
    EmptyInput { skipped: usize },
    #[error("timestamps go backwards for flow {0}")]
    NonMonotonicTimestamps(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("malformed packet line {line}: {reason}")]
    MalformedPacket { line: usize, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Tcp,
    Udp,
    Other,
}

impl Protocol {
    pub fn parse(token: &str) -> Protocol {
        match token.trim().to_ascii_uppercase().as_str() {
            "TCP" | "6" => Protocol::Tcp,
            "UDP" | "17" => Protocol::Udp,
            _ => Protocol::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_addr: String,
    pub dst_addr: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl FiveTuple {
    pub fn new(
        src_addr: impl Into<String>,
        src_port: u16,
        dst_addr: impl Into<String>,
        dst_port: u16,
        protocol: Protocol,
    ) -> Self {
        FiveTuple {
            src_addr: src_addr.into(),
            dst_addr: dst_addr.into(),
            src_port,
            dst_port,
            protocol,
        }
    }

    /// Tuple used for records that carry no addressing information.
    pub fn unknown() -> Self {
        FiveTuple::new("", 0, "", 0, Protocol::Other)
    }

    /// Direction-normalized form: the lexicographically smaller
    /// `(addr, port)` endpoint is listed first.
    pub fn canonical(&self) -> FiveTuple {
        let a = (&self.src_addr, self.src_port);
        let b = (&self.dst_addr, self.dst_port);
        if b < a {
            FiveTuple::new(
                self.dst_addr.clone(),
                self.dst_port,
                self.src_addr.clone(),
                self.src_port,
                self.protocol,
            )
        } else {
            self.clone()
        }
    }

    /// Parses the `src|sport|dst|dport|proto` token of the packet fixture format.
    pub fn parse_token(token: &str) -> Option<FiveTuple> {
        let parts: Vec<&str> = token.split('|').collect();
        if parts.len() != 5 {
            return None;
        }
        Some(FiveTuple::new(
            parts[0].trim(),
            parts[1].trim().parse().ok()?,
            parts[2].trim(),
            parts[3].trim().parse().ok()?,
            Protocol::parse(parts[4]),
        ))
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let proto = match self.protocol {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
            Protocol::Other => "OTHER",
        };
        write!(
            f,
            "{}|{}|{}|{}|{}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, proto
        )
    }
}

/// One bidirectional traffic session, the unit of classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSession {
    pub session_id: String,
    pub five_tuple: FiveTuple,
    pub start_time_us: u64,
    #[serde(with = "crate::util::hex_bytes")]
    pub payload: Vec<u8>,
    pub tabular_features: Vec<f64>,
    pub label: Option<String>,
}

/// Feature and class vocabularies of a tabular dataset.
///
/// `class_names[0]` is always the benign class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_label_column() -> String {
    "label".to_string()
}

impl FeatureSchema {
    pub fn new(
        name: impl Into<String>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self, IngestError> {
        let schema = FeatureSchema {
            name: name.into(),
            feature_names,
            class_names,
            label_column: default_label_column(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_label_column(mut self, column: impl Into<String>) -> Self {
        self.label_column = column.into();
        self
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.feature_names.is_empty() {
            return Err(IngestError::InvalidSchema("no feature names".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.feature_names {
            if !seen.insert(name.as_str()) {
                return Err(IngestError::InvalidSchema(format!("duplicate feature {name}")));
            }
        }
        if self.class_names.len() < 2 {
            return Err(IngestError::InvalidSchema(
                "need a benign class and at least one attack class".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn benign_class(&self) -> &str {
        &self.class_names[0]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Builds a schema from a CSV header, keeping only the columns whose
    /// first `probe_rows` values all parse as finite numbers. Class names are
    /// gathered from the label column; `benign` (when present) is placed first.
    pub fn infer_from_csv(
        path: &Path,
        label_column: &str,
        benign_label: &str,
        probe_rows: usize,
    ) -> Result<FeatureSchema, IngestError> {
        if !path.exists() {
            return Err(IngestError::MissingFile(path.display().to_string()));
        }
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let label_idx = header
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| IngestError::SchemaMismatch(vec![label_column.to_string()]))?;
        let mut numeric = vec![true; header.len()];
        let mut classes = std::collections::BTreeSet::new();
        for (row_no, record) in reader.records().enumerate() {
            let record = record?;
            if let Some(label) = record.get(label_idx) {
                classes.insert(label.trim().to_string());
            }
            if row_no < probe_rows {
                for (i, cell) in record.iter().enumerate() {
                    if i < numeric.len() && !cell.trim().parse::<f64>().map(f64::is_finite).unwrap_or(false) {
                        numeric[i] = false;
                    }
                }
            }
        }
        let feature_names = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_idx && numeric[*i])
            .map(|(_, h)| h.clone())
            .collect();
        let mut class_names = Vec::new();
        if classes.remove(benign_label) {
            class_names.push(benign_label.to_string());
        }
        class_names.extend(classes);
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into());
        Ok(FeatureSchema::new(name, feature_names, class_names)?.with_label_column(label_column))
    }
}

/// Result of loading a flow-record file.
#[derive(Debug, Clone)]
pub struct FlowRecords {
    pub sessions: Vec<FlowSession>,
    /// Rows dropped for non-numeric cells or unknown labels.
    pub skipped_rows: usize,
}

/// Loads labeled tabular flow records.
///
/// Every schema feature and the label column must appear in the header.
/// Extra header columns are ignored. Rows with a non-numeric or non-finite
/// feature cell, or a label outside the schema's classes, are skipped and
/// counted.
pub fn load_flow_records(
    path: &Path,
    schema: &FeatureSchema,
    limit: Option<usize>,
) -> Result<FlowRecords, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.display().to_string()));
    }
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut unmatched = Vec::new();
    let mut columns = Vec::with_capacity(schema.feature_count());
    for name in &schema.feature_names {
        match header.iter().position(|h| h == name) {
            Some(i) => columns.push(i),
            None => unmatched.push(name.clone()),
        }
    }
    let label_idx = header.iter().position(|h| *h == schema.label_column);
    if label_idx.is_none() {
        unmatched.push(schema.label_column.clone());
    }
    if !unmatched.is_empty() {
        unmatched.truncate(3);
        return Err(IngestError::SchemaMismatch(unmatched));
    }
    let label_idx = label_idx.unwrap_or_default();

    let mut sessions = Vec::new();
    let mut skipped = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        if limit.is_some_and(|l| sessions.len() >= l) {
            break;
        }
        let record = record?;
        let features: Option<Vec<f64>> = columns
            .iter()
            .map(|&c| {
                record
                    .get(c)
                    .and_then(|cell| cell.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        let label = record.get(label_idx).map(|l| l.trim().to_string());
        match (features, label) {
            (Some(features), Some(label)) if schema.class_index(&label).is_some() => {
                sessions.push(FlowSession {
                    session_id: format!("{}-{}", schema.name, row_no),
                    five_tuple: FiveTuple::unknown(),
                    start_time_us: 0,
                    payload: Vec::new(),
                    tabular_features: features,
                    label: Some(label),
                });
            }
            _ => skipped += 1,
        }
    }
    if sessions.is_empty() {
        return Err(IngestError::EmptyInput { skipped });
    }
    Ok(FlowRecords {
        sessions,
        skipped_rows: skipped,
    })
}

/// Writes sessions as a CSV in the layout `load_flow_records` reads back.
pub fn write_flow_records(path: &Path, schema: &FeatureSchema, sessions: &[FlowSession]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = schema.feature_names.clone();
    header.push(schema.label_column.clone());
    writer.write_record(&header)?;
    for s in sessions {
        let mut row: Vec<String> = s.tabular_features.iter().map(|v| v.to_string()).collect();
        row.push(s.label.clone().unwrap_or_default());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// A captured packet: tuple as seen on the wire, timestamp and payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub five_tuple: FiveTuple,
    pub timestamp_us: u64,
    pub payload: Vec<u8>,
}

/// Parses the line-oriented packet fixture format
/// `src|sport|dst|dport|proto,timestamp_us,hex_payload`.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_packet_lines(text: &str) -> Result<Vec<Packet>, IngestError> {
    let mut packets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| IngestError::MalformedPacket {
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut fields = line.splitn(3, ',');
        let tuple = fields
            .next()
            .and_then(FiveTuple::parse_token)
            .ok_or_else(|| bad("bad tuple"))?;
        let timestamp_us = fields
            .next()
            .and_then(|t| t.trim().parse::<u64>().ok())
            .ok_or_else(|| bad("bad timestamp"))?;
        let payload = hex::decode(fields.next().unwrap_or("").trim()).map_err(|_| bad("bad hex"))?;
        packets.push(Packet {
            five_tuple: tuple,
            timestamp_us,
            payload,
        });
    }
    Ok(packets)
}

/// Groups packets into direction-normalized sessions.
///
/// Packets sharing a canonical tuple stay in one session while consecutive
/// gaps are at most `idle_timeout_s`. Output is ordered by
/// `(start_time, session_id)`, so it does not depend on how flows are
/// interleaved in the input.
pub fn sessionize(packets: &[Packet], idle_timeout_s: f64) -> Result<Vec<FlowSession>, IngestError> {
    let timeout_us = (idle_timeout_s * 1e6).max(0.0);
    let mut by_key: BTreeMap<FiveTuple, Vec<&Packet>> = BTreeMap::new();
    for p in packets {
        by_key.entry(p.five_tuple.canonical()).or_default().push(p);
    }

    let mut sessions = Vec::new();
    for (key, group) in by_key {
        let mut current: Option<FlowSession> = None;
        let mut last_ts = 0u64;
        let mut ordinal = 0usize;
        for p in group {
            if let Some(session) = current.as_mut() {
                if p.timestamp_us < last_ts {
                    return Err(IngestError::NonMonotonicTimestamps(key.to_string()));
                }
                if (p.timestamp_us - last_ts) as f64 <= timeout_us {
                    session.payload.extend_from_slice(&p.payload);
                    last_ts = p.timestamp_us;
                    continue;
                }
                sessions.push(current.take().expect("open session"));
            }
            current = Some(FlowSession {
                session_id: format!("{key}#{ordinal}"),
                five_tuple: key.clone(),
                start_time_us: p.timestamp_us,
                payload: p.payload.clone(),
                tabular_features: Vec::new(),
                label: None,
            });
            ordinal += 1;
            last_ts = p.timestamp_us;
        }
        sessions.extend(current);
    }
    sessions.sort_by(|a, b| {
        a.start_time_us
            .cmp(&b.start_time_us)
            .then_with(|| a.session_id.cmp(&b.session_id))
    });
    Ok(sessions)
}

/// Replaces addresses with placeholder tokens and zeroes the first
/// `header_bytes` payload bytes.
pub fn anonymize(session: &FlowSession, header_bytes: usize) -> FlowSession {
    let mut out = session.clone();
    out.five_tuple.src_addr = ANON_SRC.to_string();
    out.five_tuple.dst_addr = ANON_DST.to_string();
    let n = header_bytes.min(out.payload.len());
    out.payload[..n].fill(0);
    out
}
