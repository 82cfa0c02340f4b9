//! Session to grayscale image transform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::FlowSession;

const IMAGE_MAGIC: &[u8; 4] = b"TIMG";

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("session {0} has nothing to encode")]
    EmptySource(String),
    #[error("session {session} feature {index} is not finite")]
    NonFiniteFeature { session: String, index: usize },
    #[error("tabular encoding needs fitted scaler statistics")]
    MissingScaler,
    #[error("scaler covers {expected} features, session has {actual}")]
    FeatureCountMismatch { expected: usize, actual: usize },
    #[error("no sessions with tabular features")]
    EmptyInput,
    #[error("invalid image config: {0}")]
    InvalidConfig(String),
    #[error("malformed image buffer: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ImageSource {
    PayloadBytes,
    TabularQuantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub source: ImageSource,
    /// In payload mode, encode scaled tabular features for sessions that
    /// carry no payload instead of failing.
    #[serde(default)]
    pub tabular_fallback: bool,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            height: 32,
            width: 32,
            source: ImageSource::PayloadBytes,
            tabular_fallback: false,
        }
    }
}

impl ImageConfig {
    pub fn new(height: usize, width: usize, source: ImageSource) -> Result<Self, ImagingError> {
        let cfg = ImageConfig {
            height,
            width,
            source,
            tabular_fallback: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.height < 2 || self.width < 2 {
            return Err(ImagingError::InvalidConfig(format!(
                "{}x{} is smaller than 2x2",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Byte budget `L = H * W`.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficImage {
    pub source_session_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major pixels in `[0, 1]`.
    pub pixels: Vec<f64>,
}

impl TrafficImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Encodes as the `TIMG` cache format: magic, height, width, a reserved
    /// zero word, then little-endian `f32` pixels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.pixels.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for &p in &self.pixels {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], session_id: impl Into<String>) -> Result<Self, ImagingError> {
        if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
            return Err(ImagingError::Malformed("missing TIMG header"));
        }
        let mut offset = 4;
        let height = crate::util::read_u32(bytes, &mut offset).unwrap_or_default() as usize;
        let width = crate::util::read_u32(bytes, &mut offset).unwrap_or_default() as usize;
        let body = &bytes[16..];
        if body.len() != 4 * height * width {
            return Err(ImagingError::Malformed("pixel block length"));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(TrafficImage {
            source_session_id: session_id.into(),
            height,
            width,
            pixels,
        })
    }
}

/// Per-feature `(min, max)` from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl FeatureScaler {
    pub fn len(&self) -> usize {
        self.mins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mins.is_empty()
    }

    /// Min-max scales one value, clamping out-of-range inputs into `[0, 1]`.
    pub fn scale(&self, index: usize, value: f64) -> f64 {
        let (lo, hi) = (self.mins[index], self.maxs[index]);
        ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// Fits min/max statistics over sessions that carry tabular features.
/// Constant features get `(min, min + 1)`.
pub fn fit_scaler(training: &[FlowSession]) -> Result<FeatureScaler, ImagingError> {
    let mut rows = training.iter().filter(|s| !s.tabular_features.is_empty());
    let first = rows.next().ok_or(ImagingError::EmptyInput)?;
    let mut mins = first.tabular_features.clone();
    let mut maxs = first.tabular_features.clone();
    for s in std::iter::once(first).chain(rows) {
        if s.tabular_features.len() != mins.len() {
            return Err(ImagingError::FeatureCountMismatch {
                expected: mins.len(),
                actual: s.tabular_features.len(),
            });
        }
        for (i, &v) in s.tabular_features.iter().enumerate() {
            if !v.is_finite() {
                return Err(ImagingError::NonFiniteFeature {
                    session: s.session_id.clone(),
                    index: i,
                });
            }
            mins[i] = mins[i].min(v);
            maxs[i] = maxs[i].max(v);
        }
    }
    for (lo, hi) in mins.iter().zip(maxs.iter_mut()) {
        if *hi <= *lo {
            *hi = *lo + 1.0;
        }
    }
    Ok(FeatureScaler { mins, maxs })
}

/// Renders a session as an `H x W` grayscale image.
///
/// Payload mode takes the first `H * W` bytes as `byte / 255`, zero-padded.
/// Tabular mode writes the scaled features row-major, zero-padded (features
/// beyond the budget are dropped).
pub fn session_to_image(
    session: &FlowSession,
    cfg: &ImageConfig,
    scaler: Option<&FeatureScaler>,
) -> Result<TrafficImage, ImagingError> {
    cfg.validate()?;
    let budget = cfg.pixel_count();
    let mut pixels = vec![0.0; budget];
    let use_tabular = match cfg.source {
        ImageSource::PayloadBytes if !session.payload.is_empty() => false,
        ImageSource::PayloadBytes if cfg.tabular_fallback && !session.tabular_features.is_empty() => true,
        ImageSource::PayloadBytes => return Err(ImagingError::EmptySource(session.session_id.clone())),
        ImageSource::TabularQuantized => true,
    };
    if use_tabular {
        if session.tabular_features.is_empty() {
            return Err(ImagingError::EmptySource(session.session_id.clone()));
        }
        let scaler = scaler.ok_or(ImagingError::MissingScaler)?;
        if scaler.len() != session.tabular_features.len() {
            return Err(ImagingError::FeatureCountMismatch {
                expected: scaler.len(),
                actual: session.tabular_features.len(),
            });
        }
        for (i, &v) in session.tabular_features.iter().enumerate() {
            if !v.is_finite() {
                return Err(ImagingError::NonFiniteFeature {
                    session: session.session_id.clone(),
                    index: i,
                });
            }
            if i < budget {
                pixels[i] = scaler.scale(i, v);
            }
        }
    } else {
        for (p, &b) in pixels.iter_mut().zip(&session.payload) {
            *p = b as f64 / 255.0;
        }
    }
    Ok(TrafficImage {
        source_session_id: session.session_id.clone(),
        height: cfg.height,
        width: cfg.width,
        pixels,
    })
}

/// Which sessions feed self-supervised pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PretrainFilter {
    #[default]
    BenignOnly,
    AllClasses,
}

pub fn filter_for_pretraining<'a>(
    sessions: &'a [FlowSession],
    filter: PretrainFilter,
    benign_label: &str,
) -> Vec<&'a FlowSession> {
    sessions
        .iter()
        .filter(|s| match filter {
            PretrainFilter::AllClasses => true,
            PretrainFilter::BenignOnly => s.label.as_deref() == Some(benign_label),
        })
        .collect()
}
