//! Trace layout (integers little-endian):
//!
//! ```text
//! b"PKVT" | u32 version | u32 header_len | header (UTF-8 key=value lines) | payload
//! ```
//!
//! The payload holds, per sample, `X[L_s, H_s, N]` then `Y[L_l, H_l, N]` as
//! row-major `f32`. The header's `payload_bytes` must equal both the size
//! its geometry implies and the bytes actually present.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use super::{GeneratorSpec, OracleSample};
use crate::autodiff::Tensor;
use crate::mapper::ModelGeometry;

pub const TRACE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PKVT";
const PREAMBLE: usize = 12;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("not a trace file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {found} (expected {TRACE_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("trace truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(
        "payload length mismatch: header geometry implies {implied} bytes, {declared} declared"
    )]
    LengthMismatch { implied: usize, declared: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingData { expected: usize, actual: usize },
    #[error("malformed trace header: {0}")]
    Header(String),
    #[error("sample {index} has shape {x:?}/{y:?}, inconsistent with the header")]
    SampleShape {
        index: usize,
        x: Vec<usize>,
        y: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Geometry and provenance metadata stored in front of the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceHeader {
    pub geometry: ModelGeometry,
    pub tokens: usize,
    pub samples: usize,
    /// Free-form `key=value` entries, e.g. generator settings. Keys must not
    /// contain `=` or newlines; values must not contain newlines.
    pub metadata: BTreeMap<String, String>,
}

impl TraceHeader {
    /// Header for `samples` generated from `spec`, with the generator settings recorded as
    /// JSON under `generator`.
    pub fn for_spec(spec: &GeneratorSpec, samples: usize) -> Self {
        let json = serde_json::to_string(spec).expect("generator specs serialize");
        Self {
            geometry: spec.geometry,
            tokens: spec.tokens,
            samples,
            metadata: BTreeMap::from([("generator".to_string(), json)]),
        }
    }

    fn floats_per_sample(&self) -> usize {
        let g = &self.geometry;
        (g.proxy_layers * g.proxy_heads + g.target_layers * g.target_heads) * self.tokens
    }

    pub fn payload_bytes(&self) -> usize {
        4 * self.samples * self.floats_per_sample()
    }

    fn render(&self) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        for (k, v) in [
            ("proxy_layers", g.proxy_layers),
            ("proxy_heads", g.proxy_heads),
            ("target_layers", g.target_layers),
            ("target_heads", g.target_heads),
            ("head_dim", g.head_dim),
            ("tokens", self.tokens),
            ("samples", self.samples),
            ("payload_bytes", self.payload_bytes()),
        ] {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str("dtype=f32\n");
        for (k, v) in &self.metadata {
            out.push_str(&format!("meta.{k}={v}\n"));
        }
        out
    }

    /// Parses header text; returns the header and its declared payload size.
    fn parse(text: &str) -> Result<(Self, usize), TraceError> {
        let mut fields = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TraceError::Header(format!("line without '=': {line:?}")))?;
            match k.strip_prefix("meta.") {
                Some(meta) => metadata.insert(meta.to_string(), v.to_string()),
                None => fields.insert(k.to_string(), v.to_string()),
            };
        }
        let num = |key: &str| -> Result<usize, TraceError> {
            fields
                .get(key)
                .ok_or_else(|| TraceError::Header(format!("missing key {key}")))?
                .parse()
                .map_err(|e| TraceError::Header(format!("{key}: {e}")))
        };
        if fields.get("dtype").map(String::as_str) != Some("f32") {
            return Err(TraceError::Header("dtype must be f32".into()));
        }
        let header = TraceHeader {
            geometry: ModelGeometry {
                proxy_layers: num("proxy_layers")?,
                proxy_heads: num("proxy_heads")?,
                target_layers: num("target_layers")?,
                target_heads: num("target_heads")?,
                head_dim: num("head_dim")?,
            },
            tokens: num("tokens")?,
            samples: num("samples")?,
            metadata,
        };
        if header.tokens == 0 || header.geometry.validate().is_err() {
            return Err(TraceError::Header(
                "geometry and token count must be positive".into(),
            ));
        }
        Ok((header, num("payload_bytes")?))
    }
}

pub fn write_trace<W: Write>(
    mut w: W,
    header: &TraceHeader,
    samples: &[OracleSample],
) -> Result<(), TraceError> {
    let g = &header.geometry;
    if samples.len() != header.samples {
        return Err(TraceError::Header(format!(
            "header declares {} samples, {} given",
            header.samples,
            samples.len()
        )));
    }
    for (k, v) in &header.metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(TraceError::Header(format!(
                "unencodable metadata entry {k:?}"
            )));
        }
    }
    let x_shape = [g.proxy_layers, g.proxy_heads, header.tokens];
    let y_shape = [g.target_layers, g.target_heads, header.tokens];
    for (index, s) in samples.iter().enumerate() {
        if s.x.shape() != x_shape || s.y.shape() != y_shape {
            return Err(TraceError::SampleShape {
                index,
                x: s.x.shape().to_vec(),
                y: s.y.shape().to_vec(),
            });
        }
    }
    let text = header.render();
    w.write_all(MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let mut buf = Vec::with_capacity(header.payload_bytes());
    for s in samples {
        for v in s.x.data().iter().chain(s.y.data()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_trace<R: Read>(mut r: R) -> Result<(TraceHeader, Vec<OracleSample>), TraceError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let take = |start: usize, len: usize| -> Result<&[u8], TraceError> {
        bytes.get(start..start + len).ok_or(TraceError::Truncated {
            expected: start + len,
            actual: bytes.len(),
        })
    };
    let magic: [u8; 4] = take(0, 4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
    if version != TRACE_VERSION {
        return Err(TraceError::VersionMismatch { found: version });
    }
    let header_len = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes")) as usize;
    let text = std::str::from_utf8(take(PREAMBLE, header_len)?)
        .map_err(|e| TraceError::Header(e.to_string()))?;
    let (header, declared) = TraceHeader::parse(text)?;
    let implied = header.payload_bytes();
    if implied != declared {
        return Err(TraceError::LengthMismatch { implied, declared });
    }
    let start = PREAMBLE + header_len;
    let payload = take(start, declared)?;
    if bytes.len() != start + declared {
        return Err(TraceError::TrailingData {
            expected: start + declared,
            actual: bytes.len(),
        });
    }
    let g = &header.geometry;
    let nx = g.proxy_layers * g.proxy_heads * header.tokens;
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    let mut tensor = |shape: Vec<usize>, len: usize| {
        Tensor::new(shape, floats.by_ref().take(len).collect()).expect("length checked above")
    };
    let samples = (0..header.samples)
        .map(|_| OracleSample {
            x: tensor(vec![g.proxy_layers, g.proxy_heads, header.tokens], nx),
            y: tensor(
                vec![g.target_layers, g.target_heads, header.tokens],
                header.floats_per_sample() - nx,
            ),
        })
        .collect();
    Ok((header, samples))
}
