//! Request traces and config documents on disk.
//!
//! Traces are newline-delimited JSON records `{"id"?, "input_len", "output_len"}`.
//! Model and hardware documents are JSON or TOML, chosen by file extension.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::Request;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub count: usize,
    pub mean_input_len: f64,
    pub median_input_len: f64,
    pub mean_output_len: f64,
    pub median_output_len: f64,
}

fn median(mut v: Vec<u32>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] as f64 + v[m] as f64) / 2.0
    }
}

fn mean(v: &[u32]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub requests: Vec<Request>,
}

impl WorkloadTrace {
    pub fn new(requests: Vec<Request>) -> Self {
        WorkloadTrace { requests }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn summary(&self) -> TraceSummary {
        let ins: Vec<u32> = self.requests.iter().map(|r| r.input_len).collect();
        let outs: Vec<u32> = self.requests.iter().map(|r| r.output_len).collect();
        TraceSummary {
            count: self.requests.len(),
            mean_input_len: mean(&ins),
            median_input_len: median(ins),
            mean_output_len: mean(&outs),
            median_output_len: median(outs),
        }
    }

    /// One record per line, ids always written.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.requests {
            s.push_str(&serde_json::to_string(r).expect("request serializes"));
            s.push('\n');
        }
        s
    }
}

fn length_field(obj: &serde_json::Map<String, Value>, name: &str) -> std::result::Result<u32, String> {
    let v = obj.get(name).ok_or_else(|| format!("missing field `{name}`"))?;
    match v.as_u64() {
        Some(0) => Err(format!("`{name}` must be at least 1")),
        Some(n) => u32::try_from(n).map_err(|_| format!("`{name}` = {n} is too large")),
        None => Err(format!("`{name}` must be a positive integer, got {v}")),
    }
}

/// Parses trace text; `origin` names the source in error messages.
pub fn parse_trace_str(text: &str, origin: &str) -> Result<WorkloadTrace> {
    let mut requests = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
        let input_len = length_field(obj, "input_len").map_err(err)?;
        let output_len = length_field(obj, "output_len").map_err(err)?;
        let id = match obj.get("id") {
            None | Some(Value::Null) => requests.len() as u64,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| err(format!("`id` must be a non-negative integer, got {v}")))?,
        };
        requests.push(Request::new(id, input_len, output_len));
    }
    Ok(WorkloadTrace { requests })
}

pub fn parse_trace(path: impl AsRef<Path>) -> Result<WorkloadTrace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_str(&text, &path.display().to_string())
}

pub fn write_trace(trace: &WorkloadTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(trace.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TraceKind {
    Constant {
        output_len: u32,
    },
    /// `output_len = max(1, round(ratio * input_len))`.
    Ratio {
        ratio: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceGen {
    pub kind: TraceKind,
    pub n: usize,
    pub input_len: u32,
    /// Each length is scaled by a uniform factor in `[1 - jitter, 1 + jitter]`
    /// drawn from a generator seeded with `seed`. Zero keeps lengths exact.
    pub jitter: f64,
    pub seed: u64,
}

fn jittered(rng: &mut ChaCha8Rng, len: u32, jitter: f64) -> u32 {
    if jitter == 0.0 {
        return len;
    }
    let f: f64 = rng.random_range(1.0 - jitter..=1.0 + jitter);
    ((len as f64 * f).round() as u32).max(1)
}

pub fn gen_trace(spec: &TraceGen) -> Result<WorkloadTrace> {
    let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
    if spec.n == 0 {
        return bad("n must be at least 1");
    }
    if spec.input_len == 0 {
        return bad("input_len must be at least 1");
    }
    if !(0.0..1.0).contains(&spec.jitter) {
        return bad("jitter must be in [0, 1)");
    }
    let output_len = match spec.kind {
        TraceKind::Constant { output_len: 0 } => return bad("output_len must be at least 1"),
        TraceKind::Constant { output_len } => output_len,
        TraceKind::Ratio { ratio } if !(ratio >= 0.0 && ratio.is_finite()) => {
            return bad("ratio must be finite and non-negative")
        }
        TraceKind::Ratio { ratio } => {
            let v = (ratio * spec.input_len as f64).round();
            if v > u32::MAX as f64 {
                return bad("ratio gives an output length beyond u32");
            }
            (v as u32).max(1)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let requests = (0..spec.n)
        .map(|i| {
            let s_in = jittered(&mut rng, spec.input_len, spec.jitter);
            let s_out = jittered(&mut rng, output_len, spec.jitter);
            Request::new(i as u64, s_in, s_out)
        })
        .collect();
    Ok(WorkloadTrace { requests })
}

/// Reads a model or hardware document. `.toml` files are TOML, anything else
/// is JSON.
pub fn load_document<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|m| Error::Document(format!("{}: {m}", path.display())))
}
