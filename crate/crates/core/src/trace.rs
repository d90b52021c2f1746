//! Versioned CSV serialization of run traces.
//!
//! A trace file starts with `# key: value` metadata lines followed by a CSV table with
//! columns `t, theta, exact_loss, env_grad_norm, wall_ns`. `theta` is a JSON array;
//! empty cells mean "not recorded".

use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Vector;
use crate::optimizer::RunTrace;
use crate::oracle::OracleMode;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of `bytes`.
pub fn content_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

const COLUMNS: [&str; 5] = ["t", "theta", "exact_loss", "env_grad_norm", "wall_ns"];

/// Provenance recorded in every trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub schema_version: u32,
    pub artifact_version: String,
    pub claim_manifest_version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub oracle_mode: OracleMode,
    pub eta: f64,
    pub output_index: usize,
}

impl TraceMetadata {
    pub fn for_trace(trace: &RunTrace, config_digest: &str) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            artifact_version: ARTIFACT_VERSION.to_string(),
            claim_manifest_version: crate::verification::CLAIM_MANIFEST_VERSION,
            config_digest: config_digest.to_string(),
            seed: trace.rng_seed,
            oracle_mode: trace.oracle_mode,
            eta: trace.eta,
            output_index: trace.output_index,
        }
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_trace<W: Write>(out: W, trace: &RunTrace, meta: &TraceMetadata) -> Result<()> {
    let mut out = out;
    writeln!(out, "# schema_version: {}", meta.schema_version)?;
    writeln!(out, "# artifact_version: {}", meta.artifact_version)?;
    writeln!(out, "# claim_manifest_version: {}", meta.claim_manifest_version)?;
    writeln!(out, "# config_digest: {}", meta.config_digest)?;
    writeln!(out, "# seed: {}", meta.seed)?;
    writeln!(out, "# oracle_mode: {}", meta.oracle_mode)?;
    writeln!(out, "# eta: {:?}", meta.eta)?;
    writeln!(out, "# output_index: {}", meta.output_index)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for (t, theta) in trace.iterates.iter().enumerate() {
        let theta_json = serde_json::to_string(theta.as_slice())?;
        let loss = trace.losses.as_ref().and_then(|l| l.get(t).copied());
        let norm = trace.grad_norms_env.as_ref().and_then(|n| n.get(t).copied());
        let wall = trace.wall_ns.get(t).copied().unwrap_or(0);
        w.write_record([t.to_string(), theta_json, opt_cell(loss), opt_cell(norm), wall.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn trace_to_string(trace: &RunTrace, meta: &TraceMetadata) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace, meta)?;
    String::from_utf8(buf).map_err(|e| Error::MalformedTrace(e.to_string()))
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::MalformedTrace(format!("cannot parse header {key}={value:?}")))
}

fn parse_cell(cell: &str, what: &str, row: usize) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse()
        .map(Some)
        .map_err(|_| Error::MalformedTrace(format!("row {row}: cannot parse {what} {cell:?}")))
}

pub fn read_trace<R: Read>(input: R) -> Result<(RunTrace, TraceMetadata)> {
    let mut text = String::new();
    BufReader::new(input).read_to_string(&mut text)?;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.as_bytes().lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix('#') else { break };
        if let Some((k, v)) = rest.split_once(':') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::MalformedTrace(format!("missing header {k}")))
    };
    let meta = TraceMetadata {
        schema_version: parse_field("schema_version", get("schema_version")?)?,
        artifact_version: get("artifact_version")?.to_string(),
        claim_manifest_version: parse_field("claim_manifest_version", get("claim_manifest_version")?)?,
        config_digest: get("config_digest")?.to_string(),
        seed: parse_field("seed", get("seed")?)?,
        oracle_mode: get("oracle_mode")?.parse()?,
        eta: parse_field("eta", get("eta")?)?,
        output_index: parse_field("output_index", get("output_index")?)?,
    };
    if meta.schema_version != TRACE_SCHEMA_VERSION {
        return Err(Error::MalformedTrace(format!(
            "schema version {} is not supported (expected {TRACE_SCHEMA_VERSION})",
            meta.schema_version
        )));
    }

    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(Error::MalformedTrace(format!("unexpected columns {header:?}")));
    }
    let mut iterates = Vec::new();
    let mut losses = Vec::new();
    let mut norms = Vec::new();
    let mut wall_ns = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let t: usize = record[0]
            .parse()
            .map_err(|_| Error::MalformedTrace(format!("row {row}: bad t {:?}", &record[0])))?;
        if t != row {
            return Err(Error::MalformedTrace(format!("row {row} has t = {t}")));
        }
        let theta: Vec<f64> = serde_json::from_str(&record[1])
            .map_err(|e| Error::MalformedTrace(format!("row {row}: bad theta: {e}")))?;
        iterates.push(Vector::from_vec(theta));
        losses.push(parse_cell(&record[2], "exact_loss", row)?);
        norms.push(parse_cell(&record[3], "env_grad_norm", row)?);
        wall_ns.push(
            record[4]
                .parse()
                .map_err(|_| Error::MalformedTrace(format!("row {row}: bad wall_ns {:?}", &record[4])))?,
        );
    }
    if iterates.len() < 2 {
        return Err(Error::MalformedTrace("a trace needs at least two iterates".into()));
    }
    if let Some(d) = iterates.first().map(Vector::len) {
        if iterates.iter().any(|v| v.len() != d) {
            return Err(Error::MalformedTrace("iterates have differing dimensions".into()));
        }
    }
    let collect_all = |col: Vec<Option<f64>>| -> Option<Vec<f64>> { col.into_iter().collect() };
    let trace = RunTrace {
        iterates,
        losses: collect_all(losses),
        grad_norms_env: collect_all(norms),
        wall_ns,
        output_index: meta.output_index,
        rng_seed: meta.seed,
        oracle_mode: meta.oracle_mode,
        eta: meta.eta,
    };
    if trace.output_index >= trace.horizon() {
        return Err(Error::MalformedTrace(format!(
            "output index {} outside 0..{}",
            trace.output_index,
            trace.horizon()
        )));
    }
    Ok((trace, meta))
}
