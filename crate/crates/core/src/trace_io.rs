//! Line-delimited trace files, JSON documents and report tables.
//!
//! Every record and document carries `schema_version`. Floats are written in
//! shortest round-trip form, so reading a file back yields identical values.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const VERSION_KEY: &str = "schema_version";

/// One per-step sensitivity observation for one tracked point in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: String,
    pub step: usize,
    pub point_id: String,
    /// Normalized sensitivity at `θ_{step−1}`.
    pub delta: f64,
    /// Normalized clipping bound `C/L`; the data-independent sensitivity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_max: Option<f64>,
    pub sigma_effective: f64,
    pub q: f64,
    /// Precomputed `(order, ε)` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orders: Option<Vec<(f64, f64)>>,
    /// Whether `θ_{step−1}` classifies the point correctly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// Fields this version does not know about, kept for rewriting.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidData(format!(
                "run {} step {} point {}: delta {} must be finite and nonnegative",
                self.run_id, self.step, self.point_id, self.delta
            )));
        }
        if let Some(m) = self.delta_max {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::InvalidData(format!("delta_max {m} must be positive")));
            }
        }
        if !(self.sigma_effective > 0.0) || !self.sigma_effective.is_finite() {
            return Err(Error::InvalidData(format!(
                "sigma_effective {} must be positive",
                self.sigma_effective
            )));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidData(format!("q {} outside [0, 1]", self.q)));
        }
        if self.step == 0 {
            return Err(Error::InvalidData("steps are numbered from 1".into()));
        }
        Ok(())
    }
}

fn to_versioned<T: Serialize>(item: &T) -> Result<Value> {
    let v = serde_json::to_value(item).map_err(|e| Error::InvalidData(e.to_string()))?;
    let mut map: Map<String, Value> = match v {
        Value::Object(m) => m,
        _ => return Err(Error::InvalidData("only objects can be versioned".into())),
    };
    map.insert(VERSION_KEY.into(), Value::from(SCHEMA_VERSION));
    Ok(Value::Object(map))
}

fn from_versioned<T: DeserializeOwned>(mut v: Value, path: &Path, line: usize) -> Result<T> {
    let map = v.as_object_mut().ok_or_else(|| Error::Parse {
        path: path.into(),
        line,
        message: "expected a JSON object".into(),
    })?;
    match map.remove(VERSION_KEY) {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(other) => {
            return Err(Error::SchemaVersion {
                path: path.into(),
                line,
                found: other.to_string(),
                expected: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(Error::SchemaVersion {
                path: path.into(),
                line,
                found: "none".into(),
                expected: SCHEMA_VERSION,
            })
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Parse {
        path: path.into(),
        line,
        message: e.to_string(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes one versioned JSON object per line.
pub fn write_records<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for item in items {
        let v = to_versioned(item)?;
        serde_json::to_writer(&mut w, &v).map_err(|e| Error::InvalidData(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_records`]; blank lines are skipped.
pub fn read_records<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(from_versioned(v, path, i + 1)?);
    }
    Ok(out)
}

pub fn write_trace(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    write_records(records, path)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let records: Vec<TraceRecord> = read_records(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Writes a single versioned JSON document.
pub fn write_document<T: Serialize>(item: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let v = to_versioned(item)?;
    serde_json::to_writer_pretty(&mut w, &v).map_err(|e| Error::InvalidData(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_document<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    from_versioned(v, path, 1)
}

/// Step column of a report: a step index or the composed total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StepLabel {
    Step(usize),
    Total,
}

impl fmt::Display for StepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepLabel::Step(t) => write!(f, "{t}"),
            StepLabel::Total => f.write_str("total"),
        }
    }
}

impl Serialize for StepLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepLabel::Step(t) => s.serialize_u64(*t as u64),
            StepLabel::Total => s.serialize_str("total"),
        }
    }
}

impl<'de> Deserialize<'de> for StepLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(t) => Ok(StepLabel::Step(t as usize)),
            Raw::S(s) if s == "total" => Ok(StepLabel::Total),
            Raw::S(s) => s
                .parse()
                .map(StepLabel::Step)
                .map_err(|_| serde::de::Error::custom(format!("bad step label {s:?}"))),
        }
    }
}

/// One line of an accounting report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub point_id: String,
    pub step: StepLabel,
    pub eps_ours: f64,
    pub eps_baseline: f64,
    /// `eps_ours / eps_baseline`, absent when the baseline is 0.
    pub ratio: Option<f64>,
    /// Confidence half-width of `eps_ours`, when it is an estimate.
    pub ci: Option<f64>,
}

impl ReportRow {
    pub fn new(
        point_id: impl Into<String>,
        step: StepLabel,
        eps_ours: f64,
        eps_baseline: f64,
        ci: Option<f64>,
    ) -> Self {
        let ratio = (eps_baseline > 0.0).then(|| eps_ours / eps_baseline);
        Self {
            point_id: point_id.into(),
            step,
            eps_ours,
            eps_baseline,
            ratio,
            ci,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    /// One versioned JSON object per line.
    Structured,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "structured" | "jsonl" => Ok(ReportFormat::Structured),
            other => Err(Error::domain(format!("unknown report format {other:?}"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 6] = ["point_id", "step", "eps_ours", "eps_baseline", "ratio", "ci"];

fn fmt_real(x: f64) -> String {
    format!("{x:.10e}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidData(format!("{other:?}")),
    }
}

/// Writes report rows with stable columns and eleven significant digits in CSV.
pub fn write_report(rows: &[ReportRow], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Structured => write_records(rows, path),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(create(path)?);
            w.write_record(REPORT_COLUMNS).map_err(|e| csv_error(path, e))?;
            for r in rows {
                w.write_record([
                    r.point_id.clone(),
                    r.step.to_string(),
                    fmt_real(r.eps_ours),
                    fmt_real(r.eps_baseline),
                    r.ratio.map(fmt_real).unwrap_or_default(),
                    r.ci.map(fmt_real).unwrap_or_default(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

/// Writes any flat serializable rows as CSV with a header from the field names.
pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(delta: f64) -> TraceRecord {
        TraceRecord {
            run_id: "r0".into(),
            step: 3,
            point_id: "target".into(),
            delta,
            delta_max: Some(1.0 / 128.0),
            sigma_effective: 1.0 / 128.0,
            q: 128.0 / 60000.0,
            orders: Some(vec![(8.0, 0.125), (15.5, 0.1 + 0.2)]),
            correct: Some(true),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let recs = vec![record(0.1 + 0.2), record(1e-300), record(0.0)];
        write_trace(&recs, &path).unwrap();
        assert_eq!(read_trace(&path).unwrap(), recs);
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_trace(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupted_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_trace(&vec![record(0.5); 8], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[6] = "{\"run_id\": \"r0\", \"step\": ";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_trace(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        write_trace(&[record(0.5)], &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\":1", "\"schema_version\":2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_trace(&path),
            Err(Error::SchemaVersion { line: 1, .. })
        ));
        std::fs::write(&path, "{\"run_id\":\"r\"}\n").unwrap();
        assert!(matches!(read_trace(&path), Err(Error::SchemaVersion { .. })));
    }

    #[test]
    fn unknown_fields_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.jsonl");
        let line = r#"{"schema_version":1,"run_id":"r","step":1,"point_id":"p","delta":0.5,"sigma_effective":1.0,"q":0.1,"optimizer":{"name":"sgd","momentum":0.9}}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let recs = read_trace(&path).unwrap();
        assert_eq!(recs[0].extra["optimizer"]["momentum"], 0.9);
        let out = dir.path().join("u2.jsonl");
        write_trace(&recs, &out).unwrap();
        assert_eq!(read_trace(&out).unwrap(), recs);
    }

    #[test]
    fn invalid_records_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        assert!(write_trace(&[record(-1.0)], &path).is_err());
        assert!(write_trace(&[record(f64::NAN)], &path).is_err());
    }

    #[test]
    fn csv_report_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![ReportRow::new("x", StepLabel::Step(1), 0.25, 0.25, None)];
        assert_eq!(rows[0].ratio, Some(1.0));
        write_report(&rows, &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "point_id,step,eps_ours,eps_baseline,ratio,ci");
        assert_eq!(lines[1].split(',').count(), 6);
        assert_eq!(lines[1], "x,1,2.5000000000e-1,2.5000000000e-1,1.0000000000e0,");
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ReportRow::new("x", StepLabel::Step(2), 0.1, 0.3, Some(0.01)),
            ReportRow::new("x", StepLabel::Total, 1.0 / 3.0, 0.0, None),
        ];
        for fmt in [ReportFormat::Csv, ReportFormat::Structured] {
            let a = dir.path().join("a");
            let b = dir.path().join("b");
            write_report(&rows, &a, fmt).unwrap();
            write_report(&rows, &b, fmt).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
        let s = dir.path().join("s.jsonl");
        write_report(&rows, &s, ReportFormat::Structured).unwrap();
        assert_eq!(read_records::<ReportRow>(&s).unwrap(), rows);
        assert_eq!(rows[1].ratio, None);
    }

    #[test]
    fn documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let v: Vec<f64> = vec![0.1, 2.0f64.sqrt(), 1e-310];
        assert!(write_document(&v, &path).is_err());
        #[derive(Debug, PartialEq, Serialize, Deserialize)]
        struct Doc {
            xs: Vec<f64>,
        }
        let d = Doc { xs: v };
        write_document(&d, &path).unwrap();
        assert_eq!(read_document::<Doc>(&path).unwrap(), d);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn floats_round_trip_bit_exact(
            delta in 0.0f64..1e6,
            sigma in 1e-300f64..1e300,
            q in 0.0f64..=1.0,
            bits in any::<u64>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.jsonl");
            let extra = f64::from_bits(bits);
            let mut r = record(delta);
            r.sigma_effective = sigma;
            r.q = q;
            if extra.is_finite() {
                r.orders = Some(vec![(2.0, extra)]);
            }
            write_trace(&[r.clone()], &path).unwrap();
            let back = read_trace(&path).unwrap();
            prop_assert_eq!(back[0].delta.to_bits(), r.delta.to_bits());
            prop_assert_eq!(back[0].sigma_effective.to_bits(), r.sigma_effective.to_bits());
            prop_assert_eq!(&back[0], &r);
        }
    }
}
