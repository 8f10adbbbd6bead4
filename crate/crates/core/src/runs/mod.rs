//! Run-log tables: parsing the `model,data_size,steps,metric,value` CSV,
//! attaching a FLOPs compute proxy, and writing fit and plot artifacts.

mod plot;

pub use plot::{emit_plot, parse_curve_csv, render_csv, render_svg, CurvePoint, PlotFormat};

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cost::ShapeRow;
use crate::error::{Error, Result};
use crate::laws::{pareto_frontier, FitReport, LawParams, Point};

pub const RUNS_HEADER: [&str; 5] = ["model", "data_size", "steps", "metric", "value"];

/// Batch size the published step counts are normalised to.
pub const REFERENCE_BATCH: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub model: String,
    pub data_size: u64,
    pub steps: u64,
    pub metric: String,
    /// Accuracy in percent, as logged.
    pub accuracy: f64,
    pub error_rate: f64,
    /// ExaFLOPs proxy, once attached.
    pub compute: Option<f64>,
}

impl RunRecord {
    pub fn images_seen(&self, batch: u64) -> u64 {
        self.steps * batch
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub source: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunTable {
    pub records: Vec<RunRecord>,
    pub provenance: Option<Provenance>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a count such as `400K`, `1.2M` or `3B`. The result must be whole.
pub fn parse_count(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    let (num, exp) = match s.chars().last() {
        Some('K') => (&s[..s.len() - 1], 3),
        Some('M') => (&s[..s.len() - 1], 6),
        Some('B') => (&s[..s.len() - 1], 9),
        Some(c) if c.is_ascii_digit() => (s, 0),
        Some(c) => return Err(format!("unknown suffix `{c}` in `{s}`")),
        None => return Err("empty count".into()),
    };
    let (int, frac) = num.split_once('.').unwrap_or((num, ""));
    let digits_ok = |t: &str| t.bytes().all(|b| b.is_ascii_digit());
    if int.is_empty() || !digits_ok(int) || !digits_ok(frac) || (num.contains('.') && frac.is_empty()) {
        return Err(format!("bad number `{s}`"));
    }
    let frac = frac.trim_end_matches('0');
    if frac.len() > exp {
        return Err(format!("`{s}` is not a whole count"));
    }
    let scale = 10u64.pow(exp as u32);
    let overflow = || format!("`{s}` is too large");
    let int: u64 = int.parse().map_err(|_| overflow())?;
    let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| overflow())? };
    let frac_val = frac_val * 10u64.pow((exp - frac.len()) as u32);
    int.checked_mul(scale).and_then(|v| v.checked_add(frac_val)).ok_or_else(overflow)
}

/// Inverse of [`parse_count`]: the largest suffix that still reads exactly.
pub fn format_count(n: u64) -> String {
    for (suffix, scale) in [("B", 1_000_000_000u64), ("M", 1_000_000), ("K", 1_000)] {
        if n >= scale {
            let int = n / scale;
            let rem = n % scale;
            if rem == 0 {
                return format!("{int}{suffix}");
            }
            let width = scale.ilog10() as usize;
            let frac = format!("{rem:0width$}");
            return format!("{int}.{}{suffix}", frac.trim_end_matches('0'));
        }
    }
    n.to_string()
}

pub fn parse_runs_text(text: &str, source: &str) -> Result<RunTable> {
    let provenance = Some(Provenance { source: source.to_string(), sha256: sha256_hex(text.as_bytes()) });
    if text.trim().is_empty() {
        return Ok(RunTable { records: Vec::new(), provenance });
    }
    let err = |line: u64, msg: String| Error::Parse { path: source.to_string(), line: line as usize, msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().ne(RUNS_HEADER) {
        return Err(err(1, format!("expected header `{}`", RUNS_HEADER.join(","))));
    }

    let mut records = Vec::new();
    let mut seen: HashMap<(String, u64, u64, String), u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 5 {
            return Err(err(line, format!("expected 5 fields, got {}", rec.len())));
        }
        let model = rec[0].to_string();
        let metric = rec[3].to_string();
        if model.is_empty() || metric.is_empty() {
            return Err(err(line, "empty model or metric".into()));
        }
        let data_size = parse_count(&rec[1]).map_err(|m| err(line, format!("data_size: {m}")))?;
        let steps = parse_count(&rec[2]).map_err(|m| err(line, format!("steps: {m}")))?;
        let accuracy: f64 = rec[4].parse().map_err(|_| err(line, format!("bad value `{}`", &rec[4])))?;
        if !(0.0..=100.0).contains(&accuracy) {
            return Err(err(line, format!("value {accuracy} is not a percentage")));
        }
        let key = (model.clone(), data_size, steps, metric.clone());
        if let Some(first) = seen.insert(key, line) {
            return Err(err(line, format!("duplicate run (first seen on line {first})")));
        }
        records.push(RunRecord {
            model,
            data_size,
            steps,
            metric,
            accuracy,
            error_rate: 1.0 - accuracy / 100.0,
            compute: None,
        });
    }
    Ok(RunTable { records, provenance })
}

pub fn parse_runs_csv(path: impl AsRef<Path>) -> Result<RunTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_runs_text(&text, &path.display().to_string())
}

impl RunTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = RUNS_HEADER.join(",");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.model,
                format_count(r.data_size),
                format_count(r.steps),
                r.metric,
                r.accuracy
            ));
        }
        out
    }

    pub fn metrics(&self) -> Vec<&str> {
        let mut m: Vec<&str> = self.records.iter().map(|r| r.metric.as_str()).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn filter_metric(&self, metric: &str) -> RunTable {
        RunTable {
            records: self.records.iter().filter(|r| r.metric == metric).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// (compute, error) pairs; fails if compute has not been attached.
    pub fn points(&self) -> Result<Vec<Point>> {
        self.records
            .iter()
            .map(|r| {
                r.compute
                    .map(|c| Point::new(c, r.error_rate))
                    .ok_or_else(|| Error::Contract(format!("no compute attached for {} at {} steps", r.model, r.steps)))
            })
            .collect()
    }
}

/// Attach `steps · batch · GFLOPs(224) · 1e-9` exaFLOPs to every record.
pub fn attach_compute(table: &RunTable, shapes: &[ShapeRow], batch: u64) -> Result<RunTable> {
    if batch == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let by_name: HashMap<&str, &ShapeRow> = shapes.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut out = table.clone();
    for r in &mut out.records {
        let shape = by_name.get(r.model.as_str()).ok_or_else(|| Error::UnknownModel(r.model.clone()))?;
        if r.steps == 0 {
            return Err(Error::Contract(format!("{} has zero steps; compute must be positive", r.model)));
        }
        r.compute = Some(r.images_seen(batch) as f64 * shape.gflops_224 * 1e-9);
    }
    Ok(out)
}

/// `fit.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitJson {
    pub params: LawParams,
    pub rms: f64,
    pub n_points: usize,
    pub frontier: Vec<Point>,
}

impl FitJson {
    pub fn new(report: &FitReport, points: &[Point]) -> Self {
        FitJson {
            params: report.params,
            rms: report.rms_residual,
            n_points: report.n_points,
            frontier: pareto_frontier(points),
        }
    }
}
