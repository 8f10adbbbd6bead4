use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Csv,
    Svg,
}

impl FromStr for PlotFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(PlotFormat::Csv),
            "svg" => Ok(PlotFormat::Svg),
            _ => Err(Error::Config(format!("unknown plot format `{s}` (csv, svg)"))),
        }
    }
}

/// One point of a compute/error curve. `predicted` is the fitted law, if any.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub compute: f64,
    pub observed: f64,
    pub predicted: Option<f64>,
}

fn check(points: &[CurvePoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::TooFewPoints { required: 1, got: 0 });
    }
    for p in points {
        let pred_ok = p.predicted.is_none_or(|v| v > 0.0 && v.is_finite());
        if !(p.compute > 0.0 && p.compute.is_finite() && p.observed > 0.0 && p.observed.is_finite() && pred_ok) {
            return Err(Error::Contract(format!("log-log plot needs positive finite values, got {p:?}")));
        }
    }
    Ok(())
}

/// `compute,observed,predicted` with shortest round-trip float formatting.
pub fn render_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("compute,observed,predicted\n");
    for p in points {
        let pred = p.predicted.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", p.compute, p.observed, pred);
    }
    out
}

pub fn parse_curve_csv(text: &str, source: &str) -> Result<Vec<CurvePoint>> {
    let err = |line: usize, msg: String| Error::Parse { path: source.to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "compute,observed,predicted")) => {}
        _ => return Err(err(1, "expected header `compute,observed,predicted`".into())),
    }
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| err(line, format!("bad number `{s}`")));
    let mut out = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 3 {
            return Err(err(line, format!("expected 3 fields, got {}", f.len())));
        }
        out.push(CurvePoint {
            compute: num(line, f[0])?,
            observed: num(line, f[1])?,
            predicted: if f[2].is_empty() { None } else { Some(num(line, f[2])?) },
        });
    }
    Ok(out)
}

/// Decade-aligned log10 range covering `vals`.
fn log_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let l = v.log10();
        (lo.min(l), hi.max(l))
    });
    let (lo, hi) = (lo.floor(), hi.ceil());
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

/// Log-log scatter of observed errors with the fitted curve as a polyline.
pub fn render_svg(points: &[CurvePoint]) -> Result<String> {
    check(points)?;
    let (x0, x1) = log_range(points.iter().map(|p| p.compute));
    let (y0, y1) = log_range(points.iter().flat_map(|p| std::iter::once(p.observed).chain(p.predicted)));
    let px = |c: f64| MARGIN + (c.log10() - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |e: f64| HEIGHT - MARGIN - (e.log10() - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    let mut tick = x0;
    while tick <= x1 {
        let x = px(10f64.powf(tick));
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle">1e{tick}</text>"#,
            b - 6.0,
            b + 20.0
        );
        tick += 1.0;
    }
    let mut tick = y0;
    while tick <= y1 {
        let y = py(10f64.powf(tick));
        let _ = writeln!(
            s,
            r#"<line x1="{l}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">1e{tick}</text>"#,
            l + 6.0,
            l - 8.0,
            y + 4.0
        );
        tick += 1.0;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">compute</text>"#,
        WIDTH / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 20 {:.2})">error rate</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    let mut curve: Vec<(f64, f64)> = points.iter().filter_map(|p| p.predicted.map(|e| (p.compute, e))).collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    if curve.len() > 1 {
        let pts: Vec<String> = curve.iter().map(|&(c, e)| format!("{:.2},{:.2}", px(c), py(e))).collect();
        let _ =
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" "));
    }
    for p in points {
        let _ =
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="darkorange"/>"#, px(p.compute), py(p.observed));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_plot(points: &[CurvePoint], path: impl AsRef<Path>, format: PlotFormat) -> Result<()> {
    check(points)?;
    let body = match format {
        PlotFormat::Csv => render_csv(points),
        PlotFormat::Svg => render_svg(points)?,
    };
    let path = path.as_ref();
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
