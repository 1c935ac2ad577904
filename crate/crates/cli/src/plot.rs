//! Standalone SVG charts built from small tables.

use std::fmt::Write;

use oraclebench_core::experiments::fit::{fit_power_law_filtered, MIN_FIT_VALUE};
use oraclebench_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Num(f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_series(&mut self, series: &str, x: f64, y: f64) {
        self.rows
            .push(vec![Cell::Text(series.into()), Cell::Num(x), Cell::Num(y)]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Log-log markers with a dashed power-law fit per series.
    LogLog,
    /// Lines, e.g. a training curve.
    Loss,
    /// Markers only.
    Scatter,
    /// Lines with markers.
    Curves,
    /// Bars of `(bin centre, count)`.
    Histogram,
}

impl PlotKind {
    pub fn schema(self) -> &'static [&'static str] {
        match self {
            PlotKind::LogLog => &["series", "N", "value"],
            PlotKind::Loss => &["series", "epoch", "value"],
            PlotKind::Scatter | PlotKind::Curves => &["series", "x", "y"],
            PlotKind::Histogram => &["bin", "count"],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Labels {
    pub title: String,
    pub x: String,
    pub y: String,
}

impl Labels {
    pub fn new(title: &str, x: &str, y: &str) -> Self {
        Self {
            title: title.into(),
            x: x.into(),
            y: y.into(),
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

/// Ticks in log10 space: whole decades, or 1-2-5 steps when the range is short.
fn log_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let decades: Vec<f64> = (lo.ceil() as i64..=hi.floor() as i64).map(|d| d as f64).collect();
    if decades.len() >= 2 {
        return decades;
    }
    let mut out = Vec::new();
    for d in (lo.floor() as i64)..=(hi.ceil() as i64) {
        for m in [1.0, 2.0, 5.0] {
            let v = (m * 10f64.powi(d as i32)).log10();
            if v >= lo - 1e-12 && v <= hi + 1e-12 {
                out.push(v);
            }
        }
    }
    out
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool, include_zero: bool) -> Self {
        let v: Vec<f64> = values.map(|x| if log { x.log10() } else { x }).collect();
        let mut lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if include_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
            lo -= pad;
            hi += pad;
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            log_ticks(self.lo, self.hi)
                .into_iter()
                .map(|t| (10f64.powf(t), fmt_num(10f64.powf(t))))
                .collect()
        } else {
            nice_ticks(self.lo, self.hi)
                .into_iter()
                .map(|t| (t, fmt_num(t)))
                .collect()
        }
    }
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn schema_error(kind: PlotKind, msg: String) -> Error {
    Error::Contract(format!("{kind:?} plot: {msg}"))
}

fn check_schema(table: &Table, kind: PlotKind) -> Result<()> {
    let want = kind.schema();
    if table.columns.iter().map(String::as_str).ne(want.iter().copied()) {
        return Err(schema_error(
            kind,
            format!("expected columns {want:?}, got {:?}", table.columns),
        ));
    }
    let text_first = want[0] == "series";
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != want.len() {
            return Err(schema_error(kind, format!("row {i} has {} cells", row.len())));
        }
        for (j, c) in row.iter().enumerate() {
            let ok = match c {
                Cell::Text(_) => text_first && j == 0,
                Cell::Num(v) => !(text_first && j == 0) && v.is_finite(),
            };
            if !ok {
                return Err(schema_error(
                    kind,
                    format!("row {i}, column {}: wrong cell type", want[j]),
                ));
            }
        }
    }
    Ok(())
}

fn num(c: &Cell) -> f64 {
    match c {
        Cell::Num(v) => *v,
        Cell::Text(_) => unreachable!("schema checked"),
    }
}

fn group(table: &Table) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for row in &table.rows {
        let Cell::Text(name) = &row[0] else {
            unreachable!("schema checked")
        };
        let p = (num(&row[1]), num(&row[2]));
        match out.iter_mut().find(|s| &s.name == name) {
            Some(s) => s.points.push(p),
            None => out.push(Series {
                name: name.clone(),
                points: vec![p],
            }),
        }
    }
    out
}

/// Render `table` as an SVG document. Series without points are left out.
pub fn emit_plot(table: &Table, kind: PlotKind, labels: &Labels) -> Result<String> {
    check_schema(table, kind)?;
    let log = kind == PlotKind::LogLog;
    let mut series = if kind == PlotKind::Histogram {
        vec![Series {
            name: "count".into(),
            points: table.rows.iter().map(|r| (num(&r[0]), num(&r[1]))).collect(),
        }]
    } else {
        group(table)
    };
    if log {
        for s in &mut series {
            s.points.retain(|p| p.0 > 0.0 && p.1 > 0.0);
        }
    }
    series.retain(|s| !s.points.is_empty());

    let all = || series.iter().flat_map(|s| s.points.iter());
    let xa = Axis::fit(all().map(|p| p.0), log, false);
    let ya = Axis::fit(all().map(|p| p.1), log, kind == PlotKind::Histogram);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let px = |x: f64| LEFT + xa.frac(x) * pw;
    let py = |y: f64| TOP + (1.0 - ya.frac(y)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        esc(&labels.title)
    );
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/>"#);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="ticks" fill="black">"#);
    for (v, label) in xa.ticks() {
        let x = px(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{b2}" stroke="black"/><text x="{x:.2}" y="{ty}" text-anchor="middle">{}</text>"#,
            esc(&label),
            b = TOP + ph,
            b2 = TOP + ph + 4.0,
            ty = TOP + ph + 16.0
        );
    }
    for (v, label) in ya.ticks() {
        let y = py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{l2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{}</text>"#,
            esc(&label),
            l2 = LEFT - 4.0,
            tx = LEFT - 6.0,
            ty = y + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        esc(&labels.x)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})">{}</text>"#,
        esc(&labels.y),
        cy = TOP + ph / 2.0
    );

    let mut legend_y = TOP + 8.0;
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, esc(&ser.name));
        match kind {
            PlotKind::Histogram => {
                let width = if ser.points.len() > 1 {
                    (px(ser.points[1].0) - px(ser.points[0].0)).abs()
                } else {
                    pw / 10.0
                };
                for &(x, c) in &ser.points {
                    let (top, base) = (py(c), py(0.0));
                    let _ = writeln!(
                        s,
                        r#"<rect class="bar" x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}" stroke="white"/>"#,
                        px(x) - width / 2.0,
                        width,
                        base - top
                    );
                }
            }
            _ => {
                if matches!(kind, PlotKind::Loss | PlotKind::Curves) && ser.points.len() > 1 {
                    let pts: Vec<String> = ser
                        .points
                        .iter()
                        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                        .collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                        pts.join(" ")
                    );
                }
                if kind != PlotKind::Loss {
                    for &(x, y) in &ser.points {
                        let _ = writeln!(
                            s,
                            r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                            px(x),
                            py(y)
                        );
                    }
                }
            }
        }
        if log {
            if let Ok(f) = fit_power_law_filtered(&ser.points, MIN_FIT_VALUE) {
                let (x0, x1) = (10f64.powf(xa.lo), 10f64.powf(xa.hi));
                let _ = writeln!(
                    s,
                    r#"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 4" clip-path="url(#plot-area)"/>"#,
                    px(x0),
                    py(f.fit.predict(x0)),
                    px(x1),
                    py(f.fit.predict(x1))
                );
                legend_y += 14.0;
                let _ = writeln!(
                    s,
                    r#"<text class="alpha" x="{}" y="{legend_y}" fill="{color}">α = {:.3}</text>"#,
                    LEFT + pw + 10.0,
                    f.fit.alpha
                );
            }
        }
        if kind != PlotKind::Histogram {
            legend_y += 14.0;
            let _ = writeln!(
                s,
                r#"<text class="legend" x="{}" y="{legend_y}" fill="{color}">{}</text>"#,
                LEFT + pw + 10.0,
                esc(&ser.name)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<defs><clipPath id="plot-area"><rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/></clipPath></defs>"#
    );
    s.push_str("</svg>\n");
    Ok(s)
}
