//! Line charts from sweep CSVs as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<Point>,
}

/// `(x, sum of y, sum of error, rows)` for one x value of one series.
type Bucket = (f64, f64, f64, usize);

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Usage(format!("unknown column: {name}")))
}

fn number(field: &str, column: &str, row: usize) -> Result<f64, CliError> {
    field.trim().parse().map_err(|_| {
        CliError::Runtime(format!(
            "row {row}: column {column} is not numeric: {field:?}"
        ))
    })
}

/// Groups rows by `series`, averaging `y` over rows that share an `x`.
/// Error bars come from `std_error` when plotting `mean_accuracy`.
pub fn load_series(path: &Path, x: &str, y: &str, series: &str) -> Result<Vec<Series>, CliError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let (xi, yi, si) = (
        column(&headers, x)?,
        column(&headers, y)?,
        column(&headers, series)?,
    );
    let ei = if y == "mean_accuracy" {
        headers.iter().position(|h| h == "std_error")
    } else {
        None
    };

    let mut groups: Vec<(String, Vec<Bucket>)> = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        rows += 1;
        let xv = number(&record[xi], x, rows)?;
        let yv = number(&record[yi], y, rows)?;
        let ev = match ei {
            Some(i) => number(&record[i], "std_error", rows)?,
            None => 0.0,
        };
        let name = record[si].to_string();
        let slot = match groups.iter().position(|(n, _)| *n == name) {
            Some(i) => i,
            None => {
                groups.push((name, Vec::new()));
                groups.len() - 1
            }
        };
        let pts = &mut groups[slot].1;
        match pts.iter_mut().find(|p| p.0 == xv) {
            Some(p) => {
                p.1 += yv;
                p.2 += ev;
                p.3 += 1;
            }
            None => pts.push((xv, yv, ev, 1)),
        }
    }
    if rows == 0 {
        return Err(CliError::Runtime("no data rows".into()));
    }

    let numeric = groups.iter().all(|(n, _)| n.parse::<f64>().is_ok());
    if numeric {
        groups.sort_by(|a, b| a.0.parse::<f64>().unwrap().total_cmp(&b.0.parse().unwrap()));
    } else {
        groups.sort_by(|a, b| a.0.cmp(&b.0));
    }
    Ok(groups
        .into_iter()
        .map(|(name, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name,
                points: pts
                    .into_iter()
                    .map(|(x, y, e, n)| Point {
                        x,
                        y: y / n as f64,
                        err: ei.map(|_| e / n as f64),
                    })
                    .collect(),
            }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

pub fn render(series: &[Series], x: &str, y: &str, legend: &str) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = bounds(all().map(|p| p.x));
    let (y0, y1) = bounds(all().flat_map(|p| {
        let e = p.err.unwrap_or(0.0);
        [p.y - e, p.y + e]
    }));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| TOP + (y1 - v) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<g stroke="black" fill="none">
<line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/>
</g>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph,
        TOP + ph
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(x)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &s.points {
            let (cx, cy) = (sx(p.x), sy(p.y));
            if let Some(e) = p.err {
                let _ = writeln!(
                    out,
                    r#"<line class="error-bar" stroke="{color}" x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}"/>"#,
                    sy(p.y - e),
                    sy(p.y + e)
                );
            }
            let _ = writeln!(
                out,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{color}"/>"#
            );
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            out,
            r#"<line stroke="{color}" stroke-width="2" x1="{lx}" y1="{ly}" x2="{}" y2="{ly}"/>
<text x="{}" y="{}">{}={}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(legend),
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}
