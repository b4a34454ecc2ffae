//! Standalone SVG line charts of metrics CSV files.
//!
//! Output depends only on the inputs: no timestamps, fixed number
//! formatting, series drawn in argument order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{EpochRecord, METRICS_HEADER};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Loss,
    KnnAcc,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "loss" => Some(Self::Loss),
            "knn_acc" => Some(Self::KnnAcc),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Loss => "loss",
            Self::KnnAcc => "k-NN accuracy",
        }
    }

    fn value(self, r: &EpochRecord) -> Option<f64> {
        match self {
            Self::Loss => Some(r.loss),
            Self::KnnAcc => r.knn_acc,
        }
    }
}

/// Parses a metrics CSV. Errors name the 1-based row (the header is row 1).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    let mut offset = 0u64;
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => offset += h.len() as u64 + 1,
        Some(h) => {
            return Err(Error::Format {
                offset: 0,
                message: format!("row 1: header {h:?} does not match {METRICS_HEADER:?}"),
            })
        }
        None => {
            return Err(Error::Format {
                offset: 0,
                message: "row 1: empty metrics file".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if !line.trim().is_empty() {
            let rec = EpochRecord::parse_csv_line(line).map_err(|m| Error::Format {
                offset,
                message: format!("row {}: {m}", i + 2),
            })?;
            out.push(rec);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn from_records(name: impl Into<String>, records: &[EpochRecord], metric: Metric) -> Self {
        Self {
            name: name.into(),
            points: records
                .iter()
                .filter_map(|r| metric.value(r).map(|v| (r.epoch as f64, v)))
                .collect(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Renders the series as an SVG document with axes and a legend.
pub fn render_svg(series: &[Series], y_label: &str) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_Y + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (bx, by) = (MARGIN_LEFT, MARGIN_Y + plot_h);
    let _ = writeln!(
        s,
        r#"<path d="M{bx:.2},{:.2} L{bx:.2},{by:.2} L{:.2},{by:.2}" stroke="black" fill="none"/>"#,
        MARGIN_Y,
        MARGIN_LEFT + plot_w
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let yv = y0 + t * (y1 - y0);
        let xv = x0 + t * (x1 - x0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{yv:.4}</text>"#,
            MARGIN_LEFT - 6.0,
            sy(yv) + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{xv:.1}</text>"#,
            sx(xv),
            by + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">epoch</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        MARGIN_Y + plot_h / 2.0,
        MARGIN_Y + plot_h / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN_Y + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<g class="legend-entry"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Picks k-NN accuracy when every file has at least one value, else loss.
pub fn default_metric(runs: &[Vec<EpochRecord>]) -> Metric {
    if !runs.is_empty() && runs.iter().all(|r| r.iter().any(|e| e.knn_acc.is_some())) {
        Metric::KnnAcc
    } else {
        Metric::Loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: usize) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for e in 0..rows {
            s.push_str(&format!("{e},{},1,0,0.1,0.5,2,,0\n", 1.0 / (e + 1) as f64));
        }
        s
    }

    #[test]
    fn one_file_one_polyline() {
        let recs = parse_metrics_csv(&csv(3)).unwrap();
        let svg = render_svg(&[Series::from_records("a", &recs, Metric::Loss)], "loss");
        assert_eq!(svg.matches("<polyline").count(), 1);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 3);
    }

    #[test]
    fn malformed_row_is_named() {
        let bad = format!("{}0,1,1,0,0.1,0.5,2,,0\n1,oops,1,0,0.1,0.5,2,,0\n", format_args!("{METRICS_HEADER}\n"));
        let e = parse_metrics_csv(&bad).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
        assert!(parse_metrics_csv("a,b\n").is_err());
    }

    #[test]
    fn deterministic_output() {
        let recs = parse_metrics_csv(&csv(4)).unwrap();
        let s = [
            Series::from_records("x", &recs, Metric::Loss),
            Series::from_records("y<z", &recs, Metric::Loss),
        ];
        let a = render_svg(&s, "loss");
        assert_eq!(a, render_svg(&s, "loss"));
        assert_eq!(a.matches("legend-entry").count(), 2);
        assert!(a.contains("y&lt;z"));
    }
}
