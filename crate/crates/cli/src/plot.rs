//! Minimal SVG line charts for the CSV files the tool writes.

use std::fmt::Write as _;
use std::path::Path;

use crate::Failure;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_Y: f64 = 40.0;
/// Point markers are drawn up to this many rows.
const MAX_MARKERS: usize = 200;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table, Failure> {
    let io = |e: csv::Error| Failure::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let headers: Vec<String> = r.headers().map_err(io)?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        return Err(Failure::Usage(format!("{}: need an x column and at least one series", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(io)?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Failure::Io(format!("{}: row {}: {f:?} is not a number", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(Table { headers, rows })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// First column on x, each selected column as one polyline.
pub fn render(table: &Table, columns: &[String], title: &str) -> Result<String, Failure> {
    let series: Vec<usize> = if columns.is_empty() {
        (1..table.headers.len()).collect()
    } else {
        columns
            .iter()
            .map(|c| {
                table
                    .headers
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Failure::Usage(format!("no column {c:?}; have {}", table.headers.join(", "))))
            })
            .collect::<Result<_, _>>()?
    };
    let (x0, x1) = range(table.rows.iter().map(|r| r[0]));
    let (y0, y1) = range(table.rows.iter().flat_map(|r| series.iter().map(move |&c| r[c])));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_Y + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<g stroke="black"><line x1="{MARGIN_LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{MARGIN_LEFT}" y1="{MARGIN_Y}" x2="{MARGIN_LEFT}" y2="{b}"/></g>"#,
        b = HEIGHT - MARGIN_Y,
        r = MARGIN_LEFT + pw
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            HEIGHT - MARGIN_Y + 16.0,
            tick(xv)
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN_LEFT - 6.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 6.0,
        escape(&table.headers[0])
    );
    for (k, &c) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let name = escape(&table.headers[c]);
        let points: Vec<String> = table.rows.iter().map(|r| format!("{:.2},{:.2}", sx(r[0]), sy(r[c]))).collect();
        let _ = writeln!(s, r#"<g class="series" data-name="{name}">"#);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        if table.rows.len() <= MAX_MARKERS {
            for r in &table.rows {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(r[0]), sy(r[c]));
            }
        }
        let _ = writeln!(s, "</g>");
        let ly = MARGIN_Y + 16.0 * k as f64;
        let lx = MARGIN_LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e5) {
        format!("{v:.1e}")
    } else {
        let t = format!("{v:.3}");
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_two_markers_per_series() {
        let t = Table {
            headers: vec!["threshold".into(), "map".into()],
            rows: vec![vec![0.5, 0.4], vec![0.55, 0.3]],
        };
        let svg = render(&t, &[], "sweep").unwrap();
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn unknown_column_is_named() {
        let t = Table {
            headers: vec!["iter".into(), "l_det".into()],
            rows: vec![vec![0.0, 1.0]],
        };
        let Err(Failure::Usage(msg)) = render(&t, &["l_x".into()], "") else {
            panic!("expected a usage error")
        };
        assert!(msg.contains("l_x"));
    }

    #[test]
    fn ticks() {
        assert_eq!(tick(0.5), "0.5");
        assert_eq!(tick(3000.0), "3000");
        assert_eq!(tick(0.0), "0");
        assert_eq!(tick(1e-4), "1.0e-4");
    }
}
