//! CSV, JSON and SVG writers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use boxcar_core::measure::DiscreteMeasure;
use serde::Serialize;

use crate::error::CliError;

/// Seventeen significant digits in scientific notation.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Collects CSV rows behind a `# boxcar <command> config=<hash>` line.
pub struct CsvTable {
    comment: String,
    writer: csv::Writer<Vec<u8>>,
}

impl CsvTable {
    pub fn new(comment: &str, header: &[&str]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Self {
            comment: comment.to_string(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn into_bytes(self) -> Result<Vec<u8>, CliError> {
        let body = self.writer.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        let mut out = format!("# {}\n", self.comment).into_bytes();
        out.extend(body);
        Ok(out)
    }
}

/// Output directory that remembers every file written.
pub struct OutDir {
    root: PathBuf,
    pub written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path_of(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(path.display().to_string());
        Ok(())
    }

    pub fn csv(&mut self, name: &str, table: CsvTable) -> Result<(), CliError> {
        self.write(name, &table.into_bytes()?)
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        self.write(name, text.as_bytes())
    }
}

/// Reads a measure from a CSV with header `x,m`; `#` lines are comments.
pub fn read_measure(path: &Path) -> Result<DiscreteMeasure<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "m" {
        return Err(CliError::Config(format!("{}: expected header `x,m`", path.display())));
    }
    let (mut points, mut masses) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| CliError::Config(format!("{}: row {}: bad number `{s}`", path.display(), line + 1)))
        };
        points.push(parse(&record[0])?);
        masses.push(parse(&record[1])?);
    }
    Ok(DiscreteMeasure::normalize(&points, &masses)?)
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Polyline chart; `log_log` plots base-10 logarithms of both axes.
pub fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>], log_log: bool) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let tf = |v: f64| if log_log { v.log10() } else { v };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .map(|&(x, y)| (tf(x), tf(y)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-300 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-300 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="black" points="{pad},{} {pad},{} {},{}"/>"#,
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    let axis = |v: f64| if log_log { format!("1e{v:.2}") } else { format!("{v:.4}") };
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" text-anchor="middle">{}</text>"#, h - pad + 16.0, axis(x0));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w - pad, h - pad + 16.0, axis(x1));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, pad - 4.0, h - pad, axis(y0));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, pad - 4.0, pad + 4.0, axis(y1));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (k, (s, p)) in series.iter().zip(&pts).enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            w - pad - 120.0,
            pad + 14.0 * k as f64,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_have_seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
    }

    #[test]
    fn csv_table_has_comment_header() {
        let mut t = CsvTable::new("boxcar test config=abc", &["x", "m"]).unwrap();
        t.row([num(1.0), num(2.0)]).unwrap();
        let text = String::from_utf8(t.into_bytes().unwrap()).unwrap();
        assert!(text.starts_with("# boxcar test config=abc\nx,m\n"));
    }

    #[test]
    fn svg_is_well_formed() {
        let s = svg_chart(
            "t",
            "x",
            "y",
            &[Series {
                name: "a<b",
                points: vec![(1.0, 1.0), (10.0, 100.0)],
            }],
            true,
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
    }
}
