//! Labeled matrices with CSV and SVG heatmap rendering, and run manifests.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic_str;

/// A labeled `rows × cols` matrix of values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub title: String,
    pub row_axis: String,
    pub col_axis: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Grid {
    pub fn new(
        title: impl Into<String>,
        row_axis: impl Into<String>,
        col_axis: impl Into<String>,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
    ) -> Grid {
        let values = vec![vec![0.0; col_labels.len()]; row_labels.len()];
        Grid {
            title: title.into(),
            row_axis: row_axis.into(),
            col_axis: col_axis.into(),
            row_labels,
            col_labels,
            values,
            notes: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r][c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r][c] = v;
    }

    /// Elementwise `1 - x`, for figures that show how corrupted a patch
    /// makes the model look.
    pub fn flipped(&self) -> Grid {
        let mut g = self.clone();
        for row in &mut g.values {
            for v in row {
                *v = 1.0 - *v;
            }
        }
        g.title = format!("1 - ({})", self.title);
        g
    }

    fn finite_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in self.values.iter().flatten() {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            (0.0, 1.0)
        } else {
            (lo, hi)
        }
    }

    /// First column holds row labels; header row holds column labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec![format!("{}\\{}", self.row_axis, self.col_axis)];
        header.extend(self.col_labels.iter().cloned());
        out.push_str(&csv_line(&header));
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            let mut cells = vec![label.clone()];
            cells.extend(row.iter().map(|v| format!("{v}")));
            out.push_str(&csv_line(&cells));
        }
        out
    }

    /// Diverging blue-white-red heatmap centred on the midpoint of the
    /// finite value range.
    pub fn to_svg(&self) -> String {
        let cell = 28.0;
        let left = 16.0 + 7.0 * self.row_labels.iter().map(String::len).max().unwrap_or(1) as f64;
        let top = 60.0 + 6.0 * self.col_labels.iter().map(String::len).max().unwrap_or(1) as f64;
        let width = left + cell * self.cols() as f64 + 90.0;
        let height = top + cell * self.rows() as f64 + 50.0;
        let (lo, hi) = self.finite_range();
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="8" y="18" font-size="14">{}</text>"#,
            escape(&self.title)
        );
        for (c, label) in self.col_labels.iter().enumerate() {
            let x = left + cell * (c as f64 + 0.5);
            let _ = writeln!(
                s,
                r#"<text transform="translate({x:.1},{:.1}) rotate(-60)">{}</text>"#,
                top - 6.0,
                escape(label)
            );
        }
        for (r, label) in self.row_labels.iter().enumerate() {
            let y = top + cell * (r as f64 + 0.5) + 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{}</text>"#,
                left - 4.0,
                escape(label)
            );
            for (c, &v) in self.values[r].iter().enumerate() {
                let x = left + cell * c as f64;
                let y = top + cell * r as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{}"><title>{} / {}: {v:.6}</title></rect>"#,
                    colour(v, lo, hi),
                    escape(label),
                    escape(&self.col_labels[c])
                );
            }
        }
        let lx = left + cell * self.cols() as f64 + 16.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{top:.1}" width="14" height="14" fill="{}"/>"#,
            colour(hi, lo, hi)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{hi:.3}</text>"#,
            lx + 18.0,
            top + 11.0
        );
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="14" height="14" fill="{}"/>"#,
            top + 20.0,
            colour(lo, lo, hi)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{lo:.3}</text>"#,
            lx + 18.0,
            top + 31.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{left:.1}" y="{:.1}">{} (rows) × {} (columns)</text>"#,
            height - 24.0,
            escape(&self.row_axis),
            escape(&self.col_axis)
        );
        for (k, note) in self.notes.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="8" y="{:.1}" font-style="italic">{}</text>"#,
                height - 8.0 + 12.0 * k as f64,
                escape(note)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<stem>.csv`, `<stem>.svg` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<String>> {
        let files = [
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}.svg"), self.to_svg()),
            (
                format!("{stem}.json"),
                serde_json::to_string_pretty(self)? + "\n",
            ),
        ];
        let mut names = Vec::new();
        for (name, body) in files {
            write_atomic_str(&dir.join(&name), &body)?;
            names.push(name);
        }
        Ok(names)
    }
}

pub fn csv_line(cells: &[String]) -> String {
    let mut line = cells
        .iter()
        .map(|c| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(",");
    line.push('\n');
    line
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn colour(v: f64, lo: f64, hi: f64) -> String {
    if !v.is_finite() {
        return "#888888".into();
    }
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (
            lerp(59.0, 255.0, u),
            lerp(76.0, 255.0, u),
            lerp(192.0, 255.0, u),
        )
    } else {
        let u = (t - 0.5) / 0.5;
        (
            lerp(255.0, 180.0, u),
            lerp(255.0, 4.0, u),
            lerp(255.0, 38.0, u),
        )
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Reproducibility record written next to every artifact set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub library_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub results: serde_json::Value,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic_str(
            &dir.join("manifest.json"),
            &(serde_json::to_string_pretty(self)? + "\n"),
        )
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest in {}: {e}", dir.display())))
    }
}

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        let mut g = Grid::new(
            "t",
            "layer",
            "position",
            vec!["0".into(), "1".into()],
            vec!["n1".into(), "out".into()],
        );
        g.set(0, 1, 0.25);
        g.set(1, 0, -1.5);
        g
    }

    #[test]
    fn csv_layout() {
        let csv = grid().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer\\position,n1,out");
        assert_eq!(lines[1], "0,0,0.25");
        assert_eq!(lines[2], "1,-1.5,0");
    }

    #[test]
    fn svg_has_one_rect_per_cell_plus_legend() {
        let svg = grid().to_svg();
        assert_eq!(svg.matches("<rect").count(), 4 + 2);
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn flip() {
        let g = grid().flipped();
        assert_eq!(g.get(0, 1), 0.75);
        assert_eq!(g.get(1, 0), 2.5);
    }
}
