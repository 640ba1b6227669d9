//! Evaluation reports and their CSV, JSON and SVG forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{create_parent, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    KlPredictive,
    KlPosterior,
    Nll,
    SqLoss,
    Coverage,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::KlPredictive, Metric::KlPosterior, Metric::Nll, Metric::SqLoss, Metric::Coverage];

    pub fn name(self) -> &'static str {
        match self {
            Metric::KlPredictive => "kl_predictive",
            Metric::KlPosterior => "kl_posterior",
            Metric::Nll => "nll",
            Metric::SqLoss => "sq_loss",
            Metric::Coverage => "coverage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown metric {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub model: String,
    pub dim: usize,
    /// Grid coordinate: context length, horizon or pre-training length.
    pub t: usize,
    pub metric: Metric,
    pub value: f64,
    pub se: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Svg => "svg",
        }
    }
}

const CSV_HEADER: &str = "experiment,model,dim,t,metric,value,se,n";

/// 17 significant digits, enough to round-trip any `f64`.
fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if !row.value.is_finite() || !row.se.is_finite() {
            return Err(Error::NonFinite(format!("{} {} at t={} for {}", row.metric.name(), row.value, row.t, row.model)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Model ids in order of first appearance.
    pub fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model.as_str()) {
                out.push(&r.model);
            }
        }
        out
    }

    pub fn find(&self, model: &str, t: usize, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.t == t && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.experiment,
                r.model,
                r.dim,
                r.t,
                r.metric.name(),
                sci(r.value),
                sci(r.se),
                r.n
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Parse("bad report header".into()));
        }
        let mut report = EvalReport::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse(format!("report line {}: expected 8 fields", i + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("report line {}: {e}", i + 2)));
            let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("report line {}: {e}", i + 2)));
            report.push(ReportRow {
                experiment: f[0].into(),
                model: f[1].into(),
                dim: int(f[2])?,
                t: int(f[3])?,
                metric: Metric::parse(f[4])?,
                value: num(f[5])?,
                se: num(f[6])?,
                n: int(f[7])?,
            })?;
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Log-scale line chart of the first metric in the report, one polyline
    /// per model over `t`.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const L: f64 = 70.0;
        const R: f64 = 150.0;
        const T: f64 = 20.0;
        const B: f64 = 50.0;
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let Some(metric) = self.rows.first().map(|r| r.metric) else {
            out.push_str("</svg>\n");
            return out;
        };
        let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.metric == metric).collect();
        // Non-positive values sit on the floor of the log axis.
        let positive = rows.iter().map(|r| r.value).filter(|&v| v > 0.0);
        let (mut lo, mut hi) = positive.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (1e-3, 1.0);
        }
        let y0 = (lo.log10() - 0.5).floor();
        let y1 = (hi.log10() + 0.1).ceil().max(y0 + 1.0);
        let tmin = rows.iter().map(|r| r.t).min().unwrap_or(1).max(1) as f64;
        let tmax = rows.iter().map(|r| r.t).max().unwrap_or(1).max(1) as f64;
        let (x0, x1) = if tmax > tmin { (tmin.log10(), tmax.log10()) } else { (tmin.log10() - 0.5, tmin.log10() + 0.5) };
        let px = |t: usize| L + ((t.max(1) as f64).log10() - x0) / (x1 - x0) * (W - L - R);
        let py = |v: f64| {
            let lv = if v > 0.0 { v.log10().max(y0) } else { y0 };
            T + (y1 - lv) / (y1 - y0) * (H - T - B)
        };

        let _ = writeln!(out, r#"<g stroke="black" fill="none"><path d="M{L},{T} V{} H{}"/></g>"#, H - B, W - R);
        let _ = writeln!(out, r#"<g font-family="sans-serif" font-size="11">"#);
        for e in (y0 as i32)..=(y1 as i32) {
            let y = py(10f64.powi(e));
            let _ = writeln!(out, r#"<line x1="{}" y1="{y:.2}" x2="{L}" y2="{y:.2}" stroke="black"/>"#, L - 5.0);
            let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">1e{e}</text>"#, L - 8.0, y + 4.0);
        }
        let mut ts: Vec<usize> = rows.iter().map(|r| r.t).collect();
        ts.sort_unstable();
        ts.dedup();
        for &t in &ts {
            let x = px(t);
            let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, H - B, H - B + 5.0);
            let _ = writeln!(out, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#, H - B + 18.0);
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">T</text>"#, (L + W - R) / 2.0, H - 8.0);
        let _ = writeln!(out, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, metric.name());
        out.push_str("</g>\n");

        for (i, model) in self.models().into_iter().enumerate() {
            let mut pts: Vec<&ReportRow> = rows.iter().copied().filter(|r| r.model == model).collect();
            if pts.is_empty() {
                continue;
            }
            pts.sort_by_key(|r| r.t);
            let colour = palette[i % palette.len()];
            let coords: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.t), py(r.value))).collect();
            let _ = writeln!(
                out,
                r#"<polyline data-model="{model}" fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
                coords.join(" ")
            );
            let ly = T + 16.0 * i as f64 + 10.0;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{ly:.2}" font-family="sans-serif" font-size="11" fill="{colour}">{model}</text>"#,
                W - R + 10.0
            );
        }
        out.push_str("</svg>\n");
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
            ReportFormat::Svg => self.to_svg(),
        }
    }
}

/// Writes `report` to `path` in `format`, creating parent directories.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    create_parent(path)?;
    fs::write(path, report.render(format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, t: usize, value: f64) -> ReportRow {
        ReportRow {
            experiment: "lengthgen".into(),
            model: model.into(),
            dim: 1,
            t,
            metric: Metric::KlPredictive,
            value,
            se: value / 10.0,
            n: 100,
        }
    }

    fn sample() -> EvalReport {
        let mut r = EvalReport::new();
        for t in [8, 16, 32] {
            r.push(row("oracle", t, 0.0)).unwrap();
            r.push(row("ext", t, 0.1 / t as f64 + 1e-17)).unwrap();
            r.push(row("gpt", t, std::f64::consts::PI * t as f64)).unwrap();
        }
        r
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(EvalReport::new().to_csv(), format!("{CSV_HEADER}\n"));
        assert!(EvalReport::new().to_svg().contains("</svg>"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = sample();
        let text = r.to_csv();
        assert_eq!(EvalReport::from_csv(&text).unwrap(), r);
        assert!(text.contains(",2.5132741228718345e1,"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn rejects_non_finite_rows() {
        let mut r = EvalReport::new();
        assert!(matches!(r.push(row("m", 1, f64::NAN)), Err(Error::NonFinite(_))));
        assert!(EvalReport::from_csv("nope\n").is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_model() {
        let svg = sample().to_svg();
        assert_eq!(svg.matches("<polyline").count(), 3);
        for m in ["oracle", "ext", "gpt"] {
            assert_eq!(svg.matches(&format!("data-model=\"{m}\"")).count(), 1);
        }
    }

    #[test]
    fn emitted_files_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg] {
            let a = dir.path().join(format!("a.{}", f.extension()));
            let b = dir.path().join(format!("nested/b.{}", f.extension()));
            emit_report(&sample(), f, &a).unwrap();
            emit_report(&sample(), f, &b).unwrap();
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        }
    }
}
