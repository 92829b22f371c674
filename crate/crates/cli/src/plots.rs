//! Static SVG plots: loss curves, metric bars per run label and the ablation heat table.
//! Every file embeds its source series as JSON in `<metadata>`, and bars carry their
//! value in `data-value`, so plotted numbers can be checked against the reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use itfa_core::evalmetrics::EvalReport;
use serde::Serialize;

use crate::ablation::AblationTable;
use crate::error::{Error, Result};

pub const LOSS_PLOT: &str = "loss_curves.svg";
pub const METRICS_PLOT: &str = "metrics.svg";
pub const ABLATION_PLOT: &str = "ablation.svg";

#[derive(Clone, Debug, Default)]
pub struct PlotInput {
    /// Stage label → `(step, loss)` series.
    pub loss_logs: BTreeMap<String, Vec<(usize, f64)>>,
    /// Run label (for example `K=10`) → report, in display order.
    pub reports: Vec<(String, EvalReport)>,
    pub ablation: Option<AblationTable>,
}

impl PlotInput {
    pub fn is_empty(&self) -> bool {
        self.loss_logs.is_empty() && self.reports.is_empty() && self.ablation.is_none()
    }
}

/// Writes every plot the input supports into `dir` and returns the paths.
pub fn emit_plots(input: &PlotInput, dir: &Path) -> Result<Vec<PathBuf>> {
    if input.is_empty() {
        return Err(itfa_core::Error::Argument("nothing to plot: no logs, reports or ablation table".into()).into());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    if !input.loss_logs.is_empty() {
        emit(LOSS_PLOT, loss_svg(&input.loss_logs)?)?;
    }
    if !input.reports.is_empty() {
        emit(METRICS_PLOT, metrics_svg(&input.reports)?)?;
    }
    if let Some(t) = &input.ablation {
        emit(ABLATION_PLOT, ablation_svg(t)?)?;
    }
    Ok(written)
}

const PALETTE: [&str; 6] = ["#1f4fd1", "#d1321f", "#2a9d3c", "#8a3fb8", "#c78a00", "#333333"];

fn header(w: u32, h: u32, metadata: &impl Serialize) -> Result<String> {
    let json = serde_json::to_string(metadata)?;
    Ok(format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"11\">\n<metadata>{}</metadata>\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
        escape(&json)
    ))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn loss_svg(logs: &BTreeMap<String, Vec<(usize, f64)>>) -> Result<String> {
    let (pw, ph, pad) = (520.0, 180.0, 40.0);
    let h = (logs.len() as f64 * (ph + pad) + pad) as u32;
    let mut s = header((pw + 2.0 * pad) as u32, h, logs)?;
    for (i, (stage, series)) in logs.iter().enumerate() {
        let top = pad + i as f64 * (ph + pad);
        let finite: Vec<&(usize, f64)> = series.iter().filter(|p| p.1.is_finite()).collect();
        let max_step = finite.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
        let max_loss = finite.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-12);
        let _ = writeln!(
            s,
            "<text x=\"{pad}\" y=\"{:.1}\">{} (max {:.4})</text>",
            top - 6.0,
            escape(stage),
            max_loss
        );
        let _ = writeln!(
            s,
            "<rect x=\"{pad}\" y=\"{top:.1}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#999\"/>"
        );
        let pts: Vec<String> = finite
            .iter()
            .map(|(step, loss)| {
                format!(
                    "{:.2},{:.2}",
                    pad + pw * *step as f64 / max_step,
                    top + ph - ph * loss / max_loss
                )
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>",
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Serialize)]
struct MetricPoint<'a> {
    label: &'a str,
    metric: &'static str,
    value: f64,
}

fn metric_points(reports: &[(String, EvalReport)]) -> Vec<MetricPoint<'_>> {
    let mut pts = Vec::new();
    for (label, r) in reports {
        for (metric, v) in [("bAP", r.bap), ("nAP", r.nap), ("hAP", r.hap), ("bAP50", r.bap50), ("nAP50", r.nap50), ("hAP50", r.hap50)] {
            if let Some(value) = v {
                pts.push(MetricPoint { label, metric, value });
            }
        }
    }
    pts
}

fn metrics_svg(reports: &[(String, EvalReport)]) -> Result<String> {
    let pts = metric_points(reports);
    let metrics = ["bAP", "nAP", "hAP", "bAP50", "nAP50", "hAP50"];
    let (bar, gap, ph, pad) = (10.0, 24.0, 200.0, 40.0);
    let group_w = metrics.len() as f64 * bar + gap;
    let w = (2.0 * pad + reports.len() as f64 * group_w + 90.0) as u32;
    let mut s = header(w, (ph + 2.5 * pad) as u32, &pts)?;
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#999\"/>",
        pad + ph,
        w as f64 - 90.0,
        pad + ph
    );
    for (g, (label, _)) in reports.iter().enumerate() {
        let x0 = pad + g as f64 * group_w;
        for p in pts.iter().filter(|p| p.label == label) {
            let m = metrics.iter().position(|&m| m == p.metric).expect("known metric");
            let hgt = ph * p.value.clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.2}\" width=\"{bar}\" height=\"{hgt:.2}\" fill=\"{}\" data-label=\"{}\" data-metric=\"{}\" data-value=\"{}\"/>",
                x0 + m as f64 * bar,
                pad + ph - hgt,
                PALETTE[m % PALETTE.len()],
                escape(label),
                p.metric,
                p.value
            );
        }
        let _ = writeln!(s, "<text x=\"{x0:.1}\" y=\"{:.1}\">{}</text>", pad + ph + 16.0, escape(label));
    }
    for (m, name) in metrics.iter().enumerate() {
        let y = pad + 14.0 * m as f64;
        let x = w as f64 - 80.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"9\" height=\"9\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{y:.1}\">{name}</text>",
            y - 9.0,
            PALETTE[m % PALETTE.len()],
            x + 13.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn ablation_svg(t: &AblationTable) -> Result<String> {
    let (cw, rh, lw, pad) = (90.0, 22.0, 230.0, 20.0);
    let w = (2.0 * pad + lw + cw * t.shots.len() as f64) as u32;
    let h = (2.0 * pad + rh * (t.rows.len() + 1) as f64) as u32;
    let mut s = header(w, h, t)?;
    for (j, k) in t.shots.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{k}-shot nAP</text>", pad + lw + cw * j as f64 + 6.0, pad + 15.0);
    }
    let values: Vec<f64> = t.rows.iter().flat_map(|r| r.cells.values().map(|c| c.mean)).filter(|v| v.is_finite()).collect();
    let hi = values.iter().copied().fold(0.0, f64::max).max(1e-12);
    for (i, row) in t.rows.iter().enumerate() {
        let y = pad + rh * (i + 1) as f64;
        let _ = writeln!(
            s,
            "<text x=\"{pad}\" y=\"{:.1}\">{} / {} / {}</text>",
            y + 15.0,
            row.policy,
            row.regressor,
            row.classifier
        );
        for (j, k) in t.shots.iter().enumerate() {
            let x = pad + lw + cw * j as f64;
            let Some(c) = row.cells.get(k) else { continue };
            let shade = if c.mean.is_finite() { (255.0 - 180.0 * (c.mean / hi).clamp(0.0, 1.0)).round() as u8 } else { 255 };
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cw}\" height=\"{rh}\" fill=\"rgb({shade},{shade},255)\" stroke=\"white\" data-value=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{:.1}</text>",
                c.mean,
                x + 6.0,
                y + 15.0,
                100.0 * c.mean
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use itfa_core::evalmetrics::{EvalMode, REPORT_SCHEMA_VERSION};

    fn report(b: f64, n: f64) -> EvalReport {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: EvalMode::Joint,
            per_class: vec![],
            bap: Some(b),
            nap: Some(n),
            hap: Some(2.0 * b * n / (b + n)),
            bap50: Some(b + 0.1),
            nap50: Some(n + 0.1),
            hap50: None,
            groups: Default::default(),
            seeds: vec![0],
            per_seed: vec![],
            hap_mean_over_seeds: None,
            hap50_mean_over_seeds: None,
            note: None,
        }
    }

    fn input() -> PlotInput {
        PlotInput {
            loss_logs: [("base".to_string(), vec![(0, 2.5), (1, 1.75), (2, 0.3333333333333333)])].into_iter().collect(),
            reports: vec![("K=1".into(), report(0.81, 0.05)), ("K=10".into(), report(0.8, 0.1234567890123))],
            ablation: None,
        }
    }

    fn data_values(svg: &str) -> Vec<f64> {
        svg.split("data-value=\"").skip(1).map(|s| s[..s.find('"').unwrap()].parse().unwrap()).collect()
    }

    #[test]
    fn one_run_gives_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&input(), dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files.iter().all(|f| f.exists()));
    }

    #[test]
    fn bar_values_equal_report_values() {
        let svg = metrics_svg(&input().reports).unwrap();
        let vals = data_values(&svg);
        let expected: Vec<f64> = input()
            .reports
            .iter()
            .flat_map(|(_, r)| [r.bap, r.nap, r.hap, r.bap50, r.nap50, r.hap50].into_iter().flatten())
            .collect();
        assert_eq!(vals, expected);
    }

    #[test]
    fn loss_metadata_carries_every_point() {
        let svg = loss_svg(&input().loss_logs).unwrap();
        let meta = &svg[svg.find("<metadata>").unwrap() + 10..svg.find("</metadata>").unwrap()];
        let back: BTreeMap<String, Vec<(usize, f64)>> = serde_json::from_str(meta).unwrap();
        assert_eq!(back, input().loss_logs);
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = emit_plots(&input(), a.path()).unwrap();
        let fb = emit_plots(&input(), b.path()).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&PlotInput::default(), dir.path()).is_err());
    }
}
