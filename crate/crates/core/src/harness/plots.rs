//! Minimal SVG line and bar charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AlamError, Result};
use crate::policy::EvalReport;
use crate::probes::{ProbeReport, RecMetrics};

const W: f64 = 480.0;
const H: f64 = 320.0;
const ML: f64 = 64.0;
const MR: f64 = 120.0;
const MT: f64 = 36.0;
const MB: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    /// Shade `x >= shade_from` (half a tick to the left of it).
    pub shade_from: Option<f64>,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, esc(title));
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (ML, H - MB, W - MR, MT);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, esc(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(y_label)
    );
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

pub fn render_line_plot(p: &LinePlot) -> String {
    let tf = |y: f64| if p.log_y { y.log10() } else { y };
    let pts: Vec<(f64, f64)> = p
        .series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|&(x, y)| x.is_finite() && y.is_finite() && (!p.log_y || y > 0.0))
        .collect();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(tf(y));
        ymax = ymax.max(tf(y));
    }
    if pts.is_empty() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if p.log_y {
        ymin = ymin.floor();
        ymax = ymax.ceil().max(ymin + 1.0);
    } else if ymax - ymin < 1e-12 {
        ymin -= 0.5;
        ymax += 0.5;
    } else {
        let pad = 0.05 * (ymax - ymin);
        ymin -= pad;
        ymax += pad;
    }
    if xmax - xmin < 1e-12 {
        xmin -= 0.5;
        xmax += 0.5;
    }
    let sx = |x: f64| ML + (x - xmin) / (xmax - xmin) * (W - ML - MR);
    let sy = |y: f64| H - MB - (tf(y) - ymin) / (ymax - ymin) * (H - MB - MT);
    let mut out = String::new();
    header(&mut out, &p.title);
    if let Some(from) = p.shade_from {
        let xs: Vec<f64> = {
            let mut v: Vec<f64> = pts.iter().map(|q| q.0).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let prev = xs.iter().copied().filter(|&x| x < from).fold(f64::NEG_INFINITY, f64::max);
        let left = if prev.is_finite() { sx((prev + from) / 2.0) } else { ML };
        let _ = writeln!(
            out,
            r##"<rect x="{left:.1}" y="{MT}" width="{:.1}" height="{:.1}" fill="#cccccc" fill-opacity="0.4"/>"##,
            (W - MR - left).max(0.0),
            H - MB - MT
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" fill="gray">unseen</text>"#, left + 4.0, MT + 12.0);
    }
    axes(&mut out, &p.x_label, &p.y_label);
    let mut xs: Vec<f64> = pts.iter().map(|q| q.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(x), H - MB + 14.0, fmt_tick(x));
    }
    let n_ticks = if p.log_y { (ymax - ymin) as usize } else { 4 };
    for i in 0..=n_ticks {
        let t = ymin + (ymax - ymin) * i as f64 / n_ticks.max(1) as f64;
        let (val, y) = if p.log_y { (10f64.powf(t), sy(10f64.powf(t))) } else { (t, sy(t)) };
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ML - 4.0, y + 4.0, fmt_tick(val));
        let _ = writeln!(out, r##"<line x1="{ML}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eeeeee"/>"##, W - MR);
    }
    for (i, s) in p.series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|&&(x, y)| x.is_finite() && y.is_finite() && (!p.log_y || y > 0.0))
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        for xy in &coords {
            let (cx, cy) = xy.split_once(',').expect("formatted pair");
            let _ = writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{c}"/>"#);
        }
        let ly = MT + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/>"#, W - MR + 8.0, W - MR + 24.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - MR + 28.0, ly + 4.0, esc(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub interval: Option<(f64, f64)>,
}

pub fn render_bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, "", y_label);
    let sy = |v: f64| H - MB - v.clamp(0.0, 1.0) * (H - MB - MT);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ML - 4.0, sy(v) + 4.0, fmt_tick(v));
    }
    let slot = (W - ML - MR) / bars.len().max(1) as f64;
    for (i, b) in bars.iter().enumerate() {
        let x = ML + slot * (i as f64 + 0.2);
        let w = slot * 0.6;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(out, r#"<rect x="{x:.1}" y="{:.1}" width="{w:.1}" height="{:.1}" fill="{c}"/>"#, sy(b.value), H - MB - sy(b.value));
        if let Some((lo, hi)) = b.interval {
            let cx = x + w / 2.0;
            let _ = writeln!(out, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, sy(lo), sy(hi));
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x + w / 2.0, H - MB + 14.0, esc(&b.label));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#, x + w / 2.0, sy(b.value) - 4.0, b.value);
    }
    out.push_str("</svg>\n");
    out
}

fn write(dir: &Path, name: &str, body: String) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, body)?;
    Ok(p)
}

/// Add/Rev curves (log y, unseen horizons shaded) and six delta panels,
/// one series per labelled report. Nothing is written for empty input.
pub fn emit_probe_plots(reports: &[(String, ProbeReport)], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() || reports.iter().all(|(_, r)| r.is_empty()) {
        return Err(AlamError::invalid("probe report is empty; no plots written"));
    }
    let shade = reports
        .iter()
        .flat_map(|(_, r)| r.rows.iter().filter(|row| row.unseen).map(|row| row.horizon as f64))
        .fold(f64::INFINITY, f64::min);
    let shade = shade.is_finite().then_some(shade);
    let line = |title: &str, y: &str, log_y: bool, f: &dyn Fn(&crate::probes::HorizonRow) -> f64| LinePlot {
        title: title.into(),
        x_label: "horizon t (steps)".into(),
        y_label: y.into(),
        log_y,
        shade_from: shade,
        series: reports
            .iter()
            .map(|(label, r)| Series {
                label: label.clone(),
                points: r.rows.iter().filter(|row| row.samples > 0).map(|row| (row.horizon as f64, f(row))).collect(),
            })
            .collect(),
    };
    let mut files = vec![
        write(dir, "additivity.svg", render_line_plot(&line("Additivity error", "Add(t)", true, &|r| r.add)))?,
        write(dir, "reversibility.svg", render_line_plot(&line("Reversibility error", "Rev(t)", true, &|r| r.rev)))?,
    ];
    type Pick = fn(&RecMetrics) -> f64;
    let metrics: [(&str, Pick); 3] = [("psnr", |m| m.psnr), ("ssim", |m| m.ssim), ("perceptual", |m| m.perceptual)];
    for (regime, direct) in [("direct", true), ("cumulative", false)] {
        for (name, pick) in metrics {
            let plot = line(&format!("{regime} {name} change"), &format!("delta {name}"), false, &|r| {
                pick(if direct { &r.delta_direct } else { &r.delta_cumulative })
            });
            files.push(write(dir, &format!("delta_{regime}_{name}.svg"), render_line_plot(&plot))?);
        }
    }
    Ok(files)
}

pub fn emit_intervention_plot(reports: &[EvalReport], dir: &Path) -> Result<PathBuf> {
    if reports.iter().all(|r| r.episodes == 0) {
        return Err(AlamError::invalid("evaluation report is empty; no plots written"));
    }
    let bars: Vec<Bar> = reports
        .iter()
        .map(|r| Bar { label: r.intervention.name().to_string(), value: r.success_rate.unwrap_or(0.0), interval: r.interval })
        .collect();
    write(dir, "interventions.svg", render_bar_chart("Test-time interventions", "success rate", &bars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{ErrorNorm, HorizonGrid, HorizonRow};

    fn report(scale: f64) -> ProbeReport {
        let grid = HorizonGrid::default();
        let rows = grid
            .multiples
            .iter()
            .map(|&m| HorizonRow {
                multiple: m,
                horizon: m * grid.stride,
                unseen: !grid.supervised.contains(&m),
                samples: 4,
                add: if m == 1 { 0.0 } else { scale * m as f64 },
                rev: scale * 0.5 * m as f64,
                direct: RecMetrics { psnr: 30.0, ssim: 0.9, perceptual: 0.1 },
                cumulative: RecMetrics { psnr: 30.0 - m as f64, ssim: 0.9, perceptual: 0.1 },
                delta_direct: RecMetrics::default(),
                delta_cumulative: RecMetrics { psnr: 1.0 - m as f64, ssim: 0.0, perceptual: 0.0 },
            })
            .collect();
        ProbeReport {
            encoder_id: "x".into(),
            checkpoint: None,
            grid,
            norm: ErrorNorm::L2,
            requested_anchors: 4,
            skipped_anchors: 0,
            perceptual_metric: "p".into(),
            rows,
        }
    }

    #[test]
    fn probe_plots_are_deterministic() {
        let reports = vec![("alam".to_string(), report(0.01)), ("lam".to_string(), report(1.0))];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = emit_probe_plots(&reports, a.path()).unwrap();
        let fb = emit_probe_plots(&reports, b.path()).unwrap();
        assert_eq!(fa.len(), 8);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let add = fs::read_to_string(a.path().join("additivity.svg")).unwrap();
        assert!(add.contains("unseen") && add.contains(">0.01<"), "{add}");
    }

    #[test]
    fn empty_report_writes_nothing() {
        let mut r = report(1.0);
        r.rows.clear();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plots");
        let err = emit_probe_plots(&[("a".into(), r)], &out).unwrap_err();
        assert_ne!(err.exit_code(), 0);
        assert!(!out.exists());
    }
}
