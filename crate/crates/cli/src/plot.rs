//! Self-contained SVG figures drawn from already-written CSV artifacts.

use std::fmt::Write;

use crate::artifacts::csv_rows;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22",
];
const PANEL: f64 = 300.0;
const MARGIN: f64 = 50.0;

fn provenance_comment(csv: &str) -> String {
    csv.lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .map(|l| format!("<!-- {} -->\n", l.trim_start_matches('#').trim()))
        .unwrap_or_default()
}

fn parse(v: &str) -> Option<f64> {
    v.trim().parse().ok().filter(|x: &f64| x.is_finite())
}

struct Frame {
    x0: f64,
    y0: f64,
    xr: [f64; 2],
    yr: [f64; 2],
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.x0 + (v - self.xr[0]) / (self.xr[1] - self.xr[0]).max(1e-12) * PANEL
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + PANEL - (v - self.yr[0]) / (self.yr[1] - self.yr[0]).max(1e-12) * PANEL
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (x0, y0) = (self.x0, self.y0);
        let _ = writeln!(out, r#"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{title}</text>"#, x0 + PANEL / 2.0, y0 - 10.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{xlabel}</text>"#, x0 + PANEL / 2.0, y0 + PANEL + 35.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 {} {})">{ylabel}</text>"#,
            x0 - 35.0,
            y0 + PANEL / 2.0,
            x0 - 35.0,
            y0 + PANEL / 2.0
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let (xv, yv) = (self.xr[0] + f * (self.xr[1] - self.xr[0]), self.yr[0] + f * (self.yr[1] - self.yr[0]));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#, self.x(xv), y0 + PANEL + 15.0, tick(xv));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#, x0 - 5.0, self.y(yv) + 3.0, tick(yv));
        }
    }

    fn polyline(&self, out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let points: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", self.x(*x), self.y(*y))).collect();
        let dash = if dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, points.join(" "));
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn document(width: f64, height: f64, comment: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n{comment}<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn legend(out: &mut String, x: f64, y: f64, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let yy = y + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<line x1="{x}" y1="{yy}" x2="{}" y2="{yy}" stroke="{color}" stroke-width="2"/>"#, x + 16.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{label}</text>"#, x + 20.0, yy + 3.0);
    }
}

/// P-P calibration panels: each panel overlays `(label, p,u CSV)` curves on
/// the dashed diagonal.
pub fn calibration_pp(panels: &[(&str, Vec<(&str, &str)>)]) -> String {
    let mut body = String::new();
    let comment = panels.iter().flat_map(|p| p.1.first()).map(|c| provenance_comment(c.1)).next().unwrap_or_default();
    for (i, (title, curves)) in panels.iter().enumerate() {
        let frame = Frame { x0: MARGIN + i as f64 * (PANEL + 2.0 * MARGIN + 60.0), y0: MARGIN, xr: [0.0, 1.0], yr: [0.0, 1.0] };
        frame.axes(&mut body, title, "expected quantile", "PIT value");
        frame.polyline(&mut body, &[(0.0, 0.0), (1.0, 1.0)], "gray", true);
        for (k, (_, csv)) in curves.iter().enumerate() {
            let pts: Vec<(f64, f64)> = csv_rows(csv).iter().filter_map(|r| Some((parse(r.first()?)?, parse(r.get(1)?)?))).collect();
            frame.polyline(&mut body, &pts, PALETTE[k % PALETTE.len()], false);
        }
        let labels: Vec<&str> = curves.iter().map(|c| c.0).collect();
        legend(&mut body, frame.x0 + PANEL + 8.0, frame.y0 + 10.0, &labels);
    }
    let width = panels.len() as f64 * (PANEL + 2.0 * MARGIN + 60.0);
    document(width, PANEL + 2.0 * MARGIN, &comment, &body)
}

/// Binned mean error against mean uncertainty with bootstrap intervals,
/// from CSV columns `uncertainty_mean,mae,ci_low,ci_high,n`.
pub fn error_vs_uncertainty(csv: &str) -> String {
    let rows: Vec<[f64; 4]> = csv_rows(csv)
        .iter()
        .filter_map(|r| Some([parse(r.first()?)?, parse(r.get(1)?)?, parse(r.get(2)?)?, parse(r.get(3)?)?]))
        .collect();
    let mut body = String::new();
    let hi = rows.iter().flat_map(|r| [r[0], r[3]]).fold(1e-9, f64::max) * 1.1;
    let frame = Frame { x0: MARGIN + 10.0, y0: MARGIN, xr: [0.0, hi], yr: [0.0, hi] };
    frame.axes(&mut body, "step length error vs uncertainty", "uncertainty [mm]", "mean absolute error [mm]");
    frame.polyline(&mut body, &[(0.0, 0.0), (hi, hi)], "gray", true);
    if rows.is_empty() {
        let _ = writeln!(body, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">no data</text>"#, frame.x(hi / 2.0), frame.y(hi / 2.0));
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
    frame.polyline(&mut body, &pts, PALETTE[0], false);
    for r in &rows {
        let _ = writeln!(
            body,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{}"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
            frame.y(r[2]),
            frame.y(r[3]),
            PALETTE[0],
            frame.y(r[1]),
            PALETTE[0],
            x = frame.x(r[0]),
        );
    }
    document(PANEL + 2.0 * MARGIN + 20.0, PANEL + 2.0 * MARGIN, &provenance_comment(csv), &body)
}

/// Grouped bars of empirical coverage per nominal level, from CSV columns
/// `label,level,coverage`. Nominal levels are drawn as dashed ticks.
pub fn coverage_bars(csv: &str) -> String {
    let rows: Vec<(String, f64, f64)> = csv_rows(csv)
        .iter()
        .filter_map(|r| Some((r.first()?.to_string(), parse(r.get(1)?)?, parse(r.get(2)?)?)))
        .collect();
    let mut labels: Vec<String> = Vec::new();
    let mut levels: Vec<f64> = Vec::new();
    for (l, lv, _) in &rows {
        if !labels.contains(l) {
            labels.push(l.clone());
        }
        if !levels.iter().any(|v| v == lv) {
            levels.push(*lv);
        }
    }
    let mut body = String::new();
    let width = PANEL * 2.0;
    let frame = Frame { x0: MARGIN + 10.0, y0: MARGIN, xr: [0.0, 1.0], yr: [0.0, 1.0] };
    let _ = writeln!(body, r#"<rect x="{}" y="{}" width="{width}" height="{PANEL}" fill="none" stroke="black"/>"#, frame.x0, frame.y0);
    let _ = writeln!(body, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">coverage at nominal levels</text>"#, frame.x0 + width / 2.0, frame.y0 - 10.0);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(body, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#, frame.x0 - 5.0, frame.y(v) + 3.0);
    }
    let group = width / levels.len().max(1) as f64;
    let bar = group * 0.8 / labels.len().max(1) as f64;
    for (g, level) in levels.iter().enumerate() {
        let gx = frame.x0 + g as f64 * group + group * 0.1;
        for (label, lv, cov) in &rows {
            if lv != level {
                continue;
            }
            let k = labels.iter().position(|l| l == label).unwrap_or(0);
            let x = gx + k as f64 * bar;
            let _ = writeln!(
                body,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                frame.y(*cov),
                bar * 0.9,
                frame.y(0.0) - frame.y(*cov),
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            body,
            r#"<line x1="{gx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-dasharray="4,3"/>"#,
            gx + group * 0.8,
            y = frame.y(*level)
        );
        let _ = writeln!(body, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{:.0}%</text>"#, gx + group * 0.4, frame.y(0.0) + 15.0, level * 100.0);
    }
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    legend(&mut body, frame.x0 + width + 8.0, frame.y0 + 10.0, &refs);
    document(width + 2.0 * MARGIN + 100.0, PANEL + 2.0 * MARGIN, &provenance_comment(csv), &body)
}
