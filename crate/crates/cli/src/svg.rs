//! Static scatter plot of a chart, colored by ground-truth angle.

use std::fmt::Write as _;

const PANEL: f64 = 400.0;
const MARGIN: f64 = 20.0;

/// HSL hue in degrees for each point: its angle around the truth centroid,
/// or its position in time when no truth is available.
fn hues(n: usize, truth: Option<&[[f64; 2]]>) -> Vec<f64> {
    match truth {
        Some(t) if !t.is_empty() => {
            let cx = t.iter().map(|p| p[0]).sum::<f64>() / t.len() as f64;
            let cy = t.iter().map(|p| p[1]).sum::<f64>() / t.len() as f64;
            t.iter()
                .map(|p| ((p[1] - cy).atan2(p[0] - cx).to_degrees() + 360.0) % 360.0)
                .collect()
        }
        _ => (0..n).map(|i| 300.0 * i as f64 / n.max(1) as f64).collect(),
    }
}

fn panel(out: &mut String, points: &[[f64; 2]], hues: &[f64], x0: f64, title: &str) {
    let finite = || points.iter().filter(|p| p[0].is_finite() && p[1].is_finite());
    let lo = finite().fold([f64::INFINITY; 2], |a, p| [a[0].min(p[0]), a[1].min(p[1])]);
    let hi = finite().fold([f64::NEG_INFINITY; 2], |a, p| [a[0].max(p[0]), a[1].max(p[1])]);
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let inner = PANEL - 2.0 * MARGIN;
    let _ = writeln!(
        out,
        r##"<g><rect x="{x0}" y="0" width="{PANEL}" height="{PANEL}" fill="white" stroke="#999"/><text x="{}" y="14" font-size="12" font-family="sans-serif">{title}</text>"##,
        x0 + 6.0
    );
    for (p, h) in points.iter().zip(hues) {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let x = x0 + MARGIN + (p[0] - lo[0]) / span * inner;
        let y = PANEL - MARGIN - (p[1] - lo[1]) / span * inner;
        let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.6" fill="hsl({h:.1},80%,45%)"/>"#);
    }
    out.push_str("</g>\n");
}

/// SVG document with the chart, preceded by the ground truth when given.
pub fn chart_svg(chart: &[[f64; 2]], truth: Option<&[[f64; 2]]>) -> String {
    let hues = hues(chart.len(), truth);
    let width = if truth.is_some() { 2.0 * PANEL + MARGIN } else { PANEL };
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL}" viewBox="0 0 {width} {PANEL}">"#
    );
    match truth {
        Some(t) => {
            panel(&mut out, t, &hues, 0.0, "ground truth");
            panel(&mut out, chart, &hues, PANEL + MARGIN, "channel chart");
        }
        None => panel(&mut out, chart, &hues, 0.0, "channel chart"),
    }
    out.push_str("</svg>\n");
    out
}
