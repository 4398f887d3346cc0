use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use jiang_core::train::{parse_csv, MetricsRow};

const WIDTH: f64 = 640.0;
const PANEL_H: f64 = 180.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const GAP: f64 = 40.0;

struct Series {
    name: &'static str,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

fn series(rows: &[MetricsRow]) -> Vec<Series> {
    let pick = |f: fn(&MetricsRow) -> Option<f64>| -> Vec<(f64, f64)> { rows.iter().filter_map(|r| f(r).map(|y| (r.step as f64, y))).collect() };
    [
        Series {
            name: "loss",
            color: "#1f77b4",
            points: pick(|r| Some(r.loss)),
        },
        Series {
            name: "eval_ppl",
            color: "#d62728",
            points: pick(|r| r.eval_ppl),
        },
        Series {
            name: "eval_acc",
            color: "#2ca02c",
            points: pick(|r| r.eval_acc),
        },
    ]
    .into_iter()
    .filter(|s| !s.points.is_empty())
    .collect()
}

/// One panel per series present in the metrics, stacked, sharing the step
/// axis. Each series is drawn as a single polyline.
pub fn render_svg(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        bail!("metrics contain no data rows");
    }
    let all = series(rows);
    let (x0, x1) = bounds(rows.iter().map(|r| r.step as f64));
    let height = MARGIN_T + all.len() as f64 * (PANEL_H + GAP);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    for (i, s) in all.iter().enumerate() {
        let top = MARGIN_T + i as f64 * (PANEL_H + GAP);
        let (y0, y1) = bounds(s.points.iter().map(|p| p.1));
        let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
        let py = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN_L:.2}" y="{top:.2}" width="{plot_w:.2}" height="{PANEL_H:.2}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(svg, r#"<text x="{MARGIN_L:.2}" y="{:.2}">{}</text>"#, top - 6.0, s.name);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN_L - 4.0, top + 10.0, label(y1));
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN_L - 4.0, top + PANEL_H, label(y0));
        let _ = writeln!(svg, r#"<text x="{MARGIN_L:.2}" y="{:.2}">step {}</text>"#, top + PANEL_H + 14.0, label(x0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">step {}</text>"#,
            WIDTH - MARGIN_R,
            top + PANEL_H + 14.0,
            label(x1)
        );
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            pts.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Range of the values, widened when degenerate.
fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn label(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Reads a metrics CSV and writes the plot. Nothing is written on error.
pub fn plot_metrics(csv: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let rows = parse_csv(&text).with_context(|| format!("parsing {}", csv.display()))?;
    let svg = render_svg(&rows).with_context(|| csv.display().to_string())?;
    fs::write(out, svg).with_context(|| format!("writing {}", out.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, loss: f64, ppl: Option<f64>) -> MetricsRow {
        MetricsRow {
            step,
            tokens_seen: step * 10,
            seq_len: 8,
            loss,
            lr: 1e-3,
            eval_ppl: ppl,
            eval_acc: None,
        }
    }

    #[test]
    fn one_polyline_per_series() {
        let svg = render_svg(&[row(1, 5.0, None), row(2, 4.0, Some(30.0))]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        let only_loss = render_svg(&[row(1, 5.0, None), row(2, 4.0, None)]).unwrap();
        assert_eq!(only_loss.matches("<polyline").count(), 1);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn single_point_and_empty() {
        assert!(render_svg(&[row(1, 5.0, Some(2.0))]).unwrap().contains("<polyline"));
        assert!(render_svg(&[]).is_err());
    }
}
