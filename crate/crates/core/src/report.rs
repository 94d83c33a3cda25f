//! Comma-separated tables and SVG charts for comparison and period-stratified results.

use std::fmt::Write as _;

use crate::eval::{FoldReport, PeriodBucketReport};

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per method: mean, stderr, and each fold's score (empty for excluded folds).
pub fn comparison_csv(reports: &[&FoldReport]) -> String {
    let folds = reports.iter().map(|r| r.folds.len()).max().unwrap_or(0);
    let mut out = String::from("method,mean,stderr");
    for f in 0..folds {
        let _ = write!(out, ",fold_{f}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{},{},{}", csv_field(&r.method), r.mean, r.stderr);
        for f in 0..folds {
            match r.folds.get(f).and_then(|x| x.c_index) {
                Some(c) => {
                    let _ = write!(out, ",{c}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Human-readable `method  mean ± stderr` table.
pub fn comparison_text(reports: &[&FoldReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  C-index\n", "method");
    for r in reports {
        let _ = writeln!(out, "{:<width$}  {:.4} ± {:.4}", r.method, r.mean, r.stderr);
    }
    out
}

pub fn period_csv(report: &PeriodBucketReport) -> String {
    let mut out = String::from("threshold,folds_used,records,mean_improvement,stderr\n");
    for b in &report.buckets {
        let _ = writeln!(out, "{},{},{},{},{}", b.threshold, b.folds_used, b.records, b.mean_improvement, b.stderr);
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

/// Range padded so that whiskers and zero lines stay inside the plot.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-3);
    (lo - 0.1 * span, hi + 0.1 * span)
}

fn y_axis(out: &mut String, lo: f64, hi: f64, label: &str) {
    let ph = H - TOP - BOTTOM;
    let _ = writeln!(out, "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{}\" stroke=\"black\"/>", H - BOTTOM);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = TOP + ph * (1.0 - i as f64 / 4.0);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/>\
             <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{v:.3}</text>",
            LEFT - 4.0,
            LEFT - 7.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(label)
    );
}

/// Bar chart of mean C-index per method with standard-error whiskers.
pub fn bar_chart_svg(reports: &[&FoldReport], title: &str) -> String {
    let mut out = svg_open(title);
    let lo = reports.iter().map(|r| r.mean - r.stderr).fold(f64::INFINITY, f64::min);
    let hi = reports.iter().map(|r| r.mean + r.stderr).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = padded(lo, hi);
    let (lo, hi) = (lo.max(0.0), hi.min(1.0));
    y_axis(&mut out, lo, hi, "C-index");
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let y_of = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));
    let slot = pw / reports.len().max(1) as f64;
    for (i, r) in reports.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let bw = slot * 0.7;
        let top = y_of(r.mean.clamp(lo, hi));
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{top:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"#4a78b0\"/>",
            (H - BOTTOM - top).max(0.0)
        );
        let cx = x + bw / 2.0;
        let (y1, y2) = (y_of((r.mean - r.stderr).max(lo)), y_of((r.mean + r.stderr).min(hi)));
        let _ = writeln!(
            out,
            "<line x1=\"{cx:.2}\" y1=\"{y1:.2}\" x2=\"{cx:.2}\" y2=\"{y2:.2}\" stroke=\"black\"/>\
             <line x1=\"{:.2}\" y1=\"{y1:.2}\" x2=\"{:.2}\" y2=\"{y1:.2}\" stroke=\"black\"/>\
             <line x1=\"{:.2}\" y1=\"{y2:.2}\" x2=\"{:.2}\" y2=\"{y2:.2}\" stroke=\"black\"/>",
            cx - 5.0,
            cx + 5.0,
            cx - 5.0,
            cx + 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\
             <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{:.3}</text>",
            H - BOTTOM + 18.0,
            escape(&r.method),
            H - BOTTOM + 32.0,
            r.mean
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Line chart of mean improvement against minimum observation period, with a zero line and
/// standard-error whiskers.
pub fn period_chart_svg(report: &PeriodBucketReport) -> String {
    let title = format!("{} vs {}: improvement by minimum observation period", report.method_a, report.method_b);
    let mut out = svg_open(&title);
    let b = &report.buckets;
    let lo = b.iter().map(|x| x.mean_improvement - x.stderr).fold(0.0, f64::min);
    let hi = b.iter().map(|x| x.mean_improvement + x.stderr).fold(0.0, f64::max);
    let (lo, hi) = padded(lo, hi);
    y_axis(&mut out, lo, hi, "C-index improvement");
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let y_of = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));
    let x_of = |i: usize| LEFT + pw * (i as f64 + 0.5) / b.len().max(1) as f64;
    let _ = writeln!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>",
        y_of(0.0),
        W - RIGHT
    );
    let points: Vec<String> =
        b.iter().enumerate().map(|(i, x)| format!("{:.2},{:.2}", x_of(i), y_of(x.mean_improvement))).collect();
    if !points.is_empty() {
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#b04a4a\" stroke-width=\"2\"/>",
            points.join(" ")
        );
    }
    for (i, x) in b.iter().enumerate() {
        let cx = x_of(i);
        let _ = writeln!(
            out,
            "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\
             <circle cx=\"{cx:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"#b04a4a\"/>\
             <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">&#8805; {}</text>",
            y_of(x.mean_improvement - x.stderr),
            y_of(x.mean_improvement + x.stderr),
            y_of(x.mean_improvement),
            H - BOTTOM + 18.0,
            x.threshold
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">minimum observation period</text>",
        LEFT + pw / 2.0,
        H - BOTTOM + 45.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::PeriodBucket;

    fn report(method: &str, scores: &[Option<f64>]) -> FoldReport {
        let folds = scores
            .iter()
            .enumerate()
            .map(|(i, c)| crate::eval::FoldResult {
                fold: i,
                test_indices: vec![],
                test_predictions: vec![],
                c_index: *c,
                chosen_candidate: 0,
                chosen_config: Default::default(),
                validation_scores: vec![],
                wall_clock_secs: 0.0,
            })
            .collect();
        FoldReport {
            method: method.into(),
            k: scores.len(),
            seed: 0,
            folds,
            mean: 0.75,
            stderr: 0.01,
            warnings: vec![],
        }
    }

    #[test]
    fn csv_rows_and_missing_folds() {
        let a = report("A", &[Some(0.7), Some(0.8)]);
        let b = report("B,x", &[Some(0.5), None]);
        let csv = comparison_csv(&[&a, &b]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,mean,stderr,fold_0,fold_1");
        assert_eq!(lines[1], "A,0.75,0.01,0.7,0.8");
        assert_eq!(lines[2], "\"B,x\",0.75,0.01,0.5,");
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let a = report("A<1>", &[Some(0.7)]);
        let svg = bar_chart_svg(&[&a], "t");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("A&lt;1&gt;"));
        let p = PeriodBucketReport {
            method_a: "A".into(),
            method_b: "B".into(),
            thresholds: vec![0.0, 1.0],
            buckets: vec![
                PeriodBucket { threshold: 0.0, folds_used: 2, records: 10, mean_improvement: 0.01, stderr: 0.005 },
                PeriodBucket { threshold: 1.0, folds_used: 2, records: 5, mean_improvement: 0.02, stderr: 0.01 },
            ],
            warnings: vec![],
        };
        let svg = period_chart_svg(&p);
        assert!(svg.contains("<polyline"));
        assert_eq!(period_csv(&p).lines().count(), 3);
    }
}
