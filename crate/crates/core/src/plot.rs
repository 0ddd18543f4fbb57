//! Standalone SVG charts, each written next to a CSV of its data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ScheduleConfig;
use crate::error::{LamaeError, Result};
use crate::optim::lr_at;
use crate::report::top_codes_by_f1;
use crate::train::{write_text, EvalReport, MetricsLog};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
/// Points at which the learning-rate curve is sampled.
pub const LR_POINTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM, WIDTH - MARGIN_RIGHT, MARGIN_TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    s
}

fn y_ticks(s: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = HEIGHT - MARGIN_BOTTOM - (HEIGHT - MARGIN_BOTTOM - MARGIN_TOP) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{MARGIN_LEFT}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4.0,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            tick_label(v)
        );
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            COLORS[i % COLORS.len()],
            x + 16.0,
            y,
            escape(name)
        );
    }
}

/// Line chart; an empty `series` gives bare axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut s = frame(title, x_label, y_label);
    let all = || series.iter().flat_map(|c| c.points.iter());
    if all().next().is_some() {
        let (xl, xh) = range(all().map(|p| p.0));
        let (yl, yh) = range(all().map(|p| p.1));
        let sx = |x: f64| MARGIN_LEFT + (x - xl) / (xh - xl) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT);
        let sy = |y: f64| HEIGHT - MARGIN_BOTTOM - (y - yl) / (yh - yl) * (HEIGHT - MARGIN_BOTTOM - MARGIN_TOP);
        y_ticks(&mut s, yl, yh);
        for i in 0..=4 {
            let v = xl + (xh - xl) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                sx(v),
                HEIGHT - MARGIN_BOTTOM + 16.0,
                tick_label(v)
            );
        }
        for (i, c) in series.iter().enumerate() {
            let pts: Vec<String> = c
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                COLORS[i % COLORS.len()],
                pts.join(" ")
            );
        }
        legend(&mut s, &series.iter().map(|c| c.name.as_str()).collect::<Vec<_>>());
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per category, one bar per series, in the
/// given order.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut s = frame(title, "", y_label);
    if !categories.is_empty() && !series.is_empty() {
        let hi = series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_BOTTOM - MARGIN_TOP;
        let group_w = plot_w / categories.len() as f64;
        let bar_w = group_w * 0.8 / series.len() as f64;
        y_ticks(&mut s, 0.0, hi);
        for (g, cat) in categories.iter().enumerate() {
            let gx = MARGIN_LEFT + group_w * g as f64 + group_w * 0.1;
            for (k, (_, values)) in series.iter().enumerate() {
                let v = values.get(g).copied().filter(|v| v.is_finite()).unwrap_or(0.0);
                let h = v / hi * plot_h;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    gx + bar_w * k as f64,
                    HEIGHT - MARGIN_BOTTOM - h,
                    bar_w,
                    h,
                    COLORS[k % COLORS.len()]
                );
            }
            let cx = gx + group_w * 0.4;
            let cy = HEIGHT - MARGIN_BOTTOM + 12.0;
            let _ = writeln!(
                s,
                r#"<text x="{cx:.2}" y="{cy:.2}" text-anchor="end" transform="rotate(-40 {cx:.2} {cy:.2})">{}</text>"#,
                escape(cat)
            );
        }
        legend(&mut s, &series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    }
    s.push_str("</svg>\n");
    s
}

pub fn series_csv(x_name: &str, series: &[Series]) -> String {
    let mut s = format!("series,{x_name},value\n");
    for c in series {
        for (x, y) in &c.points {
            let _ = writeln!(s, "{},{x},{y}", c.name);
        }
    }
    s
}

pub fn bars_csv(categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut s = String::from("category");
    for (name, _) in series {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    for (g, cat) in categories.iter().enumerate() {
        s.push_str(cat);
        for (_, v) in series {
            let _ = write!(s, ",{}", v.get(g).copied().unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}

/// The schedule sampled at `LR_POINTS` evenly spaced epochs over the run.
pub fn lr_series(cfg: &ScheduleConfig) -> Series {
    let n = LR_POINTS - 1;
    Series {
        name: "lr".into(),
        points: (0..LR_POINTS)
            .map(|i| {
                let e = cfg.total_epochs * i as f64 / n as f64;
                (e, lr_at(e, cfg))
            })
            .collect(),
    }
}

fn save(out: &Path, stem: &str, svg: &str, csv: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    for (ext, body) in [("svg", svg), ("csv", csv)] {
        let p = out.join(format!("{stem}.{ext}"));
        write_text(&p, body)?;
        written.push(p);
    }
    Ok(())
}

/// Loss curves per log, the learning-rate curve (when a schedule is given),
/// per-code AUROC/F1 bars per report, and a top-10-by-F1 chart when reports
/// carry per-code results. Returns every file written.
pub fn emit_plots(
    logs: &[(String, MetricsLog)],
    reports: &[(String, EvalReport)],
    schedule: Option<&ScheduleConfig>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| LamaeError::io(out, e))?;
    let mut written = Vec::new();

    let mut loss = Vec::new();
    for (name, log) in logs {
        for split in ["train", "val"] {
            let points: Vec<(f64, f64)> = log.split(split).map(|r| (r.epoch as f64, r.loss)).collect();
            if !points.is_empty() {
                loss.push(Series {
                    name: format!("{name} {split}"),
                    points,
                });
            }
        }
    }
    save(
        out,
        "loss",
        &line_chart("Loss", "epoch", "loss", &loss),
        &series_csv("epoch", &loss),
        &mut written,
    )?;

    if let Some(cfg) = schedule {
        let lr = vec![lr_series(cfg)];
        save(
            out,
            "lr",
            &line_chart("Learning rate", "epoch", "lr", &lr),
            &series_csv("epoch", &lr),
            &mut written,
        )?;
    }

    for (name, r) in reports {
        let Some(c) = &r.classification else { continue };
        let codes: Vec<String> = c.per_code.iter().map(|m| m.code.clone()).collect();
        let series = vec![
            (
                "AUROC".to_string(),
                c.per_code.iter().map(|m| m.auroc.unwrap_or(f64::NAN)).collect(),
            ),
            ("F1".to_string(), c.per_code.iter().map(|m| m.f1).collect()),
        ];
        save(
            out,
            &format!("codes_{name}"),
            &bar_chart(&format!("Per-code metrics: {name}"), "score", &codes, &series),
            &bars_csv(&codes, &series),
            &mut written,
        )?;
    }

    let plain: Vec<EvalReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let top = top_codes_by_f1(&plain, 10);
    if !top.is_empty() {
        let codes: Vec<String> = top.iter().map(|c| c.code.clone()).collect();
        let series = vec![
            (
                "mean AUROC".to_string(),
                top.iter().map(|c| c.mean_auroc.unwrap_or(f64::NAN)).collect(),
            ),
            ("mean F1".to_string(), top.iter().map(|c| c.mean_f1).collect()),
        ];
        save(
            out,
            "top_codes",
            &bar_chart("Top codes by mean F1", "score", &codes, &series),
            &bars_csv(&codes, &series),
            &mut written,
        )?;
    }
    Ok(written)
}
