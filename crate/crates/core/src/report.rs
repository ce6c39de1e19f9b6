//! Tables and figures from a finished sweep.
//!
//! Everything here is a pure function of the [`SweepResult`]: the same rows
//! always produce byte-identical files. Figures are plain SVG written by
//! hand, so no plotting runtime is needed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::backend::Transport;
use crate::sweep::{optimality, Direction, Metric, OptimalityMap, RowStatus, SweepResult, CSV_FILE};
use crate::units::ByteSize;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

/// Metrics that get line figures.
const PLOTTED: [Metric; 5] = [Metric::LatencyAvg, Metric::Throughput, Metric::Jitter, Metric::Cpu, Metric::Memory];

/// A named polyline over categorical x positions; `None` leaves a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<Option<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a categorical line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, x_ticks: &[String], series: &[Series]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y_max = series
        .iter()
        .flat_map(|s| s.points.iter().flatten())
        .fold(0.0_f64, |a, &b| a.max(b));
    let y_top = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let x_at = |i: usize| {
        if x_ticks.len() <= 1 {
            MARGIN_LEFT + plot_w / 2.0
        } else {
            MARGIN_LEFT + plot_w * i as f64 / (x_ticks.len() - 1) as f64
        }
    };
    let y_at = |v: f64| MARGIN_TOP + plot_h * (1.0 - v / y_top);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    // axes
    let _ = writeln!(
        svg,
        r#"<path d="M{l:.1},{t:.1} V{b:.1} H{r:.1}" stroke="black" fill="none"/>"#,
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h,
        r = MARGIN_LEFT + plot_w
    );
    for k in 0..=5 {
        let v = y_top * k as f64 / 5.0;
        let y = y_at(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            MARGIN_LEFT,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            format_value(v)
        );
    }
    for (i, tick) in x_ticks.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x_at(i),
            MARGIN_TOP + plot_h + 18.0,
            escape(tick)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, p) in s.points.iter().enumerate() {
            match p {
                Some(v) => {
                    let _ = write!(d, "{}{:.1},{:.1} ", if pen_down { "L" } else { "M" }, x_at(i), y_at(*v));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        if !d.is_empty() {
            let _ = writeln!(svg, r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.trim_end());
        }
        for (i, p) in s.points.iter().enumerate() {
            if let Some(v) = p {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"><title>{}: {}</title></circle>"#,
                    x_at(i),
                    y_at(*v),
                    escape(&s.label),
                    format_value(*v)
                );
            }
        }
        let ly = MARGIN_TOP + 16.0 * k as f64;
        let lx = WIDTH - MARGIN_RIGHT + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Render an optimality map as a payload × subscribers grid coloured by
/// winner; tied cells carry a `*`.
pub fn heatmap(map: &OptimalityMap) -> String {
    let cell_w = 90.0;
    let cell_h = 28.0;
    let left = 80.0;
    let top = 50.0;
    let cols = map.subscribers.len() as f64;
    let rows = map.payload_sizes.len() as f64;
    let width = left + cell_w * cols + 160.0;
    let height = top + cell_h * rows + 50.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{left:.1}" y="22" font-size="14">best {} ({:?}), {} T={} µs</text>"#,
        map.metric.name(),
        map.direction,
        map.transport,
        map.interval_us
    );
    for (j, s) in map.subscribers.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">S={s}</text>"#,
            left + cell_w * (j as f64 + 0.5),
            top - 8.0
        );
    }
    for (i, p) in map.payload_sizes.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 8.0,
            top + cell_h * (i as f64 + 0.5) + 4.0,
            ByteSize(*p)
        );
    }
    for cell in &map.cells {
        let i = map.payload_sizes.iter().position(|p| *p == cell.payload_size).unwrap_or(0);
        let j = map.subscribers.iter().position(|s| *s == cell.subscribers).unwrap_or(0);
        let k = map.backends.iter().position(|b| *b == cell.winner).unwrap_or(0);
        let (x, y) = (left + cell_w * j as f64, top + cell_h * i as f64);
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="{}" fill-opacity="0.6" stroke="white"><title>{} = {}</title></rect>"#,
            PALETTE[k % PALETTE.len()],
            escape(&cell.winner),
            format_value(cell.value)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}{}</text>"#,
            x + cell_w / 2.0,
            y + cell_h / 2.0 + 4.0,
            escape(&cell.winner),
            if cell.tie { "*" } else { "" }
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{left:.1}" y="{:.1}">rows: payload size; columns: subscribers; * = tie</text>"#,
        height - 16.0
    );
    svg.push_str("</svg>\n");
    svg
}

type GroupKey = (Transport, u64);

fn ok_values(result: &SweepResult, metric: Metric) -> BTreeMap<(String, Transport, u64, usize, usize), f64> {
    result
        .rows
        .iter()
        .filter(|r| r.status != RowStatus::Failed)
        .filter_map(|r| {
            let c = &r.config;
            r.metrics.as_ref().and_then(|m| metric.value(m)).map(|v| {
                ((c.backend.clone(), c.transport, c.interval_us, c.payload_size, c.subscribers), v)
            })
        })
        .collect()
}

/// Figures per (metric, transport, interval): metric vs payload size (one
/// line per backend and subscriber count) and metric vs subscriber count
/// (one line per backend and payload size).
pub fn line_figures(result: &SweepResult) -> Vec<(String, String)> {
    let spec = &result.meta.spec;
    let sizes: Vec<usize> = spec.payload_sizes.iter().map(|s| s.bytes()).collect();
    let mut figures = Vec::new();
    for metric in PLOTTED {
        let values = ok_values(result, metric);
        if values.is_empty() {
            continue;
        }
        let groups: Vec<GroupKey> = spec
            .transports
            .iter()
            .flat_map(|&t| spec.intervals_us.iter().map(move |&i| (t, i)))
            .collect();
        for (transport, interval) in groups {
            let get = |b: &str, p: usize, s: usize| values.get(&(b.to_string(), transport, interval, p, s)).copied();
            let by_payload: Vec<Series> = spec
                .backends
                .iter()
                .flat_map(|b| spec.subscribers.iter().map(move |&s| (b, s)))
                .map(|(b, s)| Series {
                    label: format!("{b} S={s}"),
                    points: sizes.iter().map(|&p| get(b, p, s)).collect(),
                })
                .filter(|s| s.points.iter().any(Option::is_some))
                .collect();
            if by_payload.is_empty() {
                continue;
            }
            let y_label = format!("{} ({})", metric.name(), metric.unit());
            let ticks: Vec<String> = spec.payload_sizes.iter().map(ToString::to_string).collect();
            figures.push((
                format!("{}-vs-payload-{transport}-T{interval}.svg", metric.name()),
                line_chart(
                    &format!("{} vs payload size, {transport}, T={interval} µs", metric.name()),
                    "payload size",
                    &y_label,
                    &ticks,
                    &by_payload,
                ),
            ));
            let by_subs: Vec<Series> = spec
                .backends
                .iter()
                .flat_map(|b| sizes.iter().map(move |&p| (b, p)))
                .map(|(b, p)| Series {
                    label: format!("{b} P={}", ByteSize(p)),
                    points: spec.subscribers.iter().map(|&s| get(b, p, s)).collect(),
                })
                .filter(|s| s.points.iter().any(Option::is_some))
                .collect();
            let ticks: Vec<String> = spec.subscribers.iter().map(ToString::to_string).collect();
            figures.push((
                format!("{}-vs-subscribers-{transport}-T{interval}.svg", metric.name()),
                line_chart(
                    &format!("{} vs subscribers, {transport}, T={interval} µs", metric.name()),
                    "subscribers",
                    &y_label,
                    &ticks,
                    &by_subs,
                ),
            ));
        }
    }
    figures
}

/// Optimality maps for every metric that has data; metrics whose grid is
/// incomplete are reported by name with the reason.
pub fn all_maps(result: &SweepResult) -> (Vec<OptimalityMap>, Vec<(Metric, String)>) {
    let mut maps = Vec::new();
    let mut skipped = Vec::new();
    for metric in Metric::ALL {
        match optimality(result, metric, None) {
            Ok(m) => maps.extend(m),
            Err(e) => skipped.push((metric, e.to_string())),
        }
    }
    (maps, skipped)
}

pub fn optimality_csv(maps: &[OptimalityMap]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "metric", "direction", "transport", "interval_us", "payload_size", "subscribers", "winner", "value", "tie",
    ])
    .expect("in-memory write");
    for map in maps {
        let direction = match map.direction {
            Direction::Minimize => "minimize",
            Direction::Maximize => "maximize",
        };
        for c in &map.cells {
            w.write_record([
                map.metric.name().to_string(),
                direction.to_string(),
                map.transport.to_string(),
                map.interval_us.to_string(),
                c.payload_size.to_string(),
                c.subscribers.to_string(),
                c.winner.clone(),
                c.value.to_string(),
                c.tie.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Write `rows.csv`, `optimality.json`, `optimality.csv` and `figs/*.svg`
/// into `dir`; returns the written paths.
pub fn emit_reports(result: &SweepResult, dir: &Path) -> io::Result<Vec<PathBuf>> {
    let figs = dir.join("figs");
    fs::create_dir_all(&figs)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, contents: String| -> io::Result<()> {
        fs::write(&path, contents)?;
        written.push(path);
        Ok(())
    };
    put(dir.join(CSV_FILE), result.to_csv())?;
    let (maps, skipped) = all_maps(result);
    let json = serde_json::json!({
        "maps": maps,
        "skipped": skipped.iter().map(|(m, why)| serde_json::json!({"metric": m, "reason": why})).collect::<Vec<_>>(),
    });
    put(dir.join("optimality.json"), serde_json::to_string_pretty(&json).expect("json") + "\n")?;
    put(dir.join("optimality.csv"), optimality_csv(&maps))?;
    for map in &maps {
        let name = format!("optimality-{}-{}-T{}.svg", map.metric.name(), map.transport, map.interval_us);
        put(figs.join(name), heatmap(map))?;
    }
    for (name, svg) in line_figures(result) {
        put(figs.join(name), svg)?;
    }
    Ok(written)
}
