//! Static SVG rendering of chart and contribution files.
//!
//! Output depends only on the file contents; coordinates are printed with a
//! fixed precision so the same input always yields the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::io::{read_chart, read_contrib, ChartRow, ContribRow};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 50.0;

const BAND_FILL: &str = "#9ecae1";
const LINE: &str = "#08519c";
const LIMIT: &str = "#cb181d";

struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
            (lo - pad, hi + pad)
        };
        Self { lo, hi, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" viewBox=\"0 0 {WIDTH:.0} {HEIGHT:.0}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        WIDTH / 2.0,
        xml_escape(title)
    );
}

fn frame(out: &mut String, x: Option<&Axis>, y: &Axis, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<rect x=\"{LEFT:.2}\" y=\"{TOP:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>",
        WIDTH - LEFT - RIGHT,
        HEIGHT - TOP - BOTTOM
    );
    for (v, anchor) in [(y.lo, "end"), (y.hi, "end")] {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"{anchor}\">{}</text>",
            LEFT - 6.0,
            y.map(v) + 4.0,
            tick(v)
        );
    }
    if let Some(x) = x {
        for v in [x.lo, x.hi] {
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
                x.map(v),
                HEIGHT - BOTTOM + 16.0,
                tick(v)
            );
        }
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        (TOP + HEIGHT - BOTTOM) / 2.0,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        xml_escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} contains non-finite values")))
    }
}

/// Statistic trace with its credible band and the control limit.
pub fn render_chart(rows: &[ChartRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(CliError::Config("cannot plot an empty chart".into()));
    }
    check_finite(
        rows.iter().flat_map(|r| {
            [
                r.time,
                r.value.mean,
                r.value.lower,
                r.value.upper,
                r.limit.mean,
                r.limit.lower,
                r.limit.upper,
            ]
        }),
        "chart",
    )?;
    let t_lo = rows.iter().map(|r| r.time).fold(f64::INFINITY, f64::min);
    let t_hi = rows.iter().map(|r| r.time).fold(f64::NEG_INFINITY, f64::max);
    let limit = rows[0].limit;
    let v_lo = rows
        .iter()
        .map(|r| r.value.lower.min(r.value.mean))
        .fold(limit.lower.min(0.0), f64::min);
    let v_hi = rows
        .iter()
        .map(|r| r.value.upper.max(r.value.mean))
        .fold(limit.upper, f64::max);
    let x = Axis::new(t_lo, t_hi, LEFT, WIDTH - RIGHT);
    let y = Axis::new(v_lo, v_hi + 0.05 * (v_hi - v_lo), HEIGHT - BOTTOM, TOP);

    let mut out = String::new();
    header(&mut out, title);

    if limit.upper > limit.lower {
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{LIMIT}\" fill-opacity=\"0.15\"/>",
            LEFT,
            y.map(limit.upper),
            WIDTH - LEFT - RIGHT,
            y.map(limit.lower) - y.map(limit.upper)
        );
    }

    let mut band = String::new();
    for r in rows {
        let _ = write!(band, "{:.2},{:.2} ", x.map(r.time), y.map(r.value.upper));
    }
    for r in rows.iter().rev() {
        let _ = write!(band, "{:.2},{:.2} ", x.map(r.time), y.map(r.value.lower));
    }
    let _ = writeln!(
        out,
        "<polygon points=\"{}\" fill=\"{BAND_FILL}\" fill-opacity=\"0.6\" stroke=\"none\"/>",
        band.trim_end()
    );

    let line: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", x.map(r.time), y.map(r.value.mean)))
        .collect();
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{LINE}\" stroke-width=\"1.5\"/>",
        line.join(" ")
    );
    let _ = writeln!(
        out,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{LIMIT}\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>",
        LEFT,
        y.map(limit.mean),
        WIDTH - RIGHT,
        y.map(limit.mean)
    );
    frame(&mut out, Some(&x), &y, "sample", title);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Signed contribution bars with credible-interval whiskers.
pub fn render_contributions(rows: &[ContribRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(CliError::Config("cannot plot an empty contribution table".into()));
    }
    check_finite(rows.iter().flat_map(|r| [r.mean, r.lower, r.upper]), "contributions")?;
    let lo = rows.iter().map(|r| r.lower.min(r.mean)).fold(0.0, f64::min);
    let hi = rows.iter().map(|r| r.upper.max(r.mean)).fold(0.0, f64::max);
    let pad = 0.05 * (hi - lo);
    let y = Axis::new(lo - pad, hi + pad, HEIGHT - BOTTOM, TOP);
    let x = Axis::new(0.0, rows.len() as f64, LEFT, WIDTH - RIGHT);
    let slot = (WIDTH - LEFT - RIGHT) / rows.len() as f64;

    let mut out = String::new();
    header(&mut out, title);
    let zero = y.map(0.0);
    for (i, r) in rows.iter().enumerate() {
        let cx = x.map(i as f64 + 0.5);
        let top = y.map(r.mean).min(zero);
        let h = (y.map(r.mean) - zero).abs();
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{BAND_FILL}\" stroke=\"{LINE}\"/>",
            cx - 0.35 * slot,
            top,
            0.7 * slot,
            h
        );
        let _ = writeln!(
            out,
            "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            y.map(r.lower),
            y.map(r.upper)
        );
        for v in [r.lower, r.upper] {
            let _ = writeln!(
                out,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                cx - 0.15 * slot,
                y.map(v),
                cx + 0.15 * slot,
                y.map(v)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            HEIGHT - BOTTOM + 16.0,
            xml_escape(&r.variable)
        );
    }
    let _ = writeln!(
        out,
        "<line x1=\"{LEFT:.2}\" y1=\"{zero:.2}\" x2=\"{:.2}\" y2=\"{zero:.2}\" stroke=\"black\" stroke-width=\"0.8\"/>",
        WIDTH - RIGHT
    );
    frame(&mut out, None, &y, "variable", title);
    out.push_str("</svg>\n");
    Ok(out)
}

fn title_of(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

pub fn plot_chart_file(chart: &Path, svg: &Path) -> Result<()> {
    let rows = read_chart(chart)?;
    let text = render_chart(&rows, &title_of(chart))?;
    std::fs::write(svg, text).map_err(|e| CliError::io(svg, e))
}

pub fn plot_contrib_file(contrib: &Path, svg: &Path) -> Result<()> {
    let rows = read_contrib(contrib)?;
    let text = render_contributions(&rows, &title_of(contrib))?;
    std::fs::write(svg, text).map_err(|e| CliError::io(svg, e))
}
