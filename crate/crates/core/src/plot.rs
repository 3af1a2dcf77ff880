//! SVG line charts and summary tables from evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const MARGIN: f64 = 0.05;

/// Data ranges of a chart after the 5% margin is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axes {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - MARGIN * span, hi + MARGIN * span)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { MARGIN * lo.abs() };
        (lo - pad, hi + pad)
    }
}

/// Blue for the smallest γ through green for the largest.
pub fn gamma_color(rank: usize, count: usize) -> String {
    let t = if count > 1 { rank as f64 / (count - 1) as f64 } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(31.0, 26.0), lerp(90.0, 152.0), lerp(200.0, 80.0))
}

fn series(reports: &[&EvalReport]) -> BTreeMap<u64, Vec<(u64, f64, f64)>> {
    // keyed so that integer order matches γ order
    let mut out: BTreeMap<u64, Vec<(u64, f64, f64)>> = BTreeMap::new();
    for r in reports {
        out.entry(order_key(r.gamma)).or_default().push((r.step, r.mean, r.ci95));
    }
    for pts in out.values_mut() {
        pts.sort_by_key(|p| p.0);
    }
    out
}

fn order_key(g: f64) -> u64 {
    let b = g.to_bits();
    if g.is_sign_negative() {
        !b
    } else {
        b | (1 << 63)
    }
}

fn from_key(k: u64) -> f64 {
    f64::from_bits(if k >> 63 == 1 { k & !(1 << 63) } else { !k })
}

/// Return-vs-step chart for one environment, one series per γ with a
/// shaded ±CI band.
pub fn render_svg(reports: &[&EvalReport]) -> Result<(String, Axes)> {
    let Some(first) = reports.first() else {
        return Err(Error::Invalid("no reports to plot".into()));
    };
    let env = &first.env;
    if let Some(r) = reports.iter().find(|r| &r.env != env) {
        return Err(Error::Invalid(format!("chart mixes `{env}` and `{}`", r.env)));
    }
    let lo_x = reports.iter().map(|r| r.step as f64).fold(f64::INFINITY, f64::min);
    let hi_x = reports.iter().map(|r| r.step as f64).fold(f64::NEG_INFINITY, f64::max);
    let lo_y = reports.iter().map(|r| r.mean - r.ci95).fold(f64::INFINITY, f64::min);
    let hi_y = reports.iter().map(|r| r.mean + r.ci95).fold(f64::NEG_INFINITY, f64::max);
    let (x_min, x_max) = padded(lo_x, hi_x);
    let (y_min, y_max) = padded(lo_y, hi_y);
    let axes = Axes {
        x_min,
        x_max,
        y_min,
        y_max,
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-size="15">{env}</text>"#, LEFT);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{y0}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x_min + t * (x_max - x_min);
        let yv = y_min + t * (y_max - y_min);
        let (px, py) = (axes.px(xv), axes.py(yv));
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.0}</text>"#,
            y1 + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.1}</text>"#,
            x0 - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">environment step</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">return</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let all = series(reports);
    let count = all.len();
    for (rank, (key, pts)) in all.iter().enumerate() {
        let color = gamma_color(rank, count);
        let gamma = from_key(*key);
        let _ = writeln!(s, r#"<g data-gamma="{gamma}">"#);
        let mut band: Vec<String> = pts
            .iter()
            .map(|&(x, m, c)| format!("{:.2},{:.2}", axes.px(x as f64), axes.py(m + c)))
            .collect();
        band.extend(
            pts.iter()
                .rev()
                .map(|&(x, m, c)| format!("{:.2},{:.2}", axes.px(x as f64), axes.py(m - c))),
        );
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            band.join(" ")
        );
        if pts.len() > 1 {
            let line: Vec<String> = pts
                .iter()
                .map(|&(x, m, _)| format!("{:.2},{:.2}", axes.px(x as f64), axes.py(m)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        for &(x, m, _) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                axes.px(x as f64),
                axes.py(m)
            );
        }
        let ly = TOP + 16.0 + 18.0 * rank as f64;
        let lx = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">γ = {gamma}</text>"#, lx + 26.0, ly + 4.0);
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="10">seed mean, band ±95% CI</text>"#,
        WIDTH - RIGHT + 14.0,
        TOP + 16.0 + 18.0 * count as f64 + 4.0
    );
    s.push_str("</svg>\n");
    Ok((s, axes))
}

/// Rows are γ values and columns checkpoint steps; cells read `mean ± ci95`.
pub fn table_csv(reports: &[&EvalReport]) -> String {
    let steps: Vec<u64> = {
        let mut v: Vec<u64> = reports.iter().map(|r| r.step).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut out = String::from("gamma");
    for st in &steps {
        let _ = write!(out, ",{st}");
    }
    out.push('\n');
    for (key, _) in series(reports) {
        let gamma = from_key(key);
        let _ = write!(out, "{gamma}");
        for st in &steps {
            match reports.iter().find(|r| r.step == *st && r.gamma.to_bits() == gamma.to_bits()) {
                Some(r) => {
                    let _ = write!(out, ",{:.1} ± {:.1}", r.mean, r.ci95);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `<env>.svg` and `<env>_table.csv` for each environment present.
pub fn write_plots(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to plot".into()));
    }
    let mut by_env: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        by_env.entry(r.env.as_str()).or_default().push(r);
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (env, rs) in by_env {
        let (svg, _) = render_svg(&rs)?;
        let svg_path = dir.join(format!("{env}.svg"));
        fs::write(&svg_path, svg)?;
        let table_path = dir.join(format!("{env}_table.csv"));
        fs::write(&table_path, table_csv(&rs))?;
        written.push(svg_path);
        written.push(table_path);
    }
    Ok(written)
}
