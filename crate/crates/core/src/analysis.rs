//! Turns stored records into a center-of-mass trajectory, daily consumption
//! estimates and an SVG plot.

use std::fmt::Write as _;

use thiserror::Error;

use crate::physics::{PlatformGeometry, Point};
use crate::scenario::DAY_MS;
use crate::store::Record;

pub const DEFAULT_CONSUMPTION_WINDOW_DAYS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("empty input")]
    EmptyInput,
    #[error("records are not in strictly increasing seq order at index {0}")]
    Unordered(usize),
    #[error("insufficient span: records cover {covered_days} days, window needs {window_days}")]
    InsufficientSpan { covered_days: u64, window_days: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub ts_ms: u64,
    pub x_mm: f64,
    pub y_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub geometry: PlatformGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryOptions {
    /// Centered moving-average window; 1 disables smoothing.
    pub smoothing: usize,
    /// Express every point relative to the first one.
    pub relative_to_first: bool,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            smoothing: 1,
            relative_to_first: false,
        }
    }
}

fn check_order(records: &[Record]) -> Result<(), AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    match records.windows(2).position(|w| w[1].seq <= w[0].seq) {
        Some(i) => Err(AnalysisError::Unordered(i + 1)),
        None => Ok(()),
    }
}

pub fn trajectory(
    records: &[Record],
    geometry: PlatformGeometry,
    opts: TrajectoryOptions,
) -> Result<Trajectory, AnalysisError> {
    check_order(records)?;
    if opts.smoothing == 0 {
        return Err(AnalysisError::InvalidParameter("smoothing window must be >= 1".into()));
    }
    let raw: Vec<TrajectoryPoint> = records
        .iter()
        .map(|r| TrajectoryPoint {
            ts_ms: r.ts_ms,
            x_mm: r.x_mm,
            y_mm: r.y_mm,
        })
        .collect();
    let mut points = if opts.smoothing == 1 {
        raw
    } else {
        let back = (opts.smoothing - 1) / 2;
        let ahead = opts.smoothing / 2;
        (0..raw.len())
            .map(|i| {
                let lo = i.saturating_sub(back);
                let hi = (i + ahead).min(raw.len() - 1);
                let span = &raw[lo..=hi];
                let k = span.len() as f64;
                TrajectoryPoint {
                    ts_ms: raw[i].ts_ms,
                    x_mm: span.iter().map(|p| p.x_mm).sum::<f64>() / k,
                    y_mm: span.iter().map(|p| p.y_mm).sum::<f64>() / k,
                }
            })
            .collect()
    };
    if opts.relative_to_first {
        let (x0, y0) = (points[0].x_mm, points[0].y_mm);
        for p in &mut points {
            p.x_mm -= x0;
            p.y_mm -= y0;
        }
    }
    Ok(Trajectory { points, geometry })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyRate {
    pub day_index: u64,
    pub grams_per_day: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsumptionSeries {
    pub rates: Vec<DailyRate>,
}

impl ConsumptionSeries {
    pub fn mean(&self) -> Option<f64> {
        (!self.rates.is_empty())
            .then(|| self.rates.iter().map(|r| r.grams_per_day).sum::<f64>() / self.rates.len() as f64)
    }
}

/// Least-squares slope of `ys` against `xs`. `None` without two distinct xs.
fn ls_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (sxy, sxx) = xs.iter().zip(ys).fold((0.0, 0.0), |(sxy, sxx), (x, y)| {
        (sxy + (x - mx) * (y - my), sxx + (x - mx) * (x - mx))
    });
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Grams consumed per day, estimated for each day whose centered window of
/// `window_days` days lies inside the records' span.
pub fn consumption_rate(records: &[Record], window_days: usize) -> Result<ConsumptionSeries, AnalysisError> {
    check_order(records)?;
    if window_days < 2 {
        return Err(AnalysisError::InvalidParameter("window must cover at least 2 days".into()));
    }
    let first_day = records[0].ts_ms / DAY_MS;
    let last_day = records.iter().map(|r| r.ts_ms).max().unwrap_or(0) / DAY_MS;
    let covered_days = last_day - first_day + 1;
    if covered_days < window_days as u64 {
        return Err(AnalysisError::InsufficientSpan {
            covered_days,
            window_days,
        });
    }
    let days: Vec<f64> = records.iter().map(|r| r.ts_ms as f64 / DAY_MS as f64).collect();
    let back = (window_days as u64 - 1) / 2;
    let width = window_days as u64 - 1;
    let mut rates = Vec::new();
    for day in first_day + back..=last_day {
        let lo = day - back;
        let hi = lo + width;
        if hi > last_day {
            break;
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = days
            .iter()
            .zip(records)
            .filter(|(d, _)| **d >= lo as f64 && **d <= hi as f64)
            .map(|(d, r)| (*d, r.total_g))
            .unzip();
        if let Some(slope) = ls_slope(&xs, &ys) {
            rates.push(DailyRate {
                day_index: day,
                grams_per_day: -slope,
            });
        }
    }
    Ok(ConsumptionSeries { rates })
}

const SVG_WIDTH: f64 = 960.0;
const SVG_HEIGHT: f64 = 460.0;
const PANEL_W: f64 = 400.0;
const PANEL_H: f64 = 320.0;
const OVERVIEW_ORIGIN: (f64, f64) = (60.0, 70.0);
const DETAIL_ORIGIN: (f64, f64) = (520.0, 70.0);

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let mult = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    mult * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0".into()
    } else {
        s
    }
}

/// Maps platform millimetres into a panel, y pointing up.
struct Frame {
    origin: (f64, f64),
    min: Point,
    scale: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin.0 + (x - self.min.x) * self.scale,
            self.origin.1 + self.height - (y - self.min.y) * self.scale,
        )
    }
}

/// Standalone SVG: the platform to scale on the left, and a zoomed view of
/// the trajectory on the right with millimetre axes.
pub fn render_svg(traj: &Trajectory, geometry: &PlatformGeometry) -> Result<String, AnalysisError> {
    let pts = &traj.points;
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(AnalysisError::EmptyInput),
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>
<text x="{:.1}" y="30" font-size="15">Colony center of mass, {} readings</text>"#,
        SVG_WIDTH / 2.0 - 150.0,
        pts.len()
    );

    // overview, to scale
    let scale = (PANEL_W / geometry.n()).min(PANEL_H / geometry.m());
    let over = Frame {
        origin: OVERVIEW_ORIGIN,
        min: Point::new(0.0, 0.0),
        scale,
        height: geometry.m() * scale,
    };
    let (ox, oy) = over.px(0.0, geometry.m());
    let _ = writeln!(
        s,
        r##"<g id="overview">
<rect x="{ox:.3}" y="{oy:.3}" width="{:.3}" height="{:.3}" fill="#fdf6e3" stroke="black"/>"##,
        geometry.n() * scale,
        geometry.m() * scale
    );
    for (i, c) in geometry.cell_positions().iter().enumerate() {
        let (cx, cy) = over.px(c.x, c.y);
        let _ = writeln!(
            s,
            r##"<rect x="{:.3}" y="{:.3}" width="10" height="10" fill="#555"/><text x="{:.3}" y="{:.3}">{}</text>"##,
            cx - 5.0,
            cy - 5.0,
            cx + if c.x > 0.0 { 8.0 } else { -16.0 },
            cy + if c.y > 0.0 { -8.0 } else { 18.0 },
            i + 1
        );
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().map(|p| (p.x_mm, p.y_mm)).unzip();
    let min_x = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_y = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let max_y = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (bx0, by0) = over.px(min_x, max_y);
    let (bx1, by1) = over.px(max_x, min_y);
    let _ = writeln!(
        s,
        r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="#1f77b4" stroke-dasharray="3,2"/>"##,
        bx0 - 2.0,
        by0 - 2.0,
        bx1 - bx0 + 4.0,
        by1 - by0 + 4.0
    );
    let (ax, ay) = over.px(0.0, 0.0);
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">x (mm), 0 to {}</text>
<text x="{:.3}" y="{:.3}" text-anchor="middle" transform="rotate(-90 {:.3} {:.3})">y (mm), 0 to {}</text>
</g>"#,
        ax + geometry.n() * scale / 2.0,
        ay + 36.0,
        fmt_tick(geometry.n(), 1.0),
        ax - 34.0,
        ay - geometry.m() * scale / 2.0,
        ax - 34.0,
        ay - geometry.m() * scale / 2.0,
        fmt_tick(geometry.m(), 1.0)
    );

    // detail, equal scale on both axes
    let span = (max_x - min_x).max(max_y - min_y).max(1.0) * 1.15;
    let mid = Point::new((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let dscale = (PANEL_W / span).min(PANEL_H / span);
    let (vis_w, vis_h) = (PANEL_W / dscale, PANEL_H / dscale);
    let detail = Frame {
        origin: DETAIL_ORIGIN,
        min: Point::new(mid.x - vis_w / 2.0, mid.y - vis_h / 2.0),
        scale: dscale,
        height: PANEL_H,
    };
    let _ = writeln!(
        s,
        r##"<g id="detail">
<rect x="{:.3}" y="{:.3}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"##,
        DETAIL_ORIGIN.0, DETAIL_ORIGIN.1
    );
    let step = nice_step(vis_w.min(vis_h));
    let mut t = (detail.min.x / step).ceil() * step;
    while t <= detail.min.x + vis_w {
        let (tx, ty) = detail.px(t, detail.min.y);
        let _ = writeln!(
            s,
            r##"<line x1="{tx:.3}" y1="{ty:.3}" x2="{tx:.3}" y2="{:.3}" stroke="#ddd"/><text x="{tx:.3}" y="{:.3}" text-anchor="middle">{}</text>"##,
            DETAIL_ORIGIN.1,
            ty + 16.0,
            fmt_tick(t, step)
        );
        t += step;
    }
    let mut t = (detail.min.y / step).ceil() * step;
    while t <= detail.min.y + vis_h {
        let (tx, ty) = detail.px(detail.min.x, t);
        let _ = writeln!(
            s,
            r##"<line x1="{tx:.3}" y1="{ty:.3}" x2="{:.3}" y2="{ty:.3}" stroke="#ddd"/><text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"##,
            DETAIL_ORIGIN.0 + PANEL_W,
            tx - 4.0,
            ty + 4.0,
            fmt_tick(t, step)
        );
        t += step;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|p| {
            let (x, y) = detail.px(p.x_mm, p.y_mm);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        coords.join(" ")
    );
    for (p, color, label) in [(first, "#2ca02c", "start"), (last, "#d62728", "end")] {
        let (x, y) = detail.px(p.x_mm, p.y_mm);
        let _ = writeln!(
            s,
            r#"<circle class="{label}" cx="{x:.3}" cy="{y:.3}" r="4" fill="{color}"/><text x="{:.3}" y="{:.3}" fill="{color}">{label}</text>"#,
            x + 6.0,
            y - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">x (mm)</text>
<text x="{:.3}" y="{:.3}" text-anchor="middle" transform="rotate(-90 {:.3} {:.3})">y (mm)</text>
</g>
</svg>"#,
        DETAIL_ORIGIN.0 + PANEL_W / 2.0,
        DETAIL_ORIGIN.1 + PANEL_H + 36.0,
        DETAIL_ORIGIN.0 - 46.0,
        DETAIL_ORIGIN.1 + PANEL_H / 2.0,
        DETAIL_ORIGIN.0 - 46.0,
        DETAIL_ORIGIN.1 + PANEL_H / 2.0
    );
    Ok(s)
}
