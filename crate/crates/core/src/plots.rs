//! SVG figures comparing real and generated grids, epoch curves and metric
//! breakdowns. Output is plain text with fixed precision, so identical
//! inputs give identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine;
use chrono::{Datelike, Duration, NaiveDate};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{BuildingType, MeterType, HOURS_PER_WEEK, WEEKS};
use crate::error::{Error, Result};
use crate::evaluation::{EvalReport, METRICS};
use crate::training::EpochMetrics;

/// Model index, test split flag, (epoch, value) points.
type CurveSeries = (usize, bool, Vec<(f64, f64)>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    AnnualOverlay,
    MonthlyAverage,
    WeeklyHeatmap,
    EpochCurves,
    MetricBreakdown,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::AnnualOverlay,
        PlotKind::MonthlyAverage,
        PlotKind::WeeklyHeatmap,
        PlotKind::EpochCurves,
        PlotKind::MetricBreakdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::AnnualOverlay => "annual_overlay",
            PlotKind::MonthlyAverage => "monthly_average",
            PlotKind::WeeklyHeatmap => "weekly_heatmap",
            PlotKind::EpochCurves => "epoch_curves",
            PlotKind::MetricBreakdown => "metric_breakdown",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown plot kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionFilter {
    pub meter_type: Option<MeterType>,
    pub building_type: Option<BuildingType>,
}

impl ConditionFilter {
    pub fn matches(&self, meter_type: MeterType, building_type: BuildingType) -> bool {
        self.meter_type.is_none_or(|m| m == meter_type) && self.building_type.is_none_or(|b| b == building_type)
    }

    fn slug(&self) -> String {
        let part = |s: Option<&str>| s.map(slugify).unwrap_or_else(|| "all".into());
        format!("{}_{}", part(self.meter_type.map(|m| m.as_str())), part(self.building_type.map(|b| b.as_str())))
    }
}

fn slugify(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub filter: ConditionFilter,
    /// Grids drawn per source; at least 1.
    pub samples: usize,
    /// Directory the figure is written into.
    pub output: PathBuf,
}

impl PlotSpec {
    /// `<kind>_<meter type>_<building type>.svg`, with `all` for an open filter.
    pub fn file_name(&self) -> String {
        match self.kind {
            PlotKind::EpochCurves | PlotKind::MetricBreakdown => format!("{}.svg", self.kind.as_str()),
            _ => format!("{}_{}.svg", self.kind.as_str(), self.filter.slug()),
        }
    }
}

/// One annual grid with the metadata the filter looks at.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGrid {
    pub meter_type: MeterType,
    pub building_type: BuildingType,
    pub year: i32,
    pub grid: Array2<f32>,
}

/// Everything a figure may draw from. Synthetic sources are keyed by label.
#[derive(Clone, Debug, Default)]
pub struct PlotData {
    pub real: Vec<LabeledGrid>,
    pub synthetic: Vec<(String, Vec<LabeledGrid>)>,
    pub epoch_curves: Vec<(String, Vec<EpochMetrics>)>,
    pub reports: Vec<EvalReport>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
const REAL_COLOR: &str = "#222222";

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        let mut s = Self { body: String::new(), width, height };
        s.rect(0.0, 0.0, width, height, "#ffffff", None);
        s
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: Option<&str>) {
        let stroke = stroke.map(|c| format!(" stroke=\"{c}\"")).unwrap_or_default();
        let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"{stroke}/>"#);
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str, width: f64, opacity: f64, dashed: bool) {
        let mut pts = String::with_capacity(points.len() * 14);
        for (x, y) in points {
            let _ = write!(pts, "{x:.1},{y:.1} ");
        }
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"{dash}/>"#,
            pts.trim_end()
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, color: &str) {
        let _ = writeln!(self.body, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{s}</text>"#
        );
    }

    fn png(&mut self, x: f64, y: f64, w: f64, h: f64, png: &[u8]) {
        let data = base64::engine::general_purpose::STANDARD.encode(png);
        let _ = writeln!(
            self.body,
            r#"<image x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" preserveAspectRatio="none" style="image-rendering:pixelated" href="data:image/png;base64,{data}"/>"#
        );
    }

    fn finish(self, path: &Path) -> Result<()> {
        let out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        );
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Axes box mapping data coordinates into a pixel rectangle.
struct Frame {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x + (x - self.xr.0) / (self.xr.1 - self.xr.0).max(1e-12) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0).max(1e-12) * self.h
    }

    fn draw(&self, svg: &mut Svg, title: &str, xlabel: &str) {
        svg.rect(self.x, self.y, self.w, self.h, "none", Some("#888888"));
        svg.text(self.x + self.w / 2.0, self.y - 6.0, 12.0, "middle", title);
        svg.text(self.x + self.w / 2.0, self.y + self.h + 28.0, 10.0, "middle", xlabel);
        for (v, anchor_x) in [(self.xr.0, self.x), (self.xr.1, self.x + self.w)] {
            svg.text(anchor_x, self.y + self.h + 13.0, 9.0, "middle", &fmt_tick(v));
        }
        for v in [self.yr.0, self.yr.1] {
            svg.text(self.x - 4.0, self.py(v) + 3.0, 9.0, "end", &fmt_tick(v));
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn filtered<'a>(grids: &'a [LabeledGrid], filter: &ConditionFilter, n: usize) -> Vec<&'a LabeledGrid> {
    grids.iter().filter(|g| filter.matches(g.meter_type, g.building_type)).take(n).collect()
}

/// Real grids first, then each synthetic source, all filtered and capped.
fn sources<'a>(spec: &PlotSpec, data: &'a PlotData) -> Result<Vec<(String, &'a str, Vec<&'a LabeledGrid>)>> {
    let real = filtered(&data.real, &spec.filter, spec.samples);
    if real.is_empty() {
        return Err(Error::NoData(format!("real samples matching {:?}", spec.filter)));
    }
    let mut out = vec![("real".to_string(), REAL_COLOR, real)];
    for (i, (label, grids)) in data.synthetic.iter().enumerate() {
        let g = filtered(grids, &spec.filter, spec.samples);
        if g.is_empty() {
            return Err(Error::NoData(format!("{label} samples matching {:?}", spec.filter)));
        }
        out.push((label.clone(), PALETTE[i % PALETTE.len()], g));
    }
    Ok(out)
}

fn annual_overlay(spec: &PlotSpec, data: &PlotData, path: &Path) -> Result<()> {
    let srcs = sources(spec, data)?;
    let (pw, ph, left, top) = (900.0, 180.0, 60.0, 40.0);
    let mut svg = Svg::new(pw + left + 20.0, top + srcs.len() as f64 * (ph + 60.0));
    let n = WEEKS * HOURS_PER_WEEK;
    for (k, (label, color, grids)) in srcs.iter().enumerate() {
        let frame = Frame { x: left, y: top + k as f64 * (ph + 60.0), w: pw, h: ph, xr: (0.0, n as f64), yr: (-1.0, 1.0) };
        frame.draw(&mut svg, &format!("{label} (n={})", grids.len()), "hour of year");
        let mut mean = vec![0.0f64; n];
        for g in grids {
            let pts: Vec<(f64, f64)> = g.grid.iter().enumerate().map(|(h, v)| (frame.px(h as f64), frame.py(*v as f64))).collect();
            svg.polyline(&pts, color, 0.5, 0.25, false);
            for (m, v) in mean.iter_mut().zip(g.grid.iter()) {
                *m += *v as f64 / grids.len() as f64;
            }
        }
        let pts: Vec<(f64, f64)> = mean.iter().enumerate().map(|(h, v)| (frame.px(h as f64), frame.py(*v))).collect();
        svg.polyline(&pts, color, 1.2, 1.0, false);
    }
    svg.finish(path)
}

/// Mean value per (month, hour of day) over the given grids.
fn monthly_profile(grids: &[&LabeledGrid]) -> [[f64; 24]; 12] {
    let mut sum = [[0.0f64; 24]; 12];
    let mut count = [[0usize; 24]; 12];
    for g in grids {
        let start = NaiveDate::from_ymd_opt(g.year, 1, 1).unwrap_or_default();
        for (h, v) in g.grid.iter().enumerate() {
            let month = (start + Duration::days((h / 24) as i64)).month0() as usize;
            sum[month][h % 24] += *v as f64;
            count[month][h % 24] += 1;
        }
    }
    let mut out = [[0.0; 24]; 12];
    for m in 0..12 {
        for h in 0..24 {
            out[m][h] = if count[m][h] > 0 { sum[m][h] / count[m][h] as f64 } else { f64::NAN };
        }
    }
    out
}

const MONTHS: [&str; 12] = ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

fn monthly_average(spec: &PlotSpec, data: &PlotData, path: &Path) -> Result<()> {
    let srcs = sources(spec, data)?;
    let profiles: Vec<_> = srcs.iter().map(|(l, c, g)| (l, *c, monthly_profile(g))).collect();
    let yr = range_of(profiles.iter().flat_map(|(_, _, p)| p.iter().flatten().copied()));
    let (pw, ph) = (200.0, 140.0);
    let mut svg = Svg::new(4.0 * (pw + 60.0) + 20.0, 3.0 * (ph + 60.0) + 30.0 + 20.0 * profiles.len() as f64);
    for m in 0..12 {
        let frame = Frame {
            x: 50.0 + (m % 4) as f64 * (pw + 60.0),
            y: 30.0 + (m / 4) as f64 * (ph + 60.0),
            w: pw,
            h: ph,
            xr: (0.0, 23.0),
            yr,
        };
        frame.draw(&mut svg, MONTHS[m], "hour of day");
        for (_, color, p) in &profiles {
            let pts: Vec<(f64, f64)> =
                (0..24).filter(|h| p[m][*h].is_finite()).map(|h| (frame.px(h as f64), frame.py(p[m][h]))).collect();
            svg.polyline(&pts, color, 1.2, 1.0, false);
        }
    }
    legend(&mut svg, 50.0, 3.0 * (ph + 60.0) + 30.0, profiles.iter().map(|(l, c, _)| (l.as_str(), *c, false)));
    svg.finish(path)
}

fn legend<'a>(svg: &mut Svg, x: f64, y: f64, items: impl Iterator<Item = (&'a str, &'a str, bool)>) {
    for (i, (label, color, dashed)) in items.enumerate() {
        let yy = y + i as f64 * 16.0;
        svg.polyline(&[(x, yy), (x + 24.0, yy)], color, 2.0, 1.0, dashed);
        svg.text(x + 30.0, yy + 4.0, 10.0, "start", label);
    }
}

/// Maps [-1, 1] onto a dark-blue to yellow ramp.
fn heat_color(v: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 5] =
        [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let t = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + (STOPS[i + 1][c] - STOPS[i][c]) * f).round() as u8;
    }
    out
}

/// One pixel per cell: `168` wide, `52` tall.
pub fn heatmap_png(grid: &Array2<f32>) -> Result<Vec<u8>> {
    let (h, w) = grid.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((r, c), v) in grid.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Rgb(heat_color(*v)));
    }
    let mut buf = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    Ok(buf)
}

fn weekly_heatmap(spec: &PlotSpec, data: &PlotData, path: &Path) -> Result<()> {
    let srcs = sources(spec, data)?;
    let rows = srcs.iter().map(|s| s.2.len()).max().unwrap_or(1);
    let (cw, ch) = (HOURS_PER_WEEK as f64 * 1.5, WEEKS as f64 * 1.5);
    let mut svg = Svg::new(srcs.len() as f64 * (cw + 20.0) + 40.0, rows as f64 * (ch + 20.0) + 50.0);
    for (k, (label, _, grids)) in srcs.iter().enumerate() {
        let x = 30.0 + k as f64 * (cw + 20.0);
        svg.text(x + cw / 2.0, 24.0, 12.0, "middle", label);
        for (r, g) in grids.iter().enumerate() {
            svg.png(x, 36.0 + r as f64 * (ch + 20.0), cw, ch, &heatmap_png(&g.grid)?);
        }
    }
    svg.finish(path)
}

fn epoch_curves(data: &PlotData, path: &Path) -> Result<()> {
    if data.epoch_curves.iter().all(|(_, rows)| rows.is_empty()) {
        return Err(Error::NoData("epoch curves".into()));
    }
    let (pw, ph) = (360.0, 200.0);
    let mut svg = Svg::new(2.0 * (pw + 80.0) + 20.0, 2.0 * (ph + 70.0) + 40.0 + 32.0 * data.epoch_curves.len() as f64);
    for (mi, metric) in METRICS.iter().enumerate() {
        let series: Vec<CurveSeries> = data
            .epoch_curves
            .iter()
            .enumerate()
            .flat_map(|(si, (_, rows))| {
                [false, true].into_iter().map(move |test| {
                    let pts = rows
                        .iter()
                        .filter_map(|r| {
                            let set = if test { r.test.as_ref() } else { r.train.as_ref() };
                            set.and_then(|s| s.get(metric)).map(|v| (r.epoch as f64, v))
                        })
                        .collect();
                    (si, test, pts)
                })
            })
            .collect();
        let xr = range_of(series.iter().flat_map(|s| s.2.iter().map(|p| p.0)));
        let yr = range_of(series.iter().flat_map(|s| s.2.iter().map(|p| p.1)));
        let frame = Frame { x: 70.0 + (mi % 2) as f64 * (pw + 80.0), y: 30.0 + (mi / 2) as f64 * (ph + 70.0), w: pw, h: ph, xr, yr };
        frame.draw(&mut svg, metric, "epoch");
        for (si, test, pts) in &series {
            let px: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (frame.px(*x), frame.py(*y))).collect();
            svg.polyline(&px, PALETTE[si % PALETTE.len()], 1.5, 1.0, !test);
        }
    }
    let labels: Vec<(String, &str, bool)> = data
        .epoch_curves
        .iter()
        .enumerate()
        .flat_map(|(i, (l, _))| [(format!("{l} train"), PALETTE[i % PALETTE.len()], true), (format!("{l} test"), PALETTE[i % PALETTE.len()], false)])
        .collect();
    legend(&mut svg, 70.0, 2.0 * (ph + 70.0) + 30.0, labels.iter().map(|(l, c, d)| (l.as_str(), *c, *d)));
    svg.finish(path)
}

fn metric_breakdown(data: &PlotData, path: &Path) -> Result<()> {
    let first = data.reports.first().ok_or_else(|| Error::NoData("evaluation reports".into()))?;
    let slices: Vec<&str> = first.slices.iter().map(|s| s.slice.as_str()).collect();
    let (pw, ph) = (70.0 * slices.len() as f64 + 40.0, 200.0);
    let mut svg = Svg::new(pw + 120.0, 4.0 * (ph + 110.0) + 20.0 * data.reports.len() as f64 + 20.0);
    let nm = data.reports.len() as f64;
    for (mi, metric) in METRICS.iter().enumerate() {
        let values = |r: &EvalReport, s: &str| r.slice(s).and_then(|x| x.metrics.get(*metric)).and_then(|m| m.mean.map(|v| (v, m.std.unwrap_or(0.0))));
        let all = data.reports.iter().flat_map(|r| slices.iter().filter_map(move |s| values(r, s)));
        let hi = all.flat_map(|(v, s)| [v + s, v]).fold(0.0f64, f64::max);
        let lo = data.reports.iter().flat_map(|r| slices.iter().filter_map(move |s| values(r, s))).map(|(v, _)| v).fold(0.0f64, f64::min);
        let frame = Frame { x: 70.0, y: 30.0 + mi as f64 * (ph + 110.0), w: pw, h: ph, xr: (0.0, slices.len() as f64), yr: range_of([lo, hi].into_iter()) };
        frame.draw(&mut svg, metric, "");
        let zero = frame.py(0.0_f64.clamp(frame.yr.0, frame.yr.1));
        svg.line(frame.x, zero, frame.x + frame.w, zero, "#888888");
        for (si, slice) in slices.iter().enumerate() {
            let bw = 0.8 / nm;
            for (ri, r) in data.reports.iter().enumerate() {
                let Some((v, sd)) = values(r, slice) else { continue };
                let x0 = frame.px(si as f64 + 0.1 + ri as f64 * bw);
                let x1 = frame.px(si as f64 + 0.1 + (ri + 1) as f64 * bw);
                let y = frame.py(v);
                svg.rect(x0, y.min(zero), x1 - x0, (zero - y).abs(), PALETTE[ri % PALETTE.len()], None);
                if sd > 0.0 {
                    let xm = (x0 + x1) / 2.0;
                    svg.line(xm, frame.py(v - sd), xm, frame.py(v + sd), REAL_COLOR);
                }
            }
            let _ = writeln!(
                svg.body,
                r#"<text transform="translate({:.2},{:.2}) rotate(35)" font-family="sans-serif" font-size="9">{}</text>"#,
                frame.px(si as f64 + 0.2),
                frame.y + frame.h + 12.0,
                slice.replace('&', "&amp;")
            );
        }
    }
    let labels: Vec<(&str, &str, bool)> =
        data.reports.iter().enumerate().map(|(i, r)| (r.model.as_str(), PALETTE[i % PALETTE.len()], false)).collect();
    legend(&mut svg, 70.0, 4.0 * (ph + 110.0), labels.into_iter());
    svg.finish(path)
}

/// Writes one figure into `spec.output` and returns its path.
pub fn render_plots(spec: &PlotSpec, data: &PlotData) -> Result<PathBuf> {
    if spec.samples == 0 {
        return Err(Error::Config("plot sample count must be at least 1".into()));
    }
    std::fs::create_dir_all(&spec.output)?;
    let path = spec.output.join(spec.file_name());
    match spec.kind {
        PlotKind::AnnualOverlay => annual_overlay(spec, data, &path)?,
        PlotKind::MonthlyAverage => monthly_average(spec, data, &path)?,
        PlotKind::WeeklyHeatmap => weekly_heatmap(spec, data, &path)?,
        PlotKind::EpochCurves => epoch_curves(data, &path)?,
        PlotKind::MetricBreakdown => metric_breakdown(data, &path)?,
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::MetricSet;

    fn grid(mt: MeterType, bt: BuildingType, v: f32) -> LabeledGrid {
        LabeledGrid {
            meter_type: mt,
            building_type: bt,
            year: 2016,
            grid: Array2::from_shape_fn((WEEKS, HOURS_PER_WEEK), |(w, h)| (v + (w * h) as f32 * 1e-4).sin()),
        }
    }

    fn data() -> PlotData {
        let real = vec![
            grid(MeterType::Electricity, BuildingType::Office, 0.1),
            grid(MeterType::Electricity, BuildingType::Office, 0.2),
            grid(MeterType::Gas, BuildingType::Lodging, 0.3),
        ];
        let synth = vec![("diffusion".to_string(), real.clone()), ("cvae".to_string(), real.clone())];
        let set = MetricSet { fid: Some(3.0), kl: 0.1, rmse: 0.2, r2: 0.3 };
        PlotData {
            real,
            synthetic: synth,
            epoch_curves: vec![(
                "cvae".into(),
                vec![EpochMetrics { epoch: 5, train: Some(set.clone()), test: Some(set.clone()) }, EpochMetrics { epoch: 10, train: Some(set.clone()), test: None }],
            )],
            reports: Vec::new(),
        }
    }

    fn spec(kind: PlotKind, dir: &Path) -> PlotSpec {
        PlotSpec {
            kind,
            filter: ConditionFilter { meter_type: Some(MeterType::Electricity), building_type: Some(BuildingType::Office) },
            samples: 5,
            output: dir.to_path_buf(),
        }
    }

    #[test]
    fn figures_are_written_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [PlotKind::AnnualOverlay, PlotKind::MonthlyAverage, PlotKind::WeeklyHeatmap, PlotKind::EpochCurves] {
            let p = render_plots(&spec(kind, dir.path()), &data()).unwrap();
            let first = std::fs::read(&p).unwrap();
            render_plots(&spec(kind, dir.path()), &data()).unwrap();
            assert_eq!(first, std::fs::read(&p).unwrap(), "{kind:?}");
            assert!(String::from_utf8(first).unwrap().starts_with("<svg"));
        }
        assert_eq!(spec(PlotKind::WeeklyHeatmap, dir.path()).file_name(), "weekly_heatmap_electricity_office.svg");
        let open = PlotSpec { filter: ConditionFilter::default(), ..spec(PlotKind::AnnualOverlay, dir.path()) };
        assert_eq!(open.file_name(), "annual_overlay_all_all.svg");
    }

    #[test]
    fn heatmap_panels_have_one_pixel_per_cell() {
        let g = grid(MeterType::Gas, BuildingType::Office, 0.0);
        let png = heatmap_png(&g.grid).unwrap();
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!((img.width() * img.height()) as usize, WEEKS * HOURS_PER_WEEK);
        assert_eq!((img.width(), img.height()), (168, 52));
    }

    #[test]
    fn overlay_draws_every_matching_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = render_plots(&spec(PlotKind::AnnualOverlay, dir.path()), &data()).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        // Two samples plus one mean line for each of three sources.
        assert_eq!(text.matches("<polyline").count(), 9);
        assert!(text.contains("real (n=2)"));
    }

    #[test]
    fn empty_filter_is_no_data() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(PlotKind::WeeklyHeatmap, dir.path());
        s.filter.meter_type = Some(MeterType::Steam);
        assert!(matches!(render_plots(&s, &data()), Err(Error::NoData(_))));
        assert!(matches!(render_plots(&spec(PlotKind::MetricBreakdown, dir.path()), &data()), Err(Error::NoData(_))));
        s.samples = 0;
        assert!(matches!(render_plots(&s, &data()), Err(Error::Config(_))));
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("weekly-heatmap".parse::<PlotKind>().unwrap(), PlotKind::WeeklyHeatmap);
        assert!("pie".parse::<PlotKind>().is_err());
        assert_eq!(slugify("Lodging/residential"), "lodging-residential");
    }
}
