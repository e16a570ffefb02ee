// SPDX-License-Identifier: Apache-2.0

//! Deterministic line-chart rasterizer for eGFR trajectories.
//!
//! Text uses the embedded 8×8 bitmap font from `font8x8`, so the output
//! bytes do not depend on system fonts. Only observed visits are drawn; the
//! window's target never reaches the canvas.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use font8x8::legacy::{BASIC_LEGACY, LATIN_LEGACY};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{PredictionWindow, WindowId};
use crate::error::{Error, Result};
use crate::par::Execution;

pub const Y_AXIS_LABEL: &str = "eGFR (mL/min/1.73m²)";
pub const X_AXIS_LABEL: &str = "Date";

type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const BLACK: Rgb = [0, 0, 0];
const GRID: Rgb = [225, 225, 225];
const LINE: Rgb = [31, 119, 180];
const MARKER: Rgb = [13, 60, 110];
const TARGET: Rgb = [44, 160, 44];
const FORECAST: Rgb = [214, 39, 40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartStyle {
    pub width: u32,
    pub height: u32,
    pub margin_left: u32,
    pub margin_right: u32,
    pub margin_top: u32,
    pub margin_bottom: u32,
    pub marker_radius: u32,
    pub line_thickness: u32,
    /// Horizontal inset of the first/last marker from the plot edges.
    pub x_padding: u32,
}

impl Default for ChartStyle {
    fn default() -> Self {
        ChartStyle {
            width: 800,
            height: 500,
            margin_left: 90,
            margin_right: 30,
            margin_top: 40,
            margin_bottom: 110,
            marker_radius: 4,
            line_thickness: 2,
            x_padding: 24,
        }
    }
}

impl ChartStyle {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("chart dimensions must be positive".into()));
        }
        let plot_w = self.width as i64 - self.margin_left as i64 - self.margin_right as i64 - 2 * self.x_padding as i64;
        let plot_h = self.height as i64 - self.margin_top as i64 - self.margin_bottom as i64;
        if plot_w < 2 || plot_h < 2 {
            return Err(Error::Config(format!(
                "chart margins leave no plot area in a {}x{} canvas",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartImage {
    pub window_id: WindowId,
    pub width: u32,
    pub height: u32,
    /// Row-major RGB8.
    #[serde(skip)]
    pub pixels: Vec<u8>,
    /// Hex SHA-256 over dimensions and pixels.
    pub digest: String,
}

impl ChartImage {
    fn from_pixels(window_id: WindowId, width: u32, height: u32, pixels: Vec<u8>) -> Self {
        let digest = pixel_digest(width, height, &pixels);
        ChartImage {
            window_id,
            width,
            height,
            pixels,
            digest,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// PNG encoding of the raster.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        encode_png(&mut out, self).map_err(|e| Error::Render(e.to_string()))?;
        Ok(out)
    }
}

fn pixel_digest(width: u32, height: u32, pixels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(width.to_le_bytes());
    h.update(height.to_le_bytes());
    h.update(pixels);
    hex::encode(h.finalize())
}

/// Geometry of a rendered chart, in pixel space (y grows downwards).
#[derive(Debug, Clone, PartialEq)]
pub struct ChartLayout {
    pub markers: Vec<(f64, f64)>,
    pub segments: usize,
    pub y_ticks: Vec<(f64, f64)>,
    pub x_labels: Vec<String>,
    pub y_range: (f64, f64),
    plot: (f64, f64, f64, f64),
}

fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

pub fn layout(window: &PredictionWindow, style: &ChartStyle) -> Result<ChartLayout> {
    style.validate()?;
    if window.observed.len() < 2 {
        return Err(Error::Render(format!(
            "window {} has {} observed visit(s); a line chart needs at least 2",
            window.id(),
            window.observed.len()
        )));
    }
    let left = style.margin_left as f64;
    let right = (style.width - style.margin_right) as f64;
    let top = style.margin_top as f64;
    let bottom = (style.height - style.margin_bottom) as f64;

    let values: Vec<f64> = window.egfr_history().collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.1 * (hi - lo) } else { 5.0 };
    let step = nice_step((hi - lo + 2.0 * pad) / 5.0);
    let y_min = ((lo - pad) / step).floor() * step;
    let y_max = ((hi + pad) / step).ceil() * step;
    let y_of = |v: f64| bottom - (v - y_min) / (y_max - y_min) * (bottom - top);

    let offsets = window.day_offsets();
    let span = *offsets.last().unwrap();
    let xp = style.x_padding as f64;
    let x_of = |d: f64| left + xp + d / span * (right - left - 2.0 * xp);

    let markers = offsets.iter().zip(&values).map(|(&d, &v)| (x_of(d), y_of(v))).collect();
    let mut y_ticks = Vec::new();
    let mut t = y_min;
    while t <= y_max + step * 1e-9 {
        y_ticks.push((t, y_of(t)));
        t += step;
    }
    Ok(ChartLayout {
        markers,
        segments: values.len() - 1,
        y_ticks,
        x_labels: window.observed.iter().map(|v| v.date.to_string()).collect(),
        y_range: (y_min, y_max),
        plot: (left, top, right, bottom),
    })
}

struct Canvas {
    w: i64,
    h: i64,
    buf: Vec<u8>,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        let mut buf = Vec::with_capacity(3 * w as usize * h as usize);
        for _ in 0..(w as usize * h as usize) {
            buf.extend_from_slice(&WHITE);
        }
        Canvas {
            w: w as i64,
            h: h as i64,
            buf,
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && x < self.w && y < self.h {
            let i = 3 * (y * self.w + x) as usize;
            self.buf[i..i + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn disc(&mut self, cx: i64, cy: i64, r: i64, c: Rgb) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), thickness: i64, c: Rgb) {
        let r = (thickness / 2).max(0);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if r == 0 {
                self.put(x, y, c);
            } else {
                self.disc(x, y, r, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Horizontal text with its top-left corner at (x, y).
    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        self.put(x + 8 * i as i64 + col, y + row as i64, c);
                    }
                }
            }
        }
    }

    /// Text rotated 90° counter-clockwise, reading bottom to top, with its
    /// baseline start at (x, y).
    fn text_up(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        self.put(x + row as i64, y - 8 * i as i64 - col, c);
                    }
                }
            }
        }
    }
}

fn glyph(ch: char) -> [u8; 8] {
    let code = ch as usize;
    match code {
        0..=127 => BASIC_LEGACY[code],
        0xA0..=0xFF => LATIN_LEGACY[code - 0xA0],
        _ => BASIC_LEGACY['?' as usize],
    }
}

fn tick_label(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else {
        let decimals = (-step.log10().floor()) as usize;
        format!("{v:.decimals$}")
    }
}

fn draw_frame(canvas: &mut Canvas, lay: &ChartLayout, style: &ChartStyle) {
    let (left, top, right, bottom) = lay.plot;
    let (l, t, r, b) = (left as i64, top as i64, right as i64, bottom as i64);

    let step = if lay.y_ticks.len() > 1 {
        lay.y_ticks[1].0 - lay.y_ticks[0].0
    } else {
        1.0
    };
    for &(v, py) in &lay.y_ticks {
        let py = py.round() as i64;
        canvas.rect(l + 1, py, r, py, GRID);
        canvas.rect(l - 5, py, l, py, BLACK);
        let label = tick_label(v, step);
        canvas.text(l - 8 - 8 * label.chars().count() as i64, py - 4, &label, BLACK);
    }

    canvas.rect(l - 1, t, l, b, BLACK);
    canvas.rect(l - 1, b, r, b + 1, BLACK);

    for (&(mx, _), label) in lay.markers.iter().zip(&lay.x_labels) {
        let px = mx.round() as i64;
        canvas.rect(px, b + 2, px, b + 6, BLACK);
        canvas.text_up(px - 4, b + 10 + 8 * label.chars().count() as i64, label, BLACK);
    }

    let title = "eGFR trajectory";
    let cx = style.width as i64 / 2 - 4 * title.len() as i64;
    canvas.text(cx, (t - 8) / 2, title, BLACK);

    let ylab_len = Y_AXIS_LABEL.chars().count() as i64;
    canvas.text_up(12, (t + b) / 2 + 4 * ylab_len, Y_AXIS_LABEL, BLACK);
    let cx = (l + r) / 2 - 4 * X_AXIS_LABEL.len() as i64;
    canvas.text(cx, style.height as i64 - 20, X_AXIS_LABEL, BLACK);
}

fn draw_series(canvas: &mut Canvas, lay: &ChartLayout, style: &ChartStyle) {
    let pts: Vec<(i64, i64)> = lay
        .markers
        .iter()
        .map(|&(x, y)| (x.round() as i64, y.round() as i64))
        .collect();
    for w in pts.windows(2) {
        canvas.line(w[0], w[1], style.line_thickness as i64, LINE);
    }
    for &(x, y) in &pts {
        canvas.disc(x, y, style.marker_radius as i64, MARKER);
    }
}

/// Renders the observed trajectory of `window`.
pub fn render_trajectory(window: &PredictionWindow, style: &ChartStyle) -> Result<ChartImage> {
    let lay = layout(window, style)?;
    let mut canvas = Canvas::new(style.width, style.height);
    draw_frame(&mut canvas, &lay, style);
    draw_series(&mut canvas, &lay, style);
    Ok(ChartImage::from_pixels(window.id(), style.width, style.height, canvas.buf))
}

/// Review chart: the observed trajectory plus the actual target (green) and
/// a forecast (red) at the target date. Never sent to a model.
pub fn render_forecast(window: &PredictionWindow, forecast: f64, style: &ChartStyle) -> Result<ChartImage> {
    let mut extended = window.clone();
    extended.observed.push(window.target.clone());
    let mut probe = extended.clone();
    probe.observed.last_mut().unwrap().egfr = forecast;
    // y-range must cover the forecast too
    let lay_probe = layout(&probe, style)?;
    let mut lay = layout(&extended, style)?;
    if lay_probe.y_range.0 < lay.y_range.0 || lay_probe.y_range.1 > lay.y_range.1 {
        let mut both = extended.clone();
        let mut extra = window.target.clone();
        extra.egfr = forecast;
        extra.date = window.target.date + chrono::Duration::days(1);
        both.observed.push(extra);
        let wide = layout(&both, style)?;
        let (y_min, y_max) = wide.y_range;
        let (_, top, _, bottom) = lay.plot;
        let y_of = |v: f64| bottom - (v - y_min) / (y_max - y_min) * (bottom - top);
        for (m, v) in lay.markers.iter_mut().zip(extended.egfr_history()) {
            m.1 = y_of(v);
        }
        lay.y_ticks = wide.y_ticks;
        lay.y_range = wide.y_range;
    }
    let (y_min, y_max) = lay.y_range;
    let (_, top, _, bottom) = lay.plot;
    let y_of = |v: f64| bottom - (v - y_min) / (y_max - y_min) * (bottom - top);
    let (tx, ty) = *lay.markers.last().unwrap();

    let mut observed_only = lay.clone();
    observed_only.markers.pop();
    observed_only.segments -= 1;
    let mut canvas = Canvas::new(style.width, style.height);
    draw_frame(&mut canvas, &lay, style);
    draw_series(&mut canvas, &observed_only, style);
    let r = style.marker_radius as i64 + 1;
    canvas.disc(tx.round() as i64, ty.round() as i64, r, TARGET);
    canvas.disc(tx.round() as i64, y_of(forecast).round() as i64, r, FORECAST);
    Ok(ChartImage::from_pixels(window.id(), style.width, style.height, canvas.buf))
}

pub fn render_all(windows: &[PredictionWindow], style: &ChartStyle, exec: Execution) -> Result<Vec<ChartImage>> {
    exec.try_map(windows, |w| render_trajectory(w, style))
}

/// `<patient>_<m>.png`
pub fn chart_file_name(id: &WindowId) -> String {
    format!("{id}.png")
}

fn encode_png<W: std::io::Write>(out: W, image: &ChartImage) -> std::result::Result<(), png::EncodingError> {
    let mut enc = png::Encoder::new(out, image.width, image.height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&image.pixels)?;
    writer.finish()
}

/// Writes the chart as a PNG file.
pub fn export_chart(image: &ChartImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_png(BufWriter::new(file), image).map_err(|e| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Render(format!("{}: {other}", path.display())),
    })
}

pub fn read_chart(path: &Path, window_id: WindowId) -> Result<ChartImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Render(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Render(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Render(format!("{}: expected 8-bit RGB", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok(ChartImage::from_pixels(window_id, info.width, info.height, buf))
}
