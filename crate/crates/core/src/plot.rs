//! Deterministic line-plot rasterization of time series into PNG.
//!
//! Rendering is done directly into an RGB buffer with integer Bresenham
//! lines (no anti-aliasing, no text), so identical inputs always produce
//! identical bytes and every foreground pixel carries an exact palette color.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TimeSeriesSample;
use crate::error::PlotError;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum YRange {
    /// Per-sample min/max with 5% padding.
    Auto,
    Fixed { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    pub width_px: u32,
    pub height_px: u32,
    pub margin_px: u32,
    pub palette: Vec<Rgb>,
    pub background: Rgb,
    pub axis_color: Rgb,
    pub draw_axes: bool,
    pub y_range: YRange,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            width_px: 800,
            height_px: 400,
            margin_px: 20,
            palette: vec![
                [31, 119, 180],
                [255, 127, 14],
                [44, 160, 44],
                [214, 39, 40],
                [148, 103, 189],
                [140, 86, 75],
                [227, 119, 194],
                [188, 189, 34],
                [23, 190, 207],
                [0, 0, 0],
            ],
            background: [255, 255, 255],
            axis_color: [170, 170, 170],
            draw_axes: true,
            y_range: YRange::Auto,
        }
    }
}

impl PlotConfig {
    pub fn with_y_range(&self, y_range: YRange) -> Self {
        Self {
            y_range,
            ..self.clone()
        }
    }

    /// Checks the canvas and that the palette covers `channels` series.
    pub fn validate(&self, channels: usize) -> Result<(), PlotError> {
        if self.width_px < 64 || self.height_px < 64 {
            return Err(PlotError::Config(format!(
                "canvas {}x{} is below the 64x64 minimum",
                self.width_px, self.height_px
            )));
        }
        if 2 * self.margin_px + 2 > self.width_px.min(self.height_px) {
            return Err(PlotError::Config(format!(
                "margin {} leaves no plotting area",
                self.margin_px
            )));
        }
        if self.palette.len() < channels {
            return Err(PlotError::Config(format!(
                "palette has {} colors for {channels} channels",
                self.palette.len()
            )));
        }
        if let YRange::Fixed { lo, hi } = self.y_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(PlotError::Config(format!("bad fixed y range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn value_bounds(sample: &TimeSeriesSample) -> (f64, f64) {
    sample
        .values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn padded(lo: f64, hi: f64) -> YRange {
    let span = hi - lo;
    if span <= 1e-12 * hi.abs().max(1.0) {
        YRange::Fixed {
            lo: lo - 1.0,
            hi: hi + 1.0,
        }
    } else {
        YRange::Fixed {
            lo: lo - 0.05 * span,
            hi: hi + 0.05 * span,
        }
    }
}

/// The padded automatic range of one sample.
pub fn auto_range(sample: &TimeSeriesSample) -> YRange {
    let (lo, hi) = value_bounds(sample);
    padded(lo, hi)
}

/// Padded range covering both samples.
pub fn shared_range(a: &TimeSeriesSample, b: &TimeSeriesSample) -> YRange {
    let (alo, ahi) = value_bounds(a);
    let (blo, bhi) = value_bounds(b);
    padded(alo.min(blo), ahi.max(bhi))
}

struct Canvas {
    width: i64,
    height: i64,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(width: u32, height: u32, background: Rgb) -> Self {
        let pixels = background
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width: width as i64,
            height: height as i64,
            pixels,
        }
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb) {
        if x < 0 || y < 0 || x >= self.width || y >= self.height {
            return;
        }
        let idx = ((y * self.width + x) * 3) as usize;
        self.pixels[idx..idx + 3].copy_from_slice(&color);
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
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

    fn encode(&self) -> Result<Vec<u8>, PlotError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Default);
            enc.set_filter(png::FilterType::NoFilter);
            enc.set_adaptive_filter(png::AdaptiveFilterType::NonAdaptive);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.pixels)?;
            writer.finish()?;
        }
        Ok(out)
    }
}

/// Renders every channel as an overlaid polyline and returns PNG bytes.
pub fn render_line_plot(
    sample: &TimeSeriesSample,
    config: &PlotConfig,
) -> Result<Vec<u8>, PlotError> {
    if sample.values.is_empty() || sample.values.iter().any(Vec::is_empty) {
        return Err(PlotError::EmptySample);
    }
    config.validate(sample.channels())?;
    let (lo, hi) = match config.y_range {
        YRange::Fixed { lo, hi } => (lo, hi),
        YRange::Auto => match auto_range(sample) {
            YRange::Fixed { lo, hi } => (lo, hi),
            YRange::Auto => unreachable!(),
        },
    };

    let mut canvas = Canvas::new(config.width_px, config.height_px, config.background);
    let margin = config.margin_px as i64;
    let left = margin;
    let right = config.width_px as i64 - 1 - margin;
    let top = margin;
    let bottom = config.height_px as i64 - 1 - margin;

    if config.draw_axes {
        canvas.line((left, top), (left, bottom), config.axis_color);
        canvas.line((left, bottom), (right, bottom), config.axis_color);
        for t in 0..=4 {
            let x = left + (right - left) * t / 4;
            let y = bottom - (bottom - top) * t / 4;
            canvas.line((x, bottom), (x, bottom + 4), config.axis_color);
            canvas.line((left - 4, y), (left, y), config.axis_color);
        }
    }

    let w = sample.len();
    let map_y = |v: f64| -> i64 {
        let frac = (v - lo) / (hi - lo);
        let y = bottom as f64 - frac * (bottom - top) as f64;
        (y.round() as i64).clamp(0, config.height_px as i64 - 1)
    };
    let map_x = |i: usize| -> i64 {
        if w == 1 {
            (left + right) / 2
        } else {
            left + ((i as i64) * (right - left) + (w as i64 - 1) / 2) / (w as i64 - 1)
        }
    };

    for (channel, row) in sample.values.iter().enumerate() {
        let color = config.palette[channel];
        if w == 1 {
            let (cx, cy) = (map_x(0), map_y(row[0]));
            for dy in -2..=2 {
                for dx in -2..=2 {
                    canvas.put(cx + dx, cy + dy, color);
                }
            }
            continue;
        }
        let points: Vec<(i64, i64)> = row
            .iter()
            .enumerate()
            .map(|(i, &v)| (map_x(i), map_y(v)))
            .collect();
        for seg in points.windows(2) {
            canvas.line(seg[0], seg[1], color);
        }
    }
    canvas.encode()
}

/// Renders two samples on a common fixed y range so they compare visually.
pub fn render_contrast_pair(
    positive: &TimeSeriesSample,
    negative: &TimeSeriesSample,
    config: &PlotConfig,
) -> Result<(Vec<u8>, Vec<u8>), PlotError> {
    if positive.is_empty() || negative.is_empty() {
        return Err(PlotError::EmptySample);
    }
    let shared = config.with_y_range(shared_range(positive, negative));
    Ok((
        render_line_plot(positive, &shared)?,
        render_line_plot(negative, &shared)?,
    ))
}

/// Content hash of the rendering inputs.
pub fn render_key(sample: &TimeSeriesSample, config: &PlotConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("plot config serializes"));
    for row in &sample.values {
        hasher.update((row.len() as u64).to_le_bytes());
        for v in row {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// On-disk PNG cache keyed by [`render_key`]. Without a directory it just
/// renders.
#[derive(Debug, Clone, Default)]
pub struct ImageCache {
    dir: Option<PathBuf>,
}

impl ImageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    pub fn in_memory() -> Self {
        Self { dir: None }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn render(
        &self,
        sample: &TimeSeriesSample,
        config: &PlotConfig,
    ) -> Result<Vec<u8>, PlotError> {
        let Some(dir) = &self.dir else {
            return render_line_plot(sample, config);
        };
        let path = dir.join(format!("{}.png", render_key(sample, config)));
        if let Ok(bytes) = fs::read(&path) {
            return Ok(bytes);
        }
        let bytes = render_line_plot(sample, config)?;
        fs::create_dir_all(dir)?;
        fs::write(&path, &bytes)?;
        Ok(bytes)
    }

    pub fn render_pair(
        &self,
        positive: &TimeSeriesSample,
        negative: &TimeSeriesSample,
        config: &PlotConfig,
    ) -> Result<(Vec<u8>, Vec<u8>), PlotError> {
        let shared = config.with_y_range(shared_range(positive, negative));
        Ok((self.render(positive, &shared)?, self.render(negative, &shared)?))
    }
}
