//! Event-to-frame conversion over fixed time windows.
//!
//! A frame is a `channels x H x W` histogram of the events inside one
//! half-open window `[t0, t0 + T)`. Three accumulation modes are supported:
//! binary occupancy, per-pixel event counts, and counts split by polarity
//! into two channels. Frames can then be box-resampled to a square side and
//! scaled by their own maximum.

mod dataset;

pub use dataset::{
    build_dataset, read_frd1, sidecar_path, unix_now, write_frd1, DatasetError, ForceTrack,
    FrameDataset, Recording, SidecarManifest, SourceRecording, DEFAULT_FORCE_RANGE, FRD1_MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::event::{Event, EventStream};

pub const DEFAULT_WINDOW_US: u64 = 100_000;
pub const DEFAULT_OUT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    /// 1 where at least one event fired, else 0.
    Binary,
    /// Number of events per pixel.
    Count,
    /// Channel 0 counts `+1` events, channel 1 counts `-1` events.
    #[serde(rename = "polarity2ch")]
    Polarity2Ch,
}

impl AccumulationMode {
    pub const ALL: [AccumulationMode; 3] = [
        AccumulationMode::Binary,
        AccumulationMode::Count,
        AccumulationMode::Polarity2Ch,
    ];

    pub fn channels(self) -> usize {
        match self {
            AccumulationMode::Binary | AccumulationMode::Count => 1,
            AccumulationMode::Polarity2Ch => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AccumulationMode::Binary => "binary",
            AccumulationMode::Count => "count",
            AccumulationMode::Polarity2Ch => "polarity2ch",
        }
    }
}

impl std::str::FromStr for AccumulationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!("unknown accumulation mode {s:?} (expected binary, count or polarity2ch)")
            })
    }
}

/// How events become frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSpec {
    /// Window length `T` in microseconds.
    pub window_us: u64,
    pub mode: AccumulationMode,
    /// Square output side; `None` keeps the sensor resolution.
    pub out_size: Option<usize>,
    /// Scale each frame by its own maximum after resizing.
    pub normalize: bool,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            window_us: DEFAULT_WINDOW_US,
            mode: AccumulationMode::Polarity2Ch,
            out_size: Some(DEFAULT_OUT_SIZE),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid frame spec: {key} {reason}")]
pub struct SpecError {
    pub key: &'static str,
    pub reason: String,
}

impl FrameSpec {
    /// Raw accumulation at sensor resolution, as used by conservation checks.
    pub fn raw(mode: AccumulationMode, window_us: u64) -> Self {
        Self {
            window_us,
            mode,
            out_size: None,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.window_us == 0 {
            return Err(SpecError {
                key: "window_us",
                reason: "must be > 0".into(),
            });
        }
        if self.out_size == Some(0) {
            return Err(SpecError {
                key: "out_size",
                reason: "must be > 0".into(),
            });
        }
        Ok(())
    }

    /// Additional check when frames feed a model with `patch`-pixel patches.
    pub fn validate_for_patch(&self, patch: usize) -> Result<(), SpecError> {
        self.validate()?;
        match self.out_size {
            Some(s) if patch > 0 && s % patch == 0 => Ok(()),
            Some(s) => Err(SpecError {
                key: "out_size",
                reason: format!("{s} is not divisible by patch size {patch}"),
            }),
            None => Err(SpecError {
                key: "out_size",
                reason: "must be set when training a patch model".into(),
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }
}

/// One accumulated event frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `channels x height x width`.
    pub data: Vec<f32>,
    pub t_start_us: u64,
    pub t_end_us: u64,
}

impl Frame {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            t_start_us: 0,
            t_end_us: 0,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn mass(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Histogram of `events` (already restricted to `[t0, t0 + T)`) at sensor
/// resolution, without resizing or normalization.
pub fn accumulate_raw(
    events: &[Event],
    width: usize,
    height: usize,
    mode: AccumulationMode,
) -> Frame {
    let mut frame = Frame::zeros(mode.channels(), height, width);
    let plane = width * height;
    let data = &mut frame.data;
    match mode {
        AccumulationMode::Count => {
            for e in events {
                data[e.y as usize * width + e.x as usize] += 1.0;
            }
        }
        AccumulationMode::Binary => {
            for e in events {
                data[e.y as usize * width + e.x as usize] = 1.0;
            }
        }
        AccumulationMode::Polarity2Ch => {
            for e in events {
                let offset = if e.p > 0 { 0 } else { plane };
                data[offset + e.y as usize * width + e.x as usize] += 1.0;
            }
        }
    }
    frame
}

/// Builds the frame for the window starting at `t0_us`.
///
/// `events` must already be sliced to `[t0_us, t0_us + spec.window_us)`.
pub fn accumulate_frame(events: &EventStream, spec: &FrameSpec, t0_us: u64) -> Frame {
    let mut frame = accumulate_raw(
        &events.events,
        events.width as usize,
        events.height as usize,
        spec.mode,
    );
    if let Some(size) = spec.out_size {
        if size != frame.height || size != frame.width {
            frame = resize_frame(&frame, size);
        }
    }
    if spec.normalize {
        normalize_max(&mut frame);
    }
    frame.t_start_us = t0_us;
    frame.t_end_us = t0_us + spec.window_us;
    frame
}

/// Divides every element by the frame maximum; an all-zero frame is left
/// unchanged.
pub fn normalize_max(frame: &mut Frame) {
    let max = frame.data.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        let inv = 1.0 / max;
        frame.data.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Weights mapping `n_in` source cells onto `n_out` target cells along one
/// axis. Entry `i` lists `(target, fraction of source cell i)`; the
/// fractions of every source cell sum to one.
fn box_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    (0..n_in)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = ((hi.ceil() as usize).max(first + 1)).min(n_out);
            (first..last)
                .filter_map(|o| {
                    let overlap = (hi.min((o + 1) as f64) - lo.max(o as f64)).max(0.0);
                    (overlap > 0.0).then_some((o, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted resampling to `out_size x out_size` that conserves the
/// total mass of each channel.
pub fn resize_frame(frame: &Frame, out_size: usize) -> Frame {
    let (h, w) = (frame.height, frame.width);
    if h == out_size && w == out_size {
        return frame.clone();
    }
    let wy = box_weights(h, out_size);
    let wx = box_weights(w, out_size);
    let mut out = Frame::zeros(frame.channels, out_size, out_size);
    out.t_start_us = frame.t_start_us;
    out.t_end_us = frame.t_end_us;

    let mut rows = vec![0.0f64; w];
    let mut acc = vec![0.0f64; out_size * out_size];
    for c in 0..frame.channels {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let src = frame.plane(c);
        // Columns first into a scratch row, then spread rows.
        let mut col_pass = vec![0.0f64; out_size];
        for (y, ys) in wy.iter().enumerate() {
            let row = &src[y * w..(y + 1) * w];
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            rows.iter_mut().zip(row).for_each(|(r, &v)| *r = v as f64);
            col_pass.iter_mut().for_each(|v| *v = 0.0);
            for (x, xs) in wx.iter().enumerate() {
                let v = rows[x];
                if v != 0.0 {
                    for &(o, f) in xs {
                        col_pass[o] += v * f;
                    }
                }
            }
            for &(oy, fy) in ys {
                let dst = &mut acc[oy * out_size..(oy + 1) * out_size];
                dst.iter_mut()
                    .zip(&col_pass)
                    .for_each(|(d, &v)| *d += v * fy);
            }
        }
        let n = out_size * out_size;
        out.data[c * n..(c + 1) * n]
            .iter_mut()
            .zip(&acc)
            .for_each(|(d, &v)| *d = v as f32);
    }
    out
}
