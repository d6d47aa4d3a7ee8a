//! Synthetic event recordings of a two-finger gripper under load.
//!
//! The scene is a set of finger polygons on a uniform background. A force
//! `F` deflects every finger vertically; the deflection grows linearly from
//! zero at the finger base to `delta_max * F / F_max` at the tip. Rendered
//! intensity pairs are turned into events with the contrast-threshold model:
//! a pixel whose log intensity moved by `delta` emits `floor(|delta| / C)`
//! events of polarity `sign(delta)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::event::{validate_stream, Event, EventStream, Polarity, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::frame::ForceTrack;
use crate::seed::sub_seed;

/// Force samples at a fixed rate; the same type labels frame datasets.
pub type ForceProfile = ForceTrack;

pub const DEFAULT_F_MAX: f64 = 1.6;
pub const DEFAULT_DELTA_MAX: f64 = 12.0;
pub const DEFAULT_RATE_HZ: f64 = 10.0;

/// Slack on `|delta| / C` so that a step of exactly `k * C` in log intensity
/// is not lost to rounding in `ln`.
const THRESHOLD_SLACK: f64 = 1e-9;

/// One finger: a closed outline at rest plus how it bends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Finger {
    /// Polygon vertices `[x, y]` in pixel coordinates at zero force.
    pub outline: Vec<[f64; 2]>,
    /// Column where deflection starts (fraction 0).
    pub base_x: f64,
    /// Column where deflection reaches its full value (fraction 1).
    pub tip_x: f64,
    /// `-1` bends toward row 0, `+1` toward the last row.
    pub direction: f64,
}

impl Finger {
    /// Fraction of the tip deflection applied at column `x`.
    fn bend_fraction(&self, x: f64) -> f64 {
        let span = self.tip_x - self.base_x;
        if span.abs() < f64::EPSILON {
            return 1.0;
        }
        ((x - self.base_x) / span).clamp(0.0, 1.0)
    }

    /// Rest-pose `[y_enter, y_exit)` intervals of the outline along the
    /// vertical line at `x`.
    fn column_spans(&self, x: f64, out: &mut Vec<(f64, f64)>) {
        out.clear();
        let mut ys = Vec::new();
        let n = self.outline.len();
        for i in 0..n {
            let [px, py] = self.outline[i];
            let [qx, qy] = self.outline[(i + 1) % n];
            if (px <= x && x < qx) || (qx <= x && x < px) {
                ys.push(py + (x - px) * (qy - py) / (qx - px));
            }
        }
        ys.sort_by(f64::total_cmp);
        out.extend(ys.chunks_exact(2).map(|p| (p[0], p[1])));
    }

    fn mirrored(&self, height: f64) -> Finger {
        Finger {
            outline: self.outline.iter().map(|&[x, y]| [x, height - y]).collect(),
            base_x: self.base_x,
            tip_x: self.tip_x,
            direction: -self.direction,
        }
    }
}

/// Uniform background events, off unless configured.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Mean noise events per second over the whole sensor.
    pub rate_hz: f64,
    pub seed: u64,
}

/// Scene geometry and sensor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GripperScene {
    pub width: u16,
    pub height: u16,
    pub fingers: Vec<Finger>,
    /// Tip deflection in pixels at `F_max`.
    pub delta_max: f64,
    #[serde(rename = "F_max")]
    pub f_max: f64,
    pub background: f64,
    pub foreground: f64,
    /// Log-intensity step per event.
    #[serde(rename = "C")]
    pub contrast_threshold: f64,
    pub noise: Option<NoiseConfig>,
}

impl Default for GripperScene {
    /// Two mirrored fingers on a 320x240 sensor, tips bending outward.
    fn default() -> Self {
        let upper = Finger {
            outline: vec![
                [40.0, 60.4],
                [260.0, 60.4],
                [276.0, 78.0],
                [260.0, 95.6],
                [40.0, 95.6],
            ],
            base_x: 40.0,
            tip_x: 260.0,
            direction: -1.0,
        };
        let lower = upper.mirrored(DEFAULT_HEIGHT as f64);
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            fingers: vec![upper, lower],
            delta_max: DEFAULT_DELTA_MAX,
            f_max: DEFAULT_F_MAX,
            background: 0.25,
            foreground: 1.0,
            contrast_threshold: 0.3,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {key} {reason}")]
    InvalidScene { key: &'static str, reason: String },
    #[error("force {force} N outside [0, {f_max}] N")]
    ForceOutOfRange { force: f64, f_max: f64 },
    #[error("intensity images differ in size: {a:?} vs {b:?}")]
    SizeMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("non-positive intensity {value} at pixel {index}")]
    NonPositiveIntensity { index: usize, value: f64 },
    #[error("interval ({t_prev_us}, {t_next_us}] is empty")]
    EmptyInterval { t_prev_us: u64, t_next_us: u64 },
    #[error("contrast threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("substeps_per_sample must be >= 1")]
    NoSubsteps,
    #[error("profile rate must be positive with an integer period in microseconds, got {0} Hz")]
    BadRate(f64),
    #[error("generated stream is invalid: {0}")]
    InvalidOutput(String),
}

fn invalid(key: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidScene {
        key,
        reason: reason.into(),
    }
}

impl GripperScene {
    /// Same scene without fingers: a constant image at every force.
    pub fn empty() -> Self {
        Self {
            fingers: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.contrast_threshold) {
            return Err(invalid(
                "C",
                format!("must be > 0, got {}", self.contrast_threshold),
            ));
        }
        if !positive(self.f_max) {
            return Err(invalid("F_max", format!("must be > 0, got {}", self.f_max)));
        }
        if !(self.delta_max.is_finite() && self.delta_max >= 0.0) {
            return Err(invalid(
                "delta_max",
                format!("must be >= 0, got {}", self.delta_max),
            ));
        }
        if !positive(self.background) {
            return Err(invalid(
                "background",
                format!("must be > 0, got {}", self.background),
            ));
        }
        if !positive(self.foreground) {
            return Err(invalid(
                "foreground",
                format!("must be > 0, got {}", self.foreground),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("width", "sensor must be at least 1x1"));
        }
        for f in &self.fingers {
            if f.outline.len() < 3 {
                return Err(invalid("fingers", "outline needs at least 3 vertices"));
            }
            let inside = f.outline.iter().all(|&[x, y]| {
                (0.0..=self.width as f64).contains(&x) && (0.0..=self.height as f64).contains(&y)
            });
            if !inside {
                return Err(invalid(
                    "fingers",
                    "outline leaves the sensor plane at zero force",
                ));
            }
            if !(f.direction == 1.0 || f.direction == -1.0) {
                return Err(invalid("fingers", "direction must be +1 or -1"));
            }
        }
        if let Some(n) = &self.noise {
            if !(n.rate_hz.is_finite() && n.rate_hz >= 0.0) {
                return Err(invalid("noise", "rate_hz must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Tip deflection in pixels under a linear-elastic law.
pub fn force_to_deflection(force: f64, scene: &GripperScene) -> Result<f64, SynthError> {
    if !(0.0..=scene.f_max).contains(&force) {
        return Err(SynthError::ForceOutOfRange {
            force,
            f_max: scene.f_max,
        });
    }
    Ok(scene.delta_max * (force / scene.f_max))
}

/// Grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Renders the scene with every finger deflected for force `force`.
pub fn render_intensity(scene: &GripperScene, force: f64) -> Result<Image, SynthError> {
    let tip = force_to_deflection(force, scene)?;
    let (w, h) = (scene.width as usize, scene.height as usize);
    let mut data = vec![scene.background; w * h];
    let mut spans = Vec::new();
    for finger in &scene.fingers {
        for x in 0..w {
            let xc = x as f64 + 0.5;
            finger.column_spans(xc, &mut spans);
            let shift = finger.direction * tip * finger.bend_fraction(xc);
            for &(lo, hi) in &spans {
                // Pixel centres yc = r + 0.5 with lo + shift <= yc < hi + shift.
                let r0 = (lo + shift - 0.5).ceil().max(0.0);
                let r1 = ((hi + shift - 0.5).ceil()).min(h as f64);
                let (r0, r1) = (r0 as usize, r1.max(0.0) as usize);
                for r in r0..r1.max(r0) {
                    data[r * w + x] = scene.foreground;
                }
            }
        }
    }
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

/// Contrast-threshold events between two intensity images.
///
/// A pixel emits `floor(|ln I_next - ln I_prev| / C)` events; its `n` events
/// are stamped at `t_prev + (j + 1) * (t_next - t_prev) / (n + 1)` for
/// `j = 0..n` (integer microseconds, at least `t_prev + 1`). The result is
/// sorted by timestamp, ties in row-major pixel order.
pub fn events_from_intensity_pair(
    prev: &Image,
    next: &Image,
    t_prev_us: u64,
    t_next_us: u64,
    contrast_threshold: f64,
) -> Result<Vec<Event>, SynthError> {
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(SynthError::SizeMismatch {
            a: (prev.width, prev.height),
            b: (next.width, next.height),
        });
    }
    if t_prev_us >= t_next_us {
        return Err(SynthError::EmptyInterval {
            t_prev_us,
            t_next_us,
        });
    }
    if !(contrast_threshold.is_finite() && contrast_threshold > 0.0) {
        return Err(SynthError::BadThreshold(contrast_threshold));
    }
    for img in [prev, next] {
        if let Some((index, &value)) = img
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| v.is_nan() || v <= 0.0)
        {
            return Err(SynthError::NonPositiveIntensity { index, value });
        }
    }
    let dt = t_next_us - t_prev_us;
    let mut events = Vec::new();
    for (i, (&a, &b)) in prev.data.iter().zip(&next.data).enumerate() {
        if a == b {
            continue;
        }
        let delta = b.ln() - a.ln();
        let n = (delta.abs() / contrast_threshold + THRESHOLD_SLACK).floor() as u64;
        if n == 0 {
            continue;
        }
        let polarity = if delta > 0.0 {
            Polarity::On
        } else {
            Polarity::Off
        };
        let (x, y) = ((i % prev.width) as u16, (i / prev.width) as u16);
        for j in 0..n {
            let t = t_prev_us + ((j + 1) * dt / (n + 1)).max(1);
            events.push(Event::new(t, x, y, polarity));
        }
    }
    events.sort_by_key(|e| e.t_us);
    Ok(events)
}

fn period_us(rate_hz: f64) -> Result<u64, SynthError> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(SynthError::BadRate(rate_hz));
    }
    let p = 1e6 / rate_hz;
    if (p - p.round()).abs() > 1e-6 || p.round() < 1.0 {
        return Err(SynthError::BadRate(rate_hz));
    }
    Ok(p.round() as u64)
}

/// Renders the scene along `profile` and returns the event stream together
/// with the unchanged profile.
///
/// Force is interpolated linearly between consecutive samples at
/// `substeps_per_sample` points; the stream spans `(n - 1)` sample periods.
pub fn synthesize_recording(
    scene: &GripperScene,
    profile: &ForceProfile,
    substeps_per_sample: u32,
) -> Result<(EventStream, ForceProfile), SynthError> {
    scene.validate()?;
    if substeps_per_sample == 0 {
        return Err(SynthError::NoSubsteps);
    }
    let period = period_us(profile.rate_hz)?;
    if let Some(&force) = profile
        .samples
        .iter()
        .find(|&&f| !(0.0..=scene.f_max).contains(&f))
    {
        return Err(SynthError::ForceOutOfRange {
            force,
            f_max: scene.f_max,
        });
    }

    let substeps = substeps_per_sample as u64;
    let mut events = Vec::new();
    if let Some(&f0) = profile.samples.first() {
        let mut prev_force = f0;
        let mut prev_img = render_intensity(scene, f0)?;
        let mut prev_t = 0u64;
        for (i, pair) in profile.samples.windows(2).enumerate() {
            let (fa, fb) = (pair[0], pair[1]);
            for s in 1..=substeps {
                let force = fa + (fb - fa) * s as f64 / substeps as f64;
                let t = i as u64 * period + s * period / substeps;
                if force != prev_force {
                    let img = render_intensity(scene, force)?;
                    events.extend(events_from_intensity_pair(
                        &prev_img,
                        &img,
                        prev_t,
                        t,
                        scene.contrast_threshold,
                    )?);
                    prev_img = img;
                    prev_force = force;
                }
                prev_t = t;
            }
        }
    }

    let duration = profile.samples.len().saturating_sub(1) as u64 * period;
    if let Some(noise) = &scene.noise {
        events.extend(noise_events(scene, noise, duration));
        events.sort_by_key(|e| e.t_us);
    }
    let stream = EventStream::new(scene.width, scene.height, events);
    let report = validate_stream(&stream);
    if !report.is_ok() {
        return Err(SynthError::InvalidOutput(report.to_string()));
    }
    Ok((stream, profile.clone()))
}

fn noise_events(scene: &GripperScene, noise: &NoiseConfig, duration_us: u64) -> Vec<Event> {
    if duration_us == 0 || noise.rate_hz == 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mean = noise.rate_hz * duration_us as f64 / 1e6;
    let count = Poisson::new(mean)
        .map(|p| p.sample(&mut rng) as usize)
        .unwrap_or(0);
    (0..count)
        .map(|_| {
            let t = rng.random_range(0..duration_us);
            let x = rng.random_range(0..scene.width);
            let y = rng.random_range(0..scene.height);
            let p = if rng.random_bool(0.5) {
                Polarity::On
            } else {
                Polarity::Off
            };
            Event::new(t, x, y, p)
        })
        .collect()
}

/// Per-recording variation of the default grasp profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraspProfileConfig {
    pub rate_hz: f64,
    /// Length of the grasping phase in seconds.
    pub duration_s: f64,
    /// Peak force is drawn uniformly from this fraction range of `F_max`.
    pub peak_fraction: (f64, f64),
    /// `F(t) = peak * (t / duration)^gamma`, gamma drawn from this range.
    pub gamma: (f64, f64),
}

impl Default for GraspProfileConfig {
    fn default() -> Self {
        Self {
            rate_hz: DEFAULT_RATE_HZ,
            duration_s: 4.0,
            peak_fraction: (0.75, 1.0),
            gamma: (0.6, 1.6),
        }
    }
}

impl GraspProfileConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        period_us(self.rate_hz)?;
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(invalid("duration_s", "must be >= 0"));
        }
        let (lo, hi) = self.peak_fraction;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid("peak_fraction", "must satisfy 0 <= lo <= hi <= 1"));
        }
        let (glo, ghi) = self.gamma;
        if !(glo > 0.0 && glo <= ghi && ghi.is_finite()) {
            return Err(invalid("gamma", "must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }

    /// Number of samples: one per period plus the closing sample.
    pub fn sample_count(&self) -> usize {
        (self.duration_s * self.rate_hz).round() as usize + 1
    }
}

/// Monotone grasp profile `peak * (t / duration)^gamma`.
pub fn grasp_profile(cfg: &GraspProfileConfig, peak: f64, gamma: f64) -> ForceProfile {
    let n = cfg.sample_count();
    let last = (n - 1).max(1) as f64;
    let samples = (0..n)
        .map(|k| peak * (k as f64 / last).powf(gamma))
        .collect();
    ForceTrack::new(cfg.rate_hz, samples)
}

/// `count` grasp profiles with seeded peak and shape.
pub fn grasp_profiles(
    cfg: &GraspProfileConfig,
    f_max: f64,
    count: usize,
    seed: u64,
) -> Vec<ForceProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "synth.profiles"));
    (0..count)
        .map(|_| {
            let frac = rng.random_range(cfg.peak_fraction.0..=cfg.peak_fraction.1);
            let gamma = rng.random_range(cfg.gamma.0..=cfg.gamma.1);
            grasp_profile(cfg, (f_max * frac).min(f_max), gamma)
        })
        .collect()
}
