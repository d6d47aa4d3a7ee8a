//! Labeled frame datasets and the `FRD1` container.
//!
//! `FRD1` layout (little-endian): magic `FRD1`, `u16` channels, `u16` height,
//! `u16` width, `u64` frame count, then per frame its `f32` data in row-major
//! order followed by its `f32` force label. A JSON sidecar at `<file>.json`
//! records the source recordings, the frame spec and the creation time.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accumulate_raw, normalize_max, resize_frame, Frame, FrameSpec, SpecError};
use crate::event::EventStream;

pub const FRD1_MAGIC: &[u8; 4] = b"FRD1";
const FRD1_HEADER_LEN: usize = 4 + 2 + 2 + 2 + 8;

/// Force range in newtons accepted for labels by default.
pub const DEFAULT_FORCE_RANGE: (f64, f64) = (0.0, 1.6);

/// Force samples at a fixed rate; serialized as `{rate_hz, samples}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTrack {
    pub rate_hz: f64,
    pub samples: Vec<f64>,
}

impl ForceTrack {
    pub fn new(rate_hz: f64, samples: Vec<f64>) -> Self {
        Self { rate_hz, samples }
    }

    /// Sample period in microseconds (possibly fractional).
    pub fn period_us(&self) -> f64 {
        1e6 / self.rate_hz
    }

    /// Time covered from the first to the last sample.
    pub fn span_us(&self) -> u64 {
        if self.samples.is_empty() {
            return 0;
        }
        ((self.samples.len() - 1) as f64 * self.period_us()).round() as u64
    }
}

/// One event recording with its force labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub stream: EventStream,
    /// Length of the recording; windows are laid from `t = 0`.
    pub duration_us: u64,
    pub forces: ForceTrack,
}

/// Frames with aligned force labels and the recording each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Frame>,
    /// Newtons.
    pub labels: Vec<f32>,
    pub provenance: Vec<String>,
}

impl FrameDataset {
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            frames: Vec::new(),
            labels: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The frames and labels at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> FrameDataset {
        FrameDataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: indices
                .iter()
                .map(|&i| self.provenance[i].clone())
                .collect(),
        }
    }

    /// Frame count per source recording, in first-appearance order.
    pub fn source_counts(&self) -> Vec<SourceRecording> {
        let mut out: Vec<SourceRecording> = Vec::new();
        for p in &self.provenance {
            match out.last_mut() {
                Some(last) if &last.id == p => last.frames += 1,
                _ => out.push(SourceRecording {
                    id: p.clone(),
                    frames: 1,
                }),
            }
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("recording {recording}: force sample period {period_us} us does not match window {window_us} us")]
    PeriodMismatch {
        recording: String,
        period_us: f64,
        window_us: u64,
    },
    #[error(
        "recording {recording}: {frames} windows need {frames} force samples, track has {samples}"
    )]
    TrackTooShort {
        recording: String,
        frames: usize,
        samples: usize,
    },
    #[error("recording {recording}: event at {t_us} us lies beyond the {duration_us} us duration")]
    EventsBeyondDuration {
        recording: String,
        t_us: u64,
        duration_us: u64,
    },
    #[error("recording {recording}: label {label} N at frame {frame} is outside [{lo}, {hi}] N")]
    LabelOutOfRange {
        recording: String,
        frame: usize,
        label: f64,
        lo: f64,
        hi: f64,
    },
    #[error("frame {index} is {got:?}, dataset frames are {want:?}")]
    FrameShape {
        index: usize,
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("dataset file not found: {0}")]
    NotFound(PathBuf),
    #[error("malformed FRD1 file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Cuts every recording into `floor(duration / T)` full windows, accumulates
/// each into a frame and labels frame `k` with force sample `k`.
///
/// Trailing partial windows are dropped. Windows of a recording are built in
/// parallel but the output order is always recording order then window
/// index.
pub fn build_dataset(
    recordings: &[Recording],
    spec: &FrameSpec,
    label_range: (f64, f64),
) -> Result<FrameDataset, DatasetError> {
    spec.validate()?;
    let window = spec.window_us;
    let channels = spec.channels();

    let mut dims = None;
    let mut ds = FrameDataset::empty(channels, 0, 0);
    for rec in recordings {
        let period = rec.forces.period_us();
        if !period.is_finite() || (period - window as f64).abs() > 1e-6 * window as f64 {
            return Err(DatasetError::PeriodMismatch {
                recording: rec.id.clone(),
                period_us: period,
                window_us: window,
            });
        }
        if let Some(t) = rec.stream.last_t().filter(|&t| t >= rec.duration_us) {
            return Err(DatasetError::EventsBeyondDuration {
                recording: rec.id.clone(),
                t_us: t,
                duration_us: rec.duration_us,
            });
        }
        let n = (rec.duration_us / window) as usize;
        if rec.forces.samples.len() < n {
            return Err(DatasetError::TrackTooShort {
                recording: rec.id.clone(),
                frames: n,
                samples: rec.forces.samples.len(),
            });
        }
        for (k, &f) in rec.forces.samples[..n].iter().enumerate() {
            if !(label_range.0..=label_range.1).contains(&f) {
                return Err(DatasetError::LabelOutOfRange {
                    recording: rec.id.clone(),
                    frame: k,
                    label: f,
                    lo: label_range.0,
                    hi: label_range.1,
                });
            }
        }

        let frames: Vec<Frame> = (0..n)
            .into_par_iter()
            .map(|k| {
                let t0 = k as u64 * window;
                let events = rec.stream.window(t0, t0 + window);
                let mut f = accumulate_raw(
                    events,
                    rec.stream.width as usize,
                    rec.stream.height as usize,
                    spec.mode,
                );
                if let Some(size) = spec.out_size {
                    f = resize_frame(&f, size);
                }
                if spec.normalize {
                    normalize_max(&mut f);
                }
                f.t_start_us = t0;
                f.t_end_us = t0 + window;
                f
            })
            .collect();

        if let Some(first) = frames.first() {
            let d = (first.height, first.width);
            match dims {
                None => dims = Some(d),
                Some(want) if want != d => {
                    return Err(DatasetError::FrameShape {
                        index: ds.len(),
                        got: (channels, d.0, d.1),
                        want: (channels, want.0, want.1),
                    })
                }
                _ => {}
            }
        }
        ds.labels
            .extend(rec.forces.samples[..n].iter().map(|&f| f as f32));
        ds.provenance.extend(std::iter::repeat_n(rec.id.clone(), n));
        ds.frames.extend(frames);
    }
    let (h, w) = dims.unwrap_or_else(|| {
        let side = |native: u16| spec.out_size.unwrap_or(native as usize);
        recordings
            .first()
            .map(|r| (side(r.stream.height), side(r.stream.width)))
            .unwrap_or((spec.out_size.unwrap_or(0), spec.out_size.unwrap_or(0)))
    });
    ds.height = h;
    ds.width = w;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecording {
    pub id: String,
    pub frames: usize,
}

/// JSON sidecar written next to an `FRD1` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub format: String,
    pub source_recordings: Vec<SourceRecording>,
    pub spec: FrameSpec,
    pub created_unix_s: u64,
}

impl SidecarManifest {
    pub fn new(ds: &FrameDataset, spec: &FrameSpec, created_unix_s: u64) -> Self {
        Self {
            format: "FRD1".into(),
            source_recordings: ds.source_counts(),
            spec: spec.clone(),
            created_unix_s,
        }
    }
}

/// Seconds since the Unix epoch, or 0 if the clock is before it.
pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_error(path: &Path) -> impl Fn(io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            DatasetError::NotFound(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Writes `ds` as `FRD1` and, when given, the JSON sidecar at
/// `<path>.json`.
pub fn write_frd1(
    path: &Path,
    ds: &FrameDataset,
    sidecar: Option<&SidecarManifest>,
) -> Result<(), DatasetError> {
    if ds.labels.len() != ds.frames.len() {
        return Err(DatasetError::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} frames but {} labels", ds.frames.len(), ds.labels.len()),
        });
    }
    let want = (ds.channels, ds.height, ds.width);
    for (index, f) in ds.frames.iter().enumerate() {
        let got = (f.channels, f.height, f.width);
        if got != want {
            return Err(DatasetError::FrameShape { index, got, want });
        }
    }
    let to_u16 = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| DatasetError::Malformed {
            path: path.to_path_buf(),
            reason: format!("{what} {v} does not fit in u16"),
        })
    };
    let (c, h, w) = (
        to_u16(ds.channels, "channels")?,
        to_u16(ds.height, "height")?,
        to_u16(ds.width, "width")?,
    );

    let write_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(write_err)?);
    let mut body = || -> io::Result<()> {
        out.write_all(FRD1_MAGIC)?;
        out.write_u16::<LittleEndian>(c)?;
        out.write_u16::<LittleEndian>(h)?;
        out.write_u16::<LittleEndian>(w)?;
        out.write_u64::<LittleEndian>(ds.frames.len() as u64)?;
        for (f, &label) in ds.frames.iter().zip(&ds.labels) {
            for &v in &f.data {
                out.write_f32::<LittleEndian>(v)?;
            }
            out.write_f32::<LittleEndian>(label)?;
        }
        out.flush()
    };
    body().map_err(write_err)?;

    if let Some(manifest) = sidecar {
        let sc = sidecar_path(path);
        let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        std::fs::write(&sc, json).map_err(|source| DatasetError::Io { path: sc, source })?;
    }
    Ok(())
}

/// Reads an `FRD1` file. Provenance and window times come from the sidecar
/// when it exists.
pub fn read_frd1(path: &Path) -> Result<FrameDataset, DatasetError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    let malformed = |reason: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < FRD1_HEADER_LEN {
        return Err(malformed(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != FRD1_MAGIC {
        return Err(malformed("bad magic, expected FRD1".into()));
    }
    let mut hdr = &bytes[4..FRD1_HEADER_LEN];
    let c = hdr.read_u16::<LittleEndian>().unwrap() as usize;
    let h = hdr.read_u16::<LittleEndian>().unwrap() as usize;
    let w = hdr.read_u16::<LittleEndian>().unwrap() as usize;
    let count = hdr.read_u64::<LittleEndian>().unwrap();

    let per_frame = (c * h * w + 1) * 4;
    let body = &bytes[FRD1_HEADER_LEN..];
    let expected = (count as u128) * per_frame as u128;
    if (body.len() as u128) != expected {
        return Err(malformed(format!(
            "header declares {count} frames of {per_frame} bytes, body has {} bytes",
            body.len()
        )));
    }

    let sidecar: Option<SidecarManifest> = match std::fs::read(sidecar_path(path)) {
        Ok(b) => {
            Some(serde_json::from_slice(&b).map_err(|e| malformed(format!("bad sidecar: {e}")))?)
        }
        Err(_) => None,
    };
    let mut provenance = Vec::with_capacity(count as usize);
    if let Some(m) = &sidecar {
        for s in &m.source_recordings {
            provenance.extend(std::iter::repeat_n(s.id.clone(), s.frames));
        }
        if provenance.len() != count as usize {
            return Err(malformed(format!(
                "sidecar lists {} frames, file has {count}",
                provenance.len()
            )));
        }
    } else {
        provenance.resize(count as usize, "unknown".to_string());
    }
    let window = sidecar.as_ref().map(|m| m.spec.window_us).unwrap_or(0);

    let mut ds = FrameDataset::empty(c, h, w);
    let mut k = 0u64;
    for (i, chunk) in body.chunks_exact(per_frame).enumerate() {
        if i > 0 && provenance[i] != provenance[i - 1] {
            k = 0;
        }
        let mut vals = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect::<Vec<_>>();
        let label = vals.pop().expect("per_frame includes the label");
        ds.frames.push(Frame {
            channels: c,
            height: h,
            width: w,
            data: vals,
            t_start_us: k * window,
            t_end_us: (k + 1) * window,
        });
        ds.labels.push(label);
        k += 1;
    }
    ds.provenance = provenance;
    Ok(ds)
}
