//! CSV and `EVB1` event files.
//!
//! CSV layout:
//!
//! ```text
//! # width=320 height=240
//! t_us,x,y,p
//! 100,3,2,1
//! ```
//!
//! `EVB1` layout (little-endian): magic `EVB1`, `u16` width, `u16` height,
//! `u64` count, then `count` records of 16 bytes each:
//! `u64 t_us, u16 x, u16 y, i8 p, [u8; 3]` zero padding.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{validate_stream, Event, EventStream, ValidationReport};

pub const EVB1_MAGIC: &[u8; 4] = b"EVB1";
pub const EVB1_HEADER_LEN: usize = 16;
pub const EVB1_RECORD_LEN: usize = 16;
const CSV_COLUMNS: &str = "t_us,x,y,p";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// Guesses the format from a file extension (`.csv` or `.evb`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(EventFormat::Csv),
            "evb" | "evb1" | "bin" => Some(EventFormat::Binary),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            EventFormat::Csv => "csv",
            EventFormat::Binary => "evb",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("event file not found: {0}")]
    NotFound(PathBuf),
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("malformed record {index} in {path}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        index: usize,
        reason: String,
    },
    #[error("truncated file {path}: header declares {declared} events, found {found}")]
    Truncated {
        path: PathBuf,
        declared: u64,
        found: u64,
    },
    #[error("{path} has {extra} trailing bytes after the last record")]
    TrailingData { path: PathBuf, extra: usize },
    #[error("stream in {path} violates invariants: {report}")]
    InvalidContent {
        path: PathBuf,
        report: ValidationReport,
    },
    #[error("refusing to write an invalid stream: {0}")]
    InvalidStream(ValidationReport),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            IoError::NotFound(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Reads an event file; the result always passes [`validate_stream`].
pub fn read_events(path: &Path, format: EventFormat) -> Result<EventStream, IoError> {
    let stream = match format {
        EventFormat::Csv => read_csv(path)?,
        EventFormat::Binary => read_binary(path)?,
    };
    let report = validate_stream(&stream);
    if !report.is_ok() {
        return Err(IoError::InvalidContent {
            path: path.to_path_buf(),
            report,
        });
    }
    Ok(stream)
}

/// Writes `stream` to `path`. Invalid streams are rejected before the file
/// is created.
pub fn write_events(stream: &EventStream, path: &Path, format: EventFormat) -> Result<(), IoError> {
    let report = validate_stream(stream);
    if !report.is_ok() {
        return Err(IoError::InvalidStream(report));
    }
    let write_err = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(write_err)?;
    let mut w = BufWriter::new(file);
    match format {
        EventFormat::Csv => write_csv(stream, &mut w),
        EventFormat::Binary => write_binary(stream, &mut w),
    }
    .and_then(|_| w.flush())
    .map_err(write_err)
}

fn write_csv<W: Write>(stream: &EventStream, w: &mut W) -> io::Result<()> {
    writeln!(w, "# width={} height={}", stream.width, stream.height)?;
    writeln!(w, "{CSV_COLUMNS}")?;
    for e in &stream.events {
        writeln!(w, "{},{},{},{}", e.t_us, e.x, e.y, e.p)?;
    }
    Ok(())
}

fn write_binary<W: Write>(stream: &EventStream, w: &mut W) -> io::Result<()> {
    w.write_all(EVB1_MAGIC)?;
    w.write_u16::<LittleEndian>(stream.width)?;
    w.write_u16::<LittleEndian>(stream.height)?;
    w.write_u64::<LittleEndian>(stream.events.len() as u64)?;
    for e in &stream.events {
        w.write_u64::<LittleEndian>(e.t_us)?;
        w.write_u16::<LittleEndian>(e.x)?;
        w.write_u16::<LittleEndian>(e.y)?;
        w.write_i8(e.p)?;
        w.write_all(&[0u8; 3])?;
    }
    Ok(())
}

fn parse_dims(line: &str) -> Option<(u16, u16)> {
    let rest = line.trim().strip_prefix('#')?;
    let mut width = None;
    let mut height = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=')?;
        match k {
            "width" => width = Some(v.parse().ok()?),
            "height" => height = Some(v.parse().ok()?),
            _ => {}
        }
    }
    Some((width?, height?))
}

fn read_csv(path: &Path) -> Result<EventStream, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = |reason: &str| IoError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let dims_line = lines
        .next()
        .ok_or_else(|| header("empty file"))?
        .map_err(io_err(path))?;
    let (width, height) =
        parse_dims(&dims_line).ok_or_else(|| header("expected `# width=W height=H`"))?;
    let cols = lines
        .next()
        .ok_or_else(|| header("missing column line"))?
        .map_err(io_err(path))?;
    if cols.trim() != CSV_COLUMNS {
        return Err(header("expected column line `t_us,x,y,p`"));
    }

    let mut events = Vec::new();
    for (index, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| IoError::MalformedRecord {
            path: path.to_path_buf(),
            index,
            reason: reason.to_string(),
        };
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .map(str::trim)
                .ok_or_else(|| bad(&format!("missing {name}")))
        };
        let t_us = next("t_us")?.parse().map_err(|_| bad("bad t_us"))?;
        let x = next("x")?.parse().map_err(|_| bad("bad x"))?;
        let y = next("y")?.parse().map_err(|_| bad("bad y"))?;
        let p = next("p")?.parse().map_err(|_| bad("bad p"))?;
        if fields.next().is_some() {
            return Err(bad("too many fields"));
        }
        events.push(Event { t_us, x, y, p });
    }
    Ok(EventStream::new(width, height, events))
}

fn read_binary(path: &Path) -> Result<EventStream, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < EVB1_HEADER_LEN {
        return Err(IoError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("{} bytes is shorter than the 16-byte header", bytes.len()),
        });
    }
    if &bytes[..4] != EVB1_MAGIC {
        return Err(IoError::MalformedHeader {
            path: path.to_path_buf(),
            reason: "bad magic, expected EVB1".into(),
        });
    }
    let mut hdr = &bytes[4..EVB1_HEADER_LEN];
    // Infallible: the slice length was checked above.
    let width = hdr.read_u16::<LittleEndian>().unwrap();
    let height = hdr.read_u16::<LittleEndian>().unwrap();
    let declared = hdr.read_u64::<LittleEndian>().unwrap();

    let body = &bytes[EVB1_HEADER_LEN..];
    let found = (body.len() / EVB1_RECORD_LEN) as u64;
    if found < declared {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            declared,
            found,
        });
    }
    let used = declared as usize * EVB1_RECORD_LEN;
    if body.len() > used {
        return Err(IoError::TrailingData {
            path: path.to_path_buf(),
            extra: body.len() - used,
        });
    }

    let mut events = Vec::with_capacity(declared as usize);
    for (index, mut rec) in body.chunks_exact(EVB1_RECORD_LEN).enumerate() {
        let t_us = rec.read_u64::<LittleEndian>().unwrap();
        let x = rec.read_u16::<LittleEndian>().unwrap();
        let y = rec.read_u16::<LittleEndian>().unwrap();
        let p = rec.read_i8().unwrap();
        if rec.iter().any(|&b| b != 0) {
            return Err(IoError::MalformedRecord {
                path: path.to_path_buf(),
                index,
                reason: "nonzero padding".into(),
            });
        }
        events.push(Event { t_us, x, y, p });
    }
    Ok(EventStream::new(width, height, events))
}
