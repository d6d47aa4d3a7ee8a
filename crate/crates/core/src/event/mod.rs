//! Events, event streams and their on-disk formats.
//!
//! Timestamps are integer microseconds throughout; windows are half-open
//! `[t0, t1)` so adjacent windows never share an event.

mod io;

pub use io::{read_events, write_events, EventFormat, IoError};

use std::fmt;

/// Default sensor width in pixels.
pub const DEFAULT_WIDTH: u16 = 320;
/// Default sensor height in pixels.
pub const DEFAULT_HEIGHT: u16 = 240;

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    /// `+1` for [`Polarity::On`], `-1` for [`Polarity::Off`].
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn from_sign(p: i8) -> Option<Self> {
        match p {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }
}

/// One brightness-change record.
///
/// Polarity is kept as the raw signed byte so that streams read from
/// untrusted sources can be represented and then rejected by
/// [`validate_stream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

impl Event {
    pub fn new(t_us: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self {
            t_us,
            x,
            y,
            p: polarity.sign(),
        }
    }

    pub fn polarity(&self) -> Option<Polarity> {
        Polarity::from_sign(self.p)
    }
}

/// A time-ordered sequence of events from a `width` x `height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Self {
        Self {
            width,
            height,
            events,
        }
    }

    pub fn empty(width: u16, height: u16) -> Self {
        Self::new(width, height, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn first_t(&self) -> Option<u64> {
        self.events.first().map(|e| e.t_us)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.events.last().map(|e| e.t_us)
    }

    /// Borrowed view of the events in `[t0_us, t1_us)`.
    ///
    /// Relies on the stream being sorted; use [`validate_stream`] first on
    /// untrusted data.
    pub fn window(&self, t0_us: u64, t1_us: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t_us < t0_us);
        let hi = self.events.partition_point(|e| e.t_us < t1_us);
        &self.events[lo..hi.max(lo)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    NonMonotonic,
    XOutOfRange,
    YOutOfRange,
    BadPolarity,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::NonMonotonic => "non-monotonic",
            ViolationKind::XOutOfRange => "x out of range",
            ViolationKind::YOutOfRange => "y out of range",
            ViolationKind::BadPolarity => "polarity not +1/-1",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at index {}", self.kind, self.index)
    }
}

/// Outcome of [`validate_stream`]; violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks ordering, bounds and polarity of every event.
pub fn validate_stream(stream: &EventStream) -> ValidationReport {
    let mut violations = Vec::new();
    let mut prev_t = 0u64;
    for (index, e) in stream.events.iter().enumerate() {
        if index > 0 && e.t_us < prev_t {
            violations.push(Violation {
                index,
                kind: ViolationKind::NonMonotonic,
            });
        }
        prev_t = e.t_us;
        if e.x >= stream.width {
            violations.push(Violation {
                index,
                kind: ViolationKind::XOutOfRange,
            });
        }
        if e.y >= stream.height {
            violations.push(Violation {
                index,
                kind: ViolationKind::YOutOfRange,
            });
        }
        if e.polarity().is_none() {
            violations.push(Violation {
                index,
                kind: ViolationKind::BadPolarity,
            });
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("window start {t0_us} us is after window end {t1_us} us")]
pub struct WindowError {
    pub t0_us: u64,
    pub t1_us: u64,
}

/// Returns the events with `t0_us <= t < t1_us`, order preserved.
pub fn slice_window(
    stream: &EventStream,
    t0_us: u64,
    t1_us: u64,
) -> Result<EventStream, WindowError> {
    if t0_us > t1_us {
        return Err(WindowError { t0_us, t1_us });
    }
    Ok(EventStream::new(
        stream.width,
        stream.height,
        stream.window(t0_us, t1_us).to_vec(),
    ))
}
