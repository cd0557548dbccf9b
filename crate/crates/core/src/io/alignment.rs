use std::path::Path;
use std::time::Duration;

use super::{FrameLabels, PhonemeInventory};
use crate::error::{Error, Result};

/// Frame timing of the acoustic frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpec {
    pub frame_shift: Duration,
    pub window: Duration,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self { frame_shift: Duration::from_millis(10), window: Duration::from_millis(25) }
    }
}

impl FrameSpec {
    pub fn new(frame_shift: Duration, window: Duration) -> Result<Self> {
        if frame_shift.is_zero() {
            return Err(Error::BadFrameSpec("frame shift must be positive".into()));
        }
        if window < frame_shift {
            return Err(Error::BadFrameSpec(format!(
                "window {window:?} shorter than frame shift {frame_shift:?}"
            )));
        }
        Ok(Self { frame_shift, window })
    }

    /// `floor((duration - window) / shift) + 1`, or 0 when the duration is shorter than one window.
    pub fn num_frames(&self, duration_ns: u128) -> usize {
        let window = self.window.as_nanos();
        if duration_ns < window {
            return 0;
        }
        ((duration_ns - window) / self.frame_shift.as_nanos() + 1) as usize
    }

    /// Center of frame `i` in nanoseconds.
    pub fn center_ns(&self, i: usize) -> u128 {
        i as u128 * self.frame_shift.as_nanos() + self.window.as_nanos() / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneInterval {
    pub start: f64,
    pub end: f64,
    pub phone: String,
}

/// Time-stamped phone segments, sorted and non-overlapping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeAlignment {
    intervals: Vec<PhoneInterval>,
}

impl TimeAlignment {
    pub fn new(intervals: Vec<PhoneInterval>) -> Result<Self> {
        for (i, iv) in intervals.iter().enumerate() {
            if !(iv.start.is_finite() && iv.end.is_finite()) {
                return Err(Error::BadInterval { index: i, message: "non-finite bound".into() });
            }
            if iv.start < 0.0 {
                return Err(Error::BadInterval { index: i, message: format!("start {} < 0", iv.start) });
            }
            if iv.start >= iv.end {
                return Err(Error::BadInterval {
                    index: i,
                    message: format!("start {} not before end {}", iv.start, iv.end),
                });
            }
            if i > 0 && iv.start < intervals[i - 1].end {
                return Err(Error::BadInterval {
                    index: i,
                    message: format!("overlaps or precedes interval ending at {}", intervals[i - 1].end),
                });
            }
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[PhoneInterval] {
        &self.intervals
    }
}

fn seconds_to_ns(s: f64) -> u128 {
    (s * 1e9).round() as u128
}

/// Converts phone intervals into one label per frame.
///
/// Frame `i` takes the phone of the interval `[start, end)` containing its
/// center `i * shift + window / 2`. Uncovered frames are `sil`, phones not in
/// the inventory are `unk`. Times are compared at nanosecond resolution.
pub fn frames_from_times(
    utterance_id: &str,
    alignment: &TimeAlignment,
    total_duration: f64,
    spec: FrameSpec,
    inventory: &PhonemeInventory,
) -> Result<FrameLabels> {
    if total_duration < 0.0 || total_duration.is_nan() {
        return Err(Error::NegativeDuration(total_duration));
    }
    let frames = spec.num_frames(seconds_to_ns(total_duration));
    let bounds: Vec<(u128, u128, usize)> = alignment
        .intervals
        .iter()
        .map(|iv| (seconds_to_ns(iv.start), seconds_to_ns(iv.end), inventory.id_or_unk(&iv.phone)))
        .collect();
    let sil = inventory.sil();
    let mut labels = Vec::with_capacity(frames);
    let mut cursor = 0;
    for i in 0..frames {
        let c = spec.center_ns(i);
        while cursor < bounds.len() && bounds[cursor].1 <= c {
            cursor += 1;
        }
        let label = match bounds.get(cursor) {
            Some(&(start, end, id)) if start <= c && c < end => id,
            _ => sil,
        };
        labels.push(label);
    }
    Ok(FrameLabels::new(utterance_id, labels))
}

/// Reads whitespace-separated `start end phone` lines (seconds). `#` starts a comment.
pub fn read_time_alignment(path: impl AsRef<Path>) -> Result<TimeAlignment> {
    let path = path.as_ref();
    let text = super::read_text(path)?;
    let mut intervals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [start, end, phone] = fields[..] else {
            return Err(Error::parse(path, i + 1, "expected `start end phone`"));
        };
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::parse(path, i + 1, format!("`{s}` is not a time")))
        };
        intervals.push(PhoneInterval { start: num(start)?, end: num(end)?, phone: phone.to_string() });
    }
    TimeAlignment::new(intervals)
}
