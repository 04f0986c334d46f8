//! Frame-level speaker-activity masks from oracle diarization.
//!
//! Each encoder frame is put in one of four classes relative to a target
//! speaker: silence, target only, non-target only, or overlap of the
//! target with someone else. Oracle annotations always give one-hot rows.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StnoError {
    #[error("speaker inventory is empty")]
    EmptyInventory,
    #[error("target speaker {0:?} is not in the speaker inventory")]
    UnknownTarget(String),
    #[error("{frames} frames of {frame_duration_s}s do not cover a window of {window_s}s")]
    FrameMismatch {
        frames: usize,
        frame_duration_s: f64,
        window_s: f64,
    },
    #[error("{count} speakers exceed the supported maximum of {max}")]
    Capacity { count: usize, max: usize },
    #[error("segment {index}: {reason}")]
    InvalidSegment { index: usize, reason: String },
    #[error("speaker {speaker:?} in {recording:?} overlaps itself at {at}s")]
    SelfOverlap {
        recording: String,
        speaker: String,
        at: f64,
    },
    #[error("annotation line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

/// One speaker turn from oracle diarization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiarizationSegment {
    pub recording_id: String,
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default)]
    pub text: String,
}

impl DiarizationSegment {
    pub fn new(recording: &str, speaker: &str, start_s: f64, end_s: f64, text: &str) -> Self {
        DiarizationSegment {
            recording_id: recording.to_string(),
            speaker_id: speaker.to_string(),
            start_s,
            end_s,
            text: text.to_string(),
        }
    }

    /// Half-open membership `[start, end)`.
    pub fn contains(&self, t: f64) -> bool {
        self.start_s <= t && t < self.end_s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StnoClass {
    Silence = 0,
    Target = 1,
    NonTarget = 2,
    Overlap = 3,
}

impl StnoClass {
    pub const ALL: [StnoClass; 4] = [
        StnoClass::Silence,
        StnoClass::Target,
        StnoClass::NonTarget,
        StnoClass::Overlap,
    ];

    pub fn from_activity(target: bool, other: bool) -> Self {
        match (target, other) {
            (false, false) => StnoClass::Silence,
            (true, false) => StnoClass::Target,
            (false, true) => StnoClass::NonTarget,
            (true, true) => StnoClass::Overlap,
        }
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut row = [0.0; 4];
        row[self as usize] = 1.0;
        row
    }
}

/// Per-frame class probabilities `(p_S, p_T, p_N, p_O)` for one speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct StnoMask {
    pub speaker_index: usize,
    pub probs: Vec<[f64; 4]>,
    pub frame_duration_s: f64,
}

impl StnoMask {
    pub fn frames(&self) -> usize {
        self.probs.len()
    }

    /// Arg-max class of every frame.
    pub fn classes(&self) -> Vec<StnoClass> {
        self.probs
            .iter()
            .map(|row| {
                let mut best = 0;
                for c in 1..4 {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                StnoClass::ALL[best]
            })
            .collect()
    }

    /// Probability that the target speaks at frame `t` (`p_T + p_O`).
    pub fn target_activity(&self, t: usize) -> f64 {
        self.probs[t][1] + self.probs[t][3]
    }
}

/// Reject malformed segments and per-speaker self-overlap.
pub fn validate_segments(segments: &[DiarizationSegment]) -> Result<(), StnoError> {
    let mut by_speaker: BTreeMap<(&str, &str), Vec<(f64, f64)>> = BTreeMap::new();
    for (index, s) in segments.iter().enumerate() {
        if !(s.start_s.is_finite() && s.end_s.is_finite()) || s.start_s < 0.0 {
            return Err(StnoError::InvalidSegment {
                index,
                reason: format!("bad times [{}, {})", s.start_s, s.end_s),
            });
        }
        if s.end_s <= s.start_s {
            return Err(StnoError::InvalidSegment {
                index,
                reason: format!("end {} not after start {}", s.end_s, s.start_s),
            });
        }
        by_speaker
            .entry((&s.recording_id, &s.speaker_id))
            .or_default()
            .push((s.start_s, s.end_s));
    }
    for ((rec, spk), mut spans) in by_speaker {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(StnoError::SelfOverlap {
                    recording: rec.to_string(),
                    speaker: spk.to_string(),
                    at: w[1].0,
                });
            }
        }
    }
    Ok(())
}

/// Speakers ordered by first onset, ties broken lexicographically.
pub fn speaker_order(segments: &[DiarizationSegment]) -> Vec<String> {
    let mut first: BTreeMap<&str, f64> = BTreeMap::new();
    for s in segments {
        let e = first.entry(&s.speaker_id).or_insert(s.start_s);
        if s.start_s < *e {
            *e = s.start_s;
        }
    }
    let mut order: Vec<(&str, f64)> = first.into_iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    order.into_iter().map(|(s, _)| s.to_string()).collect()
}

fn check_window(window: (f64, f64), frames: usize, frame_duration_s: f64) -> Result<(), StnoError> {
    let window_s = window.1 - window.0;
    if (frames as f64 * frame_duration_s - window_s).abs() > 0.5 * frame_duration_s {
        return Err(StnoError::FrameMismatch {
            frames,
            frame_duration_s,
            window_s,
        });
    }
    Ok(())
}

fn classify(
    segments: &[DiarizationSegment],
    target: &str,
    window: (f64, f64),
    frames: usize,
    frame_duration_s: f64,
) -> Vec<StnoClass> {
    (0..frames)
        .map(|t| {
            let mid = window.0 + (t as f64 + 0.5) * frame_duration_s;
            let mut target_on = false;
            let mut other_on = false;
            for s in segments.iter().filter(|s| s.contains(mid)) {
                if s.speaker_id == target {
                    target_on = true;
                } else {
                    other_on = true;
                }
            }
            StnoClass::from_activity(target_on, other_on)
        })
        .collect()
}

/// STNO mask of `target` over `frames` encoder frames starting at
/// `window.0`. Frames are classified by whether their midpoint falls in a
/// segment; frames past the annotations are silence.
pub fn compute_stno(
    segments: &[DiarizationSegment],
    inventory: &[String],
    target: &str,
    window: (f64, f64),
    frames: usize,
    frame_duration_s: f64,
) -> Result<StnoMask, StnoError> {
    if inventory.is_empty() {
        return Err(StnoError::EmptyInventory);
    }
    let Some(speaker_index) = inventory.iter().position(|s| s == target) else {
        return Err(StnoError::UnknownTarget(target.to_string()));
    };
    check_window(window, frames, frame_duration_s)?;
    let probs = classify(segments, target, window, frames, frame_duration_s)
        .into_iter()
        .map(StnoClass::one_hot)
        .collect();
    Ok(StnoMask {
        speaker_index,
        probs,
        frame_duration_s,
    })
}

/// One mask per speaker in `speaker_order`, indexed by list position.
pub fn stno_for_all_speakers(
    segments: &[DiarizationSegment],
    speaker_order: &[String],
    max_speakers: usize,
    window: (f64, f64),
    frames: usize,
    frame_duration_s: f64,
) -> Result<Vec<StnoMask>, StnoError> {
    if speaker_order.len() > max_speakers {
        return Err(StnoError::Capacity {
            count: speaker_order.len(),
            max: max_speakers,
        });
    }
    speaker_order
        .iter()
        .map(|spk| compute_stno(segments, speaker_order, spk, window, frames, frame_duration_s))
        .collect()
}

/// Distinct recording ids in file order.
pub fn recordings(segments: &[DiarizationSegment]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    segments
        .iter()
        .filter(|s| seen.insert(s.recording_id.clone()))
        .map(|s| s.recording_id.clone())
        .collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<DiarizationSegment>, StnoError> {
    let file = std::fs::File::open(path).map_err(|e| StnoError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StnoError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: DiarizationSegment = serde_json::from_str(&line).map_err(|e| StnoError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(seg);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, segments: &[DiarizationSegment]) -> Result<(), StnoError> {
    let mut f = std::fs::File::create(path).map_err(|e| StnoError::Io(format!("{}: {e}", path.display())))?;
    for s in segments {
        let line = serde_json::to_string(s).map_err(|e| StnoError::Io(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| StnoError::Io(e.to_string()))?;
    }
    Ok(())
}
