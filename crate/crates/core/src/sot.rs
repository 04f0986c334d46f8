//! Serialized output: speaker-attributed segments ⇄ a single token stream.
//!
//! Each segment is written as `<|s{u}_{start}|> words… <|s{u}_{end}|>`.
//! Segments are ordered by onset (ties: lower speaker index first). One
//! speaker's timestamps never go backwards; switching speaker may roll back
//! in time, which is how overlap is represented.

use std::cmp::Ordering;

use thiserror::Error;

use crate::vocab::{Special, SpeakerTimestamp, Token, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct AttributedSegment {
    pub speaker_index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub words: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SerializedTranscript(pub Vec<usize>);

impl SerializedTranscript {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        vocab.render(&self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SerializeError {
    #[error("segment {index} spans [{start_s}, {end_s}]s outside the {window_s}s window; split the recording into windows first")]
    OutsideWindow {
        index: usize,
        start_s: f64,
        end_s: f64,
        window_s: f64,
    },
    #[error("segment {index}: end {end_s} before start {start_s}")]
    Reversed { index: usize, start_s: f64, end_s: f64 },
    #[error("segment {index}: speaker {speaker} exceeds capacity {max}")]
    Speaker { index: usize, speaker: usize, max: usize },
    #[error("segment {index}: token {token} is not a word")]
    NotAWord { index: usize, token: usize },
    #[error("speaker {speaker} overlaps itself at {at}s")]
    SelfOverlap { speaker: usize, at: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    DanglingBegin,
    SpeakerMismatch { begin: usize, end: usize },
    WordOutsideSegment,
    UnexpectedSpecial,
    InvalidId,
    EndBeforeBegin,
}

#[derive(Debug, Error, PartialEq)]
#[error("malformed transcript at token {position}: {kind:?}")]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Structure(ParseErrorKind),
    Monotonicity,
    Fifo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

fn fifo_cmp(a: &(usize, usize), b: &(usize, usize)) -> Ordering {
    a.0.cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Incremental checker for the stream grammar and ordering constraints.
/// Used by the validator and by constrained decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamState {
    /// `(speaker, begin time)` of the currently open segment.
    open: Option<(usize, usize)>,
    /// `(time, speaker)` of the most recent segment onset.
    last_onset: Option<(usize, usize)>,
    /// Latest timestamp emitted per speaker.
    last_time: Vec<Option<usize>>,
}

impl StreamState {
    pub fn new(num_speakers: usize) -> Self {
        StreamState {
            open: None,
            last_onset: None,
            last_time: vec![None; num_speakers],
        }
    }

    pub fn in_segment(&self) -> bool {
        self.open.is_some()
    }

    pub fn open_segment(&self) -> Option<(usize, usize)> {
        self.open
    }

    pub fn last_time(&self, speaker: usize) -> Option<usize> {
        self.last_time.get(speaker).copied().flatten()
    }

    /// Every constraint `token` would break if appended now.
    pub fn check(&self, token: Token) -> Vec<ViolationKind> {
        let mut out = Vec::new();
        match (token, self.open) {
            (Token::Word(_), None) => out.push(ViolationKind::Structure(ParseErrorKind::WordOutsideSegment)),
            (Token::Word(_), Some(_)) => {}
            (Token::Special(Special::Eos), None) => {}
            (Token::Special(Special::Eos), Some(_)) => {
                out.push(ViolationKind::Structure(ParseErrorKind::DanglingBegin))
            }
            (Token::Special(_), _) => out.push(ViolationKind::Structure(ParseErrorKind::UnexpectedSpecial)),
            (Token::SpeakerTime(st), None) => {
                if let Some(prev) = self.last_onset {
                    if fifo_cmp(&(st.time, st.speaker), &prev) == Ordering::Less {
                        out.push(ViolationKind::Fifo);
                    }
                }
                if self.last_time(st.speaker).is_some_and(|t| st.time < t) {
                    out.push(ViolationKind::Monotonicity);
                }
            }
            (Token::SpeakerTime(st), Some((spk, begin))) => {
                if st.speaker != spk {
                    out.push(ViolationKind::Structure(ParseErrorKind::SpeakerMismatch {
                        begin: spk,
                        end: st.speaker,
                    }));
                } else if st.time < begin {
                    out.push(ViolationKind::Monotonicity);
                }
            }
        }
        out
    }

    pub fn allows(&self, token: Token) -> bool {
        self.check(token).is_empty()
    }

    /// Advance past `token` regardless of violations.
    pub fn push(&mut self, token: Token) {
        match (token, self.open) {
            (Token::SpeakerTime(st), None) => {
                self.open = Some((st.speaker, st.time));
                self.last_onset = Some((st.time, st.speaker));
                if let Some(t) = self.last_time.get_mut(st.speaker) {
                    *t = Some(t.map_or(st.time, |p| p.max(st.time)));
                }
            }
            (Token::SpeakerTime(st), Some((spk, _))) => {
                self.open = None;
                if st.speaker == spk {
                    if let Some(t) = self.last_time.get_mut(spk) {
                        *t = Some(t.map_or(st.time, |p| p.max(st.time)));
                    }
                }
            }
            _ => {}
        }
    }
}

fn check_segments(segments: &[AttributedSegment], vocab: &Vocabulary) -> Result<(), SerializeError> {
    let window_s = vocab.window_s();
    for (index, s) in segments.iter().enumerate() {
        if s.speaker_index >= vocab.num_speakers() {
            return Err(SerializeError::Speaker {
                index,
                speaker: s.speaker_index,
                max: vocab.num_speakers(),
            });
        }
        if s.end_s < s.start_s {
            return Err(SerializeError::Reversed {
                index,
                start_s: s.start_s,
                end_s: s.end_s,
            });
        }
        if s.start_s < -1e-9 || s.end_s > window_s + 1e-9 {
            return Err(SerializeError::OutsideWindow {
                index,
                start_s: s.start_s,
                end_s: s.end_s,
                window_s,
            });
        }
        if let Some(&token) = s.words.iter().find(|&&w| w >= vocab.num_words()) {
            return Err(SerializeError::NotAWord { index, token });
        }
    }
    Ok(())
}

/// Quantize and sort segments into serialization (FIFO) order.
pub fn fifo_normalize(
    segments: &[AttributedSegment],
    vocab: &Vocabulary,
) -> Result<Vec<AttributedSegment>, SerializeError> {
    check_segments(segments, vocab)?;
    let mut out: Vec<(usize, usize, AttributedSegment)> = segments
        .iter()
        .map(|s| {
            // Range checked above.
            let a = vocab.quantize_time(s.start_s.clamp(0.0, vocab.window_s())).unwrap();
            let b = vocab.quantize_time(s.end_s.clamp(0.0, vocab.window_s())).unwrap();
            let seg = AttributedSegment {
                speaker_index: s.speaker_index,
                start_s: vocab.time_of(a),
                end_s: vocab.time_of(b),
                words: s.words.clone(),
            };
            (a, b, seg)
        })
        .collect();
    out.sort_by(|x, y| x.0.cmp(&y.0).then(x.2.speaker_index.cmp(&y.2.speaker_index)));
    let mut last_end: Vec<Option<(usize, f64)>> = vec![None; vocab.num_speakers()];
    for (a, b, s) in &out {
        if let Some((end, _)) = last_end[s.speaker_index] {
            if *a < end {
                return Err(SerializeError::SelfOverlap {
                    speaker: s.speaker_index,
                    at: s.start_s,
                });
            }
        }
        last_end[s.speaker_index] = Some((*b, s.end_s));
    }
    Ok(out.into_iter().map(|(_, _, s)| s).collect())
}

/// Serialize segments into a token stream in FIFO order.
pub fn serialize(segments: &[AttributedSegment], vocab: &Vocabulary) -> Result<SerializedTranscript, SerializeError> {
    let ordered = fifo_normalize(segments, vocab)?;
    let mut ids = Vec::new();
    for s in &ordered {
        let a = vocab.quantize_time(s.start_s).unwrap();
        let b = vocab.quantize_time(s.end_s).unwrap();
        ids.push(vocab.speaker_time_id(s.speaker_index, a));
        ids.extend_from_slice(&s.words);
        ids.push(vocab.speaker_time_id(s.speaker_index, b));
    }
    Ok(SerializedTranscript(ids))
}

/// Parse a token stream back into segments. Only the segment grammar is
/// enforced here; ordering constraints are reported by [`validate_stream`].
pub fn deserialize(tokens: &SerializedTranscript, vocab: &Vocabulary) -> Result<Vec<AttributedSegment>, ParseError> {
    let mut out = Vec::new();
    let mut open: Option<(usize, SpeakerTimestamp, Vec<usize>)> = None;
    for (position, &id) in tokens.0.iter().enumerate() {
        let err = |kind| ParseError { position, kind };
        let token = vocab.token(id).map_err(|_| err(ParseErrorKind::InvalidId))?;
        match (token, open.take()) {
            (Token::Special(_), _) => return Err(err(ParseErrorKind::UnexpectedSpecial)),
            (Token::Word(_), None) => return Err(err(ParseErrorKind::WordOutsideSegment)),
            (Token::Word(w), Some((p, st, mut words))) => {
                words.push(w);
                open = Some((p, st, words));
            }
            (Token::SpeakerTime(st), None) => open = Some((position, st, Vec::new())),
            (Token::SpeakerTime(end), Some((_, begin, words))) => {
                if end.speaker != begin.speaker {
                    return Err(err(ParseErrorKind::SpeakerMismatch {
                        begin: begin.speaker,
                        end: end.speaker,
                    }));
                }
                if end.time < begin.time {
                    return Err(err(ParseErrorKind::EndBeforeBegin));
                }
                out.push(AttributedSegment {
                    speaker_index: begin.speaker,
                    start_s: vocab.time_of(begin.time),
                    end_s: vocab.time_of(end.time),
                    words,
                });
            }
        }
    }
    if let Some((position, _, _)) = open {
        return Err(ParseError {
            position,
            kind: ParseErrorKind::DanglingBegin,
        });
    }
    Ok(out)
}

/// All constraint violations in `tokens`; empty iff the stream is a valid
/// serialized transcript.
pub fn validate_stream(tokens: &SerializedTranscript, vocab: &Vocabulary) -> Vec<Violation> {
    let mut state = StreamState::new(vocab.num_speakers());
    let mut out = Vec::new();
    let mut open_at = None;
    for (index, &id) in tokens.0.iter().enumerate() {
        let Ok(token) = vocab.token(id) else {
            out.push(Violation {
                index,
                kind: ViolationKind::Structure(ParseErrorKind::InvalidId),
            });
            continue;
        };
        // EOS never belongs inside the stream body.
        if token == Token::Special(Special::Eos) {
            out.push(Violation {
                index,
                kind: ViolationKind::Structure(ParseErrorKind::UnexpectedSpecial),
            });
            continue;
        }
        out.extend(state.check(token).into_iter().map(|kind| Violation { index, kind }));
        if let Token::SpeakerTime(_) = token {
            open_at = if state.in_segment() { None } else { Some(index) };
        }
        state.push(token);
    }
    if let (true, Some(index)) = (state.in_segment(), open_at) {
        out.push(Violation {
            index,
            kind: ViolationKind::Structure(ParseErrorKind::DanglingBegin),
        });
    }
    out
}
