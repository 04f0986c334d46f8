//! Joint vocabulary: standard word tokens, speaker-timestamp tokens and a
//! handful of specials.
//!
//! Flat id layout:
//!
//! ```text
//! [0, |V|)                      standard tokens
//! [|V|, |V| + |U|·|W|)          speaker-timestamps, id = |V| + u·|W| + w
//! [|V| + |U|·|W|, + 4)          PAD, BOS, EOS, TRANSCRIBE
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("time {t}s outside [0, {window_s}]")]
    TimeOutOfRange { t: f64, window_s: f64 },
    #[error("token id {0} out of range")]
    BadId(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("vocabulary: {0}")]
    Invalid(String),
}

pub const NUM_SPECIALS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    Transcribe = 3,
}

impl Special {
    fn text(self) -> &'static str {
        match self {
            Special::Pad => "<|pad|>",
            Special::Bos => "<|startoftranscript|>",
            Special::Eos => "<|endoftext|>",
            Special::Transcribe => "<|transcribe|>",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpeakerTimestamp {
    pub speaker: usize,
    pub time: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Word(usize),
    SpeakerTime(SpeakerTimestamp),
    Special(Special),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    num_speakers: usize,
    num_timestamps: usize,
    window_s: f64,
}

impl Vocabulary {
    pub fn new(
        words: Vec<String>,
        num_speakers: usize,
        num_timestamps: usize,
        window_s: f64,
    ) -> Result<Self, VocabError> {
        if num_speakers == 0 || num_timestamps < 2 || !(window_s > 0.0) {
            return Err(VocabError::Invalid(format!(
                "need ≥1 speaker, ≥2 timestamps and a positive window (got {num_speakers}, {num_timestamps}, {window_s})"
            )));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) || w.starts_with('#') || w.starts_with("<|") {
                return Err(VocabError::Invalid(format!("bad word token {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(VocabError::Invalid(format!("duplicate word {w:?}")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            num_speakers,
            num_timestamps,
            window_s,
        })
    }

    /// `n` synthetic words named `w00`, `w01`, ...
    pub fn synthetic(n: usize, num_speakers: usize, num_timestamps: usize, window_s: f64) -> Result<Self, VocabError> {
        let width = n.saturating_sub(1).to_string().len().max(2);
        let words = (0..n).map(|i| format!("w{i:0width$}")).collect();
        Self::new(words, num_speakers, num_timestamps, window_s)
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    pub fn num_timestamps(&self) -> usize {
        self.num_timestamps
    }

    pub fn window_s(&self) -> f64 {
        self.window_s
    }

    pub fn resolution_s(&self) -> f64 {
        self.window_s / (self.num_timestamps - 1) as f64
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn num_speaker_timestamps(&self) -> usize {
        self.num_speakers * self.num_timestamps
    }

    pub fn size(&self) -> usize {
        self.num_words() + self.num_speaker_timestamps() + NUM_SPECIALS
    }

    pub fn special(&self, s: Special) -> usize {
        self.num_words() + self.num_speaker_timestamps() + s as usize
    }

    pub fn bos(&self) -> usize {
        self.special(Special::Bos)
    }

    pub fn eos(&self) -> usize {
        self.special(Special::Eos)
    }

    pub fn transcribe(&self) -> usize {
        self.special(Special::Transcribe)
    }

    /// Decoder prompt: BOS followed by the transcribe task token.
    pub fn prompt(&self) -> Vec<usize> {
        vec![self.bos(), self.transcribe()]
    }

    pub fn speaker_time_id(&self, speaker: usize, time: usize) -> usize {
        debug_assert!(speaker < self.num_speakers && time < self.num_timestamps);
        self.num_words() + speaker * self.num_timestamps + time
    }

    pub fn word_id(&self, word: &str) -> Result<usize, VocabError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Whitespace tokenization into word ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    pub fn token(&self, id: usize) -> Result<Token, VocabError> {
        let v = self.num_words();
        let st = self.num_speaker_timestamps();
        if id < v {
            Ok(Token::Word(id))
        } else if id < v + st {
            let k = id - v;
            Ok(Token::SpeakerTime(SpeakerTimestamp {
                speaker: k / self.num_timestamps,
                time: k % self.num_timestamps,
            }))
        } else if id < v + st + NUM_SPECIALS {
            Ok(Token::Special(match id - v - st {
                0 => Special::Pad,
                1 => Special::Bos,
                2 => Special::Eos,
                _ => Special::Transcribe,
            }))
        } else {
            Err(VocabError::BadId(id))
        }
    }

    pub fn id(&self, token: Token) -> usize {
        match token {
            Token::Word(w) => w,
            Token::SpeakerTime(st) => self.speaker_time_id(st.speaker, st.time),
            Token::Special(s) => self.special(s),
        }
    }

    pub fn is_speaker_time(&self, id: usize) -> bool {
        id >= self.num_words() && id < self.num_words() + self.num_speaker_timestamps()
    }

    /// Nearest grid index, ties rounding up.
    pub fn quantize_time(&self, t: f64) -> Result<usize, VocabError> {
        // Allow float fuzz at the window edge.
        if !(t >= -1e-9 && t <= self.window_s + 1e-9) {
            return Err(VocabError::TimeOutOfRange {
                t,
                window_s: self.window_s,
            });
        }
        let x = t.max(0.0) / self.resolution_s();
        let idx = (x + 0.5 + 1e-9).floor() as usize;
        Ok(idx.min(self.num_timestamps - 1))
    }

    pub fn time_of(&self, index: usize) -> f64 {
        if index + 1 >= self.num_timestamps {
            self.window_s
        } else {
            self.window_s * index as f64 / (self.num_timestamps - 1) as f64
        }
    }

    /// Human-readable rendering, e.g. `<|s0_2.20|>`.
    pub fn render_token(&self, id: usize) -> String {
        match self.token(id) {
            Ok(Token::Word(w)) => self.words[w].clone(),
            Ok(Token::SpeakerTime(st)) => format!("<|s{}_{:.2}|>", st.speaker, self.time_of(st.time)),
            Ok(Token::Special(s)) => s.text().to_string(),
            Err(_) => format!("<|invalid:{id}|>"),
        }
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.render_token(id)).collect::<Vec<_>>().join(" ")
    }

    /// Plain-text form: one word per line, then a `#key value` header block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        let _ = writeln!(s, "#speakers {}", self.num_speakers);
        let _ = writeln!(s, "#timestamps {}", self.num_timestamps);
        let _ = writeln!(s, "#window_s {}", self.window_s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut words = Vec::new();
        let (mut spk, mut ts, mut win) = (None, None, None);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                let (Some(k), Some(v)) = (it.next(), it.next()) else {
                    return Err(VocabError::Invalid(format!("bad header line {line:?}")));
                };
                let bad = || VocabError::Invalid(format!("bad value in {line:?}"));
                match k {
                    "speakers" => spk = Some(v.parse::<usize>().map_err(|_| bad())?),
                    "timestamps" => ts = Some(v.parse::<usize>().map_err(|_| bad())?),
                    "window_s" => win = Some(v.parse::<f64>().map_err(|_| bad())?),
                    _ => return Err(VocabError::Invalid(format!("unknown header key {k:?}"))),
                }
            } else {
                words.push(line.to_string());
            }
        }
        match (spk, ts, win) {
            (Some(u), Some(w), Some(s)) => Self::new(words, u, w, s),
            _ => Err(VocabError::Invalid("missing #speakers/#timestamps/#window_s header".into())),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|e| VocabError::Invalid(e.to_string()))?;
        Self::from_text(&text)
    }
}
