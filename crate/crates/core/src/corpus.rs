//! Synthetic multi-talker corpora.
//!
//! Every word has a fixed random feature signature a few encoder frames
//! long. A speaker's stream is the concatenation of its words' signatures
//! at their frame positions; a recording is the sum of all speaker
//! streams plus Gaussian noise. Speakers carry no voice of their own, so
//! the only cue for who said what is the diarization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stno::{read_annotations, write_annotations, DiarizationSegment, StnoClass, StnoError};
use crate::tensor::{read_dump, write_dump, Tensor, TensorError};
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Stno(#[from] StnoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// All speakers start at 0; shorter streams lie inside longer ones.
    LeftAlignedFull,
    /// Turn taking with exponential gaps and occasional overlapping onsets.
    MeetingSparse,
}

impl std::str::FromStr for OverlapMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "left_aligned_full" => Ok(OverlapMode::LeftAlignedFull),
            "meeting_sparse" => Ok(OverlapMode::MeetingSparse),
            _ => Err(format!("unknown overlap mode {s:?}; expected left_aligned_full or meeting_sparse")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub train_recordings: usize,
    pub dev_recordings: usize,
    pub test_recordings: usize,
    pub speakers_min: usize,
    pub speakers_max: usize,
    /// Speaker capacity of the model the corpus is meant for.
    pub max_speakers: usize,
    pub vocab_size: usize,
    pub overlap_mode: OverlapMode,
    pub window_s: f64,
    /// Encoder frame length; features have two rows per encoder frame.
    pub frame_s: f64,
    pub windows_per_recording: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Signature length range in encoder frames.
    pub word_frames_min: usize,
    pub word_frames_max: usize,
    /// Words per utterance (a speaker's whole stream in mixture mode, one
    /// turn in meeting mode).
    pub words_min: usize,
    pub words_max: usize,
    /// Chance of a pause after each word; pauses split segments.
    pub pause_prob: f64,
    pub pause_frames_min: usize,
    pub pause_frames_max: usize,
    /// Mean silence between meeting turns.
    pub gap_mean_s: f64,
    /// Chance that a meeting turn starts before the previous one ends.
    pub overlap_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            train_recordings: 200,
            dev_recordings: 20,
            test_recordings: 40,
            speakers_min: 2,
            speakers_max: 2,
            max_speakers: 8,
            vocab_size: 64,
            overlap_mode: OverlapMode::LeftAlignedFull,
            window_s: 30.0,
            frame_s: 0.2,
            windows_per_recording: 1,
            feature_dim: 16,
            noise_std: 0.1,
            word_frames_min: 2,
            word_frames_max: 4,
            words_min: 3,
            words_max: 8,
            pause_prob: 0.3,
            pause_frames_min: 1,
            pause_frames_max: 3,
            gap_mean_s: 0.4,
            overlap_prob: 0.2,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn frames_per_window(&self) -> usize {
        (self.window_s / self.frame_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        if self.speakers_min == 0 || self.speakers_min > self.speakers_max {
            return fail(format!("speaker range {}..={} is empty", self.speakers_min, self.speakers_max));
        }
        if self.speakers_max > self.max_speakers {
            return fail(format!(
                "speakers_max {} exceeds the speaker capacity {}",
                self.speakers_max, self.max_speakers
            ));
        }
        if !(self.frame_s > 0.0) || !(self.window_s > 0.0) {
            return fail("window_s and frame_s must be positive".into());
        }
        if (self.window_s / self.frame_s - self.frames_per_window() as f64).abs() > 1e-6 {
            return fail(format!("window {}s is not a whole number of {}s frames", self.window_s, self.frame_s));
        }
        if self.windows_per_recording == 0 || self.feature_dim == 0 {
            return fail("windows_per_recording and feature_dim must be positive".into());
        }
        if self.word_frames_min == 0 || self.word_frames_min > self.word_frames_max {
            return fail("bad word length range".into());
        }
        if self.word_frames_max > self.frames_per_window() {
            return fail("a word does not fit into one window".into());
        }
        if self.words_min == 0 || self.words_min > self.words_max {
            return fail("bad words-per-utterance range".into());
        }
        if self.vocab_size < self.words_max {
            return fail(format!(
                "vocab of {} words is too small for utterances of up to {} distinct words",
                self.vocab_size, self.words_max
            ));
        }
        if !(0.0..=1.0).contains(&self.pause_prob) || !(0.0..=1.0).contains(&self.overlap_prob) {
            return fail("probabilities must lie in [0, 1]".into());
        }
        if self.pause_frames_min == 0 || self.pause_frames_min > self.pause_frames_max {
            return fail("bad pause length range".into());
        }
        if !(self.gap_mean_s > 0.0) || !(self.noise_std >= 0.0) {
            return fail("gap_mean_s must be positive and noise_std non-negative".into());
        }
        Ok(())
    }

    /// Vocabulary matching the corpus words for a model with `num_speakers`
    /// and `num_timestamps`.
    pub fn vocabulary(&self, num_speakers: usize, num_timestamps: usize) -> Vocabulary {
        Vocabulary::synthetic(self.vocab_size, num_speakers, num_timestamps, self.window_s).expect("valid sizes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecording {
    pub id: String,
    /// `[2·frames × feature_dim]`.
    pub features: Tensor<f32>,
    pub segments: Vec<DiarizationSegment>,
    /// Speaker labels in the order they were created.
    pub speakers: Vec<String>,
    /// Per-speaker encoder-frame activity used while rendering.
    pub activity: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<SyntheticRecording>,
    pub dev: Vec<SyntheticRecording>,
    pub test: Vec<SyntheticRecording>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[SyntheticRecording]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn mix(a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over a simple combination.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Word signatures, fixed per seed: word `w` is `[2·len_w × feature_dim]`.
pub fn word_signatures(spec: &CorpusSpec) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x5167));
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    (0..spec.vocab_size)
        .map(|_| {
            let len = rng.gen_range(spec.word_frames_min..=spec.word_frames_max);
            let data = (0..2 * len * spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
            Tensor::matrix(2 * len, spec.feature_dim, data).unwrap()
        })
        .collect()
}

/// A placed word: id and start encoder frame.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Placed {
    word: usize,
    frame: usize,
}

struct Turn {
    speaker: usize,
    words: Vec<Placed>,
}

fn word_frames(sigs: &[Tensor<f32>], w: usize) -> usize {
    sigs[w].rows() / 2
}

/// Lay out `n` distinct words from `start`, with random pauses, stopping
/// before `limit`. Returns the placed words and the end frame.
fn lay_out(
    rng: &mut ChaCha8Rng,
    spec: &CorpusSpec,
    sigs: &[Tensor<f32>],
    start: usize,
    limit: usize,
) -> (Vec<Placed>, usize) {
    let n = rng.gen_range(spec.words_min..=spec.words_max);
    let ids: Vec<usize> = rand::seq::index::sample(rng, spec.vocab_size, n).into_vec();
    let mut out = Vec::new();
    let mut cursor = start;
    for (i, &w) in ids.iter().enumerate() {
        if i > 0 && rng.gen_bool(spec.pause_prob) {
            cursor += rng.gen_range(spec.pause_frames_min..=spec.pause_frames_max);
        }
        let len = word_frames(sigs, w);
        if cursor + len > limit {
            break;
        }
        out.push(Placed { word: w, frame: cursor });
        cursor += len;
    }
    let end = out.last().map_or(start, |p| p.frame + word_frames(sigs, p.word));
    (out, end)
}

/// Speech spans of a word layout, split at pauses.
fn spans(words: &[Placed], sigs: &[Tensor<f32>]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for p in words {
        let end = p.frame + word_frames(sigs, p.word);
        match out.last_mut() {
            Some(s) if s.1 == p.frame => s.1 = end,
            _ => out.push((p.frame, end)),
        }
    }
    out
}

/// All speakers start at frame 0. A layout that repeats another speaker's
/// segment exactly is redrawn (a bounded number of times), since identical
/// activity would leave nothing to tell the two speakers apart.
fn left_aligned(rng: &mut ChaCha8Rng, spec: &CorpusSpec, sigs: &[Tensor<f32>], speakers: usize) -> Vec<Turn> {
    const REDRAWS: usize = 20;
    let frames = spec.frames_per_window();
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut turns = Vec::with_capacity(speakers);
    for u in 0..speakers {
        let mut words = Vec::new();
        for _ in 0..REDRAWS {
            words = lay_out(rng, spec, sigs, 0, frames).0;
            if spans(&words, sigs).iter().all(|s| !taken.contains(s)) {
                break;
            }
        }
        taken.extend(spans(&words, sigs));
        turns.push(Turn { speaker: u, words });
    }
    turns
}

fn meeting(rng: &mut ChaCha8Rng, spec: &CorpusSpec, sigs: &[Tensor<f32>], speakers: usize) -> Vec<Turn> {
    let frames = spec.frames_per_window();
    let gap = Exp::new(1.0 / spec.gap_mean_s).unwrap();
    let mut free_at = vec![0usize; speakers];
    let mut unseen: Vec<usize> = (0..speakers).collect();
    unseen.shuffle(rng);
    let mut turns: Vec<Turn> = Vec::new();
    let mut onset = (gap.sample(rng) / spec.frame_s).round() as usize;
    loop {
        let prev = turns.last().map(|t| t.speaker);
        let free: Vec<usize> = (0..speakers)
            .filter(|&u| Some(u) != prev && free_at[u] <= onset)
            .collect();
        let speaker = match unseen.iter().position(|u| free.contains(u)) {
            Some(i) => unseen.remove(i),
            None => match free.choose(rng) {
                Some(&u) => u,
                None => break,
            },
        };
        let (words, end) = lay_out(rng, spec, sigs, onset, frames);
        if words.is_empty() {
            break;
        }
        free_at[speaker] = end;
        let start = words[0].frame;
        turns.push(Turn { speaker, words });
        onset = if end - start > 2 && rng.gen_bool(spec.overlap_prob) {
            rng.gen_range(start + 1..end - 1)
        } else {
            end + (gap.sample(rng) / spec.frame_s).round() as usize
        };
        if onset >= frames {
            break;
        }
    }
    turns
}

/// Split a turn into segments at its pauses.
fn segments_of(turn: &Turn, sigs: &[Tensor<f32>]) -> Vec<(usize, usize, Vec<usize>)> {
    let mut out: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for p in &turn.words {
        let end = p.frame + word_frames(sigs, p.word);
        match out.last_mut() {
            Some(seg) if seg.1 == p.frame => {
                seg.1 = end;
                seg.2.push(p.word);
            }
            _ => out.push((p.frame, end, vec![p.word])),
        }
    }
    out
}

fn render_recording(
    spec: &CorpusSpec,
    sigs: &[Tensor<f32>],
    vocab_words: &[String],
    id: &str,
    rng: &mut ChaCha8Rng,
) -> SyntheticRecording {
    let speakers = rng.gen_range(spec.speakers_min..=spec.speakers_max);
    let labels: Vec<String> = (0..speakers).map(|u| format!("{id}_spk{u}")).collect();
    let frames = spec.frames_per_window();
    let total = frames * spec.windows_per_recording;
    let d = spec.feature_dim;
    let mut features = Tensor::<f32>::zeros(2 * total, d);
    let mut activity = vec![vec![false; total]; speakers];
    let mut segments = Vec::new();
    for k in 0..spec.windows_per_recording {
        let base = k * frames;
        let turns = match spec.overlap_mode {
            OverlapMode::LeftAlignedFull => left_aligned(rng, spec, sigs, speakers),
            OverlapMode::MeetingSparse => meeting(rng, spec, sigs, speakers),
        };
        for turn in &turns {
            for p in &turn.words {
                let sig = &sigs[p.word];
                let row0 = 2 * (base + p.frame);
                for r in 0..sig.rows() {
                    let dst = &mut features.data_mut()[(row0 + r) * d..(row0 + r + 1) * d];
                    dst.iter_mut().zip(sig.row(r)).for_each(|(a, b)| *a += *b);
                }
                for f in p.frame..p.frame + word_frames(sigs, p.word) {
                    activity[turn.speaker][base + f] = true;
                }
            }
            for (a, b, words) in segments_of(turn, sigs) {
                let text: Vec<&str> = words.iter().map(|&w| vocab_words[w].as_str()).collect();
                segments.push(DiarizationSegment::new(
                    id,
                    &labels[turn.speaker],
                    (base + a) as f64 * spec.frame_s,
                    (base + b) as f64 * spec.frame_s,
                    &text.join(" "),
                ));
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_std as f32).unwrap();
        features.data_mut().iter_mut().for_each(|x| *x += noise.sample(rng));
    }
    segments.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then_with(|| a.speaker_id.cmp(&b.speaker_id))
    });
    SyntheticRecording {
        id: id.to_string(),
        features,
        segments,
        speakers: labels,
        activity,
    }
}

/// Generate all three splits. Each recording has its own RNG stream, so
/// any recording can be regenerated alone.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let sigs = word_signatures(spec);
    let words = Vocabulary::synthetic(spec.vocab_size, 1, 2, spec.window_s)
        .expect("valid vocab")
        .words()
        .to_vec();
    let make = |split: usize, n: usize| -> Vec<SyntheticRecording> {
        (0..n)
            .map(|i| {
                let id = format!("{}{i:04}", ["tr", "dv", "ts"][split]);
                let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(spec.seed, split as u64 + 1), i as u64));
                render_recording(spec, &sigs, &words, &id, &mut rng)
            })
            .collect()
    };
    Ok(Corpus {
        spec: spec.clone(),
        train: make(0, spec.train_recordings),
        dev: make(1, spec.dev_recordings),
        test: make(2, spec.test_recordings),
    })
}

/// Render a single speaker's words alone, without noise (used to check
/// that mixtures are sums of solo renderings).
pub fn render_solo(spec: &CorpusSpec, recording: &SyntheticRecording, speaker: &str) -> Tensor<f32> {
    let sigs = word_signatures(spec);
    let words = Vocabulary::synthetic(spec.vocab_size, 1, 2, spec.window_s).unwrap();
    let d = spec.feature_dim;
    let mut out = Tensor::zeros(recording.features.rows(), d);
    for s in recording.segments.iter().filter(|s| s.speaker_id == speaker) {
        let mut frame = (s.start_s / spec.frame_s).round() as usize;
        for w in s.text.split_whitespace() {
            let id = words.word_id(w).unwrap();
            let sig = &sigs[id];
            for r in 0..sig.rows() {
                let row = 2 * frame + r;
                let dst = &mut out.data_mut()[row * d..(row + 1) * d];
                dst.iter_mut().zip(sig.row(r)).for_each(|(a, b)| *a += *b);
            }
            frame += word_frames(&sigs, id);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureStats {
    /// Per speaker (creation order): fraction of frames in S, T, N, O.
    pub class_fractions: Vec<[f64; 4]>,
    /// Frames with two or more speakers over frames with at least one.
    pub overlap_ratio: f64,
}

pub fn mixture_snapshot(recording: &SyntheticRecording) -> MixtureStats {
    let frames = recording.activity.first().map_or(0, Vec::len);
    let mut class_fractions = Vec::new();
    for (u, act) in recording.activity.iter().enumerate() {
        let mut counts = [0usize; 4];
        for (t, &on) in act.iter().enumerate() {
            let other = recording.activity.iter().enumerate().any(|(v, a)| v != u && a[t]);
            let c = StnoClass::from_activity(on, other);
            counts[c as usize] += 1;
        }
        class_fractions.push(counts.map(|c| c as f64 / frames.max(1) as f64));
    }
    let (mut any, mut multi) = (0usize, 0usize);
    for t in 0..frames {
        let n = recording.activity.iter().filter(|a| a[t]).count();
        any += usize::from(n >= 1);
        multi += usize::from(n >= 2);
    }
    MixtureStats {
        class_fractions,
        overlap_ratio: if any == 0 { 0.0 } else { multi as f64 / any as f64 },
    }
}

/// Write `spec.json` and, per split, `annotations.jsonl` plus
/// `features/<recording>.bin` with its `.manifest`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&corpus.spec).unwrap()).map_err(|e| io_err(&spec_path, e))?;
    for name in SPLITS {
        let recs = corpus.split(name).unwrap();
        let fdir = dir.join(name).join("features");
        std::fs::create_dir_all(&fdir).map_err(|e| io_err(&fdir, e))?;
        let segs: Vec<DiarizationSegment> = recs.iter().flat_map(|r| r.segments.iter().cloned()).collect();
        write_annotations(&dir.join(name).join("annotations.jsonl"), &segs)?;
        let mut list = String::new();
        for r in recs {
            write_dump(
                &fdir.join(format!("{}.bin", r.id)),
                &fdir.join(format!("{}.manifest", r.id)),
                &[("features", &r.features)],
            )?;
            list.push_str(&r.id);
            list.push('\n');
        }
        let lpath = dir.join(name).join("recordings.txt");
        std::fs::write(&lpath, list).map_err(|e| io_err(&lpath, e))?;
    }
    Ok(())
}

pub fn read_spec(dir: &Path) -> Result<CorpusSpec, CorpusError> {
    let path = dir.join("spec.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

pub fn read_features(path_bin: &Path) -> Result<Tensor<f32>, CorpusError> {
    let manifest = path_bin.with_extension("manifest");
    let mut entries = read_dump::<f32>(path_bin, &manifest)?;
    if entries.len() != 1 {
        return Err(io_err(path_bin, "expected exactly one tensor"));
    }
    Ok(entries.remove(0).tensor)
}

/// Load one split written by [`write_corpus`]. Activity maps are rebuilt
/// from the annotations.
pub fn read_split(dir: &Path, split: &str, spec: &CorpusSpec) -> Result<Vec<SyntheticRecording>, CorpusError> {
    let sdir = dir.join(split);
    let lpath = sdir.join("recordings.txt");
    let list = std::fs::read_to_string(&lpath).map_err(|e| io_err(&lpath, e))?;
    let segs = read_annotations(&sdir.join("annotations.jsonl"))?;
    let mut by_rec: BTreeMap<&str, Vec<DiarizationSegment>> = BTreeMap::new();
    for s in &segs {
        by_rec.entry(&s.recording_id).or_default().push(s.clone());
    }
    list.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|id| {
            let features = read_features(&sdir.join("features").join(format!("{id}.bin")))?;
            let segments = by_rec.remove(id).unwrap_or_default();
            let speakers = crate::stno::speaker_order(&segments);
            let frames = features.rows() / 2;
            let activity = speakers
                .iter()
                .map(|spk| {
                    (0..frames)
                        .map(|t| {
                            let mid = (t as f64 + 0.5) * spec.frame_s;
                            segments.iter().any(|s| &s.speaker_id == spk && s.contains(mid))
                        })
                        .collect()
                })
                .collect();
            Ok(SyntheticRecording {
                id: id.to_string(),
                features,
                segments,
                speakers,
                activity,
            })
        })
        .collect()
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let spec = read_spec(dir)?;
    Ok(Corpus {
        train: read_split(dir, "train", &spec)?,
        dev: read_split(dir, "dev", &spec)?,
        test: read_split(dir, "test", &spec)?,
        spec,
    })
}
