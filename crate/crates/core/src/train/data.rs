use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainError;
use crate::decode::{num_windows, window_inputs};
use crate::model::ModelConfig;
use crate::sot::{deserialize, serialize, validate_stream, AttributedSegment, SerializedTranscript};
use crate::stno::{speaker_order, DiarizationSegment, StnoMask};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// One decoder window ready for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub recording_id: String,
    pub window: usize,
    pub features: Tensor<f32>,
    /// One mask per speaker slot; `masks[i].speaker_index == i`.
    pub masks: Vec<StnoMask>,
    pub target: SerializedTranscript,
    /// Speaker label of every slot.
    pub speakers: Vec<String>,
    /// `permutation[original slot] = current slot`.
    pub permutation: Vec<usize>,
}

/// Split a recording into per-window examples. Speaker slots follow the
/// recording-level speaker order. A segment belongs to the window holding
/// its start and is cut at that window's end; segments without words are
/// left out of the targets.
pub fn examples_from_recording(
    config: &ModelConfig,
    vocab: &Vocabulary,
    recording_id: &str,
    features: &Tensor<f32>,
    segments: &[DiarizationSegment],
) -> Result<Vec<TrainingExample>, TrainError> {
    let segs: Vec<&DiarizationSegment> = segments.iter().filter(|s| s.recording_id == recording_id).collect();
    let owned: Vec<DiarizationSegment> = segs.iter().map(|s| (*s).clone()).collect();
    let order = speaker_order(&owned);
    if order.is_empty() {
        return Ok(Vec::new());
    }
    let n = num_windows(features.rows(), config.input_frames());
    let max_body = config.max_tokens + 1 - vocab.prompt().len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (x, masks) = window_inputs(config, features, &owned, &order, k)?;
        let w0 = k as f64 * config.window_s;
        let w1 = w0 + config.window_s;
        let mut attributed = Vec::new();
        for s in &segs {
            if s.start_s < w0 - 1e-9 || s.start_s >= w1 - 1e-9 || s.text.trim().is_empty() {
                continue;
            }
            let words = vocab
                .tokenize(&s.text)
                .map_err(|e| TrainError::Data(format!("{recording_id}: {e}")))?;
            attributed.push(AttributedSegment {
                speaker_index: order.iter().position(|o| o == &s.speaker_id).unwrap(),
                start_s: s.start_s - w0,
                end_s: s.end_s.min(w1) - w0,
                words,
            });
        }
        let target =
            serialize(&attributed, vocab).map_err(|e| TrainError::Data(format!("{recording_id} window {k}: {e}")))?;
        if target.len() + 1 > max_body {
            return Err(TrainError::Data(format!(
                "{recording_id} window {k}: target of {} tokens exceeds the decoder budget of {}",
                target.len() + 1,
                max_body
            )));
        }
        out.push(TrainingExample {
            recording_id: recording_id.to_string(),
            window: k,
            features: x,
            masks,
            target,
            speakers: order.clone(),
            permutation: (0..order.len()).collect(),
        });
    }
    Ok(out)
}

/// Relabel speaker slots: slot `i` moves to `perm[i]` in the masks, the
/// speaker labels and every speaker-timestamp token of the target. The
/// target is re-serialized so equal-onset ties keep their order rule.
pub fn apply_permutation(example: &TrainingExample, perm: &[usize], vocab: &Vocabulary) -> TrainingExample {
    let n = example.masks.len();
    assert_eq!(perm.len(), n, "permutation size");
    let mut masks = example.masks.clone();
    let mut speakers = example.speakers.clone();
    for i in 0..n {
        let mut m = example.masks[i].clone();
        m.speaker_index = perm[i];
        masks[perm[i]] = m;
        speakers[perm[i]] = example.speakers[i].clone();
    }
    let mut segs = deserialize(&example.target, vocab).expect("training targets are well formed");
    for s in &mut segs {
        s.speaker_index = perm[s.speaker_index];
    }
    let target = serialize(&segs, vocab).expect("relabeling keeps segments valid");
    TrainingExample {
        recording_id: example.recording_id.clone(),
        window: example.window,
        features: example.features.clone(),
        masks,
        target,
        speakers,
        permutation: example.permutation.iter().map(|&p| perm[p]).collect(),
    }
}

/// Uniformly random speaker-slot permutation.
pub fn speaker_order_augment(example: &TrainingExample, vocab: &Vocabulary, rng: &mut impl Rng) -> TrainingExample {
    let mut perm: Vec<usize> = (0..example.masks.len()).collect();
    perm.shuffle(rng);
    apply_permutation(example, &perm, vocab)
}

/// Reference segments of an example in window time, labeled by speaker.
pub fn example_segments(example: &TrainingExample, vocab: &Vocabulary) -> Vec<DiarizationSegment> {
    deserialize(&example.target, vocab)
        .expect("training targets are well formed")
        .into_iter()
        .map(|s| {
            let text: Vec<&str> = s.words.iter().filter_map(|&w| vocab.word(w)).collect();
            DiarizationSegment::new(
                &example.recording_id,
                &example.speakers[s.speaker_index],
                s.start_s,
                s.end_s,
                &text.join(" "),
            )
        })
        .collect()
}

pub fn check_example(example: &TrainingExample, vocab: &Vocabulary) -> Result<(), TrainError> {
    let v = validate_stream(&example.target, vocab);
    if !v.is_empty() {
        return Err(TrainError::InvalidTarget(format!(
            "{} window {}: {:?}",
            example.recording_id, example.window, v[0]
        )));
    }
    for (i, m) in example.masks.iter().enumerate() {
        if m.speaker_index != i {
            return Err(TrainError::InvalidTarget(format!(
                "{} window {}: mask slot {i} carries speaker index {}",
                example.recording_id, example.window, m.speaker_index
            )));
        }
    }
    Ok(())
}

/// Examples of every recording, in order.
pub fn examples_from_recordings(
    config: &ModelConfig,
    recordings: &[crate::corpus::SyntheticRecording],
) -> Result<Vec<TrainingExample>, TrainError> {
    let vocab = config.vocabulary();
    let mut out = Vec::new();
    for r in recordings {
        out.extend(examples_from_recording(config, &vocab, &r.id, &r.features, &r.segments)?);
    }
    Ok(out)
}
