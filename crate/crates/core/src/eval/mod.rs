//! Speaker-attributed scoring: cpWER with an optimal speaker assignment,
//! plus a split of cross-speaker errors into leakage and omission.

mod align;
mod hungarian;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use align::{edit_distance, wer_align, Alignment, EditOp};
pub use hungarian::{assignment_cost, min_cost_assignment};

use crate::stno::DiarizationSegment;

/// Seconds of slack when pairing a deleted word with an insertion in
/// another speaker's stream.
pub const LEAKAGE_GATE_S: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Word {
    pub text: String,
    /// Span of the segment the word came from, if known.
    pub span: Option<(f64, f64)>,
}

impl Word {
    pub fn new(text: &str) -> Self {
        Word {
            text: text.to_string(),
            span: None,
        }
    }
}

/// Speaker label → that speaker's words in time order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranscriptSet {
    pub streams: BTreeMap<String, Vec<Word>>,
}

/// Lowercase and drop punctuation; words that become empty vanish.
pub fn normalize_word(w: &str) -> String {
    w.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect()
}

impl TranscriptSet {
    /// Untimed streams from whitespace-separated text per speaker.
    pub fn from_text<'a>(streams: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut out = TranscriptSet::default();
        for (label, text) in streams {
            out.streams
                .entry(label.to_string())
                .or_default()
                .extend(text.split_whitespace().map(Word::new));
        }
        out
    }

    /// Timed streams from segments of one recording, concatenated per
    /// speaker in start-time order.
    pub fn from_segments(segments: &[&DiarizationSegment], normalize: bool) -> Self {
        let mut sorted: Vec<&DiarizationSegment> = segments.to_vec();
        sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));
        let mut out = TranscriptSet::default();
        for s in sorted {
            let stream = out.streams.entry(s.speaker_id.clone()).or_default();
            for w in s.text.split_whitespace() {
                let text = if normalize { normalize_word(w) } else { w.to_string() };
                if !text.is_empty() {
                    stream.push(Word {
                        text,
                        span: Some((s.start_s, s.end_s)),
                    });
                }
            }
        }
        out
    }

    pub fn num_words(&self) -> usize {
        self.streams.values().map(Vec::len).sum()
    }

    fn texts(&self, label: Option<&str>) -> Vec<&str> {
        label
            .and_then(|l| self.streams.get(l))
            .map(|ws| ws.iter().map(|w| w.text.as_str()).collect())
            .unwrap_or_default()
    }
}

/// One reference/hypothesis pairing; `None` stands for an empty padding
/// stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub reference: Option<String>,
    pub hypothesis: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ref_words: usize,
    /// `None` when the reference has no words.
    pub cpwer: Option<f64>,
    pub empty_reference: bool,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub leakage: usize,
    pub omission: usize,
    pub leakage_pct: f64,
    pub omission_pct: f64,
    pub assignment: Vec<Pairing>,
    /// Leakage was matched on word identity alone for lack of timings.
    pub timing_fallback: bool,
}

impl EvalReport {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

/// Cross-speaker split of deletions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Decomposition {
    pub leakage: usize,
    pub omission: usize,
    pub timing_fallback: bool,
}

fn labels_padded(set: &TranscriptSet, n: usize) -> Vec<Option<&str>> {
    let mut v: Vec<Option<&str>> = set.streams.keys().map(|k| Some(k.as_str())).collect();
    v.resize(n, None);
    v
}

/// Optimal reference→hypothesis assignment by total edit distance.
pub fn best_assignment(reference: &TranscriptSet, hypothesis: &TranscriptSet) -> Vec<Pairing> {
    let n = reference.streams.len().max(hypothesis.streams.len());
    let refs = labels_padded(reference, n);
    let hyps = labels_padded(hypothesis, n);
    let cost: Vec<Vec<i64>> = refs
        .iter()
        .map(|r| {
            let rw = reference.texts(*r);
            hyps.iter()
                .map(|h| edit_distance(&rw, &hypothesis.texts(*h)) as i64)
                .collect()
        })
        .collect();
    let chosen = min_cost_assignment(&cost);
    refs.iter()
        .zip(chosen)
        .map(|(r, j)| Pairing {
            reference: r.map(str::to_string),
            hypothesis: hyps[j].map(str::to_string),
        })
        .collect()
}

fn gate(a: (f64, f64), b: (f64, f64)) -> bool {
    b.0 <= a.1 + LEAKAGE_GATE_S && b.1 >= a.0 - LEAKAGE_GATE_S
}

/// Pair each deleted reference word with an identical, still unpaired
/// inserted word in a different hypothesis stream whose segment lies
/// within the time gate. Pairs are leakage; remaining deletions are
/// omissions. Deletions are visited earliest first and take the earliest
/// eligible insertion.
pub fn error_decomposition(
    reference: &TranscriptSet,
    hypothesis: &TranscriptSet,
    assignment: &[Pairing],
) -> Decomposition {
    struct Del<'a> {
        word: &'a Word,
        hyp: Option<&'a str>,
        key: (f64, &'a str, usize),
    }
    struct Ins<'a> {
        word: &'a Word,
        stream: &'a str,
        key: (f64, &'a str, usize),
    }
    let mut dels = Vec::new();
    let mut inss = Vec::new();
    let mut timing_fallback = false;
    let empty = Vec::new();
    for p in assignment {
        let rws = p.reference.as_ref().and_then(|l| reference.streams.get(l)).unwrap_or(&empty);
        let hws = p.hypothesis.as_ref().and_then(|l| hypothesis.streams.get(l)).unwrap_or(&empty);
        let rt: Vec<&str> = rws.iter().map(|w| w.text.as_str()).collect();
        let ht: Vec<&str> = hws.iter().map(|w| w.text.as_str()).collect();
        for op in wer_align(&rt, &ht).ops {
            match op {
                EditOp::Del(i) => dels.push(Del {
                    word: &rws[i],
                    hyp: p.hypothesis.as_deref(),
                    key: (
                        rws[i].span.map_or(0.0, |s| s.0),
                        p.reference.as_deref().unwrap_or(""),
                        i,
                    ),
                }),
                EditOp::Ins(j) => {
                    let stream = p.hypothesis.as_deref().expect("insertions come from a real stream");
                    inss.push(Ins {
                        word: &hws[j],
                        stream,
                        key: (hws[j].span.map_or(0.0, |s| s.0), stream, j),
                    })
                }
                _ => {}
            }
        }
    }
    let order = |a: &(f64, &str, usize), b: &(f64, &str, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2))
    };
    dels.sort_by(|a, b| order(&a.key, &b.key));
    inss.sort_by(|a, b| order(&a.key, &b.key));
    let mut used = vec![false; inss.len()];
    let mut out = Decomposition::default();
    for d in &dels {
        let found = inss.iter().enumerate().position(|(k, ins)| {
            if used[k] || Some(ins.stream) == d.hyp || ins.word.text != d.word.text {
                return false;
            }
            match (d.word.span, ins.word.span) {
                (Some(a), Some(b)) => gate(a, b),
                _ => {
                    timing_fallback = true;
                    true
                }
            }
        });
        match found {
            Some(k) => {
                used[k] = true;
                out.leakage += 1;
            }
            None => out.omission += 1,
        }
    }
    out.timing_fallback = timing_fallback;
    out
}

/// Concatenated minimum-permutation WER with its error breakdown.
pub fn cpwer(reference: &TranscriptSet, hypothesis: &TranscriptSet) -> EvalReport {
    let assignment = best_assignment(reference, hypothesis);
    let (mut sub, mut del, mut ins) = (0, 0, 0);
    for p in &assignment {
        let a = wer_align(&reference.texts(p.reference.as_deref()), &hypothesis.texts(p.hypothesis.as_deref()));
        sub += a.sub;
        del += a.del;
        ins += a.ins;
    }
    let dec = error_decomposition(reference, hypothesis, &assignment);
    finish(reference.num_words(), sub, del, ins, dec, assignment)
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

fn finish(ref_words: usize, sub: usize, del: usize, ins: usize, dec: Decomposition, assignment: Vec<Pairing>) -> EvalReport {
    EvalReport {
        ref_words,
        cpwer: (ref_words > 0).then(|| (sub + del + ins) as f64 / ref_words as f64),
        empty_reference: ref_words == 0,
        sub,
        del,
        ins,
        leakage: dec.leakage,
        omission: dec.omission,
        leakage_pct: pct(dec.leakage, ref_words),
        omission_pct: pct(dec.omission, ref_words),
        assignment,
        timing_fallback: dec.timing_fallback,
    }
}

/// Corpus-level report: counts are summed over recordings before any
/// ratio is taken.
pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> EvalReport {
    let (mut r, mut s, mut d, mut i) = (0, 0, 0, 0);
    let mut dec = Decomposition::default();
    for rep in reports {
        r += rep.ref_words;
        s += rep.sub;
        d += rep.del;
        i += rep.ins;
        dec.leakage += rep.leakage;
        dec.omission += rep.omission;
        dec.timing_fallback |= rep.timing_fallback;
    }
    finish(r, s, d, i, dec, Vec::new())
}

/// Score hypothesis segments against reference segments, per recording.
/// Recordings are taken from both sides, in reference order first.
pub fn score_segments(
    reference: &[DiarizationSegment],
    hypothesis: &[DiarizationSegment],
    normalize: bool,
) -> Vec<(String, EvalReport)> {
    let mut ids: Vec<&str> = Vec::new();
    for s in reference.iter().chain(hypothesis) {
        if !ids.contains(&s.recording_id.as_str()) {
            ids.push(&s.recording_id);
        }
    }
    ids.into_iter()
        .map(|id| {
            let r: Vec<&DiarizationSegment> = reference.iter().filter(|s| s.recording_id == id).collect();
            let h: Vec<&DiarizationSegment> = hypothesis.iter().filter(|s| s.recording_id == id).collect();
            let rep = cpwer(&TranscriptSet::from_segments(&r, normalize), &TranscriptSet::from_segments(&h, normalize));
            (id.to_string(), rep)
        })
        .collect()
}

pub const REPORT_NOTE: &str = "# all columns in % of reference words; #L and #O reclassify deletions (leakage pairs each with an insertion in another speaker's stream)";

/// Table with columns `recording,cpWER,#S,#D,#I,#L,#O` and a final
/// `all` row aggregated by summing counts.
pub fn report_csv(per_recording: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    writeln!(out, "{REPORT_NOTE}").unwrap();
    writeln!(out, "recording,cpWER,#S,#D,#I,#L,#O").unwrap();
    let total = aggregate(per_recording.iter().map(|(_, r)| r));
    for (id, r) in per_recording.iter().map(|(i, r)| (i.as_str(), r)).chain([("all", &total)]) {
        let cp = r.cpwer.map_or("NA".to_string(), |c| format!("{:.2}", 100.0 * c));
        writeln!(
            out,
            "{id},{cp},{:.2},{:.2},{:.2},{:.2},{:.2}",
            pct(r.sub, r.ref_words),
            pct(r.del, r.ref_words),
            pct(r.ins, r.ref_words),
            r.leakage_pct,
            r.omission_pct
        )
        .unwrap();
    }
    out
}

/// Write `report.csv` and one `<recording>.json` per recording into `dir`.
pub fn write_reports(dir: &Path, per_recording: &[(String, EvalReport)]) -> std::io::Result<EvalReport> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), report_csv(per_recording))?;
    for (id, r) in per_recording {
        std::fs::write(dir.join(format!("{id}.json")), serde_json::to_string_pretty(r).unwrap())?;
    }
    let total = aggregate(per_recording.iter().map(|(_, r)| r));
    std::fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&total).unwrap())?;
    Ok(total)
}

#[cfg(test)]
mod tests;
