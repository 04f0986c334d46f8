//! Speaker masks from a diarization: per frame, whether the target speaker
//! is silent (S), alone (T), absent while others talk (N) or overlapped (O).

use mtasr::stno::{speaker_order, stno_for_all_speakers, DiarizationSegment, StnoClass};

fn main() {
    let segments = vec![
        DiarizationSegment::new("demo", "alice", 0.0, 1.2, "hello there"),
        DiarizationSegment::new("demo", "bob", 0.8, 2.0, "hi"),
        DiarizationSegment::new("demo", "alice", 2.4, 3.0, "bye"),
    ];
    let order = speaker_order(&segments);
    let masks = stno_for_all_speakers(&segments, &order, 4, (0.0, 3.2), 16, 0.2).expect("valid diarization");
    for (spk, mask) in order.iter().zip(&masks) {
        let row: String = mask
            .classes()
            .iter()
            .map(|c| match c {
                StnoClass::Silence => 'S',
                StnoClass::Target => 'T',
                StnoClass::NonTarget => 'N',
                StnoClass::Overlap => 'O',
            })
            .collect();
        println!("{spk:>6} (slot {}): {row}", mask.speaker_index);
    }
}
