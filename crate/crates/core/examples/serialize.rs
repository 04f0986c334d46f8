//! Serialize speaker-attributed segments into one token stream, check it,
//! and parse it back.

use mtasr::sot::{deserialize, serialize, validate_stream, AttributedSegment};
use mtasr::vocab::Vocabulary;

fn main() {
    let vocab = Vocabulary::synthetic(10, 3, 31, 6.0).unwrap();
    let seg = |speaker_index, start_s, end_s, words: &[usize]| AttributedSegment {
        speaker_index,
        start_s,
        end_s,
        words: words.to_vec(),
    };
    // Out of order on purpose: serialization sorts by onset, then speaker.
    let segments = vec![
        seg(1, 0.4, 1.6, &[3, 4]),
        seg(0, 0.0, 1.0, &[0, 1, 2]),
        seg(0, 2.0, 2.6, &[5]),
    ];
    let stream = serialize(&segments, &vocab).expect("valid segments");
    println!("tokens: {}", vocab.render(stream.tokens()));
    println!("violations: {:?}", validate_stream(&stream, &vocab));
    for s in deserialize(&stream, &vocab).unwrap() {
        let words: Vec<&str> = s.words.iter().filter_map(|&w| vocab.word(w)).collect();
        println!("speaker {} [{:.2}, {:.2}] {}", s.speaker_index, s.start_s, s.end_s, words.join(" "));
    }

    // A stream that closes a segment for the wrong speaker.
    let mut bad = stream.clone();
    bad.0[4] = vocab.speaker_time_id(2, 5);
    println!("corrupted: {:?}", validate_stream(&bad, &vocab).first());
}
