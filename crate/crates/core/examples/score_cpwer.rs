//! cpWER with its error decomposition on a small two-speaker example.

use mtasr::eval::{cpwer, report_csv, TranscriptSet};

fn main() {
    let reference = TranscriptSet::from_text([("alice", "the cat sat on the mat"), ("bob", "see you tomorrow")]);
    // Speakers come back under other labels, one word leaks from bob into
    // alice's stream and one word is misrecognized.
    let hypothesis = TranscriptSet::from_text([("spk1", "the cat sat tomorrow on the hat"), ("spk0", "see you")]);
    let report = cpwer(&reference, &hypothesis);
    println!("cpWER {:.1}%", 100.0 * report.cpwer.unwrap());
    for p in &report.assignment {
        println!("  {:?} <- {:?}", p.reference, p.hypothesis);
    }
    println!(
        "S={} D={} I={} leakage={} omission={}",
        report.sub, report.del, report.ins, report.leakage, report.omission
    );
    print!("{}", report_csv(&[("demo".to_string(), report)]));
}
