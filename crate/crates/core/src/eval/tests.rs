use super::*;

fn timed(streams: &[(&str, &[(&str, f64, f64)])]) -> TranscriptSet {
    let mut out = TranscriptSet::default();
    for (label, segs) in streams {
        let s = out.streams.entry(label.to_string()).or_default();
        for (text, a, b) in segs.iter() {
            s.extend(text.split_whitespace().map(|w| Word {
                text: w.to_string(),
                span: Some((*a, *b)),
            }));
        }
    }
    out
}

#[test]
fn permuted_labels_score_zero() {
    let r = TranscriptSet::from_text([("A", "a b c"), ("B", "d e")]);
    let h = TranscriptSet::from_text([("2", "a b c"), ("1", "d e")]);
    let rep = cpwer(&r, &h);
    assert_eq!(rep.cpwer, Some(0.0));
    assert_eq!(
        rep.assignment,
        vec![
            Pairing {
                reference: Some("A".into()),
                hypothesis: Some("2".into())
            },
            Pairing {
                reference: Some("B".into()),
                hypothesis: Some("1".into())
            },
        ]
    );
}

#[test]
fn two_speaker_example() {
    let r = TranscriptSet::from_text([("A", "a b c"), ("B", "d e")]);
    let h = TranscriptSet::from_text([("1", "a b"), ("2", "d e f")]);
    let rep = cpwer(&r, &h);
    assert_eq!((rep.sub, rep.del, rep.ins), (0, 1, 1));
    assert_eq!(rep.cpwer, Some(0.4));
    // The swapped pairing costs 5.
    let swapped = edit_distance(&["a", "b", "c"], &["d", "e", "f"]) + edit_distance(&["d", "e"], &["a", "b"]);
    assert_eq!(swapped, 5);
}

#[test]
fn empty_extra_speaker_changes_nothing() {
    let r = TranscriptSet::from_text([("A", "a b c"), ("B", "d e")]);
    let h = TranscriptSet::from_text([("1", "a b"), ("2", "d e f")]);
    let mut h2 = h.clone();
    h2.streams.insert("3".into(), vec![]);
    assert_eq!(cpwer(&r, &h).cpwer, cpwer(&r, &h2).cpwer);
}

#[test]
fn empty_reference_is_marked() {
    let r = TranscriptSet::default();
    let h = TranscriptSet::from_text([("1", "a")]);
    let rep = cpwer(&r, &h);
    assert!(rep.empty_reference);
    assert_eq!(rep.cpwer, None);
    assert_eq!(rep.ins, 1);
}

#[test]
fn leakage_and_omission_cases() {
    let r = timed(&[("A", &[("a b", 0.0, 2.0)]), ("B", &[("c d", 1.0, 3.0)])]);
    let rep = cpwer(&r, &r.clone());
    assert_eq!((rep.leakage, rep.omission), (0, 0));

    // "b" from A shows up in B's stream at the same time.
    let h = timed(&[("1", &[("a", 0.0, 2.0)]), ("2", &[("c d b", 1.0, 3.0)])]);
    let rep = cpwer(&r, &h);
    assert_eq!((rep.del, rep.ins), (1, 1));
    assert_eq!((rep.leakage, rep.omission), (1, 0));
    assert_eq!(rep.leakage_pct, 25.0);

    // "d" is missing everywhere.
    let h = timed(&[("1", &[("a b", 0.0, 2.0)]), ("2", &[("c", 1.0, 3.0)])]);
    let rep = cpwer(&r, &h);
    assert_eq!((rep.leakage, rep.omission), (0, 1));
    assert!(!rep.timing_fallback);
}

#[test]
fn leakage_respects_time_gate() {
    let r = timed(&[("A", &[("a b", 0.0, 1.0)]), ("B", &[("c", 20.0, 21.0)])]);
    let h = timed(&[("1", &[("a", 0.0, 1.0)]), ("2", &[("c b", 20.0, 21.0)])]);
    let rep = cpwer(&r, &h);
    assert_eq!((rep.leakage, rep.omission), (0, 1));
}

#[test]
fn untimed_leakage_falls_back_to_identity() {
    let r = TranscriptSet::from_text([("A", "a b"), ("B", "c d")]);
    let h = TranscriptSet::from_text([("1", "a"), ("2", "c d b")]);
    let rep = cpwer(&r, &h);
    assert_eq!(rep.leakage, 1);
    assert!(rep.timing_fallback);
}

#[test]
fn aggregate_sums_before_dividing() {
    let a = cpwer(
        &TranscriptSet::from_text([("A", "a")]),
        &TranscriptSet::from_text([("1", "x")]),
    );
    let b = cpwer(
        &TranscriptSet::from_text([("A", "a b c d e f g h i")]),
        &TranscriptSet::from_text([("1", "a b c d e f g h i")]),
    );
    let total = aggregate([&a, &b]);
    assert_eq!(total.cpwer, Some(0.1));
    assert_ne!(total.cpwer, Some((1.0 + 0.0) / 2.0));
}

#[test]
fn normalization_lowercases_and_strips() {
    assert_eq!(normalize_word("Hello,"), "hello");
    assert_eq!(normalize_word("..."), "");
    let r = [DiarizationSegment::new("r", "A", 0.0, 1.0, "Hello, World!")];
    let h = [DiarizationSegment::new("r", "x", 0.0, 1.0, "hello world")];
    assert_eq!(score_segments(&r, &h, true)[0].1.cpwer, Some(0.0));
    assert_eq!(score_segments(&r, &h, false)[0].1.cpwer, Some(1.0));
}

#[test]
fn csv_has_table_columns() {
    let r = [DiarizationSegment::new("r", "A", 0.0, 1.0, "a b")];
    let csv = report_csv(&score_segments(&r, &r, true));
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert_eq!(lines[1], "recording,cpWER,#S,#D,#I,#L,#O");
    assert_eq!(lines[2], "r,0.00,0.00,0.00,0.00,0.00,0.00");
    assert!(lines[3].starts_with("all,"));
}
