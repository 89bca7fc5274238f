use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;

use super::*;

fn small(seed: u64) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        utterances: 30,
        seed,
        ..SyntheticCorpusSpec::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = encode_corpus(&generate_corpus(&small(4)).unwrap());
    let b = encode_corpus(&generate_corpus(&small(4)).unwrap());
    let c = encode_corpus(&generate_corpus(&small(5)).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn noiseless_frames_are_prototypes() {
    let spec = SyntheticCorpusSpec {
        noise_std: 0.0,
        crossfade: false,
        ..small(1)
    };
    let (corpus, inv) = generate_with_inventory(&spec).unwrap();
    for u in &corpus {
        for (t, &k) in u.alignment.iter().enumerate() {
            let proto: Vec<f32> = inv.prototypes[u.ids[k]].iter().map(|&x| x as f32).collect();
            assert_eq!(u.frames.row(t), &proto[..]);
        }
    }
}

#[test]
fn crossfade_blends_boundary_frames() {
    let spec = SyntheticCorpusSpec {
        noise_std: 0.0,
        ..small(2)
    };
    let (corpus, inv) = generate_with_inventory(&spec).unwrap();
    let u = &corpus[0];
    let b = u.durations[0] as usize;
    let (p0, p1) = (&inv.prototypes[u.ids[0]], &inv.prototypes[u.ids[1]]);
    let last = u.frames.row(b - 1);
    let first = u.frames.row(b);
    for c in 0..spec.feature_dim {
        assert!((last[c] as f64 - (0.75 * p0[c] + 0.25 * p1[c])).abs() < 1e-6);
        if u.durations[1] > 1 {
            assert!((first[c] as f64 - (0.25 * p0[c] + 0.75 * p1[c])).abs() < 1e-6);
        }
    }
    assert_eq!(
        u.frames
            .row(0)
            .iter()
            .map(|&x| x as f64)
            .collect::<Vec<_>>(),
        p0.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>()
    );
}

#[test]
fn frame_counts_and_alignment_invariants() {
    let corpus = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
    assert_eq!(corpus.len(), 200);
    for u in &corpus {
        let total: u32 = u.durations.iter().sum();
        assert_eq!(u.frame_count(), total as usize);
        assert!((3..=10).contains(&u.tokens()));
        assert!(u.durations.iter().all(|d| (2..=8).contains(d)));
        assert!(u.alignment.windows(2).all(|w| w[0] <= w[1]));
        let covered: BTreeSet<_> = u.alignment.iter().copied().collect();
        assert_eq!(covered.len(), u.tokens());
        assert_eq!(
            durations_from_alignment(&u.alignment, u.tokens()),
            u.durations
        );
    }
}

#[test]
fn durations_follow_token_identity() {
    let (corpus, inv) = generate_with_inventory(&small(3)).unwrap();
    for u in &corpus {
        for (&id, &d) in u.ids.iter().zip(&u.durations) {
            assert_eq!(d, inv.base_durations[id]);
        }
    }
}

#[test]
fn jitter_stays_in_range() {
    let spec = SyntheticCorpusSpec {
        duration_jitter: 3,
        ..small(6)
    };
    let corpus = generate_corpus(&spec).unwrap();
    assert!(corpus
        .iter()
        .flat_map(|u| &u.durations)
        .all(|d| (2..=8).contains(d)));
}

#[test]
fn invalid_specs_rejected() {
    for spec in [
        SyntheticCorpusSpec {
            min_duration: 0,
            ..small(0)
        },
        SyntheticCorpusSpec {
            min_tokens: 5,
            max_tokens: 4,
            ..small(0)
        },
        SyntheticCorpusSpec {
            noise_std: -1.0,
            ..small(0)
        },
        SyntheticCorpusSpec {
            vocab_size: 0,
            ..small(0)
        },
    ] {
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }
}

#[test]
fn roundtrip_is_byte_identical() {
    let corpus = generate_corpus(&small(7)).unwrap();
    let bytes = encode_corpus(&corpus);
    let back = decode_corpus(&bytes).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(encode_corpus(&back), bytes);
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.bin");
    let corpus = generate_corpus(&small(8)).unwrap();
    save_corpus(&corpus, &p).unwrap();
    let back = load_corpus(&p).unwrap();
    let p2 = dir.path().join("c2.bin");
    save_corpus(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn empty_corpus_is_valid() {
    let bytes = encode_corpus(&[]);
    assert_eq!(bytes.len(), 14);
    assert!(decode_corpus(&bytes).unwrap().is_empty());
}

#[test]
fn truncated_file_reports_offset() {
    let bytes = encode_corpus(&generate_corpus(&small(9)).unwrap());
    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        match decode_corpus(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0 || cut < 6),
            other => panic!("expected format error, got {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_corpus(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(decode_corpus(&trailing).is_err());
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(
        load_corpus(Path::new("/nonexistent/x.bin")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn held_out_is_last_tenth() {
    let corpus = generate_corpus(&small(10)).unwrap();
    let (train, held) = split_held_out(&corpus);
    assert_eq!((train.len(), held.len()), (27, 3));
    assert_eq!(held[0], corpus[27]);
    let c = generate_corpus(&SyntheticCorpusSpec {
        utterances: 15,
        ..small(10)
    })
    .unwrap();
    assert_eq!(split_held_out(&c).1.len(), 2);
}

#[test]
fn batch_size_one_has_no_padding() {
    let corpus = generate_corpus(&small(11)).unwrap();
    for b in batch_iterator(&corpus, 1, 0).unwrap().take(30) {
        assert!(b.token_mask[0].iter().all(|&m| m));
        assert!(b.frame_mask[0].iter().all(|&m| m));
        let (ids, frames) = b.valid(0).unwrap();
        assert_eq!(ids, corpus[b.indices[0]].ids);
        assert_eq!(frames, corpus[b.indices[0]].frames);
    }
}

#[test]
fn every_utterance_once_per_epoch() {
    let corpus = generate_corpus(&small(12)).unwrap();
    let mut it = batch_iterator(&corpus, 8, 3).unwrap();
    for epoch in 0..3 {
        let mut seen = Vec::new();
        for _ in 0..4 {
            let b = it.next().unwrap();
            assert_eq!(it.epoch(), epoch);
            seen.extend(b.indices);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
    }
}

#[test]
fn same_seed_same_order() {
    let corpus = generate_corpus(&small(13)).unwrap();
    let a: Vec<_> = batch_iterator(&corpus, 4, 9)
        .unwrap()
        .take(20)
        .map(|b| b.indices)
        .collect();
    let b: Vec<_> = batch_iterator(&corpus, 4, 9)
        .unwrap()
        .take(20)
        .map(|b| b.indices)
        .collect();
    let c: Vec<_> = batch_iterator(&corpus, 4, 10)
        .unwrap()
        .take(20)
        .map(|b| b.indices)
        .collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(batch_iterator(&corpus, 0, 9).is_err());
}

#[test]
fn padding_recovers_valid_prefix() {
    let corpus = generate_corpus(&small(14)).unwrap();
    let mut b = Batch::from_utterances(&corpus, &[0, 1, 2, 3]);
    for (i, u) in corpus.iter().take(4).enumerate() {
        let (ids, frames) = b.valid(i).unwrap();
        assert_eq!(ids, u.ids);
        assert_eq!(frames, u.frames);
    }
    b.push_padding();
    assert!(b.valid(4).is_none());
}

proptest! {
    #[test]
    fn alignment_roundtrip(durs in proptest::collection::vec(0u32..6, 1..8)) {
        let a = alignment_from_durations(&durs);
        prop_assert_eq!(durations_from_alignment(&a, durs.len()), durs);
    }
}
