use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streampref::data::{even_boundaries, read_jsonl, segment, write_jsonl, InteractionTriple, UserHistory};
use streampref::Error;

fn history(rng: &mut ChaCha8Rng, n: usize) -> UserHistory {
    let mut index = 0u64;
    let triples = (0..n)
        .map(|i| {
            index += rng.gen_range(1..5);
            let rejected = rng.gen_bool(0.7).then(|| format!("n{i}"));
            InteractionTriple::new(index, None, format!("p{i}"), rejected).unwrap()
        })
        .collect();
    UserHistory::new("u", "tag", triples).unwrap()
}

#[test]
fn segments_reassemble_the_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let n = rng.gen_range(1..60);
        let h = history(&mut rng, n);
        let cuts = rng.gen_range(1..=n.min(6));
        let mut inner: Vec<usize> = rand::seq::index::sample(&mut rng, n - 1, cuts - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        inner.sort_unstable();
        inner.push(n);
        let segs = segment(&h, &inner).unwrap();
        assert_eq!(segs.len(), cuts);
        assert_eq!(segs[0].start, 0);
        assert_eq!(segs.last().unwrap().end, n);
        let rebuilt: Vec<InteractionTriple> = segs
            .iter()
            .flat_map(|s| h.slice(*s).unwrap().to_vec())
            .collect();
        assert_eq!(rebuilt, h.triples);
    }
}

#[test]
fn out_of_range_boundaries_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = history(&mut rng, 5);
    assert!(matches!(segment(&h, &[2, 6]), Err(Error::Validation(_))));
    assert!(matches!(segment(&h, &[3, 3, 5]), Err(Error::Validation(_))));
    assert!(matches!(segment(&h, &[]), Err(Error::Validation(_))));
}

#[test]
fn jsonl_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hs: Vec<UserHistory> = (0..5).map(|_| history(&mut rng, 7)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    write_jsonl(&path, &hs).unwrap();
    let back: Vec<UserHistory> = read_jsonl(&path).unwrap();
    assert_eq!(back, hs);
}

#[test]
fn malformed_history_lines_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"user_id\":\"u\",\"dataset_tag\":\"t\",\"triples\":[{\"index\":2,\"chosen\":\"a\"},{\"index\":1,\"chosen\":\"b\"}]}\n",
    )
    .unwrap();
    let err = read_jsonl::<UserHistory>(&path).unwrap_err();
    assert!(err.to_string().contains("bad.jsonl"), "{err}");
}

proptest! {
    #[test]
    fn even_chunks_are_near_equal(len in 1usize..500, chunks in 1usize..20) {
        prop_assume!(chunks <= len);
        let b = even_boundaries(len, chunks).unwrap();
        prop_assert_eq!(b.len(), chunks);
        prop_assert_eq!(*b.last().unwrap(), len);
        let size = len / chunks;
        let mut prev = 0;
        for (i, end) in b.iter().enumerate() {
            let width = end - prev;
            if i + 1 < chunks {
                prop_assert_eq!(width, size);
            } else {
                prop_assert_eq!(width, size + len % chunks);
            }
            prev = *end;
        }
    }
}
