use proptest::prelude::*;
use sha2::{Digest, Sha256};
use smoothcert::data::rten::{decode, encode, read_rten, write_rten, RtenData, RtenRecord};
use smoothcert::data::{batches, gen_synthetic, permutation, sequential_batches, Dataset};
use smoothcert::error::RtenError;
use smoothcert::rng::GaussianStream;
use smoothcert::Error;

fn payload_digest(data: &[f64]) -> Vec<u8> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    Sha256::digest(&bytes).to_vec()
}

#[test]
fn megabyte_tensor_round_trips_with_equal_checksum() {
    let mut data = vec![0.0; 131_072];
    GaussianStream::new(3, &[1]).fill(&mut data, 1e3);
    data[7] = f64::MIN_POSITIVE / 4.0;
    data[8] = -0.0;
    let before = payload_digest(&data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.rten");
    write_rten(&path, &[RtenRecord::f64("w", vec![512, 256], data)]).unwrap();
    let back = read_rten(&path).unwrap();
    let RtenData::F64(v) = &back[0].data else { panic!("dtype changed") };
    assert_eq!(payload_digest(v), before);
    assert_eq!(back[0].dims, vec![512, 256]);
}

#[test]
fn small_cases_round_trip() {
    assert_eq!(decode(&encode(&[]).unwrap()).unwrap(), vec![]);
    let scalar = vec![RtenRecord::f64("s", vec![], vec![std::f64::consts::PI])];
    assert_eq!(decode(&encode(&scalar).unwrap()).unwrap(), scalar);
}

#[test]
fn byte_layout_matches_format() {
    let rec = RtenRecord::u32("ab", vec![2], vec![1, 258]);
    let mut want = b"RTEN".to_vec();
    want.extend_from_slice(&1u16.to_le_bytes());
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&2u16.to_le_bytes());
    want.extend_from_slice(b"ab");
    want.push(1);
    want.push(1);
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&258u32.to_le_bytes());
    assert_eq!(encode(&[rec]).unwrap(), want);
}

#[test]
fn malformed_files_have_distinct_codes() {
    let good = encode(&[RtenRecord::f64("x", vec![3], vec![1.0, 2.0, 3.0])]).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let magic = decode(&bad_magic).unwrap_err();
    let truncated = decode(&good[..good.len() - 1]).unwrap_err();
    let dup = encode(&[RtenRecord::f64("x", vec![], vec![1.0]), RtenRecord::f64("x", vec![], vec![2.0])]).unwrap_err();
    assert!(matches!(magic, RtenError::BadMagic { .. }));
    assert!(matches!(truncated, RtenError::Truncated { .. }));
    assert!(matches!(dup, RtenError::DuplicateName(_)));
    let codes = [magic.code(), truncated.code(), dup.code()];
    assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);

    // A duplicate written by another tool is rejected on read as well.
    let mut two = b"RTEN".to_vec();
    two.extend_from_slice(&1u16.to_le_bytes());
    two.extend_from_slice(&2u32.to_le_bytes());
    for _ in 0..2 {
        two.extend_from_slice(&1u16.to_le_bytes());
        two.push(b'y');
        two.extend_from_slice(&[0, 0]);
        two.extend_from_slice(&0.5f64.to_le_bytes());
    }
    assert!(matches!(decode(&two), Err(RtenError::DuplicateName(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.rten");
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(read_rten(&path), Err(Error::Rten(RtenError::BadMagic { .. }))));
}

#[test]
fn synthetic_examples() {
    let a = gen_synthetic(2, 10, 16, 5).unwrap();
    assert_eq!(a.len(), 20);
    assert_eq!(a.class_counts(), vec![10, 10]);
    assert_eq!(a.images.shape(), &[20, 3, 16, 16]);
    let b = gen_synthetic(2, 10, 16, 5).unwrap();
    let bits = |d: &Dataset| d.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(gen_synthetic(2, 10, 16, 6).unwrap(), a);
    assert!(gen_synthetic(9, 1, 16, 0).is_err());
    assert!(gen_synthetic(1, 1, 16, 0).is_err());
}

#[test]
fn dataset_persistence_and_splits() {
    let ds = gen_synthetic(4, 20, 16, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.rten");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);

    let splits = ds.split(0.2, 0.1, 3).unwrap();
    assert_eq!(splits.val.class_counts(), vec![4; 4]);
    assert_eq!(splits.test.class_counts(), vec![2; 4]);
    assert_eq!(splits.train.len() + splits.val.len() + splits.test.len(), ds.len());
    let m = splits.manifest(8, 20, 16);
    assert_eq!((m.k, m.splits.train, m.splits.val, m.splits.test), (4, 56, 16, 8));
    // Disjoint: no image appears in two parts.
    let key = |d: &Dataset, i: usize| d.images.example_slice(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut seen = std::collections::HashSet::new();
    for part in [&splits.train, &splits.val, &splits.test] {
        for i in 0..part.len() {
            assert!(seen.insert(key(part, i)));
        }
    }
    assert!(ds.split(0.6, 0.5, 0).is_err());
}

#[test]
fn batching_contract() {
    let ds = gen_synthetic(3, 7, 8, 1).unwrap();
    let all: Vec<_> = batches(&ds, 100, 4).collect();
    assert_eq!(all.len(), 1);
    let a: Vec<_> = batches(&ds, 4, 9).collect();
    let b: Vec<_> = batches(&ds, 4, 9).collect();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert_eq!(a.last().unwrap().labels.len(), 1);
    let mut union: Vec<usize> = a.iter().flat_map(|bt| bt.indices.clone()).collect();
    union.sort_unstable();
    assert_eq!(union, (0..ds.len()).collect::<Vec<_>>());
    for bt in &a {
        for (j, &i) in bt.indices.iter().enumerate() {
            assert_eq!(bt.labels[j], ds.labels[i]);
            assert_eq!(bt.images.example_slice(j), ds.images.example_slice(i));
        }
    }
    assert_ne!(permutation(50, 1), permutation(50, 2));
    let seq: Vec<usize> = sequential_batches(&ds, 5).flat_map(|bt| bt.indices).collect();
    assert_eq!(seq, (0..ds.len()).collect::<Vec<_>>());
}

/// Multinomial logistic regression on raw pixels by full-batch gradient descent.
fn linear_probe_train_accuracy(ds: &Dataset, epochs: usize, lr: f64) -> f64 {
    let (n, d, k) = (ds.len(), ds.images.example_len(), ds.classes);
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let logits = |w: &[f64], b: &[f64], i: usize| -> Vec<f64> {
        let x = ds.images.example_slice(i);
        (0..k).map(|c| b[c] + (0..d).map(|j| x[j] * w[j * k + c]).sum::<f64>()).collect()
    };
    for _ in 0..epochs {
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let z = logits(&w, &b, i);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let x = ds.images.example_slice(i);
            for c in 0..k {
                let g = e[c] / s - (c == ds.labels[i]) as u8 as f64;
                gb[c] += g;
                for j in 0..d {
                    gw[j * k + c] += g * x[j];
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * gi / n as f64;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi / n as f64;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let z = logits(&w, &b, i);
            let best = (0..k).max_by(|&a, &c| z[a].total_cmp(&z[c])).unwrap();
            best == ds.labels[i]
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn linear_probe_separates_classes() {
    let ds = gen_synthetic(8, 40, 16, 11).unwrap();
    let acc = linear_probe_train_accuracy(&ds, 800, 1.0);
    assert!(acc >= 0.9, "linear probe train accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn rten_fuzz_round_trip(values in prop::collection::vec(any::<f64>(), 0..64), ints in prop::collection::vec(any::<u32>(), 0..16), name in "[a-z_.0-9]{1,12}") {
        let recs = vec![
            RtenRecord::f64(name.clone(), vec![values.len()], values.clone()),
            RtenRecord::u32(format!("{name}!"), vec![ints.len(), 1], ints),
        ];
        let back = decode(&encode(&recs).unwrap()).unwrap();
        prop_assert_eq!(back.len(), 2);
        let RtenData::F64(v) = &back[0].data else { panic!() };
        prop_assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(&back[1], &recs[1]);
    }

    #[test]
    fn synthetic_balance_and_range(k in 2usize..=8, per in 1usize..6, seed in any::<u64>()) {
        let ds = gen_synthetic(k, per, 12, seed).unwrap();
        prop_assert_eq!(ds.class_counts(), vec![per; k]);
        prop_assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
