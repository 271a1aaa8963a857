mod common;

use std::collections::BTreeMap;

use common::random_image;
use dva::data::Sample;
use dva::manifest::{Manifest, ManifestRow, Role, Split};
use dva::retrieval::{self, EmbeddingSet, SplitMode};
use dva::rng;
use dva::tensor::Tensor;
use dva::vit::{self, EncoderConfig, EncoderWeights};
use rand::Rng;

const KS: [usize; 4] = [1, 2, 4, 8];

fn random_set(n: usize, dim: usize, classes: usize, seed: u64) -> EmbeddingSet {
    let m = rng::normal_tensor(&mut rng::seeded(seed), &[n, dim], 1.0);
    let mut r = rng::seeded(seed + 1);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    // ids deliberately not in row order
    let ids = (0..n)
        .map(|i| format!("q{:05}", (i * 7919) % 100_003))
        .collect();
    EmbeddingSet::new(m, labels, ids).unwrap()
}

/// Full sort of every other item per query, then a scan of the top K.
fn brute_force(set: &EmbeddingSet, ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = set.len();
    let m = set.matrix();
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut others: Vec<(f64, &str, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| {
                let s: f64 = m
                    .row(q)
                    .iter()
                    .zip(m.row(j))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (s, set.ids()[j].as_str(), set.labels()[j])
            })
            .collect();
        others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        for (h, &k) in hits.iter_mut().zip(ks) {
            if others[..k].iter().any(|o| o.2 == set.labels()[q]) {
                *h += 1;
            }
        }
    }
    ks.iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / n as f64))
        .collect()
}

#[test]
fn recall_matches_brute_force_ranking() {
    for (n, classes, seed) in [(200, 20, 1), (500, 50, 2), (500, 100, 3)] {
        let set = random_set(n, 16, classes, seed);
        let got = retrieval::recall_at_k(&set, &KS).unwrap();
        assert_eq!(got, brute_force(&set, &KS), "n = {n}");
    }
}

#[test]
fn ties_are_broken_by_ascending_id() {
    // three identical embeddings; the query's nearest neighbour is the
    // lower id, whose label decides Recall@1
    let m = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
    ])
    .unwrap();
    let set = EmbeddingSet::new(
        m,
        vec![0, 1, 0, 1],
        vec!["c".into(), "a".into(), "b".into(), "d".into()],
    )
    .unwrap();
    // c -> a (label 1, miss); a -> b (label 0, miss); b -> a (miss); d -> a (hit)
    let r = retrieval::recall_at_k(&set, &[1, 2]).unwrap();
    assert_eq!(r[&1], 0.25);
    assert_eq!(r, brute_force(&set, &[1, 2]));
}

#[test]
fn recall_is_monotone_and_scale_free() {
    let set = random_set(300, 8, 30, 9);
    let ks: Vec<usize> = (1..40).collect();
    let r = retrieval::recall_at_k(&set, &ks).unwrap();
    for w in ks.windows(2) {
        assert!(r[&w[0]] <= r[&w[1]]);
    }
    let scaled: Vec<f32> = set
        .matrix()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 + (i / 8) as f32 * 0.37))
        .collect();
    let s2 = EmbeddingSet::new(
        Tensor::new(vec![300, 8], scaled).unwrap(),
        set.labels().to_vec(),
        set.ids().to_vec(),
    )
    .unwrap();
    assert_eq!(retrieval::recall_at_k(&s2, &ks).unwrap(), r);
}

#[test]
fn small_and_single_class_sets() {
    let two = |labels: Vec<usize>| {
        let m = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0]]).unwrap();
        EmbeddingSet::new(m, labels, vec!["a".into(), "b".into()]).unwrap()
    };
    assert_eq!(
        retrieval::recall_at_k(&two(vec![4, 4]), &[1]).unwrap()[&1],
        1.0
    );
    assert_eq!(
        retrieval::recall_at_k(&two(vec![4, 5]), &[1]).unwrap()[&1],
        0.0
    );
    assert!(matches!(
        retrieval::recall_at_k(&two(vec![4, 4]), &[2]),
        Err(dva::Error::Contract(_))
    ));

    let mut one = random_set(40, 6, 1, 5);
    one = EmbeddingSet::new(one.matrix().clone(), vec![0; 40], one.ids().to_vec()).unwrap();
    let r = retrieval::recall_at_k(&one, &(1..40).collect::<Vec<_>>()).unwrap();
    assert!(r.values().all(|&v| v == 1.0));
}

#[test]
fn zero_rows_are_degenerate() {
    let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    assert!(matches!(
        EmbeddingSet::new(m, vec![0, 1], vec!["a".into(), "b".into()]),
        Err(dva::Error::Degenerate(_))
    ));
}

#[test]
fn gallery_embedding_is_the_normalized_golden_vector() {
    let cfg = EncoderConfig::toy();
    let w = EncoderWeights::init(&cfg, 0).unwrap();
    let img = random_image(32, 0);
    let samples = vec![
        Sample {
            id: "g0".into(),
            label: 0,
            image: img.clone(),
        },
        Sample {
            id: "g1".into(),
            label: 1,
            image: img.clone(),
        },
    ];
    let set = retrieval::embed_samples(&samples, &cfg, &w, None).unwrap();
    assert_eq!((set.len(), set.dim()), (2, 32));
    assert!((set.similarity(0, 1) - 1.0).abs() < 1e-6);

    let golden: Vec<f64> = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/toy_seed0_embedding.txt"
    ))
    .unwrap()
    .lines()
    .map(|l| l.parse().unwrap())
    .collect();
    let norm = golden.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (a, g) in set.matrix().row(0).iter().zip(&golden) {
        assert!((*a as f64 - g / norm).abs() < 1e-6);
    }
    let direct = vit::encode(&img, &cfg, &w, None).unwrap();
    assert_eq!(direct.shape(), &[32]);
}

#[test]
fn embeddings_round_trip_through_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let set = random_set(30, 5, 4, 12);
    let path = tmp.path().join("e.csv");
    set.write_csv(&path).unwrap();
    let back = EmbeddingSet::read_csv(&path).unwrap();
    assert_eq!(back.ids(), set.ids());
    assert_eq!(back.labels(), set.labels());
    assert_eq!(back.matrix().data(), set.matrix().data());
}

fn manifest(classes: usize, per: usize) -> Manifest {
    let rows = (0..classes)
        .flat_map(|c| {
            (0..per).map(move |i| ManifestRow {
                image_path: format!("images/c{c}_{i}.ppm"),
                label_id: c,
                split: if i % 2 == 0 {
                    Split::Train
                } else {
                    Split::Test
                },
                role: Role::Orig,
            })
        })
        .collect();
    Manifest::new("/data", rows)
}

#[test]
fn open_split_partitions_classes() {
    let m = manifest(4, 3);
    let (tr, te) = retrieval::build_split(&m, SplitMode::Open, 4).unwrap();
    assert!(tr.rows.iter().all(|r| r.label_id < 2));
    assert!(te.rows.iter().all(|r| r.label_id >= 2));
    assert_eq!(tr.len() + te.len(), 12);

    let m = manifest(20, 4);
    let (tr, te) = retrieval::build_split(&m, SplitMode::Open, 20).unwrap();
    let a: std::collections::BTreeSet<_> = tr.rows.iter().map(|r| r.label_id).collect();
    let b: std::collections::BTreeSet<_> = te.rows.iter().map(|r| r.label_id).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.union(&b).count(), 20);
    // odd class counts put the extra class in test
    assert_eq!(retrieval::train_class_count(SplitMode::Open, 5), 2);
}

#[test]
fn closed_split_keeps_the_split_column() {
    let m = manifest(3, 4);
    let (tr, te) = retrieval::build_split(&m, SplitMode::Closed, 3).unwrap();
    assert_eq!(
        tr.rows,
        m.rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .cloned()
            .collect::<Vec<_>>()
    );
    assert_eq!(
        te.rows,
        m.rows
            .iter()
            .filter(|r| r.split == Split::Test)
            .cloned()
            .collect::<Vec<_>>()
    );
    assert_eq!(retrieval::train_class_count(SplitMode::Closed, 3), 3);
}
