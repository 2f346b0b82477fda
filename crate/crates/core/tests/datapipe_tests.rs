//! Near-duplicate detection at corpus scale: a 2000-item corpus with
//! planted duplicate groups, externally supplied features, and a
//! brute-force all-pairs oracle.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use flowmoe::datapipe::{
    brute_force_groups, dedup_run, extract_features, group_pairs, DedupOptions, FeatureExtractor,
    ImageRecord, FEATURE_DIM,
};
use flowmoe::rng::Rng64;
use flowmoe::tensor::Tensor;

struct PlantedCorpus {
    records: Vec<ImageRecord<f64>>,
    extractor: FeatureExtractor,
    planted_pairs: BTreeSet<(u64, u64)>,
}

/// 2000 items: 350 duplicate groups of sizes 2–4 plus singles. Group
/// members sit within cosine ~0.985 of a random base direction; unrelated
/// items are random unit vectors, whose worst-case pairwise cosine over
/// ~2M pairs stays far below the 0.95 threshold in 64 dimensions.
fn planted_corpus(total: usize, n_groups: usize, seed: u64) -> PlantedCorpus {
    let mut rng = Rng64::new(seed);
    let unit = |rng: &mut Rng64| -> Vec<f64> {
        (0..FEATURE_DIM).map(|_| rng.normal()).collect()
    };
    let mut vectors: Vec<(Vec<f64>, Option<usize>)> = Vec::with_capacity(total);
    for gi in 0..n_groups {
        let base = unit(&mut rng);
        let size = 2 + gi % 3;
        // per-dimension noise scaled so the total perturbation norm is
        // ~0.12, putting member-member cosines near 0.986
        let noise = 0.12 / (FEATURE_DIM as f64).sqrt();
        for _ in 0..size {
            let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
            let member: Vec<f64> = base
                .iter()
                .map(|&b| b / norm + noise * rng.normal())
                .collect();
            vectors.push((member, Some(gi)));
        }
    }
    while vectors.len() < total {
        vectors.push((unit(&mut rng), None));
    }
    assert_eq!(vectors.len(), total);

    // assign ids by a random permutation so group membership does not
    // correlate with id order
    let mut ids: Vec<u64> = (0..total as u64).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.below(i + 1);
        ids.swap(i, j);
    }
    let mut map = BTreeMap::new();
    let mut records = Vec::with_capacity(total);
    let mut by_group: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (i, (v, group)) in vectors.into_iter().enumerate() {
        let id = ids[i];
        map.insert(id, v);
        records.push(ImageRecord::new(id, Tensor::zeros(vec![1, 1, 1])));
        if let Some(gi) = group {
            by_group.entry(gi).or_default().push(id);
        }
    }
    let planted_pairs = group_pairs(
        &by_group
            .into_values()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect::<Vec<_>>(),
    );
    PlantedCorpus {
        records,
        extractor: FeatureExtractor::External(map),
        planted_pairs,
    }
}

fn oracle_pairs(corpus: &PlantedCorpus, theta: f64) -> BTreeSet<(u64, u64)> {
    let mut ids = Vec::new();
    let mut feats = Vec::new();
    for r in &corpus.records {
        ids.push(r.id);
        feats.push(
            extract_features(r.id, &r.pixels, &corpus.extractor)
                .unwrap()
                .v,
        );
    }
    group_pairs(&brute_force_groups(&ids, &feats, theta).unwrap())
}

#[test]
fn lsh_recall_on_planted_corpus() {
    let corpus = planted_corpus(2000, 350, 91);
    let bf = oracle_pairs(&corpus, 0.95);
    // with the chosen margins the brute-force reference finds exactly the
    // planted pairs: no random pair comes near the threshold
    assert_eq!(bf, corpus.planted_pairs);

    let opts = DedupOptions {
        k: 16,
        theta: 0.95,
        ..Default::default()
    };
    let (index, report) = dedup_run(&corpus.records, &corpus.extractor, &opts).unwrap();
    let found = group_pairs(&index.groups);
    // clustering can only drop edges relative to all-pairs, never invent
    assert!(found.is_subset(&bf));
    let recall = found.intersection(&bf).count() as f64 / bf.len() as f64;
    println!(
        "bf pairs {}, found {}, recall {recall:.4}, removed {} of {}",
        bf.len(),
        found.len(),
        report.removed,
        report.total
    );
    assert!(recall >= 0.95, "clustered dedup recall {recall:.4}");
    assert_eq!(report.total, 2000);
}

#[test]
fn single_cluster_matches_brute_force_exactly() {
    let corpus = planted_corpus(2000, 350, 92);
    let opts = DedupOptions {
        k: 1,
        theta: 0.95,
        ..Default::default()
    };
    let (index, _) = dedup_run(&corpus.records, &corpus.extractor, &opts).unwrap();
    let bf = oracle_pairs(&corpus, 0.95);
    assert_eq!(group_pairs(&index.groups), bf);

    // the oracle and the K=1 run must agree on the exact groups too
    let mut ids = Vec::new();
    let mut feats = Vec::new();
    for r in &corpus.records {
        ids.push(r.id);
        feats.push(
            extract_features(r.id, &r.pixels, &corpus.extractor)
                .unwrap()
                .v,
        );
    }
    let bf_groups = brute_force_groups(&ids, &feats, 0.95).unwrap();
    assert_eq!(index.groups, bf_groups);
}

#[test]
fn theta_one_keeps_near_duplicates_and_finds_exact_copies() {
    let mut rng = Rng64::new(93);
    let mut map = BTreeMap::new();
    let mut records = Vec::new();
    let mut expected: BTreeSet<(u64, u64)> = BTreeSet::new();
    let mut next_id = 0u64;
    let mut push = |map: &mut BTreeMap<u64, Vec<f64>>,
                    records: &mut Vec<ImageRecord<f64>>,
                    next_id: &mut u64,
                    v: Vec<f64>|
     -> u64 {
        let id = *next_id;
        *next_id += 1;
        map.insert(id, v);
        records.push(ImageRecord::new(id, Tensor::zeros(vec![1, 1, 1])));
        id
    };
    // 30 exact-duplicate pairs: identical raw vectors
    for _ in 0..30 {
        let v: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.normal()).collect();
        let a = push(&mut map, &mut records, &mut next_id, v.clone());
        let b = push(&mut map, &mut records, &mut next_id, v);
        expected.insert((a, b));
    }
    // 20 near-duplicate pairs at cosine ~0.99 — high, but below 1.0
    for _ in 0..20 {
        let v: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let noise = 0.15 / (FEATURE_DIM as f64).sqrt();
        let w: Vec<f64> = v.iter().map(|&x| x / norm + noise * rng.normal()).collect();
        push(&mut map, &mut records, &mut next_id, v);
        push(&mut map, &mut records, &mut next_id, w);
    }
    // 200 unrelated singles
    for _ in 0..200 {
        let v: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.normal()).collect();
        push(&mut map, &mut records, &mut next_id, v);
    }

    let extractor = FeatureExtractor::External(map);
    let opts = DedupOptions {
        k: 4,
        theta: 1.0,
        ..Default::default()
    };
    let (index, report) = dedup_run(&records, &extractor, &opts).unwrap();
    assert_eq!(group_pairs(&index.groups), expected);
    assert_eq!(report.removed, 30);
}

#[test]
fn dedup_rerun_is_deterministic_at_scale() {
    let corpus = planted_corpus(2000, 350, 94);
    let opts = DedupOptions {
        k: 16,
        theta: 0.95,
        ..Default::default()
    };
    let (i1, r1) = dedup_run(&corpus.records, &corpus.extractor, &opts).unwrap();
    let (i2, r2) = dedup_run(&corpus.records, &corpus.extractor, &opts).unwrap();
    assert_eq!(i1.groups, i2.groups);
    assert_eq!(i1.removed, i2.removed);
    assert_eq!(r1.removed, r2.removed);
}
