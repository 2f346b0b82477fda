//! Corpus curation at desk scale: two-stage near-duplicate removal
//! (k-means coarse partitioning, then exact all-pairs cosine search inside
//! each cluster) and ordered filter chains over per-record scores.
//!
//! The production-scale knobs (tens of thousands of clusters, sampled
//! fitting subsets) are plain config values here; desk defaults keep
//! everything exact and brute-force-checkable.

pub mod features;
pub mod filter;
pub mod kmeans;

pub use features::{extract_features, FeatureExtractor, FeatureVector, FEATURE_DIM};
pub use filter::{
    bytes_per_pixel, filter_chain, score_bytes_per_pixel, Direction, FilterReport, FilterStage,
    MissingPolicy,
};
pub use kmeans::{assign, intra_cluster_dedup, kmeans, UnionFind};

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write as _};
use std::path::Path;

/// Default intra-cluster cosine threshold for "near duplicate".
pub const DEDUP_THETA: f64 = 0.95;
/// Default coarse cluster count.
pub const DEDUP_K: usize = 32;

#[derive(Debug, Clone)]
pub struct ImageRecord<T: Scalar> {
    pub id: u64,
    pub pixels: Tensor<T>,
    pub metadata: BTreeMap<String, String>,
    pub scores: BTreeMap<String, f64>,
}

impl<T: Scalar> ImageRecord<T> {
    pub fn new(id: u64, pixels: Tensor<T>) -> Self {
        ImageRecord {
            id,
            pixels,
            metadata: BTreeMap::new(),
            scores: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DedupOptions {
    pub k: usize,
    pub theta: f64,
    /// fraction of the corpus used to fit the k-means centroids
    pub subset_fraction: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for DedupOptions {
    fn default() -> Self {
        DedupOptions {
            k: DEDUP_K,
            theta: DEDUP_THETA,
            subset_fraction: 1.0,
            iters: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DedupIndex {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<u64, usize>,
    /// duplicate groups (size ≥ 2), each sorted ascending
    pub groups: Vec<Vec<u64>>,
    pub removed: BTreeSet<u64>,
    /// group index → lowest-id member, which is the one kept
    pub kept_representative: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DedupReport {
    pub total: usize,
    pub removed: usize,
    pub removal_fraction: f64,
    /// group size → number of groups of that size
    pub group_histogram: BTreeMap<usize, usize>,
    pub clusters: usize,
    pub occupancy_min: usize,
    pub occupancy_max: usize,
    pub degenerate_features: usize,
}

/// Full two-stage pipeline: extract → (subsample) → k-means → assign →
/// per-cluster exact dedup. Records are processed in id order, so the
/// result is independent of input ordering.
pub fn dedup_run<T: Scalar>(
    records: &[ImageRecord<T>],
    extractor: &FeatureExtractor,
    opts: &DedupOptions,
) -> Result<(DedupIndex, DedupReport)> {
    if records.is_empty() {
        return Err(Error::usage("dedup needs a nonempty corpus".to_string()));
    }
    if !(opts.theta > 0.0 && opts.theta <= 1.0) {
        return Err(Error::config(format!(
            "theta must be in (0, 1], got {}",
            opts.theta
        )));
    }
    if !(opts.subset_fraction > 0.0 && opts.subset_fraction <= 1.0) {
        return Err(Error::config(format!(
            "subset fraction must be in (0, 1], got {}",
            opts.subset_fraction
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].id);
    for pair in order.windows(2) {
        if records[pair[0]].id == records[pair[1]].id {
            return Err(Error::data(format!(
                "duplicate record id {}",
                records[pair[0]].id
            )));
        }
    }
    let ids: Vec<u64> = order.iter().map(|&i| records[i].id).collect();
    let mut feats = Vec::with_capacity(records.len());
    let mut degenerate = 0usize;
    for &i in &order {
        let f = extract_features(records[i].id, &records[i].pixels, extractor)?;
        if f.degenerate {
            degenerate += 1;
        }
        feats.push(f.v);
    }

    // fitting subset: seeded sample without replacement, never below k
    let n = feats.len();
    let n_sub = ((opts.subset_fraction * n as f64).ceil() as usize)
        .max(opts.k)
        .min(n);
    let subset: Vec<Vec<f64>> = if n_sub == n {
        feats.clone()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = Rng64::new(opts.seed ^ 0x5EED_5EED);
        for i in 0..n_sub {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        idx[..n_sub].iter().map(|&i| feats[i].clone()).collect()
    };
    if opts.k > subset.len() {
        return Err(Error::config(format!(
            "k={} exceeds fitting subset of {}",
            opts.k,
            subset.len()
        )));
    }

    let (centroids, _objectives) = kmeans(&subset, opts.k, opts.iters, opts.seed)?;
    let assigned = assign(&feats, &centroids)?;

    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &c) in assigned.iter().enumerate() {
        clusters.entry(c).or_default().push(pos);
    }

    let mut groups: Vec<Vec<u64>> = Vec::new();
    for members in clusters.values() {
        let m_ids: Vec<u64> = members.iter().map(|&p| ids[p]).collect();
        let m_feats: Vec<Vec<f64>> = members.iter().map(|&p| feats[p].clone()).collect();
        groups.extend(intra_cluster_dedup(&m_ids, &m_feats, opts.theta)?);
    }
    groups.sort_by_key(|g| g[0]);

    let mut removed = BTreeSet::new();
    let mut kept_representative = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        kept_representative.insert(gi, g[0]);
        for &id in &g[1..] {
            removed.insert(id);
        }
    }

    let mut group_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for g in &groups {
        *group_histogram.entry(g.len()).or_insert(0) += 1;
    }
    let occ_min = clusters.values().map(Vec::len).min().unwrap_or(0);
    let occ_max = clusters.values().map(Vec::len).max().unwrap_or(0);
    let report = DedupReport {
        total: n,
        removed: removed.len(),
        removal_fraction: removed.len() as f64 / n as f64,
        group_histogram,
        clusters: clusters.len(),
        occupancy_min: occ_min,
        occupancy_max: occ_max,
        degenerate_features: degenerate,
    };
    let index = DedupIndex {
        centroids,
        assignment: ids.iter().copied().zip(assigned).collect(),
        groups,
        removed,
        kept_representative,
    };
    Ok((index, report))
}

/// Brute-force all-pairs dedup over the whole corpus — the oracle the
/// two-stage pipeline approximates.
pub fn brute_force_groups(ids: &[u64], feats: &[Vec<f64>], theta: f64) -> Result<Vec<Vec<u64>>> {
    intra_cluster_dedup(ids, feats, theta)
}

/// Unordered duplicate pairs implied by a grouping, for recall accounting.
pub fn group_pairs(groups: &[Vec<u64>]) -> BTreeSet<(u64, u64)> {
    let mut pairs = BTreeSet::new();
    for g in groups {
        for i in 0..g.len() {
            for j in (i + 1)..g.len() {
                pairs.insert((g[i], g[j]));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub path: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: u64,
    pub score: f64,
}

pub fn write_scores_sidecar(path: &Path, scores: &BTreeMap<u64, f64>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (&id, &score) in scores {
        writeln!(f, "{}", serde_json::to_string(&ScoreLine { id, score })?)?;
    }
    Ok(())
}

pub fn read_scores_sidecar(path: &Path) -> Result<BTreeMap<u64, f64>> {
    let f = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScoreLine = serde_json::from_str(&line)?;
        out.insert(s.id, s.score);
    }
    Ok(out)
}

/// Attach sidecar scores to records under a filter name; records without
/// a sidecar entry simply keep no score (the chain's missing policy
/// decides their fate).
pub fn attach_scores<T: Scalar>(
    records: &mut [ImageRecord<T>],
    name: &str,
    scores: &BTreeMap<u64, f64>,
) {
    for r in records.iter_mut() {
        if let Some(&s) = scores.get(&r.id) {
            r.scores.insert(name.to_string(), s);
        }
    }
}

/// Load a corpus whose manifest points at PGM or PNG images; pixel bytes
/// map to the [-1, 1] latent range.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<ImageRecord<f64>>> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let img_path = base.join(&e.path);
        let (h, w, bytes) = if e.path.ends_with(".png") {
            let img = image::open(&img_path)
                .map_err(|err| Error::data(format!("{}: {err}", img_path.display())))?
                .to_luma8();
            (
                img.height() as usize,
                img.width() as usize,
                img.into_raw(),
            )
        } else {
            crate::imageio::read_pgm(&img_path)?
        };
        let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
        let mut rec = ImageRecord::new(e.id, Tensor::new(vec![1, h, w], data)?);
        rec.metadata = e.metadata;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// n/2 planted pairs: member 2i+1 is a slightly perturbed copy of 2i.
    fn planted_pair_corpus(
        n: usize,
        dim: usize,
        jitter: f64,
        seed: u64,
    ) -> (Vec<u64>, Vec<Vec<f64>>) {
        let mut rng = Rng64::new(seed);
        let mut ids = Vec::new();
        let mut feats = Vec::new();
        for i in 0..n / 2 {
            let base: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let base = unit(base);
            let twin: Vec<f64> = base
                .iter()
                .map(|&v| v + jitter * rng.normal())
                .collect();
            ids.push(2 * i as u64);
            feats.push(base);
            ids.push(2 * i as u64 + 1);
            feats.push(unit(twin));
        }
        (ids, feats)
    }

    fn records_from(ids: &[u64], feats: &[Vec<f64>]) -> (Vec<ImageRecord<f64>>, FeatureExtractor) {
        let recs = ids
            .iter()
            .map(|&id| ImageRecord::new(id, Tensor::zeros(vec![1, 2, 2])))
            .collect();
        let map: BTreeMap<u64, Vec<f64>> =
            ids.iter().copied().zip(feats.iter().cloned()).collect();
        (recs, FeatureExtractor::External(map))
    }

    #[test]
    fn fully_duplicated_corpus_removes_half() {
        // jitter small enough that every pair is far above theta
        let (ids, feats) = planted_pair_corpus(200, 16, 0.001, 30);
        let (recs, ex) = records_from(&ids, &feats);
        let opts = DedupOptions {
            k: 8,
            ..Default::default()
        };
        let (index, report) = dedup_run(&recs, &ex, &opts).unwrap();
        assert_eq!(report.removed, 100);
        assert!((report.removal_fraction - 0.5).abs() < 1e-12);
        // every planted pair recovered
        let pairs = group_pairs(&index.groups);
        for i in 0..100u64 {
            assert!(pairs.contains(&(2 * i, 2 * i + 1)), "pair {i} missed");
        }
        // representatives are the lower ids
        for (gi, g) in index.groups.iter().enumerate() {
            assert_eq!(index.kept_representative[&gi], g[0]);
            assert!(!index.removed.contains(&g[0]));
        }
    }

    #[test]
    fn k1_equals_brute_force() {
        let (ids, feats) = planted_pair_corpus(120, 12, 0.05, 31);
        let (recs, ex) = records_from(&ids, &feats);
        let opts = DedupOptions {
            k: 1,
            ..Default::default()
        };
        let (index, _) = dedup_run(&recs, &ex, &opts).unwrap();
        let brute = brute_force_groups(&ids, &feats, opts.theta).unwrap();
        assert_eq!(index.groups, brute);
    }

    #[test]
    fn theta_one_removes_only_exact_duplicates() {
        let mut ids = vec![1, 2, 3];
        let mut feats = vec![
            unit(vec![1.0, 2.0, 3.0]),
            unit(vec![1.0, 2.0, 3.0]),
            unit(vec![1.0, 2.0, 3.001]),
        ];
        ids.push(4);
        feats.push(unit(vec![-1.0, 0.5, 0.0]));
        let (recs, ex) = records_from(&ids, &feats);
        let opts = DedupOptions {
            k: 1,
            theta: 1.0,
            ..Default::default()
        };
        let (index, _) = dedup_run(&recs, &ex, &opts).unwrap();
        assert_eq!(index.groups, vec![vec![1, 2]]);
        assert_eq!(index.removed.iter().copied().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let (ids, feats) = planted_pair_corpus(100, 16, 0.02, 32);
        let (recs, ex) = records_from(&ids, &feats);
        let opts = DedupOptions {
            k: 4,
            ..Default::default()
        };
        let (a, _) = dedup_run(&recs, &ex, &opts).unwrap();
        let (b, _) = dedup_run(&recs, &ex, &opts).unwrap();
        assert_eq!(a.groups, b.groups);
        assert_eq!(a.removed, b.removed);
        assert_eq!(a.assignment, b.assignment);
        // shuffle the record order; the index must not change
        let mut shuffled = recs.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let (c, _) = dedup_run(&shuffled, &ex, &opts).unwrap();
        assert_eq!(a.groups, c.groups);
        assert_eq!(a.removed, c.removed);
    }

    #[test]
    fn duplicate_ids_rejected_and_empty_corpus_rejected() {
        let recs = vec![
            ImageRecord::<f64>::new(5, Tensor::zeros(vec![1, 2, 2])),
            ImageRecord::<f64>::new(5, Tensor::zeros(vec![1, 2, 2])),
        ];
        let ex = FeatureExtractor::BuiltinDownsample;
        let opts = DedupOptions {
            k: 1,
            ..Default::default()
        };
        assert!(dedup_run(&recs, &ex, &opts).is_err());
        let none: Vec<ImageRecord<f64>> = Vec::new();
        assert!(dedup_run(&none, &ex, &opts).is_err());
    }

    #[test]
    fn manifest_and_sidecar_round_trip() {
        let dir = std::env::temp_dir().join("fmdt_datapipe_io");
        std::fs::create_dir_all(&dir).unwrap();
        let entries = vec![
            ManifestEntry {
                id: 1,
                path: "a.pgm".to_string(),
                metadata: [("caption".to_string(), "a disc".to_string())].into(),
            },
            ManifestEntry {
                id: 2,
                path: "b.pgm".to_string(),
                metadata: BTreeMap::new(),
            },
        ];
        let mpath = dir.join("manifest.jsonl");
        write_manifest(&mpath, &entries).unwrap();
        assert_eq!(read_manifest(&mpath).unwrap(), entries);

        let scores: BTreeMap<u64, f64> = [(1, 0.5), (2, -0.25)].into();
        let spath = dir.join("scores.jsonl");
        write_scores_sidecar(&spath, &scores).unwrap();
        assert_eq!(read_scores_sidecar(&spath).unwrap(), scores);
    }

    #[test]
    fn corpus_loads_from_pgm_manifest() {
        let dir = std::env::temp_dir().join("fmdt_datapipe_corpus");
        std::fs::create_dir_all(&dir).unwrap();
        let bytes = vec![0u8, 128, 255, 64];
        crate::imageio::write_pgm_bytes(&dir.join("img.pgm"), 2, 2, &bytes).unwrap();
        let entries = vec![ManifestEntry {
            id: 9,
            path: "img.pgm".to_string(),
            metadata: BTreeMap::new(),
        }];
        let mpath = dir.join("manifest.jsonl");
        write_manifest(&mpath, &entries).unwrap();
        let corpus = load_corpus(&mpath).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].id, 9);
        assert_eq!(corpus[0].pixels.shape(), &[1, 2, 2]);
        assert!((corpus[0].pixels.data()[0] + 1.0).abs() < 1e-12);
        assert!((corpus[0].pixels.data()[2] - 1.0).abs() < 1e-12);
    }
}
