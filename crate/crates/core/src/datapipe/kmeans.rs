//! Coarse partitioning for the first dedup stage: k-means++ seeding, Lloyd
//! iterations with empty-cluster reseeding, nearest-centroid assignment,
//! and union-find duplicate grouping within each cluster.

use crate::error::{Error, Result};
use crate::rng::Rng64;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance; ties break to the lower index
/// (strict improvement required to switch).
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = dist2(point, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = dist2(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

pub fn assign(features: &[Vec<f64>], centroids: &[Vec<f64>]) -> Result<Vec<usize>> {
    if centroids.is_empty() {
        return Err(Error::config("assignment needs at least one centroid"));
    }
    Ok(features.iter().map(|f| nearest(f, centroids).0).collect())
}

/// k-means++ seeding followed by Lloyd iterations. Returns the centroids
/// and the objective (sum of squared distances) measured at each
/// assignment, which is non-increasing by construction.
pub fn kmeans(
    features: &[Vec<f64>],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = features.len();
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    if k > n {
        return Err(Error::config(format!("k={k} exceeds {n} points")));
    }
    let dim = features[0].len();
    let mut rng = Rng64::new(seed);

    // k-means++: first centroid uniform, then D² sampling
    let mut centroids: Vec<Vec<f64>> = vec![features[rng.below(n)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| dist2(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // all remaining points coincide with a centroid
            rng.below(n)
        } else {
            let mut r = rng.range(0.0, total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        centroids.push(features[pick].clone());
        for (i, f) in features.iter().enumerate() {
            let d = dist2(f, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut objectives = Vec::with_capacity(iters);
    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        // assignment step + objective
        let mut obj = 0.0;
        for (i, f) in features.iter().enumerate() {
            let (a, d) = nearest(f, &centroids);
            assignment[i] = a;
            obj += d;
        }
        objectives.push(obj);

        // mean update
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in features.iter().enumerate() {
            let a = assignment[i];
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for v in sums[c].iter_mut() {
                    *v /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }

        // empty clusters grab the point farthest from its centroid; each
        // reseed takes a distinct point
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for (i, f) in features.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let d = dist2(f, &centroids[assignment[i]]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                centroids[c] = features[i].clone();
                taken[i] = true;
            }
        }
    }
    Ok((centroids, objectives))
}

/// Union-find with path compression.
pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // deterministic: lower root wins
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// All-pairs cosine similarity within one cluster; pairs at or above θ are
/// joined. Returns groups of size ≥ 2 with ids sorted ascending, ordered
/// by their smallest id.
pub fn intra_cluster_dedup(
    ids: &[u64],
    feats: &[Vec<f64>],
    theta: f64,
) -> Result<Vec<Vec<u64>>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::config(format!("theta must be in (0, 1], got {theta}")));
    }
    if ids.len() != feats.len() {
        return Err(Error::usage("id / feature count mismatch".to_string()));
    }
    let n = ids.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            // bit-identical features are exact duplicates; their dot
            // product can round below 1.0, which would let them slip
            // past an exact-duplicate threshold of θ = 1
            let cos: f64 = if feats[i] == feats[j] {
                1.0
            } else {
                feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum()
            };
            if cos >= theta {
                uf.union(i, j);
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<u64>> = Default::default();
    for i in 0..n {
        let r = uf.find(i);
        by_root.entry(r).or_default().push(ids[i]);
    }
    let mut groups: Vec<Vec<u64>> = by_root
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}
