//! Visual features for near-duplicate detection. The built-in extractor is
//! deliberately crude — channel-average, 8×8 average-pool, zero-mean, unit
//! L2 norm — but deterministic and mean-invariant, which is all the dedup
//! machinery needs. Real perceptual embeddings can be supplied externally.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use std::collections::BTreeMap;

/// Side length of the pooled grid; feature dimension is its square.
pub const POOL_GRID: usize = 8;
pub const FEATURE_DIM: usize = POOL_GRID * POOL_GRID;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub v: Vec<f64>,
    /// set when the image was all-constant and the canonical fallback
    /// vector was substituted
    pub degenerate: bool,
}

impl FeatureVector {
    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        // bit-identical features are exact duplicates by definition; the
        // dot product of a unit vector with itself can round below 1.0,
        // which would defeat an exact-duplicate threshold of 1.0
        if self.v == other.v {
            return 1.0;
        }
        self.v.iter().zip(&other.v).map(|(a, b)| a * b).sum()
    }
}

pub enum FeatureExtractor {
    /// 8×8 average-pool, zero-mean, L2 normalize
    BuiltinDownsample,
    /// precomputed vectors keyed by record id (normalized on use)
    External(BTreeMap<u64, Vec<f64>>),
}

fn canonical_unit(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

fn normalize(mut v: Vec<f64>, dim_hint: usize) -> FeatureVector {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return FeatureVector {
            v: canonical_unit(dim_hint.max(v.len().max(1))),
            degenerate: true,
        };
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    FeatureVector {
        v,
        degenerate: false,
    }
}

/// Pool an image down to a fixed grid. Grid cell (gy, gx) covers pixel rows
/// [gy·h/G, (gy+1)·h/G) with integer boundaries, so an exact k× upsampling
/// of the same content pools to identical values.
fn pool_to_grid<T: Scalar>(pixels: &Tensor<T>) -> Result<Vec<f64>> {
    let s = pixels.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W] pixels, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let g = POOL_GRID;
    let mut out = vec![0.0; g * g];
    for gy in 0..g {
        let y0 = gy * h / g;
        let y1 = ((gy + 1) * h / g).max(y0 + 1).min(h);
        for gx in 0..g {
            let x0 = gx * w / g;
            let x1 = ((gx + 1) * w / g).max(x0 + 1).min(w);
            let mut sum = 0.0;
            let mut n = 0usize;
            for ch in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += pixels.data()[ch * h * w + y * w + x].to_f64();
                        n += 1;
                    }
                }
            }
            out[gy * g + gx] = sum / n as f64;
        }
    }
    Ok(out)
}

/// Extract the dedup feature for one image. Degenerate (all-constant)
/// images map to a fixed canonical unit vector and are flagged.
pub fn extract_features<T: Scalar>(
    id: u64,
    pixels: &Tensor<T>,
    extractor: &FeatureExtractor,
) -> Result<FeatureVector> {
    match extractor {
        FeatureExtractor::BuiltinDownsample => {
            let mut pooled = pool_to_grid(pixels)?;
            let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
            for v in pooled.iter_mut() {
                *v -= mean;
            }
            Ok(normalize(pooled, FEATURE_DIM))
        }
        FeatureExtractor::External(map) => {
            let v = map
                .get(&id)
                .ok_or_else(|| Error::data(format!("no external feature for record {id}")))?;
            Ok(normalize(v.clone(), v.len()))
        }
    }
}
