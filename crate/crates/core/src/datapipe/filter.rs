//! Ordered filter chains over scored records, plus the built-in
//! bytes-per-pixel scorer: a JPEG-like proxy (8×8 block DCT, quality
//! quantization, order-0 entropy estimate) that ranks compressible images
//! below noisy ones without being bit-compatible with any real codec.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::ImageRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// keep records with score >= threshold
    AtLeast,
    /// keep records with score <= threshold
    AtMost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    Drop,
    Keep,
    #[default]
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterStage {
    /// key into the record's score map
    pub name: String,
    pub threshold: f64,
    pub direction: Direction,
    #[serde(default)]
    pub missing: MissingPolicy,
}

impl FilterStage {
    pub fn at_least(name: &str, threshold: f64) -> Self {
        FilterStage {
            name: name.to_string(),
            threshold,
            direction: Direction::AtLeast,
            missing: MissingPolicy::Error,
        }
    }

    pub fn at_most(name: &str, threshold: f64) -> Self {
        FilterStage {
            name: name.to_string(),
            threshold,
            direction: Direction::AtMost,
            missing: MissingPolicy::Error,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterReport {
    pub kept: Vec<u64>,
    /// drops attributed to the first failing stage, keyed by stage name
    pub dropped_by_stage: BTreeMap<String, usize>,
}

/// Run the stages in order; a record is kept iff it passes all of them,
/// and a dropped record counts against the first stage it fails.
pub fn filter_chain<T: Scalar>(
    records: &[ImageRecord<T>],
    chain: &[FilterStage],
) -> Result<FilterReport> {
    let mut dropped_by_stage: BTreeMap<String, usize> = BTreeMap::new();
    for stage in chain {
        dropped_by_stage.insert(stage.name.clone(), 0);
    }
    let mut kept = Vec::new();
    'records: for r in records {
        for stage in chain {
            let pass = match r.scores.get(&stage.name) {
                Some(&s) => match stage.direction {
                    Direction::AtLeast => s >= stage.threshold,
                    Direction::AtMost => s <= stage.threshold,
                },
                None => match stage.missing {
                    MissingPolicy::Keep => true,
                    MissingPolicy::Drop => false,
                    MissingPolicy::Error => {
                        return Err(Error::data(format!(
                            "record {} has no score `{}`",
                            r.id, stage.name
                        )))
                    }
                },
            };
            if !pass {
                *dropped_by_stage.get_mut(&stage.name).unwrap() += 1;
                continue 'records;
            }
        }
        kept.push(r.id);
    }
    Ok(FilterReport {
        kept,
        dropped_by_stage,
    })
}

// Standard JPEG luminance quantization table (quality 50 baseline).
const QUANT_BASE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Per-block fixed overhead in bytes, standing in for headers and
/// marker/container costs so the ratio stays strictly positive.
const BLOCK_OVERHEAD_BYTES: f64 = 0.5;

fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for i in 0..64 {
        t[i] = ((QUANT_BASE[i] * scale + 50.0) / 100.0).clamp(1.0, 255.0);
    }
    t
}

/// 8-point DCT-II along both axes of one block.
fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += block[y * 8 + x]
                        * ((2 * y + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()
                        * ((2 * x + 1) as f64 * v as f64 * std::f64::consts::PI / 16.0).cos();
                }
            }
            let au = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            let av = if v == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            out[u * 8 + v] = au * av * acc;
        }
    }
    out
}

/// Compressed-size proxy per pixel. The image is mapped to the 0..255
/// range, cut into 8×8 blocks (edges replicate), DCT'd, quantized at the
/// given quality, and the quantized coefficients are charged their order-0
/// entropy plus a fixed per-block overhead.
pub fn bytes_per_pixel<T: Scalar>(pixels: &Tensor<T>, quality: u32) -> Result<f64> {
    let s = pixels.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W] pixels, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let table = quant_table(quality);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut n_coeffs = 0usize;
    let mut n_blocks = 0usize;
    for ch in 0..c {
        let mut by = 0;
        while by < h {
            let mut bx = 0;
            while bx < w {
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        let v = pixels.data()[ch * h * w + sy * w + sx].to_f64();
                        // [-1,1] latent range → JPEG-style level-shifted sample
                        block[y * 8 + x] = (v * 128.0).clamp(-128.0, 127.0);
                    }
                }
                let coeffs = dct8x8(&block);
                for i in 0..64 {
                    let q = (coeffs[i] / table[i]).round() as i64;
                    *counts.entry(q).or_insert(0) += 1;
                    n_coeffs += 1;
                }
                n_blocks += 1;
                bx += 8;
            }
            by += 8;
        }
    }
    let mut entropy_bits = 0.0;
    for &cnt in counts.values() {
        let p = cnt as f64 / n_coeffs as f64;
        entropy_bits += cnt as f64 * (-p.log2());
    }
    let bytes = entropy_bits / 8.0 + n_blocks as f64 * BLOCK_OVERHEAD_BYTES;
    Ok(bytes / (c * h * w) as f64)
}

/// Compute and attach the built-in score to every record.
pub fn score_bytes_per_pixel<T: Scalar>(
    records: &mut [ImageRecord<T>],
    quality: u32,
) -> Result<()> {
    for r in records.iter_mut() {
        let s = bytes_per_pixel(&r.pixels, quality)?;
        r.scores.insert("bytes-per-pixel".to_string(), s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    fn record(id: u64, scores: &[(&str, f64)]) -> ImageRecord<f64> {
        ImageRecord {
            id,
            pixels: Tensor::zeros(vec![1, 2, 2]),
            metadata: BTreeMap::new(),
            scores: scores
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }

    #[test]
    fn empty_chain_keeps_everything() {
        let recs: Vec<_> = (0..5).map(|i| record(i, &[])).collect();
        let rep = filter_chain(&recs, &[]).unwrap();
        assert_eq!(rep.kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn permissive_threshold_drops_nothing() {
        let recs: Vec<_> = (0..5)
            .map(|i| record(i, &[("aesthetic", i as f64)]))
            .collect();
        let rep = filter_chain(&recs, &[FilterStage::at_least("aesthetic", -1.0)]).unwrap();
        assert_eq!(rep.kept.len(), 5);
        assert_eq!(rep.dropped_by_stage["aesthetic"], 0);
    }

    #[test]
    fn drop_attribution_matches_fixture() {
        // 10 records, two stages: aesthetic >= 0.5 then watermark <= 0.3.
        // records 0-3 fail both filters, 4-5 fail only the watermark one,
        // 6-9 pass both — so the kept set is fixed but attribution moves
        // with stage order.
        let recs: Vec<_> = (0..10)
            .map(|i| {
                let aes = if i < 4 { 0.1 } else { 0.9 };
                let wm = if i < 6 { 0.8 } else { 0.1 };
                record(i, &[("aesthetic", aes), ("watermark", wm)])
            })
            .collect();
        let chain = [
            FilterStage::at_least("aesthetic", 0.5),
            FilterStage::at_most("watermark", 0.3),
        ];
        let rep = filter_chain(&recs, &chain).unwrap();
        assert_eq!(rep.kept, vec![6, 7, 8, 9]);
        assert_eq!(rep.dropped_by_stage["aesthetic"], 4);
        assert_eq!(rep.dropped_by_stage["watermark"], 2);
        // kept set is order-independent even though attribution is not
        let flipped = [chain[1].clone(), chain[0].clone()];
        let rep2 = filter_chain(&recs, &flipped).unwrap();
        assert_eq!(rep2.kept, rep.kept);
        assert_eq!(rep2.dropped_by_stage["watermark"], 6);
    }

    #[test]
    fn missing_score_policies() {
        let recs = vec![record(0, &[("a", 1.0)]), record(1, &[])];
        let mut stage = FilterStage::at_least("a", 0.5);
        assert!(filter_chain(&recs, std::slice::from_ref(&stage)).is_err());
        stage.missing = MissingPolicy::Drop;
        let rep = filter_chain(&recs, std::slice::from_ref(&stage)).unwrap();
        assert_eq!(rep.kept, vec![0]);
        stage.missing = MissingPolicy::Keep;
        let rep = filter_chain(&recs, std::slice::from_ref(&stage)).unwrap();
        assert_eq!(rep.kept, vec![0, 1]);
    }

    #[test]
    fn constant_image_compresses_below_noise() {
        let mut rng = Rng64::new(20);
        let constant = Tensor::<f64>::ones(vec![1, 16, 16]).scale(0.3);
        let noise = Tensor::<f64>::randn(vec![1, 16, 16], 0.8, &mut rng);
        for q in [25, 50, 90] {
            let bc = bytes_per_pixel(&constant, q).unwrap();
            let bn = bytes_per_pixel(&noise, q).unwrap();
            assert!(bc > 0.0);
            assert!(bc < bn, "q={q}: constant {bc} vs noise {bn}");
        }
    }

    #[test]
    fn rough_scale_invariance_on_textures() {
        // a fixed texture rendered at two sizes scores within 30%
        let tex = |n: usize| {
            let mut t = Tensor::<f64>::zeros(vec![1, n, n]);
            for y in 0..n {
                for x in 0..n {
                    t.data_mut()[y * n + x] =
                        0.5 * ((x as f64 * 0.9).sin() + (y as f64 * 1.3).cos()) * 0.7;
                }
            }
            t
        };
        let a = bytes_per_pixel(&tex(32), 50).unwrap();
        let b = bytes_per_pixel(&tex(64), 50).unwrap();
        let ratio = a.max(b) / a.min(b);
        assert!(ratio < 1.3, "sizes scored {a} vs {b}");

        let mut rng = Rng64::new(21);
        let na = bytes_per_pixel(&Tensor::<f64>::randn(vec![1, 32, 32], 0.5, &mut rng), 50)
            .unwrap();
        let nb = bytes_per_pixel(&Tensor::<f64>::randn(vec![1, 64, 64], 0.5, &mut rng), 50)
            .unwrap();
        let ratio = na.max(nb) / na.min(nb);
        assert!(ratio < 1.3, "noise sizes scored {na} vs {nb}");
    }

    #[test]
    fn scorer_attaches_scores() {
        let mut recs: Vec<ImageRecord<f64>> = (0..3)
            .map(|id| ImageRecord {
                id,
                pixels: Tensor::randn(vec![1, 8, 8], 0.5, &mut Rng64::new(id)),
                metadata: BTreeMap::new(),
                scores: BTreeMap::new(),
            })
            .collect();
        score_bytes_per_pixel(&mut recs, 50).unwrap();
        assert!(recs.iter().all(|r| r.scores["bytes-per-pixel"] > 0.0));
    }
}
