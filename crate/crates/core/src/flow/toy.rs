//! Synthetic toy datasets with known statistics, plus an optional on-disk
//! sample cache that reproduces the direct stream bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape occupancy bounds for the `shapes` dataset, as a fraction of the
/// image area.
pub const SHAPE_AREA_MIN: f64 = 0.08;
pub const SHAPE_AREA_MAX: f64 = 0.35;

/// Fill values for the two shape classes; the sign difference is the
/// class-discriminant a conditional model must learn.
pub const DISC_FILL: f64 = 0.8;
pub const RECT_FILL: f64 = -0.8;
const BACKGROUND_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyDataset {
    Gaussian { mean: f64, std: f64 },
    TwoGaussians { mean_a: f64, mean_b: f64, std: f64 },
    /// one random disc (class 0, fill +0.8) or rectangle (class 1, fill
    /// −0.8) per image on a noisy background; prompt_id = 1 + class
    Shapes,
    Checker { period: usize },
}

pub struct ToySample<T: Scalar> {
    pub latent: Tensor<T>,
    pub prompt_id: u64,
    /// for shapes: row-major h·w interior mask
    pub mask: Option<Vec<bool>>,
}

impl std::str::FromStr for ToyDataset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ToyDataset::Gaussian {
                mean: 0.8,
                std: 0.3,
            }),
            "two-gaussians" => Ok(ToyDataset::TwoGaussians {
                mean_a: 0.8,
                mean_b: -0.8,
                std: 0.3,
            }),
            "shapes" => Ok(ToyDataset::Shapes),
            "checker" => Ok(ToyDataset::Checker { period: 2 }),
            other => Err(Error::config(format!(
                "unknown toy dataset `{other}` (expected gaussian, two-gaussians, shapes, or checker)"
            ))),
        }
    }
}

impl ToyDataset {
    pub fn sample<T: Scalar>(&self, c: usize, h: usize, w: usize, rng: &mut Rng64) -> ToySample<T> {
        match *self {
            ToyDataset::Gaussian { mean, std } => ToySample {
                latent: gaussian_latent(c, h, w, mean, std, rng),
                prompt_id: 1,
                mask: None,
            },
            ToyDataset::TwoGaussians {
                mean_a,
                mean_b,
                std,
            } => {
                let k = usize::from(rng.coin(0.5));
                let mean = if k == 0 { mean_a } else { mean_b };
                ToySample {
                    latent: gaussian_latent(c, h, w, mean, std, rng),
                    prompt_id: 1 + k as u64,
                    mask: None,
                }
            }
            ToyDataset::Shapes => shapes_sample(c, h, w, rng),
            ToyDataset::Checker { period } => checker_sample(c, h, w, period.max(1), rng),
        }
    }
}

fn gaussian_latent<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    mean: f64,
    std: f64,
    rng: &mut Rng64,
) -> Tensor<T> {
    let data = (0..c * h * w)
        .map(|_| T::from_f64(mean + std * rng.normal()))
        .collect();
    Tensor::new(vec![c, h, w], data).expect("gaussian latent")
}

fn checker_sample<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    period: usize,
    rng: &mut Rng64,
) -> ToySample<T> {
    let parity = usize::from(rng.coin(0.5));
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for y in 0..h {
            for x in 0..w {
                let cell = (y / period + x / period + parity) % 2;
                let base = if cell == 0 { 0.7 } else { -0.7 };
                data.push(T::from_f64(base + BACKGROUND_STD * rng.normal()));
            }
        }
    }
    ToySample {
        latent: Tensor::new(vec![c, h, w], data).expect("checker latent"),
        prompt_id: 1,
        mask: None,
    }
}

/// All (width, height) pairs whose area fraction lies inside the bounds.
fn feasible_rects(h: usize, w: usize) -> Vec<(usize, usize)> {
    let area = (h * w) as f64;
    let mut out = Vec::new();
    for rw in 1..=w {
        for rh in 1..=h {
            let frac = (rw * rh) as f64 / area;
            if (SHAPE_AREA_MIN..=SHAPE_AREA_MAX).contains(&frac) {
                out.push((rw, rh));
            }
        }
    }
    out
}

/// Disc pixel counts are translation-invariant over integer offsets, so
/// feasibility of a radius is decided once at a reference center.
fn disc_pixels(r: f64) -> usize {
    let reach = r.ceil() as i64;
    let mut count = 0;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if (dx * dx + dy * dy) as f64 <= r * r {
                count += 1;
            }
        }
    }
    count
}

fn feasible_radii(h: usize, w: usize) -> Vec<f64> {
    let area = (h * w) as f64;
    let mut out = Vec::new();
    let mut r = 1.0;
    while r < (h.min(w) as f64) / 2.0 {
        let frac = disc_pixels(r) as f64 / area;
        let fits = 2 * (r.ceil() as usize) + 1 <= h.min(w);
        if fits && (SHAPE_AREA_MIN..=SHAPE_AREA_MAX).contains(&frac) {
            out.push(r);
        }
        r += 0.25;
    }
    out
}

fn shapes_sample<T: Scalar>(c: usize, h: usize, w: usize, rng: &mut Rng64) -> ToySample<T> {
    assert!(h >= 4 && w >= 4, "shapes dataset needs at least 4x4 images");
    let class = usize::from(rng.coin(0.5));
    let mut mask = vec![false; h * w];
    if class == 0 {
        let radii = feasible_radii(h, w);
        assert!(!radii.is_empty(), "no feasible disc radius for {h}x{w}");
        let r = radii[rng.below(radii.len())];
        let reach = r.ceil() as usize;
        let cy = reach + rng.below(h - 2 * reach);
        let cx = reach + rng.below(w - 2 * reach);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy as f64;
                let dx = x as f64 - cx as f64;
                if dy * dy + dx * dx <= r * r {
                    mask[y * w + x] = true;
                }
            }
        }
    } else {
        let rects = feasible_rects(h, w);
        assert!(!rects.is_empty(), "no feasible rectangle for {h}x{w}");
        let (rw, rh) = rects[rng.below(rects.len())];
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask[y * w + x] = true;
            }
        }
    }
    let fill = if class == 0 { DISC_FILL } else { RECT_FILL };
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for &inside in &mask {
            let v = if inside {
                fill
            } else {
                BACKGROUND_STD * rng.normal()
            };
            data.push(T::from_f64(v));
        }
    }
    ToySample {
        latent: Tensor::new(vec![c, h, w], data).expect("shapes latent"),
        prompt_id: 1 + class as u64,
        mask: Some(mask),
    }
}

/// Generate the first `count` samples of the seeded stream directly.
pub fn generate<T: Scalar>(
    dataset: &ToyDataset,
    seed: u64,
    count: usize,
    shape: (usize, usize, usize),
) -> Vec<ToySample<T>> {
    let mut rng = Rng64::new(seed);
    (0..count)
        .map(|_| dataset.sample(shape.0, shape.1, shape.2, &mut rng))
        .collect()
}

const CACHE_MAGIC: &[u8; 4] = b"FMDS";
const CACHE_VERSION: u32 = 1;

pub struct CachedDataset<T: Scalar> {
    pub seed: u64,
    pub shape: (usize, usize, usize),
    pub samples: Vec<ToySample<T>>,
}

/// Precompute and store `count` samples of the seeded stream.
pub fn write_cache<T: Scalar>(
    path: &Path,
    dataset: &ToyDataset,
    seed: u64,
    count: usize,
    shape: (usize, usize, usize),
) -> Result<()> {
    let samples = generate::<T>(dataset, seed, count, shape);
    let (c, h, w) = shape;
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.push(T::PRECISION.byte_width() as u8);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for dim in [c, h, w] {
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for s in &samples {
        buf.extend_from_slice(&s.prompt_id.to_le_bytes());
        match &s.mask {
            Some(m) => {
                buf.push(1);
                buf.extend(m.iter().map(|&b| b as u8));
            }
            None => buf.push(0),
        }
        for &v in s.latent.data() {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_cache<T: Scalar>(path: &Path) -> Result<CachedDataset<T>> {
    let bytes = fs::read(path)?;
    let err = |m: &str| Error::data(format!("dataset cache {}: {m}", path.display()));
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > bytes.len() {
            Err(err("truncated"))
        } else {
            Ok(())
        }
    };
    let mut pos = 0usize;
    need(pos, 4)?;
    if &bytes[..4] != CACHE_MAGIC {
        return Err(err("bad magic"));
    }
    pos += 4;
    need(pos, 4)?;
    let version = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    pos += 4;
    need(pos, 1)?;
    let width = bytes[pos] as usize;
    if width != T::PRECISION.byte_width() {
        return Err(err("element precision mismatch"));
    }
    pos += 1;
    let u64_at = |pos: &mut usize| -> Result<u64> {
        need(*pos, 8)?;
        let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap());
        *pos += 8;
        Ok(v)
    };
    let seed = u64_at(&mut pos)?;
    let count = u64_at(&mut pos)? as usize;
    let c = u64_at(&mut pos)? as usize;
    let h = u64_at(&mut pos)? as usize;
    let w = u64_at(&mut pos)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let prompt_id = u64_at(&mut pos)?;
        need(pos, 1)?;
        let has_mask = bytes[pos] == 1;
        pos += 1;
        let mask = if has_mask {
            need(pos, h * w)?;
            let m = bytes[pos..pos + h * w].iter().map(|&b| b == 1).collect();
            pos += h * w;
            Some(m)
        } else {
            None
        };
        let numel = c * h * w;
        need(pos, numel * width)?;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let v = T::read_le(&bytes[pos + i * width..]);
            if !v.is_finite() {
                return Err(err("non-finite latent element"));
            }
            data.push(v);
        }
        pos += numel * width;
        samples.push(ToySample {
            latent: Tensor::new(vec![c, h, w], data)?,
            prompt_id,
            mask,
        });
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes"));
    }
    Ok(CachedDataset {
        seed,
        shape: (c, h, w),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_mean_law_of_large_numbers() {
        let ds = ToyDataset::Gaussian {
            mean: 0.8,
            std: 0.3,
        };
        let mut rng = Rng64::new(20);
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..10_000 {
            let s: ToySample<f64> = ds.sample(1, 4, 4, &mut rng);
            sum += s.latent.data().iter().sum::<f64>();
            n += s.latent.numel();
        }
        assert!((sum / n as f64 - 0.8).abs() < 0.01);
    }

    #[test]
    fn shapes_have_one_shape_within_area_bounds() {
        let mut rng = Rng64::new(21);
        for &(h, w) in &[(8, 8), (16, 16)] {
            for _ in 0..100 {
                let s: ToySample<f64> = ToyDataset::Shapes.sample(1, h, w, &mut rng);
                let mask = s.mask.as_ref().unwrap();
                let frac = mask.iter().filter(|&&b| b).count() as f64 / (h * w) as f64;
                assert!(
                    (SHAPE_AREA_MIN..=SHAPE_AREA_MAX).contains(&frac),
                    "area fraction {frac} at {h}x{w}"
                );
                // inside pixels hold exactly the class fill value
                let fill = if s.prompt_id == 1 { DISC_FILL } else { RECT_FILL };
                for (i, &inside) in mask.iter().enumerate() {
                    if inside {
                        assert_eq!(s.latent.data()[i], fill);
                    }
                }
                assert!(s.prompt_id == 1 || s.prompt_id == 2);
            }
        }
    }

    #[test]
    fn shapes_mask_is_connected_single_component() {
        // flood fill from any interior pixel covers the whole mask
        let mut rng = Rng64::new(22);
        for _ in 0..50 {
            let s: ToySample<f64> = ToyDataset::Shapes.sample(1, 16, 16, &mut rng);
            let mask = s.mask.unwrap();
            let (h, w) = (16usize, 16usize);
            let start = mask.iter().position(|&b| b).unwrap();
            let mut seen = vec![false; h * w];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut push = |yy: usize, xx: usize| {
                    let j = yy * w + xx;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(y - 1, x);
                }
                if y + 1 < h {
                    push(y + 1, x);
                }
                if x > 0 {
                    push(y, x - 1);
                }
                if x + 1 < w {
                    push(y, x + 1);
                }
            }
            for i in 0..h * w {
                assert_eq!(seen[i], mask[i]);
            }
        }
    }

    #[test]
    fn same_seed_identical_stream() {
        for name in ["gaussian", "two-gaussians", "shapes", "checker"] {
            let ds: ToyDataset = name.parse().unwrap();
            let a = generate::<f64>(&ds, 33, 20, (1, 8, 8));
            let b = generate::<f64>(&ds, 33, 20, (1, 8, 8));
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.latent.data(), y.latent.data(), "{name}");
                assert_eq!(x.prompt_id, y.prompt_id);
                assert_eq!(x.mask, y.mask);
            }
        }
    }

    #[test]
    fn two_gaussians_hits_both_components() {
        let ds: ToyDataset = "two-gaussians".parse().unwrap();
        let samples = generate::<f64>(&ds, 40, 100, (1, 4, 4));
        let ones = samples.iter().filter(|s| s.prompt_id == 1).count();
        let twos = samples.iter().filter(|s| s.prompt_id == 2).count();
        assert!(ones > 20 && twos > 20, "{ones} vs {twos}");
        for s in &samples {
            let mean = s.latent.mean();
            if s.prompt_id == 1 {
                assert!(mean > 0.3, "{mean}");
            } else {
                assert!(mean < -0.3, "{mean}");
            }
        }
    }

    #[test]
    fn checker_alternates_sign_per_cell() {
        let ds = ToyDataset::Checker { period: 2 };
        let s: ToySample<f64> = ds.sample(1, 8, 8, &mut Rng64::new(41));
        let d = s.latent.data();
        // cells are 2x2; (0,0) cell and (0,1) cell differ in sign
        assert!(d[0].signum() != d[2].signum());
        assert!(d[0].signum() == d[1].signum());
        assert!(d.iter().all(|v| (v.abs() - 0.7).abs() < 0.3));
    }

    #[test]
    fn unknown_name_rejected() {
        assert!("swirl".parse::<ToyDataset>().is_err());
    }

    #[test]
    fn cache_round_trip_matches_direct_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shapes.cache");
        let ds = ToyDataset::Shapes;
        write_cache::<f64>(&path, &ds, 55, 12, (1, 8, 8)).unwrap();
        let cached = read_cache::<f64>(&path).unwrap();
        assert_eq!(cached.seed, 55);
        assert_eq!(cached.shape, (1, 8, 8));
        let direct = generate::<f64>(&ds, 55, 12, (1, 8, 8));
        assert_eq!(cached.samples.len(), direct.len());
        for (a, b) in cached.samples.iter().zip(&direct) {
            assert_eq!(a.latent.data(), b.latent.data());
            assert_eq!(a.prompt_id, b.prompt_id);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn cache_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cache");
        fs::write(&path, b"WXYZ123").unwrap();
        assert!(read_cache::<f64>(&path).is_err());
    }
}
