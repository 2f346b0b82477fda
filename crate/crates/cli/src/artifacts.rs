//! Artifact bookkeeping: every subcommand lists what it wrote in a
//! manifest under the output directory, and image batches go out as one
//! tiled PGM grid.

use std::path::{Path, PathBuf};

use flowmoe::error::{Error, Result};
use flowmoe::imageio::write_pgm_bytes;
use flowmoe::scalar::Scalar;
use flowmoe::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize)]
pub struct Artifact {
    pub name: String,
    pub path: String,
    pub kind: String,
}

impl Artifact {
    pub fn new(name: &str, path: &Path, kind: &str) -> Self {
        Artifact {
            name: name.to_string(),
            path: path.display().to_string(),
            kind: kind.to_string(),
        }
    }
}

pub fn write_artifact_manifest(dir: &Path, artifacts: &[Artifact]) -> Result<PathBuf> {
    let path = dir.join("artifacts.json");
    let text = serde_json::to_string_pretty(artifacts)
        .map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Map a latent in [-1, 1] to 8-bit gray, averaging channels.
fn to_gray<T: Scalar>(latent: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let s = latent.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W] latent, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let data = latent.data();
    let mut bytes = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for ch in 0..c {
                v += data[(ch * h + y) * w + x].to_f64();
            }
            v /= c as f64;
            bytes[y * w + x] = (((v + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        }
    }
    Ok((h, w, bytes))
}

/// Tile samples row-major into a single grid image.
pub fn write_grid<T: Scalar>(path: &Path, samples: &[Tensor<T>]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::usage("cannot write an empty sample grid"));
    }
    let shape = samples[0].shape().to_vec();
    for s in samples {
        if s.shape() != shape.as_slice() {
            return Err(Error::shape("grid samples must share one shape".to_string()));
        }
    }
    let (h, w) = (shape[1], shape[2]);
    let cols = (samples.len() as f64).sqrt().ceil() as usize;
    let rows = samples.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut grid = vec![0u8; gh * gw];
    for (i, s) in samples.iter().enumerate() {
        let (_, _, cell) = to_gray(s)?;
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let src = &cell[y * w..(y + 1) * w];
            let off = (r * h + y) * gw + c * w;
            grid[off..off + w].copy_from_slice(src);
        }
    }
    write_pgm_bytes(path, gh, gw, &grid)
}

/// Write one latent as a PGM image.
pub fn write_image<T: Scalar>(path: &Path, latent: &Tensor<T>) -> Result<()> {
    let (h, w, bytes) = to_gray(latent)?;
    write_pgm_bytes(path, h, w, &bytes)
}

/// Read a PGM into a single-channel latent in [-1, 1], inverse of
/// `write_image` for single-channel inputs.
pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let (h, w, bytes) = flowmoe::imageio::read_pgm(path)?;
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Tensor::new(vec![1, h, w], data)
}
