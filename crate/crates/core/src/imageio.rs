//! Grayscale image export for sample inspection: binary PGM (P5), PNG, and
//! montage grids. Latents are mapped to bytes with an explicit [lo, hi]
//! window so outputs are deterministic and comparable across runs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Map one [C,H,W] latent to row-major grayscale bytes. Channels are
/// averaged; values at or below `lo` become 0, at or above `hi` become 255.
pub fn to_gray_bytes<T: Scalar>(latent: &Tensor<T>, lo: f64, hi: f64) -> Result<(usize, usize, Vec<u8>)> {
    let s = latent.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W] latent, got {s:?}")));
    }
    if !(hi > lo) {
        return Err(Error::usage(format!("gray window needs hi > lo, got [{lo}, {hi}]")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut bytes = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for ch in 0..c {
                v += latent.data()[ch * h * w + y * w + x].to_f64();
            }
            v /= c as f64;
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            bytes.push((t * 255.0).round() as u8);
        }
    }
    Ok((h, w, bytes))
}

pub fn write_pgm<T: Scalar>(path: &Path, latent: &Tensor<T>, lo: f64, hi: f64) -> Result<()> {
    let (h, w, bytes) = to_gray_bytes(latent, lo, hi)?;
    write_pgm_bytes(path, h, w, &bytes)
}

pub fn write_pgm_bytes(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != h * w {
        return Err(Error::shape(format!(
            "pgm body holds {} bytes for {h}x{w}",
            bytes.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

/// Minimal P5 reader for round-trip tests: returns (h, w, bytes).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path)?;
    let err = |m: &str| Error::data(format!("pgm {}: {m}", path.display()));
    // header = three whitespace-separated tokens after the magic
    if raw.len() < 2 || &raw[..2] != b"P5" {
        return Err(err("not a binary pgm"));
    }
    let mut pos = 2usize;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        let tok = std::str::from_utf8(&raw[start..pos]).map_err(|_| err("bad header token"))?;
        fields.push(
            tok.parse::<usize>()
                .map_err(|_| err("non-numeric header token"))?,
        );
    }
    pos += 1; // single whitespace byte after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err("only maxval 255 supported"));
    }
    if raw.len() < pos + h * w {
        return Err(err("body shorter than advertised"));
    }
    Ok((h, w, raw[pos..pos + h * w].to_vec()))
}

pub fn write_png<T: Scalar>(path: &Path, latent: &Tensor<T>, lo: f64, hi: f64) -> Result<()> {
    let (h, w, bytes) = to_gray_bytes(latent, lo, hi)?;
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::usage("png buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| Error::Data(format!("png write {}: {e}", path.display())))?;
    Ok(())
}

/// Tile samples into a montage with a 1-pixel black separator, row-major,
/// `cols` per row. All samples must share one shape.
pub fn sample_grid<T: Scalar>(
    samples: &[Tensor<T>],
    cols: usize,
    lo: f64,
    hi: f64,
) -> Result<(usize, usize, Vec<u8>)> {
    if samples.is_empty() || cols == 0 {
        return Err(Error::usage("grid needs samples and at least one column"));
    }
    let shape = samples[0].shape().to_vec();
    for s in samples {
        if s.shape() != shape {
            return Err(Error::shape("grid samples must share a shape".to_string()));
        }
    }
    let rows = samples.len().div_ceil(cols);
    let (h, w) = (shape[1], shape[2]);
    let gh = rows * h + (rows - 1);
    let gw = cols * w + (cols - 1);
    let mut grid = vec![0u8; gh * gw];
    for (i, s) in samples.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (_, _, bytes) = to_gray_bytes(s, lo, hi)?;
        let oy = r * (h + 1);
        let ox = c * (w + 1);
        for y in 0..h {
            let dst = (oy + y) * gw + ox;
            grid[dst..dst + w].copy_from_slice(&bytes[y * w..(y + 1) * w]);
        }
    }
    Ok((gh, gw, grid))
}

pub fn write_grid_pgm<T: Scalar>(
    path: &Path,
    samples: &[Tensor<T>],
    cols: usize,
    lo: f64,
    hi: f64,
) -> Result<()> {
    let (gh, gw, grid) = sample_grid(samples, cols, lo, hi)?;
    write_pgm_bytes(path, gh, gw, &grid)
}
