//! Sinusoidal timestep features and fixed positional embeddings.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw sinusoidal features for a timestep in [0,1]: interleaved
/// [sin(t·ω_j), cos(t·ω_j)] pairs with ω_j geometric from 1 to 10000.
pub fn timestep_features<T: Scalar>(t: f64, d: usize) -> Tensor<T> {
    assert!(d % 2 == 0, "timestep feature width must be even");
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for j in 0..half {
        let omega = if half > 1 {
            10000f64.powf(j as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push(T::from_f64((t * omega).sin()));
        out.push(T::from_f64((t * omega).cos()));
    }
    Tensor::new(vec![1, d], out).expect("timestep shape")
}

/// Interleaved sin/cos features of an integer position with wavelengths
/// geometric from 1 to 10000 (the transformer convention: frequency falls
/// with the pair index).
fn position_features(pos: f64, d: usize, out: &mut Vec<f64>) {
    let half = d / 2;
    for j in 0..half {
        let wavelength = if half > 1 {
            10000f64.powf(j as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        let ang = pos / wavelength;
        out.push(ang.sin());
        out.push(ang.cos());
    }
}

/// Fixed 1D positional embedding for a token sequence: [n, d].
pub fn pos_embed_1d<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    assert!(d % 2 == 0);
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        position_features(pos as f64, d, &mut data);
    }
    Tensor::new(vec![n, d], data.into_iter().map(T::from_f64).collect()).expect("pos1d shape")
}

/// Fixed 2D positional embedding over a gh×gw patch grid, row-major tokens:
/// first half of the features encodes the row, second half the column.
pub fn pos_embed_2d<T: Scalar>(gh: usize, gw: usize, d: usize) -> Tensor<T> {
    assert!(d % 4 == 0, "2D positional features need width divisible by 4");
    let half = d / 2;
    let mut data = Vec::with_capacity(gh * gw * d);
    for y in 0..gh {
        for x in 0..gw {
            position_features(y as f64, half, &mut data);
            position_features(x as f64, half, &mut data);
        }
    }
    Tensor::new(vec![gh * gw, d], data.into_iter().map(T::from_f64).collect())
        .expect("pos2d shape")
}
