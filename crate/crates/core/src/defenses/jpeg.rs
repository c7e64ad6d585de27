//! Grayscale JPEG compression round trip without entropy coding: each 8×8
//! block is level-shifted, transformed with the orthonormal DCT-II, quantized
//! with the scaled luminance table and transformed back. Every channel is
//! compressed as its own grayscale image.

use std::sync::OnceLock;

use super::{check_upstream, image_dims, Preprocessor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard luminance quantization table, row-major.
pub const LUMINANCE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance table scaled for `quality` in 1..=100.
pub fn luminance_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::contract(format!("jpeg quality must be in 1..=100, got {quality}")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality } as f64;
    Ok(LUMINANCE.map(|q| ((q * scale + 50.0) / 100.0).floor().max(1.0)))
}

/// `BASIS[u][x] = c(u)·cos((2x+1)uπ/16)`.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

fn dct(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|x| b[u][x] * block[x * 8 + y]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|y| tmp[u * 8 + y] * b[v][y]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for x in 0..8 {
        for v in 0..8 {
            tmp[x * 8 + v] = (0..8).map(|u| b[u][x] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for x in 0..8 {
        for y in 0..8 {
            out[x * 8 + y] = (0..8).map(|v| tmp[x * 8 + v] * b[v][y]).sum();
        }
    }
    out
}

/// Compresses one level-shifted block (values on the `[−128, 127]` scale).
/// With `rounding` off the quantizer is `F/Q·Q`, i.e. the bare transform pair.
pub fn jpeg_block(block: &[f64; 64], table: &[f64; 64], rounding: bool) -> [f64; 64] {
    let mut f = dct(block);
    for (c, q) in f.iter_mut().zip(table) {
        let scaled = *c / q;
        *c = if rounding { scaled.round() } else { scaled } * q;
    }
    idct(&f)
}

/// The full filter with an explicit table.
pub fn jpeg_filter_with_table(x: &Tensor, table: &[f64; 64], rounding: bool) -> Result<Tensor> {
    let (n, c, h, w) = image_dims("jpeg_filter", x)?;
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let data = x.data();
    let mut out = vec![0.0; x.numel()];
    let mut block = [0.0; 64];
    for plane in 0..n * c {
        let base = plane * h * w;
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                for r in 0..8 {
                    for s in 0..8 {
                        // Edge replication for the padded region.
                        let (i, j) = ((by + r).min(h - 1), (bx + s).min(w - 1));
                        block[r * 8 + s] = data[base + i * w + j] * 255.0 - 128.0;
                    }
                }
                let rec = jpeg_block(&block, table, rounding);
                for r in 0..8.min(h - by) {
                    for s in 0..8.min(w - bx) {
                        let v = (rec[r * 8 + s] + 128.0) / 255.0;
                        out[base + (by + r) * w + bx + s] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jpeg {
    quality: u32,
    table: [f64; 64],
}

impl Jpeg {
    pub fn new(quality: u32) -> Result<Self> {
        Ok(Jpeg {
            quality,
            table: luminance_table(quality)?,
        })
    }

    pub fn quality(&self) -> u32 {
        self.quality
    }
}

impl Preprocessor for Jpeg {
    fn describe(&self) -> String {
        format!("jpeg:{}", self.quality)
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        jpeg_filter_with_table(x, &self.table, true)
    }

    /// Piecewise constant in the input, so the gradient is zero.
    fn vjp(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        check_upstream("jpeg_vjp", input, upstream)?;
        Ok(Tensor::zeros(input.shape().to_vec()))
    }

    fn is_differentiable(&self) -> bool {
        false
    }
}
