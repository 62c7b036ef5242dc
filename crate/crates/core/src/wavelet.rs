//! Single-level orthonormal 2D Haar transform.
//!
//! For each 2×2 block `[[a, b], [c, d]]` of every channel:
//!
//! ```text
//! ll = (a + b + c + d) / 2
//! lh = (a + b - c - d) / 2   low-pass across columns, high-pass across rows
//! hl = (a - b + c - d) / 2   high-pass across columns, low-pass across rows
//! hh = (a - b - c + d) / 2
//! ```
//!
//! The 4×4 block matrix is orthogonal, so the transform preserves energy and
//! its inverse is its transpose.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    /// `(H, W)` of the analysed image.
    pub source_shape: (usize, usize),
}

impl SubbandSet {
    pub fn bands(&self) -> [&Tensor; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands()
            .iter()
            .flat_map(|b| b.data())
            .map(|v| v * v)
            .sum()
    }
}

/// Forward transform of an H×W×C image with even H and W.
pub fn dwt2(img: &Tensor) -> Result<SubbandSet> {
    let (h, w, ch) = img.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("dwt2 needs even height and width, got {h}×{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let n = h2 * w2 * ch;
    let (mut ll, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let px = img.data();
    for i in 0..h2 {
        for j in 0..w2 {
            for c in 0..ch {
                let a = px[((2 * i) * w + 2 * j) * ch + c];
                let b = px[((2 * i) * w + 2 * j + 1) * ch + c];
                let cc = px[((2 * i + 1) * w + 2 * j) * ch + c];
                let d = px[((2 * i + 1) * w + 2 * j + 1) * ch + c];
                let o = (i * w2 + j) * ch + c;
                ll[o] = (a + b + cc + d) * 0.5;
                lh[o] = (a + b - cc - d) * 0.5;
                hl[o] = (a - b + cc - d) * 0.5;
                hh[o] = (a - b - cc + d) * 0.5;
            }
        }
    }
    let shape = [h2, w2, ch];
    Ok(SubbandSet {
        ll: Tensor::new(&shape, ll)?,
        lh: Tensor::new(&shape, lh)?,
        hl: Tensor::new(&shape, hl)?,
        hh: Tensor::new(&shape, hh)?,
        source_shape: (h, w),
    })
}

/// Inverse transform.
pub fn idwt2(bands: &SubbandSet) -> Result<Tensor> {
    let (h2, w2, ch) = bands.ll.dims3()?;
    for (name, b) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if b.shape() != bands.ll.shape() {
            return Err(Error::dim(format!(
                "idwt2: band {name} has shape {:?}, ll has {:?}",
                b.shape(),
                bands.ll.shape()
            )));
        }
    }
    let (h, w) = bands.source_shape;
    if h != 2 * h2 || w != 2 * w2 {
        return Err(Error::dim(format!(
            "idwt2: source shape {h}×{w} inconsistent with band shape {:?}",
            bands.ll.shape()
        )));
    }
    let mut out = vec![0.0; h * w * ch];
    let (ll, lh, hl, hh) = (bands.ll.data(), bands.lh.data(), bands.hl.data(), bands.hh.data());
    for i in 0..h2 {
        for j in 0..w2 {
            for c in 0..ch {
                let o = (i * w2 + j) * ch + c;
                let (s, v, hz, dg) = (ll[o], lh[o], hl[o], hh[o]);
                out[((2 * i) * w + 2 * j) * ch + c] = (s + v + hz + dg) * 0.5;
                out[((2 * i) * w + 2 * j + 1) * ch + c] = (s + v - hz - dg) * 0.5;
                out[((2 * i + 1) * w + 2 * j) * ch + c] = (s - v + hz - dg) * 0.5;
                out[((2 * i + 1) * w + 2 * j + 1) * ch + c] = (s - v - hz + dg) * 0.5;
            }
        }
    }
    Tensor::new(&[h, w, ch], out)
}

/// Channel-summed squared HH magnitude, box-averaged over a `window`×`window`
/// neighbourhood (zero outside the band, divisor always `window²`).
pub fn hh_energy_map(bands: &SubbandSet, window: usize) -> Result<Tensor> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Parameter(format!("energy window must be odd and ≥ 1, got {window}")));
    }
    let (h2, w2, ch) = bands.hh.dims3()?;
    let raw: Vec<f64> = bands
        .hh
        .data()
        .chunks(ch)
        .map(|px| px.iter().map(|v| v * v).sum())
        .collect();
    if window == 1 {
        return Tensor::new(&[h2, w2], raw);
    }
    let r = (window / 2) as isize;
    let norm = (window * window) as f64;
    let mut out = vec![0.0; h2 * w2];
    for i in 0..h2 as isize {
        for j in 0..w2 as isize {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && x >= 0 && (y as usize) < h2 && (x as usize) < w2 {
                        acc += raw[y as usize * w2 + x as usize];
                    }
                }
            }
            out[i as usize * w2 + j as usize] = acc / norm;
        }
    }
    Tensor::new(&[h2, w2], out)
}
