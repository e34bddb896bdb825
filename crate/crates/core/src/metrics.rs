//! Image comparison measures: ℓ1, ℓ2 and SSIM.
//!
//! Two conventions are kept side by side. The *sum* convention quantises both
//! images to 8 bits and sums integer differences over the whole image
//! (`l1`: Σ|d|, `l2`: sqrt(Σd²)). The *normalised* convention works on the
//! `[0, 1]` values directly (`l1`: mean |d|, `l2`: mean d²), so `l2 ≤ l1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::generator::ImageTensor;
use crate::imageio::to_u8;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Error::contract(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ))
    );
    Ok(())
}

fn u8_diffs<'a>(a: &'a ImageTensor, b: &'a ImageTensor) -> impl Iterator<Item = i64> + 'a {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| i64::from(to_u8(x)) - i64::from(to_u8(y)))
}

/// Σ |a − b| over every channel value, in 0–255 units.
pub fn l1_error(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(u8_diffs(a, b).map(|d| d.abs()).sum::<i64>() as f64)
}

/// sqrt(Σ (a − b)²) in 0–255 units.
pub fn l2_error(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok((u8_diffs(a, b).map(|d| d * d).sum::<i64>() as f64).sqrt())
}

/// Mean |a − b| on `[0, 1]` values.
pub fn l1_normalized(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    a.mean_abs_diff(b)
}

/// Mean (a − b)² on `[0, 1]` values.
pub fn l2_normalized(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Normalised 1-D Gaussian of `SSIM_WINDOW` taps.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

// Separable "valid" filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, c)| c * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(t, c)| c * rows[(y + t) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions of every channel.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.dims3()?;
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        Error::contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ))
    );
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let e_aa = filter_valid(&aa, h, w, &taps);
        let e_bb = filter_valid(&bb, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Averages over a set of image pairs under both conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean per-image Σ|d| in 0–255 units.
    pub l1_sum: f64,
    /// Mean per-image sqrt(Σd²) in 0–255 units.
    pub l2_root_sum: f64,
    pub l1_mean_abs: f64,
    pub l2_mean_square: f64,
    pub ssim: f64,
    pub images: usize,
}

impl MetricReport {
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (&'a ImageTensor, &'a ImageTensor)>,
    ) -> Result<Self> {
        let mut acc = [0.0f64; 5];
        let mut n = 0usize;
        for (a, b) in pairs {
            let row = [
                l1_error(a, b)?,
                l2_error(a, b)?,
                l1_normalized(a, b)?,
                l2_normalized(a, b)?,
                ssim(a, b)?,
            ];
            acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            n += 1;
        }
        ensure!(n > 0, Error::contract("metric report over zero image pairs"));
        let m = acc.map(|s| s / n as f64);
        Ok(Self {
            l1_sum: m[0],
            l2_root_sum: m[1],
            l1_mean_abs: m[2],
            l2_mean_square: m[3],
            ssim: m[4],
            images: n,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("metric report", e.to_string()))
    }

    /// Aligned table; the 0–255 sums are rounded to integers here only.
    pub fn to_table(&self) -> String {
        let header = [
            "images",
            "l1 (sum)",
            "l2 (root-sum)",
            "ssim",
            "l1 (mean abs)",
            "l2 (mean sq)",
        ];
        let cells = [
            self.images.to_string(),
            format!("{:.0}", self.l1_sum),
            format!("{:.0}", self.l2_root_sum),
            format!("{:.3}", self.ssim),
            format!("{:.6}", self.l1_mean_abs),
            format!("{:.6}", self.l2_mean_square),
        ];
        let mut out = String::new();
        for (i, h) in header.iter().enumerate() {
            let w = h.len().max(cells[i].len());
            write!(out, "{}{h:>w$}", if i > 0 { "  " } else { "" }).expect("string write");
        }
        out.push('\n');
        for (i, c) in cells.iter().enumerate() {
            let w = header[i].len().max(c.len());
            write!(out, "{}{c:>w$}", if i > 0 { "  " } else { "" }).expect("string write");
        }
        out.push('\n');
        out
    }
}
