//! Image quality metrics: PSNR and SSIM against a reference, UIQM and UCIQE
//! without one.
//!
//! Full-reference metrics work on the 8-bit scale whatever the input domain.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::image::{Domain, ImageTensor};

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let a = a.to_domain(Domain::Byte);
    let b = b.to_domain(Domain::Byte);
    let sse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the BT.601 luma planes with an 11x11 Gaussian window.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let la = a.to_domain(Domain::Byte).luma()?;
    let lb = b.to_domain(Domain::Byte).luma()?;
    let k = gaussian_window();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&la, h, w, &k);
    let mu_b = filter_valid(&lb, h, w, &k);
    let e_aa = filter_valid(&sq(&la), h, w, &k);
    let e_bb = filter_valid(&sq(&lb), h, w, &k);
    let e_ab = filter_valid(&prod, h, w, &k);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok((total / mu_a.len() as f64).clamp(-1.0, 1.0))
}

/// CIELab planes (L in `[0, 100]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Input samples that were outside `[0, 1]` and got clamped.
    pub clamped: usize,
}

/// Linear sRGB to XYZ (D65), rows divided by the white point so that
/// `(1, 1, 1)` maps to `(1, 1, 1)`.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

/// sRGB in `[0, 1]` (any domain is first mapped there) to CIELab under D65.
pub fn rgb_to_lab(img: &ImageTensor) -> Result<LabImage> {
    if img.channels() != 3 {
        return Err(invalid("Lab conversion needs an RGB image"));
    }
    let unit = img.to_domain(Domain::Unit);
    let mut m = RGB_TO_XYZ;
    for row in &mut m {
        let white: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= white);
    }
    let n = unit.height() * unit.width();
    let mut clamped = 0;
    let mut lab = LabImage {
        l: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        clamped: 0,
    };
    let mut decode = |v: f64| {
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
        }
        srgb_decode(v.clamp(0.0, 1.0))
    };
    for i in 0..n {
        let r = decode(unit.channel(0)[i]);
        let g = decode(unit.channel(1)[i]);
        let b = decode(unit.channel(2)[i]);
        // Offsets from green keep achromatic pixels exactly achromatic.
        let (dr, db) = (r - g, b - g);
        let xyz = m.map(|row| g + row[0] * dr + row[2] * db);
        let [fx, fy, fz] = xyz.map(lab_f);
        let l = if xyz[1] > LAB_EPSILON {
            116.0 * fy - 16.0
        } else {
            LAB_KAPPA * xyz[1]
        };
        lab.l.push(l);
        lab.a.push(500.0 * (fx - fy));
        lab.b.push(200.0 * (fy - fz));
    }
    if clamped > 0 {
        log::warn!("rgb_to_lab: clamped {clamped} out-of-range samples");
    }
    lab.clamped = clamped;
    Ok(lab)
}

/// Linear-interpolated empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Uciqe {
    pub uciqe: f64,
    pub sigma_chroma: f64,
    pub contrast_l: f64,
    pub mean_saturation: f64,
}

/// Weighted sum of chroma spread, lightness contrast (99th minus 1st
/// percentile) and mean saturation, with Lab scaled by 1/100.
pub fn uciqe(img: &ImageTensor) -> Result<Uciqe> {
    if img.channels() != 3 {
        return Err(invalid("UCIQE needs an RGB image"));
    }
    let lab = rgb_to_lab(img)?;
    let n = lab.l.len() as f64;
    let l: Vec<f64> = lab.l.iter().map(|v| v / 100.0).collect();
    let chroma: Vec<f64> = lab
        .a
        .iter()
        .zip(&lab.b)
        .map(|(a, b)| ((a / 100.0).powi(2) + (b / 100.0).powi(2)).sqrt())
        .collect();
    let mean_c = chroma.iter().sum::<f64>() / n;
    let sigma_chroma = (chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = l.clone();
    sorted.sort_by(f64::total_cmp);
    let contrast_l = quantile_sorted(&sorted, 0.99) - quantile_sorted(&sorted, 0.01);
    let mean_saturation = chroma.iter().zip(&l).map(|(c, l)| c / (l + 1e-6)).sum::<f64>() / n;
    Ok(Uciqe {
        uciqe: 0.4680 * sigma_chroma + 0.2745 * contrast_l + 0.2576 * mean_saturation,
        sigma_chroma,
        contrast_l,
        mean_saturation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Uiqm {
    pub uiqm: f64,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

pub const UIQM_BLOCK: usize = 8;
const UICM_ALPHA: f64 = 0.1;

/// Mean of the sorted values after dropping `ceil(alpha n)` from the bottom
/// and `floor(alpha n)` from the top, plus the mean squared deviation of all
/// values from it. Both sums run over the sorted data.
fn trimmed_stats(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let lo = (UICM_ALPHA * n as f64).ceil() as usize;
    let hi = (UICM_ALPHA * n as f64).floor() as usize;
    let kept = &v[lo.min(n)..n - hi.min(n - lo.min(n))];
    let mu = if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
    (mu, var)
}

/// Colourfulness from the opponent channels RG and YB.
pub fn uicm(img: &ImageTensor) -> Result<f64> {
    let img = require_uiqm_input(img)?;
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(g).zip(b).map(|((r, g), b)| (r + g) / 2.0 - b).collect();
    let (mu_rg, var_rg) = trimmed_stats(rg);
    let (mu_yb, var_yb) = trimmed_stats(yb);
    Ok(-0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt())
}

fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Calls `f(min, max)` for every full 8x8 block, row-major; returns the
/// block count.
fn for_each_block(plane: &[f64], h: usize, w: usize, mut f: impl FnMut(f64, f64)) -> usize {
    let (by, bx) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    for i in 0..by {
        for j in 0..bx {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in i * UIQM_BLOCK..(i + 1) * UIQM_BLOCK {
                for x in j * UIQM_BLOCK..(j + 1) * UIQM_BLOCK {
                    let v = plane[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            f(lo, hi);
        }
    }
    by * bx
}

/// Measure of enhancement: `(2/K) sum ln(max/min)` over 8x8 blocks.
fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    let k = for_each_block(plane, h, w, |lo, hi| {
        if lo > 0.0 && hi > lo {
            acc += (hi / lo).ln();
        }
    });
    2.0 * acc / k as f64
}

/// Sharpness: luma-weighted EME of each channel's Sobel edge map multiplied
/// by the channel.
pub fn uism(img: &ImageTensor) -> Result<f64> {
    let img = require_uiqm_input(img)?;
    let (h, w) = (img.height(), img.width());
    let weights = [0.299, 0.587, 0.114];
    let mut total = 0.0;
    for (c, lambda) in weights.iter().enumerate() {
        let plane = img.channel(c);
        let edges: Vec<f64> = sobel_magnitude(plane, h, w).iter().zip(plane).map(|(e, v)| e * v).collect();
        total += lambda * eme(&edges, h, w);
    }
    Ok(total)
}

/// Contrast: block mean of `w ln w` with `w = (max - min) / (max + min)` on
/// the luma plane.
pub fn uiconm(img: &ImageTensor) -> Result<f64> {
    let img = require_uiqm_input(img)?;
    let (h, w) = (img.height(), img.width());
    let luma = img.luma()?;
    let mut acc = 0.0;
    let k = for_each_block(&luma, h, w, |lo, hi| {
        let sum = hi + lo;
        if sum > 0.0 {
            let ratio = (hi - lo) / sum;
            if ratio > 0.0 {
                acc += ratio * ratio.ln();
            }
        }
    });
    Ok(acc / k as f64)
}

pub fn uiqm(img: &ImageTensor) -> Result<Uiqm> {
    let uicm = uicm(img)?;
    let uism = uism(img)?;
    let uiconm = uiconm(img)?;
    Ok(Uiqm {
        uiqm: 0.0282 * uicm + 0.2953 * uism + 3.5753 * uiconm,
        uicm,
        uism,
        uiconm,
    })
}

fn require_uiqm_input(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(invalid("UIQM needs an RGB image"));
    }
    if img.height() < UIQM_BLOCK || img.width() < UIQM_BLOCK {
        return Err(invalid(format!(
            "UIQM needs at least {UIQM_BLOCK}x{UIQM_BLOCK}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(img.to_domain(Domain::Byte))
}

/// All metrics for a restored image against its reference; the
/// no-reference scores describe `restored`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub uiqm: Uiqm,
    pub uciqe: Uciqe,
}

impl MetricReport {
    pub fn compute(restored: &ImageTensor, reference: &ImageTensor) -> Result<Self> {
        let restored = restored.to_rgb()?;
        let reference = reference.to_rgb()?;
        Ok(Self {
            psnr: psnr(&restored, &reference)?,
            ssim: ssim(&restored, &reference)?,
            uiqm: uiqm(&restored)?,
            uciqe: uciqe(&restored)?,
        })
    }

    pub const CSV_HEADER: &'static str =
        "name,psnr,ssim,uicm,uism,uiconm,uiqm,sigma_chroma,contrast_l,mean_saturation,uciqe";

    /// Values in [`Self::CSV_HEADER`] order after the name; infinite PSNR is
    /// written as `inf`.
    pub fn csv_fields(&self) -> String {
        let fmt = |v: f64| {
            if v == f64::INFINITY {
                "inf".to_string()
            } else {
                format!("{v}")
            }
        };
        [
            self.psnr,
            self.ssim,
            self.uiqm.uicm,
            self.uiqm.uism,
            self.uiqm.uiconm,
            self.uiqm.uiqm,
            self.uciqe.sigma_chroma,
            self.uciqe.contrast_l,
            self.uciqe.mean_saturation,
            self.uciqe.uciqe,
        ]
        .map(fmt)
        .join(",")
    }

    /// Field-wise mean.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            uiqm: Uiqm {
                uiqm: avg(|r| r.uiqm.uiqm),
                uicm: avg(|r| r.uiqm.uicm),
                uism: avg(|r| r.uiqm.uism),
                uiconm: avg(|r| r.uiqm.uiconm),
            },
            uciqe: Uciqe {
                uciqe: avg(|r| r.uciqe.uciqe),
                sigma_chroma: avg(|r| r.uciqe.sigma_chroma),
                contrast_l: avg(|r| r.uciqe.contrast_l),
                mean_saturation: avg(|r| r.uciqe.mean_saturation),
            },
        })
    }
}
