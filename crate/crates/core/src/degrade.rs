//! Synthetic degradations for building clean/degraded training pairs.
//!
//! All generators return an image in the same domain as their input.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{Domain, ImageTensor};

/// Noise levels used for the denoising presets.
pub const NOISE_PRESETS: [f64; 3] = [15.0, 25.0, 50.0];

/// Adds `sigma * z` per element in the 8-bit scale and clamps to `[0, 255]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &ImageTensor, sigma: f64, rng: &mut R) -> Result<ImageTensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise sigma must be positive, got {sigma}")));
    }
    let mut out = img.to_domain(Domain::Byte);
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * z).clamp(0.0, 255.0);
    }
    Ok(out.to_domain(img.domain()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RainParams {
    pub streak_count: usize,
    /// Tilt from vertical in degrees.
    pub angle_deg: f64,
    pub length_px: usize,
    pub intensity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streak_count: 200,
            angle_deg: 10.0,
            length_px: 12,
            intensity: 0.6,
        }
    }
}

/// Pixels visited by a streak of `len` distinct pixels starting at
/// `(y0, x0)` and stepping one pixel per step along its major axis.
fn streak_pixels(y0: f64, x0: f64, dy: f64, dx: f64, len: usize) -> impl Iterator<Item = (i64, i64, usize)> {
    (0..len).map(move |k| {
        let k_f = k as f64;
        ((y0 + k_f * dy).round() as i64, (x0 + k_f * dx).round() as i64, k)
    })
}

/// Screen-blends bright oriented streaks into the image. Each streak has a
/// tapered brightness profile and the streak layer gets a light 3x3 blur.
pub fn synth_rain<R: Rng + ?Sized>(img: &ImageTensor, p: &RainParams, rng: &mut R) -> Result<ImageTensor> {
    if p.length_px == 0 {
        return Err(invalid("rain streak length must be positive"));
    }
    if !(p.intensity > 0.0 && p.intensity <= 1.0) {
        return Err(invalid(format!("rain intensity must be in (0, 1], got {}", p.intensity)));
    }
    if !p.angle_deg.is_finite() {
        return Err(invalid("rain angle must be finite"));
    }
    if p.streak_count == 0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let a = p.angle_deg.to_radians();
    let (sy, sx) = (a.cos(), a.sin());
    let major = sy.abs().max(sx.abs());
    let (dy, dx) = (sy / major, sx / major);
    let span_y = dy * (p.length_px - 1) as f64;
    let span_x = dx * (p.length_px - 1) as f64;

    let mut layer = vec![0.0; h * w];
    for _ in 0..p.streak_count {
        let y0 = start_in(rng, h, span_y);
        let x0 = start_in(rng, w, span_x);
        let strength = p.intensity * rng.random_range(0.7..=1.0);
        for (y, x, k) in streak_pixels(y0, x0, dy, dx, p.length_px) {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            let taper = 0.5 + 0.5 * (std::f64::consts::PI * (k as f64 + 0.5) / p.length_px as f64).sin();
            let v = strength * taper;
            let cell = &mut layer[y as usize * w + x as usize];
            *cell = 1.0 - (1.0 - *cell) * (1.0 - v);
        }
    }
    let layer = blur3(&layer, h, w);

    let mut out = img.to_domain(Domain::Byte);
    let c = out.channels();
    let data = out.data_mut();
    for ch in 0..c {
        for (i, s) in layer.iter().enumerate() {
            let v = &mut data[ch * h * w + i];
            *v = (*v + s * (255.0 - *v)).clamp(0.0, 255.0);
        }
    }
    Ok(out.to_domain(img.domain()))
}

/// Start coordinate so that a streak spanning `span` fits when possible.
fn start_in<R: Rng + ?Sized>(rng: &mut R, n: usize, span: f64) -> f64 {
    let max = (n - 1) as f64;
    let (lo, hi) = if span >= 0.0 { (0.0, max - span) } else { (-span, max) };
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo.min(max)
    }
}

/// Kernel `[1 2 1]^T [1 2 1] / 16` with replicated borders.
fn blur3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, wy) in K.iter().enumerate() {
                let yy = (y + ky).saturating_sub(1).min(h - 1);
                for (kx, wx) in K.iter().enumerate() {
                    let xx = (x + kx).saturating_sub(1).min(w - 1);
                    acc += wy * wx * src[yy * w + xx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnderwaterParams {
    /// Per-channel (R, G, B) transmission in `(0, 1]`.
    pub attenuation: [f64; 3],
    /// Veil colour in unit RGB.
    pub veil_color: [f64; 3],
    pub veil_strength: f64,
}

impl Default for UnderwaterParams {
    fn default() -> Self {
        Self {
            attenuation: [0.4, 0.85, 0.95],
            veil_color: [0.05, 0.45, 0.55],
            veil_strength: 0.25,
        }
    }
}

/// `out_c = attenuation_c * img_c + veil_strength * veil_c`, clamped, with
/// intensities measured on the unit scale.
pub fn synth_underwater(img: &ImageTensor, p: &UnderwaterParams) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(invalid("underwater synthesis needs an RGB image"));
    }
    if p.attenuation.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(invalid(format!("attenuation must lie in (0, 1], got {:?}", p.attenuation)));
    }
    if p.veil_color.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid(format!("veil colour must lie in [0, 1], got {:?}", p.veil_color)));
    }
    if !(0.0..1.0).contains(&p.veil_strength) {
        return Err(invalid(format!("veil strength must lie in [0, 1), got {}", p.veil_strength)));
    }
    // Byte and Unit are both zero-based, so the formula applies in place
    // after scaling the veil.
    let (mut out, scale) = match img.domain() {
        Domain::Byte => (img.clone(), 255.0),
        Domain::Unit => (img.clone(), 1.0),
        Domain::Signed => (img.to_domain(Domain::Unit), 1.0),
    };
    let plane = out.height() * out.width();
    let max = out.domain().max();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let offset = p.veil_strength * p.veil_color[c] * scale;
        for v in chunk {
            *v = (p.attenuation[c] * *v + offset).clamp(0.0, max);
        }
    }
    Ok(out.to_domain(img.domain()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gray(v: f64, h: usize, w: usize) -> ImageTensor {
        ImageTensor::filled(3, h, w, v, Domain::Byte)
    }

    fn std_of_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn tiny_sigma_is_near_identity() {
        let img = ImageTensor::from_fn(3, 8, 8, Domain::Byte, |c, y, x| ((c * 50 + y * 8 + x) % 256) as f64);
        let out = add_gaussian_noise(&img, 1e-12, &mut rng(0)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(add_gaussian_noise(&img, 0.0, &mut rng(0)).is_err());
        assert!(add_gaussian_noise(&img, -1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn noise_std_matches_sigma() {
        let img = ImageTensor::filled(1, 1000, 1000, 128.0, Domain::Byte);
        let out = add_gaussian_noise(&img, 25.0, &mut rng(1)).unwrap();
        let s = std_of_diff(&out, &img);
        assert!((s - 25.0).abs() / 25.0 < 0.01, "std {s}");
    }

    #[test]
    fn clamping_biases_black_upward() {
        let img = ImageTensor::filled(1, 100, 100, 0.0, Domain::Byte);
        let out = add_gaussian_noise(&img, 25.0, &mut rng(2)).unwrap();
        let mean = out.data().iter().sum::<f64>() / out.len() as f64;
        assert!(mean > 0.0);
    }

    #[test]
    fn noise_preserves_domain() {
        let img = ImageTensor::filled(3, 4, 4, 0.5, Domain::Unit);
        let out = add_gaussian_noise(&img, 15.0, &mut rng(3)).unwrap();
        assert_eq!(out.domain(), Domain::Unit);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_variances_add() {
        let img = ImageTensor::filled(1, 1000, 1000, 128.0, Domain::Byte);
        let mut r = rng(4);
        let once = add_gaussian_noise(&img, 15.0, &mut r).unwrap();
        let twice = add_gaussian_noise(&once, 20.0, &mut r).unwrap();
        let s = std_of_diff(&twice, &img);
        let expected = (15.0f64.powi(2) + 20.0f64.powi(2)).sqrt();
        assert!((s - expected).abs() / expected < 0.02, "std {s} vs {expected}");
    }

    #[test]
    fn no_streaks_is_identity() {
        let img = ImageTensor::from_fn(3, 16, 16, Domain::Byte, |c, y, x| ((c + y * x) % 200) as f64);
        let p = RainParams {
            streak_count: 0,
            ..RainParams::default()
        };
        assert_eq!(synth_rain(&img, &p, &mut rng(0)).unwrap(), img);
    }

    #[test]
    fn single_streak_brightens_its_line() {
        let img = gray(100.0, 40, 40);
        for angle in [0.0, 20.0, -35.0, 60.0, 90.0] {
            let p = RainParams {
                streak_count: 1,
                angle_deg: angle,
                length_px: 15,
                intensity: 1.0,
            };
            let out = synth_rain(&img, &p, &mut rng(7)).unwrap();
            let brighter = out.channel(0).iter().zip(img.channel(0)).filter(|(a, b)| a > b).count();
            assert!(brighter >= 15, "angle {angle}: {brighter} brighter pixels");
        }
    }

    #[test]
    fn rain_rejects_bad_params_and_is_deterministic() {
        let img = gray(80.0, 24, 24);
        let bad = RainParams {
            length_px: 0,
            ..RainParams::default()
        };
        assert!(synth_rain(&img, &bad, &mut rng(0)).is_err());
        let p = RainParams::default();
        let a = synth_rain(&img, &p, &mut rng(9)).unwrap();
        let b = synth_rain(&img, &p, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn underwater_identity() {
        let img = ImageTensor::from_fn(3, 9, 9, Domain::Byte, |c, y, x| ((c * 31 + y * 9 + x) % 256) as f64);
        let p = UnderwaterParams {
            attenuation: [1.0; 3],
            veil_color: [0.3, 0.6, 0.9],
            veil_strength: 0.0,
        };
        assert_eq!(synth_underwater(&img, &p).unwrap(), img);
    }

    #[test]
    fn underwater_channel_order_on_white() {
        let img = gray(255.0, 4, 4);
        let p = UnderwaterParams {
            attenuation: [0.3, 0.9, 1.0],
            veil_color: [0.0; 3],
            veil_strength: 0.0,
        };
        let out = synth_underwater(&img, &p).unwrap();
        for i in 0..16 {
            let (r, g, b) = (out.channel(0)[i], out.channel(1)[i], out.channel(2)[i]);
            assert!(b >= g && g > r);
        }
    }

    #[test]
    fn underwater_means_follow_affine_formula() {
        let mut r = rng(11);
        let img = ImageTensor::from_fn(3, 16, 16, Domain::Unit, |_, _, _| r.random_range(0.0..0.6));
        let p = UnderwaterParams::default();
        let out = synth_underwater(&img, &p).unwrap();
        for c in 0..3 {
            let mean = |t: &ImageTensor| t.channel(c).iter().sum::<f64>() / 256.0;
            let expected = p.attenuation[c] * mean(&img) + p.veil_strength * p.veil_color[c];
            assert!((mean(&out) - expected).abs() <= 1e-9);
        }
    }

    #[test]
    fn underwater_rejects_out_of_range() {
        let img = gray(10.0, 4, 4);
        let mut p = UnderwaterParams::default();
        p.attenuation[1] = 0.0;
        assert!(synth_underwater(&img, &p).is_err());
        let mut p = UnderwaterParams::default();
        p.veil_strength = 1.0;
        assert!(synth_underwater(&img, &p).is_err());
    }
}
