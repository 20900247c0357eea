//! Channel-first real-valued images with a declared value domain.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Value range an image's samples are expected to live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// `[0, 1]`, the I/O domain.
    Unit,
    /// `[-1, 1]`, the diffusion domain.
    Signed,
    /// `[0, 255]`, the 8-bit domain used by degradations and metrics.
    Byte,
}

impl Domain {
    pub fn min(self) -> f64 {
        match self {
            Domain::Unit | Domain::Byte => 0.0,
            Domain::Signed => -1.0,
        }
    }

    pub fn max(self) -> f64 {
        match self {
            Domain::Unit | Domain::Signed => 1.0,
            Domain::Byte => 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    domain: Domain,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        domain: Domain,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(&[channels * height * width], &[data.len()]));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            domain,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64, domain: Domain) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
            domain,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize, domain: Domain) -> Self {
        Self::filled(channels, height, width, 0.0, domain)
    }

    /// Standard-normal samples, declared in the signed domain.
    pub fn randn<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
            domain: Domain::Signed,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        domain: Domain,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
            domain,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(&self.shape(), &other.shape()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Affine remap between domains; no clamping.
    pub fn to_domain(&self, target: Domain) -> ImageTensor {
        if target == self.domain {
            return self.clone();
        }
        let (lo, hi) = (self.domain.min(), self.domain.max());
        let (tlo, thi) = (target.min(), target.max());
        let scale = (thi - tlo) / (hi - lo);
        let data = self.data.iter().map(|&v| (v - lo) * scale + tlo).collect();
        ImageTensor {
            data,
            domain: target,
            ..*self
        }
    }

    pub fn clamp_to_domain(mut self) -> Self {
        let (lo, hi) = (self.domain.min(), self.domain.max());
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
        self
    }

    /// Grayscale images are replicated to three channels; RGB is returned as-is.
    pub fn to_rgb(&self) -> Result<ImageTensor> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => {
                let mut data = Vec::with_capacity(self.data.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(&self.data);
                }
                ImageTensor::new(3, self.height, self.width, data, self.domain)
            }
            c => Err(invalid(format!("cannot convert {c}-channel image to RGB"))),
        }
    }

    /// BT.601 luma for RGB input; single-channel images pass through.
    pub fn luma(&self) -> Result<Vec<f64>> {
        match self.channels {
            1 => Ok(self.data.clone()),
            3 => {
                let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
                Ok(r.iter()
                    .zip(g)
                    .zip(b)
                    .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
                    .collect())
            }
            c => Err(invalid(format!("luma needs 1 or 3 channels, got {c}"))),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(invalid(format!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(self.channels, h, w, self.domain, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// Pads bottom/right by mirror reflection (edge pixel not repeated) up to
    /// at least `min_h` x `min_w`.
    pub fn reflect_pad_to(&self, min_h: usize, min_w: usize) -> ImageTensor {
        let h = self.height.max(min_h);
        let w = self.width.max(min_w);
        if h == self.height && w == self.width {
            return self.clone();
        }
        ImageTensor::from_fn(self.channels, h, w, self.domain, |c, y, x| {
            self.get(c, reflect_index(y, self.height), reflect_index(x, self.width))
        })
    }
}

/// Mirror index into `0..n` with period `2n - 2`.
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_round_trip() {
        let img = ImageTensor::from_fn(3, 2, 2, Domain::Unit, |c, y, x| (c + y + x) as f64 / 5.0);
        let back = img.to_domain(Domain::Signed).to_domain(Domain::Unit);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(img.to_domain(Domain::Byte).get(0, 0, 0), 0.0);
    }

    #[test]
    fn reflect_pad_mirrors() {
        let img = ImageTensor::from_fn(1, 1, 3, Domain::Unit, |_, _, x| x as f64);
        let p = img.reflect_pad_to(1, 6);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(ImageTensor::new(3, 2, 2, vec![0.0; 11], Domain::Unit).is_err());
    }
}
