//! Ancestral reverse sampling conditioned on a degraded image, with tiled
//! inference for images larger than one tile.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::image::{Domain, ImageTensor};
use crate::schedule::NoiseSchedule;

/// Posterior mean `(y_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn reverse_mean(y_t: &ImageTensor, eps_hat: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.check_step(t)?;
    y_t.ensure_same_shape(eps_hat)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let one_minus_abar = 1.0 - sched.alpha_bar(t);
    let coef = if one_minus_abar > 0.0 {
        sched.beta(t) / one_minus_abar.sqrt()
    } else {
        0.0
    };
    let data = y_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(y, e)| inv_sqrt_alpha * (y - coef * e))
        .collect();
    ImageTensor::new(y_t.channels(), y_t.height(), y_t.width(), data, y_t.domain())
}

/// One ancestral step `y_t -> y_{t-1}`; noise with variance equal to the
/// posterior variance is added for `t > 1`, the last step is deterministic.
pub fn reverse_step<R: Rng + ?Sized>(
    y_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    let mut out = reverse_mean(y_t, eps_hat, t, sched)?;
    if t > 1 {
        let sigma = sched.posterior_variance(t).sqrt();
        for v in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(out)
}

/// Runs `t = T..1` from `y_T`. `predict(y_t, t)` returns the noise estimate;
/// with `stochastic == false` every step uses the posterior mean only.
pub fn reverse_chain<R: Rng + ?Sized>(
    y_t: ImageTensor,
    sched: &NoiseSchedule,
    mut predict: impl FnMut(&ImageTensor, usize) -> Result<ImageTensor>,
    rng: &mut R,
    stochastic: bool,
) -> Result<ImageTensor> {
    let mut y = y_t;
    for t in (1..=sched.steps()).rev() {
        let eps_hat = predict(&y, t)?;
        y = if stochastic {
            reverse_step(&y, &eps_hat, t, sched, rng)?
        } else {
            reverse_mean(&y, &eps_hat, t, sched)?
        };
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestoreConfig {
    pub tile: usize,
    pub overlap: usize,
    pub seed: u64,
    /// Visit every `stride`-th timestep only; `None` runs the full chain.
    pub stride: Option<usize>,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            tile: 128,
            overlap: 16,
            seed: 0,
            stride: None,
        }
    }
}

/// Tile origin plus its normalised blend weights (`tile x tile`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TileWeights {
    pub y: usize,
    pub x: usize,
    pub weights: Vec<f64>,
}

fn tile_starts(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + tile < n).collect();
    starts.push(n - tile);
    starts.dedup();
    starts
}

fn ramp(tile: usize, overlap: usize, has_prev: bool, has_next: bool) -> Vec<f64> {
    (0..tile)
        .map(|i| {
            let mut w: f64 = 1.0;
            if has_prev && i < overlap {
                w = w.min((i + 1) as f64 / (overlap + 1) as f64);
            }
            if has_next && tile - 1 - i < overlap {
                w = w.min((tile - i) as f64 / (overlap + 1) as f64);
            }
            w
        })
        .collect()
}

/// Tiles covering an `h x w` image (both at least `tile`) with linear ramps
/// over the overlaps, normalised so the weights sum to one at every pixel.
pub fn tile_weights(h: usize, w: usize, tile: usize, overlap: usize) -> Result<Vec<TileWeights>> {
    if tile == 0 || 2 * overlap >= tile {
        return Err(invalid(format!("need 0 <= overlap < tile/2, got tile={tile} overlap={overlap}")));
    }
    if h < tile || w < tile {
        return Err(invalid(format!("image {h}x{w} smaller than tile {tile}")));
    }
    let ys = tile_starts(h, tile, overlap);
    let xs = tile_starts(w, tile, overlap);
    let mut tiles = Vec::with_capacity(ys.len() * xs.len());
    let mut total = vec![0.0; h * w];
    for (iy, &y) in ys.iter().enumerate() {
        let ry = ramp(tile, overlap, iy > 0, iy + 1 < ys.len());
        for (ix, &x) in xs.iter().enumerate() {
            let rx = ramp(tile, overlap, ix > 0, ix + 1 < xs.len());
            let mut weights = Vec::with_capacity(tile * tile);
            for (dy, wy) in ry.iter().enumerate() {
                for (dx, wx) in rx.iter().enumerate() {
                    let v = wy * wx;
                    weights.push(v);
                    total[(y + dy) * w + x + dx] += v;
                }
            }
            tiles.push(TileWeights { y, x, weights });
        }
    }
    for t in &mut tiles {
        for dy in 0..tile {
            for dx in 0..tile {
                t.weights[dy * tile + dx] /= total[(t.y + dy) * w + t.x + dx];
            }
        }
    }
    Ok(tiles)
}

/// Restores `degraded` by running the conditional reverse chain from pure
/// noise on every tile and blending the results. Output is in the unit
/// domain; a fixed seed gives bit-identical results regardless of the number
/// of worker threads.
pub fn restore(
    degraded: &ImageTensor,
    model: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &RestoreConfig,
) -> Result<ImageTensor> {
    let mcfg = model.config();
    if degraded.channels() != mcfg.image_channels {
        return Err(Error::shape(
            &[mcfg.image_channels, degraded.height(), degraded.width()],
            &degraded.shape(),
        ));
    }
    let m = mcfg.size_multiple();
    if cfg.tile == 0 || !cfg.tile.is_multiple_of(m) {
        return Err(invalid(format!("tile {} must be a positive multiple of {m}", cfg.tile)));
    }
    model.check_params(params)?;

    let (sched, timesteps) = match cfg.stride {
        Some(s) if s > 1 => sched.respaced(s)?,
        _ => (sched.clone(), (1..=sched.steps()).collect()),
    };

    let (h, w) = (degraded.height(), degraded.width());
    let cond = degraded.to_domain(Domain::Signed).reflect_pad_to(cfg.tile, cfg.tile);
    let (ph, pw) = (cond.height(), cond.width());
    let tiles = tile_weights(ph, pw, cfg.tile, cfg.overlap)?;

    let outputs: Vec<Result<ImageTensor>> = tiles
        .par_iter()
        .enumerate()
        .map(|(i, tw)| {
            let cond_tile = cond.crop(tw.y, tw.x, cfg.tile, cfg.tile)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let y_t = ImageTensor::randn(cond.channels(), cfg.tile, cfg.tile, &mut rng);
            let predict = |y: &ImageTensor, k: usize| model.forward(params, y, &cond_tile, timesteps[k - 1]);
            reverse_chain(y_t, &sched, predict, &mut rng, true).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("tile {i}: {msg}")),
                other => other,
            })
        })
        .collect();

    let c = cond.channels();
    let mut acc = vec![0.0; c * ph * pw];
    for (tw, out) in tiles.iter().zip(outputs) {
        let out = out?;
        for ch in 0..c {
            for dy in 0..cfg.tile {
                for dx in 0..cfg.tile {
                    let wgt = tw.weights[dy * cfg.tile + dx];
                    acc[(ch * ph + tw.y + dy) * pw + tw.x + dx] += wgt * out.get(ch, dy, dx);
                }
            }
        }
    }
    let blended = ImageTensor::new(c, ph, pw, acc, Domain::Signed)?;
    let restored = blended.crop(0, 0, h, w)?.clamp_to_domain();
    Ok(restored.to_domain(Domain::Unit).clamp_to_domain())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::{forward_marginal, ScheduleConfig};

    #[test]
    fn last_step_is_deterministic() {
        let sched = ScheduleConfig::scaled_for(50).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = ImageTensor::randn(3, 4, 4, &mut rng);
        let e = ImageTensor::randn(3, 4, 4, &mut rng);
        let a = reverse_step(&y, &e, 1, &sched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = reverse_step(&y, &e, 1, &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, reverse_mean(&y, &e, 1, &sched).unwrap());
    }

    #[test]
    fn zero_beta_zero_eps_is_identity() {
        let sched = NoiseSchedule::from_betas(vec![0.1, 0.0, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = ImageTensor::randn(3, 4, 4, &mut rng);
        let zero = ImageTensor::zeros(3, 4, 4, Domain::Signed);
        let out = reverse_step(&y, &zero, 2, &sched, &mut rng).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn out_of_range_step() {
        let sched = ScheduleConfig::scaled_for(10).build().unwrap();
        let y = ImageTensor::zeros(1, 2, 2, Domain::Signed);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(reverse_step(&y, &y, 0, &sched, &mut rng).is_err());
        assert!(reverse_step(&y, &y, 11, &sched, &mut rng).is_err());
    }

    #[test]
    fn oracle_noise_inverts_chain() {
        let sched = ScheduleConfig::scaled_for(50).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y0 = ImageTensor::randn(3, 8, 8, &mut rng).to_domain(Domain::Signed);
        let (y_t, _) = forward_marginal(&y0, 50, &sched, &mut rng).unwrap();
        let oracle = |y: &ImageTensor, t: usize| {
            let s = sched.sqrt_alpha_bars()[t - 1];
            let r = sched.sqrt_one_minus_alpha_bars()[t - 1];
            let d = y.data().iter().zip(y0.data()).map(|(a, b)| (a - s * b) / r).collect();
            ImageTensor::new(3, 8, 8, d, Domain::Signed)
        };
        let out = reverse_chain(y_t, &sched, oracle, &mut rng, false).unwrap();
        let err = out.data().iter().zip(y0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "max error {err}");
    }

    #[test]
    fn weights_partition_unity() {
        for &(h, w, tile, overlap) in &[(64, 64, 32, 8), (70, 45, 32, 15), (32, 32, 32, 0), (100, 33, 16, 4)] {
            let tiles = tile_weights(h, w, tile, overlap).unwrap();
            let mut sum = vec![0.0; h * w];
            for t in &tiles {
                for dy in 0..tile {
                    for dx in 0..tile {
                        let v = t.weights[dy * tile + dx];
                        assert!(v > 0.0);
                        sum[(t.y + dy) * w + t.x + dx] += v;
                    }
                }
            }
            assert!(sum.iter().all(|s| (s - 1.0).abs() <= 1e-9), "{h}x{w} tile {tile}/{overlap}");
        }
    }

    #[test]
    fn single_tile_when_exact() {
        let tiles = tile_weights(32, 32, 32, 0).unwrap();
        assert_eq!(tiles.len(), 1);
        assert!(tiles[0].weights.iter().all(|&v| v == 1.0));
        assert!(tile_weights(32, 32, 32, 16).is_err());
    }

    #[test]
    fn restore_deterministic_and_in_range() {
        let cfg = DenoiserConfig::tiny();
        let model = Denoiser::new(cfg).unwrap();
        let params = model.init_params(1);
        let sched = ScheduleConfig::scaled_for(4).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ImageTensor::from_fn(3, 12, 20, Domain::Unit, |_, _, _| rng.random_range(0.0..1.0));
        let rc = RestoreConfig {
            tile: 8,
            overlap: 2,
            seed: 3,
            stride: None,
        };
        let a = restore(&img, &model, &params, &sched, &rc).unwrap();
        let b = restore(&img, &model, &params, &sched, &rc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [3, 12, 20]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
