#![allow(dead_code)]

use diffrestore::denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
use diffrestore::tape::{Tape, Var};
use diffrestore::{Domain, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gradient-check network: tiny, two blocks per level.
pub fn gradcheck_net() -> Denoiser {
    Denoiser::new(DenoiserConfig::tiny().with_blocks_per_level(2)).unwrap()
}

/// Initialised parameters with every tensor nudged off its init so that
/// zero-initialised projections pass gradient to everything upstream.
pub fn perturbed_params(net: &Denoiser, seed: u64, scale: f64) -> DenoiserParams {
    let mut p = net.init_params(seed);
    let mut r = rng(seed ^ 0x5eed);
    for i in 0..p.len() {
        for v in p.tensor_mut(i).data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
    p
}

pub fn random_signed(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::randn(c, h, w, &mut rng(seed)).with_domain(Domain::Signed)
}

/// `||eps_hat||_1` of the denoiser output.
pub fn output_l1(net: &Denoiser, p: &DenoiserParams, y: &ImageTensor, c: &ImageTensor, t: usize) -> f64 {
    net.forward(p, y, c, t).unwrap().data().iter().map(|v| v.abs()).sum()
}

/// Backprop gradient of `||eps_hat||_1` for every parameter tensor.
pub fn output_l1_grad(
    net: &Denoiser,
    p: &DenoiserParams,
    y: &ImageTensor,
    c: &ImageTensor,
    t: usize,
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let traced = net.trace(&mut tape, p, y, c, t).unwrap();
    let loss: Var = tape.sum_abs(traced.output);
    diffrestore::denoiser::collect_grads(&tape, loss, &traced.params, p)
        .into_iter()
        .map(|t| t.into_data())
        .collect()
}

/// Relative error with a floor on the denominator, absorbing the finite
/// difference roundoff on near-zero gradients.
pub fn rel_err(fd: f64, bp: f64) -> f64 {
    (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-3)
}

pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub fd: f64,
    pub bp: f64,
    pub rel: f64,
}

/// Central differences (step `h`) against backprop for `samples` parameters
/// drawn uniformly over all scalars of the gradient-check network.
pub fn sampled_gradient_check(samples: usize, seed: u64, h: f64) -> Vec<GradSample> {
    let net = gradcheck_net();
    let params = perturbed_params(&net, seed, 0.05);
    let y = random_signed(seed + 1, 3, 16, 16);
    let c = random_signed(seed + 2, 3, 16, 16);
    let t = 7;
    let grads = output_l1_grad(&net, &params, &y, &c, t);
    let total = params.num_scalars();
    let mut r = rng(seed + 3);
    (0..samples)
        .map(|_| {
            let mut pick = r.random_range(0..total);
            let mut id = 0;
            while pick >= params.tensor(id).len() {
                pick -= params.tensor(id).len();
                id += 1;
            }
            let mut plus = params.clone();
            plus.tensor_mut(id).data_mut()[pick] += h;
            let mut minus = params.clone();
            minus.tensor_mut(id).data_mut()[pick] -= h;
            let fd = (output_l1(&net, &plus, &y, &c, t) - output_l1(&net, &minus, &y, &c, t)) / (2.0 * h);
            let bp = grads[id][pick];
            GradSample {
                name: params.entries()[id].name.clone(),
                index: pick,
                fd,
                bp,
                rel: rel_err(fd, bp),
            }
        })
        .collect()
}
