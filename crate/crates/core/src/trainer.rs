//! Noise-prediction training: sample `t` and `eps`, noise the clean image in
//! closed form, regress `eps` with an element-mean L1 loss and update with
//! Adam under the freeze mask.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_patch, Checkpoint, ImagePair, RngState};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::image::{Domain, ImageTensor};
use crate::schedule::{forward_marginal_with, NoiseSchedule, ScheduleConfig};
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to zero over `total_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    pub patch_size: usize,
    pub freeze_encoder: bool,
    /// Extra parameter-name prefixes to hold fixed.
    pub freeze_prefixes: Vec<String>,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 100_000,
            patch_size: 128,
            freeze_encoder: true,
            freeze_prefixes: Vec::new(),
            seed: 0,
            checkpoint_every: 1000,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// `size_multiple` is the denoiser's spatial divisibility requirement.
    pub fn validate(&self, size_multiple: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(size_multiple) {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {size_multiple}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Learning rate for the update that follows `completed` earlier updates.
    pub fn lr_at(&self, completed: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let total = self.total_steps.max(1) as f64;
                let frac = (completed as f64 / total).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn check_shapes(&self, params: &DenoiserParams) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((m, v), e) in self.m.iter().zip(&self.v).zip(params.entries()) {
            if m.shape() != e.tensor.shape() || v.shape() != e.tensor.shape() {
                return Err(Error::shape(e.tensor.shape(), m.shape()));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss(eps_hat: &ImageTensor, eps: &ImageTensor) -> Result<f64> {
    eps_hat.ensure_same_shape(eps)?;
    let sum: f64 = eps_hat.data().iter().zip(eps.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / eps.len() as f64)
}

/// One bias-corrected Adam update. Frozen tensors (and their moments) are
/// left untouched. Gradients are checked before anything is modified.
pub fn adam_update(
    params: &mut DenoiserParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.check_shapes(params)?;
    if grads.len() != params.len() {
        return Err(invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (g, e) in grads.iter().zip(params.entries()) {
        if g.shape() != e.tensor.shape() {
            return Err(Error::shape(e.tensor.shape(), g.shape()));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", e.name)));
        }
    }

    state.step += 1;
    let k = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    let mask = params.trainable_mask();
    for (i, g) in grads.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let theta = params.tensor_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..theta.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Anything that can score a noise prediction and differentiate it.
pub trait NoisePredictor: Sync {
    /// Element-mean L1 loss of the prediction for `(y_t, cond, t)` against
    /// `eps`, with one gradient tensor per parameter.
    fn loss_and_grad(
        &self,
        params: &DenoiserParams,
        y_t: &ImageTensor,
        cond: &ImageTensor,
        t: usize,
        eps: &ImageTensor,
    ) -> Result<(f64, Vec<Tensor>)>;

    /// Spatial size multiple required of inputs.
    fn size_multiple(&self) -> usize {
        1
    }
}

impl NoisePredictor for Denoiser {
    fn loss_and_grad(
        &self,
        params: &DenoiserParams,
        y_t: &ImageTensor,
        cond: &ImageTensor,
        t: usize,
        eps: &ImageTensor,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.l1_loss_and_grad(params, y_t, cond, t, eps)
    }

    fn size_multiple(&self) -> usize {
        self.config().size_multiple()
    }
}

/// One optimisation step over `batch` of `(clean, degraded)` pairs in the
/// signed domain. For each pair (in order) `t ~ U{1..T}` and `eps ~ N(0, I)`
/// are drawn from `rng`; the per-example passes run in parallel and their
/// gradients are summed in batch order. Returns the batch-mean loss measured
/// before the update; on error nothing is modified.
#[allow(clippy::too_many_arguments)]
pub fn training_step<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    batch: &[(ImageTensor, ImageTensor)],
    params: &mut DenoiserParams,
    opt: &mut AdamState,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let m = model.size_multiple();
    let mut jobs = Vec::with_capacity(batch.len());
    for (clean, degraded) in batch {
        clean.ensure_same_shape(degraded)?;
        if clean.height() % m != 0 || clean.width() % m != 0 {
            return Err(invalid(format!(
                "patch {}x{} not divisible by {m}",
                clean.height(),
                clean.width()
            )));
        }
        let t = rng.random_range(1..=sched.steps());
        let eps = ImageTensor::randn(clean.channels(), clean.height(), clean.width(), rng);
        let y0 = clean.to_domain(Domain::Signed);
        let y_t = forward_marginal_with(&y0, &eps, t, sched)?;
        jobs.push((y_t, degraded.to_domain(Domain::Signed), t, eps));
    }

    let shared: &DenoiserParams = params;
    let results: Vec<Result<(f64, Vec<Tensor>)>> = jobs
        .par_iter()
        .map(|(y_t, cond, t, eps)| model.loss_and_grad(shared, y_t, cond, *t, eps))
        .collect();

    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = grads.expect("batch is non-empty");
    for g in &mut grads {
        for x in g.data_mut() {
            *x /= n;
        }
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    adam_update(params, &grads, opt, cfg, lr)?;
    Ok(loss)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "step,loss,lr,wall_ms";

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e},{}", self.step, self.loss, self.lr, self.wall_ms)
    }
}

/// Training loop state: model, parameters, optimizer, data and the RNG that
/// drives patch, timestep and noise sampling.
pub struct Trainer {
    model: Denoiser,
    params: DenoiserParams,
    opt: AdamState,
    schedule_cfg: ScheduleConfig,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    data: Vec<(ImageTensor, ImageTensor)>,
}

impl Trainer {
    /// Fresh parameters seeded from `cfg.seed`. Images are converted to the
    /// signed domain.
    pub fn new(
        model_cfg: DenoiserConfig,
        schedule_cfg: ScheduleConfig,
        cfg: TrainConfig,
        data: Vec<ImagePair>,
    ) -> Result<Self> {
        let model = Denoiser::new(model_cfg)?;
        let params = model.init_params(cfg.seed);
        let opt = AdamState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self::assemble(model, params, opt, schedule_cfg, cfg, rng, 0, data)
    }

    /// Continues exactly where `ckpt` left off.
    pub fn from_checkpoint(ckpt: Checkpoint, data: Vec<ImagePair>) -> Result<Self> {
        let model = Denoiser::new(ckpt.denoiser)?;
        let rng = ckpt.rng.restore();
        Self::assemble(model, ckpt.params, ckpt.adam, ckpt.schedule, ckpt.train, rng, ckpt.step, data)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: Denoiser,
        mut params: DenoiserParams,
        opt: AdamState,
        schedule_cfg: ScheduleConfig,
        cfg: TrainConfig,
        rng: ChaCha8Rng,
        step: u64,
        data: Vec<ImagePair>,
    ) -> Result<Self> {
        cfg.validate(model.config().size_multiple())?;
        model.check_params(&params)?;
        opt.check_shapes(&params)?;
        params.set_freeze(cfg.freeze_encoder, &cfg.freeze_prefixes);
        let schedule = schedule_cfg.build()?;
        let data = data
            .into_iter()
            .map(|p| {
                p.clean.ensure_same_shape(&p.degraded)?;
                Ok((p.clean.to_domain(Domain::Signed), p.degraded.to_domain(Domain::Signed)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            params,
            opt,
            schedule_cfg,
            schedule,
            cfg,
            rng,
            step,
            data,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Copies pretrained encoder weights in; returns the tensor count.
    pub fn import_encoder(&mut self, source: &DenoiserParams) -> Result<usize> {
        self.params.import_encoder(source)
    }

    /// Samples a batch of aligned patches and applies one update.
    pub fn step(&mut self) -> Result<TrainRecord> {
        if self.data.is_empty() {
            return Err(invalid("no training pairs"));
        }
        let start = Instant::now();
        let size = self.cfg.patch_size;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = self.rng.random_range(0..self.data.len());
            let (clean, degraded) = &self.data[idx];
            let p = sample_patch(clean, degraded, size, &mut self.rng)?;
            batch.push((p.clean, p.degraded));
        }
        let lr = self.cfg.lr_at(self.step);
        let loss = training_step(
            &self.model,
            &batch,
            &mut self.params,
            &mut self.opt,
            &self.schedule,
            &self.cfg,
            lr,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            loss,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            denoiser: self.model.config().clone(),
            train: self.cfg.clone(),
            schedule: self.schedule_cfg,
            params: self.params.clone(),
            adam: self.opt.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
        }
    }
}
