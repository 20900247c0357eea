//! Prompt-conditioned transformer U-Net noise predictor.
//!
//! The noisy sample and the degraded observation are concatenated (6 input
//! channels), embedded with a 3x3 conv and run through a `levels`-deep
//! encoder of channel-attention transformer blocks with pixel-unshuffle
//! downsampling. Each decoder stage upsamples, concatenates the matching skip
//! and the projected timestep embedding broadcast as constant planes, reduces
//! channels, applies a prompt block and more transformer blocks. A final 3x3
//! conv predicts the noise.

mod blocks;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{ffn_hidden, prompt_block, prompt_weights, transformer_block, BlockIds, PromptIds};
pub use params::{DenoiserParams, Init, ParamBuilder, ParamEntry, ParamGroup};

use crate::error::{invalid, Error, Result};
use crate::image::{Domain, ImageTensor};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Per-level channel multipliers; each level must double the previous one.
    pub channel_multipliers: Vec<usize>,
    pub heads: Vec<usize>,
    /// Transformer blocks per encoder level (the last entry is the bottleneck).
    pub blocks: Vec<usize>,
    /// Transformer blocks per decoder stage, deepest stage first.
    pub decoder_blocks: Vec<usize>,
    pub prompt_components: usize,
    /// Prompt channels per decoder stage, deepest first.
    pub prompt_channels: Vec<usize>,
    /// Prompt spatial size per decoder stage, deepest first.
    pub prompt_size: Vec<usize>,
    pub timestep_embed_dim: usize,
    /// Constant planes injected per decoder stage.
    pub timestep_channels: usize,
    pub ffn_expansion: f64,
    pub image_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 48,
            channel_multipliers: vec![1, 2, 4, 8],
            heads: vec![1, 2, 4, 8],
            blocks: vec![4, 6, 6, 8],
            decoder_blocks: vec![6, 6, 4],
            prompt_components: 5,
            prompt_channels: vec![192, 96, 48],
            prompt_size: vec![16, 32, 64],
            timestep_embed_dim: 64,
            timestep_channels: 16,
            ffn_expansion: 2.66,
            image_channels: 3,
        }
    }
}

impl DenoiserConfig {
    /// Small 4-level network for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            blocks: vec![1, 1, 1, 1],
            decoder_blocks: vec![1, 1, 1],
            prompt_channels: vec![32, 16, 8],
            prompt_size: vec![4, 4, 4],
            timestep_embed_dim: 16,
            timestep_channels: 4,
            ..Self::default()
        }
    }

    pub fn with_blocks_per_level(mut self, n: usize) -> Self {
        self.blocks = vec![n; self.levels];
        self.decoder_blocks = vec![n; self.levels.saturating_sub(1)];
        self
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Spatial size multiple required of inputs.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l < 2 {
            return Err(invalid("denoiser needs at least two levels"));
        }
        let per_level = [
            ("channel_multipliers", self.channel_multipliers.len()),
            ("heads", self.heads.len()),
            ("blocks", self.blocks.len()),
        ];
        let per_stage = [
            ("decoder_blocks", self.decoder_blocks.len()),
            ("prompt_channels", self.prompt_channels.len()),
            ("prompt_size", self.prompt_size.len()),
        ];
        for (name, n) in per_level {
            if n != l {
                return Err(invalid(format!("{name} has {n} entries, expected {l}")));
            }
        }
        for (name, n) in per_stage {
            if n != l - 1 {
                return Err(invalid(format!("{name} has {n} entries, expected {}", l - 1)));
            }
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return Err(invalid("base_channels must be positive and even"));
        }
        if self.channel_multipliers[0] == 0 {
            return Err(invalid("channel multipliers must be positive"));
        }
        for w in self.channel_multipliers.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(invalid("channel multipliers must double at every level"));
            }
        }
        for lvl in 0..l {
            let c = self.level_channels(lvl);
            let h = self.heads[lvl];
            if h == 0 || !c.is_multiple_of(h) {
                return Err(invalid(format!("level {lvl}: {c} channels not divisible by {h} heads")));
            }
        }
        if self.prompt_components == 0 {
            return Err(invalid("prompt blocks need at least one component"));
        }
        for s in 0..l - 1 {
            let lvl = l - 2 - s;
            let fused = self.level_channels(lvl) + self.prompt_channels[s];
            if self.prompt_channels[s] == 0 || self.prompt_size[s] == 0 {
                return Err(invalid("prompt dims must be positive"));
            }
            if !fused.is_multiple_of(self.heads[lvl]) {
                return Err(invalid(format!(
                    "decoder stage {s}: {fused} fused channels not divisible by {} heads",
                    self.heads[lvl]
                )));
            }
        }
        if self.timestep_embed_dim == 0 || !self.timestep_embed_dim.is_multiple_of(2) {
            return Err(invalid("timestep_embed_dim must be positive and even"));
        }
        if self.timestep_channels == 0 || self.image_channels == 0 {
            return Err(invalid("timestep_channels and image_channels must be positive"));
        }
        if !(self.ffn_expansion > 0.0) {
            return Err(invalid("ffn_expansion must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal features: element `2i` is `sin(t / 10000^(2i/dim))`, element
/// `2i+1` the matching cosine.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!("embedding dim must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf((2 * i) as f64 / dim as f64);
        let arg = t as f64 / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct StageIds {
    up: usize,
    time_w: usize,
    time_b: usize,
    reduce: usize,
    prompt: PromptIds,
    blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: usize,
    encoder: Vec<Vec<BlockIds>>,
    down: Vec<usize>,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    stages: Vec<StageIds>,
    output: usize,
}

/// Architecture plus parameter layout; parameters live in [`DenoiserParams`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    layout: Layout,
    template: DenoiserParams,
}

/// Result of a differentiable forward pass.
pub struct Traced {
    pub output: Var,
    pub params: Vec<Var>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = DenoiserParams::default();
        // layout only; values are overwritten by `init_params`
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = build_layout(&cfg, &mut params, &mut rng);
        Ok(Self {
            cfg,
            layout,
            template: params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Freshly initialised parameters, all trainable.
    pub fn init_params(&self, seed: u64) -> DenoiserParams {
        let mut params = DenoiserParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_layout(&self.cfg, &mut params, &mut rng);
        params
    }

    pub fn check_params(&self, params: &DenoiserParams) -> Result<()> {
        if params.len() != self.template.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                self.template.len()
            )));
        }
        for (a, b) in params.entries().iter().zip(self.template.entries()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::shape(b.tensor.shape(), a.tensor.shape()));
            }
        }
        params.check_finite()
    }

    fn check_inputs(&self, y_t: &ImageTensor, cond: &ImageTensor) -> Result<()> {
        y_t.ensure_same_shape(cond)?;
        if y_t.channels() != self.cfg.image_channels {
            return Err(Error::shape(
                &[self.cfg.image_channels, y_t.height(), y_t.width()],
                &y_t.shape(),
            ));
        }
        let m = self.cfg.size_multiple();
        if !y_t.height().is_multiple_of(m) || !y_t.width().is_multiple_of(m) {
            return Err(invalid(format!(
                "input {}x{} not divisible by {m}",
                y_t.height(),
                y_t.width()
            )));
        }
        Ok(())
    }

    /// Timestep embedding after the learned MLP.
    pub fn embed_timestep(&self, params: &DenoiserParams, t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p: Vec<Var> = params.entries().iter().map(|e| tape.leaf(&e.tensor)).collect();
        let v = self.trace_timestep(&mut tape, &p, t)?;
        Ok(tape.value(v).data().to_vec())
    }

    fn trace_timestep(&self, tape: &mut Tape<'_>, p: &[Var], t: usize) -> Result<Var> {
        let l = &self.layout;
        let dim = self.cfg.timestep_embed_dim;
        let sin = tape.constant(Tensor::new(vec![dim], sinusoidal_embedding(t, dim)?)?);
        let h = tape.linear(sin, p[l.time_w1], Some(p[l.time_b1]));
        let h = tape.silu(h);
        Ok(tape.linear(h, p[l.time_w2], Some(p[l.time_b2])))
    }

    /// Records the full forward pass on `tape`, borrowing parameter storage.
    pub fn trace<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a DenoiserParams,
        y_t: &ImageTensor,
        cond: &ImageTensor,
        t: usize,
    ) -> Result<Traced> {
        self.check_inputs(y_t, cond)?;
        self.check_params(params)?;
        let l = &self.layout;
        let p: Vec<Var> = params.entries().iter().map(|e| tape.leaf(&e.tensor)).collect();
        let (h, w) = (y_t.height(), y_t.width());
        let mut input = y_t.data().to_vec();
        input.extend_from_slice(cond.data());
        let x = tape.constant(Tensor::new(vec![2 * self.cfg.image_channels, h, w], input)?);

        let mut f = tape.conv2d(x, p[l.patch_embed], 1);
        let mut skips = Vec::with_capacity(self.cfg.levels - 1);
        for (lvl, blocks) in l.encoder.iter().enumerate() {
            for b in blocks {
                f = transformer_block(tape, &p, b, f);
            }
            if lvl < self.cfg.levels - 1 {
                skips.push(f);
                f = tape.conv2d(f, p[l.down[lvl]], 1);
                f = tape.pixel_unshuffle(f);
            }
        }

        let temb = self.trace_timestep(tape, &p, t)?;
        for (s, stage) in l.stages.iter().enumerate() {
            let lvl = self.cfg.levels - 2 - s;
            f = tape.conv2d(f, p[stage.up], 1);
            f = tape.pixel_shuffle(f);
            let (fh, fw) = {
                let sh = tape.value(f).shape();
                (sh[1], sh[2])
            };
            let tvec = tape.linear(temb, p[stage.time_w], Some(p[stage.time_b]));
            let planes = tape.broadcast_planes(tvec, fh, fw);
            f = tape.concat_channels(&[f, skips[lvl], planes]);
            f = tape.conv2d(f, p[stage.reduce], 1);
            f = prompt_block(tape, &p, &stage.prompt, f).0;
            for b in &stage.blocks {
                f = transformer_block(tape, &p, b, f);
            }
        }
        let output = tape.conv2d(f, p[l.output], 1);
        Ok(Traced { output, params: p })
    }

    /// Predicted noise for `y_t` conditioned on the degraded observation.
    pub fn forward(
        &self,
        params: &DenoiserParams,
        y_t: &ImageTensor,
        cond: &ImageTensor,
        t: usize,
    ) -> Result<ImageTensor> {
        let mut tape = Tape::new();
        let traced = self.trace(&mut tape, params, y_t, cond, t)?;
        let out = tape.value(traced.output).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("denoiser output at t={t}")));
        }
        ImageTensor::new(self.cfg.image_channels, y_t.height(), y_t.width(), out, Domain::Signed)
    }

    /// Element-mean L1 between predicted and true noise, with its gradient for
    /// every parameter (zeros where no gradient flows).
    pub fn l1_loss_and_grad(
        &self,
        params: &DenoiserParams,
        y_t: &ImageTensor,
        cond: &ImageTensor,
        t: usize,
        eps: &ImageTensor,
    ) -> Result<(f64, Vec<Tensor>)> {
        y_t.ensure_same_shape(eps)?;
        let mut tape = Tape::new();
        let traced = self.trace(&mut tape, params, y_t, cond, t)?;
        let loss = tape.mean_abs_diff(traced.output, eps.data());
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at t={t}")));
        }
        let grads = collect_grads(&tape, loss, &traced.params, params);
        Ok((value, grads))
    }
}

/// Gradient of a scalar `output` for each parameter leaf, zero-filled where
/// the output does not depend on the leaf.
pub fn collect_grads(tape: &Tape<'_>, output: Var, leaves: &[Var], params: &DenoiserParams) -> Vec<Tensor> {
    let mut g = tape.backward(output);
    leaves
        .iter()
        .zip(params.entries())
        .map(|(&v, e)| g.take(v).unwrap_or_else(|| Tensor::zeros(e.tensor.shape())))
        .collect()
}

fn build_layout(cfg: &DenoiserConfig, params: &mut DenoiserParams, rng: &mut ChaCha8Rng) -> Layout {
    let levels = cfg.levels;
    let c0 = cfg.base_channels;
    let in_ch = 2 * cfg.image_channels;
    let exp = cfg.ffn_expansion;
    let mut b = ParamBuilder::new(params, rng, ParamGroup::Encoder);

    let patch_embed = b.add("patch_embed", &[c0, in_ch, 3, 3], Init::FanIn(in_ch * 9));
    let mut encoder = Vec::with_capacity(levels);
    let mut down = Vec::with_capacity(levels - 1);
    for lvl in 0..levels {
        let c = cfg.level_channels(lvl);
        let heads = cfg.heads[lvl];
        let name = if lvl + 1 == levels {
            "latent".to_string()
        } else {
            format!("encoder{lvl}")
        };
        let blocks = b.scoped(&name, ParamGroup::Encoder, |b| {
            (0..cfg.blocks[lvl])
                .map(|i| b.scoped(&format!("block{i}"), ParamGroup::Encoder, |b| BlockIds::register(b, c, heads, exp)))
                .collect()
        });
        encoder.push(blocks);
        if lvl + 1 < levels {
            down.push(b.add(&format!("down{lvl}"), &[c / 2, c, 3, 3], Init::FanIn(c * 9)));
        }
    }

    let d = cfg.timestep_embed_dim;
    let (time_w1, time_b1, time_w2, time_b2) = b.scoped("time_mlp", ParamGroup::Timestep, |b| {
        (
            b.add("w1", &[d, d], Init::FanIn(d)),
            b.add("b1", &[d], Init::Zeros),
            b.add("w2", &[d, d], Init::FanIn(d)),
            b.add("b2", &[d], Init::Zeros),
        )
    });

    let mut stages = Vec::with_capacity(levels - 1);
    for s in 0..levels - 1 {
        let lvl = levels - 2 - s;
        let c = cfg.level_channels(lvl);
        let deeper = cfg.level_channels(lvl + 1);
        let heads = cfg.heads[lvl];
        let tc = cfg.timestep_channels;
        let stage = b.scoped(&format!("decoder{s}"), ParamGroup::Decoder, |b| {
            let up = b.add("up", &[2 * deeper, deeper, 3, 3], Init::FanIn(deeper * 9));
            let (time_w, time_b) = b.scoped("time_proj", ParamGroup::Timestep, |b| {
                (b.add("w", &[tc, d], Init::FanIn(d)), b.add("b", &[tc], Init::Zeros))
            });
            let reduce_in = 2 * c + tc;
            let reduce = b.add("reduce", &[c, reduce_in, 1, 1], Init::FanIn(reduce_in));
            let prompt = b.scoped("prompt", ParamGroup::Prompt, |b| {
                PromptIds::register(
                    b,
                    c,
                    cfg.prompt_channels[s],
                    cfg.prompt_components,
                    cfg.prompt_size[s],
                    heads,
                    exp,
                )
            });
            let blocks = (0..cfg.decoder_blocks[s])
                .map(|i| b.scoped(&format!("block{i}"), ParamGroup::Decoder, |b| BlockIds::register(b, c, heads, exp)))
                .collect();
            StageIds {
                up,
                time_w,
                time_b,
                reduce,
                prompt,
                blocks,
            }
        });
        stages.push(stage);
    }
    let output = b.scoped("output", ParamGroup::Decoder, |b| {
        b.add("conv", &[cfg.image_channels, c0, 3, 3], Init::FanIn(c0 * 9))
    });

    Layout {
        patch_embed,
        encoder,
        down,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        stages,
        output,
    }
}
