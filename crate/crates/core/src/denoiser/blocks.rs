//! Building blocks of the denoiser: channel-attention transformer blocks and
//! prompt blocks. Each block has an `*Ids` struct holding the indices of its
//! tensors inside [`DenoiserParams`]; `register` allocates them and the free
//! functions evaluate the block on a [`Tape`].

use rand::Rng;

use super::params::{Init, ParamBuilder};
use crate::tape::{Tape, Var};

/// Hidden width of the gated feed-forward for `channels` inputs.
pub fn ffn_hidden(channels: usize, expansion: f64) -> usize {
    ((channels as f64 * expansion).floor() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    pub norm1: usize,
    pub qkv: usize,
    pub qkv_dw: usize,
    pub temperature: usize,
    pub project_out: usize,
    pub norm2: usize,
    pub ffn_in: usize,
    pub ffn_dw: usize,
    pub ffn_out: usize,
}

impl BlockIds {
    /// Output projections start at zero so the block is an identity map.
    pub fn register<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, heads: usize, expansion: f64) -> Self {
        let c = channels;
        let hidden = ffn_hidden(c, expansion);
        Self {
            channels,
            heads,
            hidden,
            norm1: b.add("norm1", &[c], Init::Ones),
            qkv: b.add("attn.qkv", &[3 * c, c, 1, 1], Init::FanIn(c)),
            qkv_dw: b.add("attn.qkv_dw", &[3 * c, 1, 3, 3], Init::FanIn(9)),
            temperature: b.add("attn.temperature", &[heads], Init::Ones),
            project_out: b.add("attn.project_out", &[c, c, 1, 1], Init::Zeros),
            norm2: b.add("norm2", &[c], Init::Ones),
            ffn_in: b.add("ffn.project_in", &[2 * hidden, c, 1, 1], Init::FanIn(c)),
            ffn_dw: b.add("ffn.dwconv", &[2 * hidden, 1, 3, 3], Init::FanIn(9)),
            ffn_out: b.add("ffn.project_out", &[c, hidden, 1, 1], Init::Zeros),
        }
    }

    pub fn ids(&self) -> [usize; 9] {
        [
            self.norm1,
            self.qkv,
            self.qkv_dw,
            self.temperature,
            self.project_out,
            self.norm2,
            self.ffn_in,
            self.ffn_dw,
            self.ffn_out,
        ]
    }
}

/// `x + Attn(Norm(x))`, then `+ FFN(Norm(.))`.
pub fn transformer_block(tape: &mut Tape<'_>, p: &[Var], ids: &BlockIds, x: Var) -> Var {
    let c = ids.channels;
    let n1 = tape.layer_norm(x, p[ids.norm1]);
    let qkv = tape.conv2d(n1, p[ids.qkv], 1);
    let qkv = tape.conv2d(qkv, p[ids.qkv_dw], 3 * c);
    let q = tape.slice_channels(qkv, 0, c);
    let k = tape.slice_channels(qkv, c, c);
    let v = tape.slice_channels(qkv, 2 * c, c);
    let a = tape.channel_attention(q, k, v, p[ids.temperature], ids.heads);
    let a = tape.conv2d(a, p[ids.project_out], 1);
    let x = tape.add(x, a);

    let n2 = tape.layer_norm(x, p[ids.norm2]);
    let hdn = tape.conv2d(n2, p[ids.ffn_in], 1);
    let hdn = tape.conv2d(hdn, p[ids.ffn_dw], 2 * ids.hidden);
    let gate = tape.slice_channels(hdn, 0, ids.hidden);
    let value = tape.slice_channels(hdn, ids.hidden, ids.hidden);
    let gate = tape.gelu(gate);
    let mixed = tape.mul(gate, value);
    let f = tape.conv2d(mixed, p[ids.ffn_out], 1);
    tape.add(x, f)
}

#[derive(Debug, Clone)]
pub struct PromptIds {
    pub feature_channels: usize,
    pub prompt_channels: usize,
    pub components: usize,
    pub prompt: usize,
    pub weight_w: usize,
    pub weight_b: usize,
    pub block: BlockIds,
    pub fuse: usize,
}

impl PromptIds {
    /// `components` learned prompts of `prompt_channels x size x size`. The
    /// fusion conv starts at zero, so the block begins as an identity map.
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        feature_channels: usize,
        prompt_channels: usize,
        components: usize,
        size: usize,
        heads: usize,
        expansion: f64,
    ) -> Self {
        let group = b.group();
        let fused = feature_channels + prompt_channels;
        let prompt = b.add(
            "components",
            &[components, prompt_channels, size, size],
            Init::FanIn(components),
        );
        let weight_w = b.add("weight.w", &[components, feature_channels], Init::FanIn(feature_channels));
        let weight_b = b.add("weight.b", &[components], Init::Zeros);
        let block = b.scoped("block", group, |b| BlockIds::register(b, fused, heads, expansion));
        let fuse = b.add("fuse", &[feature_channels, fused, 3, 3], Init::Zeros);
        Self {
            feature_channels,
            prompt_channels,
            components,
            prompt,
            weight_w,
            weight_b,
            block,
            fuse,
        }
    }
}

/// Softmax weights over the prompt components for features `x`.
pub fn prompt_weights(tape: &mut Tape<'_>, p: &[Var], ids: &PromptIds, x: Var) -> Var {
    let pooled = tape.global_avg_pool(x);
    let logits = tape.linear(pooled, p[ids.weight_w], Some(p[ids.weight_b]));
    tape.softmax(logits)
}

/// Returns `(output, component_weights)`. The output is
/// `x + Conv3x3(Block(concat(x, resize(sum_i w_i P_i))))`.
pub fn prompt_block(tape: &mut Tape<'_>, p: &[Var], ids: &PromptIds, x: Var) -> (Var, Var) {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let weights = prompt_weights(tape, p, ids, x);
    let mixed = tape.weighted_sum(weights, p[ids.prompt]);
    let resized = tape.resize_bilinear(mixed, h, w);
    let cat = tape.concat_channels(&[x, resized]);
    let z = transformer_block(tape, p, &ids.block, cat);
    let z = tape.conv2d(z, p[ids.fuse], 1);
    (tape.add(x, z), weights)
}
