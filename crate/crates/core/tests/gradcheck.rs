mod common;

use common::*;
use diffrestore::denoiser::{prompt_block, transformer_block, BlockIds, DenoiserParams, ParamBuilder, ParamGroup, PromptIds};
use diffrestore::tape::{Tape, Tensor, Var};
use rand::Rng;

#[test]
fn end_to_end_gradients_match_central_differences() {
    let samples = sampled_gradient_check(60, 11, 1e-5);
    for s in &samples {
        assert!(
            s.rel < 1e-4,
            "{}[{}]: fd {:e} bp {:e} rel {:e}",
            s.name,
            s.index,
            s.fd,
            s.bp,
            s.rel
        );
    }
}

enum Which {
    Transformer,
    Prompt,
}

/// `sum(block(x) * probe)` and the backprop gradient for every tensor.
fn block_readout(params: &DenoiserParams, which: &Which, ids: &(Option<BlockIds>, Option<PromptIds>), x: &Tensor, probe: &[f64]) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let p: Vec<Var> = params.entries().iter().map(|e| tape.leaf(&e.tensor)).collect();
    let xv = tape.constant(x.clone());
    let out = match which {
        Which::Transformer => transformer_block(&mut tape, &p, ids.0.as_ref().unwrap(), xv),
        Which::Prompt => prompt_block(&mut tape, &p, ids.1.as_ref().unwrap(), xv).0,
    };
    let probe = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), probe.to_vec()).unwrap());
    let prod = tape.mul(out, probe);
    let total = tape.sum(prod);
    let value = tape.value(total).data()[0];
    let grads = diffrestore::denoiser::collect_grads(&tape, total, &p, params);
    (value, grads)
}

fn check_block(which: Which, seed: u64) {
    let mut params = DenoiserParams::default();
    let mut r = rng(seed);
    let ids = {
        let mut b = ParamBuilder::new(&mut params, &mut r, ParamGroup::Decoder);
        match which {
            Which::Transformer => (Some(BlockIds::register(&mut b, 8, 2, 2.66)), None),
            Which::Prompt => (None, Some(PromptIds::register(&mut b, 8, 4, 3, 4, 2, 2.66))),
        }
    };
    let mut r = rng(seed + 1);
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v += 0.1 * r.random_range(-1.0..1.0);
        }
    }
    let x = Tensor::new(vec![8, 6, 6], (0..8 * 36).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let probe: Vec<f64> = (0..8 * 36).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, grads) = block_readout(&params, &which, &ids, &x, &probe);

    let total = params.num_scalars();
    let samples = (total / 100).max(20);
    let h = 1e-5;
    for _ in 0..samples {
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
        let fp = block_readout(&plus, &which, &ids, &x, &probe).0;
        let fm = block_readout(&minus, &which, &ids, &x, &probe).0;
        let fd = (fp - fm) / (2.0 * h);
        let bp = grads[id].data()[pick];
        let rel = rel_err(fd, bp);
        assert!(rel < 1e-5, "{}[{pick}]: fd {fd:e} bp {bp:e}", params.entries()[id].name);
    }
}

#[test]
fn transformer_block_gradients() {
    check_block(Which::Transformer, 21);
}

#[test]
fn prompt_block_gradients() {
    check_block(Which::Prompt, 31);
}
