//! Finite-difference gradient suites shared by the gradient tests and the
//! acceptance report.

use std::collections::BTreeMap;

use crossdiff::graph::{Graph, NodeId};
use crossdiff::params::ParamStore;
use rand::Rng;
use crossdiff::tensor::Tensor;
use crossdiff::training::{loss_graph, StepNoise};
use crossdiff::unet::ResBlock;

use super::{desk64, fd_check, names_with, randn, rng, synth_batch, wake_zero_weights};

const PICKS: usize = 10;

/// `sum(y * proj)` for a fixed random projection.
fn project(g: &mut Graph<'_, f64>, y: NodeId, seed: u64) -> NodeId {
    let p = g.input(randn(g.shape(y), seed));
    let m = g.mul(y, p).unwrap();
    g.sum_all(m)
}

fn run(store: &ParamStore<f64>, build: impl Fn(&mut Graph<'_, f64>) -> NodeId) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut g = Graph::new(store);
    let l = build(&mut g);
    let v = g.value(l).data()[0];
    (v, g.backward(l).unwrap().into_param_grads())
}

pub fn transformer_block() -> f64 {
    let (model, mut store) = desk64(10, 1);
    let x = randn(&[2, 64, 64], 2);
    let names = names_with(&store, "cross_encoder.blocks.0.");
    fd_check(&mut store, &names, PICKS, 3, |s| {
        run(s, |g| {
            let xi = g.input(x.clone());
            let (y, _) = model.encoder.blocks()[0].forward(g, xi).unwrap();
            project(g, y, 4)
        })
    })
}

/// Worst error over nexus parameters and over entries of the conditioning input.
pub fn fusion_nexus() -> f64 {
    let (model, mut store) = desk64(10, 5);
    let cond = randn(&[2, 32, 8, 8], 6);
    let bott = randn(&[2, 32, 8, 8], 7);
    let temb = randn(&[2, 64], 8);
    let names = names_with(&store, "diffusion_unet.nexus.");
    let forward = |s: &ParamStore<f64>, c: &Tensor<f64>| {
        let mut g = Graph::new(s);
        let ci = g.variable(c.clone());
        let bi = g.input(bott.clone());
        let ti = g.input(temb.clone());
        let y = model.unet.nexus.forward(&mut g, ci, bi, ti).unwrap();
        let l = project(&mut g, y, 9);
        let v = g.value(l).data()[0];
        let gr = g.backward(l).unwrap();
        (v, gr.node(ci).cloned().unwrap(), gr.into_param_grads())
    };
    let wp = fd_check(&mut store, &names, PICKS, 10, |s| {
        let (v, _, p) = forward(s, &cond);
        (v, p)
    });
    let (_, gc, _) = forward(&store, &cond);
    let mut r = rng(11);
    let h = 1e-5;
    let mut wc: f64 = 0.0;
    for _ in 0..PICKS {
        let i = r.random_range(0..cond.numel());
        let mut cp = cond.clone();
        cp.data_mut()[i] += h;
        let mut cm = cond.clone();
        cm.data_mut()[i] -= h;
        let num = (forward(&store, &cp).0 - forward(&store, &cm).0) / (2.0 * h);
        let ana = gc.data()[i];
        wc = wc.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-8));
    }
    wp.max(wc)
}

pub fn unet_resblock() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let block = ResBlock::new(&mut store, "rb", 16, 32, 64, 8, &mut rng(12));
    let same = ResBlock::new(&mut store, "rs", 32, 32, 64, 8, &mut rng(13));
    let x = randn(&[2, 16, 8, 8], 14);
    let temb = randn(&[2, 64], 15);
    let names: Vec<String> = store.names().cloned().collect();
    fd_check(&mut store, &names, PICKS, 16, |s| {
        run(s, |g| {
            let xi = g.input(x.clone());
            let ti = g.input(temb.clone());
            let y = block.forward(g, xi, ti).unwrap();
            let y = same.forward(g, y, ti).unwrap();
            project(g, y, 17)
        })
    })
}

/// Decoder reconstruction loss; half the picks land on the head.
pub fn decoder_head() -> f64 {
    let (model, mut store) = desk64(10, 18);
    let fused = randn(&[2, 32, 8, 8], 19);
    let target = randn(&[2, 1, 64, 64], 20).map(|v| if v > 1.5 { 1.0 } else { 0.0 });
    let head: Vec<String> = model.decoder.head_names().to_vec();
    let all = names_with(&store, "cross_decoder.");
    let loss = |s: &ParamStore<f64>| {
        run(s, |g| {
            let f = g.input(fused.clone());
            let x = model.decoder.decode_mask(g, f).unwrap();
            let t = g.input(target.clone());
            model.decoder.decoder_loss(g, x, t).unwrap()
        })
    };
    let a = fd_check(&mut store, &head, PICKS / 2, 21, loss);
    let b = fd_check(&mut store, &all, PICKS - PICKS / 2, 22, loss);
    a.max(b)
}

/// The combined objective with both terms active, over random parameters.
pub fn full_loss() -> f64 {
    let (model, mut store) = desk64(10, 23);
    wake_zero_weights(&mut store, 24);
    let batch = synth_batch(2, 25);
    let noise = StepNoise::<f64>::draw(2, 32, 10, &mut rng(26));
    let names: Vec<String> = store.names().filter(|n| store.get(n).unwrap().trainable).cloned().collect();
    let (image, md, mf) = (batch.image.cast(), batch.mask_diff.cast(), batch.mask_full.cast());
    fd_check(&mut store, &names, PICKS, 27, |s| {
        run(s, |g| loss_graph(&model, g, &image, &md, &mf, &noise, 1.0, 1.0).unwrap().total)
    })
}
