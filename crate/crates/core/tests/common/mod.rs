#![allow(dead_code)]

use std::collections::BTreeMap;

use crossdiff::config::ModelConfig;
use crossdiff::data::{synth_dataset, Batch, SynthConfig};
use crossdiff::params::{normal, ParamStore};
use crossdiff::tensor::Tensor;
use crossdiff::CrossDiff;
use rand::{Rng, SeedableRng};

pub mod grad;
pub mod suites;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal(shape, 1.0, &mut rng(seed))
}

/// Desk model with a short schedule, built in `f64`.
pub fn desk64(steps: usize, seed: u64) -> (CrossDiff, ParamStore<f64>) {
    let mut c = ModelConfig::desk();
    c.schedule.steps = steps;
    CrossDiff::new::<f64>(c, seed).unwrap()
}

/// Give zero-initialized weights small random values so every path carries
/// gradient.
pub fn wake_zero_weights(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for (name, p) in store.iter_mut() {
        if name.ends_with("weight") && p.value.data().iter().all(|&v| v == 0.0) {
            p.value = normal(p.value.shape(), 0.05, &mut r);
        }
    }
}

pub fn synth_batch(n: usize, seed: u64) -> Batch {
    let data = synth_dataset(&SynthConfig::desk(), n, seed).unwrap();
    let items: Vec<_> = data.iter().collect();
    Batch::from_samples(&items).unwrap()
}

/// Analytic-vs-central-difference comparison at `picks` random entries of the
/// parameters named in `names`. `loss` returns the scalar loss and the
/// parameter gradients (absent entries mean zero). Returns the worst
/// relative error `|a - n| / max(|a|, |n|)`; entries where both are below
/// `1e-8` count by absolute difference instead.
pub fn fd_check(
    store: &mut ParamStore<f64>,
    names: &[String],
    picks: usize,
    seed: u64,
    loss: impl Fn(&ParamStore<f64>) -> (f64, BTreeMap<String, Tensor<f64>>),
) -> f64 {
    assert!(!names.is_empty());
    let (_, grads) = loss(store);
    let mut r = rng(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..picks {
        let name = &names[r.random_range(0..names.len())];
        let n = store.value(name).unwrap().numel();
        let i = r.random_range(0..n);
        let ana = grads.get(name).map_or(0.0, |g| g.data()[i]);
        let orig = store.value(name).unwrap().data()[i];
        store.value_mut(name).unwrap().data_mut()[i] = orig + h;
        let lp = loss(store).0;
        store.value_mut(name).unwrap().data_mut()[i] = orig - h;
        let lm = loss(store).0;
        store.value_mut(name).unwrap().data_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        let scale = ana.abs().max(num.abs());
        let err = if scale < 1e-8 { (ana - num).abs() } else { (ana - num).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

pub fn names_with(store: &ParamStore<f64>, prefix: &str) -> Vec<String> {
    store.names().filter(|n| n.starts_with(prefix)).cloned().collect()
}

/// Largest cross-encoder gradient magnitude when only the decoder term is
/// active, plus whether any diffusion-head parameter received gradient.
pub fn decoder_only_gradients() -> (f64, bool) {
    use crossdiff::training::{loss_and_grads, StepNoise};
    let (model, store) = desk64(10, 31);
    let batch = synth_batch(2, 32);
    let noise = StepNoise::<f64>::draw(2, 32, 10, &mut rng(33));
    let (_, grads) = loss_and_grads(&model, &store, &batch, &noise, 0.0, 1.0).unwrap();
    let enc = grads
        .iter()
        .filter(|(n, _)| n.starts_with("cross_encoder."))
        .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    (enc, grads.contains_key("diffusion_unet.out_conv.weight"))
}
