//! Joint objective, single optimization steps and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{Batch, SegmentationSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::CrossDiff;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::seed::{self, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Write a checkpoint every this many steps (0 disables periodic writes).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            total_steps: 1000,
            batch_size: 12,
            seed: 0,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Settings used for the desk-scale overfit runs.
    pub fn desk() -> Self {
        TrainConfig {
            total_steps: 4000,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with a positive sum (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Batch-mean loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub diffusion_term: f64,
    pub decoder_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(diffusion_term: f64, decoder_term: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            diffusion_term,
            decoder_term,
            total: alpha * diffusion_term + beta * decoder_term,
        }
    }
}

fn mse<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, what: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(what, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Loss terms from already computed tensors.
pub fn combined_loss<F: Scalar>(
    eps: &Tensor<F>,
    eps_hat: &Tensor<F>,
    x_d: &Tensor<F>,
    gt_full: &Tensor<F>,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    let d = mse(eps, eps_hat, "combined_loss")?;
    let c = mse(x_d, gt_full, "combined_loss")?;
    Ok(LossBreakdown::new(d, c, alpha, beta))
}

/// Per-sample draws of one step.
#[derive(Debug, Clone)]
pub struct StepNoise<F> {
    pub steps: Vec<usize>,
    pub eps: Tensor<F>,
}

impl<F: Scalar> StepNoise<F> {
    pub fn draw<R: Rng>(batch: usize, side: usize, t_max: usize, rng: &mut R) -> Self {
        let steps = (0..batch).map(|_| rng.random_range(0..t_max)).collect();
        let eps = (0..batch * side * side)
            .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        StepNoise {
            steps,
            eps: Tensor::new(vec![batch, 1, side, side], eps).expect("noise shape"),
        }
    }
}

/// Graph handles for the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub diffusion: NodeId,
    pub decoder: NodeId,
    pub eps_hat: NodeId,
    pub x_d: NodeId,
    pub cond: NodeId,
    pub fused: NodeId,
}

/// Build the objective for one batch on `g`. Terms with zero weight stay out
/// of `total`, so their branches receive no gradient.
pub fn loss_graph<F: Scalar>(
    model: &CrossDiff,
    g: &mut Graph<'_, F>,
    image: &Tensor<F>,
    mask_diff: &Tensor<F>,
    mask_full: &Tensor<F>,
    noise: &StepNoise<F>,
    alpha: f64,
    beta: f64,
) -> Result<LossNodes> {
    let b = image.shape()[0];
    if noise.steps.len() != b || mask_diff.shape()[0] != b || mask_full.shape()[0] != b {
        return Err(Error::shape("loss_graph", "batch sizes disagree"));
    }
    let mut noisy = Vec::with_capacity(b);
    for i in 0..b {
        noisy.push(
            model
                .schedule
                .forward_noise(&mask_diff.batch_item(i), &noise.eps.batch_item(i), noise.steps[i])?,
        );
    }
    let x_t = Tensor::stack(&noisy)?;
    let img = g.input(image.clone());
    let (cond, _) = model.encoder.forward(g, img)?;
    let x_t = g.input(x_t);
    let (eps_hat, fused) = model.unet.predict_eps(g, x_t, cond, &noise.steps)?;
    let eps = g.input(noise.eps.clone());
    let de = g.sub(eps_hat, eps)?;
    let diffusion = g.mean_square(de);
    let x_d = model.decoder.decode_mask(g, fused)?;
    let gt = g.input(mask_full.clone());
    let decoder = model.decoder.decoder_loss(g, x_d, gt)?;
    let total = match (alpha > 0.0, beta > 0.0) {
        (true, true) => {
            let a = g.scale(diffusion, alpha);
            let c = g.scale(decoder, beta);
            g.add(a, c)?
        }
        (true, false) => g.scale(diffusion, alpha),
        (false, true) => g.scale(decoder, beta),
        (false, false) => return Err(Error::Config("both loss weights are zero".into())),
    };
    Ok(LossNodes {
        total,
        diffusion,
        decoder,
        eps_hat,
        x_d,
        cond,
        fused,
    })
}

/// Mutable training state: parameters, optimizer and step counter.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub store: ParamStore<F>,
    pub optimizer: AdamW<F>,
    pub step: u64,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(store: ParamStore<F>, cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            store,
            optimizer: AdamW::new(cfg.optimizer.clone())?,
            step: 0,
        })
    }
}

/// Breakdown plus the gradients that produced it, without updating.
pub fn loss_and_grads<F: Scalar>(
    model: &CrossDiff,
    store: &ParamStore<F>,
    batch: &Batch,
    noise: &StepNoise<F>,
    alpha: f64,
    beta: f64,
) -> Result<(LossBreakdown, std::collections::BTreeMap<String, Tensor<F>>)> {
    let mut g = Graph::new(store);
    let n = loss_graph(
        model,
        &mut g,
        &batch.image.cast(),
        &batch.mask_diff.cast(),
        &batch.mask_full.cast(),
        noise,
        alpha,
        beta,
    )?;
    let d = g.value(n.diffusion).data()[0].as_f64();
    let c = g.value(n.decoder).data()[0].as_f64();
    let lb = LossBreakdown::new(d, c, alpha, beta);
    for (name, v) in [("diffusion", d), ("decoder", c), ("total", lb.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} term is {v}")));
        }
    }
    let grads = g.backward(n.total)?.into_param_grads();
    Ok((lb, grads))
}

/// One optimizer update on `batch`; the step's draws come from `(cfg.seed, state.step)`.
pub fn training_step<F: Scalar>(
    model: &CrossDiff,
    state: &mut TrainState<F>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f64)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut rng = seed::rng(cfg.seed, Stream::TrainStep, state.step);
    let noise = StepNoise::draw(batch.len(), model.config.diffusion_side, model.schedule.steps(), &mut rng);
    let (lb, grads) = loss_and_grads(model, &state.store, batch, &noise, cfg.alpha, cfg.beta)?;
    let norm = state.optimizer.step(&mut state.store, grads)?;
    state.step += 1;
    Ok((lb, norm))
}

/// Sample indices for global step `step`: epochs are seeded permutations of
/// the dataset laid end to end, so any step's batch is known without replay.
pub fn batch_indices(n: usize, batch: usize, seed_root: u64, step: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let pos = step * batch as u64 + j;
            let epoch = pos / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut seed::rng(seed_root, Stream::Shuffle, epoch));
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// One line of the progress log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub step: u64,
    pub diffusion_term: f64,
    pub decoder_term: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wallclock: f64,
}

/// Run from `state.step` up to `cfg.total_steps`. `on_step` sees every
/// record; `on_checkpoint` is called every `cfg.checkpoint_every` steps.
pub fn train<F: Scalar>(
    model: &CrossDiff,
    state: &mut TrainState<F>,
    data: &[SegmentationSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(&TrainState<F>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let start = Instant::now();
    let b = cfg.batch_size.min(data.len());
    while state.step < cfg.total_steps {
        let idx = batch_indices(data.len(), b, cfg.seed, state.step);
        let items: Vec<&SegmentationSample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_samples(&items)?;
        let (lb, norm) = training_step(model, state, &batch, cfg)?;
        on_step(&TrainRecord {
            step: state.step,
            diffusion_term: lb.diffusion_term,
            decoder_term: lb.decoder_term,
            total: lb.total,
            lr: cfg.optimizer.lr,
            grad_norm: norm,
            wallclock: start.elapsed().as_secs_f64(),
        })?;
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_loss_examples() {
        let e = Tensor::<f64>::from_f64([4], &[0.1, -0.3, 2.0, 0.0]).unwrap();
        let x = Tensor::<f64>::from_f64([2], &[0.2, 0.9]).unwrap();
        let lb = combined_loss(&e, &e, &x, &x, 1.0, 1.0).unwrap();
        assert_eq!(lb.total, 0.0);
        let shifted = e.map(|v| v + 1.0);
        let lb = combined_loss(&e, &shifted, &x, &x, 1.0, 0.0).unwrap();
        assert!((lb.diffusion_term - 1.0).abs() < 1e-12);
        assert!((lb.total - 1.0).abs() < 1e-12);
        let half = Tensor::<f64>::full([4], 0.5);
        let gt = Tensor::<f64>::from_f64([4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let lb = combined_loss(&e, &e, &half, &gt, 0.0, 1.0).unwrap();
        assert!((lb.decoder_term - 0.25).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let n = 8;
        let mut seen = vec![0; n];
        for step in 0..4 {
            for i in batch_indices(n, 4, 3, step) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 2));
        assert_eq!(batch_indices(n, 4, 3, 5), batch_indices(n, 4, 3, 5));
        assert_ne!(batch_indices(n, 8, 3, 0), batch_indices(n, 8, 3, 1));
    }

    #[test]
    fn validate_rejects_bad_weights() {
        let mut c = TrainConfig::default();
        c.alpha = 0.0;
        c.beta = 0.0;
        assert!(c.validate().is_err());
        c.beta = -1.0;
        c.alpha = 1.0;
        assert!(c.validate().is_err());
    }
}
