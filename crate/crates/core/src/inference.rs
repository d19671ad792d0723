//! Reverse-chain sampling, ensembles and STAPLE-fused predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::binarize;
use crate::model::CrossDiff;
use crate::params::ParamStore;
use crate::schedule::to_probability;
use crate::staple::{staple_fuse, StapleParams, StapleResult};
use crate::tensor::{Scalar, Tensor};

/// Repeat a `[B, ...]` tensor `n` times along the batch axis.
fn tile<F: Scalar>(t: &Tensor<F>, n: usize) -> Result<Tensor<F>> {
    Tensor::stack(&vec![t.clone(); n])
}

fn normals<F: Scalar, R: Rng>(n: usize, rng: &mut R) -> Vec<F> {
    (0..n).map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// How each reverse step is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    /// Posterior mean written in terms of the predicted noise.
    Epsilon,
    /// Posterior mean through the predicted `x0` clamped to `[-1, 1]`.
    #[default]
    ClipX0,
}

impl Sampler {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(Sampler::Epsilon),
            "clip_x0" => Ok(Sampler::ClipX0),
            other => Err(Error::Config(format!("sampler must be eps or clip_x0, got '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Sampler::Epsilon => "eps",
            Sampler::ClipX0 => "clip_x0",
        }
    }
}

/// Soft masks `[B, 1, s, s]` in `[0, 1]`, one per seed. The conditioning
/// embedding is computed once and shared by every chain; chain `k` draws its
/// initial state and per-step noise from `seeds[k]` alone.
pub fn ensemble_sample<F: Scalar>(
    model: &CrossDiff,
    store: &ParamStore<F>,
    image: &Tensor<F>,
    seeds: &[u64],
) -> Result<Vec<Tensor<F>>> {
    ensemble_sample_with(model, store, image, seeds, Sampler::default())
}

pub fn ensemble_sample_with<F: Scalar>(
    model: &CrossDiff,
    store: &ParamStore<F>,
    image: &Tensor<F>,
    seeds: &[u64],
    sampler: Sampler,
) -> Result<Vec<Tensor<F>>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one seed".into()));
    }
    let b = image.dims4()?.0;
    let n = seeds.len();
    let side = model.config.diffusion_side;
    let per = b * side * side;
    let cond = model.encoder.encode_condition(store, image)?;
    let cond = tile(&cond.features, n)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x = Vec::with_capacity(n * per);
    for r in rngs.iter_mut() {
        x.extend(normals::<F, _>(per, r));
    }
    let mut x = Tensor::new(vec![n * b, 1, side, side], x)?;
    let sched = &model.schedule;
    for t in (0..sched.steps()).rev() {
        let eps = model.unet.eps_hat(store, &x, &cond, t)?;
        let z = if t > 0 {
            let mut z = Vec::with_capacity(n * per);
            for r in rngs.iter_mut() {
                z.extend(normals::<F, _>(per, r));
            }
            Some(Tensor::new(vec![n * b, 1, side, side], z)?)
        } else {
            None
        };
        x = match sampler {
            Sampler::Epsilon => sched.reverse_step(&x, &eps, t, z.as_ref())?,
            Sampler::ClipX0 => sched.reverse_step_clipped(&x, &eps, t, z.as_ref())?,
        };
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("reverse chain diverged at step {t}")));
        }
    }
    let x = to_probability(&x);
    let data = x.into_data();
    data.chunks(per)
        .map(|c| Tensor::new(vec![b, 1, side, side], c.to_vec()))
        .collect()
}

/// One reverse chain.
pub fn sample_mask<F: Scalar>(model: &CrossDiff, store: &ParamStore<F>, image: &Tensor<F>, seed: u64) -> Result<Tensor<F>> {
    Ok(ensemble_sample(model, store, image, &[seed])?.remove(0))
}

/// Fused output for one image.
#[derive(Debug, Clone)]
pub struct FusedPrediction {
    /// `[1, s, s]` binary mask.
    pub mask: Tensor<f32>,
    /// `[1, s, s]` consensus probabilities (the single soft sample when `n = 1`).
    pub consensus: Tensor<f32>,
    /// Per-chain soft samples.
    pub samples: Vec<Tensor<f32>>,
    /// Absent when a single chain bypasses fusion.
    pub staple: Option<StapleResult>,
}

/// STAPLE over the chain samples of each image, each binarized at 0.5;
/// the consensus is then thresholded at `theta`.
pub fn fuse_samples(samples: &[Tensor<f32>], theta: f64, params: &StapleParams) -> Result<FusedPrediction> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to fuse".into()))?;
    let shape = first.shape().to_vec();
    if samples.len() == 1 {
        let mask = Tensor::new(shape, binarize(first.data(), theta)?)?;
        return Ok(FusedPrediction {
            mask,
            consensus: first.clone(),
            samples: samples.to_vec(),
            staple: None,
        });
    }
    let bins: Vec<Vec<f32>> = samples.iter().map(|s| binarize(s.data(), 0.5)).collect::<Result<_>>()?;
    let raters: Vec<&[f32]> = bins.iter().map(|v| v.as_slice()).collect();
    let res = staple_fuse(&raters, params)?;
    let consensus: Vec<f32> = res.consensus.iter().map(|&v| v as f32).collect();
    let mask = Tensor::new(shape.clone(), binarize(&consensus, theta)?)?;
    Ok(FusedPrediction {
        mask,
        consensus: Tensor::new(shape, consensus)?,
        samples: samples.to_vec(),
        staple: Some(res),
    })
}

/// Ensemble-sample every image of `image` (`[B, 3, S, S]`) and fuse per image.
pub fn fused_prediction(
    model: &CrossDiff,
    store: &ParamStore<f32>,
    image: &Tensor<f32>,
    seeds: &[u64],
    theta: f64,
    params: &StapleParams,
    sampler: Sampler,
) -> Result<Vec<FusedPrediction>> {
    let chains = ensemble_sample_with(model, store, image, seeds, sampler)?;
    let b = image.dims4()?.0;
    (0..b)
        .map(|i| {
            let per: Vec<Tensor<f32>> = chains
                .iter()
                .map(|c| {
                    let t = c.batch_item(i);
                    let s = t.shape()[1..].to_vec();
                    t.reshape(s)
                })
                .collect::<Result<_>>()?;
            fuse_samples(&per, theta, params)
        })
        .collect()
}
