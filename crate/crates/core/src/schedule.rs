//! Closed-form diffusion mathematics: the variance schedule, forward noising,
//! the `x0` inversion, the reverse (posterior) step, and step embeddings.
//!
//! Step indices are zero-based: `alpha_bars[0] == alphas[0]`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unsupported schedule kind '{other}'"))),
        }
    }
}

/// Precomputed `beta`, `alpha = 1 - beta` and `alpha_bar = prod(alpha)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let valid = |b: f64| b > 0.0 && b < 1.0;
        if !valid(beta_start) || !valid(beta_end) || beta_start > beta_end {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            kind: ScheduleKind::Linear,
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_noise<F: Scalar>(&self, x0: &Tensor<F>, eps: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self.check(t)?;
        same_shape("forward_noise", x0, eps)?;
        let ab = self.alpha_bars[t];
        let (s, n) = (F::from_f64(ab.sqrt()), F::from_f64((1.0 - ab).sqrt()));
        let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| s * x + n * e).collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// `(x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
    pub fn predict_x0<F: Scalar>(&self, x_t: &Tensor<F>, eps_hat: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self.check(t)?;
        same_shape("predict_x0", x_t, eps_hat)?;
        let ab = self.alpha_bars[t];
        let n = F::from_f64((1.0 - ab).sqrt());
        let inv = F::from_f64(1.0 / ab.sqrt());
        let data = x_t.data().iter().zip(eps_hat.data()).map(|(&x, &e)| (x - n * e) * inv).collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }

    /// Posterior sample `x_{t-1}` with fixed variance `sigma_t^2 = beta_t`.
    /// `z` must be `None` (or all zeros) at `t == 0`.
    pub fn reverse_step<F: Scalar>(
        &self,
        x_t: &Tensor<F>,
        eps_hat: &Tensor<F>,
        t: usize,
        z: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        self.check(t)?;
        same_shape("reverse_step", x_t, eps_hat)?;
        if let Some(z) = z {
            same_shape("reverse_step", x_t, z)?;
            if t == 0 && z.data().iter().any(|v| *v != F::zero()) {
                return Err(Error::InvalidArgument(
                    "reverse_step at t = 0 takes no fresh noise".into(),
                ));
            }
        }
        let (beta, alpha, ab) = (self.betas[t], self.alphas[t], self.alpha_bars[t]);
        let inv_sqrt_alpha = F::from_f64(1.0 / alpha.sqrt());
        let coef = F::from_f64(beta / (1.0 - ab).sqrt());
        let sigma = F::from_f64(beta.sqrt());
        let mut data: Vec<F> = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e))
            .collect();
        if let Some(z) = z {
            for (d, &zv) in data.iter_mut().zip(z.data()) {
                *d += sigma * zv;
            }
        }
        Tensor::new(x_t.shape().to_vec(), data)
    }

    /// Posterior sample computed through the clamped estimate
    /// `x0 = clamp(predict_x0, -1, 1)`: mean
    /// `c0 * x0 + c1 * x_t` with `c0 = sqrt(ab_{t-1}) beta_t / (1 - ab_t)` and
    /// `c1 = sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t)`. Without clamping this
    /// equals [`NoiseSchedule::reverse_step`].
    pub fn reverse_step_clipped<F: Scalar>(
        &self,
        x_t: &Tensor<F>,
        eps_hat: &Tensor<F>,
        t: usize,
        z: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let x0 = self.predict_x0(x_t, eps_hat, t)?;
        if let Some(z) = z {
            same_shape("reverse_step", x_t, z)?;
            if t == 0 && z.data().iter().any(|v| *v != F::zero()) {
                return Err(Error::InvalidArgument(
                    "reverse_step at t = 0 takes no fresh noise".into(),
                ));
            }
        }
        let (beta, alpha, ab) = (self.betas[t], self.alphas[t], self.alpha_bars[t]);
        let ab_prev = if t == 0 { 1.0 } else { self.alpha_bars[t - 1] };
        let c0 = F::from_f64(ab_prev.sqrt() * beta / (1.0 - ab));
        let c1 = F::from_f64(alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        let sigma = F::from_f64(beta.sqrt());
        let (lo, hi) = (-F::one(), F::one());
        let mut data: Vec<F> = x0
            .data()
            .iter()
            .zip(x_t.data())
            .map(|(&x0, &x)| c0 * x0.max(lo).min(hi) + c1 * x)
            .collect();
        if let Some(z) = z {
            for (d, &zv) in data.iter_mut().zip(z.data()) {
                *d += sigma * zv;
            }
        }
        Tensor::new(x_t.shape().to_vec(), data)
    }

    /// Metadata persisted alongside checkpoints.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("schedule.kind".into(), self.kind.as_str().into());
        m.insert("schedule.steps".into(), self.steps().to_string());
        m.insert("schedule.beta_start".into(), format!("{:e}", self.beta_start));
        m.insert("schedule.beta_end".into(), format!("{:e}", self.beta_end));
        m
    }
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Map a `{-1, +1}` mask encoding (or any sample) to `[0, 1]`.
pub fn to_probability<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let half = F::from_f64(0.5);
    x.map(|v| ((v + F::one()) * half).max(F::zero()).min(F::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeEmbeddingKind {
    /// Trainable `T x d` table (initialized from the sinusoidal code).
    Learned,
    /// Frozen sinusoidal table.
    Sinusoidal,
}

impl TimeEmbeddingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TimeEmbeddingKind::Learned => "learned",
            TimeEmbeddingKind::Sinusoidal => "sinusoidal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(TimeEmbeddingKind::Learned),
            "sinusoidal" => Ok(TimeEmbeddingKind::Sinusoidal),
            other => Err(Error::Config(format!("unknown time embedding '{other}'"))),
        }
    }
}

/// Sinusoidal step code: first half `sin(t * w_i)`, second half `cos(t * w_i)`.
pub fn sinusoidal_table(steps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; steps * dim];
    for t in 0..steps {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / (half.max(2) - 1) as f64).exp();
            let arg = t as f64 * freq;
            out[t * dim + i] = arg.sin();
            out[t * dim + half + i] = arg.cos();
        }
    }
    out
}

/// Step-embedding lookup table shared by every block of one forward pass.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    name: String,
    pub steps: usize,
    pub dim: usize,
    pub kind: TimeEmbeddingKind,
}

impl TimestepEmbedding {
    pub const PARAM: &'static str = "time_table.table";

    pub fn new<F: Scalar>(store: &mut ParamStore<F>, steps: usize, dim: usize, kind: TimeEmbeddingKind) -> Self {
        let table = Tensor::from_f64([steps, dim], &sinusoidal_table(steps, dim)).expect("table shape");
        match kind {
            TimeEmbeddingKind::Learned => store.insert(Self::PARAM, table, false),
            TimeEmbeddingKind::Sinusoidal => store.insert_frozen(Self::PARAM, table),
        }
        TimestepEmbedding {
            name: Self::PARAM.to_string(),
            steps,
            dim,
            kind,
        }
    }

    /// One row of the table.
    pub fn row<F: Scalar>(&self, store: &ParamStore<F>, t: usize) -> Result<Vec<F>> {
        if t >= self.steps {
            return Err(Error::StepOutOfRange { t, steps: self.steps });
        }
        let table = store.value(&self.name)?;
        Ok(table.data()[t * self.dim..(t + 1) * self.dim].to_vec())
    }

    /// `[steps.len(), dim]` rows for one batch.
    pub fn lookup<F: Scalar>(&self, g: &mut Graph<'_, F>, steps: &[usize]) -> Result<NodeId> {
        if let Some(&t) = steps.iter().find(|&&t| t >= self.steps) {
            return Err(Error::StepOutOfRange { t, steps: self.steps });
        }
        let table = g.param(&self.name)?;
        g.embedding(table, steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([v.len()], v).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn default_schedule_first_alpha_bar() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bars()[0] - 0.9999).abs() < 1e-15);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = t1(&[1.0, -1.0, 0.5]);
        let zero = t1(&[0.0, 0.0, 0.0]);
        let out = s.forward_noise(&x0, &zero, 500).unwrap();
        let sa = s.alpha_bars()[500].sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - sa * x).abs() < 1e-15);
        }
        // alpha_bar_0 = 0.9999: sqrt(0.9999) + sqrt(0.0001)
        let out = s.forward_noise(&t1(&[1.0]), &t1(&[1.0]), 0).unwrap();
        assert!((out.data()[0] - 1.009_950).abs() < 1e-6);
        assert!(s.forward_noise(&x0, &t1(&[0.0]), 0).is_err());
        assert!(s.forward_noise(&x0, &zero, 1000).is_err());
    }

    #[test]
    fn reverse_step_scalar_posterior_mean() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let out = s.reverse_step(&t1(&[1.0]), &t1(&[0.0]), 0, None).unwrap();
        assert!((out.data()[0] - 1.414_213_562).abs() < 1e-8);
        assert!(s.reverse_step(&t1(&[1.0]), &t1(&[0.0]), 0, Some(&t1(&[0.3]))).is_err());
        assert!(s.reverse_step(&t1(&[1.0]), &t1(&[0.0]), 0, Some(&t1(&[0.0]))).is_ok());
    }

    #[test]
    fn reverse_step_at_zero_matches_predict_x0() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = t1(&[1.0, -1.0, 0.25]);
        let eps = t1(&[0.3, -1.2, 2.0]);
        let xt = s.forward_noise(&x0, &eps, 0).unwrap();
        let a = s.reverse_step(&xt, &eps, 0, None).unwrap();
        let b = s.predict_x0(&xt, &eps, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
        assert!(a.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    fn sinusoidal_row_zero() {
        let tab = sinusoidal_table(4, 8);
        assert_eq!(&tab[..4], &[0.0; 4]);
        assert_eq!(&tab[4..8], &[1.0; 4]);
    }

    proptest! {
        #[test]
        fn forward_noise_is_linear(
            a in prop::collection::vec(-1.0f64..1.0, 6),
            b in prop::collection::vec(-1.0f64..1.0, 6),
            e1 in prop::collection::vec(-3.0f64..3.0, 6),
            e2 in prop::collection::vec(-3.0f64..3.0, 6),
            t in 0usize..1000,
            k in -2.0f64..2.0,
        ) {
            let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
            let combo = |u: &[f64], v: &[f64]| t1(&u.iter().zip(v).map(|(x, y)| x + k * y).collect::<Vec<_>>());
            let lhs = s.forward_noise(&combo(&a, &b), &combo(&e1, &e2), t).unwrap();
            let fa = s.forward_noise(&t1(&a), &t1(&e1), t).unwrap();
            let fb = s.forward_noise(&t1(&b), &t1(&e2), t).unwrap();
            for i in 0..6 {
                let rhs = fa.data()[i] + k * fb.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
            }
        }
    }
}
