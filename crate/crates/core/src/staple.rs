//! STAPLE: EM estimate of a consensus segmentation and per-rater
//! sensitivity/specificity from binary raters.

use serde::Serialize;

use crate::error::{Error, Result};

pub const CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StapleParams {
    /// Foreground prior; `None` uses the mean rater foreground fraction.
    pub prior: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Initial sensitivity and specificity of every rater.
    pub init: f64,
}

impl Default for StapleParams {
    fn default() -> Self {
        StapleParams {
            prior: None,
            tol: 1e-6,
            max_iter: 100,
            init: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StapleResult {
    /// Posterior foreground probability per pixel.
    #[serde(skip)]
    pub consensus: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub iterations: usize,
    pub prior: f64,
    pub converged: bool,
    /// Observed-data log-likelihood at each E-step.
    pub log_likelihood: Vec<f64>,
}

fn clamp(v: f64) -> f64 {
    v.clamp(CLAMP, 1.0 - CLAMP)
}

fn check_raters(raters: &[&[f32]]) -> Result<usize> {
    if raters.len() < 2 {
        return Err(Error::InvalidArgument(format!("STAPLE needs at least 2 raters, got {}", raters.len())));
    }
    let n = raters[0].len();
    for (j, r) in raters.iter().enumerate() {
        if r.len() != n {
            return Err(Error::shape("staple", format!("rater {j} has {} pixels, expected {n}", r.len())));
        }
        if r.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("rater {j} is not binary")));
        }
    }
    Ok(n)
}

/// One E-step followed by one M-step. Returns `(W, p', q', log-likelihood)`
/// where the likelihood and `W` are evaluated at the incoming `(p, q)`.
pub fn em_step(raters: &[&[f32]], p: &[f64], q: &[f64], prior: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let n = raters[0].len();
    let lp: Vec<(f64, f64)> = p.iter().map(|&v| (v.ln(), (1.0 - v).ln())).collect();
    let lq: Vec<(f64, f64)> = q.iter().map(|&v| (v.ln(), (1.0 - v).ln())).collect();
    let (lpr, lnpr) = (prior.ln(), (1.0 - prior).ln());
    let mut w = Vec::with_capacity(n);
    let mut ll = 0.0;
    for i in 0..n {
        let mut la = lpr;
        let mut lb = lnpr;
        for (j, r) in raters.iter().enumerate() {
            if r[i] == 1.0 {
                la += lp[j].0;
                lb += lq[j].1;
            } else {
                la += lp[j].1;
                lb += lq[j].0;
            }
        }
        let m = la.max(lb);
        let (ea, eb) = ((la - m).exp(), (lb - m).exp());
        ll += m + (ea + eb).ln();
        w.push(ea / (ea + eb));
    }
    let sw: f64 = w.iter().sum();
    let sv: f64 = w.iter().map(|x| 1.0 - x).sum();
    let mut p2 = Vec::with_capacity(raters.len());
    let mut q2 = Vec::with_capacity(raters.len());
    for (j, r) in raters.iter().enumerate() {
        let mut tp = 0.0;
        let mut tn = 0.0;
        for i in 0..n {
            if r[i] == 1.0 {
                tp += w[i];
            } else {
                tn += 1.0 - w[i];
            }
        }
        p2.push(if sw > 0.0 { clamp(tp / sw) } else { p[j] });
        q2.push(if sv > 0.0 { clamp(tn / sv) } else { q[j] });
    }
    (w, p2, q2, ll)
}

/// Run EM until the largest consensus change drops below `tol`.
pub fn staple_fuse(raters: &[&[f32]], params: &StapleParams) -> Result<StapleResult> {
    let n = check_raters(raters)?;
    if params.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    let prior = clamp(match params.prior {
        Some(v) if v > 0.0 && v < 1.0 => v,
        Some(v) => return Err(Error::InvalidArgument(format!("prior {v} outside (0, 1)"))),
        None => {
            let fg: f64 = raters.iter().flat_map(|r| r.iter()).map(|&v| v as f64).sum();
            fg / (n * raters.len()).max(1) as f64
        }
    });
    let mut p = vec![clamp(params.init); raters.len()];
    let mut q = p.clone();
    let mut prev: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut w = Vec::new();
    for _ in 0..params.max_iter {
        let (w_new, p2, q2, ll) = em_step(raters, &p, &q, prior);
        history.push(ll);
        p = p2;
        q = q2;
        let delta = prev
            .as_ref()
            .map(|o| o.iter().zip(&w_new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .unwrap_or(f64::INFINITY);
        w = w_new;
        if delta < params.tol {
            converged = true;
            break;
        }
        prev = Some(w.clone());
    }
    Ok(StapleResult {
        consensus: w,
        sensitivity: p,
        specificity: q,
        iterations: history.len(),
        prior,
        converged,
        log_likelihood: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unanimous_raters() {
        let m = [1f32, 0., 0., 1., 1., 0.];
        let r: Vec<&[f32]> = vec![&m, &m, &m];
        let res = staple_fuse(&r, &StapleParams::default()).unwrap();
        for (c, &v) in res.consensus.iter().zip(&m) {
            assert!((c - v as f64).abs() < 1e-6);
        }
        for (&p, &q) in res.sensitivity.iter().zip(&res.specificity) {
            assert_eq!(p, 1.0 - CLAMP);
            assert_eq!(q, 1.0 - CLAMP);
        }
        assert!(res.converged);
    }

    #[test]
    fn rejects_bad_input() {
        let a = [1f32, 0.];
        let b = [1f32, 0.5];
        let c = [1f32];
        assert!(staple_fuse(&[&a[..]], &StapleParams::default()).is_err());
        assert!(staple_fuse(&[&a[..], &b[..]], &StapleParams::default()).is_err());
        assert!(staple_fuse(&[&a[..], &c[..]], &StapleParams::default()).is_err());
    }
}
