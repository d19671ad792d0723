//! Property suites with independent oracles, shared by the per-module tests
//! and the acceptance report. Each returns `Ok(detail)` or `Err(detail)`.

use crossdiff::metrics::{dice, iou, weighted_average, EvalRecord};
use crossdiff::propagation::{bright_line_instance, propagate, segment_by_propagation, Neighborhood, PropagationParams, SelfWeight};
use crossdiff::propagation::build_weights;
use crossdiff::schedule::NoiseSchedule;
use crossdiff::staple::{em_step, staple_fuse, StapleParams, CLAMP};
use crossdiff::tensor::Tensor;
use rand::Rng;

use super::rng;

pub type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn all(parts: &[Outcome]) -> Outcome {
    let text = parts
        .iter()
        .map(|p| match p {
            Ok(s) => s.clone(),
            Err(s) => format!("FAILED {s}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(parts.iter().all(|p| p.is_ok()), text)
}

// schedule

pub fn alpha_bar_monotone() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let ab = s.alpha_bars();
    let ok = ab.windows(2).all(|w| w[1] < w[0]) && ab.iter().all(|&a| a > 0.0 && a < 1.0);
    check(ok, format!("alpha_bar strictly decreasing in (0,1), last {:.3e}", ab[999]))
}

pub fn alpha_bar_product() -> Outcome {
    let (t, b0, b1) = (1000, 1e-4, 0.02);
    let s = NoiseSchedule::linear(t, b0, b1).unwrap();
    let mut prod = 1.0;
    let mut worst: f64 = 0.0;
    for i in 0..t {
        let beta = b0 + (b1 - b0) * i as f64 / (t - 1) as f64;
        prod *= 1.0 - beta;
        worst = worst.max((prod - s.alpha_bar(i).unwrap()).abs());
    }
    check(worst < 1e-12, format!("product max err {worst:.2e} (< 1e-12)"))
}

pub fn round_trip() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut r = rng(41);
    let x0: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..=1.0)).collect();
    let x0 = Tensor::from_f64([8, 8], &x0).unwrap();
    let eps = super::randn(&[8, 8], 42);
    let mut worst: f64 = 0.0;
    for t in [0, 1, 250, 500, 750, 999] {
        let xt = s.forward_noise(&x0, &eps, t).unwrap();
        let back = s.predict_x0(&xt, &eps, t).unwrap();
        worst = worst.max(back.max_abs_diff(&x0));
    }
    check(worst < 1e-5, format!("round trip max err {worst:.2e} (< 1e-5)"))
}

pub fn linearity() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let (a, b) = (0.37, -1.9);
    let x1 = super::randn(&[8, 8], 43);
    let x2 = super::randn(&[8, 8], 44);
    let e1 = super::randn(&[8, 8], 45);
    let e2 = super::randn(&[8, 8], 46);
    let comb = |u: &Tensor<f64>, v: &Tensor<f64>| {
        Tensor::new(u.shape().to_vec(), u.data().iter().zip(v.data()).map(|(p, q)| a * p + b * q).collect()).unwrap()
    };
    let mut worst: f64 = 0.0;
    for t in [0, 500, 999] {
        let lhs = s.forward_noise(&comb(&x1, &x2), &comb(&e1, &e2), t).unwrap();
        let rhs = comb(&s.forward_noise(&x1, &e1, t).unwrap(), &s.forward_noise(&x2, &e2, t).unwrap());
        worst = worst.max(lhs.max_abs_diff(&rhs));
    }
    check(worst < 1e-10, format!("superposition max err {worst:.2e} (< 1e-10)"))
}

// staple

fn random_raters(n_raters: usize, n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng(seed);
    let truth: Vec<bool> = (0..n).map(|_| r.random_bool(0.35)).collect();
    (0..n_raters)
        .map(|_| {
            let flip = r.random_range(0.05..0.3);
            truth.iter().map(|&t| if t ^ r.random_bool(flip) { 1.0 } else { 0.0 }).collect()
        })
        .collect()
}

pub fn staple_unanimity() -> Outcome {
    let m = random_raters(1, 40, 51).remove(0);
    let raters: Vec<&[f32]> = vec![&m, &m, &m, &m];
    let res = staple_fuse(&raters, &StapleParams::default()).unwrap();
    let cerr = res.consensus.iter().zip(&m).map(|(c, &v)| (c - v as f64).abs()).fold(0.0, f64::max);
    let at_ceiling = res.sensitivity.iter().chain(&res.specificity).all(|&v| v == 1.0 - CLAMP);
    check(cerr <= 1e-6 && at_ceiling, format!("unanimity consensus err {cerr:.1e}, p/q at ceiling {at_ceiling}"))
}

pub fn staple_exchangeable() -> Outcome {
    let raters = random_raters(5, 60, 52);
    let refs: Vec<&[f32]> = raters.iter().map(|v| v.as_slice()).collect();
    let perm = [3, 0, 4, 1, 2];
    let prefs: Vec<&[f32]> = perm.iter().map(|&k| raters[k].as_slice()).collect();
    let a = staple_fuse(&refs, &StapleParams::default()).unwrap();
    let b = staple_fuse(&prefs, &StapleParams::default()).unwrap();
    let mut worst = a.consensus.iter().zip(&b.consensus).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for (j, &k) in perm.iter().enumerate() {
        worst = worst.max((b.sensitivity[j] - a.sensitivity[k]).abs());
        worst = worst.max((b.specificity[j] - a.specificity[k]).abs());
    }
    check(worst < 1e-12, format!("permutation max diff {worst:.1e}"))
}

pub fn staple_monotone() -> Outcome {
    let mut worst_drop: f64 = 0.0;
    for seed in 0..20 {
        let raters = random_raters(4, 80, 60 + seed);
        let refs: Vec<&[f32]> = raters.iter().map(|v| v.as_slice()).collect();
        let res = staple_fuse(&refs, &StapleParams { tol: 0.0, max_iter: 40, ..StapleParams::default() }).unwrap();
        for w in res.log_likelihood.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    check(worst_drop <= 1e-9, format!("largest log-likelihood decrease {worst_drop:.1e} (slack 1e-9)"))
}

/// Exact EM on `d` by enumerating every truth configuration `T in {0,1}^n`.
/// Returns per-iteration `(W, p, q, log-likelihood)`.
fn brute_em(d: &[Vec<f32>], prior: f64, init: f64, iters: usize) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    let n = d[0].len();
    let m = d.len();
    let clamp = |v: f64| v.clamp(CLAMP, 1.0 - CLAMP);
    let mut p = vec![init; m];
    let mut q = vec![init; m];
    let mut out = Vec::new();
    for _ in 0..iters {
        let mut z = 0.0;
        let mut marg = vec![0.0; n];
        for cfg in 0u32..(1 << n) {
            let mut joint = 1.0;
            for i in 0..n {
                let t = cfg >> i & 1 == 1;
                joint *= if t { prior } else { 1.0 - prior };
                for j in 0..m {
                    let r = d[j][i] == 1.0;
                    joint *= match (t, r) {
                        (true, true) => p[j],
                        (true, false) => 1.0 - p[j],
                        (false, true) => 1.0 - q[j],
                        (false, false) => q[j],
                    };
                }
            }
            z += joint;
            for (i, mg) in marg.iter_mut().enumerate() {
                if cfg >> i & 1 == 1 {
                    *mg += joint;
                }
            }
        }
        let w: Vec<f64> = marg.iter().map(|v| v / z).collect();
        let sw: f64 = w.iter().sum();
        let sv: f64 = w.iter().map(|v| 1.0 - v).sum();
        for j in 0..m {
            let tp: f64 = (0..n).filter(|&i| d[j][i] == 1.0).map(|i| w[i]).sum();
            let tn: f64 = (0..n).filter(|&i| d[j][i] == 0.0).map(|i| 1.0 - w[i]).sum();
            p[j] = clamp(tp / sw);
            q[j] = clamp(tn / sv);
        }
        out.push((w, p.clone(), q.clone(), z.ln()));
    }
    out
}

pub fn staple_brute_force() -> Outcome {
    let mut worst: f64 = 0.0;
    for (seed, n) in [(70u64, 16usize), (71, 9), (72, 12)] {
        let raters = random_raters(3, n, seed);
        let refs: Vec<&[f32]> = raters.iter().map(|v| v.as_slice()).collect();
        let fg: f64 = raters.iter().flatten().map(|&v| v as f64).sum::<f64>() / (3 * n) as f64;
        let prior = fg.clamp(CLAMP, 1.0 - CLAMP);
        let oracle = brute_em(&raters, prior, 0.99, 15);
        let mut p = vec![0.99; 3];
        let mut q = p.clone();
        for (w_o, p_o, q_o, ll_o) in &oracle {
            let (w, p2, q2, ll) = em_step(&refs, &p, &q, prior);
            p = p2;
            q = q2;
            for (a, b) in w.iter().zip(w_o).chain(p.iter().zip(p_o)).chain(q.iter().zip(q_o)) {
                worst = worst.max((a - b).abs());
            }
            worst = worst.max((ll - ll_o).abs());
        }
        let fused = staple_fuse(&refs, &StapleParams { tol: 0.0, max_iter: 15, ..StapleParams::default() }).unwrap();
        for (a, b) in fused.consensus.iter().zip(&oracle[14].0) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-9, format!("max deviation from enumeration EM {worst:.1e} (< 1e-9)"))
}

// propagation

fn dense_transition(img: &[f64], w: usize, h: usize, nb: Neighborhood, sigma: f64) -> Vec<f64> {
    let n = w * h;
    let mut m = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut neigh = Vec::new();
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let diag = yy != y && xx != x;
                    if (yy, xx) == (y, x) || (diag && nb == Neighborhood::Four) {
                        continue;
                    }
                    let j = yy * w + xx;
                    let d = img[i] - img[j];
                    neigh.push((j, (-d * d / (sigma * sigma)).exp()));
                }
            }
            let self_w = neigh.iter().map(|e| e.1).sum::<f64>() / neigh.len() as f64;
            let total = self_w + neigh.iter().map(|e| e.1).sum::<f64>();
            m[i * n + i] = self_w / total;
            for (j, v) in neigh {
                m[i * n + j] = v / total;
            }
        }
    }
    m
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let v = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += v * b[k * n + j];
            }
        }
    }
    c
}

pub fn propagation_matrix_power() -> Outcome {
    let mut worst: f64 = 0.0;
    for (seed, w, h, nb) in [(80u64, 8usize, 8usize, Neighborhood::Eight), (81, 7, 5, Neighborhood::Four), (82, 4, 4, Neighborhood::Eight)] {
        let mut r = rng(seed);
        let n = w * h;
        let img: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let labels: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let g = build_weights(&img, w, h, nb, 0.3, SelfWeight::MeanNeighbor).unwrap();
        let pm = dense_transition(&img, w, h, nb, 0.3);
        let mut power: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        for k in 1..=12 {
            power = matmul(&pm, &power, n);
            let want: Vec<f64> = (0..n).map(|i| (0..n).map(|j| power[i * n + j] * labels[j]).sum()).collect();
            let got = propagate(&labels, &g, k, None).unwrap();
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst < 1e-12, format!("dense power max err {worst:.1e} (< 1e-12)"))
}

pub fn propagation_convex() -> Outcome {
    let mut ok = true;
    for seed in 0..10u64 {
        let mut r = rng(90 + seed);
        let (w, h) = (9, 6);
        let img: Vec<f64> = (0..w * h).map(|_| r.random::<f64>()).collect();
        let labels: Vec<f64> = (0..w * h).map(|_| r.random_range(-2.0..3.0)).collect();
        let (lo, hi) = labels.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let g = build_weights(&img, w, h, Neighborhood::Eight, 0.2, SelfWeight::Fixed(0.5)).unwrap();
        let rows_ok = (0..g.len()).all(|i| (g.row(i).map(|e| e.2).sum::<f64>() - 1.0).abs() < 1e-12);
        let out = propagate(&labels, &g, 25, None).unwrap();
        ok &= rows_ok && out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12);
    }
    check(ok, "outputs stay within the initial label range".into())
}

pub fn propagation_bright_line() -> Outcome {
    let (img, gt, seeds) = bright_line_instance(32);
    let res = segment_by_propagation(&img, 32, 32, &seeds, &PropagationParams::default()).unwrap();
    let d = dice(&res.mask, &gt).unwrap();
    check(d == 1.0, format!("bright line dice {d}"))
}

// metrics

pub fn dice_iou_identity() -> Outcome {
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(1..200);
        let pf = r.random::<f64>();
        let gf = r.random::<f64>();
        let p: Vec<f32> = (0..n).map(|_| if r.random_bool(pf) { 1.0 } else { 0.0 }).collect();
        let g: Vec<f32> = (0..n).map(|_| if r.random_bool(gf) { 1.0 } else { 0.0 }).collect();
        let (d, j) = (dice(&p, &g).unwrap(), iou(&p, &g).unwrap());
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    check(worst < 1e-12, format!("Dice = 2 IoU / (1 + IoU) max err {worst:.1e} over 1000 pairs"))
}

pub fn metrics_hand_counted() -> Outcome {
    let mut p = vec![0f32; 12];
    let mut g = vec![0f32; 12];
    p[0..6].fill(1.0);
    g[3..9].fill(1.0);
    let (j, d) = (iou(&p, &g).unwrap(), dice(&p, &g).unwrap());
    check((j - 1.0 / 3.0).abs() < 1e-12 && (d - 0.5).abs() < 1e-12, format!("IoU {j:.4}, Dice {d:.4}"))
}

pub fn metrics_weighted() -> Outcome {
    let rec = |n, v| EvalRecord {
        dataset: "d".into(),
        n_samples: n,
        dice: v,
        iou: v,
    };
    let avg = weighted_average(&[rec(3, 0.9), rec(1, 0.5)]).unwrap();
    check((avg.dice - 0.8).abs() < 1e-12, format!("weighted average {:.4}", avg.dice))
}
