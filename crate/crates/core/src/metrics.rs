//! Overlap metrics, per-dataset aggregation and threshold sweeps.

use serde::Serialize;

use crate::error::{Error, Result};

/// The six thresholds reported in sweep tables.
pub const SWEEP_THRESHOLDS: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95];

fn counts(pred: &[f32], gt: &[f32]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
            return Err(Error::InvalidArgument("metrics expect binary masks".into()));
        }
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    Ok((inter, np, ng))
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn iou(pred: &[f32], gt: &[f32]) -> Result<f64> {
    let (i, p, g) = counts(pred, gt)?;
    let u = p + g - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice(pred: &[f32], gt: &[f32]) -> Result<f64> {
    let (i, p, g) = counts(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub n_samples: usize,
    pub dice: f64,
    pub iou: f64,
}

/// Unweighted mean over the pairs of one dataset.
pub fn evaluate_dataset(pairs: &[(&[f32], &[f32])], name: &str) -> Result<EvalRecord> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset '{name}' has no pairs")));
    }
    let mut d = 0.0;
    let mut j = 0.0;
    for (p, g) in pairs {
        d += dice(p, g)?;
        j += iou(p, g)?;
    }
    let n = pairs.len() as f64;
    Ok(EvalRecord {
        dataset: name.to_string(),
        n_samples: pairs.len(),
        dice: d / n,
        iou: j / n,
    })
}

/// Sample-count weighted average across datasets.
pub fn weighted_average(records: &[EvalRecord]) -> Result<EvalRecord> {
    let n: usize = records.iter().map(|r| r.n_samples).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no samples to average".into()));
    }
    let w = |f: fn(&EvalRecord) -> f64| records.iter().map(|r| r.n_samples as f64 * f(r)).sum::<f64>() / n as f64;
    Ok(EvalRecord {
        dataset: "Average".into(),
        n_samples: n,
        dice: w(|r| r.dice),
        iou: w(|r| r.iou),
    })
}

/// Pixel is foreground iff `value >= theta`.
pub fn binarize(mask: &[f32], theta: f64) -> Result<Vec<f32>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {theta} outside (0, 1)")));
    }
    Ok(mask.iter().map(|&v| if v as f64 >= theta { 1.0 } else { 0.0 }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub dice: f64,
    pub iou: f64,
}

pub fn threshold_sweep(soft: &[&[f32]], gts: &[&[f32]], thetas: &[f64]) -> Result<Vec<SweepRow>> {
    if soft.len() != gts.len() || soft.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sweep needs aligned nonempty lists, got {} predictions and {} masks",
            soft.len(),
            gts.len()
        )));
    }
    thetas
        .iter()
        .map(|&theta| {
            let bins: Vec<Vec<f32>> = soft.iter().map(|s| binarize(s, theta)).collect::<Result<_>>()?;
            let pairs: Vec<(&[f32], &[f32])> = bins.iter().map(|b| b.as_slice()).zip(gts.iter().copied()).collect();
            let r = evaluate_dataset(&pairs, "sweep")?;
            Ok(SweepRow {
                theta,
                dice: r.dice,
                iou: r.iou,
            })
        })
        .collect()
}

/// Metric-by-threshold table: a header row of thresholds, then Dice and IoU rows.
pub fn format_sweep(rows: &[SweepRow], delim: char) -> String {
    let mut out = String::from("Threshold (θ)");
    for r in rows {
        out.push(delim);
        out.push_str(&format!("{}", r.theta));
    }
    out.push('\n');
    for (label, f) in [("Dice", (|r: &SweepRow| r.dice) as fn(&SweepRow) -> f64), ("IoU", |r: &SweepRow| r.iou)] {
        out.push_str(label);
        for r in rows {
            out.push(delim);
            out.push_str(&format!("{:.2}", 100.0 * f(r)));
        }
        out.push('\n');
    }
    out
}

/// Per-dataset table with the weighted average as the last row.
pub fn format_records(records: &[EvalRecord], delim: char) -> String {
    let mut out = format!("Dataset{delim}N{delim}Dice{delim}IoU\n");
    for r in records {
        out.push_str(&format!(
            "{}{delim}{}{delim}{:.2}{delim}{:.2}\n",
            r.dataset,
            r.n_samples,
            100.0 * r.dice,
            100.0 * r.iou
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted() {
        let mut p = vec![0f32; 12];
        let mut g = vec![0f32; 12];
        p[0..6].fill(1.0);
        g[3..9].fill(1.0);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((dice(&p, &g).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(iou(&[0.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(dice(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn weighted() {
        let r = |n, v| EvalRecord {
            dataset: "x".into(),
            n_samples: n,
            dice: v,
            iou: v,
        };
        let avg = weighted_average(&[r(3, 0.9), r(1, 0.5)]).unwrap();
        assert!((avg.iou - 0.8).abs() < 1e-12);
    }

    #[test]
    fn constant_soft_mask_sweep() {
        let soft = vec![0.6f32; 4];
        let gt = vec![1f32, 0., 0., 0.];
        let rows = threshold_sweep(&[&soft], &[&gt], &[0.5, 0.7]).unwrap();
        assert!((rows[0].dice - 0.4).abs() < 1e-12);
        assert!((rows[0].iou - 0.25).abs() < 1e-12);
        assert_eq!(rows[1].dice, 0.0);
        let table = format_sweep(&rows, '\t');
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn binarize_contract() {
        assert_eq!(binarize(&[0.4, 0.6], 0.5).unwrap(), vec![0.0, 1.0]);
        assert!(binarize(&[0.4], 1.0).is_err());
        assert!(binarize(&[0.4], 0.0).is_err());
    }
}
