mod common;

use common::synth_batch;
use crossdiff::config::ModelConfig;
use crossdiff::inference::{ensemble_sample, fuse_samples, fused_prediction, sample_mask, Sampler};
use crossdiff::metrics::binarize;
use crossdiff::params::ParamStore;
use crossdiff::staple::StapleParams;
use crossdiff::tensor::Tensor;
use crossdiff::CrossDiff;

fn tiny() -> (CrossDiff, ParamStore<f32>, Tensor<f32>) {
    let mut c = ModelConfig::desk();
    c.schedule.steps = 8;
    let (m, s) = CrossDiff::new::<f32>(c, 2).unwrap();
    (m, s, synth_batch(2, 3).image)
}

#[test]
fn chains_are_deterministic_bounded_and_distinct() {
    let (m, s, img) = tiny();
    let a = ensemble_sample(&m, &s, &img, &[1, 2, 3]).unwrap();
    let b = ensemble_sample(&m, &s, &img, &[1, 2, 3]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert_eq!(a[0].shape(), &[2, 1, 32, 32]);
    assert!(a.iter().all(|t| t.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    assert!(a[0].max_abs_diff(&a[1]) > 0.0 && a[1].max_abs_diff(&a[2]) > 0.0);
}

#[test]
fn seed_permutation_permutes_outputs() {
    let (m, s, img) = tiny();
    let a = ensemble_sample(&m, &s, &img, &[10, 20, 30, 40, 50]).unwrap();
    let b = ensemble_sample(&m, &s, &img, &[40, 10, 50, 30, 20]).unwrap();
    for (j, k) in [(0, 3), (1, 0), (2, 4), (3, 2), (4, 1)] {
        assert_eq!(b[j], a[k]);
    }
}

#[test]
fn single_chain_matches_sample_mask() {
    let (m, s, img) = tiny();
    let one = ensemble_sample(&m, &s, &img, &[9]).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0], sample_mask(&m, &s, &img, 9).unwrap());
    assert!(ensemble_sample(&m, &s, &img, &[]).is_err());
}

#[test]
fn inference_never_runs_the_decoder() {
    let (m, s, img) = tiny();
    let before = m.decoder.calls();
    let mut store = s.clone();
    store.remove_group("cross_decoder");
    fused_prediction(&m, &store, &img, &[1, 2], 0.5, &StapleParams::default(), Sampler::ClipX0).unwrap();
    assert_eq!(m.decoder.calls(), before);
}

#[test]
fn single_sample_bypasses_fusion() {
    let soft = Tensor::new(vec![1, 2, 2], vec![0.2f32, 0.6, 0.5, 0.9]).unwrap();
    let f = fuse_samples(std::slice::from_ref(&soft), 0.55, &StapleParams::default()).unwrap();
    assert!(f.staple.is_none());
    assert_eq!(f.mask.data(), &[0.0, 1.0, 0.0, 1.0]);
    let g = fuse_samples(&[soft.clone(), soft.clone(), soft.clone()], 0.5, &StapleParams::default()).unwrap();
    assert_eq!(g.mask.data(), binarize(soft.data(), 0.5).unwrap().as_slice());
    assert!(g.staple.unwrap().converged);
}
