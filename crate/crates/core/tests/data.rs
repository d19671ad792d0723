use crossdiff::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, CheckpointBundle, LoadOptions};
use crossdiff::data::{load_dataset, split_ids, synth_dataset, write_dataset, SegmentationSample, SynthConfig};
use crossdiff::tensor::Tensor;
use crossdiff::training::{TrainConfig, TrainState};
use crossdiff::{CrossDiff, Error, ModelConfig};
use image::GrayImage;
use proptest::prelude::*;

#[test]
fn empty_root_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), 64, 32, None), Err(Error::Data(_))));
    assert!(matches!(load_dataset(&dir.path().join("missing"), 64, 32, None), Err(Error::Data(_))));
}

#[test]
fn single_pair_keeps_mask_counts() {
    let dir = tempfile::tempdir().unwrap();
    let tag = dir.path().join("toy");
    std::fs::create_dir_all(tag.join("images")).unwrap();
    std::fs::create_dir_all(tag.join("masks")).unwrap();
    image::RgbImage::from_pixel(8, 8, image::Rgb([10, 200, 30])).save(tag.join("images/a.png")).unwrap();
    let mut m = GrayImage::new(8, 8);
    for x in 0..8 {
        m.put_pixel(x, 3, image::Luma([255]));
    }
    m.put_pixel(0, 0, image::Luma([255]));
    m.save(tag.join("masks/a.png")).unwrap();
    let d = load_dataset(dir.path(), 8, 4, None).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].id, "toy/a");
    assert_eq!(d[0].mask_full.sum_f64(), 9.0);
    assert_eq!(d[0].mask_diff.shape(), &[1, 4, 4]);
    assert!(d[0].mask_diff.data().iter().all(|&v| v == 1.0 || v == -1.0));
    assert!(load_dataset(dir.path(), 8, 4, Some(&["other".to_string()])).is_err());
}

#[test]
fn missing_mask_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let tag = dir.path().join("t");
    std::fs::create_dir_all(tag.join("images")).unwrap();
    image::RgbImage::new(8, 8).save(tag.join("images/x.png")).unwrap();
    assert!(matches!(load_dataset(dir.path(), 8, 4, None), Err(Error::Data(_))));
}

#[test]
fn synthetic_set_survives_disk() {
    let cfg = SynthConfig::desk();
    let a = synth_dataset(&cfg, 4, 7).unwrap();
    assert_eq!(a, synth_dataset(&cfg, 4, 7).unwrap());
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &a).unwrap();
    let b = load_dataset(dir.path(), cfg.side, cfg.diff_side, None).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.mask_full, y.mask_full);
        assert_eq!(x.mask_diff, y.mask_diff);
        assert!(x.image.max_abs_diff(&y.image) <= 1.0 / 127.5 + 1e-6);
        assert!(x.foreground_fraction() > 0.0 && x.foreground_fraction() < 0.5);
    }
}

#[test]
fn inconsistent_sample_rejected() {
    let img = Tensor::zeros([3, 4, 4]);
    let mut s = SegmentationSample::new("t", "a", img, Tensor::zeros([1, 4, 4]), 2).unwrap();
    s.mask_diff.data_mut()[0] = 1.0;
    assert!(s.check().is_err());
}

fn tiny_bundle() -> (CrossDiff, CheckpointBundle) {
    let mut mc = ModelConfig::desk();
    mc.schedule.steps = 10;
    let (m, store) = CrossDiff::new::<f32>(mc, 4).unwrap();
    let tc = TrainConfig::desk();
    let st = TrainState::new(store, &tc).unwrap();
    let b = CheckpointBundle::from_state(&m, &st, &tc);
    (m, b)
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (_, b) = tiny_bundle();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&b, &p).unwrap();
    let back = load_checkpoint(&p, LoadOptions::default()).unwrap();
    assert_eq!(back, b);
    assert_eq!(encode(&back).unwrap(), std::fs::read(&p).unwrap());
    assert!(!dir.path().join("m.ckpt.partial").exists());
}

#[test]
fn inference_only_load_drops_training_arrays() {
    let (m, b) = tiny_bundle();
    let bytes = encode(&b).unwrap();
    let inf = decode(&bytes, LoadOptions { inference_only: true }).unwrap();
    assert!(inf.arrays.keys().all(|k| !k.starts_with("cross_decoder") && !k.starts_with("optim.")));
    assert!(inf.arrays.len() < b.arrays.len());
    let (_, store) = inf.restore_model(true).unwrap();
    assert!(store.names().all(|n| !n.starts_with("cross_decoder")));
    assert!(inf.restore_model(false).is_err());
    let (_, full) = b.restore_model(false).unwrap();
    assert!(full.names().any(|n| n.starts_with("cross_decoder")));
    drop(m);
}

#[test]
fn corrupted_checkpoint_rejected() {
    let (_, b) = tiny_bundle();
    let bytes = encode(&b).unwrap();
    let mut flipped = bytes.clone();
    let k = bytes.len() - 9;
    flipped[k] ^= 0x40;
    assert!(decode(&flipped, LoadOptions::default()).is_err());
    assert!(decode(&bytes[..bytes.len() - 3], LoadOptions::default()).is_err());
    assert!(decode(b"NOTACKPT", LoadOptions::default()).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode(&longer, LoadOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn split_partitions_ids(n in 0usize..40, seed in any::<u64>(), v in 0.0f64..0.5, t in 0.0f64..0.5) {
        let ids: Vec<String> = (0..n).map(|i| format!("s/{i:03}")).collect();
        let s = split_ids(&ids, seed, v, t).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids.clone());
        prop_assert_eq!(s.clone(), split_ids(&ids, seed, v, t).unwrap());
    }
}
