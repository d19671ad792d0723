//! Command implementations behind the `crossdiff` binary. Each command takes
//! a resolved [`RunConfig`] and explicit paths, writes its artifacts and
//! returns what it produced.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, LoadOptions};
use crate::data::{
    load_dataset, nearest_resize, read_gray, read_image, read_mask_native, read_soft_mask, save_binary_mask,
    save_soft_mask, select, split_ids, synth_dataset, write_dataset, write_manifest, SegmentationSample,
};
use crate::error::{Error, Result};
use crate::inference::{fuse_samples, fused_prediction, FusedPrediction};
use crate::metrics::{evaluate_dataset, format_records, format_sweep, threshold_sweep, weighted_average, EvalRecord, SweepRow, SWEEP_THRESHOLDS};
use crate::model::CrossDiff;
use crate::propagation::{bright_line_instance, format_seeds, read_seeds, segment_by_propagation, PropagationResult};
use crate::run::RunConfig;
use crate::seed::{self, Stream};
use crate::staple::StapleResult;
use crate::tensor::Tensor;
use crate::training::{train, TrainRecord, TrainState};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];
const SOFT_SUFFIX: &str = "_soft";

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string()
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

/// A file found under a flat, single-dataset or multi-dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub tag: Option<String>,
    pub stem: String,
    pub path: PathBuf,
}

impl Item {
    pub fn id(&self) -> String {
        match &self.tag {
            Some(t) => format!("{t}/{}", self.stem),
            None => self.stem.clone(),
        }
    }

    fn rel(&self, name: &str) -> PathBuf {
        match &self.tag {
            Some(t) => Path::new(t).join(name),
            None => PathBuf::from(name),
        }
    }
}

/// Images under `dir/<sub>/`, `dir/<tag>/<sub>/` or directly in `dir`.
pub fn collect_items(dir: &Path, sub: &str) -> Result<Vec<Item>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let files = |d: &Path, tag: Option<String>| -> Result<Vec<Item>> {
        Ok(sorted_dir(d)?
            .into_iter()
            .filter(|p| is_image(p) && !stem(p).ends_with(SOFT_SUFFIX))
            .map(|p| Item {
                tag: tag.clone(),
                stem: stem(&p),
                path: p,
            })
            .collect())
    };
    if dir.join(sub).is_dir() {
        return files(&dir.join(sub), None);
    }
    let tagged: Vec<PathBuf> = sorted_dir(dir)?.into_iter().filter(|d| d.join(sub).is_dir()).collect();
    if tagged.is_empty() {
        return files(dir, None);
    }
    let mut out = Vec::new();
    for d in tagged {
        out.extend(files(&d.join(sub), Some(d.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string()))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, rec: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Data(format!("serialize log record: {e}")))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Every step, including those not written to the log.
    pub records: Vec<TrainRecord>,
    pub bundle: CheckpointBundle,
}

/// Train on the dataset under `data_root` (falling back to `data.root`) and
/// write `checkpoint.ckpt`, the JSONL loss log and the resolved config into
/// `out_dir`. With `resume`, model and optimizer state continue from that
/// checkpoint.
pub fn cmd_train(cfg: &RunConfig, data_root: Option<&Path>, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let root = data_root.map(Path::to_path_buf).or_else(|| cfg.data_root()).ok_or_else(|| {
        Error::Config(format!(
            "no dataset root: pass --data or set {}",
            crate::run::DATA_ROOT_ENV
        ))
    })?;
    let (model, mut state, tcfg) = match resume {
        Some(p) => {
            let b = load_checkpoint(p, LoadOptions::default())?;
            let (m, s, mut t) = b.restore_training()?;
            if cfg.is_explicit("train.total_steps") {
                t.total_steps = cfg.train()?.total_steps;
            }
            (m, s, t)
        }
        None => {
            let tcfg = cfg.train()?;
            let (m, store) = CrossDiff::new::<f32>(cfg.model()?, seed::derive(tcfg.seed, Stream::Init, 0))?;
            let s = TrainState::new(store, &tcfg)?;
            (m, s, tcfg)
        }
    };
    let mc = &model.config;
    let tags = cfg.data_tags();
    let all = load_dataset(&root, mc.image_side(), mc.diffusion_side, tags.as_deref())?;
    let ids: Vec<String> = all.iter().map(|s| s.id.clone()).collect();
    let split = split_ids(
        &ids,
        cfg.num("data.split_seed")?,
        cfg.num("data.val_frac")?,
        cfg.num("data.test_frac")?,
    )?;
    let splits = out_dir.join("splits");
    fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    write_manifest(&splits.join("train.txt"), &split.train)?;
    write_manifest(&splits.join("val.txt"), &split.val)?;
    write_manifest(&splits.join("test.txt"), &split.test)?;
    let data = select(&all, &split.train)?;
    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;

    let log_path = out_dir.join(TRAIN_LOG);
    let file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(file.map_err(|e| Error::io(&log_path, e))?);
    write_jsonl(&mut log, &BTreeMap::from([("config", cfg.values())]), &log_path)?;
    log::info!("training on {} samples from {} for {} steps", data.len(), root.display(), tcfg.total_steps);

    let mut records = Vec::new();
    let every = tcfg.log_every.max(1);
    let total = tcfg.total_steps;
    train(
        &model,
        &mut state,
        &data,
        &tcfg,
        |r| {
            if r.step % every == 0 || r.step == total {
                write_jsonl(&mut log, r, &log_path)?;
                log::info!("step {} total {:.5} diffusion {:.5} decoder {:.5}", r.step, r.total, r.diffusion_term, r.decoder_term);
            }
            records.push(r.clone());
            Ok(())
        },
        |s| {
            let p = out_dir.join(format!("checkpoint-{:06}.ckpt", s.step));
            save_checkpoint(&CheckpointBundle::from_state(&model, s, &tcfg), &p)
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let bundle = CheckpointBundle::from_state(&model, &state, &tcfg);
    let ckpt = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&bundle, &ckpt)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log: log_path,
        records,
        bundle,
    })
}

/// Load a checkpoint and reject explicit model settings that contradict it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path, inference_only: bool) -> Result<(CrossDiff, crate::params::ParamStore<f32>)> {
    let bundle = load_checkpoint(checkpoint, LoadOptions { inference_only })?;
    for k in cfg.explicit_model_keys() {
        let have = bundle.header.get(k).map(String::as_str).unwrap_or("");
        if have != cfg.get(k) {
            return Err(Error::Config(format!(
                "checkpoint {} has {k}={have}, run config says {}",
                checkpoint.display(),
                cfg.get(k)
            )));
        }
    }
    bundle.restore_model(inference_only)
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    id: String,
    theta: f64,
    chain_seeds: &'a [u64],
    staple: Option<&'a StapleResult>,
}

#[derive(Debug, Clone)]
pub struct PredictedImage {
    pub item: Item,
    pub mask_path: PathBuf,
    pub soft_path: PathBuf,
    pub fused: FusedPrediction,
}

/// Ensemble-predict every image under `input`. Per image `<stem>.png`
/// holds the `{0, 255}` mask, `<stem>_soft.png` the 16-bit consensus and
/// `<stem>.staple.json` the fusion statistics.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, input: &Path, out_dir: &Path, inference_only: bool) -> Result<Vec<PredictedImage>> {
    let (model, store) = load_model(cfg, checkpoint, inference_only)?;
    let items = collect_items(input, "images")?;
    if items.is_empty() {
        return Err(Error::Data(format!("no images under {}", input.display())));
    }
    let theta = cfg.theta()?;
    let staple = cfg.staple()?;
    let sampler = cfg.sampler()?;
    let seeds = seed::chain_seeds(cfg.num("predict.seed")?, cfg.ensemble()?);
    let side = model.config.image_side();
    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(cfg.num("predict.batch_size")?) {
        let imgs: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|it| read_image(&it.path, side)?.reshape(vec![1, 3, side, side]))
            .collect::<Result<_>>()?;
        let fused = fused_prediction(&model, &store, &Tensor::stack(&imgs)?, &seeds, theta, &staple, sampler)?;
        for (it, f) in chunk.iter().zip(fused) {
            let mask_path = out_dir.join(it.rel(&format!("{}.png", it.stem)));
            let soft_path = out_dir.join(it.rel(&format!("{}{SOFT_SUFFIX}.png", it.stem)));
            save_binary_mask(&f.mask, &mask_path)?;
            save_soft_mask(&f.consensus, &soft_path)?;
            let side_path = out_dir.join(it.rel(&format!("{}.staple.json", it.stem)));
            let sc = Sidecar {
                id: it.id(),
                theta,
                chain_seeds: &seeds,
                staple: f.staple.as_ref(),
            };
            let text = serde_json::to_string_pretty(&sc).map_err(|e| Error::Data(e.to_string()))?;
            fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))?;
            log::info!("{} -> {}", it.id(), mask_path.display());
            out.push(PredictedImage {
                item: it.clone(),
                mask_path,
                soft_path,
                fused: f,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Per-dataset records followed by the weighted average.
    pub records: Vec<EvalRecord>,
    pub sweep: Option<Vec<SweepRow>>,
}

impl EvalReport {
    pub fn to_text(&self, delim: char) -> String {
        let mut s = format_records(&self.records, delim);
        if let Some(rows) = &self.sweep {
            s.push('\n');
            s.push_str(&format_sweep(rows, delim));
        }
        s
    }
}

/// Ground truth resampled to the prediction grid by nearest neighbour.
fn gt_at(path: &Path, side: usize) -> Result<Vec<f32>> {
    let g = read_mask_native(path)?;
    let gs = g.shape()[1];
    Ok(if gs == side {
        g.into_data()
    } else {
        nearest_resize(g.data(), gs, side)
    })
}

/// Score binary predictions in `pred_dir` against masks in `gt_dir`; with
/// `sweep`, also threshold the soft consensus files at the six sweep levels.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, sweep: bool) -> Result<EvalReport> {
    let gts = collect_items(gt_dir, "masks")?;
    if gts.is_empty() {
        return Err(Error::Data(format!("no masks under {}", gt_dir.display())));
    }
    let mut orphans: Vec<String> = gts
        .iter()
        .filter(|g| !pred_dir.join(g.rel(&format!("{}.png", g.stem))).is_file())
        .map(|g| format!("{} (no prediction)", g.id()))
        .collect();
    let mut tags: Vec<Option<String>> = gts.iter().map(|g| g.tag.clone()).collect();
    tags.dedup();
    for t in &tags {
        let d = match t {
            Some(t) => pred_dir.join(t),
            None => pred_dir.to_path_buf(),
        };
        if !d.is_dir() {
            continue;
        }
        for p in sorted_dir(&d)?.into_iter().filter(|p| is_image(p) && !stem(p).ends_with(SOFT_SUFFIX)) {
            let s = stem(&p);
            if !gts.iter().any(|g| &g.tag == t && g.stem == s) {
                orphans.push(format!("{} (no ground truth)", p.display()));
            }
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unmatched files: {}", orphans.join(", "))));
    }
    let default_name = gt_dir.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    let mut records = Vec::new();
    let mut softs = Vec::new();
    let mut gts_all = Vec::new();
    for t in &tags {
        let mut pairs = Vec::new();
        for g in gts.iter().filter(|g| &g.tag == t) {
            let pred = read_mask_native(&pred_dir.join(g.rel(&format!("{}.png", g.stem))))?;
            let side = pred.shape()[1];
            let gt = gt_at(&g.path, side)?;
            if sweep {
                let sp = pred_dir.join(g.rel(&format!("{}{SOFT_SUFFIX}.png", g.stem)));
                if !sp.is_file() {
                    return Err(Error::Data(format!("--sweep needs soft mask {}", sp.display())));
                }
                softs.push(read_soft_mask(&sp)?.into_data());
                gts_all.push(gt.clone());
            }
            pairs.push((pred.into_data(), gt));
        }
        let refs: Vec<(&[f32], &[f32])> = pairs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
        records.push(evaluate_dataset(&refs, t.as_deref().unwrap_or(&default_name))?);
    }
    let avg = weighted_average(&records)?;
    records.push(avg);
    let sweep = if sweep {
        let s: Vec<&[f32]> = softs.iter().map(|v| v.as_slice()).collect();
        let g: Vec<&[f32]> = gts_all.iter().map(|v| v.as_slice()).collect();
        Some(threshold_sweep(&s, &g, &SWEEP_THRESHOLDS)?)
    } else {
        None
    };
    Ok(EvalReport { records, sweep })
}

/// Label propagation from the seeds file over a grayscale image; the mask
/// is written to `out` as `{0, 255}`.
pub fn cmd_oracle(cfg: &RunConfig, image: &Path, seeds: &Path, out: &Path) -> Result<PropagationResult> {
    let (img, w, h) = read_gray(image)?;
    let seeds = read_seeds(seeds)?;
    let res = segment_by_propagation(&img, w, h, &seeds, &cfg.propagation()?)?;
    if w != h {
        return Err(Error::Data(format!("{}: oracle output needs a square image", image.display())));
    }
    save_binary_mask(&Tensor::new(vec![1, h, w], res.mask.clone())?, out)?;
    Ok(res)
}

/// Write the bright-line instance as `image.png`, `gt.png` and `seeds.txt`.
pub fn write_bright_line_demo(dir: &Path, side: usize) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let (img, gt, seeds) = bright_line_instance(side);
    let ip = dir.join("image.png");
    let gp = dir.join("gt.png");
    let sp = dir.join("seeds.txt");
    let px: Vec<u8> = img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    image::GrayImage::from_raw(side as u32, side as u32, px)
        .expect("buffer size")
        .save(&ip)
        .map_err(|e| Error::Image {
            path: ip.clone(),
            source: e,
        })?;
    save_binary_mask(&Tensor::new(vec![1, side, side], gt)?, &gp)?;
    fs::write(&sp, format_seeds(&seeds)).map_err(|e| Error::io(&sp, e))?;
    Ok((ip, gp, sp))
}

/// Generate `synth.n` samples into `<out_dir>/<synth.tag>/{images,masks}`.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<SegmentationSample>> {
    let tag = cfg.get("synth.tag").to_string();
    if tag.is_empty() || tag.contains(['/', '\\']) {
        return Err(Error::Config(format!("synth.tag '{tag}' is not a directory name")));
    }
    let mut samples = synth_dataset(&cfg.synth()?, cfg.num("synth.n")?, cfg.num("synth.seed")?)?;
    for s in &mut samples {
        s.id = format!("{tag}/{}", s.stem());
        s.dataset_tag = tag.clone();
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(&tag).join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_dataset(out_dir, &samples)?;
    cfg.save(&out_dir.join(format!("{tag}.config")))?;
    Ok(samples)
}

/// STAPLE-fuse binary masks into `out` (binary), `<out>_soft.png` and a
/// `.staple.json` sidecar.
pub fn cmd_fuse(cfg: &RunConfig, masks: &[PathBuf], out: &Path) -> Result<FusedPrediction> {
    let samples: Vec<Tensor<f32>> = masks.iter().map(|p| read_mask_native(p)).collect::<Result<_>>()?;
    if let Some(bad) = samples.iter().position(|s| s.shape() != samples[0].shape()) {
        return Err(Error::Data(format!(
            "{} has shape {:?}, expected {:?}",
            masks[bad].display(),
            samples[bad].shape(),
            samples[0].shape()
        )));
    }
    let theta = cfg.theta()?;
    let f = fuse_samples(&samples, theta, &cfg.staple()?)?;
    save_binary_mask(&f.mask, out)?;
    let soft = out.with_file_name(format!("{}{SOFT_SUFFIX}.png", stem(out)));
    save_soft_mask(&f.consensus, &soft)?;
    let side_path = out.with_file_name(format!("{}.staple.json", stem(out)));
    let sc = Sidecar {
        id: stem(out),
        theta,
        chain_seeds: &[],
        staple: f.staple.as_ref(),
    };
    let text = serde_json::to_string_pretty(&sc).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))?;
    Ok(f)
}
