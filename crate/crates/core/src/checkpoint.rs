//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CRDIFFCK"
//! version u32
//! header  u32 length, UTF-8 `key=value` lines sorted by key, u32 crc32
//! count   u32
//! arrays  count times:
//!           u16 name length, name bytes
//!           u8 rank, rank x u32 dims
//!           f32 payload (product of dims)
//!           u32 crc32 over name, shape and payload bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::CrossDiff;
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::{group_of, ParamStore};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CRDIFFCK";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub header: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Skip the cross-decoder group and optimizer moments.
    pub inference_only: bool,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(bundle: &CheckpointBundle) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let mut header = String::new();
    for (k, v) in &bundle.header {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("header entry '{k}' cannot be encoded")));
        }
        header.push_str(&format!("{k}={v}\n"));
    }
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, crc32fast::hash(header.as_bytes()));
    put_u32(&mut out, bundle.arrays.len() as u32);
    for (name, t) in &bundle.arrays {
        let start = out.len();
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("array '{name}' cannot be encoded")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        put_u32(&mut out, crc);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8], opts: LoadOptions) -> Result<CheckpointBundle> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let hlen = r.u32()? as usize;
    let hbytes = r.take(hlen)?;
    if r.u32()? != crc32fast::hash(hbytes) {
        return Err(Error::Checkpoint("header checksum mismatch".into()));
    }
    let text = std::str::from_utf8(hbytes).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line '{line}'")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos;
        let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let end = r.pos;
        if r.u32()? != crc32fast::hash(&buf[start..end]) {
            return Err(Error::Checkpoint(format!("checksum mismatch in array '{name}'")));
        }
        let skip = opts.inference_only && (group_of(&name) == "cross_decoder" || name.starts_with("optim."));
        if skip {
            continue;
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after the last array".into()));
    }
    Ok(CheckpointBundle { header, arrays })
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let bytes = encode(bundle)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write to a sibling file first so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, opts: LoadOptions) -> Result<CheckpointBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, opts)
}

/// `train.*` entries of the header.
pub fn train_config_map(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let o = &cfg.optimizer;
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(format!("train.{k}"), v);
    };
    put("alpha", format!("{}", cfg.alpha));
    put("beta", format!("{}", cfg.beta));
    put("total_steps", cfg.total_steps.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("seed", cfg.seed.to_string());
    put("lr", format!("{:e}", o.lr));
    put("adam_beta1", format!("{}", o.beta1));
    put("adam_beta2", format!("{}", o.beta2));
    put("adam_eps", format!("{:e}", o.eps));
    put("weight_decay", format!("{:e}", o.weight_decay));
    put("clip_norm", o.clip_norm.map_or("none".into(), |c| format!("{c}")));
    put("checkpoint_every", cfg.checkpoint_every.to_string());
    put("log_every", cfg.log_every.to_string());
    m
}

fn header_get<'a>(h: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
    h.get(k)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("header lacks '{k}'")))
}

fn parse_num<T: std::str::FromStr>(h: &BTreeMap<String, String>, k: &str) -> Result<T> {
    let v = header_get(h, k)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("header '{k}': cannot parse '{v}'")))
}

pub fn train_config_from_map(h: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let clip = header_get(h, "train.clip_norm")?;
    Ok(TrainConfig {
        alpha: parse_num(h, "train.alpha")?,
        beta: parse_num(h, "train.beta")?,
        total_steps: parse_num(h, "train.total_steps")?,
        batch_size: parse_num(h, "train.batch_size")?,
        seed: parse_num(h, "train.seed")?,
        optimizer: AdamWConfig {
            lr: parse_num(h, "train.lr")?,
            beta1: parse_num(h, "train.adam_beta1")?,
            beta2: parse_num(h, "train.adam_beta2")?,
            eps: parse_num(h, "train.adam_eps")?,
            weight_decay: parse_num(h, "train.weight_decay")?,
            clip_norm: if clip == "none" {
                None
            } else {
                Some(parse_num(h, "train.clip_norm")?)
            },
        },
        checkpoint_every: parse_num(h, "train.checkpoint_every")?,
        log_every: parse_num(h, "train.log_every")?,
    })
}

impl CheckpointBundle {
    /// Snapshot of model parameters, optimizer state and configuration.
    pub fn from_state(model: &CrossDiff, state: &TrainState<f32>, cfg: &TrainConfig) -> Self {
        let mut header = model.config.to_map();
        header.extend(model.schedule.metadata());
        header.extend(train_config_map(cfg));
        header.insert("format.version".into(), VERSION.to_string());
        header.insert("state.step".into(), state.step.to_string());
        header.insert("state.optimizer_steps".into(), state.optimizer.steps_taken().to_string());
        let mut arrays = BTreeMap::new();
        for (name, p) in state.store.iter() {
            arrays.insert(name.clone(), p.value.clone());
        }
        for (name, m) in state.optimizer.state() {
            arrays.insert(format!("{M_PREFIX}{name}"), m.m.clone());
            arrays.insert(format!("{V_PREFIX}{name}"), m.v.clone());
        }
        CheckpointBundle { header, arrays }
    }

    pub fn step(&self) -> Result<u64> {
        parse_num(&self.header, "state.step")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_map(&self.header).map_err(|e| Error::Checkpoint(format!("model config: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        train_config_from_map(&self.header)
    }

    /// Rebuild the model and its parameters. Parameters absent from the bundle
    /// are an error unless `inference_only`, where the decoder group is dropped.
    pub fn restore_model(&self, inference_only: bool) -> Result<(CrossDiff, ParamStore<f32>)> {
        let (model, mut store) = CrossDiff::new::<f32>(self.model_config()?, 0)?;
        if inference_only {
            store.remove_group("cross_decoder");
        }
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let src = self
                .arrays
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            let dst = store.value_mut(&name)?;
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        for name in self.arrays.keys() {
            if !name.starts_with("optim.") && !store.contains(name) && !(inference_only && group_of(name) == "cross_decoder") {
                return Err(Error::Checkpoint(format!("unexpected parameter '{name}'")));
            }
        }
        Ok((model, store))
    }

    /// Rebuild model plus full training state for resuming.
    pub fn restore_training(&self) -> Result<(CrossDiff, TrainState<f32>, TrainConfig)> {
        let (model, store) = self.restore_model(false)?;
        let cfg = self.train_config()?;
        let mut moments = BTreeMap::new();
        for (name, m) in &self.arrays {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                let v = self
                    .arrays
                    .get(&format!("{V_PREFIX}{p}"))
                    .ok_or_else(|| Error::Checkpoint(format!("second moment for '{p}' missing")))?;
                moments.insert(
                    p.to_string(),
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        let opt = AdamW::restore(cfg.optimizer.clone(), parse_num(&self.header, "state.optimizer_steps")?, moments)?;
        let state = TrainState {
            store,
            optimizer: opt,
            step: self.step()?,
        };
        Ok((model, state, cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> CheckpointBundle {
        let mut header = BTreeMap::new();
        header.insert("a.b".into(), "1".into());
        let mut arrays = BTreeMap::new();
        arrays.insert("cross_encoder.w".into(), Tensor::from_f64([2, 2], &[1.0, -2.0, 3.5, 0.0]).unwrap());
        arrays.insert("cross_decoder.w".into(), Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
        CheckpointBundle { header, arrays }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = bundle();
        let bytes = encode(&b).unwrap();
        let back = decode(&bytes, LoadOptions::default()).unwrap();
        assert_eq!(back, b);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let bytes = encode(&bundle()).unwrap();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8] ^= 0x40;
        assert!(matches!(decode(&bad, LoadOptions::default()), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..n - 3], LoadOptions::default()), Err(Error::Checkpoint(_))));
        let mut v = bytes.clone();
        v[8] = 9;
        let e = decode(&v, LoadOptions::default()).unwrap_err();
        assert!(e.to_string().contains("version"));
    }

    #[test]
    fn inference_only_skips_decoder() {
        let bytes = encode(&bundle()).unwrap();
        let b = decode(&bytes, LoadOptions { inference_only: true }).unwrap();
        assert_eq!(b.arrays.len(), 1);
        assert!(b.arrays.contains_key("cross_encoder.w"));
    }
}
