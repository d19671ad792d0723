//! Resolved run configuration: flat `section.key=value` entries merged from
//! preset defaults, an optional config file and command-line overrides.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{train_config_from_map, train_config_map};
use crate::config::ModelConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::inference::Sampler;
use crate::propagation::{Neighborhood, PropagationParams, SelfWeight};
use crate::staple::StapleParams;
use crate::training::TrainConfig;

/// Environment variable consulted for `data.root` when nothing else sets it.
pub const DATA_ROOT_ENV: &str = "CROSSDIFF_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

fn is_model_key(k: &str) -> bool {
    k.starts_with("model.") || k.starts_with("schedule.")
}

fn train_defaults(preset: &str) -> TrainConfig {
    if preset == "desk" {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    }
}

fn other_defaults() -> BTreeMap<String, String> {
    let s = SynthConfig::desk();
    let p = PropagationParams::default();
    let st = StapleParams::default();
    let root = std::env::var(DATA_ROOT_ENV).unwrap_or_default();
    [
        ("data.root", root),
        ("data.tags", String::new()),
        ("data.val_frac", "0".into()),
        ("data.test_frac", "0".into()),
        ("data.split_seed", "0".into()),
        ("predict.theta", "0.5".into()),
        ("predict.ensemble", "5".into()),
        ("predict.seed", "0".into()),
        ("predict.batch_size", "8".into()),
        ("predict.sampler", Sampler::default().as_str().into()),
        ("staple.prior", "auto".into()),
        ("staple.tol", format!("{:e}", st.tol)),
        ("staple.max_iter", st.max_iter.to_string()),
        ("staple.init", st.init.to_string()),
        ("oracle.neighborhood", p.neighborhood.as_str().into()),
        ("oracle.sigma", p.sigma.to_string()),
        ("oracle.self_weight", "mean".into()),
        ("oracle.steps", p.steps.to_string()),
        ("oracle.theta", p.theta.to_string()),
        ("synth.n", "8".into()),
        ("synth.side", s.side.to_string()),
        ("synth.diff_side", s.diff_side.to_string()),
        ("synth.cracks", format!("{}-{}", s.cracks.start(), s.cracks.end())),
        ("synth.width", format!("{}-{}", s.width.start(), s.width.end())),
        ("synth.seed", "0".into()),
        ("synth.tag", "synth".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn known_keys() -> BTreeSet<String> {
    let mut k: BTreeSet<String> = ModelConfig::desk().to_map().into_keys().collect();
    k.extend(train_config_map(&TrainConfig::default()).into_keys());
    k.extend(other_defaults().into_keys());
    k
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_range(key: &str, v: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || Error::Config(format!("{key}: expected N or LO-HI, got '{v}'"));
    let (a, b) = v.split_once('-').unwrap_or((v, v));
    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

impl RunConfig {
    /// Defaults for `preset` (or the file's `model.preset`, or `desk`),
    /// then the file, then `overrides`, later entries winning.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = match file {
            Some(p) => parse_entries(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Vec::new(),
        };
        entries.extend(overrides.iter().cloned());
        if let Some(p) = preset {
            entries.push(("model.preset".into(), p.to_string()));
        }
        Self::from_entries(&entries)
    }

    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let known = known_keys();
        let mut user = BTreeMap::new();
        for (k, v) in entries {
            if !known.contains(k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
            user.insert(k.clone(), v.clone());
        }
        let model_user: BTreeMap<String, String> = user
            .iter()
            .filter(|(k, _)| is_model_key(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let model = ModelConfig::from_map(&model_user)?;
        let mut values = model.to_map();
        values.extend(train_config_map(&train_defaults(&model.preset)));
        values.extend(other_defaults());
        for (k, v) in &user {
            if !is_model_key(k) {
                values.insert(k.clone(), v.clone());
            }
        }
        let cfg = RunConfig {
            values,
            explicit: user.into_keys().collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse every typed section once so bad values fail early.
    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.train()?.validate()?;
        self.staple()?;
        self.propagation()?;
        self.synth()?;
        let t = self.theta()?;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("predict.theta {t} outside (0, 1)")));
        }
        self.sampler()?;
        if self.ensemble()? == 0 {
            return Err(Error::Config("predict.ensemble must be at least 1".into()));
        }
        if self.num::<usize>("predict.batch_size")? == 0 {
            return Err(Error::Config("predict.batch_size must be positive".into()));
        }
        self.num::<f64>("data.val_frac")?;
        self.num::<f64>("data.test_frac")?;
        self.num::<u64>("data.split_seed")?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Whether `key` came from the file or the command line.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn explicit_model_keys(&self) -> impl Iterator<Item = &String> {
        self.explicit.iter().filter(|k| is_model_key(k))
    }

    pub fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn model(&self) -> Result<ModelConfig> {
        ModelConfig::from_map(&self.values)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        train_config_from_map(&self.values).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn staple(&self) -> Result<StapleParams> {
        let prior = match self.get("staple.prior") {
            "auto" | "" => None,
            _ => Some(self.num("staple.prior")?),
        };
        Ok(StapleParams {
            prior,
            tol: self.num("staple.tol")?,
            max_iter: self.num("staple.max_iter")?,
            init: self.num("staple.init")?,
        })
    }

    pub fn propagation(&self) -> Result<PropagationParams> {
        let self_weight = match self.get("oracle.self_weight") {
            "mean" => SelfWeight::MeanNeighbor,
            _ => SelfWeight::Fixed(self.num("oracle.self_weight")?),
        };
        Ok(PropagationParams {
            neighborhood: Neighborhood::parse(self.get("oracle.neighborhood"))?,
            sigma: self.num("oracle.sigma")?,
            self_weight,
            steps: self.num("oracle.steps")?,
            theta: self.num("oracle.theta")?,
        })
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            side: self.num("synth.side")?,
            diff_side: self.num("synth.diff_side")?,
            cracks: parse_range("synth.cracks", self.get("synth.cracks"))?,
            width: parse_range("synth.width", self.get("synth.width"))?,
        })
    }

    pub fn theta(&self) -> Result<f64> {
        self.num("predict.theta")
    }

    pub fn sampler(&self) -> Result<Sampler> {
        Sampler::parse(self.get("predict.sampler"))
    }

    pub fn ensemble(&self) -> Result<usize> {
        self.num("predict.ensemble")
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        Some(self.get("data.root")).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn data_tags(&self) -> Option<Vec<String>> {
        let t = self.get("data.tags");
        (!t.is_empty()).then(|| t.split(',').map(|s| s.trim().to_string()).collect())
    }

    /// Sorted `key=value` lines; feeding them back through [`parse_entries`]
    /// reproduces this configuration.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
