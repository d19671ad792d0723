//! The assembled CrossDiff model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::CrossDecoder;
use crate::encoder::CrossEncoder;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct CrossDiff {
    pub config: ModelConfig,
    pub encoder: CrossEncoder,
    pub unet: crate::unet::DiffusionUNet,
    pub decoder: CrossDecoder,
    pub schedule: NoiseSchedule,
}

impl CrossDiff {
    /// Build the model and a freshly initialized parameter store.
    pub fn new<F: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = CrossEncoder::new(&mut store, &config, &mut rng);
        let unet = crate::unet::DiffusionUNet::new(&mut store, &config, &mut rng);
        let decoder = CrossDecoder::new(&mut store, &config, &mut rng);
        let schedule = config.schedule.build()?;
        Ok((
            CrossDiff {
                config,
                encoder,
                unet,
                decoder,
                schedule,
            },
            store,
        ))
    }

    /// Check that `store` holds every parameter this model expects, with
    /// matching shapes. With `inference_only`, the decoder group may be absent.
    pub fn check_store<F: Scalar>(&self, store: &ParamStore<F>, inference_only: bool) -> Result<()> {
        let (_, reference) = Self::new::<F>(self.config.clone(), 0)?;
        for (name, p) in reference.iter() {
            if inference_only && crate::params::group_of(name) == "cross_decoder" {
                continue;
            }
            let got = store
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_cover_store() {
        let (m, store) = CrossDiff::new::<f32>(ModelConfig::desk(), 0).unwrap();
        let total: usize = crate::params::GROUPS.iter().map(|g| store.group_scalars(g)).sum();
        assert_eq!(total, store.num_scalars());
        for g in crate::params::GROUPS {
            assert!(store.group_scalars(g) > 0, "{g}");
        }
        m.check_store(&store, false).unwrap();
        let mut stripped = store.clone();
        stripped.remove_group("cross_decoder");
        assert!(m.check_store(&stripped, false).is_err());
        m.check_store(&stripped, true).unwrap();
    }

    #[test]
    fn same_seed_same_init() {
        let (_, a) = CrossDiff::new::<f32>(ModelConfig::desk(), 7).unwrap();
        let (_, b) = CrossDiff::new::<f32>(ModelConfig::desk(), 7).unwrap();
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }
}
