//! Named parameter storage shared by every sub-network.
//!
//! Parameter names are dotted paths whose first segment is the parameter
//! group (`cross_encoder`, `diffusion_unet`, `cross_decoder`, `time_table`).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameter groups persisted in checkpoints.
pub const GROUPS: [&str; 4] = ["cross_encoder", "diffusion_unet", "cross_decoder", "time_table"];

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    /// Frozen parameters (e.g. a sinusoidal step table) never receive gradients.
    pub trainable: bool,
    /// Whether decoupled weight decay applies. Off for biases, norms and tables.
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Param<F>>,
}

/// Group segment of a dotted parameter name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) {
        self.params.insert(
            name.into(),
            Param {
                value,
                trainable: true,
                decay,
            },
        );
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.params.insert(
            name.into(),
            Param {
                value,
                trainable: false,
                decay: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn group_scalars(&self, group: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| group_of(n) == group)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Drop every parameter of one group, returning how many were removed.
    pub fn remove_group(&mut self, group: &str) -> usize {
        let before = self.params.len();
        self.params.retain(|n, _| group_of(n) != group);
        before - self.params.len()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Uniform `U(-bound, bound)` initialization.
pub fn uniform<F: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

pub fn normal<F: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}
