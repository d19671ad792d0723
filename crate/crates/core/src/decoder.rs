//! Cross decoder: a training-only branch that upsamples the fused state to a
//! full-resolution mask, supervising the conditioning embedding.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, ConvTranspose2d, GroupNorm, ResampleKind};
use crate::params::ParamStore;
use crate::tensor::Scalar;

const PREFIX: &str = "cross_decoder";

fn norm<F: Scalar>(store: &mut ParamStore<F>, name: &str, groups: Option<usize>, channels: usize) -> Option<GroupNorm> {
    groups.map(|gr| GroupNorm::new(store, name, gr, channels))
}

fn norm_relu<F: Scalar>(g: &mut Graph<'_, F>, n: &Option<GroupNorm>, x: NodeId) -> Result<NodeId> {
    let x = match n {
        Some(n) => n.forward(g, x)?,
        None => x,
    };
    Ok(g.relu(x))
}

/// Two stride-1 3x3 transposed convolutions with a residual connection.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: ConvTranspose2d,
    conv2: ConvTranspose2d,
    norm1: Option<GroupNorm>,
    norm2: Option<GroupNorm>,
}

impl ResidualBlock {
    /// `groups` adds a GroupNorm before each ReLU.
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        groups: Option<usize>,
        rng: &mut R,
    ) -> Self {
        ResidualBlock {
            conv1: ConvTranspose2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            conv2: ConvTranspose2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
            norm1: norm(store, &format!("{name}.norm1"), groups, channels),
            norm2: norm(store, &format!("{name}.norm2"), groups, channels),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(g, x)?;
        let h = norm_relu(g, &self.norm1, h)?;
        let h = self.conv2.forward(g, h)?;
        let y = g.add(x, h)?;
        norm_relu(g, &self.norm2, y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    up: ConvTranspose2d,
    norm: Option<GroupNorm>,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
pub struct CrossDecoder {
    stages: Vec<Stage>,
    head: ConvTranspose2d,
    in_channels: usize,
    in_side: usize,
    out_side: usize,
    calls: Arc<AtomicUsize>,
}

impl CrossDecoder {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut ch = cfg.bottleneck_channels();
        let groups = cfg.decoder_norm.then_some(cfg.groups);
        let mut stages = Vec::with_capacity(cfg.decoder_stages);
        for i in 0..cfg.decoder_stages {
            let next = (ch / 2).max(cfg.decoder_min_channels);
            let name = format!("{PREFIX}.stages.{i}");
            let up = ConvTranspose2d::new(store, &format!("{name}.up"), ch, next, 4, 2, 1, rng);
            let blocks = (0..cfg.decoder_blocks_per_stage)
                .map(|j| ResidualBlock::new(store, &format!("{name}.res.{j}"), next, groups, rng))
                .collect();
            let norm = norm(store, &format!("{name}.norm"), groups, next);
            stages.push(Stage { up, norm, blocks });
            ch = next;
        }
        let head = ConvTranspose2d::new(store, &format!("{PREFIX}.head"), ch, 1, 3, 1, 1, rng);
        CrossDecoder {
            stages,
            head,
            in_channels: cfg.bottleneck_channels(),
            in_side: cfg.decoder_input_side(),
            out_side: cfg.image_side(),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Number of `decode_mask` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn out_side(&self) -> usize {
        self.out_side
    }

    pub fn head_names(&self) -> [String; 2] {
        let w = self.head.weight_name().to_string();
        let b = w.replace(".weight", ".bias");
        [w, b]
    }

    /// Fused state `[B, c_b, h, w]` to mask probabilities `[B, 1, S, S]`.
    pub fn decode_mask<F: Scalar>(&self, g: &mut Graph<'_, F>, fused: NodeId) -> Result<NodeId> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (_, c, _, _) = g.value(fused).dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "decode_mask",
                format!("expected {} channels, got {:?}", self.in_channels, g.shape(fused)),
            ));
        }
        let mut x = nn::resample(g, fused, ResampleKind::Area, self.in_side, self.in_side)?;
        for stage in &self.stages {
            x = stage.up.forward(g, x)?;
            x = norm_relu(g, &stage.norm, x)?;
            for block in &stage.blocks {
                x = block.forward(g, x)?;
            }
        }
        let x = self.head.forward(g, x)?;
        Ok(g.sigmoid(x))
    }

    /// Mean squared error against the full-resolution `{0, 1}` mask.
    pub fn decoder_loss<F: Scalar>(&self, g: &mut Graph<'_, F>, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if g.shape(pred) != g.shape(target) {
            return Err(Error::shape(
                "decoder_loss",
                format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
            ));
        }
        let d = g.sub(pred, target)?;
        Ok(g.mean_square(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_output_side_and_counter() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = CrossDecoder::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::inference(&store);
        let f = g.input(crate::params::normal(&[2, 32, 8, 8], 1.0, &mut rng));
        let y = dec.decode_mask(&mut g, f).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 64, 64]);
        assert!(g.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(dec.calls(), 1);
        assert_eq!(dec.clone().calls(), 1);
    }

    #[test]
    fn zeroed_head_gives_half() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = CrossDecoder::new(&mut store, &cfg, &mut rng);
        for n in dec.head_names() {
            store.value_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::inference(&store);
        let f = g.input(crate::params::normal(&[1, 32, 8, 8], 1.0, &mut rng));
        let y = dec.decode_mask(&mut g, f).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
        let t = g.input(Tensor::full([1, 1, 64, 64], 0.5f32));
        let l = dec.decoder_loss(&mut g, y, t).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn norm_switch() {
        let mut cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut with = ParamStore::<f32>::new();
        let _ = CrossDecoder::new(&mut with, &cfg, &mut rng);
        cfg.decoder_norm = false;
        let mut without = ParamStore::<f32>::new();
        let _ = CrossDecoder::new(&mut without, &cfg, &mut rng);
        assert!(with.names().any(|n| n.ends_with("res.0.norm2.gamma")));
        assert!(without.names().all(|n| !n.contains("norm")));
        assert_eq!(with.len() - without.len(), 2 * 3 * cfg.decoder_stages);
    }

    #[test]
    fn channel_floor() {
        let cfg = ModelConfig::full();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = CrossDecoder::new(&mut store, &cfg, &mut rng);
        let shape = |n: &str| store.value(n).unwrap().shape().to_vec();
        assert_eq!(shape("cross_decoder.stages.0.up.weight"), vec![512, 256, 4, 4]);
        assert_eq!(shape("cross_decoder.stages.5.up.weight"), vec![16, 16, 4, 4]);
        assert_eq!(shape("cross_decoder.head.weight"), vec![16, 1, 3, 3]);
    }
}
