//! Cross encoder: a ViT over the RGB image with a neck that projects the patch
//! grid onto the diffusion bottleneck.

use rand::Rng;

use crate::config::{EncoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, embedding_init, LayerNorm, Linear, ResampleKind, SelfAttention};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

const PREFIX: &str = "cross_encoder";

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, d * cfg.mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), d * cfg.mlp_ratio, d, rng),
        }
    }

    /// Pre-norm block; returns the new tokens and the attention weight node.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.ln1.forward(g, x)?;
        let attn = self.attn.forward(g, h)?;
        let x = g.add(x, attn.out)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        Ok((g.add(x, h)?, attn.weights))
    }
}

/// Conditioning features on the bottleneck grid.
#[derive(Debug, Clone)]
pub struct ConditioningEmbedding<F> {
    /// `[B, c_b, h_b, w_b]`.
    pub features: Tensor<F>,
    /// Side of the patch grid the features were resampled from.
    pub source_grid: usize,
}

#[derive(Debug, Clone)]
pub struct CrossEncoder {
    pub config: EncoderConfig,
    patch_proj: Linear,
    pos: String,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    neck: Linear,
    neck_resample: ResampleKind,
    target_side: usize,
}

impl CrossEncoder {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, model: &ModelConfig, rng: &mut R) -> Self {
        let cfg = model.encoder.clone();
        let patch_dim = 3 * cfg.patch * cfg.patch;
        let n = cfg.grid_side() * cfg.grid_side();
        let pos = format!("{PREFIX}.pos_embed");
        let patch_proj = Linear::new(store, &format!("{PREFIX}.patch_embed"), patch_dim, cfg.width, rng);
        store.insert(pos.clone(), embedding_init(&[n, cfg.width], rng), false);
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{PREFIX}.blocks.{i}"), &cfg, rng))
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{PREFIX}.norm"), cfg.width);
        let neck = Linear::new(store, &format!("{PREFIX}.neck"), cfg.width, model.bottleneck_channels(), rng);
        CrossEncoder {
            patch_proj,
            pos,
            blocks,
            final_ln,
            neck,
            neck_resample: model.neck_resample,
            target_side: model.bottleneck_side(),
            config: cfg,
        }
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    /// `[B, 3, S, S]` image to `[B, N, width]` patch tokens.
    pub fn patch_embed<F: Scalar>(&self, g: &mut Graph<'_, F>, image: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = g.value(image).dims4()?;
        let s = self.config.image_side;
        let p = self.config.patch;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "patch_embed",
                format!("expected [B, 3, {s}, {s}], got {:?}", g.shape(image)),
            ));
        }
        let gs = s / p;
        let x = g.reshape(image, &[b, 3, gs, p, gs, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[b, gs * gs, 3 * p * p])?;
        self.patch_proj.forward(g, x)
    }

    pub fn add_positional<F: Scalar>(&self, g: &mut Graph<'_, F>, tokens: NodeId) -> Result<NodeId> {
        let pos = g.param(&self.pos)?;
        g.add_broadcast(tokens, pos)
    }

    /// Project tokens to the bottleneck width and resample the grid to the
    /// bottleneck side: `[B, N, width]` to `[B, c_b, h_b, w_b]`.
    pub fn neck<F: Scalar>(&self, g: &mut Graph<'_, F>, tokens: NodeId) -> Result<NodeId> {
        let gs = self.config.grid_side();
        let x = self.neck.forward(g, tokens)?;
        let x = nn::from_tokens(g, x, gs, gs)?;
        nn::resample(g, x, self.neck_resample, self.target_side, self.target_side)
    }

    /// Full encoder on a graph node. Also returns each block's attention weights.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, image: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let x = self.patch_embed(g, image)?;
        let mut x = self.add_positional(g, x)?;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(g, x)?;
            x = y;
            weights.push(w);
        }
        let x = self.final_ln.forward(g, x)?;
        Ok((self.neck(g, x)?, weights))
    }

    /// Inference-only convenience: encode a batch of images once.
    pub fn encode_condition<F: Scalar>(&self, store: &ParamStore<F>, image: &Tensor<F>) -> Result<ConditioningEmbedding<F>> {
        let mut g = Graph::inference(store);
        let x = g.input(image.clone());
        let (e, _) = self.forward(&mut g, x)?;
        Ok(ConditioningEmbedding {
            features: g.value(e).clone(),
            source_grid: self.config.grid_side(),
        })
    }
}
