//! Diffusion UNet over the noisy mask, with the fusion nexus at the bottleneck.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{self, Conv2d, GroupNorm, Linear, ResampleKind, SelfAttention};
use crate::params::ParamStore;
use crate::schedule::TimestepEmbedding;
use crate::tensor::{Scalar, Tensor};

const PREFIX: &str = "diffusion_unet";

/// Time-conditioned residual block: GN, SiLU, conv, + time bias, GN, SiLU, conv.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), groups, c_in),
            conv1: Conv2d::same(store, &format!("{name}.conv1"), c_in, c_out, rng),
            time: Linear::new(store, &format!("{name}.time"), temb, c_out, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), groups, c_out),
            conv2: Conv2d::same(store, &format!("{name}.conv2"), c_out, c_out, rng),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)),
        }
    }

    /// `temb` is the activated shared step embedding, `[B, temb]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId, temb: NodeId) -> Result<NodeId> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let tb = self.time.forward(g, temb)?;
        let h = g.add_channel(h, tb)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(h, s)
    }
}

/// Residual self-attention over the spatial positions of a feature map.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm: GroupNorm,
    attn: SelfAttention,
}

impl AttentionBlock {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        heads: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        AttentionBlock {
            norm: GroupNorm::new(store, &format!("{name}.norm"), groups, channels),
            attn: SelfAttention::new(store, &format!("{name}.attn"), channels, heads, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let y = self.norm.forward(g, x)?;
        let y = nn::to_tokens(g, y)?;
        let y = self.attn.forward(g, y)?.out;
        let y = nn::from_tokens(g, y, h, w)?;
        g.add(x, y)
    }
}

/// Merges the conditioning embedding into the bottleneck:
/// `ResBlock(Attn(ResBlock(E_I + bottleneck)))`.
#[derive(Debug, Clone)]
pub struct FusionNexus {
    res1: ResBlock,
    attn: AttentionBlock,
    res2: ResBlock,
}

impl FusionNexus {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, cond: NodeId, bottleneck: NodeId, temb: NodeId) -> Result<NodeId> {
        if g.shape(cond) != g.shape(bottleneck) {
            return Err(Error::shape(
                "fuse",
                format!(
                    "conditioning {:?} does not match bottleneck {:?}",
                    g.shape(cond),
                    g.shape(bottleneck)
                ),
            ));
        }
        let x = g.add(cond, bottleneck)?;
        let x = self.res1.forward(g, x, temb)?;
        let x = self.attn.forward(g, x)?;
        self.res2.forward(g, x, temb)
    }

    /// Parameter names of the residual branches' output layers. Zeroing them
    /// reduces the nexus to `E_I + bottleneck`.
    pub fn residual_outputs(&self) -> Vec<String> {
        vec![
            self.res1.conv2.weight_name().to_string(),
            self.res1.conv2.weight_name().replace(".weight", ".bias"),
            self.attn.attn.proj_weight_name().to_string(),
            self.attn.attn.proj_weight_name().replace(".weight", ".bias"),
            self.res2.conv2.weight_name().to_string(),
            self.res2.conv2.weight_name().replace(".weight", ".bias"),
        ]
    }
}

/// Encoder-side activations of the UNet for one noisy input.
#[derive(Debug, Clone)]
pub struct NoisyFeatures {
    pub bottleneck: NodeId,
    /// One per stage, finest first.
    pub skips: Vec<NodeId>,
}

#[derive(Debug, Clone)]
struct DownStage {
    res: ResBlock,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Conv2d,
    res: ResBlock,
}

#[derive(Debug, Clone)]
pub struct DiffusionUNet {
    pub time: TimestepEmbedding,
    time_fc1: Linear,
    time_fc2: Linear,
    stem: Conv2d,
    down: Vec<DownStage>,
    pub nexus: FusionNexus,
    up: Vec<UpStage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    side: usize,
    widths: Vec<usize>,
}

impl DiffusionUNet {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let time = TimestepEmbedding::new(store, cfg.schedule.steps, cfg.time_dim, cfg.time_kind);
        let te = cfg.temb_dim;
        let gr = cfg.groups;
        let w = &cfg.unet_widths;
        let time_fc1 = Linear::new(store, &format!("{PREFIX}.time_mlp.fc1"), cfg.time_dim, te, rng);
        let time_fc2 = Linear::new(store, &format!("{PREFIX}.time_mlp.fc2"), te, te, rng);
        let stem = Conv2d::same(store, &format!("{PREFIX}.stem"), 1, w[0], rng);
        let mut down = Vec::new();
        let mut ch = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let name = format!("{PREFIX}.down.{i}");
            down.push(DownStage {
                res: ResBlock::new(store, &format!("{name}.res"), ch, wi, te, gr, rng),
                down: Conv2d::new(store, &format!("{name}.downsample"), wi, wi, 3, 2, 1, rng),
            });
            ch = wi;
        }
        let cb = cfg.bottleneck_channels();
        let nexus = FusionNexus {
            res1: ResBlock::new(store, &format!("{PREFIX}.nexus.res1"), cb, cb, te, gr, rng),
            attn: AttentionBlock::new(store, &format!("{PREFIX}.nexus.attn"), cb, cfg.attention_heads, gr, rng),
            res2: ResBlock::new(store, &format!("{PREFIX}.nexus.res2"), cb, cb, te, gr, rng),
        };
        let mut up = Vec::new();
        for i in (0..w.len()).rev() {
            let name = format!("{PREFIX}.up.{i}");
            up.push(UpStage {
                up: Conv2d::same(store, &format!("{name}.upsample"), ch, ch, rng),
                res: ResBlock::new(store, &format!("{name}.res"), ch + w[i], w[i], te, gr, rng),
            });
            ch = w[i];
        }
        let out_norm = GroupNorm::new(store, &format!("{PREFIX}.out_norm"), gr, ch);
        let out_conv = Conv2d::same(store, &format!("{PREFIX}.out_conv"), ch, 1, rng).zero_init(store);
        DiffusionUNet {
            time,
            time_fc1,
            time_fc2,
            stem,
            down,
            nexus,
            up,
            out_norm,
            out_conv,
            side: cfg.diffusion_side,
            widths: w.clone(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Activated step embedding `[B, temb]` shared by every block.
    pub fn time_features<F: Scalar>(&self, g: &mut Graph<'_, F>, steps: &[usize]) -> Result<NodeId> {
        let e = self.time.lookup(g, steps)?;
        let e = self.time_fc1.forward(g, e)?;
        let e = g.silu(e);
        let e = self.time_fc2.forward(g, e)?;
        Ok(g.silu(e))
    }

    pub fn encode_noisy<F: Scalar>(&self, g: &mut Graph<'_, F>, x_t: NodeId, temb: NodeId) -> Result<NoisyFeatures> {
        let (b, c, h, w) = g.value(x_t).dims4()?;
        if c != 1 || h != self.side || w != self.side || g.shape(temb)[0] != b {
            return Err(Error::shape(
                "encode_noisy",
                format!("expected [{b}, 1, {s}, {s}], got {:?}", g.shape(x_t), s = self.side),
            ));
        }
        let mut x = self.stem.forward(g, x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            x = stage.res.forward(g, x, temb)?;
            skips.push(x);
            x = stage.down.forward(g, x)?;
        }
        Ok(NoisyFeatures { bottleneck: x, skips })
    }

    pub fn fuse<F: Scalar>(&self, g: &mut Graph<'_, F>, cond: NodeId, bottleneck: NodeId, temb: NodeId) -> Result<NodeId> {
        self.nexus.forward(g, cond, bottleneck, temb)
    }

    /// Predicted noise `[B, 1, side, side]` from the fused state and skips.
    pub fn decode_eps<F: Scalar>(&self, g: &mut Graph<'_, F>, fused: NodeId, skips: &[NodeId], temb: NodeId) -> Result<NodeId> {
        if skips.len() != self.up.len() {
            return Err(Error::shape(
                "decode_eps",
                format!("expected {} skips, got {}", self.up.len(), skips.len()),
            ));
        }
        let mut x = fused;
        for (stage, &skip) in self.up.iter().zip(skips.iter().rev()) {
            let (_, _, h, w) = g.value(x).dims4()?;
            let (_, _, sh, sw) = g.value(skip).dims4()?;
            if sh != 2 * h || sw != 2 * w || g.shape(skip)[0] != g.shape(x)[0] {
                return Err(Error::shape(
                    "decode_eps",
                    format!("skip {:?} does not pair with {:?}", g.shape(skip), g.shape(x)),
                ));
            }
            x = nn::resample(g, x, ResampleKind::Nearest, sh, sw)?;
            x = stage.up.forward(g, x)?;
            x = g.concat(x, skip, 1)?;
            x = stage.res.forward(g, x, temb)?;
        }
        let x = self.out_norm.forward(g, x)?;
        let x = g.silu(x);
        self.out_conv.forward(g, x)
    }

    /// Complete noise prediction on graph nodes.
    pub fn predict_eps<F: Scalar>(&self, g: &mut Graph<'_, F>, x_t: NodeId, cond: NodeId, steps: &[usize]) -> Result<(NodeId, NodeId)> {
        let temb = self.time_features(g, steps)?;
        let feats = self.encode_noisy(g, x_t, temb)?;
        let fused = self.fuse(g, cond, feats.bottleneck, temb)?;
        let eps = self.decode_eps(g, fused, &feats.skips, temb)?;
        Ok((eps, fused))
    }

    /// Inference-only noise prediction.
    pub fn eps_hat<F: Scalar>(&self, store: &ParamStore<F>, x_t: &Tensor<F>, cond: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        let mut g = Graph::inference(store);
        let b = x_t.shape()[0];
        let x = g.input(x_t.clone());
        let c = g.input(cond.clone());
        let (eps, _) = self.predict_eps(&mut g, x, c, &vec![t; b])?;
        Ok(g.value(eps).clone())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
}
