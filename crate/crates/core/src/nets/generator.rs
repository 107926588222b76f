//! BigGAN-deep generator for 32×32 outputs.
//!
//! `concat(z, shared(y))` feeds the 4×4 seed projection and every
//! class-conditional batch norm. Each stage holds `depth` bottleneck blocks;
//! the last one upsamples. Self-attention follows the 16×16 stage. The
//! output head is BN → ReLU → 3×3 conv → sigmoid.

use krlab_nn::layers::{BatchNorm, Conv2d, ConvSpec, Embedding, Linear, SelfAttention};
use krlab_nn::{Binder, Graph, Init, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_labels, Profile};
use crate::error::{KrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub shared_dim: usize,
    pub conv_dim: usize,
    pub depth: usize,
    pub attention_resolution: Option<usize>,
    pub num_classes: usize,
    pub output_channels: usize,
}

impl GeneratorConfig {
    pub fn for_profile(profile: Profile, num_classes: usize, output_channels: usize) -> Self {
        let conv_dim = match profile {
            Profile::Full => 128,
            Profile::Tiny => 4,
        };
        Self {
            latent_dim: 128,
            shared_dim: 128,
            conv_dim,
            depth: 2,
            attention_resolution: Some(16),
            num_classes,
            output_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.conv_dim == 0 || self.depth == 0 || self.num_classes == 0 {
            return Err(KrError::Config(format!("invalid generator config {self:?}")));
        }
        if !matches!(self.output_channels, 1 | 3) {
            return Err(KrError::Config("generator output channels must be 1 or 3".into()));
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        self.latent_dim + self.shared_dim
    }
}

/// Batch norm whose gain `1 + W_g·c` and bias `W_b·c` come from the
/// conditioning vector `c`.
#[derive(Clone, Debug)]
struct CondBatchNorm {
    bn: BatchNorm,
    gain: Linear,
    bias: Linear,
}

impl CondBatchNorm {
    fn new(store: &mut ParamStore, name: &str, cond: usize, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn: BatchNorm::new(store, name, ch, false),
            gain: Linear::new(store, &format!("{name}.gain"), cond, ch, false, true, Init::Orthogonal, rng),
            bias: Linear::new(store, &format!("{name}.bias"), cond, ch, false, true, Init::Orthogonal, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, cond: Var) -> Var {
        let h = self.bn.normalize(g, p, x);
        let gain = self.gain.forward(g, p, cond);
        let gain = g.add_scalar(gain, 1.0);
        let bias = self.bias.forward(g, p, cond);
        g.affine(h, gain, bias)
    }
}

#[derive(Clone, Debug)]
struct GBlock {
    bn: [CondBatchNorm; 4],
    conv: [Conv2d; 4],
    upsample: bool,
}

impl GBlock {
    fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, cond: Var) -> Var {
        let h = self.bn[0].forward(g, p, x, cond);
        let h = g.relu(h);
        let h = self.conv[0].forward(g, p, h);
        let h = self.bn[1].forward(g, p, h, cond);
        let mut h = g.relu(h);
        let mut skip = x;
        if self.upsample {
            h = g.upsample2(h);
            skip = g.upsample2(skip);
        }
        let h = self.conv[1].forward(g, p, h);
        let h = self.bn[2].forward(g, p, h, cond);
        let h = g.relu(h);
        let h = self.conv[2].forward(g, p, h);
        let h = self.bn[3].forward(g, p, h, cond);
        let h = g.relu(h);
        let h = self.conv[3].forward(g, p, h);
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
    pub arch: GeneratorArch,
}

/// Layer layout; parameter values live in the owning store.
#[derive(Clone, Debug)]
pub struct GeneratorArch {
    cfg: GeneratorConfig,
    shared: Embedding,
    seed_linear: Linear,
    blocks: Vec<GBlock>,
    attention: Option<(usize, SelfAttention)>,
    out_bn: BatchNorm,
    out_conv: Conv2d,
}

impl Generator {
    /// Rebuilds the network around stored weights, checking the layout.
    pub fn from_store(cfg: GeneratorConfig, store: ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        if !net.store.same_layout(&store) {
            return Err(KrError::Nn(krlab_nn::NnError::LayoutMismatch));
        }
        net.store = store;
        Ok(net)
    }

    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = 4 * cfg.conv_dim;
        let hidden = cfg.conv_dim;
        let cond = cfg.cond_dim();
        let shared = Embedding::new(&mut store, "shared", cfg.num_classes, cfg.shared_dim, false, Init::Normal(1.0), &mut rng);
        let seed_linear = Linear::new(&mut store, "linear", cond, 16 * ch, true, true, Init::Orthogonal, &mut rng);
        let sn_conv = |k, ci, co| ConvSpec::same(k, ci, co).sn(true).init(Init::Orthogonal);
        let mut blocks = Vec::new();
        let mut attention = None;
        let mut res = 4;
        for stage in 0..3 {
            for d in 0..cfg.depth {
                let name = format!("g{stage}.{d}");
                let upsample = d + 1 == cfg.depth;
                let bn = [0, 1, 2, 3].map(|i| {
                    let c = if i == 0 { ch } else { hidden };
                    CondBatchNorm::new(&mut store, &format!("{name}.bn{i}"), cond, c, &mut rng)
                });
                let conv = [(1, ch, hidden), (3, hidden, hidden), (3, hidden, hidden), (1, hidden, ch)]
                    .into_iter()
                    .enumerate()
                    .map(|(i, (k, ci, co))| Conv2d::new(&mut store, &format!("{name}.conv{i}"), sn_conv(k, ci, co), &mut rng))
                    .collect::<Vec<_>>();
                let conv: [Conv2d; 4] = conv.try_into().expect("four convolutions");
                blocks.push(GBlock { bn, conv, upsample });
            }
            res *= 2;
            if cfg.attention_resolution == Some(res) {
                let att = SelfAttention::new(&mut store, &format!("attn{res}"), ch, true, Init::Orthogonal, &mut rng);
                attention = Some((blocks.len(), att));
            }
        }
        let out_bn = BatchNorm::new(&mut store, "out_bn", ch, true);
        let out_conv = Conv2d::new(&mut store, "out_conv", sn_conv(3, ch, cfg.output_channels), &mut rng);
        Ok(Self {
            arch: GeneratorArch {
                cfg: cfg.clone(),
                shared,
                seed_linear,
                blocks,
                attention,
                out_bn,
                out_conv,
            },
            cfg,
            store,
        })
    }


    /// Evaluation-mode sampling in batches of `batch`.
    pub fn generate(&mut self, latents: &Tensor, labels: &[usize], batch: usize) -> Result<Tensor> {
        let n = labels.len();
        if n == 0 || latents.rows() != n {
            return Err(KrError::invalid("latent and label counts differ or are empty"));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let count = batch.max(1).min(n - start);
            let mut g = Graph::new();
            let mut p = Binder::new(&mut self.store, false, false);
            let z = g.input(latents.slice_rows(start, count));
            let x = self.arch.forward(&mut g, &mut p, z, &labels[start..start + count])?;
            parts.push(g.value(x).clone());
            start += count;
        }
        Ok(Tensor::cat_rows(&parts))
    }
}

impl GeneratorArch {
    /// Images `[B,32,32,C]` in `[0,1]` from latents `[B, latent_dim]` on the graph.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, z: Var, labels: &[usize]) -> Result<Var> {
        check_labels(labels, self.cfg.num_classes)?;
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.latent_dim || zs[0] != labels.len() {
            return Err(KrError::invalid(format!(
                "generator expects latents [{}, {}], got {zs:?}",
                labels.len(),
                self.cfg.latent_dim
            )));
        }
        let b = labels.len();
        let ch = 4 * self.cfg.conv_dim;
        let y = self.shared.forward(g, p, labels);
        let cond = g.concat_last(z, y);
        let h = self.seed_linear.forward(g, p, cond);
        let mut h = g.reshape(h, &[b, 4, 4, ch]);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, p, h, cond);
            if let Some((after, att)) = &self.attention {
                if *after == i + 1 {
                    h = att.forward(g, p, h);
                }
            }
        }
        let h = self.out_bn.forward(g, p, h);
        let h = g.relu(h);
        let h = self.out_conv.forward(g, p, h);
        Ok(g.sigmoid(h))
    }
}
