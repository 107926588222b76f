//! BigGAN-deep projection discriminator for 32×32 inputs. Every weight is
//! spectrally normalized. The logit is `ψ(h) + ⟨embed(y), h⟩` where `h` is
//! the sum-pooled final feature map.

use krlab_nn::layers::{Conv2d, ConvSpec, Embedding, Linear, SelfAttention};
use krlab_nn::{Binder, Graph, Init, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_labels, Profile};
use crate::error::{KrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub conv_dim: usize,
    pub depth: usize,
    pub attention_resolution: Option<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub spectral_norm: bool,
}

impl DiscriminatorConfig {
    pub fn for_profile(profile: Profile, num_classes: usize, input_channels: usize) -> Self {
        let conv_dim = match profile {
            Profile::Full => 128,
            Profile::Tiny => 4,
        };
        Self {
            conv_dim,
            depth: 2,
            attention_resolution: Some(16),
            num_classes,
            input_channels,
            spectral_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_dim == 0 || self.depth == 0 || self.num_classes == 0 || !matches!(self.input_channels, 1 | 3) {
            return Err(KrError::Config(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DBlock {
    conv: [Conv2d; 4],
    downsample: bool,
}

impl DBlock {
    fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let h = g.relu(x);
        let h = self.conv[0].forward(g, p, h);
        let h = g.relu(h);
        let h = self.conv[1].forward(g, p, h);
        let h = g.relu(h);
        let h = self.conv[2].forward(g, p, h);
        let mut h = g.relu(h);
        let mut skip = x;
        if self.downsample {
            h = g.avg_pool2(h);
            skip = g.avg_pool2(skip);
        }
        let h = self.conv[3].forward(g, p, h);
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub store: ParamStore,
    pub arch: DiscriminatorArch,
}

/// Layer layout; parameter values live in the owning store.
#[derive(Clone, Debug)]
pub struct DiscriminatorArch {
    cfg: DiscriminatorConfig,
    input_conv: Conv2d,
    blocks: Vec<DBlock>,
    attention: Option<(usize, SelfAttention)>,
    linear: Linear,
    embed: Embedding,
}

impl Discriminator {
    /// Rebuilds the network around stored weights, checking the layout.
    pub fn from_store(cfg: DiscriminatorConfig, store: ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        if !net.store.same_layout(&store) {
            return Err(KrError::Nn(krlab_nn::NnError::LayoutMismatch));
        }
        net.store = store;
        Ok(net)
    }

    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sn = cfg.spectral_norm;
        let ch = 4 * cfg.conv_dim;
        let hidden = cfg.conv_dim;
        let conv = |k, ci, co| ConvSpec::same(k, ci, co).sn(sn).init(Init::Orthogonal);
        let input_conv = Conv2d::new(&mut store, "input_conv", conv(3, cfg.input_channels, ch), &mut rng);
        let mut blocks = Vec::new();
        let mut attention = None;
        let mut res = 32;
        for (stage, down) in [true, true, false].into_iter().enumerate() {
            for d in 0..cfg.depth {
                let name = format!("d{stage}.{d}");
                let convs = [(1, ch, hidden), (3, hidden, hidden), (3, hidden, hidden), (1, hidden, ch)]
                    .into_iter()
                    .enumerate()
                    .map(|(i, (k, ci, co))| Conv2d::new(&mut store, &format!("{name}.conv{i}"), conv(k, ci, co), &mut rng))
                    .collect::<Vec<_>>();
                blocks.push(DBlock {
                    conv: convs.try_into().expect("four convolutions"),
                    downsample: down && d == 0,
                });
            }
            if down {
                res /= 2;
            }
            if cfg.attention_resolution == Some(res) && attention.is_none() {
                let att = SelfAttention::new(&mut store, &format!("attn{res}"), ch, sn, Init::Orthogonal, &mut rng);
                attention = Some((blocks.len(), att));
            }
        }
        let linear = Linear::new(&mut store, "linear", ch, 1, true, sn, Init::Orthogonal, &mut rng);
        let embed = Embedding::new(&mut store, "embed", cfg.num_classes, ch, sn, Init::Orthogonal, &mut rng);
        Ok(Self {
            arch: DiscriminatorArch {
                cfg: cfg.clone(),
                input_conv,
                blocks,
                attention,
                linear,
                embed,
            },
            cfg,
            store,
        })
    }


    /// Evaluation-mode logits.
    pub fn logits(&mut self, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut p = Binder::new(&mut self.store, false, false);
        let x = g.input(images.clone());
        let y = self.arch.forward(&mut g, &mut p, x, labels)?;
        Ok(g.value(y).clone())
    }
}

impl DiscriminatorArch {
    /// Logits `[B]` for images on the graph.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, labels: &[usize]) -> Result<Var> {
        check_labels(labels, self.cfg.num_classes)?;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[0] != labels.len() || s[3] != self.cfg.input_channels {
            return Err(KrError::invalid(format!("discriminator got input {s:?}")));
        }
        let mut h = self.input_conv.forward(g, p, x);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, p, h);
            if let Some((after, att)) = &self.attention {
                if *after == i + 1 {
                    h = att.forward(g, p, h);
                }
            }
        }
        let h = g.relu(h);
        let h = g.sum_spatial(h);
        let out = self.linear.forward(g, p, h);
        let e = self.embed.forward(g, p, labels);
        let proj = g.mul(e, h);
        let proj = g.sum_last(proj);
        let out = g.reshape(out, &[labels.len()]);
        Ok(g.add(out, proj))
    }
}
