//! CIFAR-style ResNet14: a 3×3 stem, three stages of two basic blocks
//! (widths f, 2f, 4f), global average pooling and a linear head. Shortcuts
//! that change shape are parameter-free (2×2 average pool + zero channel
//! padding), so exactly 14 layers carry weights.

use krlab_nn::layers::{BatchNorm, Conv2d, ConvSpec, Linear};
use krlab_nn::{Binder, Graph, Init, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Profile;
use crate::error::{KrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub initial_filters: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl ClassifierConfig {
    pub fn for_profile(profile: Profile, num_classes: usize, input_channels: usize) -> Self {
        let initial_filters = match profile {
            Profile::Full => 64,
            Profile::Tiny => 8,
        };
        Self {
            initial_filters,
            num_classes,
            input_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_filters == 0 || self.num_classes < 2 || !matches!(self.input_channels, 1 | 3) {
            return Err(KrError::Config(format!("invalid classifier config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: bool,
    extra_channels: usize,
}

impl BasicBlock {
    fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let h = self.conv1.forward(g, p, x);
        let h = self.bn1.forward(g, p, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h);
        let h = self.bn2.forward(g, p, h);
        let mut sc = if self.downsample { g.avg_pool2(x) } else { x };
        if self.extra_channels > 0 {
            let s = g.shape(sc).to_vec();
            let z = g.input(Tensor::zeros(&[s[0], s[1], s[2], self.extra_channels]));
            sc = g.concat_last(sc, z);
        }
        let y = g.add(h, sc);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub store: ParamStore,
    pub arch: ClassifierArch,
}

/// Layer layout; parameter values live in the owning store.
#[derive(Clone, Debug)]
pub struct ClassifierArch {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

impl Classifier {
    /// Rebuilds the network around stored weights, checking the layout.
    pub fn from_store(cfg: ClassifierConfig, store: ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        if !net.store.same_layout(&store) {
            return Err(KrError::Nn(krlab_nn::NnError::LayoutMismatch));
        }
        net.store = store;
        Ok(net)
    }

    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = cfg.initial_filters;
        let conv = |ci, co| ConvSpec::same(3, ci, co).no_bias().init(Init::HeNormal);
        let stem = Conv2d::new(&mut store, "stem", conv(cfg.input_channels, f), &mut rng);
        let stem_bn = BatchNorm::new(&mut store, "stem_bn", f, true);
        let mut blocks = Vec::new();
        let mut cin = f;
        for (stage, width) in [f, 2 * f, 4 * f].into_iter().enumerate() {
            for i in 0..2 {
                let name = format!("s{stage}b{i}");
                let downsample = stage > 0 && i == 0;
                let stride = if downsample { 2 } else { 1 };
                let conv1 = Conv2d::new(&mut store, &format!("{name}.conv1"), conv(cin, width).stride(stride), &mut rng);
                let bn1 = BatchNorm::new(&mut store, &format!("{name}.bn1"), width, true);
                let conv2 = Conv2d::new(&mut store, &format!("{name}.conv2"), conv(width, width), &mut rng);
                let bn2 = BatchNorm::new(&mut store, &format!("{name}.bn2"), width, true);
                blocks.push(BasicBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    downsample,
                    extra_channels: width - cin,
                });
                cin = width;
            }
        }
        let head = Linear::new(&mut store, "head", cin, cfg.num_classes, true, false, Init::Normal(0.01), &mut rng);
        Ok(Self {
            arch: ClassifierArch {
                stem,
                stem_bn,
                blocks,
                head,
            },
            cfg,
            store,
        })
    }

    /// Number of layers carrying weights (convolutions plus the head).
    pub fn weighted_layers(&self) -> usize {
        1 + 2 * self.arch.blocks.len() + 1
    }

    /// Width of each residual stage.
    pub fn stage_widths(&self) -> [usize; 3] {
        let f = self.cfg.initial_filters;
        [f, 2 * f, 4 * f]
    }


    /// Evaluation-mode logits, computed in batches of `batch`.
    pub fn logits(&mut self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let c = images.shape().get(3).copied().unwrap_or(0);
        if images.rank() != 4 || c != self.cfg.input_channels {
            return Err(KrError::invalid(format!(
                "classifier expects [B,32,32,{}], got {:?}",
                self.cfg.input_channels,
                images.shape()
            )));
        }
        let n = images.dim(0);
        let mut parts = Vec::with_capacity(n.div_ceil(batch.max(1)));
        let mut start = 0;
        while start < n {
            let count = batch.max(1).min(n - start);
            let mut g = Graph::new();
            let mut p = Binder::new(&mut self.store, false, false);
            let x = g.input(images.slice_rows(start, count));
            let y = self.arch.forward(&mut g, &mut p, x);
            parts.push(g.value(y).clone());
            start += count;
        }
        Ok(Tensor::cat_rows(&parts))
    }
}

impl ClassifierArch {
    /// Logits `[B, K]` for NHWC images already on the graph.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let h = self.stem.forward(g, p, x);
        let h = self.stem_bn.forward(g, p, h);
        let mut h = g.relu(h);
        for b in &self.blocks {
            h = b.forward(g, p, h);
        }
        let h = g.mean_spatial(h);
        self.head.forward(g, p, h)
    }
}
