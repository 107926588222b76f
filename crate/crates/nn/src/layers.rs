//! Parameterized layers. A layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound to a graph through a [`Binder`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Registers a persistent power-iteration vector for a weight.
fn sn_buffer<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, rng: &mut R) -> ParamId {
    let mut u = Init::Normal(1.0).tensor(&[rows], rng);
    let n = u.sq_norm().sqrt() as f32;
    u.scale_assign(1.0 / n.max(1e-12));
    store.add_buffer(&format!("{name}.sn_u"), u)
}

fn weight_var(g: &mut Graph, p: &mut Binder, w: ParamId, sn: Option<ParamId>) -> Var {
    let wv = p.param(g, w);
    match sn {
        None => wv,
        Some(u_id) => {
            let u = p.buffer(u_id).data().to_vec();
            let (wn, u2, _) = g.spectral_normalize(wv, &u);
            if p.train() {
                p.buffer_mut(u_id).data_mut().copy_from_slice(&u2);
            }
            wn
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub sn: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral_norm: bool,
    pub init: Init,
}

impl ConvSpec {
    /// `kernel`×`kernel`, stride 1, "same" padding.
    pub fn same(kernel: usize, cin: usize, cout: usize) -> Self {
        Self {
            kernel,
            cin,
            cout,
            stride: 1,
            pad: kernel / 2,
            bias: true,
            spectral_norm: false,
            init: Init::HeNormal,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn sn(mut self, on: bool) -> Self {
        self.spectral_norm = on;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let shape = [spec.kernel, spec.kernel, spec.cin, spec.cout];
        let weight = store.add_param(&format!("{name}.weight"), spec.init.tensor(&shape, rng));
        let bias = spec
            .bias
            .then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[spec.cout])));
        let sn = spec
            .spectral_norm
            .then(|| sn_buffer(store, name, spec.kernel * spec.kernel * spec.cin, rng));
        Self {
            weight,
            bias,
            sn,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let w = weight_var(g, p, self.weight, self.sn);
        let y = g.conv2d(x, w, self.stride, self.pad);
        match self.bias {
            Some(b) => {
                let bv = p.param(g, b);
                g.add_bias(y, bv)
            }
            None => y,
        }
    }
}

/// Dense layer with weight `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub sn: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        spectral_norm: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(&format!("{name}.weight"), init.tensor(&[fan_in, fan_out], rng));
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        let sn = spectral_norm.then(|| sn_buffer(store, name, fan_in, rng));
        Self { weight, bias, sn }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let w = weight_var(g, p, self.weight, self.sn);
        let y = g.matmul(x, w, false);
        match self.bias {
            Some(b) => {
                let bv = p.param(g, b);
                g.add_bias(y, bv)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub sn: Option<ParamId>,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        dim: usize,
        spectral_norm: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let table = store.add_param(&format!("{name}.table"), init.tensor(&[count, dim], rng));
        let sn = spectral_norm.then(|| sn_buffer(store, name, count, rng));
        Self { table, sn }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, indices: &[usize]) -> Var {
        let t = weight_var(g, p, self.table, self.sn);
        g.embedding(t, indices)
    }
}

/// Batch normalization over every axis but the last. Running statistics use
/// momentum 0.1 and the unbiased batch variance.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))),
                Some(store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels]))),
            )
        } else {
            (None, None)
        };
        Self {
            gamma,
            beta,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Normalization without the affine part.
    pub fn normalize(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        if p.train() {
            let rows = g.value(x).rows() as f32;
            let (y, stats) = g.batch_norm(x, self.eps);
            let m = self.momentum;
            let corr = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
            let rm = p.buffer_mut(self.running_mean).data_mut();
            for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            let rv = p.buffer_mut(self.running_var).data_mut();
            for (r, &b) in rv.iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * b * corr;
            }
            y
        } else {
            let mean = p.buffer(self.running_mean).data().to_vec();
            let var = p.buffer(self.running_var).data();
            let scale: Vec<f32> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
            let shift: Vec<f32> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let c = scale.len();
            let sv = g.input(Tensor::new(&[c], scale));
            let bv = g.input(Tensor::new(&[c], shift));
            g.affine(x, sv, bv)
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let y = self.normalize(g, p, x);
        match (self.gamma, self.beta) {
            (Some(gm), Some(bt)) => {
                let gv = p.param(g, gm);
                let bv = p.param(g, bt);
                g.affine(y, gv, bv)
            }
            _ => y,
        }
    }
}

/// Non-local self-attention block with a learned residual gate initialized at 0.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    theta: Conv2d,
    phi: Conv2d,
    g: Conv2d,
    o: Conv2d,
    gamma: ParamId,
    channels: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        spectral_norm: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let key = (channels / 8).max(1);
        let value = (channels / 2).max(1);
        let pw = |ci, co| ConvSpec::same(1, ci, co).no_bias().sn(spectral_norm).init(init);
        Self {
            theta: Conv2d::new(store, &format!("{name}.theta"), pw(channels, key), rng),
            phi: Conv2d::new(store, &format!("{name}.phi"), pw(channels, key), rng),
            g: Conv2d::new(store, &format!("{name}.g"), pw(channels, value), rng),
            o: Conv2d::new(store, &format!("{name}.o"), pw(value, channels), rng),
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::zeros(&[1])),
            channels,
        }
    }

    pub fn forward(&self, gr: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let s = gr.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c, self.channels);
        let key = (c / 8).max(1);
        let value = (c / 2).max(1);
        let theta = self.theta.forward(gr, p, x);
        let theta = gr.reshape(theta, &[n, h * w, key]);
        let phi = self.phi.forward(gr, p, x);
        let phi = gr.max_pool2(phi);
        let phi = gr.reshape(phi, &[n, h * w / 4, key]);
        let gv = self.g.forward(gr, p, x);
        let gv = gr.max_pool2(gv);
        let gv = gr.reshape(gv, &[n, h * w / 4, value]);
        let logits = gr.bmm(theta, phi, true);
        let beta = gr.softmax_last(logits);
        let att = gr.bmm(beta, gv, false);
        let att = gr.reshape(att, &[n, h, w, value]);
        let o = self.o.forward(gr, p, att);
        let gamma = p.param(gr, self.gamma);
        let o = gr.mul_scalar_var(o, gamma);
        gr.add(x, o)
    }
}
