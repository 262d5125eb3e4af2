//! Parameter construction and layer forward helpers shared by the networks.

use fbnet_autograd::{Binding, ConvSpec, ParamSet, Tensor, Var};
use rand::RngExt;

use crate::rng::Stream;

/// Stabilizer for instance normalization and AdaIN.
pub const NORM_EPS: f64 = 1e-5;
pub const LRELU_SLOPE: f64 = 0.2;

/// Fills a [`ParamSet`] with freshly initialized tensors.
pub struct ParamBuilder<'a> {
    pub params: ParamSet,
    rng: &'a mut Stream,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut Stream) -> Self {
        Self { params: ParamSet::new(), rng }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| (self.rng.random::<f64>() * 2.0 - 1.0) * bound)
    }

    /// Weight `[in, out]` plus bias `[out]`, Kaiming-uniform for the weight.
    pub fn linear(&mut self, name: &str, inp: usize, out: usize) {
        let w = self.uniform(&[inp, out], (6.0 / inp as f64).sqrt());
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    /// Linear map with a scaled-down weight and a chosen constant bias.
    pub fn linear_with(&mut self, name: &str, inp: usize, out: usize, weight_scale: f64, bias: Vec<f64>) {
        let w = self.uniform(&[inp, out], weight_scale * (3.0 / inp as f64).sqrt());
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::new(&[out], bias));
    }

    pub fn conv2d(&mut self, name: &str, inp: usize, out: usize, k: usize) {
        let fan_in = inp * k * k;
        let w = self.uniform(&[out, inp, k, k], (6.0 / fan_in as f64).sqrt());
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    pub fn conv3d(&mut self, name: &str, inp: usize, out: usize, k: usize) {
        let fan_in = inp * k * k * k;
        let w = self.uniform(&[out, inp, k, k, k], (6.0 / fan_in as f64).sqrt());
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::new(shape, crate::rng::normal_vec(self.rng, shape.iter().product()))
            .scale(std);
        self.params.insert(name.to_string(), t);
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

pub fn linear<'g>(b: &Binding<'g, '_>, name: &str, x: &Var<'g>) -> Var<'g> {
    x.matmul(&b.get(&format!("{name}.w"))).add_row(&b.get(&format!("{name}.b")))
}

pub fn conv<'g>(b: &Binding<'g, '_>, name: &str, x: &Var<'g>, spec: ConvSpec) -> Var<'g> {
    x.conv(&b.get(&format!("{name}.w")), Some(&b.get(&format!("{name}.b"))), spec)
}

/// Adaptive instance normalization with explicit per-(instance, channel)
/// scale and shift of shape `[N, C]`.
pub fn adain<'g>(x: &Var<'g>, gamma: &Var<'g>, beta: &Var<'g>) -> Var<'g> {
    x.instance_norm(NORM_EPS).channel_affine(gamma, beta)
}

/// Style map of one AdaIN unit: latent `[N, L]` to `(gamma, beta)`.
pub fn style<'g>(b: &Binding<'g, '_>, name: &str, z: &Var<'g>, channels: usize) -> (Var<'g>, Var<'g>) {
    let s = linear(b, name, z);
    (s.slice_cols(0, channels), s.slice_cols(channels, 2 * channels))
}

/// Registers an AdaIN style map initialized near `gamma = 1, beta = 0`.
pub fn style_params(pb: &mut ParamBuilder<'_>, name: &str, latent: usize, channels: usize) {
    let mut bias = vec![1.0; channels];
    bias.extend(std::iter::repeat_n(0.0, channels));
    pb.linear_with(name, latent, 2 * channels, 0.1, bias);
}
