use fbnet_autograd::{Binding, ConvSpec, Graph, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{self, ParamBuilder, LRELU_SLOPE, NORM_EPS};
use crate::rng::Stream;

/// Realness logit plus the encoder head's reconstruction of `(z, theta)`.
pub struct DiscOutput<'g> {
    /// `[N]`.
    pub logit: Var<'g>,
    /// `[N, L]`.
    pub z_prime: Var<'g>,
    /// `[N, 3]`.
    pub theta_prime: Var<'g>,
}

/// Strided convolution trunk shared by the realness head and the latent
/// encoder head.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub resolution: usize,
    pub latent_dim: usize,
    pub stages: Vec<(usize, usize)>,
    pub params: ParamSet,
}

const FINAL_SIDE: usize = 4;

impl Discriminator {
    pub fn new(resolution: usize, latent_dim: usize, base_channels: usize, rng: &mut Stream) -> Result<Self> {
        if resolution < 2 * FINAL_SIDE || !resolution.is_power_of_two() {
            return Err(Error::config("image_resolution", format!("{resolution} unsupported by the discriminator")));
        }
        let mut stages = Vec::new();
        let (mut side, mut cin, mut cout) = (resolution, 3, base_channels);
        while side > FINAL_SIDE {
            stages.push((cin, cout));
            cin = cout;
            cout *= 2;
            side /= 2;
        }
        let mut pb = ParamBuilder::new(rng);
        for (i, &(ci, co)) in stages.iter().enumerate() {
            pb.conv2d(&format!("stage{i}"), ci, co, 3);
        }
        let flat = cin * FINAL_SIDE * FINAL_SIDE;
        pb.linear("realness", flat, 1);
        pb.linear("encoder", flat, latent_dim + 3);
        Ok(Self { resolution, latent_dim, stages, params: pb.finish() })
    }

    pub fn forward<'g>(&self, b: &Binding<'g, '_>, images: &Var<'g>) -> Result<DiscOutput<'g>> {
        let s = images.shape();
        let r = self.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("discriminator expects [N, 3, {r}, {r}], got {s:?}")));
        }
        let n = s[0];
        let mut h = *images;
        for i in 0..self.stages.len() {
            h = nn::conv(b, &format!("stage{i}"), &h, ConvSpec::square(3, 2, 1));
            if i > 0 {
                h = h.instance_norm(NORM_EPS);
            }
            h = h.leaky_relu(LRELU_SLOPE);
        }
        let c = self.stages.last().map(|s| s.1).unwrap_or(3);
        let flat = h.reshape(&[n, c * FINAL_SIDE * FINAL_SIDE]);
        let logit = nn::linear(b, "realness", &flat).reshape(&[n]);
        let enc = nn::linear(b, "encoder", &flat);
        let l = self.latent_dim;
        Ok(DiscOutput { logit, z_prime: enc.slice_cols(0, l), theta_prime: enc.slice_cols(l, l + 3) })
    }

    /// Tape-free evaluation: `(logits [N], z' [N, L], theta' [N, 3])`.
    pub fn discriminate(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let g = Graph::new();
        let b = g.bind(&self.params, false);
        let out = self.forward(&b, &g.constant(images.clone()))?;
        Ok(((*out.logit.value()).clone(), (*out.z_prime.value()).clone(), (*out.theta_prime.value()).clone()))
    }
}
