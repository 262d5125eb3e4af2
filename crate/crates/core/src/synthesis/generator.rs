use fbnet_autograd::{Binding, ConvSpec, Graph, ParamSet, Tensor, Var};

use super::{pose_tensor, LatentBatch};
use crate::error::{Error, Result};
use crate::geom3d::{rotate_grid_batch, ViewPose};
use crate::nn::{self, ParamBuilder, LRELU_SLOPE};
use crate::rng::Stream;

/// Spatial side of the learned constant cube.
pub const CUBE_SIDE: usize = 4;

fn half(c: usize) -> usize {
    (c / 2).max(2)
}

/// Channel and resolution schedule of the generator.
///
/// The grid is rotated at side `R / 4`; two planar Res-Up blocks then bring
/// the projected features to `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorArch {
    pub resolution: usize,
    pub latent_dim: usize,
    pub cube_channels: usize,
    pub grid: usize,
    /// `(in, out, upsample)` per volumetric block.
    pub blocks3d: Vec<(usize, usize, bool)>,
    pub post_rotation: (usize, usize),
    pub projection: (usize, usize),
    pub blocks2d: Vec<(usize, usize)>,
}

impl GeneratorArch {
    pub fn new(resolution: usize, latent_dim: usize, cube_channels: usize) -> Result<Self> {
        if resolution < 16 || !resolution.is_power_of_two() {
            return Err(Error::config(
                "image_resolution",
                format!("{resolution} is not reachable by the upsampling chain (need a power of two >= 16)"),
            ));
        }
        let grid = resolution / 4;
        let mut blocks3d = Vec::new();
        let (mut side, mut c) = (CUBE_SIDE, cube_channels);
        while side < grid {
            blocks3d.push((c, half(c), true));
            c = half(c);
            side *= 2;
        }
        if blocks3d.is_empty() {
            blocks3d.push((c, half(c), false));
            c = half(c);
        }
        let post_rotation = (c, half(c));
        let projection = (post_rotation.1 * grid, cube_channels);
        let mut blocks2d = Vec::new();
        let mut c2 = cube_channels;
        for _ in 0..2 {
            blocks2d.push((c2, half(c2)));
            c2 = half(c2);
        }
        Ok(Self { resolution, latent_dim, cube_channels, grid, blocks3d, post_rotation, projection, blocks2d })
    }
}

/// Activations of one generator pass.
pub struct GenTrace<'g> {
    /// `[N, 3, R, R]`.
    pub image: Var<'g>,
    /// Volumetric features after rotation and the post-rotation block,
    /// right before projection.
    pub volume: Var<'g>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub params: ParamSet,
}

fn res_block_params(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, planar: bool, latent: usize) {
    let conv = |pb: &mut ParamBuilder<'_>, n: &str, i, o, k| {
        if planar {
            pb.conv2d(n, i, o, k)
        } else {
            pb.conv3d(n, i, o, k)
        }
    };
    conv(pb, &format!("{name}.conv1"), cin, cout, 3);
    nn::style_params(pb, &format!("{name}.style1"), latent, cout);
    conv(pb, &format!("{name}.conv2"), cout, cout, 3);
    nn::style_params(pb, &format!("{name}.style2"), latent, cout);
    if cin != cout {
        conv(pb, &format!("{name}.skip"), cin, cout, 1);
    }
}

/// Residual block with AdaIN in place of batch normalization.
fn styled_res_block<'g>(
    b: &Binding<'g, '_>,
    name: &str,
    x: &Var<'g>,
    z: &Var<'g>,
    (cin, cout): (usize, usize),
    planar: bool,
) -> Var<'g> {
    let (k3, k1) = if planar {
        (ConvSpec::square(3, 1, 1), ConvSpec::square(1, 1, 0))
    } else {
        (ConvSpec::cube(3, 1, 1), ConvSpec::cube(1, 1, 0))
    };
    let h = nn::conv(b, &format!("{name}.conv1"), x, k3);
    let (g1, b1) = nn::style(b, &format!("{name}.style1"), z, cout);
    let h = nn::adain(&h, &g1, &b1).leaky_relu(LRELU_SLOPE);
    let h = nn::conv(b, &format!("{name}.conv2"), &h, k3);
    let (g2, b2) = nn::style(b, &format!("{name}.style2"), z, cout);
    let h = nn::adain(&h, &g2, &b2);
    let skip = if cin != cout { nn::conv(b, &format!("{name}.skip"), x, k1) } else { *x };
    h.add(&skip).leaky_relu(LRELU_SLOPE)
}

impl Generator {
    pub fn new(arch: GeneratorArch, rng: &mut Stream) -> Self {
        let mut pb = ParamBuilder::new(rng);
        pb.normal("cube", &[1, arch.cube_channels, CUBE_SIDE, CUBE_SIDE, CUBE_SIDE], 1.0);
        for (i, &(cin, cout, _)) in arch.blocks3d.iter().enumerate() {
            res_block_params(&mut pb, &format!("vol{i}"), cin, cout, false, arch.latent_dim);
        }
        pb.conv3d("post_rotation", arch.post_rotation.0, arch.post_rotation.1, 3);
        pb.conv2d("projection", arch.projection.0, arch.projection.1, 1);
        for (i, &(cin, cout)) in arch.blocks2d.iter().enumerate() {
            res_block_params(&mut pb, &format!("img{i}"), cin, cout, true, arch.latent_dim);
        }
        let last = arch.blocks2d.last().map(|b| b.1).unwrap_or(arch.cube_channels);
        pb.conv2d("to_rgb", last, 3, 3);
        Self { arch, params: pb.finish() }
    }

    /// Full pass. Volumetric AdaIN units read `z_identity`, planar ones read
    /// `z_style`; passing the same latent twice is the ordinary generator.
    pub fn forward<'g>(
        &self,
        b: &Binding<'g, '_>,
        z_identity: &Var<'g>,
        z_style: &Var<'g>,
        poses: &Var<'g>,
    ) -> Result<GenTrace<'g>> {
        let n = z_identity.shape()[0];
        for (what, z) in [("z_identity", z_identity), ("z_style", z_style)] {
            let s = z.shape();
            if s != [n, self.arch.latent_dim] {
                return Err(Error::Shape(format!("{what} must be [{n}, {}], got {s:?}", self.arch.latent_dim)));
            }
        }
        let mut h = b.get("cube").expand_outer(n);
        for (i, &(cin, cout, up)) in self.arch.blocks3d.iter().enumerate() {
            h = styled_res_block(b, &format!("vol{i}"), &h, z_identity, (cin, cout), false);
            if up {
                h = h.upsample2x();
            }
        }
        let h = rotate_grid_batch(&h, poses)?;
        let volume = nn::conv(b, "post_rotation", &h, ConvSpec::cube(3, 1, 1)).leaky_relu(LRELU_SLOPE);
        let (c, g) = (self.arch.post_rotation.1, self.arch.grid);
        let flat = volume.reshape(&[n, c * g, g, g]);
        let mut h = nn::conv(b, "projection", &flat, ConvSpec::square(1, 1, 0)).leaky_relu(LRELU_SLOPE);
        for (i, &(cin, cout)) in self.arch.blocks2d.iter().enumerate() {
            h = styled_res_block(b, &format!("img{i}"), &h, z_style, (cin, cout), true).upsample2x();
        }
        let image = nn::conv(b, "to_rgb", &h, ConvSpec::square(3, 1, 1)).tanh();
        Ok(GenTrace { image, volume })
    }

    /// Images for latents `z` (`[N, L]`) at the given poses, without a tape.
    pub fn generate(&self, z: &Tensor, poses: &[ViewPose]) -> Result<Tensor> {
        self.generate_dual(z, z, poses)
    }

    /// Identity from `z_identity` (volumetric stage), appearance from
    /// `z_style` (planar stage).
    pub fn generate_dual(&self, z_identity: &Tensor, z_style: &Tensor, poses: &[ViewPose]) -> Result<Tensor> {
        let g = Graph::new();
        let b = g.bind(&self.params, false);
        let zi = g.constant(z_identity.clone());
        let zs = if std::ptr::eq(z_identity, z_style) { zi } else { g.constant(z_style.clone()) };
        let p = g.constant(pose_tensor(poses));
        let trace = self.forward(&b, &zi, &zs, &p)?;
        Ok((*trace.image.value()).clone())
    }

    pub fn generate_latent(&self, z: &LatentBatch, poses: &[ViewPose]) -> Result<Tensor> {
        self.generate(&z.z(), poses)
    }
}
