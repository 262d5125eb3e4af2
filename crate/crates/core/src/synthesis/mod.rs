//! View-synthesis module: conditional 3D-aware generator, discriminator with
//! a latent/pose encoder head, and their losses.

mod discriminator;
mod generator;
mod losses;

pub use discriminator::{DiscOutput, Discriminator};
pub use generator::{GenTrace, Generator, GeneratorArch};
pub use losses::{gan_losses, identity_loss};

use fbnet_autograd::Tensor;

use crate::geom3d::ViewPose;

/// Latent code `z = f ⊕ n` for a batch: conditional features `[N, F]`
/// concatenated with Gaussian noise `[N, Z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub features: Tensor,
    pub noise: Tensor,
}

impl LatentBatch {
    pub fn new(features: Tensor, noise: Tensor) -> Self {
        assert_eq!(features.shape()[0], noise.shape()[0], "latent batch size mismatch");
        Self { features, noise }
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1] + self.noise.shape()[1]
    }

    /// Row-wise concatenation `[N, F + Z]`.
    pub fn z(&self) -> Tensor {
        let (n, f, k) = (self.len(), self.features.shape()[1], self.noise.shape()[1]);
        let mut data = Vec::with_capacity(n * (f + k));
        for i in 0..n {
            data.extend_from_slice(&self.features.data()[i * f..(i + 1) * f]);
            data.extend_from_slice(&self.noise.data()[i * k..(i + 1) * k]);
        }
        Tensor::new(&[n, f + k], data)
    }
}

/// Packs poses as a `[N, 3]` tensor.
pub fn pose_tensor(poses: &[ViewPose]) -> Tensor {
    Tensor::new(&[poses.len(), 3], poses.iter().flat_map(|p| p.to_array()).collect())
}

/// One synthesized image with what produced it.
#[derive(Clone, Debug)]
pub struct GenOutput {
    /// `[3, R, R]` in `[-1, 1]`.
    pub image: Tensor,
    pub z: Vec<f64>,
    pub pose: ViewPose,
    pub category: usize,
}
