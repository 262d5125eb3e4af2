use fbnet_autograd::{Binding, ConvSpec, Graph, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{self, ParamBuilder, NORM_EPS};
use crate::rng::Stream;

/// Spatial side at which the trunk stops downsampling.
const TRUNK_SIDE: usize = 8;
/// Images per tape-free inference chunk.
const CHUNK: usize = 64;

/// Residual conv trunk: a 5x5 stride-2 stem, then stride-2 stages (each a
/// downsampling conv and a residual block) until the map is 8x8, global
/// average pooling and a linear map to the feature vector. With `classes`
/// set it also carries a softmax classifier head (the teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub resolution: usize,
    pub feature_dim: usize,
    pub stem_channels: usize,
    pub stages: Vec<(usize, usize)>,
    pub classes: Option<usize>,
    pub params: ParamSet,
}

pub struct ExtractorOut<'g> {
    /// Pooled trunk activations `[N, C]` (penultimate layer).
    pub pool: Var<'g>,
    /// `[N, feature_dim]`.
    pub features: Var<'g>,
    /// `[N, classes]` when the classifier head exists.
    pub logits: Option<Var<'g>>,
}

impl Extractor {
    pub fn new(resolution: usize, base_channels: usize, feature_dim: usize, classes: Option<usize>, rng: &mut Stream) -> Result<Self> {
        if resolution < 2 * TRUNK_SIDE || !resolution.is_power_of_two() {
            return Err(Error::config("image_resolution", format!("extractor needs a power of two >= {}, got {resolution}", 2 * TRUNK_SIDE)));
        }
        let mut pb = ParamBuilder::new(rng);
        pb.conv2d("stem", 3, base_channels, 5);
        let (mut side, mut c) = (resolution / 2, base_channels);
        let mut stages = Vec::new();
        while side > TRUNK_SIDE {
            let i = stages.len();
            pb.conv2d(&format!("stage{i}.down"), c, 2 * c, 3);
            pb.conv2d(&format!("stage{i}.conv1"), 2 * c, 2 * c, 3);
            pb.conv2d(&format!("stage{i}.conv2"), 2 * c, 2 * c, 3);
            stages.push((c, 2 * c));
            c *= 2;
            side /= 2;
        }
        pb.linear("head", c, feature_dim);
        if let Some(k) = classes {
            pb.linear("classifier", feature_dim, k);
        }
        Ok(Self { resolution, feature_dim, stem_channels: base_channels, stages, classes, params: pb.finish() })
    }

    pub fn pool_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.1)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(Error::Shape(format!("extractor expects [N, 3, {r}, {r}], got {shape:?}")));
        }
        Ok(())
    }

    pub fn forward<'g>(&self, b: &Binding<'g, '_>, images: &Var<'g>) -> Result<ExtractorOut<'g>> {
        self.check_input(&images.shape())?;
        let k3 = ConvSpec::square(3, 1, 1);
        let mut h = nn::conv(b, "stem", images, ConvSpec::square(5, 2, 2)).relu();
        for i in 0..self.stages.len() {
            h = nn::conv(b, &format!("stage{i}.down"), &h, ConvSpec::square(3, 2, 1)).relu();
            let r = nn::conv(b, &format!("stage{i}.conv1"), &h, k3).instance_norm(NORM_EPS).relu();
            let r = nn::conv(b, &format!("stage{i}.conv2"), &r, k3).instance_norm(NORM_EPS);
            h = h.add(&r).relu();
        }
        let pool = h.global_avg_pool();
        let features = nn::linear(b, "head", &pool);
        let logits = self.classes.map(|_| nn::linear(b, "classifier", &features.relu()));
        Ok(ExtractorOut { pool, features, logits })
    }

    fn infer(&self, images: &Tensor, pick: impl Fn(&ExtractorOut<'_>) -> Tensor) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let g = Graph::new();
            let b = g.bind(&self.params, false);
            let x = g.constant(images.slice_outer(start, (start + CHUNK).min(n)));
            parts.push(pick(&self.forward(&b, &x)?));
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, 0]));
        }
        Ok(Tensor::stack_outer(&parts.iter().collect::<Vec<_>>()))
    }

    /// Feature vectors `[N, feature_dim]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.infer(images, |o| (*o.features.value()).clone())
    }

    /// Pooled penultimate activations `[N, C]`.
    pub fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        self.infer(images, |o| (*o.pool.value()).clone())
    }

    /// Classifier softmax `[N, classes]`.
    pub fn class_probs(&self, images: &Tensor) -> Result<Tensor> {
        if self.classes.is_none() {
            return Err(Error::Shape("extractor has no classifier head".into()));
        }
        self.infer(images, |o| {
            let logits = o.logits.as_ref().map(|l| l.log_softmax());
            logits.map(|l| l.value().map(f64::exp)).unwrap_or_else(|| Tensor::zeros(&[0]))
        })
    }
}
