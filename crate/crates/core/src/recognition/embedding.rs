use fbnet_autograd::{Binding, Graph, ParamSet, Tensor, Var};

use crate::nn::{self, ParamBuilder};
use crate::rng::Stream;

/// Three fully connected layers with rectifiers in between, mapping
/// features to the metric space where prototypes live.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub params: ParamSet,
}

impl Embedder {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Stream) -> Self {
        let mut pb = ParamBuilder::new(rng);
        pb.linear("fc1", input, hidden);
        pb.linear("fc2", hidden, hidden);
        pb.linear("fc3", hidden, output);
        Self { input, hidden, output, params: pb.finish() }
    }

    pub fn forward<'g>(&self, b: &Binding<'g, '_>, features: &Var<'g>) -> Var<'g> {
        let h = nn::linear(b, "fc1", features).relu();
        let h = nn::linear(b, "fc2", &h).relu();
        nn::linear(b, "fc3", &h)
    }

    pub fn embed(&self, features: &Tensor) -> Tensor {
        let g = Graph::new();
        let b = g.bind(&self.params, false);
        let out = self.forward(&b, &g.constant(features.clone()));
        (*out.value()).clone()
    }
}
