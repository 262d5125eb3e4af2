//! Recognition module: resolution-distilled feature extractor, embedding
//! network and prototype classifier.

mod embedding;
mod extractor;
mod teacher;

pub use embedding::Embedder;
pub use extractor::{Extractor, ExtractorOut};
pub use teacher::{distill, distill_loss, evaluate_distill, pretrain_teacher, FeatureCache, PretrainReport};

use fbnet_autograd::{Tensor, Var};

use crate::error::{Error, Result};

/// Per-category mean embeddings, rows in the order of `categories`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub categories: Vec<usize>,
    /// `[C, D]`.
    pub means: Tensor,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn index_of(&self, category: usize) -> Option<usize> {
        self.categories.iter().position(|&c| c == category)
    }

    /// Row index of every label, erroring on a category without prototype.
    pub fn indices(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| self.index_of(l).ok_or_else(|| Error::Data(format!("category {l} has no prototype"))))
            .collect()
    }
}

/// Row index into `categories` for each label.
pub fn segment_ids(labels: &[usize], categories: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            categories.iter().position(|c| c == l).ok_or_else(|| Error::Data(format!("label {l} is not an episode category")))
        })
        .collect()
}

/// Mean embedding per category over every support member (real and
/// generated alike).
pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize], categories: &[usize]) -> Result<PrototypeSet> {
    let d = embeddings.shape()[1];
    let seg = segment_ids(labels, categories)?;
    let mut means = vec![0.0; categories.len() * d];
    let mut counts = vec![0usize; categories.len()];
    for (row, &s) in seg.iter().enumerate() {
        counts[s] += 1;
        for (m, x) in means[s * d..(s + 1) * d].iter_mut().zip(&embeddings.data()[row * d..(row + 1) * d]) {
            *m += x;
        }
    }
    for (s, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Data(format!("category {} has no support embedding", categories[s])));
        }
        means[s * d..(s + 1) * d].iter_mut().for_each(|m| *m /= n as f64);
    }
    Ok(PrototypeSet { categories: categories.to_vec(), means: Tensor::new(&[categories.len(), d], means), counts })
}

/// Softmax over negative squared Euclidean distances, `[Q, C]`.
pub fn classify(queries: &Tensor, prototypes: &PrototypeSet) -> Tensor {
    let (q, d) = (queries.shape()[0], queries.shape()[1]);
    let c = prototypes.categories.len();
    let mut out = vec![0.0; q * c];
    for i in 0..q {
        let row = &mut out[i * c..(i + 1) * c];
        let x = &queries.data()[i * d..(i + 1) * d];
        for (j, r) in row.iter_mut().enumerate() {
            let mu = &prototypes.means.data()[j * d..(j + 1) * d];
            *r = -x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    }
    Tensor::new(&[q, c], out)
}

/// Arg-max category per query; ties go to the lowest category id.
pub fn predict(queries: &Tensor, prototypes: &PrototypeSet) -> Vec<usize> {
    let p = classify(queries, prototypes);
    let c = prototypes.categories.len();
    (0..queries.shape()[0])
        .map(|i| {
            let row = &p.data()[i * c..(i + 1) * c];
            let mut best: Option<(f64, usize)> = None;
            for (j, &v) in row.iter().enumerate() {
                let cat = prototypes.categories[j];
                best = match best {
                    Some((bv, bc)) if bv > v || (bv == v && bc < cat) => Some((bv, bc)),
                    _ => Some((v, cat)),
                };
            }
            best.map_or(0, |b| b.1)
        })
        .collect()
}

/// Mean of `-log p(target)` where `p` is the prototype softmax of each row
/// of `embeddings` against `prototypes` (`[C, D]`); `targets` index rows of
/// `prototypes`.
pub fn prototype_nll<'g>(embeddings: &Var<'g>, targets: &[usize], prototypes: &Var<'g>) -> Var<'g> {
    embeddings.sqdist(prototypes).neg().log_softmax().gather_cols(targets).neg().mean()
}

/// Cross-entropy of real queries against prototypes built on the tape.
pub fn rec_loss<'g>(queries: &Var<'g>, targets: &[usize], prototypes: &Var<'g>) -> Var<'g> {
    prototype_nll(queries, targets, prototypes)
}

/// Cross-entropy of generated images' embeddings against their
/// conditioning categories. Prototypes enter as constants so no gradient
/// reaches the recognition parameters through them.
pub fn categorical_loss<'g>(generated: &Var<'g>, categories: &[usize], prototypes: &PrototypeSet) -> Result<Var<'g>> {
    let targets = prototypes.indices(categories)?;
    let protos = generated.graph().constant(prototypes.means.clone());
    Ok(prototype_nll(generated, &targets, &protos))
}
