//! Teacher pretraining, the teacher feature cache and resolution
//! distillation of the low-resolution extractor.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use fbnet_autograd::{Adam, Graph, Tensor, Var};
use rand::seq::SliceRandom;

use super::Extractor;
use crate::checkpoint::{decode_tensors, encode_tensors, param_digest};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Shuffled minibatches, reshuffled at every pass over the data.
struct Batches {
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(items: &[usize]) -> Self {
        Self { order: items.to_vec(), pos: items.len() }
    }

    fn next(&mut self, size: usize, rng: &mut Stream) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Accuracy on the full training set after the last epoch.
    pub train_accuracy: f64,
}

/// Softmax cross-entropy training of the teacher on high-resolution base
/// images; `classes` holds the class index (`0..K`) of each image.
pub fn pretrain_teacher(
    teacher: &mut Extractor,
    adam: &mut Adam,
    images: &Tensor,
    classes: &[usize],
    epochs: usize,
    batch: usize,
    rng: &mut Stream,
) -> Result<PretrainReport> {
    let k = teacher.classes.ok_or_else(|| Error::Shape("teacher needs a classifier head".into()))?;
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::Data(format!("class index {bad} outside the teacher's {k} classes")));
    }
    let n = images.shape()[0];
    let all: Vec<usize> = (0..n).collect();
    let mut order = all.clone();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch.max(1)) {
            let g = Graph::new();
            let b = g.bind(&teacher.params, true);
            let x = g.constant(images.select_outer(chunk));
            let out = teacher.forward(&b, &x)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
            let logits = out.logits.expect("classifier head present");
            let loss = logits.log_softmax().gather_cols(&targets).neg().mean();
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::NonFinite { term: "pretrain_cross_entropy".into(), iteration: epoch as u64, value: lv });
            }
            total += lv * chunk.len() as f64;
            let grads = g.backward(loss, &b.vars());
            let named = b.grads(&grads);
            adam.step(&mut teacher.params, &named);
        }
        epoch_losses.push(total / n.max(1) as f64);
        log::debug!("teacher epoch {epoch}: loss {:.4}", epoch_losses.last().unwrap_or(&0.0));
    }
    let probs = teacher.class_probs(images)?;
    let correct = (0..n)
        .filter(|&i| {
            let row = &probs.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == classes[i]
        })
        .count();
    Ok(PretrainReport { epoch_losses, train_accuracy: correct as f64 / n.max(1) as f64 })
}

/// Mean over the batch of the squared L2 distance between student and
/// teacher features.
pub fn distill_loss<'g>(student: &Var<'g>, teacher: &Var<'g>) -> Var<'g> {
    let n = student.shape()[0] as f64;
    student.sub(teacher).square().sum().mul_scalar(1.0 / n)
}

/// Teacher features keyed by image id, tagged with the digest of the
/// teacher parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub teacher_digest: String,
    pub feature_dim: usize,
    pub features: BTreeMap<String, Vec<f64>>,
}

impl FeatureCache {
    pub fn new(teacher: &Extractor) -> Self {
        Self { teacher_digest: param_digest(&teacher.params), feature_dim: teacher.feature_dim, features: BTreeMap::new() }
    }

    /// Computes and stores features for the given dataset rows that are not
    /// cached yet.
    pub fn fill(&mut self, teacher: &Extractor, dataset: &Dataset, idx: &[usize]) -> Result<()> {
        if param_digest(&teacher.params) != self.teacher_digest {
            return Err(Error::Data("feature cache was produced by a different teacher".into()));
        }
        let mut missing: Vec<usize> = idx.iter().copied().filter(|&i| !self.features.contains_key(&dataset.ids[i])).collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        let feats = teacher.features(&dataset.high_batch(&missing))?;
        let d = self.feature_dim;
        for (row, &i) in missing.iter().enumerate() {
            self.features.insert(dataset.ids[i].clone(), feats.data()[row * d..(row + 1) * d].to_vec());
        }
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.features.contains_key(id)
    }

    /// `[N, feature_dim]` for the given dataset rows.
    pub fn batch(&self, dataset: &Dataset, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.feature_dim);
        for &i in idx {
            let id = &dataset.ids[i];
            let f = self.features.get(id).ok_or_else(|| Error::Data(format!("no cached teacher features for `{id}`")))?;
            data.extend_from_slice(f);
        }
        Ok(Tensor::new(&[idx.len(), self.feature_dim], data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> =
            self.features.iter().map(|(k, v)| (k.clone(), Tensor::new(&[v.len()], v.clone()))).collect();
        let refs = tensors.iter().map(|(k, t)| (k.clone(), t)).collect();
        let meta = HashMap::from([
            ("teacher_digest".to_string(), self.teacher_digest.clone()),
            ("feature_dim".to_string(), self.feature_dim.to_string()),
        ]);
        let bytes = encode_tensors(&refs, meta)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (tensors, meta) = decode_tensors(&bytes, &name)?;
        let missing = |k: &str| Error::Integrity { blob: name.clone(), message: format!("metadata `{k}` missing") };
        let teacher_digest = meta.get("teacher_digest").cloned().ok_or_else(|| missing("teacher_digest"))?;
        let feature_dim = meta
            .get("feature_dim")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| missing("feature_dim"))?;
        let mut features = BTreeMap::new();
        for (k, t) in tensors {
            if t.numel() != feature_dim {
                return Err(Error::Integrity { blob: name.clone(), message: format!("entry `{k}` has {} values", t.numel()) });
            }
            features.insert(k, t.into_data());
        }
        Ok(Self { teacher_digest, feature_dim, features })
    }
}

/// Distillation loss of the student over the given rows, without a tape.
pub fn evaluate_distill(student: &Extractor, cache: &FeatureCache, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    let s = student.features(&dataset.low_batch(idx))?;
    let t = cache.batch(dataset, idx)?;
    let sq: f64 = s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / idx.len().max(1) as f64)
}

/// Minimizes the feature-matching loss of the student against cached
/// teacher features; returns the per-step loss (before each update).
#[allow(clippy::too_many_arguments)]
pub fn distill(
    student: &mut Extractor,
    adam: &mut Adam,
    cache: &FeatureCache,
    dataset: &Dataset,
    train_idx: &[usize],
    iterations: usize,
    batch: usize,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    if cache.feature_dim != student.feature_dim {
        return Err(Error::Data(format!(
            "cache holds {}-dim features, student produces {}",
            cache.feature_dim, student.feature_dim
        )));
    }
    cache.batch(dataset, train_idx)?;
    let mut batches = Batches::new(train_idx);
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let idx = batches.next(batch, rng);
        let g = Graph::new();
        let b = g.bind(&student.params, true);
        let out = student.forward(&b, &g.constant(dataset.low_batch(&idx)))?;
        let target = g.constant(cache.batch(dataset, &idx)?);
        let loss = distill_loss(&out.features, &target);
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::NonFinite { term: "l_feature".into(), iteration: it as u64, value: lv });
        }
        losses.push(lv);
        let grads = g.backward(loss, &b.vars());
        let named = b.grads(&grads);
        adam.step(&mut student.params, &named);
    }
    Ok(losses)
}
