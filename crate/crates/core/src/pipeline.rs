//! Stage helpers shared by the command line and the test harness:
//! dataset loading and splitting, teacher pretraining, distillation.

use std::path::Path;

use fbnet_autograd::Adam;

use crate::config::Config;
use crate::data::{ingest, make_splits, Dataset, DatasetManifest, SplitSpec};
use crate::error::Result;
use crate::recognition::{distill, evaluate_distill, pretrain_teacher, Extractor, FeatureCache, PretrainReport};
use crate::rng::seeded_rng;

/// Stream labels of the pre-training stages, kept apart from the training
/// run's own streams.
pub const SPLIT_STREAM: &str = "split";
pub const TEACHER_INIT: &str = "teacher_init";
pub const TEACHER_DATA: &str = "teacher_data";
pub const STUDENT_INIT: &str = "student_init";
pub const STUDENT_DATA: &str = "student_data";

pub fn split_dataset(cfg: &Config, ds: &Dataset) -> Result<SplitSpec> {
    make_splits(ds, cfg.base_categories, cfg.k_shot, &mut seeded_rng(cfg.seed, SPLIT_STREAM))
}

/// Ingests the manifest (paths relative to its directory) and splits it.
pub fn load_dataset(cfg: &Config, manifest_path: &Path) -> Result<(Dataset, SplitSpec)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let ds = ingest(&manifest, root, cfg.image_resolution, cfg.teacher_resolution())?;
    let split = split_dataset(cfg, &ds)?;
    Ok((ds, split))
}

pub fn new_teacher(cfg: &Config) -> Result<Extractor> {
    Extractor::new(cfg.teacher_resolution(), cfg.extractor_channels, cfg.feature_dim, Some(cfg.base_categories), &mut seeded_rng(cfg.seed, TEACHER_INIT))
}

pub fn new_student(cfg: &Config) -> Result<Extractor> {
    Extractor::new(cfg.image_resolution, cfg.extractor_channels, cfg.feature_dim, None, &mut seeded_rng(cfg.seed, STUDENT_INIT))
}

/// Trains the teacher on the base categories' training images and caches
/// its features for them.
pub fn pretrain_stage(cfg: &Config, ds: &Dataset, split: &SplitSpec) -> Result<(Extractor, PretrainReport, FeatureCache)> {
    let mut teacher = new_teacher(cfg)?;
    let (idx, labels) = split.train_of(&split.base);
    let classes: Vec<usize> =
        labels.iter().map(|l| split.base.iter().position(|b| b == l).expect("label among base categories")).collect();
    let mut adam = Adam::new(cfg.pretrain_lr, 0.9, 0.999);
    let report = pretrain_teacher(
        &mut teacher,
        &mut adam,
        &ds.high_batch(&idx),
        &classes,
        cfg.pretrain_epochs,
        cfg.pretrain_batch,
        &mut seeded_rng(cfg.seed, TEACHER_DATA),
    )?;
    let mut cache = FeatureCache::new(&teacher);
    cache.fill(&teacher, ds, &idx)?;
    Ok((teacher, report, cache))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub step_losses: Vec<f64>,
    /// Feature-matching loss over the whole base training set.
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn distill_stage(cfg: &Config, ds: &Dataset, split: &SplitSpec, cache: &FeatureCache) -> Result<(Extractor, DistillReport)> {
    let mut student = new_student(cfg)?;
    let (idx, _) = split.train_of(&split.base);
    let initial_loss = evaluate_distill(&student, cache, ds, &idx)?;
    let mut adam = Adam::new(cfg.distill_lr, 0.9, 0.999);
    let step_losses = distill(
        &mut student,
        &mut adam,
        cache,
        ds,
        &idx,
        cfg.distill_iters,
        cfg.distill_batch,
        &mut seeded_rng(cfg.seed, STUDENT_DATA),
    )?;
    let final_loss = evaluate_distill(&student, cache, ds, &idx)?;
    Ok((student, DistillReport { step_losses, initial_loss, final_loss }))
}
