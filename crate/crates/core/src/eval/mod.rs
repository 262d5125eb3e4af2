//! Recognition accuracy, FID, Inception-style score and multiview grids.

mod metrics;

pub use metrics::{fid, inception_score, top1_accuracy};

use std::path::Path;

use fbnet_autograd::Tensor;
use image::RgbImage;
use serde::Serialize;

use crate::config::{Config, Phase};
use crate::data::{resize_bilinear, to_rgb_image, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::geom3d::{sample_pose, PoseRanges, ViewPose};
use crate::recognition::compute_prototypes;
use crate::rng::{normal_vec, seeded_rng, Stream};
use crate::synthesis::Generator;
use crate::training::TrainState;

pub const METRICS_TEXT: &str = "metrics.txt";
pub const METRICS_JSON: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mode: String,
    pub accuracy_base: f64,
    pub accuracy_novel: f64,
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub n_test_base: usize,
    pub n_test_novel: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub config: Config,
}

impl MetricReport {
    /// `key=value` lines for everything except the config.
    pub fn to_text(&self) -> String {
        format!(
            "mode={}\naccuracy_base={}\naccuracy_novel={}\nfid={}\nis_mean={}\nis_std={}\nn_test_base={}\nn_test_novel={}\nn_real={}\nn_fake={}\n",
            self.mode,
            self.accuracy_base,
            self.accuracy_novel,
            self.fid,
            self.is_mean,
            self.is_std,
            self.n_test_base,
            self.n_test_novel,
            self.n_real,
            self.n_fake
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let t = dir.join(METRICS_TEXT);
        std::fs::write(&t, self.to_text()).map_err(|e| Error::io(&t, e))?;
        let j = dir.join(METRICS_JSON);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(&j, json).map_err(|e| Error::io(&j, e))
    }
}

/// Bilinear upsampling of `[N, 3, r, r]` images to side `to`.
pub fn resize_batch(images: &Tensor, to: usize) -> Tensor {
    let (n, r) = (images.shape()[0], images.shape()[2]);
    let mut data = Vec::with_capacity(n * 3 * to * to);
    for i in 0..n {
        data.extend(resize_bilinear(&images.data()[i * 3 * r * r..(i + 1) * 3 * r * r], r, to));
    }
    Tensor::new(&[n, 3, to, to], data)
}

/// Latents `F_low(x) ⊕ n` for each image, repeated `m` times
/// (view-major), with one sampled pose per item.
pub fn conditioned_latents(
    state: &TrainState,
    images: &Tensor,
    m: usize,
    noise: &mut Stream,
    views: &mut Stream,
) -> Result<(Tensor, Vec<ViewPose>)> {
    let f = state.student.features(images)?;
    let (n, fd, nd) = (images.shape()[0], state.config.feature_dim, state.config.noise_dim);
    let ranges = PoseRanges::from_config(&state.config);
    let mut z = Vec::with_capacity(m * n * (fd + nd));
    let mut poses = Vec::with_capacity(m * n);
    for _ in 0..m {
        for i in 0..n {
            z.extend_from_slice(&f.data()[i * fd..(i + 1) * fd]);
            z.extend(normal_vec(noise, nd));
            poses.push(sample_pose(&ranges, views)?);
        }
    }
    Ok((Tensor::new(&[m * n, fd + nd], z), poses))
}

fn generate_chunked(g: &Generator, z: &Tensor, poses: &[ViewPose], chunk: usize) -> Result<Tensor> {
    let n = poses.len();
    let mut parts = Vec::new();
    for a in (0..n).step_by(chunk.max(1)) {
        let b = (a + chunk.max(1)).min(n);
        parts.push(g.generate(&z.slice_outer(a, b), &poses[a..b])?);
    }
    Ok(Tensor::stack_outer(&parts.iter().collect::<Vec<_>>()))
}

/// Accuracy of one phase: prototypes from the phase's training images
/// (plus `m_views` generated views each when the mode augments), queries
/// from its test split.
pub fn phase_accuracy(state: &TrainState, ds: &Dataset, split: &SplitSpec, phase: Phase, noise: &mut Stream, views: &mut Stream) -> Result<(f64, usize)> {
    let cats = split.categories(phase)?;
    let (tr, mut labels) = split.train_of(cats);
    let (te, test_labels) = split.test_of(cats);
    let train_images = ds.low_batch(&tr);
    let mut feats = state.student.features(&train_images)?;
    if state.mode.augments() {
        let (z, poses) = conditioned_latents(state, &train_images, state.config.m_views, noise, views)?;
        let gen = generate_chunked(state.view_generator(), &z, &poses, state.config.gan_batch)?;
        feats = Tensor::stack_outer(&[&feats, &state.student.features(&gen)?]);
        for _ in 0..state.config.m_views {
            labels.extend(split.train_of(cats).1);
        }
    }
    let protos = compute_prototypes(&state.embedder.embed(&feats), &labels, cats)?;
    let test_emb = state.embedder.embed(&state.student.features(&ds.low_batch(&te))?);
    Ok((top1_accuracy(&test_emb, &test_labels, &protos)?, te.len()))
}

/// Full report: accuracy on both phases, and FID / IS of one generated
/// view per training image against those images, scored by the teacher at
/// its resolution.
pub fn evaluate(state: &TrainState, ds: &Dataset, split: &SplitSpec) -> Result<MetricReport> {
    let seed = state.config.seed;
    let mut noise = seeded_rng(seed, "eval_noise");
    let mut views = seeded_rng(seed, "eval_views");
    let (accuracy_base, n_test_base) = phase_accuracy(state, ds, split, Phase::Base, &mut noise, &mut views)?;
    let (accuracy_novel, n_test_novel) = phase_accuracy(state, ds, split, Phase::Novel, &mut noise, &mut views)?;

    let mut all = split.base.clone();
    all.extend(&split.novel);
    let (tr, _) = split.train_of(&all);
    let reals = ds.low_batch(&tr);
    let (z, poses) = conditioned_latents(state, &reals, 1, &mut noise, &mut views)?;
    let fakes = generate_chunked(state.view_generator(), &z, &poses, state.config.gan_batch)?;
    let rt = state.teacher.resolution;
    let real_feat = state.teacher.pooled(&resize_batch(&reals, rt))?;
    let fake_up = resize_batch(&fakes, rt);
    let fake_feat = state.teacher.pooled(&fake_up)?;
    let fid_value = fid(&real_feat, &fake_feat)?;
    let probs = state.teacher.class_probs(&fake_up)?;
    let splits = state.config.eval_is_splits.min(fakes.shape()[0]).max(1);
    let (is_mean, is_std) = inception_score(&probs, splits)?;
    Ok(MetricReport {
        mode: state.mode.as_str().into(),
        accuracy_base,
        accuracy_novel,
        fid: fid_value,
        is_mean,
        is_std,
        n_test_base,
        n_test_novel,
        n_real: tr.len(),
        n_fake: fakes.shape()[0],
        config: state.config.clone(),
    })
}

/// Evenly spaced azimuths over the configured range at zero elevation.
pub fn azimuth_sweep(cfg: &Config, count: usize) -> Result<Vec<ViewPose>> {
    let [lo, hi] = cfg.azimuth_range;
    (0..count)
        .map(|k| {
            let t = if count > 1 { k as f64 / count as f64 } else { 0.0 };
            ViewPose::new(0.0, lo + (hi - lo) * t, 0.0)
        })
        .collect()
}

/// Grid image with one row per pose and one column per latent, saved as
/// PNG. Returns `(rows, cols)`.
pub fn export_view_grid(generator: &Generator, z: &Tensor, poses: &[ViewPose], path: &Path) -> Result<(usize, usize)> {
    let (cols, rows) = (z.shape()[0], poses.len());
    let r = generator.arch.resolution;
    let mut grid = RgbImage::new((cols * r) as u32, (rows * r) as u32);
    for (row, pose) in poses.iter().enumerate() {
        let imgs = generator.generate(z, &vec![*pose; cols])?;
        for col in 0..cols {
            let tile = to_rgb_image(&imgs.data()[col * 3 * r * r..(col + 1) * 3 * r * r], r);
            image::imageops::replace(&mut grid, &tile, (col * r) as i64, (row * r) as i64);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    grid.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    Ok((rows, cols))
}

/// Grids for the first training image of every category of each phase,
/// written to `<dir>/base.png` and `<dir>/novel.png`.
pub fn export_phase_grids(state: &TrainState, ds: &Dataset, split: &SplitSpec, dir: &Path, n_poses: usize) -> Result<Vec<std::path::PathBuf>> {
    let mut noise = seeded_rng(state.config.seed, "grid_noise");
    let mut views = seeded_rng(state.config.seed, "grid_views");
    let poses = azimuth_sweep(&state.config, n_poses)?;
    let mut out = Vec::new();
    for phase in [Phase::Base, Phase::Novel] {
        let firsts: Vec<usize> = split.categories(phase)?.iter().filter_map(|c| split.train.get(c).and_then(|v| v.first().copied())).collect();
        let (z, _) = conditioned_latents(state, &ds.low_batch(&firsts), 1, &mut noise, &mut views)?;
        let path = dir.join(format!("{phase}.png"));
        export_view_grid(state.view_generator(), &z, &poses, &path)?;
        out.push(path);
    }
    Ok(out)
}
