//! Procedural multiview dataset: convex solids rendered orthographically
//! with Lambert shading from poses drawn in the configured ranges.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::RngExt;

use super::{DatasetManifest, ManifestEntry};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geom3d::{pose_to_rotation, sample_pose, PoseRanges, ViewPose};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Cube,
    Pyramid,
    Cylinder,
}

impl ShapeKind {
    pub fn for_category(c: usize) -> Self {
        [ShapeKind::Cube, ShapeKind::Pyramid, ShapeKind::Cylinder][c % 3]
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Cube => "cube",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Cylinder => "cylinder",
        }
    }

    /// Half-spaces `n . p <= d` whose intersection is the solid.
    fn planes(self) -> Vec<([f64; 3], f64)> {
        match self {
            ShapeKind::Cube => {
                let mut v = Vec::new();
                for axis in 0..3 {
                    for sign in [1.0, -1.0] {
                        let mut n = [0.0; 3];
                        n[axis] = sign;
                        v.push((n, 0.5));
                    }
                }
                v
            }
            ShapeKind::Pyramid => {
                // square base at y = -0.5 of half-width 0.55, apex at y = 0.6
                let (half, base, apex) = (0.55, -0.5, 0.6);
                let slope = half / (apex - base);
                let mut v = vec![([0.0, -1.0, 0.0], -base)];
                for (nx, nz) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                    v.push(([nx, slope, nz], slope * apex));
                }
                v
            }
            ShapeKind::Cylinder => {
                let sides = 16;
                let mut v = vec![([0.0, 1.0, 0.0], 0.55), ([0.0, -1.0, 0.0], 0.55)];
                for k in 0..sides {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
                    v.push(([a.cos(), 0.0, a.sin()], 0.5));
                }
                v
            }
        }
    }
}

/// Distinct, fully saturated-ish colour per category (golden-ratio hues).
pub fn category_color(c: usize) -> [f64; 3] {
    let h = (c as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.75, 0.9);
    let chroma = v * s;
    let x = chroma * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - chroma;
    let (r, g, b) = match h as usize {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    [r + m, g + m, b + m]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub n_base: usize,
    pub n_novel: usize,
    pub images_per_category: usize,
    pub resolution: usize,
    pub jitter: f64,
    pub shading: f64,
    pub azimuth_range: [f64; 2],
    pub elevation_range: [f64; 2],
}

impl ToySpec {
    /// Rendered at the teacher resolution so both extractors read from the
    /// same source images.
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            n_base: cfg.toy_base,
            n_novel: cfg.toy_novel,
            images_per_category: cfg.toy_images_per_category,
            resolution: cfg.teacher_resolution(),
            jitter: cfg.toy_jitter,
            shading: cfg.toy_shading,
            azimuth_range: cfg.azimuth_range,
            elevation_range: cfg.elevation_range,
        }
    }

    pub fn n_categories(&self) -> usize {
        self.n_base + self.n_novel
    }

    fn pose_ranges(&self) -> PoseRanges {
        PoseRanges { x: self.elevation_range, y: self.azimuth_range, z: [0.0, 0.0] }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

const LIGHT: [f64; 3] = [0.4, 0.6, 1.0];

/// Surface normal (object frame) hit by a ray, if any.
fn cast(planes: &[([f64; 3], f64)], o: [f64; 3], d: [f64; 3]) -> Option<[f64; 3]> {
    let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut normal = None;
    for &(n, off) in planes {
        let denom = dot(n, d);
        let num = off - dot(n, o);
        if denom.abs() < 1e-12 {
            if num < 0.0 {
                return None;
            }
        } else if denom < 0.0 {
            let t = num / denom;
            if t > t_in {
                t_in = t;
                normal = Some(n);
            }
        } else {
            t_out = t_out.min(num / denom);
        }
    }
    if t_in <= t_out { normal } else { None }
}

/// Renders one object. Background is black; object pixels get the category
/// colour plus `shading * (lambert - 0.5)` plus uniform jitter in
/// `[-jitter, jitter]` per pixel and channel.
pub fn render(shape: ShapeKind, color: [f64; 3], pose: &ViewPose, resolution: usize, shading: f64, jitter: f64, rng: &mut Stream) -> RgbImage {
    let rot = pose_to_rotation(pose);
    let rt = |v: [f64; 3]| {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|k| rot[k][i] * v[k]).sum();
        }
        out
    };
    let r_apply = |v: [f64; 3]| {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|k| rot[i][k] * v[k]).sum();
        }
        out
    };
    let planes: Vec<_> = shape.planes().into_iter().map(|(n, d)| {
        let len = dot(n, n).sqrt();
        ([n[0] / len, n[1] / len, n[2] / len], d / len)
    }).collect();
    let light = normalize(LIGHT);
    let dir = rt([0.0, 0.0, -1.0]);
    let mut img = RgbImage::new(resolution as u32, resolution as u32);
    for i in 0..resolution {
        for j in 0..resolution {
            let u = (j as f64 + 0.5) / resolution as f64 * 2.0 - 1.0;
            let v = 1.0 - (i as f64 + 0.5) / resolution as f64 * 2.0;
            let Some(n) = cast(&planes, rt([u, v, 5.0]), dir) else { continue };
            let lambert = dot(r_apply(n), light).max(0.0);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let noise = if jitter > 0.0 { jitter * (rng.random::<f64>() * 2.0 - 1.0) } else { 0.0 };
                let val = (color[c] + shading * (lambert - 0.5) + noise).clamp(0.0, 1.0);
                px[c] = (val * 255.0).round() as u8;
            }
            img.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    img
}

/// Rendered images with their manifest and true camera poses. Poses are
/// kept for tests only; nothing in training reads them.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
    pub poses: Vec<ViewPose>,
}

pub fn generate_toy_dataset(spec: &ToySpec, rng: &mut Stream) -> Result<ToyDataset> {
    if spec.images_per_category < 2 {
        return Err(Error::config("toy_images_per_category", "must be at least 2"));
    }
    let ranges = spec.pose_ranges();
    let mut manifest = DatasetManifest::default();
    manifest.metadata.insert("resolution".into(), spec.resolution.to_string());
    manifest.metadata.insert("base".into(), spec.n_base.to_string());
    manifest.metadata.insert("novel".into(), spec.n_novel.to_string());
    let (mut images, mut poses) = (vec![], vec![]);
    for c in 0..spec.n_categories() {
        let shape = ShapeKind::for_category(c);
        manifest.category_names.insert(c, format!("{}_{c}", shape.name()));
        for k in 0..spec.images_per_category {
            let pose = sample_pose(&ranges, rng)?;
            images.push(render(shape, category_color(c), &pose, spec.resolution, spec.shading, spec.jitter, rng));
            poses.push(pose);
            manifest.entries.push(ManifestEntry { path: PathBuf::from(format!("images/{c:03}_{k:03}.png")), category: c, bbox: None });
        }
    }
    Ok(ToyDataset { manifest, images, poses })
}

/// Writes PNGs, `manifest.tsv` and `poses.tsv` under `dir`. A non-empty
/// target is refused unless `force`.
pub fn write_toy_dataset(dir: &Path, toy: &ToyDataset, force: bool) -> Result<PathBuf> {
    if !force && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(Error::Data(format!("{} exists and is not empty (pass --force to overwrite)", dir.display())));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for (e, img) in toy.manifest.entries.iter().zip(&toy.images) {
        let p = dir.join(&e.path);
        img.save(&p).map_err(|err| Error::io(&p, std::io::Error::other(err)))?;
    }
    let mut poses = String::from("path\ttheta_x\ttheta_y\ttheta_z\n");
    for (e, p) in toy.manifest.entries.iter().zip(&toy.poses) {
        let [x, y, z] = p.to_array();
        poses.push_str(&format!("{}\t{x}\t{y}\t{z}\n", e.path.display()));
    }
    let pp = dir.join("poses.tsv");
    std::fs::write(&pp, poses).map_err(|e| Error::io(&pp, e))?;
    let mp = dir.join("manifest.tsv");
    toy.manifest.save(&mp)?;
    Ok(mp)
}
