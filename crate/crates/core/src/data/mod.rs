//! Dataset manifests, image ingestion, base/novel splits, episodic sampling
//! and the procedural toy dataset.

mod split;
mod toy;

pub use split::{make_splits, sample_episode, Episode, SplitSpec};
pub use toy::{category_color, generate_toy_dataset, write_toy_dataset, ShapeKind, ToyDataset, ToySpec};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fbnet_autograd::Tensor;
use image::RgbImage;

use crate::error::{Error, Result};

/// Axis-aligned box `(x, y, w, h)` in pixels.
pub type BBox = [u32; 4];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub category: usize,
    pub bbox: Option<BBox>,
}

/// Image list with category names and free-form `key value` metadata.
///
/// Text form: `#`-prefixed header lines (`# category <id> <name>`,
/// `# meta <key> <value>`), then one `path<TAB>category[<TAB>x,y,w,h]`
/// record per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub category_names: BTreeMap<usize, String>,
    pub metadata: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Data(format!("manifest line {}: {msg}", lineno + 1));
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let mut parts = header.trim().splitn(3, ' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some("category"), Some(id), Some(name)) => {
                        let id = id.parse().map_err(|_| bad("bad category id"))?;
                        m.category_names.insert(id, name.to_string());
                    }
                    (Some("meta"), Some(k), Some(v)) => {
                        m.metadata.insert(k.to_string(), v.to_string());
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(bad("expected `path<TAB>category[<TAB>x,y,w,h]`"));
            }
            let category = fields[1].trim().parse().map_err(|_| bad("bad category id"))?;
            let bbox = match fields.get(2) {
                None => None,
                Some(b) => {
                    let v: Vec<u32> = b.split(',').map(|x| x.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad bounding box"))?;
                    let arr: BBox = v.try_into().map_err(|_| bad("bounding box needs 4 numbers"))?;
                    if arr[2] == 0 || arr[3] == 0 {
                        return Err(bad("empty bounding box"));
                    }
                    Some(arr)
                }
            };
            m.entries.push(ManifestEntry { path: PathBuf::from(fields[0]), category, bbox });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# meta {k} {v}");
        }
        for (id, name) in &self.category_names {
            let _ = writeln!(s, "# category {id} {name}");
        }
        for e in &self.entries {
            let _ = write!(s, "{}\t{}", e.path.display(), e.category);
            if let Some([x, y, w, h]) = e.bbox {
                let _ = write!(s, "\t{x},{y},{w},{h}");
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Sorted distinct category ids.
    pub fn categories(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.entries.iter().map(|e| e.category).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Every category needs at least one train and one test image.
    pub fn validate(&self) -> Result<()> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.category).or_default() += 1;
        }
        if let Some((c, n)) = counts.iter().find(|(_, &n)| n < 2) {
            return Err(Error::Data(format!("category {c} has {n} image(s); at least 2 are required")));
        }
        Ok(())
    }
}

/// Ingested images at the working and the teacher resolution, in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Manifest path of each image; stable identifier for caches.
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `[N, 3, R, R]`.
    pub low: Tensor,
    /// `[N, 3, R_teacher, R_teacher]`.
    pub high: Tensor,
    pub resolution: usize,
    pub teacher_resolution: usize,
    /// Entries dropped during ingestion with the reason.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn categories(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn low_batch(&self, idx: &[usize]) -> Tensor {
        self.low.select_outer(idx)
    }

    pub fn high_batch(&self, idx: &[usize]) -> Tensor {
        self.high.select_outer(idx)
    }
}

/// Square region to crop: the box's enclosing square (clamped to the image)
/// when given, else the centred square.
pub fn crop_square(width: u32, height: u32, bbox: Option<BBox>) -> Result<(u32, u32, u32)> {
    match bbox {
        None => {
            let s = width.min(height);
            Ok(((width - s) / 2, (height - s) / 2, s))
        }
        Some([x, y, w, h]) => {
            if x.checked_add(w).is_none_or(|r| r > width) || y.checked_add(h).is_none_or(|b| b > height) {
                return Err(Error::Data(format!("bounding box {x},{y},{w},{h} outside {width}x{height} image")));
            }
            let s = w.max(h).min(width).min(height);
            let clamp = |start: u32, len: u32, limit: u32| {
                let centre2 = 2 * start + len;
                let lo = centre2.saturating_sub(s) / 2;
                lo.min(limit - s)
            };
            Ok((clamp(x, w, width), clamp(y, h, height), s))
        }
    }
}

/// Bilinear resample of one channel-planar square image (`[3, s, s]`) to
/// `[3, r, r]`, pixel centres aligned (half-pixel convention, edge clamped).
pub fn resize_bilinear(src: &[f64], s: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * r * r];
    let scale = s as f64 / r as f64;
    let coord = |i: usize| {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(s - 1);
        (x0, x1, x - x0 as f64)
    };
    let cols: Vec<_> = (0..r).map(coord).collect();
    for c in 0..3 {
        let plane = &src[c * s * s..(c + 1) * s * s];
        for i in 0..r {
            let (y0, y1, fy) = cols[i];
            for j in 0..r {
                let (x0, x1, fx) = cols[j];
                let top = plane[y0 * s + x0] * (1.0 - fx) + plane[y0 * s + x1] * fx;
                let bot = plane[y1 * s + x0] * (1.0 - fx) + plane[y1 * s + x1] * fx;
                out[c * r * r + i * r + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Crops, resizes to each requested resolution and maps `[0, 255]` to
/// `[-1, 1]`.
pub fn preprocess(img: &RgbImage, bbox: Option<BBox>, resolutions: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (x0, y0, s) = crop_square(img.width(), img.height(), bbox)?;
    let s = s as usize;
    let mut planar = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = img.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..3 {
                planar[c * s * s + y * s + x] = p[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    Ok(resolutions.iter().map(|&r| resize_bilinear(&planar, s, r)).collect())
}

/// Loads every manifest entry relative to `root`. Unreadable images are
/// skipped with a warning; a category left with fewer than two images is an
/// error.
pub fn ingest(manifest: &DatasetManifest, root: &Path, resolution: usize, teacher_resolution: usize) -> Result<Dataset> {
    manifest.validate()?;
    let (mut ids, mut labels, mut low, mut high, mut skipped) = (vec![], vec![], vec![], vec![], vec![]);
    for e in &manifest.entries {
        let id = e.path.to_string_lossy().into_owned();
        let loaded = image::open(root.join(&e.path))
            .map_err(|err| Error::Data(err.to_string()))
            .and_then(|img| preprocess(&img.to_rgb8(), e.bbox, &[resolution, teacher_resolution]));
        match loaded {
            Ok(mut v) => {
                high.extend(v.pop().unwrap_or_default());
                low.extend(v.pop().unwrap_or_default());
                ids.push(id);
                labels.push(e.category);
            }
            Err(err) => {
                log::warn!("skipping {id}: {err}");
                skipped.push((id, err.to_string()));
            }
        }
    }
    for c in manifest.categories() {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < 2 {
            return Err(Error::Data(format!("category {c} has {n} readable image(s) after skips; at least 2 are required")));
        }
    }
    let n = ids.len();
    Ok(Dataset {
        ids,
        labels,
        low: Tensor::new(&[n, 3, resolution, resolution], low),
        high: Tensor::new(&[n, 3, teacher_resolution, teacher_resolution], high),
        resolution,
        teacher_resolution,
        skipped,
    })
}

impl Dataset {
    /// Ingests in-memory images (the toy renderer's output) without a
    /// round trip through the filesystem.
    pub fn from_images(manifest: &DatasetManifest, images: &[RgbImage], resolution: usize, teacher_resolution: usize) -> Result<Self> {
        if manifest.entries.len() != images.len() {
            return Err(Error::Data(format!("{} manifest entries but {} images", manifest.entries.len(), images.len())));
        }
        manifest.validate()?;
        let (mut ids, mut labels, mut low, mut high) = (vec![], vec![], vec![], vec![]);
        for (e, img) in manifest.entries.iter().zip(images) {
            let mut v = preprocess(img, e.bbox, &[resolution, teacher_resolution])?;
            high.extend(v.pop().unwrap_or_default());
            low.extend(v.pop().unwrap_or_default());
            ids.push(e.path.to_string_lossy().into_owned());
            labels.push(e.category);
        }
        let n = ids.len();
        Ok(Dataset {
            ids,
            labels,
            low: Tensor::new(&[n, 3, resolution, resolution], low),
            high: Tensor::new(&[n, 3, teacher_resolution, teacher_resolution], high),
            resolution,
            teacher_resolution,
            skipped: vec![],
        })
    }
}

/// Maps `[-1, 1]` planar `[3, r, r]` data to an 8-bit image.
pub fn to_rgb_image(planar: &[f64], r: usize) -> RgbImage {
    RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let px = |c: usize| {
            let v = planar[c * r * r + y as usize * r + x as usize];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let text = "# meta resolution 128\n# category 0 cube\na.png\t0\nb.png\t0\t1,2,3,4\n";
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.entries[1].bbox, Some([1, 2, 3, 4]));
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn singleton_category_rejected() {
        assert!(DatasetManifest::parse("a.png\t0\nb.png\t1\nc.png\t1\n").is_err());
    }

    #[test]
    fn centre_crop_of_wide_image() {
        assert_eq!(crop_square(100, 80, None).unwrap(), (10, 0, 80));
    }

    #[test]
    fn bbox_crop_and_out_of_bounds() {
        assert_eq!(crop_square(100, 80, Some([10, 10, 50, 50])).unwrap(), (10, 10, 50));
        assert!(crop_square(100, 80, Some([60, 10, 50, 50])).is_err());
    }

    #[test]
    fn white_image_maps_to_ones() {
        let img = RgbImage::from_pixel(100, 80, image::Rgb([255, 255, 255]));
        let v = preprocess(&img, None, &[16]).unwrap();
        assert!(v[0].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let src: Vec<f64> = (0..3 * 25).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = resize_bilinear(&src, 5, 5);
        for (a, b) in src.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
