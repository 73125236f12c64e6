//! Synthetic segmentation data: procedural scene generation, netpbm file IO,
//! manifests, and the flip/scale-jitter/pad augmentation pipeline.
//!
//! Images are textured backgrounds with 1-4 geometric shapes; each
//! foreground class owns one shape kind (1 = disk, 2 = square,
//! 3 = triangle), so class identity is carried by geometry rather than
//! color. Everything is a pure function of the generation parameters and
//! the seed.

pub mod netpbm;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::losses::{LabelMap, LossError, IGNORE_LABEL};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One image with per-pixel labels (batch dimension fixed at 1).
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

/// Ordered list of `(image, optional label)` paths relative to a root.
#[derive(Debug, Clone)]
pub struct Manifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

impl Manifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Self {
        Manifest { root, entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let image = cols.next().filter(|s| !s.is_empty()).ok_or_else(|| {
                DataError::Manifest(format!("{}:{}: empty image path", path.display(), lineno + 1))
            })?;
            let label = match cols.next() {
                Some("-") | None => None,
                Some(l) => Some(PathBuf::from(l)),
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(image),
                label,
            });
        }
        Ok(Manifest { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&e.image.to_string_lossy());
            text.push('\t');
            match &e.label {
                Some(l) => text.push_str(&l.to_string_lossy()),
                None => text.push('-'),
            }
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].image)
    }

    pub fn label_path(&self, index: usize) -> Option<PathBuf> {
        self.entries[index].label.as_ref().map(|l| self.root.join(l))
    }
}

/// Write a sample as a PPM/PGM pair.
pub fn write_sample(sample: &Sample, image_path: &Path, label_path: &Path) -> Result<()> {
    netpbm::write_ppm(image_path, &sample.image)?;
    let (_, h, w) = sample.labels.dims();
    netpbm::write_pgm(label_path, h, w, sample.labels.data())
}

/// Read a labeled sample, validating label range against `num_classes`.
pub fn read_sample(image_path: &Path, label_path: &Path, num_classes: usize) -> Result<Sample> {
    let image = netpbm::read_ppm(image_path)?;
    let (h, w, labels) = netpbm::read_pgm(label_path)?;
    if image.shape()[1] != h || image.shape()[2] != w {
        return Err(DataError::Format(format!(
            "image {:?} and labels {}x{} disagree on size",
            &image.shape()[1..],
            h,
            w
        )));
    }
    for &v in &labels {
        if v != IGNORE_LABEL && v as usize >= num_classes {
            return Err(DataError::Label(format!(
                "label value {} invalid for {} classes",
                v, num_classes
            )));
        }
    }
    Ok(Sample {
        image,
        labels: LabelMap::single(h, w, labels)?,
    })
}

/// Read a manifest entry; unlabeled entries get an all-ignore label map.
pub fn read_entry(manifest: &Manifest, index: usize, num_classes: usize) -> Result<Sample> {
    match manifest.label_path(index) {
        Some(label_path) => read_sample(&manifest.image_path(index), &label_path, num_classes),
        None => {
            let image = netpbm::read_ppm(&manifest.image_path(index))?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            Ok(Sample {
                image,
                labels: LabelMap::filled(1, h, w, IGNORE_LABEL),
            })
        }
    }
}

// --- procedural scenes ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    fn for_class(class_id: u8) -> ShapeKind {
        match class_id {
            1 => ShapeKind::Disk,
            2 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class_id: u8,
    pub center: (i64, i64),
    pub radius: i64,
    pub color: [f64; 3],
}

impl PlacedShape {
    /// Exact rasterization predicate in integer arithmetic.
    pub fn contains(&self, y: i64, x: i64) -> bool {
        let (cy, cx) = self.center;
        let r = self.radius;
        match self.kind {
            ShapeKind::Disk => (y - cy).pow(2) + (x - cx).pow(2) <= r * r,
            ShapeKind::Square => (y - cy).abs() <= r && (x - cx).abs() <= r,
            ShapeKind::Triangle => {
                // Isoceles triangle, apex up: halfwidth grows from 0 at the
                // apex row to r at the base row.
                y >= cy - r && y <= cy + r && 2 * (x - cx).abs() <= y - (cy - r)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Background {
    pub base: [f64; 3],
    pub amplitude: [f64; 3],
    pub frequency: [(f64, f64); 3],
    pub phase: [f64; 3],
}

impl Background {
    fn color_at(&self, y: usize, x: usize, size: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let (fy, fx) = self.frequency[c];
            let angle = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / size as f64
                + self.phase[c];
            out[c] = self.base[c] + self.amplitude[c] * angle.sin();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub size: usize,
    pub shapes: Vec<PlacedShape>,
    pub background: Background,
}

const PIXEL_NOISE: f64 = 0.06;
const COLOR_JITTER: f64 = 0.25;
const CLASS_PROTOTYPES: [[f64; 3]; 3] = [
    [0.75, 0.35, 0.35],
    [0.35, 0.75, 0.35],
    [0.35, 0.35, 0.75],
];

/// Draw a random scene layout: background texture plus 1-4 shapes whose
/// centers keep a minimum pairwise distance.
pub fn sample_scene<R: Rng>(rng: &mut R, size: usize, num_classes: usize) -> Scene {
    let background = Background {
        base: std::array::from_fn(|_| rng.random_range(0.25..0.65)),
        amplitude: std::array::from_fn(|_| rng.random_range(0.10..0.30)),
        frequency: std::array::from_fn(|_| {
            (rng.random_range(0.5..2.5), rng.random_range(0.5..2.5))
        }),
        phase: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
    };

    let n_shapes = rng.random_range(1..=4usize);
    let r_min = ((size * 3) / 32).max(2) as i64;
    let r_max = ((size * 7) / 32).max(3) as i64;
    let min_center_dist = (size as i64 / 8).max(3);
    let mut shapes: Vec<PlacedShape> = Vec::new();
    for _ in 0..n_shapes {
        let class_id = rng.random_range(1..num_classes) as u8;
        let radius = rng.random_range(r_min..=r_max);
        let mut placed = None;
        for _ in 0..20 {
            let cy = rng.random_range(2..size as i64 - 2);
            let cx = rng.random_range(2..size as i64 - 2);
            let ok = shapes.iter().all(|s| {
                let (sy, sx) = s.center;
                (sy - cy).pow(2) + (sx - cx).pow(2) >= min_center_dist * min_center_dist
            });
            if ok {
                placed = Some((cy, cx));
                break;
            }
        }
        let Some(center) = placed else { continue };
        let proto = CLASS_PROTOTYPES[(class_id - 1) as usize];
        let color = std::array::from_fn(|c| {
            (proto[c] + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.05, 0.95)
        });
        shapes.push(PlacedShape {
            kind: ShapeKind::for_class(class_id),
            class_id,
            center,
            radius,
            color,
        });
    }
    Scene {
        size,
        shapes,
        background,
    }
}

/// Rasterize a scene; later shapes overwrite earlier ones. Labels mark exact
/// shape interiors, colors get additive per-pixel noise.
pub fn render_scene<R: Rng>(scene: &Scene, rng: &mut R) -> Sample {
    let size = scene.size;
    let plane = size * size;
    let mut image = vec![0.0f32; 3 * plane];
    let mut labels = vec![0u8; plane];

    for y in 0..size {
        for x in 0..size {
            let mut color = scene.background.color_at(y, x, size);
            for shape in &scene.shapes {
                if shape.contains(y as i64, x as i64) {
                    color = shape.color;
                    labels[y * size + x] = shape.class_id;
                }
            }
            for (c, base) in color.iter().enumerate() {
                let noisy = base + rng.random_range(-PIXEL_NOISE..PIXEL_NOISE);
                image[c * plane + y * size + x] = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Sample {
        image: Tensor::from_vec(&[3, size, size], image).expect("scene shape"),
        labels: LabelMap::single(size, size, labels).expect("scene labels"),
    }
}

fn image_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ split.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

/// Generate `train`, `val` and `unlabeled` splits under `out_dir` and write
/// one manifest per split. The unlabeled manifest carries no label paths.
pub fn generate_synthetic_dataset(
    num_train: usize,
    num_val: usize,
    num_unlabeled: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(Manifest, Manifest, Manifest)> {
    if !(2..=4).contains(&num_classes) {
        return Err(DataError::Config(format!(
            "num_classes must be 2..=4 (background plus up to 3 shape kinds), got {}",
            num_classes
        )));
    }
    if size < 8 {
        return Err(DataError::Config(format!("size {} is too small", size)));
    }
    std::fs::create_dir_all(out_dir)?;

    let splits: [(&str, usize, u64, bool); 3] = [
        ("train", num_train, 1, true),
        ("val", num_val, 2, true),
        ("unlabeled", num_unlabeled, 3, false),
    ];
    let mut manifests = Vec::new();
    for (name, count, split_id, labeled) in splits {
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir)?;
        let entries = (0..count)
            .into_par_iter()
            .map(|i| -> Result<ManifestEntry> {
                let mut rng = image_rng(seed, split_id, i as u64);
                let scene = sample_scene(&mut rng, size, num_classes);
                let sample = render_scene(&scene, &mut rng);
                let image_rel = PathBuf::from(format!("{}/img_{:05}.ppm", name, i));
                let label_rel = PathBuf::from(format!("{}/lbl_{:05}.pgm", name, i));
                if labeled {
                    write_sample(&sample, &out_dir.join(&image_rel), &out_dir.join(&label_rel))?;
                    Ok(ManifestEntry {
                        image: image_rel,
                        label: Some(label_rel),
                    })
                } else {
                    netpbm::write_ppm(&out_dir.join(&image_rel), &sample.image)?;
                    Ok(ManifestEntry {
                        image: image_rel,
                        label: None,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest::new(out_dir.to_path_buf(), entries);
        manifest.save(&out_dir.join(format!("{}.txt", name)))?;
        manifests.push(manifest);
    }
    let mut it = manifests.into_iter();
    Ok((
        it.next().expect("train"),
        it.next().expect("val"),
        it.next().expect("unlabeled"),
    ))
}

// --- augmentation ---

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub target_size: usize,
}

impl AugmentConfig {
    pub fn for_size(target_size: usize) -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            scale_min: 0.5,
            scale_max: 1.5,
            target_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(DataError::Config(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(DataError::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if self.target_size == 0 {
            return Err(DataError::Config("target size must be positive".into()));
        }
        Ok(())
    }
}

/// Random horizontal flip and scale jitter, then center crop or zero-pad to
/// the square target size. Image and labels move under the same geometric
/// map; padded pixels get zero color and the ignore label.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    debug_assert!(cfg.validate().is_ok());
    let flip = rng.random::<f64>() < cfg.flip_probability;
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..cfg.scale_max)
    };

    let (h, w) = sample.size();
    let plane = h * w;
    let image = sample.image.data();
    let labels = sample.labels.data();

    let new_h = ((h as f64 * scale).round() as usize).max(1);
    let new_w = ((w as f64 * scale).round() as usize).max(1);
    let t = cfg.target_size;

    let mut out_image = vec![0.0f32; 3 * t * t];
    let mut out_labels = vec![IGNORE_LABEL; t * t];

    // Destination (ty, tx) pulls from the scaled image at (ty + crop - pad),
    // which in turn pulls from the source via the nearest-neighbor map.
    let crop_y = new_h.saturating_sub(t) / 2;
    let crop_x = new_w.saturating_sub(t) / 2;
    let pad_y = t.saturating_sub(new_h) / 2;
    let pad_x = t.saturating_sub(new_w) / 2;

    for ty in 0..t {
        let sy = match (ty + crop_y).checked_sub(pad_y) {
            Some(v) if v < new_h => v,
            _ => continue,
        };
        let src_y = (sy * h) / new_h;
        for tx in 0..t {
            let sx = match (tx + crop_x).checked_sub(pad_x) {
                Some(v) if v < new_w => v,
                _ => continue,
            };
            let src_x_raw = (sx * w) / new_w;
            let src_x = if flip { w - 1 - src_x_raw } else { src_x_raw };
            out_labels[ty * t + tx] = labels[src_y * w + src_x];
            for c in 0..3 {
                out_image[c * t * t + ty * t + tx] = image[c * plane + src_y * w + src_x];
            }
        }
    }

    Sample {
        image: Tensor::from_vec(&[3, t, t], out_image).expect("augment shape"),
        labels: LabelMap::single(t, t, out_labels).expect("augment labels"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_scene(size: usize, shape: PlacedShape) -> Scene {
        Scene {
            size,
            shapes: vec![shape],
            background: Background {
                base: [0.4; 3],
                amplitude: [0.1; 3],
                frequency: [(1.0, 1.0); 3],
                phase: [0.0; 3],
            },
        }
    }

    #[test]
    fn disk_label_area_matches_rasterization_oracle() {
        let shape = PlacedShape {
            kind: ShapeKind::Disk,
            class_id: 1,
            center: (9, 13),
            radius: 5,
            color: [0.8, 0.2, 0.2],
        };
        let scene = fixed_scene(24, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = render_scene(&scene, &mut rng);

        // Independent integer-arithmetic count of disk pixels.
        let mut expect = 0usize;
        for y in 0..24i64 {
            for x in 0..24i64 {
                if (y - 9) * (y - 9) + (x - 13) * (x - 13) <= 25 {
                    expect += 1;
                }
            }
        }
        let got = sample.labels.data().iter().filter(|&&v| v == 1).count();
        assert_eq!(got, expect);
    }

    #[test]
    fn generation_is_reproducible_and_splits_are_wired() {
        let dir = tempfile::tempdir().unwrap();
        let (a_train, _, a_unlab) =
            generate_synthetic_dataset(3, 2, 2, 16, 4, 7, &dir.path().join("a")).unwrap();
        let (_, _, _) = generate_synthetic_dataset(3, 2, 2, 16, 4, 7, &dir.path().join("b")).unwrap();

        assert_eq!(a_train.len(), 3);
        assert!(a_unlab.entries().iter().all(|e| e.label.is_none()));
        for name in ["train/img_00000.ppm", "val/lbl_00001.pgm", "unlabeled/img_00001.ppm"] {
            let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
            assert_eq!(x, y, "{} differs between identical seeds", name);
        }
    }

    #[test]
    fn too_few_classes_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_synthetic_dataset(1, 1, 0, 16, 1, 0, dir.path()).unwrap_err();
        assert!(matches!(err, DataError::Config(_)));
    }

    #[test]
    fn manifest_roundtrip_preserves_entries() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest::new(
            dir.path().to_path_buf(),
            vec![
                ManifestEntry {
                    image: "train/a.ppm".into(),
                    label: Some("train/a.pgm".into()),
                },
                ManifestEntry {
                    image: "unlabeled/b.ppm".into(),
                    label: None,
                },
            ],
        );
        let path = dir.path().join("m.txt");
        manifest.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.entries()[0].label.as_deref(), Some(Path::new("train/a.pgm")));
        assert!(back.entries()[1].label.is_none());
        assert_eq!(back.image_path(1), dir.path().join("unlabeled/b.ppm"));
    }

    #[test]
    fn sample_roundtrip_images_close_labels_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = sample_scene(&mut rng, 16, 4);
        let sample = render_scene(&scene, &mut rng);
        let (ip, lp) = (dir.path().join("s.ppm"), dir.path().join("s.pgm"));
        write_sample(&sample, &ip, &lp).unwrap();
        let back = read_sample(&ip, &lp, 4).unwrap();
        assert_eq!(back.labels, sample.labels);
        for (a, b) in back.image.data().iter().zip(sample.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn out_of_range_label_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("s.ppm"), dir.path().join("s.pgm"));
        let image = Tensor::from_vec(&[3, 2, 2], vec![0.5; 12]).unwrap();
        netpbm::write_ppm(&ip, &image).unwrap();
        netpbm::write_pgm(&lp, 2, 2, &[0, 1, 9, 255]).unwrap();
        assert!(matches!(read_sample(&ip, &lp, 4), Err(DataError::Label(_))));
        // 255 alone is fine: it is the ignore marker.
        netpbm::write_pgm(&lp, 2, 2, &[0, 1, 3, 255]).unwrap();
        let s = read_sample(&ip, &lp, 4).unwrap();
        assert_eq!(s.labels.data()[3], IGNORE_LABEL);
    }

    #[test]
    fn forced_flip_twice_restores_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = sample_scene(&mut rng, 12, 4);
        let sample = render_scene(&scene, &mut rng);
        let cfg = AugmentConfig {
            flip_probability: 1.0,
            scale_min: 1.0,
            scale_max: 1.0,
            target_size: 12,
        };
        let once = augment(&sample, &cfg, &mut rng);
        let twice = augment(&once, &cfg, &mut rng);
        assert_eq!(twice.labels, sample.labels);
        assert_eq!(twice.image.data(), sample.image.data());
    }

    #[test]
    fn identity_augmentation_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = sample_scene(&mut rng, 12, 4);
        let sample = render_scene(&scene, &mut rng);
        let cfg = AugmentConfig {
            flip_probability: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            target_size: 12,
        };
        let out = augment(&sample, &cfg, &mut rng);
        assert_eq!(out.labels, sample.labels);
        assert_eq!(out.image.data(), sample.image.data());
    }

    #[test]
    fn image_and_labels_share_the_geometric_map() {
        // Tag every pixel with a unique label and the same value in the red
        // channel; after any augmentation the two must still agree.
        let (h, w) = (10, 10);
        let mut image = vec![0.0f32; 3 * h * w];
        let mut labels = vec![0u8; h * w];
        for p in 0..h * w {
            labels[p] = (p % 200) as u8;
            image[p] = (p % 200) as f32;
        }
        let sample = Sample {
            image: Tensor::from_vec(&[3, h, w], image).unwrap(),
            labels: LabelMap::single(h, w, labels).unwrap(),
        };
        let cfg = AugmentConfig {
            flip_probability: 0.5,
            scale_min: 0.5,
            scale_max: 1.5,
            target_size: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let out = augment(&sample, &cfg, &mut rng);
            for p in 0..8 * 8 {
                let lab = out.labels.data()[p];
                let red = out.image.data()[p];
                if lab == IGNORE_LABEL {
                    assert_eq!(red, 0.0, "padding must be zero");
                } else {
                    assert_eq!(lab as f32, red, "label and image moved differently");
                }
            }
        }
    }

    #[test]
    fn padding_carries_ignore_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = sample_scene(&mut rng, 8, 4);
        let sample = render_scene(&scene, &mut rng);
        let cfg = AugmentConfig {
            flip_probability: 0.0,
            scale_min: 0.5,
            scale_max: 0.5,
            target_size: 8,
        };
        let out = augment(&sample, &cfg, &mut rng);
        // 8 * 0.5 = 4 scaled pixels centered in 8: a 2-wide ignore ring.
        let l = out.labels.data();
        assert_eq!(l[0], IGNORE_LABEL);
        assert_eq!(l[8 * 8 - 1], IGNORE_LABEL);
        assert!(l[2 * 8 + 2] != IGNORE_LABEL);
    }
}
