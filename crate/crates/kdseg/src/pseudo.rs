//! Teacher pseudo-labels for unlabeled images.
//!
//! Each pixel gets the teacher's argmax class when the teacher's confidence
//! (max softmax probability) reaches the threshold, and the ignore label
//! otherwise. Ties break toward the lowest class index. Labels are
//! materialized to disk once; the teacher is frozen, so they never change.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{netpbm, DataError, Manifest, ManifestEntry};
use crate::losses::{LabelMap, LossError, ProbabilityMap, IGNORE_LABEL};
use crate::models::{ModelError, SegNetwork};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, PseudoError>;

/// Thresholded teacher labels for one batch of images.
#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    pub labels: LabelMap,
    pub kept_fraction: f64,
    pub threshold: f64,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PseudoError::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Threshold a probability map into labels: argmax where the max probability
/// reaches `threshold`, ignore otherwise.
pub fn pseudo_labels_from_probabilities<S: Scalar>(
    probs: &ProbabilityMap<S>,
    threshold: f64,
) -> Result<PseudoLabelBatch> {
    check_threshold(threshold)?;
    let (b, c, h, w) = probs.values().dims4().map_err(LossError::from)?;
    let plane = h * w;
    let data = probs.values().data();
    let mut labels = vec![IGNORE_LABEL; b * plane];
    let mut kept = 0usize;
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[bi * c * plane + p];
            for ch in 1..c {
                let v = data[(bi * c + ch) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            if best_v.to_f64() >= threshold {
                labels[bi * plane + p] = best as u8;
                kept += 1;
            }
        }
    }
    Ok(PseudoLabelBatch {
        labels: LabelMap::new(b, h, w, labels)?,
        kept_fraction: kept as f64 / (b * plane) as f64,
        threshold,
    })
}

/// Run the frozen teacher over a batch of images and threshold its softmax.
pub fn generate_pseudo_labels<S: Scalar>(
    teacher: &SegNetwork<S>,
    images: &Tensor<S>,
    threshold: f64,
) -> Result<PseudoLabelBatch> {
    check_threshold(threshold)?;
    let probs = teacher.forward(images)?.softmax();
    pseudo_labels_from_probabilities(&probs, threshold)
}

#[derive(Debug, Clone, Default)]
pub struct PseudoLabelStats {
    /// Kept fraction per successfully labeled image, manifest order.
    pub per_image: Vec<f64>,
    /// Kept pixels over all pixels, across successful images.
    pub aggregate_kept: f64,
    /// (manifest index, error) for entries that failed; processing continues.
    pub failures: Vec<(usize, String)>,
}

/// Pseudo-label every image of `manifest_in`, writing one PGM per image next
/// to `manifest_out` (under `pseudo/`) plus the paired manifest itself.
pub fn pseudo_label_dataset(
    teacher: &SegNetwork<f32>,
    manifest_in: &Manifest,
    manifest_out: &Path,
    threshold: f64,
) -> Result<(Manifest, PseudoLabelStats)> {
    check_threshold(threshold)?;
    let out_root = manifest_out
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let labels_dir = out_root.join("pseudo");
    std::fs::create_dir_all(&labels_dir).map_err(DataError::from)?;

    let results: Vec<(usize, std::result::Result<(ManifestEntry, f64, usize, usize), String>)> =
        (0..manifest_in.len())
            .into_par_iter()
            .map(|i| {
                let outcome = label_one(teacher, manifest_in, i, &out_root, threshold)
                    .map_err(|e| e.to_string());
                (i, outcome)
            })
            .collect();

    let mut entries = Vec::new();
    let mut stats = PseudoLabelStats::default();
    let (mut kept_total, mut pixel_total) = (0usize, 0usize);
    for (i, outcome) in results {
        match outcome {
            Ok((entry, kept_fraction, kept, pixels)) => {
                entries.push(entry);
                stats.per_image.push(kept_fraction);
                kept_total += kept;
                pixel_total += pixels;
            }
            Err(msg) => stats.failures.push((i, msg)),
        }
    }
    stats.aggregate_kept = if pixel_total == 0 {
        0.0
    } else {
        kept_total as f64 / pixel_total as f64
    };

    let manifest = Manifest::new(out_root, entries);
    manifest.save(manifest_out)?;
    Ok((manifest, stats))
}

fn label_one(
    teacher: &SegNetwork<f32>,
    manifest_in: &Manifest,
    index: usize,
    out_root: &Path,
    threshold: f64,
) -> Result<(ManifestEntry, f64, usize, usize)> {
    let image_path = manifest_in.image_path(index);
    let image = netpbm::read_ppm(&image_path)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let batched = Tensor::from_vec(&[1, 3, h, w], image.data().to_vec())
        .expect("image reshapes to a single-image batch");
    let batch = generate_pseudo_labels(teacher, &batched, threshold)?;

    let label_rel = PathBuf::from(format!("pseudo/plbl_{:05}.pgm", index));
    netpbm::write_pgm(&out_root.join(&label_rel), h, w, batch.labels.data())?;

    let image_rel = image_path
        .strip_prefix(out_root)
        .map(Path::to_path_buf)
        .unwrap_or(image_path);
    let kept = batch.labels.kept_count();
    Ok((
        ManifestEntry {
            image: image_rel,
            label: Some(label_rel),
        },
        batch.kept_fraction,
        kept,
        h * w,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LogitsMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs2(p0: f64, p1: f64) -> ProbabilityMap<f64> {
        ProbabilityMap::new(Tensor::from_vec(&[1, 2, 1, 1], vec![p0, p1]).unwrap()).unwrap()
    }

    #[test]
    fn confidence_just_below_threshold_is_ignored() {
        let batch = pseudo_labels_from_probabilities(&probs2(0.69, 0.31), 0.7).unwrap();
        assert_eq!(batch.labels.data(), &[IGNORE_LABEL]);
        assert_eq!(batch.kept_fraction, 0.0);

        let kept = pseudo_labels_from_probabilities(&probs2(0.71, 0.29), 0.7).unwrap();
        assert_eq!(kept.labels.data(), &[0]);
        assert_eq!(kept.kept_fraction, 1.0);
    }

    #[test]
    fn ties_break_to_lowest_class() {
        let batch = pseudo_labels_from_probabilities(&probs2(0.5, 0.5), 0.3).unwrap();
        assert_eq!(batch.labels.data(), &[0]);
    }

    #[test]
    fn one_hot_probabilities_keep_everything() {
        let mut data = vec![0.0f64; 3 * 4];
        // Pixel p gets probability 1 on class p mod 3.
        for p in 0..4 {
            data[(p % 3) * 4 + p] = 1.0;
        }
        let probs =
            ProbabilityMap::new(Tensor::from_vec(&[1, 3, 2, 2], data).unwrap()).unwrap();
        let batch = pseudo_labels_from_probabilities(&probs, 0.9).unwrap();
        assert_eq!(batch.kept_fraction, 1.0);
        assert_eq!(batch.labels.data(), &[0, 1, 2, 0]);
    }

    #[test]
    fn labels_and_kept_fraction_match_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = LogitsMap::new(Tensor::<f64>::rand_uniform(
            &mut rng,
            &[2, 4, 6, 6],
            -2.0,
            2.0,
        ))
        .unwrap();
        let probs = logits.softmax();
        let threshold = 0.45;
        let batch = pseudo_labels_from_probabilities(&probs, threshold).unwrap();

        let (b, c, h, w) = probs.values().dims4().unwrap();
        let plane = h * w;
        let mut kept = 0usize;
        for bi in 0..b {
            for p in 0..plane {
                let mut best = 0usize;
                for ch in 1..c {
                    if probs.values().data()[(bi * c + ch) * plane + p]
                        > probs.values().data()[(bi * c + best) * plane + p]
                    {
                        best = ch;
                    }
                }
                let max = probs.values().data()[(bi * c + best) * plane + p];
                let expect = if max >= threshold {
                    kept += 1;
                    best as u8
                } else {
                    IGNORE_LABEL
                };
                assert_eq!(batch.labels.data()[bi * plane + p], expect);
            }
        }
        assert_eq!(batch.kept_fraction, kept as f64 / (b * plane) as f64);
    }

    #[test]
    fn kept_fraction_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = LogitsMap::new(Tensor::<f64>::rand_uniform(
            &mut rng,
            &[1, 3, 8, 8],
            -3.0,
            3.0,
        ))
        .unwrap();
        let probs = logits.softmax();
        let mut last = f64::INFINITY;
        for i in 0..11 {
            let threshold = 0.05 + 0.09 * i as f64;
            let batch = pseudo_labels_from_probabilities(&probs, threshold).unwrap();
            assert!(
                batch.kept_fraction <= last,
                "kept fraction rose from {} to {} at threshold {}",
                last,
                batch.kept_fraction,
                threshold
            );
            last = batch.kept_fraction;
        }
    }

    #[test]
    fn vanishing_threshold_keeps_every_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let logits = LogitsMap::new(Tensor::<f64>::rand_uniform(
            &mut rng,
            &[1, 4, 5, 5],
            -1.0,
            1.0,
        ))
        .unwrap();
        let batch = pseudo_labels_from_probabilities(&logits.softmax(), 1e-9).unwrap();
        assert_eq!(batch.kept_fraction, 1.0);
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let p = probs2(0.5, 0.5);
        assert!(matches!(
            pseudo_labels_from_probabilities(&p, 0.0),
            Err(PseudoError::InvalidThreshold(_))
        ));
        assert!(matches!(
            pseudo_labels_from_probabilities(&p, 1.1),
            Err(PseudoError::InvalidThreshold(_))
        ));
    }
}
