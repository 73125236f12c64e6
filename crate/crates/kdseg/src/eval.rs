//! Segmentation metrics (per-class IoU, mIoU, pixel accuracy) and a
//! single-threaded inference throughput benchmark.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{read_sample, DataError, Manifest};
use crate::losses::{LabelMap, IGNORE_LABEL};
use crate::models::{ModelError, SegNetwork};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension error: {0}")]
    ShapeMismatch(String),
    #[error("undefined metric: no evaluated pixels")]
    EmptyMatrix,
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `counts[gt][pred]` over evaluated (non-ignored ground truth) pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one count per non-ignored ground-truth pixel.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(EvalError::ShapeMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= self.num_classes || p as usize >= self.num_classes {
                return Err(EvalError::ShapeMismatch(format!(
                    "label pair (gt {}, pred {}) outside {} classes",
                    g, p, self.num_classes
                )));
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct MiouResult {
    /// IoU per class; `None` marks classes with zero union (excluded).
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class IoU `tp / (tp + fp + fn)`, averaged over classes that appear.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouResult> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let n = cm.num_classes();
    let mut per_class = Vec::with_capacity(n);
    let (mut sum, mut used) = (0.0, 0usize);
    for k in 0..n {
        let tp = cm.count(k, k);
        let row: u64 = (0..n).map(|p| cm.count(k, p)).sum();
        let col: u64 = (0..n).map(|g| cm.count(g, k)).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            used += 1;
        }
    }
    Ok(MiouResult {
        per_class,
        miou: sum / used as f64,
    })
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let diag: u64 = (0..cm.num_classes()).map(|k| cm.count(k, k)).sum();
    Ok(diag as f64 / total as f64)
}

/// Argmax prediction map of a network over a batch; ties break low.
pub fn predict_labels<S: Scalar>(net: &SegNetwork<S>, images: &Tensor<S>) -> Result<LabelMap> {
    let logits = net.forward(images)?;
    let (b, c, h, w) = logits.values().dims4().map_err(ModelError::from)?;
    let plane = h * w;
    let data = logits.values().data();
    let mut labels = vec![0u8; b * plane];
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
            labels[bi * plane + p] = best as u8;
        }
    }
    Ok(LabelMap::new(b, h, w, labels).expect("prediction shape"))
}

/// Evaluate a network over a labeled manifest at native image size.
pub fn evaluate_on_manifest<S: Scalar>(
    net: &SegNetwork<S>,
    manifest: &Manifest,
    num_classes: usize,
) -> Result<(ConfusionMatrix, MiouResult, f64)> {
    let locals: Vec<Result<ConfusionMatrix>> = (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let label_path = manifest.label_path(i).ok_or_else(|| {
                DataError::Manifest(format!("entry {} has no label to evaluate against", i))
            })?;
            let sample = read_sample(&manifest.image_path(i), &label_path, num_classes)?;
            let (h, w) = sample.size();
            let batched = Tensor::from_vec(&[1, 3, h, w], sample.image.data().to_vec())
                .expect("image reshapes to a single-image batch");
            let batched = batched.cast::<S>();
            let pred = predict_labels(net, &batched)?;
            let mut cm = ConfusionMatrix::new(num_classes);
            cm.accumulate(&pred, &sample.labels)?;
            Ok(cm)
        })
        .collect();

    let mut cm = ConfusionMatrix::new(num_classes);
    for local in locals {
        cm.merge(&local?);
    }
    let score = miou(&cm)?;
    let acc = pixel_accuracy(&cm)?;
    Ok((cm, score, acc))
}

#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub images_per_second: f64,
    pub input_size: (usize, usize),
    pub iterations: usize,
    pub warmup: usize,
}

/// Forward-only single-thread throughput on a fixed random input.
pub fn benchmark(
    net: &SegNetwork<f32>,
    input_size: (usize, usize),
    iterations: usize,
    warmup: usize,
) -> Result<BenchResult> {
    if iterations == 0 {
        return Err(EvalError::Usage("benchmark needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C);
    let input = Tensor::<f32>::rand_uniform(
        &mut rng,
        &[1, net.config().input_channels, input_size.0, input_size.1],
        0.0,
        1.0,
    );
    for _ in 0..warmup {
        net.forward(&input)?;
    }
    let start = Instant::now();
    for _ in 0..iterations {
        net.forward(&input)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(BenchResult {
        images_per_second: iterations as f64 / secs,
        input_size,
        iterations,
        warmup,
    })
}

/// Two-column CSV: per-class IoU rows, then mIoU, pixel accuracy and
/// optionally FPS summary lines.
pub fn report_csv(score: &MiouResult, accuracy: f64, fps: Option<f64>) -> String {
    let mut out = String::from("metric,value\n");
    for (k, iou) in score.per_class.iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("class_iou_{},{:.6}\n", k, v)),
            None => out.push_str(&format!("class_iou_{},excluded\n", k)),
        }
    }
    out.push_str(&format!("miou,{:.6}\n", score.miou));
    out.push_str(&format!("pixel_accuracy,{:.6}\n", accuracy));
    if let Some(fps) = fps {
        out.push_str(&format!("fps,{:.3}\n", fps));
    }
    out
}
