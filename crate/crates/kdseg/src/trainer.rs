//! SGD-with-momentum training loops: standalone cross-entropy training,
//! distillation against a frozen teacher on labeled data, and joint
//! distillation over labeled plus pseudo-labeled unlabeled data.
//!
//! A batch loss decomposes into per-image terms (the batch normalizers are
//! known up front), so every step runs one independent tape per image in
//! parallel and merges leaf gradients in image order. That keeps runs
//! bit-for-bit deterministic for a fixed `(config, seed, manifests)` while
//! using all cores. The teacher is only ever read; when augmentation is off
//! its outputs per training image are computed once and reused across
//! epochs, which changes nothing numerically because the teacher is frozen.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{augment, read_sample, AugmentConfig, DataError, Manifest, Sample};
use crate::eval::{evaluate_on_manifest, EvalError};
use crate::losses::{
    self, LossError, LossWeights, TeacherOutputs,
};
use crate::models::{ModelError, NamedParam, SegNetwork};
use crate::pseudo::PseudoError;
use crate::tensor::tape::Tape;
use crate::tensor::{Tensor, TensorError};

const LABELED_SHUFFLE_SALT: u64 = 0x5EED_0001;
const PSEUDO_SHUFFLE_SALT: u64 = 0x5EED_0002;
const AUGMENT_SALT: u64 = 0x5EED_0003;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error("config error: {0}")]
    Config(String),
    #[error("empty manifest: {0}")]
    EmptyManifest(String),
    #[error("epoch {epoch} out of range for {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("teacher has {teacher} classes, student has {student}")]
    ClassCountMismatch { teacher: usize, student: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub pseudo_threshold: f64,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    /// Scale the merged batch gradient down to this total norm when it
    /// exceeds it. From-scratch nets at lr 0.1 see violent first-step
    /// transients; past them the clip is an exact no-op.
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 60,
            lr_initial: 0.1,
            lr_drop_epochs: vec![30, 40, 50],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weights: LossWeights::default(),
            pseudo_threshold: 0.7,
            seed: 0,
            augment: None,
            grad_clip_norm: Some(1.0),
        }
    }
}

/// Drop epochs at 1/2, 2/3 and 5/6 of the run; for 60 epochs this is the
/// default 30/40/50 schedule.
pub fn default_drop_epochs(epochs: usize) -> Vec<usize> {
    let mut drops: Vec<usize> = [epochs / 2, epochs * 2 / 3, epochs * 5 / 6]
        .into_iter()
        .filter(|&d| d > 0 && d < epochs)
        .collect();
    drops.dedup();
    drops
}

impl TrainConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            lr_drop_epochs: default_drop_epochs(epochs),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr_initial must be positive, got {}",
                self.lr_initial
            )));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        let mut last = 0usize;
        for &d in &self.lr_drop_epochs {
            if d == 0 || d <= last && last != 0 || d >= self.epochs {
                return Err(TrainError::Config(format!(
                    "drop epochs {:?} must be strictly increasing within (0, {})",
                    self.lr_drop_epochs, self.epochs
                )));
            }
            last = d;
        }
        if let Some(clip) = self.grad_clip_norm {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(TrainError::Config(format!(
                    "grad_clip_norm must be positive, got {}",
                    clip
                )));
            }
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold <= 1.0) {
            return Err(TrainError::Config(format!(
                "pseudo threshold must lie in (0, 1], got {}",
                self.pseudo_threshold
            )));
        }
        self.weights.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Learning rate for an epoch: the initial rate divided by the drop factor
/// once per passed drop epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(cfg.lr_initial / cfg.lr_drop_factor.powi(drops as i32))
}

/// Per-parameter velocity buffers for classic momentum.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocities: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn for_network(net: &SegNetwork<f32>) -> Self {
        Self::for_params(net.parameters())
    }

    pub fn for_params(params: &[NamedParam<f32>]) -> Self {
        OptimizerState {
            velocities: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }
}

/// Classic momentum update: `v = momentum * v + g; p = p - lr * v`.
pub fn sgd_step(
    params: &mut [NamedParam<f32>],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(TrainError::Config(format!(
            "optimizer saw {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    let (lr, momentum) = (lr as f32, momentum as f32);
    for ((param, grad), velocity) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        if param.tensor.numel() != grad.len() {
            return Err(TrainError::Config(format!(
                "gradient for {} has {} entries, parameter has {}",
                param.name,
                grad.len(),
                param.tensor.numel()
            )));
        }
        for ((p, g), v) in param
            .tensor
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(velocity.iter_mut())
        {
            *v = momentum * *v + *g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_seg: f64,
    pub loss_prob: f64,
    pub loss_cons: f64,
    pub loss_total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_miou: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss_seg,loss_prob,loss_cons,loss_total,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.lr, r.loss_seg, r.loss_prob, r.loss_cons, r.loss_total, r.seconds
            ));
        }
        out
    }
}

/// Plain supervised training on cross entropy alone.
pub fn train_standalone(
    net: &mut SegNetwork<f32>,
    train: &Manifest,
    val: &Manifest,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    run_training(net, None, train, None, val, cfg)
}

/// Distillation on labeled data: `L_seg + alpha * L_prob + beta * L_cons`
/// per batch, teacher frozen.
pub fn train_distill(
    student: &mut SegNetwork<f32>,
    teacher: &SegNetwork<f32>,
    train: &Manifest,
    val: &Manifest,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    run_training(student, Some(teacher), train, None, val, cfg)
}

/// Joint distillation: each step draws one labeled and one pseudo-labeled
/// batch and optimizes `L_labeled + lambda * L_unlabeled` in a single step.
pub fn train_distill_joint(
    student: &mut SegNetwork<f32>,
    teacher: &SegNetwork<f32>,
    labeled: &Manifest,
    pseudo: &Manifest,
    val: &Manifest,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if pseudo.is_empty() {
        return Err(TrainError::EmptyManifest(
            "pseudo-label manifest is empty; run pseudo-labeling first".into(),
        ));
    }
    run_training(student, Some(teacher), labeled, Some(pseudo), val, cfg)
}

// --- engine ---

struct WorkItem<'a> {
    sample: Sample,
    teacher: TeacherSource<'a>,
    ce_coeff: f64,
    lp_coeff: f64,
    lc_coeff: f64,
    labeled: bool,
}

enum TeacherSource<'a> {
    None,
    Cached(&'a TeacherOutputs<f32>),
    Fresh(&'a SegNetwork<f32>),
}

struct ItemResult {
    grads: Vec<Vec<f32>>,
    ce_mean: f64,
    lp_mean: f64,
    lc_mean: f64,
    loss: f64,
    labeled: bool,
}

fn single_batch(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    Tensor::from_vec(&[1, s[0], s[1], s[2]], image.data().to_vec())
        .expect("image reshapes to a single-image batch")
}

fn teacher_outputs_for(
    teacher: &SegNetwork<f32>,
    image: &Tensor<f32>,
) -> Result<TeacherOutputs<f32>> {
    let logits = teacher.forward(&single_batch(image))?;
    Ok(TeacherOutputs::from_logits(logits))
}

fn image_pass(student: &SegNetwork<f32>, item: &WorkItem) -> Result<ItemResult> {
    let mut tape = Tape::new();
    let images = single_batch(&item.sample.image);
    let (logits, param_ids) = student.forward_on_tape(&mut tape, &images)?;

    let teacher = match item.teacher {
        TeacherSource::None => None,
        TeacherSource::Cached(t) => Some(t.clone()),
        TeacherSource::Fresh(net) => Some(teacher_outputs_for(net, &item.sample.image)?),
    };

    let mut terms = Vec::new();
    let (mut ce_mean, mut lp_mean, mut lc_mean) = (0.0, 0.0, 0.0);
    if item.ce_coeff > 0.0 {
        let ce = losses::segmentation_loss(&mut tape, logits, &item.sample.labels)?;
        ce_mean = tape.value(ce).item()? as f64;
        terms.push(tape.scale(ce, item.ce_coeff as f32)?);
    }
    if item.lp_coeff > 0.0 {
        let teacher = teacher.as_ref().expect("lp term needs a teacher");
        let p_student = tape.softmax_channels(logits)?;
        let lp = losses::probability_loss(&mut tape, p_student, &teacher.probabilities)?;
        lp_mean = tape.value(lp).item()? as f64;
        terms.push(tape.scale(lp, item.lp_coeff as f32)?);
    }
    if item.lc_coeff > 0.0 {
        let teacher = teacher.as_ref().expect("lc term needs a teacher");
        let lc = losses::consistency_loss_with_map(&mut tape, logits, &teacher.consistency)?;
        lc_mean = tape.value(lc).item()? as f64;
        terms.push(tape.scale(lc, item.lc_coeff as f32)?);
    }

    let mut terms = terms.into_iter();
    let first = terms.next().expect("work items carry at least one loss term");
    let loss = terms.try_fold(first, |acc, t| tape.add(acc, t))?;
    let loss_value = tape.value(loss).item()? as f64;
    tape.backward(loss)?;

    let grads = param_ids
        .iter()
        .map(|id| tape.grad(*id).expect("parameter gradient").to_vec())
        .collect();
    Ok(ItemResult {
        grads,
        ce_mean,
        lp_mean,
        lc_mean,
        loss: loss_value,
        labeled: item.labeled,
    })
}

fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter().map(|v| *v as f64 * *v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Cycles a shuffled index stream, reshuffling whenever it runs dry.
struct CyclingSampler {
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl CyclingSampler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        CyclingSampler {
            order: (0..len).collect(),
            at: len, // force a shuffle on first draw
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.at >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.at = 0;
            }
            batch.push(self.order[self.at]);
            self.at += 1;
        }
        batch
    }
}

fn augment_rng(seed: u64, epoch: usize, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ AUGMENT_SALT.wrapping_mul(0x2545_F491_4F6C_DD1D)
            ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ slot.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

fn load_labeled_set(manifest: &Manifest, num_classes: usize, what: &str) -> Result<Vec<Sample>> {
    if manifest.is_empty() {
        return Err(TrainError::EmptyManifest(what.into()));
    }
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let label_path = manifest.label_path(i).ok_or_else(|| {
                DataError::Manifest(format!("{}: entry {} has no label", what, i))
            })?;
            Ok(read_sample(&manifest.image_path(i), &label_path, num_classes)?)
        })
        .collect()
}

fn run_training(
    student: &mut SegNetwork<f32>,
    teacher: Option<&SegNetwork<f32>>,
    labeled: &Manifest,
    pseudo: Option<&Manifest>,
    val: &Manifest,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let num_classes = student.config().num_classes;
    if let Some(t) = teacher {
        if t.config().num_classes != num_classes {
            return Err(TrainError::ClassCountMismatch {
                teacher: t.config().num_classes,
                student: num_classes,
            });
        }
    }

    let weights = cfg.weights;
    let distilling = teacher.is_some() && (weights.alpha > 0.0 || weights.beta > 0.0);
    // With lambda = 0 the unlabeled branch contributes nothing; skip it so
    // the run is bit-identical to labeled-only distillation.
    let joint = teacher.is_some() && pseudo.is_some() && weights.lambda > 0.0;

    let labeled_samples = load_labeled_set(labeled, num_classes, "training manifest")?;
    let pseudo_samples = if joint {
        load_labeled_set(pseudo.expect("joint implies pseudo"), num_classes, "pseudo manifest")?
    } else {
        Vec::new()
    };

    // Frozen teacher + fixed inputs: teacher outputs per image are constant
    // across epochs, so compute them once. Augmentation changes the inputs
    // every step, so it forces fresh teacher passes instead.
    let want_teacher = distilling || joint;
    let cache_teacher = want_teacher && cfg.augment.is_none();
    let (labeled_teacher, pseudo_teacher) = if cache_teacher {
        let t = teacher.expect("teacher present");
        let lt = labeled_samples
            .par_iter()
            .map(|s| teacher_outputs_for(t, &s.image))
            .collect::<Result<Vec<_>>>()?;
        let pt = pseudo_samples
            .par_iter()
            .map(|s| teacher_outputs_for(t, &s.image))
            .collect::<Result<Vec<_>>>()?;
        (lt, pt)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut state = OptimizerState::for_network(student);
    let mut labeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LABELED_SHUFFLE_SALT);
    let mut pseudo_stream = joint.then(|| {
        CyclingSampler::new(
            pseudo_samples.len(),
            ChaCha8Rng::seed_from_u64(cfg.seed ^ PSEUDO_SHUFFLE_SALT),
        )
    });

    let teacher_source = |dataset_index: usize, labeled_side: bool| -> TeacherSource<'_> {
        if !want_teacher {
            return TeacherSource::None;
        }
        if cache_teacher {
            let cache = if labeled_side {
                &labeled_teacher
            } else {
                &pseudo_teacher
            };
            TeacherSource::Cached(&cache[dataset_index])
        } else {
            TeacherSource::Fresh(teacher.expect("teacher present"))
        }
    };

    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg)?;

        let mut order: Vec<usize> = (0..labeled_samples.len()).collect();
        order.shuffle(&mut labeled_rng);

        let mut sums = [0.0f64; 4]; // seg, prob, cons, total
        let mut steps = 0usize;
        let mut slot = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = cfg.batch_size.min(chunk.len());
            let mut items: Vec<WorkItem> = Vec::with_capacity(2 * batch);

            // Labeled side.
            let mut labeled_batch: Vec<(usize, Sample)> = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = match &cfg.augment {
                    Some(acfg) => {
                        let mut rng = augment_rng(cfg.seed, epoch, slot);
                        slot += 1;
                        augment(&labeled_samples[idx], acfg, &mut rng)
                    }
                    None => labeled_samples[idx].clone(),
                };
                labeled_batch.push((idx, sample));
            }
            let total_kept: usize = labeled_batch
                .iter()
                .map(|(_, s)| s.labels.kept_count())
                .sum();
            if total_kept == 0 {
                return Err(TrainError::Loss(LossError::AllIgnored));
            }
            let b_l = labeled_batch.len() as f64;
            for (idx, sample) in labeled_batch {
                let kept = sample.labels.kept_count();
                items.push(WorkItem {
                    teacher: if distilling {
                        teacher_source(idx, true)
                    } else {
                        TeacherSource::None
                    },
                    ce_coeff: kept as f64 / total_kept as f64,
                    lp_coeff: if distilling { weights.alpha / b_l } else { 0.0 },
                    lc_coeff: if distilling { weights.beta / b_l } else { 0.0 },
                    labeled: true,
                    sample,
                });
            }

            // Unlabeled side, one pseudo batch per labeled batch.
            if let Some(stream) = pseudo_stream.as_mut() {
                let pseudo_chunk = stream.next_batch(batch);
                let mut pseudo_batch: Vec<(usize, Sample)> = Vec::with_capacity(batch);
                for idx in pseudo_chunk {
                    let sample = match &cfg.augment {
                        Some(acfg) => {
                            let mut rng = augment_rng(cfg.seed, epoch, u64::MAX / 2 + slot);
                            slot += 1;
                            augment(&pseudo_samples[idx], acfg, &mut rng)
                        }
                        None => pseudo_samples[idx].clone(),
                    };
                    pseudo_batch.push((idx, sample));
                }
                let total_kept_u: usize = pseudo_batch
                    .iter()
                    .map(|(_, s)| s.labels.kept_count())
                    .sum();
                let b_u = pseudo_batch.len() as f64;
                for (idx, sample) in pseudo_batch {
                    let kept = sample.labels.kept_count();
                    // An all-ignored pseudo image contributes no cross
                    // entropy; its probability/consistency terms still count.
                    let ce_coeff = if total_kept_u == 0 {
                        0.0
                    } else {
                        weights.lambda * kept as f64 / total_kept_u as f64
                    };
                    let lp_coeff = weights.lambda * weights.alpha / b_u;
                    let lc_coeff = weights.lambda * weights.beta / b_u;
                    if ce_coeff == 0.0 && lp_coeff == 0.0 && lc_coeff == 0.0 {
                        continue;
                    }
                    items.push(WorkItem {
                        teacher: teacher_source(idx, false),
                        ce_coeff,
                        lp_coeff,
                        lc_coeff,
                        labeled: false,
                        sample,
                    });
                }
            }

            // One tape per image, merged in item order for determinism.
            let results: Vec<ItemResult> = items
                .par_iter()
                .map(|item| image_pass(student, item))
                .collect::<Result<Vec<_>>>()?;

            let mut grads: Vec<Vec<f32>> = student
                .parameters()
                .iter()
                .map(|p| vec![0.0f32; p.tensor.numel()])
                .collect();
            let labeled_count = items.iter().filter(|i| i.labeled).count() as f64;
            let mut batch_stats = [0.0f64; 4];
            for (item, result) in items.iter().zip(&results) {
                for (acc, g) in grads.iter_mut().zip(&result.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += *v;
                    }
                }
                if result.labeled {
                    batch_stats[0] += item.ce_coeff * result.ce_mean;
                    batch_stats[1] += result.lp_mean / labeled_count;
                    batch_stats[2] += result.lc_mean / labeled_count;
                }
                batch_stats[3] += result.loss;
            }
            if let Some(max_norm) = cfg.grad_clip_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            sgd_step(student.parameters_mut(), &grads, &mut state, lr, cfg.momentum)?;

            for (s, b) in sums.iter_mut().zip(batch_stats) {
                *s += b;
            }
            steps += 1;
        }

        let inv = 1.0 / steps.max(1) as f64;
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            loss_seg: sums[0] * inv,
            loss_prob: sums[1] * inv,
            loss_cons: sums[2] * inv,
            loss_total: sums[3] * inv,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let (_, score, _) = evaluate_on_manifest(student, val, num_classes)?;
    report.final_miou = Some(score.miou);
    Ok(report)
}
