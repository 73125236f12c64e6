//! Loss terms for teacher-student segmentation training.
//!
//! The student trains on `L = L_seg + r(S,T)` where the knowledge bias
//! `r(S,T) = alpha * L_prob + beta * L_cons` compares the student's per-pixel
//! class probabilities and its logit consistency map against a frozen
//! teacher's. With unlabeled data the joint objective adds a second term of
//! the same form, weighted by `lambda`, whose ground truth comes from
//! teacher pseudo-labels.
//!
//! `L_prob` and `L_cons` are normalized by the pixel count `B*H*W` so their
//! magnitudes are resolution-independent; the raw-sum formulation is
//! recoverable by rescaling `alpha` and `beta`. `L_prob` compares
//! post-softmax probabilities while the consistency map is built from raw
//! logits. Teacher tensors enter the tape as constants, so no gradient can
//! reach teacher parameters.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError};

/// Reserved label value excluding a pixel from cross-entropy and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate batch: every pixel carries the ignore label")]
    AllIgnored,
    #[error("label error: label {label} out of range for {classes} classes")]
    InvalidLabel { label: u8, classes: usize },
    #[error("dimension error: {0}")]
    ShapeMismatch(String),
    #[error("lambda must be non-negative and finite, got {0}")]
    InvalidLambda(f64),
    #[error("loss weights must be non-negative and finite: {0}")]
    InvalidWeight(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Per-pixel class indices in `[0, n)` plus [`IGNORE_LABEL`], `[B, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(LossError::ShapeMismatch(format!(
                "label buffer holds {} entries for {}x{}x{}",
                data.len(),
                batch,
                height,
                width
            )));
        }
        Ok(LabelMap {
            batch,
            height,
            width,
            data,
        })
    }

    /// Single-image label map, batch size 1.
    pub fn single(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            batch,
            height,
            width,
            data: vec![value; batch * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Number of pixels not carrying the ignore label.
    pub fn kept_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE_LABEL).count()
    }

    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        for &v in &self.data {
            if v != IGNORE_LABEL && v as usize >= num_classes {
                return Err(LossError::InvalidLabel {
                    label: v,
                    classes: num_classes,
                });
            }
        }
        Ok(())
    }

    /// Concatenate single-image maps into one batch.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let (b0, h, w) = maps
            .first()
            .map(|m| m.dims())
            .ok_or_else(|| LossError::ShapeMismatch("stack of zero label maps".into()))?;
        debug_assert_eq!(b0, 1);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.dims() != (1, h, w) {
                return Err(LossError::ShapeMismatch(format!(
                    "label map {:?} differs from (1, {}, {})",
                    m.dims(),
                    h,
                    w
                )));
            }
            data.extend_from_slice(m.data());
        }
        LabelMap::new(maps.len(), h, w, data)
    }
}

/// Pre-softmax per-pixel class scores, `[B, n, H, W]`.
#[derive(Debug, Clone)]
pub struct LogitsMap<S = f32>(Tensor<S>);

impl<S: Scalar> LogitsMap<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        values.dims4()?;
        values.check_finite("logits")?;
        Ok(LogitsMap(values))
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_values(self) -> Tensor<S> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn softmax(&self) -> ProbabilityMap<S> {
        ProbabilityMap(
            kernels::softmax_channels_forward(&self.0).expect("finite logits have a softmax"),
        )
    }

    pub fn consistency(&self) -> ConsistencyMap<S> {
        ConsistencyMap(kernels::consistency_forward(&self.0).expect("logits are 4-d"))
    }
}

/// Post-softmax per-pixel class probabilities, `[B, n, H, W]`.
#[derive(Debug, Clone)]
pub struct ProbabilityMap<S = f32>(Tensor<S>);

impl<S: Scalar> ProbabilityMap<S> {
    /// Wrap a probability tensor, checking that every per-pixel class vector
    /// sums to one (within 1e-6) with entries in `[0, 1]`.
    pub fn new(values: Tensor<S>) -> Result<Self> {
        let (b, c, h, w) = values.dims4()?;
        let plane = h * w;
        for bi in 0..b {
            for p in 0..plane {
                let mut total = 0.0f64;
                for ch in 0..c {
                    let v = values.data()[(bi * c + ch) * plane + p].to_f64();
                    if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                        return Err(LossError::ShapeMismatch(format!(
                            "probability {} outside [0, 1]",
                            v
                        )));
                    }
                    total += v;
                }
                if (total - 1.0).abs() > 1e-6 {
                    return Err(LossError::ShapeMismatch(format!(
                        "per-pixel probabilities sum to {}",
                        total
                    )));
                }
            }
        }
        Ok(ProbabilityMap(values))
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.0
    }
}

/// Per-pixel 8-neighbor squared logit difference field, `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct ConsistencyMap<S = f32>(Tensor<S>);

impl<S: Scalar> ConsistencyMap<S> {
    pub fn values(&self) -> &Tensor<S> {
        &self.0
    }
}

/// Consistency map of a logits tensor, no gradient tracking.
pub fn consistency_map<S: Scalar>(logits: &LogitsMap<S>) -> ConsistencyMap<S> {
    logits.consistency()
}

/// Weights of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 4.0,
            beta: 0.4,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidWeight(format!("{} = {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Everything the losses need from a frozen teacher forward pass.
#[derive(Debug, Clone)]
pub struct TeacherOutputs<S = f32> {
    pub logits: LogitsMap<S>,
    pub probabilities: ProbabilityMap<S>,
    pub consistency: ConsistencyMap<S>,
}

impl<S: Scalar> TeacherOutputs<S> {
    pub fn from_logits(logits: LogitsMap<S>) -> Self {
        let probabilities = logits.softmax();
        let consistency = logits.consistency();
        TeacherOutputs {
            logits,
            probabilities,
            consistency,
        }
    }
}

fn check_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "{}: {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over non-ignored pixels of the cross entropy between the student's
/// softmax and the label.
pub fn segmentation_loss<S: Scalar>(
    tape: &mut Tape<S>,
    student_logits: TensorId,
    labels: &LabelMap,
) -> Result<TensorId> {
    let (b, n, h, w) = tape.value(student_logits).dims4()?;
    if labels.dims() != (b, h, w) {
        return Err(LossError::ShapeMismatch(format!(
            "labels {:?} vs logits batch ({}, {}, {})",
            labels.dims(),
            b,
            h,
            w
        )));
    }
    labels.validate_classes(n)?;
    let kept = labels.kept_count();
    if kept == 0 {
        return Err(LossError::AllIgnored);
    }
    let ce_sum = tape.cross_entropy_sum(student_logits, labels.data(), IGNORE_LABEL)?;
    Ok(tape.scale(ce_sum, S::from_f64(1.0 / kept as f64))?)
}

/// Mean over pixels of the squared distance between student and teacher
/// per-pixel probability vectors. The teacher side is a detached constant.
pub fn probability_loss<S: Scalar>(
    tape: &mut Tape<S>,
    p_student: TensorId,
    p_teacher: &ProbabilityMap<S>,
) -> Result<TensorId> {
    check_same_shape(tape.value(p_student), p_teacher.values(), "probability maps")?;
    let (b, _, h, w) = p_teacher.values().dims4()?;
    let teacher = tape.constant(p_teacher.values().clone());
    let diff = tape.sub(p_student, teacher)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, S::from_f64(1.0 / (b * h * w) as f64))?)
}

/// Mean over pixels of the squared difference between the student's and the
/// teacher's consistency maps, the teacher map precomputed and detached.
///
/// The mean is additionally divided by `1 + mean(c_T^2)`, a constant of the
/// frozen teacher. Consistency values grow quadratically with logit scale
/// and their squared differences quartically, so without this factor the
/// weighted term sits orders of magnitude above the cross entropy and blows
/// up training; the teacher-side normalizer pins it to the same order at
/// any logit scale. It is shift-invariant and carries no gradient.
pub fn consistency_loss_with_map<S: Scalar>(
    tape: &mut Tape<S>,
    student_logits: TensorId,
    teacher_map: &ConsistencyMap<S>,
) -> Result<TensorId> {
    let c_student = tape.consistency_map(student_logits)?;
    check_same_shape(tape.value(c_student), teacher_map.values(), "consistency maps")?;
    let (b, _, h, w) = teacher_map.values().dims4()?;
    let teacher_scale = 1.0 + teacher_squared_mean(teacher_map);
    let teacher = tape.constant(teacher_map.values().clone());
    let diff = tape.sub(c_student, teacher)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(
        total,
        S::from_f64(1.0 / ((b * h * w) as f64 * teacher_scale)),
    )?)
}

/// Mean squared teacher-consistency value, accumulated in flat-buffer order.
pub fn teacher_squared_mean<S: Scalar>(teacher_map: &ConsistencyMap<S>) -> f64 {
    let data = teacher_map.values().data();
    let mut acc = 0.0f64;
    for v in data {
        let v = v.to_f64();
        acc += v * v;
    }
    acc / data.len() as f64
}

/// Consistency loss from raw teacher logits.
pub fn consistency_loss<S: Scalar>(
    tape: &mut Tape<S>,
    student_logits: TensorId,
    teacher_logits: &LogitsMap<S>,
) -> Result<TensorId> {
    check_same_shape(tape.value(student_logits), teacher_logits.values(), "logit maps")?;
    consistency_loss_with_map(tape, student_logits, &teacher_logits.consistency())
}

/// Knowledge bias `r(S,T) = alpha * L_prob + beta * L_cons`.
///
/// Zero-weighted terms are skipped entirely, so `alpha = beta = 0` yields an
/// exact zero without touching the teacher.
pub fn knowledge_bias<S: Scalar>(
    tape: &mut Tape<S>,
    p_student: TensorId,
    student_logits: TensorId,
    teacher: &TeacherOutputs<S>,
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    let mut total: Option<TensorId> = None;
    if weights.alpha > 0.0 {
        let lp = probability_loss(tape, p_student, &teacher.probabilities)?;
        total = Some(tape.scale(lp, S::from_f64(weights.alpha))?);
    }
    if weights.beta > 0.0 {
        let lc = consistency_loss_with_map(tape, student_logits, &teacher.consistency)?;
        let scaled = tape.scale(lc, S::from_f64(weights.beta))?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.leaf(Tensor::scalar(S::ZERO)),
    })
}

/// Full labeled objective `L_seg + r(S,T)`.
///
/// With `alpha = beta = 0` this returns the segmentation loss node itself,
/// so plain supervised training is the exact reduction.
pub fn total_loss_labeled<S: Scalar>(
    tape: &mut Tape<S>,
    student_logits: TensorId,
    teacher: &TeacherOutputs<S>,
    labels: &LabelMap,
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    let ce = segmentation_loss(tape, student_logits, labels)?;
    if weights.alpha == 0.0 && weights.beta == 0.0 {
        return Ok(ce);
    }
    let p_student = tape.softmax_channels(student_logits)?;
    let bias = knowledge_bias(tape, p_student, student_logits, teacher, weights)?;
    Ok(tape.add(ce, bias)?)
}

/// Joint objective `L_labeled + lambda * L_unlabeled`.
pub fn total_loss_joint<S: Scalar>(
    tape: &mut Tape<S>,
    labeled_term: TensorId,
    unlabeled_term: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(LossError::InvalidLambda(lambda));
    }
    if lambda == 0.0 {
        return Ok(labeled_term);
    }
    let scaled = tape.scale(unlabeled_term, S::from_f64(lambda))?;
    Ok(tape.add(labeled_term, scaled)?)
}

/// Loss values without gradient tracking, for reporting and tests.
pub mod value {
    use super::*;

    pub fn segmentation<S: Scalar>(logits: &LogitsMap<S>, labels: &LabelMap) -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.constant(logits.values().clone());
        let loss = segmentation_loss(&mut tape, id, labels)?;
        Ok(tape.value(loss).item()?.to_f64())
    }

    pub fn probability<S: Scalar>(
        p_student: &ProbabilityMap<S>,
        p_teacher: &ProbabilityMap<S>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.constant(p_student.values().clone());
        let loss = probability_loss(&mut tape, id, p_teacher)?;
        Ok(tape.value(loss).item()?.to_f64())
    }

    pub fn consistency<S: Scalar>(
        l_student: &LogitsMap<S>,
        l_teacher: &LogitsMap<S>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.constant(l_student.values().clone());
        let loss = consistency_loss(&mut tape, id, l_teacher)?;
        Ok(tape.value(loss).item()?.to_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits4(b: usize, n: usize, h: usize, w: usize, data: Vec<f64>) -> LogitsMap<f64> {
        LogitsMap::new(Tensor::from_vec(&[b, n, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln_n() {
        // All-zero logits over 4 classes: -log(1/4) per pixel.
        let logits = logits4(1, 4, 2, 2, vec![0.0; 16]);
        let labels = LabelMap::single(2, 2, vec![0, 1, 2, 3]).unwrap();
        let loss = value::segmentation(&logits, &labels).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9, "loss = {}", loss);
    }

    #[test]
    fn confident_correct_logits_cost_nearly_zero() {
        let mut data = vec![0.0; 2 * 2 * 2];
        // Class 0 logit 30 everywhere, class 1 logit 0 -> prob ~ 1.0.
        for p in 0..4 {
            data[p] = 30.0;
        }
        let logits = logits4(1, 2, 2, 2, data);
        let labels = LabelMap::single(2, 2, vec![0; 4]).unwrap();
        let loss = value::segmentation(&logits, &labels).unwrap();
        assert!(loss < 1e-9, "loss = {}", loss);
    }

    #[test]
    fn segmentation_loss_matches_scalar_oracle_with_ignored_pixels() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (b, n, h, w) = (2, 4, 5, 5);
        let t = Tensor::<f64>::rand_uniform(&mut rng, &[b, n, h, w], -2.0, 2.0);
        let mut labels = vec![0u8; b * h * w];
        for l in labels.iter_mut() {
            *l = if rng.random::<f64>() < 0.3 {
                IGNORE_LABEL
            } else {
                rng.random_range(0..n as u8)
            };
        }
        let logits = LogitsMap::new(t.clone()).unwrap();
        let map = LabelMap::new(b, h, w, labels.clone()).unwrap();
        let got = value::segmentation(&logits, &map).unwrap();

        // Scalar oracle: plain exp/sum softmax and -ln(p) over kept pixels.
        let plane = h * w;
        let mut total = 0.0;
        let mut kept = 0usize;
        for bi in 0..b {
            for p in 0..plane {
                let lab = labels[bi * plane + p];
                if lab == IGNORE_LABEL {
                    continue;
                }
                let denom: f64 = (0..n)
                    .map(|c| t.data()[(bi * n + c) * plane + p].exp())
                    .sum();
                let prob = t.data()[(bi * n + lab as usize) * plane + p].exp() / denom;
                total += -prob.ln();
                kept += 1;
            }
        }
        assert!((got - total / kept as f64).abs() < 1e-5, "{} vs oracle", got);
    }

    #[test]
    fn all_ignored_batch_is_rejected() {
        let logits = logits4(1, 2, 2, 2, vec![0.0; 8]);
        let labels = LabelMap::filled(1, 2, 2, IGNORE_LABEL);
        let mut tape = Tape::new();
        let id = tape.constant(logits.values().clone());
        let err = segmentation_loss(&mut tape, id, &labels).unwrap_err();
        assert!(matches!(err, LossError::AllIgnored));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = logits4(1, 2, 1, 2, vec![0.0; 4]);
        let labels = LabelMap::single(1, 2, vec![0, 2]).unwrap();
        let mut tape = Tape::new();
        let id = tape.constant(logits.values().clone());
        let err = segmentation_loss(&mut tape, id, &labels).unwrap_err();
        assert!(matches!(err, LossError::InvalidLabel { label: 2, .. }));
    }

    #[test]
    fn probability_loss_zero_on_identical_maps() {
        let logits = logits4(1, 3, 2, 2, (0..12).map(|v| v as f64 * 0.1).collect());
        let p = logits.softmax();
        assert_eq!(value::probability(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn probability_loss_opposite_one_hots() {
        // One pixel, two classes, (1,0) vs (0,1): squared distance 2.
        let ps = ProbabilityMap::new(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let pt = ProbabilityMap::new(Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap())
            .unwrap();
        assert_eq!(value::probability(&ps, &pt).unwrap(), 2.0);
    }

    #[test]
    fn probability_loss_shape_mismatch() {
        let a = logits4(1, 2, 2, 2, vec![0.0; 8]).softmax();
        let b = logits4(1, 2, 1, 2, vec![0.0; 4]).softmax();
        let mut tape = Tape::<f64>::new();
        let id = tape.constant(a.values().clone());
        let err = probability_loss(&mut tape, id, &b).unwrap_err();
        assert!(matches!(err, LossError::ShapeMismatch(_)));
    }

    #[test]
    fn consistency_map_zero_on_constant_logits() {
        let logits = logits4(1, 3, 4, 4, vec![0.7; 48]);
        let c = consistency_map(&logits);
        assert!(c.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn consistency_map_two_pixel_border_case() {
        // A 1x2 image with scalar logits 0 and 1: each pixel has exactly one
        // valid neighbor, so both consistency values are 1.
        let logits = LogitsMap::new(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let c = consistency_map(&logits);
        assert_eq!(c.values().data(), &[1.0, 1.0]);
    }

    #[test]
    fn consistency_map_matches_brute_force() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (b, n, h, w) = (1, 3, 5, 5);
        let t = Tensor::<f64>::rand_uniform(&mut rng, &[b, n, h, w], -2.0, 2.0);
        let got = consistency_map(&LogitsMap::new(t.clone()).unwrap());

        let plane = h * w;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y + dy as isize, x + dx as isize);
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            continue;
                        }
                        for c in 0..n {
                            let a = t.data()[c * plane + (ny * w as isize + nx) as usize];
                            let bq = t.data()[c * plane + (y * w as isize + x) as usize];
                            acc += (a - bq) * (a - bq);
                        }
                    }
                }
                let gv = got.values().data()[(y * w as isize + x) as usize];
                assert!((gv - acc).abs() < 1e-9, "pixel ({}, {})", y, x);
            }
        }
    }

    #[test]
    fn consistency_loss_zero_on_identical_and_shifted_maps() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::<f64>::rand_uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let teacher = LogitsMap::new(t.clone()).unwrap();
        assert_eq!(value::consistency(&teacher, &teacher).unwrap(), 0.0);

        // Adding one constant per channel to every pixel leaves the
        // neighborhood differences unchanged.
        let mut shifted = t.clone();
        let plane = 16;
        for c in 0..2 {
            let offset = if c == 0 { 1.25 } else { -0.5 };
            for p in 0..plane {
                shifted.data_mut()[c * plane + p] += offset;
            }
        }
        let student = LogitsMap::new(shifted).unwrap();
        let loss = value::consistency(&student, &teacher).unwrap();
        assert!(loss.abs() < 1e-9, "loss = {}", loss);
    }

    #[test]
    fn knowledge_bias_zero_weights_give_exact_zero() {
        let logits = logits4(1, 2, 2, 2, (0..8).map(|v| v as f64 * 0.3).collect());
        let teacher = TeacherOutputs::from_logits(logits4(1, 2, 2, 2, vec![1.0; 8]));
        let weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
        };
        let mut tape = Tape::new();
        let l = tape.constant(logits.values().clone());
        let p = tape.softmax_channels(l).unwrap();
        let bias = knowledge_bias(&mut tape, p, l, &teacher, &weights).unwrap();
        assert_eq!(tape.value(bias).item().unwrap(), 0.0);
    }

    #[test]
    fn knowledge_bias_alpha_one_equals_probability_loss() {
        let student = logits4(1, 2, 2, 2, (0..8).map(|v| v as f64 * 0.3 - 1.0).collect());
        let teacher_logits = logits4(1, 2, 2, 2, (0..8).map(|v| -(v as f64) * 0.2).collect());
        let teacher = TeacherOutputs::from_logits(teacher_logits);
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            lambda: 0.0,
        };
        let mut tape = Tape::new();
        let l = tape.constant(student.values().clone());
        let p = tape.softmax_channels(l).unwrap();
        let bias = knowledge_bias(&mut tape, p, l, &teacher, &weights).unwrap();
        let expect = value::probability(&student.softmax(), &teacher.probabilities).unwrap();
        assert_eq!(tape.value(bias).item().unwrap(), expect);
    }

    #[test]
    fn total_labeled_decomposes_into_terms() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let s = Tensor::<f64>::rand_uniform(&mut rng, &[1, 3, 4, 4], -1.5, 1.5);
        let t = Tensor::<f64>::rand_uniform(&mut rng, &[1, 3, 4, 4], -1.5, 1.5);
        let labels = LabelMap::single(4, 4, (0..16).map(|v| (v % 3) as u8).collect()).unwrap();
        let student = LogitsMap::new(s.clone()).unwrap();
        let teacher = TeacherOutputs::from_logits(LogitsMap::new(t.clone()).unwrap());
        let weights = LossWeights::default();

        let mut tape = Tape::new();
        let l = tape.constant(s.clone());
        let total = total_loss_labeled(&mut tape, l, &teacher, &labels, &weights).unwrap();
        let got = tape.value(total).item().unwrap();

        let ce = value::segmentation(&student, &labels).unwrap();
        let lp = value::probability(&student.softmax(), &teacher.probabilities).unwrap();
        let lc = value::consistency(&student, &teacher.logits).unwrap();
        let expect = ce + weights.alpha * lp + weights.beta * lc;
        assert!((got - expect).abs() < 1e-6, "{} vs {}", got, expect);
    }

    #[test]
    fn total_labeled_with_zero_weights_is_segmentation_loss() {
        let s = logits4(1, 2, 2, 2, (0..8).map(|v| v as f64 * 0.4).collect());
        let labels = LabelMap::single(2, 2, vec![0, 1, 0, 1]).unwrap();
        let teacher = TeacherOutputs::from_logits(logits4(1, 2, 2, 2, vec![0.0; 8]));
        let weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
        };
        let mut tape = Tape::new();
        let l = tape.constant(s.values().clone());
        let total = total_loss_labeled(&mut tape, l, &teacher, &labels, &weights).unwrap();
        let ce = value::segmentation(&s, &labels).unwrap();
        assert_eq!(tape.value(total).item().unwrap(), ce);
    }

    #[test]
    fn identical_teacher_and_student_leave_only_segmentation_loss() {
        let s = logits4(1, 2, 2, 2, (0..8).map(|v| v as f64 * 0.4 - 1.0).collect());
        let labels = LabelMap::single(2, 2, vec![0, 1, 0, 1]).unwrap();
        let teacher = TeacherOutputs::from_logits(s.clone());
        let mut tape = Tape::new();
        let l = tape.constant(s.values().clone());
        let total =
            total_loss_labeled(&mut tape, l, &teacher, &labels, &LossWeights::default()).unwrap();
        let ce = value::segmentation(&s, &labels).unwrap();
        assert_eq!(tape.value(total).item().unwrap(), ce);
    }

    #[test]
    fn joint_loss_reduces_and_combines() {
        let mut tape = Tape::<f64>::new();
        let labeled = tape.leaf(Tensor::scalar(1.5));
        let unlabeled = tape.leaf(Tensor::scalar(0.75));

        let at_zero = total_loss_joint(&mut tape, labeled, unlabeled, 0.0).unwrap();
        assert_eq!(at_zero, labeled);

        let at_one = total_loss_joint(&mut tape, labeled, unlabeled, 1.0).unwrap();
        assert_eq!(tape.value(at_one).item().unwrap(), 2.25);

        let err = total_loss_joint(&mut tape, labeled, unlabeled, -0.1).unwrap_err();
        assert!(matches!(err, LossError::InvalidLambda(_)));
    }
}
