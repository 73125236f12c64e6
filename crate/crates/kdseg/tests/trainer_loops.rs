//! Training-loop behavior: schedule, optimizer, determinism, reductions
//! between the three loops, and teacher immutability. Everything runs on a
//! tiny 8x8 synthetic dataset so the suite stays fast.

use kdseg::dataset::{generate_synthetic_dataset, Manifest};
use kdseg::models::{build_network, NetworkConfig, SegNetwork};
use kdseg::pseudo::pseudo_label_dataset;
use kdseg::trainer::{
    default_drop_epochs, lr_at, sgd_step, train_distill, train_distill_joint, train_standalone,
    OptimizerState, TrainConfig, TrainError, TrainReport,
};
use kdseg::losses::LossWeights;
use std::path::PathBuf;
use std::sync::OnceLock;

fn student_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 4,
        depth: 2,
        base_channels: 6,
        width_multiplier: 1.0,
        input_channels: 3,
    }
}

fn teacher_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 4,
        depth: 3,
        base_channels: 8,
        width_multiplier: 1.0,
        input_channels: 3,
    }
}

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    train: Manifest,
    val: Manifest,
    pseudo: Manifest,
    teacher: SegNetwork<f32>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (train, val, unlabeled) =
            generate_synthetic_dataset(16, 6, 8, 8, 4, 99, dir.path()).unwrap();
        let mut teacher = build_network::<f32>(&teacher_config(), 7).unwrap();
        train_standalone(&mut teacher, &train, &val, &quick_config(8, no_distill(), 7)).unwrap();
        let (pseudo, _) = pseudo_label_dataset(
            &teacher,
            &unlabeled,
            &dir.path().join("pseudo.txt"),
            0.3,
        )
        .unwrap();
        Fixture {
            dir,
            train,
            val,
            pseudo,
            teacher,
        }
    })
}

fn quick_config(epochs: usize, weights: LossWeights, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        lr_drop_epochs: default_drop_epochs(epochs),
        weights,
        seed,
        ..TrainConfig::default()
    }
}

fn no_distill() -> LossWeights {
    LossWeights {
        alpha: 0.0,
        beta: 0.0,
        lambda: 0.0,
    }
}

fn params_bits(net: &SegNetwork<f32>) -> Vec<u32> {
    net.parameters()
        .iter()
        .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn losses_of(report: &TrainReport) -> Vec<f64> {
    report.epochs.iter().map(|r| r.loss_total).collect()
}

#[test]
fn lr_schedule_matches_drop_rules() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg).unwrap(), 0.1);
    assert_eq!(lr_at(29, &cfg).unwrap(), 0.1);
    assert!((lr_at(45, &cfg).unwrap() - 0.001).abs() < 1e-12);
    assert!((lr_at(59, &cfg).unwrap() - 0.0001).abs() < 1e-12);
    assert!(matches!(
        lr_at(60, &cfg),
        Err(TrainError::EpochOutOfRange { .. })
    ));

    // Non-increasing over the whole run.
    let mut last = f64::INFINITY;
    for e in 0..cfg.epochs {
        let lr = lr_at(e, &cfg).unwrap();
        assert!(lr <= last);
        last = lr;
    }
}

#[test]
fn default_drops_scale_with_epoch_count() {
    assert_eq!(default_drop_epochs(60), vec![30, 40, 50]);
    assert_eq!(default_drop_epochs(30), vec![15, 20, 25]);
    assert!(default_drop_epochs(1).is_empty());
    assert!(default_drop_epochs(0).is_empty());
}

#[test]
fn sgd_without_momentum_is_plain_descent() {
    let mut net = build_network::<f32>(&student_config(), 1).unwrap();
    let before: Vec<f32> = net.parameters()[0].tensor.data().to_vec();
    let grads: Vec<Vec<f32>> = net
        .parameters()
        .iter()
        .map(|p| vec![0.5f32; p.tensor.numel()])
        .collect();
    let mut state = OptimizerState::for_network(&net);
    sgd_step(net.parameters_mut(), &grads, &mut state, 0.2, 0.0).unwrap();
    for (b, a) in before.iter().zip(net.parameters()[0].tensor.data()) {
        assert!((a - (b - 0.2 * 0.5)).abs() < 1e-7);
    }
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut net = build_network::<f32>(&student_config(), 2).unwrap();
    let before = params_bits(&net);
    let grads: Vec<Vec<f32>> = net
        .parameters()
        .iter()
        .map(|p| vec![0.0f32; p.tensor.numel()])
        .collect();
    let mut state = OptimizerState::for_network(&net);
    for _ in 0..10 {
        sgd_step(net.parameters_mut(), &grads, &mut state, 0.1, 0.9).unwrap();
    }
    assert_eq!(params_bits(&net), before);
}

#[test]
fn momentum_descent_converges_on_quadratic_bowl() {
    // f(p) = ||p||^2, gradient 2p. The oscillatory momentum trajectory needs
    // about 200 steps at lr 0.01 to settle below 1e-3 (at 100 steps the
    // envelope still sits near 6e-3).
    let mut params = vec![kdseg::models::NamedParam {
        name: "p".into(),
        tensor: kdseg::Tensor::from_vec(&[4], vec![1.0f32, -0.5, 0.25, 0.8]).unwrap(),
    }];
    let mut state = OptimizerState::for_params(&params);
    for _ in 0..200 {
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|p| p.tensor.data().iter().map(|v| 2.0 * v).collect())
            .collect();
        sgd_step(&mut params, &grads, &mut state, 0.01, 0.9).unwrap();
    }
    let norm: f32 = params[0]
        .tensor
        .data()
        .iter()
        .map(|v| v * v)
        .sum::<f32>()
        .sqrt();
    assert!(norm < 1e-3, "|p| = {} after 200 steps", norm);
}

#[test]
fn zero_epochs_change_nothing_and_report_nothing() {
    let f = fixture();
    let mut net = build_network::<f32>(&student_config(), 5).unwrap();
    let before = params_bits(&net);
    let cfg = quick_config(0, no_distill(), 1);
    let report = train_standalone(&mut net, &f.train, &f.val, &cfg).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(params_bits(&net), before);
    assert!(report.final_miou.is_some());
}

#[test]
fn same_seed_reproduces_the_run_exactly() {
    let f = fixture();
    let cfg = quick_config(2, no_distill(), 11);
    let mut a = build_network::<f32>(&student_config(), 5).unwrap();
    let ra = train_standalone(&mut a, &f.train, &f.val, &cfg).unwrap();
    let mut b = build_network::<f32>(&student_config(), 5).unwrap();
    let rb = train_standalone(&mut b, &f.train, &f.val, &cfg).unwrap();
    assert_eq!(params_bits(&a), params_bits(&b));
    assert_eq!(losses_of(&ra), losses_of(&rb));
    assert_eq!(ra.final_miou, rb.final_miou);
}

#[test]
fn training_reduces_the_segmentation_loss() {
    let f = fixture();
    let cfg = quick_config(6, no_distill(), 3);
    let mut net = build_network::<f32>(&student_config(), 5).unwrap();
    let report = train_standalone(&mut net, &f.train, &f.val, &cfg).unwrap();
    let first = report.epochs.first().unwrap().loss_seg;
    let last = report.epochs.last().unwrap().loss_seg;
    assert!(
        last < first,
        "segmentation loss went from {} to {}",
        first,
        last
    );
}

#[test]
fn distillation_with_zero_weights_reduces_to_standalone() {
    let f = fixture();
    let cfg = quick_config(2, no_distill(), 17);
    let mut alone = build_network::<f32>(&student_config(), 5).unwrap();
    let report_alone = train_standalone(&mut alone, &f.train, &f.val, &cfg).unwrap();
    let mut distilled = build_network::<f32>(&student_config(), 5).unwrap();
    let report_distill =
        train_distill(&mut distilled, &f.teacher, &f.train, &f.val, &cfg).unwrap();
    assert_eq!(params_bits(&alone), params_bits(&distilled));
    assert_eq!(losses_of(&report_alone), losses_of(&report_distill));
}

#[test]
fn teacher_parameters_survive_distillation_untouched() {
    let f = fixture();
    let teacher_before = params_bits(&f.teacher);
    let cfg = quick_config(2, LossWeights::default(), 23);
    let mut student = build_network::<f32>(&student_config(), 5).unwrap();
    train_distill(&mut student, &f.teacher, &f.train, &f.val, &cfg).unwrap();
    assert_eq!(params_bits(&f.teacher), teacher_before);
    assert!(f.teacher.parameters().iter().all(|p| p.tensor.grad().is_none()));
}

#[test]
fn probability_loss_decreases_under_distillation() {
    let f = fixture();
    let cfg = quick_config(6, LossWeights::default(), 29);
    let mut student = build_network::<f32>(&student_config(), 5).unwrap();
    let report = train_distill(&mut student, &f.teacher, &f.train, &f.val, &cfg).unwrap();
    let first = report.epochs.first().unwrap().loss_prob;
    let last = report.epochs.last().unwrap().loss_prob;
    assert!(last < first, "probability loss went from {} to {}", first, last);
}

#[test]
fn joint_with_zero_lambda_matches_labeled_distillation() {
    let f = fixture();
    let weights = LossWeights {
        lambda: 0.0,
        ..LossWeights::default()
    };
    let cfg = quick_config(2, weights, 31);
    let mut labeled_only = build_network::<f32>(&student_config(), 5).unwrap();
    train_distill(&mut labeled_only, &f.teacher, &f.train, &f.val, &cfg).unwrap();
    let mut joint = build_network::<f32>(&student_config(), 5).unwrap();
    train_distill_joint(&mut joint, &f.teacher, &f.train, &f.pseudo, &f.val, &cfg).unwrap();
    assert_eq!(params_bits(&labeled_only), params_bits(&joint));
}

#[test]
fn joint_training_stays_finite_at_reference_lambdas() {
    let f = fixture();
    for lambda in [0.1, 1.0] {
        let weights = LossWeights {
            lambda,
            ..LossWeights::default()
        };
        let cfg = quick_config(2, weights, 37);
        let mut student = build_network::<f32>(&student_config(), 5).unwrap();
        let report =
            train_distill_joint(&mut student, &f.teacher, &f.train, &f.pseudo, &f.val, &cfg)
                .unwrap();
        for r in &report.epochs {
            assert!(r.loss_total.is_finite());
        }
        assert!(report.final_miou.unwrap().is_finite());
    }
}

#[test]
fn empty_pseudo_manifest_is_an_explicit_error() {
    let f = fixture();
    let empty = Manifest::new(PathBuf::from("."), Vec::new());
    let cfg = quick_config(1, LossWeights::default(), 41);
    let mut student = build_network::<f32>(&student_config(), 5).unwrap();
    let err = train_distill_joint(&mut student, &f.teacher, &f.train, &empty, &f.val, &cfg)
        .unwrap_err();
    assert!(matches!(err, TrainError::EmptyManifest(_)));
}

#[test]
fn class_count_mismatch_is_rejected() {
    let f = fixture();
    let mut cfg_net = student_config();
    cfg_net.num_classes = 3;
    let mut student = build_network::<f32>(&cfg_net, 5).unwrap();
    let cfg = quick_config(1, LossWeights::default(), 43);
    let err = train_distill(&mut student, &f.teacher, &f.train, &f.val, &cfg).unwrap_err();
    assert!(matches!(err, TrainError::ClassCountMismatch { .. }));
}

#[test]
fn augmented_training_is_deterministic_too() {
    let f = fixture();
    let mut cfg = quick_config(2, LossWeights::default(), 47);
    cfg.augment = Some(kdseg::dataset::AugmentConfig::for_size(8));
    let mut a = build_network::<f32>(&student_config(), 5).unwrap();
    train_distill(&mut a, &f.teacher, &f.train, &f.val, &cfg).unwrap();
    let mut b = build_network::<f32>(&student_config(), 5).unwrap();
    train_distill(&mut b, &f.teacher, &f.train, &f.val, &cfg).unwrap();
    assert_eq!(params_bits(&a), params_bits(&b));
}
