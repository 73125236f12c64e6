//! The five-row ablation ladder: teacher, plain student, student with the
//! probability loss, with probability + consistency losses, and with the
//! unlabeled pseudo-label branch on top. Optional extras: a student width
//! sweep against the same per-seed teacher and a lambda sensitivity sweep.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kdseg::dataset::{generate_synthetic_dataset, Manifest};
use kdseg::eval::{benchmark, evaluate_on_manifest};
use kdseg::losses::LossWeights;
use kdseg::models::{build_network, load_checkpoint, NetworkConfig, Role, SegNetwork};
use kdseg::pseudo::pseudo_label_dataset;
use kdseg::trainer::{
    default_drop_epochs, train_distill, train_distill_joint, train_standalone, TrainConfig,
    TrainError,
};

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_unlabeled: usize,
    pub size: usize,
    pub num_classes: usize,
    pub data_seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub batch_size: usize,
    /// Student widths to sweep against the per-seed teacher; empty disables.
    pub width_sweep: Vec<f64>,
    /// Lambda values for the sensitivity sweep; empty disables.
    pub lambda_sweep: Vec<f64>,
    pub bench_iterations: usize,
    pub bench_warmup: usize,
    pub verbose: bool,
}

impl AblationConfig {
    pub fn new(out_dir: PathBuf) -> Self {
        AblationConfig {
            out_dir,
            seeds: vec![1, 2, 3],
            epochs: 30,
            num_train: 500,
            num_val: 100,
            num_unlabeled: 500,
            size: 32,
            num_classes: 4,
            data_seed: 0,
            alpha: 4.0,
            beta: 0.4,
            lambda: 0.5,
            threshold: 0.7,
            batch_size: 8,
            width_sweep: Vec::new(),
            lambda_sweep: Vec::new(),
            bench_iterations: 200,
            bench_warmup: 10,
            verbose: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VariantOutcome {
    pub miou_per_seed: Vec<f64>,
    pub fps_per_seed: Vec<f64>,
}

impl VariantOutcome {
    pub fn miou_mean(&self) -> f64 {
        mean(&self.miou_per_seed)
    }

    pub fn miou_spread(&self) -> f64 {
        spread(&self.miou_per_seed)
    }

    pub fn fps_mean(&self) -> f64 {
        mean(&self.fps_per_seed)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn spread(values: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if values.is_empty() {
        0.0
    } else {
        (hi - lo) / 2.0
    }
}

#[derive(Debug, Clone)]
pub struct WidthOutcome {
    pub width: f64,
    pub baseline: VariantOutcome,
    pub enhanced: VariantOutcome,
}

#[derive(Debug, Clone, Default)]
pub struct AblationOutcome {
    pub teacher: VariantOutcome,
    pub baseline: VariantOutcome,
    pub prob_only: VariantOutcome,
    pub prob_cons: VariantOutcome,
    pub joint: VariantOutcome,
    pub width_sweep: Vec<WidthOutcome>,
    pub lambda_sweep: Vec<(f64, VariantOutcome)>,
    /// True when every teacher checkpoint byte-compared equal before and
    /// after the distillation runs that consumed it.
    pub teacher_frozen: bool,
}

impl AblationOutcome {
    pub fn ladder_rows(&self) -> [(&'static str, &VariantOutcome); 5] {
        [
            ("teacher", &self.teacher),
            ("student_baseline", &self.baseline),
            ("student_prob", &self.prob_only),
            ("student_prob_cons", &self.prob_cons),
            ("student_joint", &self.joint),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,miou_mean,miou_spread,fps_mean\n");
        for (name, v) in self.ladder_rows() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                name,
                v.miou_mean(),
                v.miou_spread(),
                v.fps_mean()
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| model | mIoU | speed (img/s) |\n|---|---|---|\n");
        for (name, v) in self.ladder_rows() {
            out.push_str(&format!(
                "| {} | {:.4} ± {:.4} | {:.1} |\n",
                name,
                v.miou_mean(),
                v.miou_spread(),
                v.fps_mean()
            ));
        }
        out
    }

    pub fn lambda_sweep_csv(&self) -> String {
        let mut out = String::from("lambda,miou_mean,miou_spread\n");
        for (lambda, v) in &self.lambda_sweep {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                lambda,
                v.miou_mean(),
                v.miou_spread()
            ));
        }
        out
    }

    pub fn width_sweep_csv(&self) -> String {
        let mut out = String::from("width,base_miou_mean,enhanced_miou_mean,enhanced_fps_mean\n");
        for w in &self.width_sweep {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                w.width,
                w.baseline.miou_mean(),
                w.enhanced.miou_mean(),
                w.enhanced.fps_mean()
            ));
        }
        out
    }
}

fn train_cfg(ab: &AblationConfig, weights: LossWeights, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: ab.batch_size,
        epochs: ab.epochs,
        lr_drop_epochs: default_drop_epochs(ab.epochs),
        weights,
        pseudo_threshold: ab.threshold,
        seed,
        ..TrainConfig::default()
    }
}

struct SeedRun<'a> {
    ab: &'a AblationConfig,
    seed: u64,
    dir: PathBuf,
    train: &'a Manifest,
    val: &'a Manifest,
    started: Instant,
}

impl SeedRun<'_> {
    fn log(&self, what: &str, miou: f64) {
        if self.ab.verbose {
            println!(
                "[seed {}] {:<22} miou {:.4}  ({:.0} s elapsed)",
                self.seed,
                what,
                miou,
                self.started.elapsed().as_secs_f64()
            );
        }
    }

    fn bench(&self, net: &SegNetwork<f32>) -> Result<f64, TrainError> {
        let result = benchmark(
            net,
            (self.ab.size, self.ab.size),
            self.ab.bench_iterations,
            self.ab.bench_warmup,
        )?;
        Ok(result.images_per_second)
    }

    fn student(&self, width: f64) -> Result<SegNetwork<f32>, TrainError> {
        Ok(
            build_network::<f32>(&NetworkConfig::student_preset(self.ab.num_classes, width), self.seed)?
                .with_role(Role::Student),
        )
    }

    fn run_student(
        &self,
        name: &str,
        width: f64,
        weights: LossWeights,
        teacher: Option<&SegNetwork<f32>>,
        pseudo: Option<&Manifest>,
    ) -> Result<(f64, f64), TrainError> {
        let mut student = self.student(width)?;
        let cfg = train_cfg(self.ab, weights, self.seed);
        let report = match (teacher, pseudo) {
            (None, _) => train_standalone(&mut student, self.train, self.val, &cfg)?,
            (Some(t), None) => train_distill(&mut student, t, self.train, self.val, &cfg)?,
            (Some(t), Some(p)) => {
                train_distill_joint(&mut student, t, self.train, p, self.val, &cfg)?
            }
        };
        let miou = report.final_miou.expect("validation ran");
        student.save_checkpoint(&self.dir.join(format!("{}.ckpt", name)))?;
        std::fs::write(self.dir.join(format!("{}_report.csv", name)), report.to_csv())
            .map_err(kdseg::dataset::DataError::from)?;
        let fps = self.bench(&student)?;
        self.log(name, miou);
        Ok((miou, fps))
    }
}

/// Run the full ladder over every seed. One teacher is trained per seed and
/// shared by that seed's distillation rows, the width sweep and the lambda
/// sweep.
pub fn run_ablation(ab: &AblationConfig) -> Result<AblationOutcome, TrainError> {
    std::fs::create_dir_all(&ab.out_dir).map_err(kdseg::dataset::DataError::from)?;
    let data_dir = ab.out_dir.join("data");
    let (train, val, unlabeled) = generate_synthetic_dataset(
        ab.num_train,
        ab.num_val,
        ab.num_unlabeled,
        ab.size,
        ab.num_classes,
        ab.data_seed,
        &data_dir,
    )?;

    let mut outcome = AblationOutcome {
        width_sweep: ab
            .width_sweep
            .iter()
            .map(|&width| WidthOutcome {
                width,
                baseline: VariantOutcome::default(),
                enhanced: VariantOutcome::default(),
            })
            .collect(),
        lambda_sweep: ab
            .lambda_sweep
            .iter()
            .map(|&l| (l, VariantOutcome::default()))
            .collect(),
        teacher_frozen: true,
        ..AblationOutcome::default()
    };

    for &seed in &ab.seeds {
        let run = SeedRun {
            ab,
            seed,
            dir: ab.out_dir.join(format!("seed_{}", seed)),
            train: &train,
            val: &val,
            started: Instant::now(),
        };
        std::fs::create_dir_all(&run.dir).map_err(kdseg::dataset::DataError::from)?;

        // Teacher row.
        let mut teacher =
            build_network::<f32>(&NetworkConfig::teacher_preset(ab.num_classes), seed)?
                .with_role(Role::Teacher);
        let report = train_standalone(
            &mut teacher,
            &train,
            &val,
            &train_cfg(ab, LossWeights { alpha: 0.0, beta: 0.0, lambda: 0.0 }, seed),
        )?;
        let teacher_ckpt = run.dir.join("teacher.ckpt");
        teacher.save_checkpoint(&teacher_ckpt)?;
        let teacher_bytes = std::fs::read(&teacher_ckpt).map_err(kdseg::dataset::DataError::from)?;
        let teacher_miou = report.final_miou.expect("validation ran");
        outcome.teacher.miou_per_seed.push(teacher_miou);
        outcome.teacher.fps_per_seed.push(run.bench(&teacher)?);
        run.log("teacher", teacher_miou);

        // Reload the teacher from its checkpoint: the distillation rows see
        // exactly what a separate process would.
        let teacher = load_checkpoint(&teacher_ckpt)?.with_role(Role::Teacher);

        let zero = LossWeights { alpha: 0.0, beta: 0.0, lambda: 0.0 };
        let prob = LossWeights { alpha: ab.alpha, beta: 0.0, lambda: 0.0 };
        let prob_cons = LossWeights { alpha: ab.alpha, beta: ab.beta, lambda: 0.0 };
        let joint = LossWeights { alpha: ab.alpha, beta: ab.beta, lambda: ab.lambda };

        let (miou, fps) = run.run_student("baseline", 1.0, zero, None, None)?;
        outcome.baseline.miou_per_seed.push(miou);
        outcome.baseline.fps_per_seed.push(fps);

        let (miou, fps) = run.run_student("prob", 1.0, prob, Some(&teacher), None)?;
        outcome.prob_only.miou_per_seed.push(miou);
        outcome.prob_only.fps_per_seed.push(fps);

        let (miou, fps) = run.run_student("prob_cons", 1.0, prob_cons, Some(&teacher), None)?;
        outcome.prob_cons.miou_per_seed.push(miou);
        outcome.prob_cons.fps_per_seed.push(fps);

        // Pseudo labels once per seed, shared by every joint run.
        let (pseudo, stats) = pseudo_label_dataset(
            &teacher,
            &unlabeled,
            &run.dir.join("pseudo.txt"),
            ab.threshold,
        )?;
        if ab.verbose {
            println!(
                "[seed {}] pseudo labels: kept {:.3} of pixels, {} failures",
                seed,
                stats.aggregate_kept,
                stats.failures.len()
            );
        }

        let (miou, fps) = run.run_student("joint", 1.0, joint, Some(&teacher), Some(&pseudo))?;
        outcome.joint.miou_per_seed.push(miou);
        outcome.joint.fps_per_seed.push(fps);

        for (wi, &width) in ab.width_sweep.iter().enumerate() {
            let (bmiou, bfps) = if width == 1.0 {
                let v = &outcome.baseline;
                (v.miou_per_seed[v.miou_per_seed.len() - 1], v.fps_per_seed[v.fps_per_seed.len() - 1])
            } else {
                run.run_student(&format!("baseline_w{}", width), width, zero, None, None)?
            };
            let (emiou, efps) = if width == 1.0 {
                let v = &outcome.joint;
                (v.miou_per_seed[v.miou_per_seed.len() - 1], v.fps_per_seed[v.fps_per_seed.len() - 1])
            } else {
                run.run_student(
                    &format!("joint_w{}", width),
                    width,
                    joint,
                    Some(&teacher),
                    Some(&pseudo),
                )?
            };
            outcome.width_sweep[wi].baseline.miou_per_seed.push(bmiou);
            outcome.width_sweep[wi].baseline.fps_per_seed.push(bfps);
            outcome.width_sweep[wi].enhanced.miou_per_seed.push(emiou);
            outcome.width_sweep[wi].enhanced.fps_per_seed.push(efps);
        }

        for (li, &lambda) in ab.lambda_sweep.iter().enumerate() {
            let (miou, fps) = if lambda == ab.lambda {
                let v = &outcome.joint;
                (v.miou_per_seed[v.miou_per_seed.len() - 1], v.fps_per_seed[v.fps_per_seed.len() - 1])
            } else {
                run.run_student(
                    &format!("joint_l{}", lambda),
                    1.0,
                    LossWeights { lambda, ..joint },
                    Some(&teacher),
                    Some(&pseudo),
                )?
            };
            outcome.lambda_sweep[li].1.miou_per_seed.push(miou);
            outcome.lambda_sweep[li].1.fps_per_seed.push(fps);
        }

        // The teacher must byte-compare equal to its pre-distillation state.
        teacher.save_checkpoint(&run.dir.join("teacher_after.ckpt"))?;
        let after = std::fs::read(run.dir.join("teacher_after.ckpt"))
            .map_err(kdseg::dataset::DataError::from)?;
        outcome.teacher_frozen &= after == teacher_bytes;
    }

    std::fs::write(ab.out_dir.join("ablation.csv"), outcome.to_csv())
        .map_err(kdseg::dataset::DataError::from)?;
    std::fs::write(ab.out_dir.join("ablation.md"), outcome.to_markdown())
        .map_err(kdseg::dataset::DataError::from)?;
    if !outcome.lambda_sweep.is_empty() {
        std::fs::write(ab.out_dir.join("lambda_sweep.csv"), outcome.lambda_sweep_csv())
            .map_err(kdseg::dataset::DataError::from)?;
    }
    if !outcome.width_sweep.is_empty() {
        std::fs::write(ab.out_dir.join("width_sweep.csv"), outcome.width_sweep_csv())
            .map_err(kdseg::dataset::DataError::from)?;
    }
    Ok(outcome)
}

/// Evaluate an existing checkpoint on a manifest (used by `eval`).
pub fn eval_checkpoint(
    ckpt: &Path,
    manifest: &Manifest,
) -> Result<(kdseg::eval::MiouResult, f64), TrainError> {
    let net = load_checkpoint(ckpt)?;
    let n = net.config().num_classes;
    let (_, score, acc) = evaluate_on_manifest(&net, manifest, n)?;
    Ok((score, acc))
}
