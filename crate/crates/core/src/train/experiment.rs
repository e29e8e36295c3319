//! The full desk pipeline for one seed: synthetic data, four teachers with
//! top-k soup, then a distilled and a cross-entropy-only student from the same
//! initialisation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    derive_seed, distill_student, evaluate, evaluate_ensemble, model_soup, synth_dataset, train_student_ce, train_teacher,
    EvalReport, MetricsLog, Split, TrainConfig, TrainContext, TrainError,
};
use crate::augment::DeviceImpulseResponse;
use crate::distill::DistillConfig;
use crate::models::{Network, NetworkSpec, TeacherPreset, DEFAULT_STUDENT_WIDTH};
use crate::nn::AdamW;

const DOMAIN_STUDENT_INIT: u64 = 11;
/// Peak learning rate for the desk runs: with ~10 steps per epoch the generic
/// 1e-3 default leaves every network badly under-trained.
pub const DESK_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_per_class: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    pub keep_top_k: usize,
    pub optimizer: AdamW,
    pub student_width: f64,
    pub teachers: Vec<TeacherPreset>,
    pub distill: DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            teacher_epochs: 30,
            student_epochs: 50,
            batch_size: 32,
            keep_top_k: 5,
            optimizer: AdamW {
                lr: DESK_LR,
                ..AdamW::default()
            },
            student_width: DEFAULT_STUDENT_WIDTH,
            teachers: TeacherPreset::ALL.to_vec(),
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherResult {
    pub preset: TeacherPreset,
    pub valid_accuracy: f64,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub teachers: Vec<TeacherResult>,
    pub feature_teacher: Option<TeacherPreset>,
    pub ensemble_test: EvalReport,
    pub distilled_test: EvalReport,
    pub baseline_test: EvalReport,
}

impl ExperimentResult {
    pub fn best_teacher_accuracy(&self) -> f64 {
        self.teachers.iter().map(|t| t.test.accuracy).fold(0.0, f64::max)
    }
}

/// Initialisation seed shared by the distilled and the baseline student.
pub fn student_init_seed(seed: u64) -> u64 {
    derive_seed(seed, DOMAIN_STUDENT_INIT, 0, 0)
}

/// Index of the CP-ResNet surrogate with the best validation accuracy; the
/// earlier one wins ties.
pub fn pick_feature_teacher(candidates: impl IntoIterator<Item = (TeacherPreset, f64)>) -> Option<usize> {
    candidates
        .into_iter()
        .enumerate()
        .filter(|(_, (p, _))| p.is_cpresnet())
        .fold(None::<(usize, f64)>, |best, (i, (_, acc))| match best {
            Some((_, a)) if a >= acc => best,
            _ => Some((i, acc)),
        })
        .map(|(i, _)| i)
}

/// Runs the pipeline for `seed`. With a `run_dir`, soups and top-k
/// checkpoints land in `run_dir/checkpoints`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    irs: &[DeviceImpulseResponse],
    run_dir: Option<&Path>,
    log: &mut MetricsLog,
) -> Result<ExperimentResult, TrainError> {
    if cfg.teachers.is_empty() {
        return Err(TrainError::Config("experiment needs at least one teacher".into()));
    }
    cfg.distill.validate()?;
    let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d)?;
    }
    let data = synth_dataset(cfg.n_per_class, seed)?;
    let teacher_cfg = TrainConfig {
        epochs: cfg.teacher_epochs,
        batch_size: cfg.batch_size,
        seed,
        optimizer: cfg.optimizer.clone(),
        keep_top_k: cfg.keep_top_k,
        augment: None,
    };

    let mut teachers = Vec::new();
    let mut results = Vec::new();
    for &preset in &cfg.teachers {
        let mut ctx = TrainContext {
            irs,
            log: &mut *log,
            checkpoint_dir: ckpt_dir.as_deref(),
            run: format!("teacher_{preset}"),
        };
        let run = train_teacher(NetworkSpec::teacher_micro(preset), &data, &teacher_cfg, &mut ctx)?;
        let soup = model_soup(&run.top)?;
        if let Some(d) = &ckpt_dir {
            soup.save(&d.join(format!("teacher_{preset}_soup.ckpt")))?;
        }
        let net = Network::from_checkpoint(&soup)?;
        let valid_accuracy = match evaluate(&net, &data, Split::Valid) {
            Ok(r) => r.accuracy,
            Err(TrainError::Input(_)) => soup.meta.val_accuracy,
            Err(e) => return Err(e),
        };
        results.push(TeacherResult {
            preset,
            valid_accuracy,
            test: evaluate(&net, &data, Split::Test)?,
        });
        teachers.push(net);
    }

    let feature_idx = pick_feature_teacher(results.iter().map(|r| (r.preset, r.valid_accuracy)));
    if cfg.distill.beta > 0.0 && feature_idx.is_none() {
        return Err(TrainError::Config("feature distillation needs a CP-ResNet surrogate teacher".into()));
    }

    let student_cfg = TrainConfig {
        epochs: cfg.student_epochs,
        keep_top_k: 1,
        ..teacher_cfg
    };
    let init = student_init_seed(seed);
    let student = Network::student_micro(cfg.student_width, init)?;
    let distilled = {
        let mut ctx = TrainContext {
            irs,
            log: &mut *log,
            checkpoint_dir: None,
            run: "student_kd".into(),
        };
        distill_student(student.clone(), &teachers, feature_idx, &data, &student_cfg, &cfg.distill, &mut ctx)?
    };
    let baseline = {
        let mut ctx = TrainContext {
            irs,
            log: &mut *log,
            checkpoint_dir: None,
            run: "student_ce".into(),
        };
        train_student_ce(student, &data, &student_cfg, &mut ctx)?
    };
    if let Some(d) = &ckpt_dir {
        for (net, file) in [(&distilled.net, "student_kd.ckpt"), (&baseline.net, "student_ce.ckpt")] {
            let acc = evaluate(net, &data, Split::Valid).map_or(0.0, |r| r.accuracy);
            net.to_checkpoint(net.checkpoint_meta(cfg.student_epochs, acc, seed)).save(&d.join(file))?;
        }
    }
    Ok(ExperimentResult {
        seed,
        feature_teacher: feature_idx.map(|i| results[i].preset),
        ensemble_test: evaluate_ensemble(&teachers, &data, Split::Test)?,
        distilled_test: evaluate(&distilled.net, &data, Split::Test)?,
        baseline_test: evaluate(&baseline.net, &data, Split::Test)?,
        teachers: results,
    })
}
