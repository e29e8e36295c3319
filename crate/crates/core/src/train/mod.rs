//! Teacher training, model soup, student distillation, evaluation, and
//! dataset provisioning.
//!
//! Randomness is drawn from per-purpose substreams keyed by
//! `(seed, domain, a, b)`; each training clip gets its own
//! `(epoch, index)` stream, so results never depend on processing order.

mod data;
mod experiment;
mod fit;
mod metrics;
mod soup;

pub use data::{
    load_tau_index, read_wav_mono, synth_clip, synth_dataset, ClipSource, Dataset, DatasetIndex, DatasetItem, Split,
    TauIndex, CLASS_RECIPES, CLIP_SAMPLES, DEVICES, HELD_OUT_DEVICE, TAU_SCENES,
};
pub use experiment::{
    pick_feature_teacher, run_experiment, student_init_seed, ExperimentConfig, DESK_LR, ExperimentResult, TeacherResult,
};
pub use fit::{
    accuracy_report, distill_student, evaluate, evaluate_ensemble, featurize_batch, train_student_ce, train_teacher,
    EvalReport, StudentRun, TeacherRun, TrainConfig, TrainContext,
};
pub use metrics::{MetricsLog, MetricsRecord, TimingRecord};
pub use soup::model_soup;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::AugmentError;
use crate::distill::DistillError;
use crate::frontend::FrontendError;
use crate::models::{CheckpointError, ModelError};
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream for `(seed, domain, a, b)`.
pub fn substream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, a, b))
}

pub fn derive_seed(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ domain) ^ a) ^ b)
}

/// Stable 64-bit hash of a name, for deriving per-model seeds.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
