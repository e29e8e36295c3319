//! Dual-level knowledge distillation for low-complexity acoustic scene
//! classification: log-Mel front-ends, waveform and spectrogram augmentation,
//! micro teacher/student CNNs, logit + feature distillation, model soup, and a
//! complexity auditor for parameter-memory and MAC budgets.

pub mod audit;
pub mod augment;
pub mod cli;
pub mod distill;
pub mod frontend;
pub mod models;
pub mod nn;
pub mod train;
