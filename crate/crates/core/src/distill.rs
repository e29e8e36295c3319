//! Distillation losses: ensembled soft targets, the temperature-scaled KL
//! term, Gram-matrix (SSFM) and adapter-based direct (DFM) feature matching,
//! and their weighted combination with cross-entropy.
//!
//! Every loss has a graph form (`*_var`) used in training and a plain-tensor
//! form for evaluation and tests; the latter is a thin wrapper over the former.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ConvGeometry, Graph, KlDirection, NnError, Tensor, Var};

pub const PSEUDO_LOGIT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("distill config error in `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("distill input error: {0}")]
    Input(String),
    #[error("distill numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn cfg_err(field: &'static str, reason: impl Into<String>) -> DistillError {
    DistillError::Config {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMethod {
    Dfm,
    Ssfm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub feature_method: FeatureMethod,
    /// 1-based stage indices.
    pub stages: BTreeSet<usize>,
    pub kl_direction: KlDirection,
    pub gram_pool: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.05,
            feature_method: FeatureMethod::Ssfm,
            stages: [1, 2, 3].into(),
            kl_direction: KlDirection::AsWritten,
            gram_pool: 8,
        }
    }
}

impl DistillConfig {
    /// SSFM over stages 1-3.
    pub fn ssfm() -> Self {
        Self::default()
    }

    /// DFM on stage 3.
    pub fn dfm() -> Self {
        Self {
            feature_method: FeatureMethod::Dfm,
            stages: [3].into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(cfg_err("T", format!("must be > 0, got {}", self.temperature)));
        }
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(cfg_err(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.beta > 0.0 && self.stages.is_empty() {
            return Err(cfg_err("stages", "must be non-empty when beta > 0"));
        }
        if let Some(s) = self.stages.iter().find(|s| !(1..=3).contains(*s)) {
            return Err(cfg_err("stages", format!("stage {s} is not one of 1, 2, 3")));
        }
        if self.gram_pool == 0 {
            return Err(cfg_err("gram_pool", "must be >= 1"));
        }
        Ok(())
    }
}

/// Row-major `[batch × classes]` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub probs: Vec<f64>,
    pub batch: usize,
    pub n_classes: usize,
}

impl SoftTargets {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Top-1 class per row.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.batch).map(|i| argmax(self.row(i))).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

pub fn softmax_rows(logits: &Tensor) -> Result<Vec<f64>, DistillError> {
    let [_, k] = *logits.shape() else {
        return Err(DistillError::Input(format!("logits must be [batch, classes], got {:?}", logits.shape())));
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.values().chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Ok(out)
}

/// Mean of per-teacher softmax distributions.
pub fn ensemble_soft_targets(teacher_logits: &[Tensor]) -> Result<SoftTargets, DistillError> {
    let first = teacher_logits
        .first()
        .ok_or_else(|| DistillError::Input("ensemble needs at least one teacher".into()))?;
    let [batch, n_classes] = *first.shape() else {
        return Err(DistillError::Input(format!("logits must be [batch, classes], got {:?}", first.shape())));
    };
    let mut probs = vec![0.0; batch * n_classes];
    for (i, t) in teacher_logits.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(DistillError::Input(format!(
                "teacher {i} logits {:?} do not match {:?}",
                t.shape(),
                first.shape()
            )));
        }
        if t.values().iter().any(|v| !v.is_finite()) {
            return Err(DistillError::Numeric(format!("teacher {i} produced non-finite logits")));
        }
        for (p, q) in probs.iter_mut().zip(softmax_rows(t)?) {
            *p += q;
        }
    }
    let n = teacher_logits.len() as f64;
    probs.iter_mut().for_each(|p| *p /= n);
    Ok(SoftTargets {
        probs,
        batch,
        n_classes,
    })
}

pub fn soft_loss_var(
    g: &mut Graph,
    student_logits: Var,
    targets: &SoftTargets,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var, DistillError> {
    g.soft_kl(student_logits, &targets.probs, temperature, direction).map_err(|e| match e {
        NnError::Numeric(m) => DistillError::Numeric(m),
        e => e.into(),
    })
}

/// `T²·KL` between softened student and target distributions, mean over the batch.
pub fn soft_loss(
    student_logits: &Tensor,
    targets: &SoftTargets,
    temperature: f64,
    direction: KlDirection,
) -> Result<f64, DistillError> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let l = soft_loss_var(&mut g, s, targets, temperature, direction)?;
    Ok(g.value(l).item()?)
}

/// Pooled Gram matrices `[B, N, N]` of a `[B, C, F, T]` feature.
pub fn gram_var(g: &mut Graph, f: Var, pool: usize) -> Result<Var, DistillError> {
    if pool == 0 {
        return Err(cfg_err("gram_pool", "must be >= 1"));
    }
    let pooled = g.adaptive_avg_pool2d(f, (pool, pool))?;
    Ok(g.gram(pooled)?)
}

/// Gram matrix of one `[C, F, T]` feature: pooled to `C × pool × pool`,
/// reshaped to `X [C × N]`, `G = XᵀX / C`. Returned as `[N, N]`.
pub fn gram(f: &Tensor, pool: usize) -> Result<Tensor, DistillError> {
    let [c, h, w] = *f.shape() else {
        return Err(DistillError::Input(format!("gram expects [C, F, T], got {:?}", f.shape())));
    };
    let mut g = Graph::new();
    let x = g.constant(f.clone().reshape(vec![1, c, h, w])?);
    let gv = gram_var(&mut g, x, pool)?;
    let n = pool * pool;
    Ok(g.value(gv).clone().reshape(vec![n, n])?)
}

pub fn ssfm_loss_var(g: &mut Graph, fs: Var, ft: Var, pool: usize) -> Result<Var, DistillError> {
    let (bs, bt) = (g.value(fs).shape()[0], g.value(ft).shape()[0]);
    if bs != bt {
        return Err(DistillError::Input(format!("student batch {bs} vs teacher batch {bt}")));
    }
    let gs = gram_var(g, fs, pool)?;
    let gt = gram_var(g, ft, pool)?;
    Ok(g.mse(gs, gt)?)
}

fn as_batch(f: &Tensor) -> Result<Tensor, DistillError> {
    match *f.shape() {
        [c, h, w] => Ok(f.clone().reshape(vec![1, c, h, w])?),
        [_, _, _, _] => Ok(f.clone()),
        ref s => Err(DistillError::Input(format!("feature must be [C, F, T] or [B, C, F, T], got {s:?}"))),
    }
}

/// Mean squared difference of the two features' Gram matrices.
pub fn ssfm_loss(fs: &Tensor, ft: &Tensor, pool: usize) -> Result<f64, DistillError> {
    let mut g = Graph::new();
    let a = g.constant(as_batch(fs)?);
    let b = g.constant(as_batch(ft)?);
    let l = ssfm_loss_var(&mut g, a, b, pool)?;
    Ok(g.value(l).item()?)
}

/// Trainable 1×1 convolution from teacher to student channels, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAdapter {
    pub weight: Tensor,
}

impl FeatureAdapter {
    pub fn new(student_channels: usize, teacher_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / teacher_channels as f64).sqrt()).expect("positive std");
        let values = (0..student_channels * teacher_channels)
            .map(|_| normal.sample(&mut rng) as f32 as f64)
            .collect();
        Self {
            weight: Tensor::new(vec![student_channels, teacher_channels, 1, 1], values).expect("sized"),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut w = Tensor::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            w.values_mut()[c * channels + c] = 1.0;
        }
        Self { weight: w }
    }

    pub fn student_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn teacher_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `mse(f_s, adapter(pool(f_t)))`; `adapter` is the weight var `[C_s, C_t, 1, 1]`.
pub fn dfm_loss_var(g: &mut Graph, fs: Var, ft: Var, adapter: Var) -> Result<Var, DistillError> {
    let (bs, cs, hs, ws) = match *g.value(fs).shape() {
        [b, c, h, w] => (b, c, h, w),
        ref s => return Err(DistillError::Input(format!("student feature must be 4-D, got {s:?}"))),
    };
    let (bt, ct) = match *g.value(ft).shape() {
        [b, c, _, _] => (b, c),
        ref s => return Err(DistillError::Input(format!("teacher feature must be 4-D, got {s:?}"))),
    };
    if bs != bt {
        return Err(DistillError::Input(format!("student batch {bs} vs teacher batch {bt}")));
    }
    let aw = g.value(adapter).shape().to_vec();
    if aw != [cs, ct, 1, 1] {
        return Err(cfg_err(
            "adapter",
            format!("adapter weight {aw:?} does not map {ct} teacher to {cs} student channels"),
        ));
    }
    let pooled = g.adaptive_avg_pool2d(ft, (hs, ws))?;
    let geom = ConvGeometry {
        stride: (1, 1),
        padding: (0, 0),
        groups: 1,
    };
    let adapted = g.conv2d(pooled, adapter, None, geom)?;
    Ok(g.mse(fs, adapted)?)
}

pub fn dfm_loss(fs: &Tensor, ft: &Tensor, adapter: &FeatureAdapter) -> Result<f64, DistillError> {
    let mut g = Graph::new();
    let a = g.constant(as_batch(fs)?);
    let b = g.constant(as_batch(ft)?);
    let w = g.constant(adapter.weight.clone());
    let l = dfm_loss_var(&mut g, a, b, w)?;
    Ok(g.value(l).item()?)
}

/// Feature loss averaged over the configured stages. `adapters` holds one
/// weight var per configured stage (ascending) and is ignored for SSFM.
pub fn feature_loss_var(
    g: &mut Graph,
    student: &[Var; 3],
    teacher: &[Var; 3],
    adapters: &[Var],
    cfg: &DistillConfig,
) -> Result<Var, DistillError> {
    if cfg.stages.is_empty() {
        return Err(cfg_err("stages", "feature loss needs at least one stage"));
    }
    if cfg.feature_method == FeatureMethod::Dfm && adapters.len() != cfg.stages.len() {
        return Err(cfg_err(
            "adapter",
            format!("{} adapters for {} DFM stages", adapters.len(), cfg.stages.len()),
        ));
    }
    let mut terms = Vec::with_capacity(cfg.stages.len());
    let w = 1.0 / cfg.stages.len() as f64;
    for (i, &s) in cfg.stages.iter().enumerate() {
        let (fs, ft) = (student[s - 1], teacher[s - 1]);
        let l = match cfg.feature_method {
            FeatureMethod::Ssfm => ssfm_loss_var(g, fs, ft, cfg.gram_pool)?,
            FeatureMethod::Dfm => dfm_loss_var(g, fs, ft, adapters[i])?,
        };
        terms.push((l, w));
    }
    Ok(g.weighted_sum(&terms)?)
}

fn check_component(name: &str, v: f64) -> Result<(), DistillError> {
    if !v.is_finite() || v < 0.0 {
        return Err(DistillError::Numeric(format!("{name} loss component must be finite and >= 0, got {v}")));
    }
    Ok(())
}

/// `alpha·soft + beta·feat + gamma·ce` on the graph. Zero-weight terms are
/// left out so they contribute no gradient.
pub fn combined_loss_var(
    g: &mut Graph,
    soft: Option<Var>,
    feat: Option<Var>,
    ce: Var,
    cfg: &DistillConfig,
) -> Result<Var, DistillError> {
    let mut terms = Vec::with_capacity(3);
    for (name, v, w) in [("soft", soft, cfg.alpha), ("feature", feat, cfg.beta), ("cross-entropy", Some(ce), cfg.gamma)] {
        if let Some(v) = v {
            check_component(name, g.value(v).item()?)?;
            if w != 0.0 {
                terms.push((v, w));
            }
        }
    }
    Ok(g.weighted_sum(&terms)?)
}

pub fn combined_loss(l_soft: f64, l_feat: f64, l_ce: f64, cfg: &DistillConfig) -> Result<f64, DistillError> {
    check_component("soft", l_soft)?;
    check_component("feature", l_feat)?;
    check_component("cross-entropy", l_ce)?;
    Ok(cfg.alpha * l_soft + cfg.beta * l_feat + cfg.gamma * l_ce)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = DistillConfig::default();
        assert_eq!((c.temperature, c.alpha, c.beta, c.gamma), (2.0, 1.0, 0.1, 0.05));
        c.validate().unwrap();
        DistillConfig::dfm().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_fields() {
        let bad = DistillConfig {
            stages: BTreeSet::new(),
            ..DistillConfig::default()
        };
        assert!(matches!(bad.validate(), Err(DistillError::Config { field: "stages", .. })));
        let bad = DistillConfig {
            temperature: 0.0,
            ..DistillConfig::default()
        };
        assert!(matches!(bad.validate(), Err(DistillError::Config { field: "T", .. })));
        let json = r#"{"T": 3.0, "stages": [3]}"#;
        let c: DistillConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.temperature, 3.0);
        assert_eq!(c.alpha, 1.0);
    }

    #[test]
    fn combined_rejects_negative() {
        let c = DistillConfig::default();
        assert!((combined_loss(2.0, 3.0, 4.0, &c).unwrap() - 2.5).abs() < 1e-12);
        assert!(matches!(combined_loss(-1.0, 0.0, 0.0, &c), Err(DistillError::Numeric(_))));
    }

    #[test]
    fn ensemble_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(matches!(ensemble_soft_targets(&[a, b]), Err(DistillError::Input(_))));
        assert!(ensemble_soft_targets(&[]).is_err());
    }

    #[test]
    fn dfm_channel_mismatch_is_config_error() {
        let fs = Tensor::zeros(&[2, 4, 4]);
        let ft = Tensor::zeros(&[3, 4, 4]);
        let a = FeatureAdapter::new(2, 5, 0);
        assert!(matches!(dfm_loss(&fs, &ft, &a), Err(DistillError::Config { field: "adapter", .. })));
    }

    #[test]
    fn soft_loss_rejects_non_finite() {
        let t = ensemble_soft_targets(&[Tensor::zeros(&[1, 3])]).unwrap();
        let s = Tensor::new(vec![1, 3], vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(soft_loss(&s, &t, 2.0, KlDirection::AsWritten), Err(DistillError::Numeric(_))));
    }
}
