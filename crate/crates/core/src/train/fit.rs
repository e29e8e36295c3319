//! Training loops, augmentation wiring and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{derive_seed, name_hash, substream, Dataset, DatasetIndex, MetricsLog, MetricsRecord, Split, TimingRecord, TrainError};
use crate::augment::{dir_augment, freq_mixstyle, time_roll, AugmentConfig, DeviceImpulseResponse};
use crate::distill::{
    argmax, combined_loss_var, ensemble_soft_targets, feature_loss_var, softmax_rows, soft_loss_var, DistillConfig,
    FeatureAdapter, FeatureMethod,
};
use crate::frontend::{LogMelExtractor, Preset};
use crate::models::{Checkpoint, Network, NetworkSpec};
use crate::nn::{adamw_step, AdamState, AdamW, Graph, LrSchedule, Mode, Tensor, Var};

const DOMAIN_SHUFFLE: u64 = 1;
const DOMAIN_AUGMENT: u64 = 2;
const DOMAIN_MIXSTYLE: u64 = 3;
const DOMAIN_INIT: u64 = 4;
const DOMAIN_ADAPTER: u64 = 5;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamW,
    pub keep_top_k: usize,
    /// Overrides the per-model preset augmentation when set.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optimizer: AdamW::default(),
            keep_top_k: 5,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn resolved_augment(&self, preset: Preset) -> AugmentConfig {
        self.augment.unwrap_or_else(|| AugmentConfig::preset(preset))
    }

    pub fn validate(&self, preset: Preset) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.keep_top_k == 0 {
            return Err(TrainError::Config("train.batch_size and train.keep_top_k must be >= 1".into()));
        }
        let aug = self.resolved_augment(preset);
        aug.validate()?;
        if aug.mixstyle.is_some_and(|m| m.p > 0.0) && self.batch_size < 2 {
            return Err(TrainError::Config("train.batch_size must be >= 2 when Freq-MixStyle is enabled".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(TrainError::Config("train.optimizer has out-of-range values".into()));
        }
        if !(0.0..=1.0).contains(&o.warmup_fraction) || o.weight_decay < 0.0 {
            return Err(TrainError::Config("train.optimizer.warmup_fraction/weight_decay out of range".into()));
        }
        Ok(())
    }
}

pub struct TrainContext<'a> {
    pub irs: &'a [DeviceImpulseResponse],
    pub log: &'a mut MetricsLog,
    /// Where top-k checkpoint files are kept, if anywhere.
    pub checkpoint_dir: Option<&'a Path>,
    /// Run name used in metrics and checkpoint file names.
    pub run: String,
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    /// Weights after the last epoch.
    pub net: Network,
    /// Best checkpoints first.
    pub top: Vec<Checkpoint>,
    pub checkpoint_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub net: Network,
    pub adapters: Vec<FeatureAdapter>,
    pub top: Vec<Checkpoint>,
    pub checkpoint_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_device: BTreeMap<String, f64>,
    pub n: usize,
}

/// Stacks equal-length clips into a `[B, 1, mels, frames]` log-Mel batch.
pub fn featurize_batch(ex: &LogMelExtractor, waves: &[&[f32]]) -> Result<Tensor, TrainError> {
    let Some(first) = waves.first() else {
        return Err(TrainError::Input("cannot featurize an empty batch".into()));
    };
    if let Some(w) = waves.iter().find(|w| w.len() != first.len()) {
        return Err(TrainError::Input(format!("clips in a batch differ in length ({} vs {})", w.len(), first.len())));
    }
    let mut values = Vec::new();
    let mut dims = (0, 0);
    for w in waves {
        let s = ex.compute(w)?;
        dims = (s.n_mels, s.n_frames);
        values.extend(s.data.iter().map(|&v| v as f64));
    }
    Ok(Tensor::new(vec![waves.len(), 1, dims.0, dims.1], values)?)
}

fn augment_wave(
    wave: &[f32],
    aug: &AugmentConfig,
    irs: &[DeviceImpulseResponse],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f32>, TrainError> {
    let mut w = if aug.time_roll_max_samples > 0 {
        time_roll(wave, aug.time_roll_max_samples, rng)?
    } else {
        wave.to_vec()
    };
    if aug.dir_prob > 0.0 {
        w = dir_augment(&w, irs, aug.dir_prob, rng)?;
    }
    Ok(w)
}

#[derive(Default)]
struct Extractors(BTreeMap<Preset, LogMelExtractor>);

impl Extractors {
    fn get(&mut self, p: Preset) -> Result<&LogMelExtractor, TrainError> {
        if !self.0.contains_key(&p) {
            self.0.insert(p, LogMelExtractor::new(&p.config())?);
        }
        Ok(&self.0[&p])
    }
}

fn check_frontend(net: &Network) -> Result<(), TrainError> {
    let s = net.spec();
    let mels = s.frontend.config().n_mels;
    if s.input_mels != mels {
        return Err(TrainError::Config(format!(
            "`{}` expects {} mel bins but its `{}` front-end produces {mels}",
            s.name, s.input_mels, s.frontend
        )));
    }
    Ok(())
}

/// Eval-mode logits for the clips `idx`, using un-augmented features.
fn predict_logits(net: &Network, data: &Dataset, idx: &[usize], ex: &mut Extractors) -> Result<Vec<Tensor>, TrainError> {
    check_frontend(net)?;
    let ex = ex.get(net.spec().frontend)?;
    idx.chunks(EVAL_BATCH)
        .map(|chunk| {
            let waves: Vec<&[f32]> = chunk.iter().map(|&i| data.waves[i].as_slice()).collect();
            let x = featurize_batch(ex, &waves)?;
            Ok(net.infer(x)?.0)
        })
        .collect()
}

fn logits_to_preds(batches: &[Tensor]) -> Vec<usize> {
    batches
        .iter()
        .flat_map(|t| {
            let k = t.shape()[1];
            t.values().chunks(k).map(argmax).collect::<Vec<_>>()
        })
        .collect()
}

fn mean_ce(batches: &[Tensor], labels: &[usize]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0;
    for t in batches {
        let k = t.shape()[1];
        for (row, p) in softmax_rows(t)?.chunks(k).zip(&labels[n..]) {
            total -= row[*p].max(1e-300).ln();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Top-1 accuracy of `preds` (aligned with `idx`), overall and per device.
pub fn accuracy_report(index: &DatasetIndex, idx: &[usize], preds: &[usize]) -> Result<EvalReport, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::Input("cannot evaluate an empty split".into()));
    }
    if idx.len() != preds.len() {
        return Err(TrainError::Input(format!("{} predictions for {} clips", preds.len(), idx.len())));
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&i, &p) in idx.iter().zip(preds) {
        let it = &index.items[i];
        let e = per.entry(it.device.clone()).or_default();
        e.1 += 1;
        if it.label == p {
            correct += 1;
            e.0 += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / idx.len() as f64,
        per_device: per.into_iter().map(|(d, (c, n))| (d, c as f64 / n as f64)).collect(),
        n: idx.len(),
    })
}

pub fn evaluate(net: &Network, data: &Dataset, split: Split) -> Result<EvalReport, TrainError> {
    let idx = data.index.split(split);
    if idx.is_empty() {
        return Err(TrainError::Input(format!("split {split:?} is empty")));
    }
    let logits = predict_logits(net, data, &idx, &mut Extractors::default())?;
    accuracy_report(&data.index, &idx, &logits_to_preds(&logits))
}

/// Accuracy of the argmax of the mean teacher softmax.
pub fn evaluate_ensemble(teachers: &[Network], data: &Dataset, split: Split) -> Result<EvalReport, TrainError> {
    let idx = data.index.split(split);
    if idx.is_empty() {
        return Err(TrainError::Input(format!("split {split:?} is empty")));
    }
    let mut ex = Extractors::default();
    let per_teacher: Vec<Vec<Tensor>> =
        teachers.iter().map(|t| predict_logits(t, data, &idx, &mut ex)).collect::<Result<_, _>>()?;
    let mut preds = Vec::with_capacity(idx.len());
    for b in 0..per_teacher.first().map_or(0, |v| v.len()) {
        let logits: Vec<Tensor> = per_teacher.iter().map(|t| t[b].clone()).collect();
        preds.extend(ensemble_soft_targets(&logits)?.argmax());
    }
    accuracy_report(&data.index, &idx, &preds)
}

struct Optimizer {
    hp: AdamW,
    schedule: LrSchedule,
    states: Vec<AdamState>,
    step: usize,
}

impl Optimizer {
    fn new(hp: &AdamW, total_steps: usize) -> Self {
        Self {
            hp: hp.clone(),
            schedule: LrSchedule::new(hp.lr, total_steps, hp.warmup_fraction),
            states: Vec::new(),
            step: 0,
        }
    }

    /// Updates each tensor with its gradient (absent = zero) and rounds it to f32.
    fn update(&mut self, params: Vec<(&mut Tensor, Option<&[f64]>)>) -> Result<(), TrainError> {
        if self.states.len() != params.len() {
            self.states = params.iter().map(|(t, _)| AdamState::new(t.len())).collect();
        }
        let lr = self.schedule.lr_at(self.step);
        let mut zeros = Vec::new();
        for ((t, g), st) in params.into_iter().zip(&mut self.states) {
            let g = match g {
                Some(g) => g,
                None => {
                    zeros.resize(t.len(), 0.0);
                    &zeros[..t.len()]
                }
            };
            adamw_step(t.values_mut(), g, st, &self.hp, lr)?;
            t.round_to_f32();
        }
        self.step += 1;
        Ok(())
    }
}

struct Teachers<'a> {
    nets: &'a [Network],
    feature: Option<usize>,
    cfg: &'a DistillConfig,
}

struct TopK {
    k: usize,
    /// (accuracy, epoch, checkpoint, path)
    entries: Vec<(f64, usize, Checkpoint, Option<PathBuf>)>,
}

impl TopK {
    fn offer(&mut self, acc: f64, epoch: usize, ckpt: Checkpoint, dir: Option<&Path>, run: &str) -> Result<(), TrainError> {
        let path = match dir {
            Some(d) => {
                let p = d.join(format!("{run}_epoch{epoch:03}.ckpt"));
                ckpt.save(&p)?;
                Some(p)
            }
            None => None,
        };
        self.entries.push((acc, epoch, ckpt, path));
        // Higher accuracy first; ties go to the later epoch.
        self.entries
            .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(b.1.cmp(&a.1)));
        for (_, _, _, p) in self.entries.drain(self.k.min(self.entries.len())..) {
            if let Some(p) = p {
                fs::remove_file(&p)?;
            }
        }
        Ok(())
    }
}

struct FitOutput {
    net: Network,
    adapters: Vec<FeatureAdapter>,
    top: TopK,
}

#[derive(Default)]
struct EpochSums {
    soft: f64,
    feat: f64,
    ce: f64,
    total: f64,
    correct: usize,
    seen: usize,
    batches: usize,
}

fn fit(
    mut net: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    teachers: Option<Teachers<'_>>,
    ctx: &mut TrainContext<'_>,
) -> Result<FitOutput, TrainError> {
    let preset = net.spec().frontend;
    cfg.validate(preset)?;
    check_frontend(&net)?;
    let aug = cfg.resolved_augment(preset);
    if aug.dir_prob > 0.0 && ctx.irs.is_empty() {
        return Err(TrainError::Config("DIR augmentation is enabled but no impulse responses are loaded".into()));
    }
    let train_idx = data.index.split(Split::Train);
    let valid_idx = data.index.split(Split::Valid);
    if train_idx.len() < 2 {
        return Err(TrainError::Input(format!("training needs at least 2 clips, got {}", train_idx.len())));
    }
    if let Some(t) = &teachers {
        t.cfg.validate()?;
        if t.nets.is_empty() {
            return Err(TrainError::Config("distillation needs at least one teacher".into()));
        }
        for n in t.nets {
            check_frontend(n)?;
        }
        if t.cfg.beta > 0.0 && t.feature.is_none_or(|f| f >= t.nets.len()) {
            return Err(TrainError::Config("feature distillation needs a feature teacher among the teachers".into()));
        }
    }
    let mut ex = Extractors::default();
    let batches_per_epoch = {
        let full = train_idx.len() / cfg.batch_size;
        let rest = train_idx.len() % cfg.batch_size;
        full + usize::from(rest >= 2)
    };
    let mut opt = Optimizer::new(&cfg.optimizer, cfg.epochs * batches_per_epoch);
    let mut adapters: Vec<FeatureAdapter> = Vec::new();
    let mut top = TopK {
        k: cfg.keep_top_k,
        entries: Vec::new(),
    };
    let valid_labels: Vec<usize> = valid_idx.iter().map(|&i| data.index.items[i].label).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut substream(cfg.seed, DOMAIN_SHUFFLE, epoch as u64, 0));
        let mut sums = EpochSums::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let waves: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = substream(cfg.seed, DOMAIN_AUGMENT, epoch as u64, i as u64);
                    augment_wave(&data.waves[i], &aug, ctx.irs, &mut rng)
                })
                .collect::<Result<_, _>>()?;
            let wave_refs: Vec<&[f32]> = waves.iter().map(|w| w.as_slice()).collect();
            let mut x = featurize_batch(ex.get(preset)?, &wave_refs)?;
            if let Some(m) = aug.mixstyle {
                let mut rng = substream(cfg.seed, DOMAIN_MIXSTYLE, epoch as u64, bi as u64);
                x = freq_mixstyle(&x, m.alpha_mix, m.p, &mut rng)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.index.items[i].label).collect();

            // Un-mixed student features, reusable by teachers on the same front-end.
            let student_x = if teachers.is_some() && aug.mixstyle.is_none() { Some(x.clone()) } else { None };
            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = net.forward(&mut g, xv, Mode::Train)?;
            let ce = g.cross_entropy(out.logits, &labels)?;
            let mut soft = None;
            let mut feat = None;
            let mut adapter_vars: Vec<Var> = Vec::new();
            let loss = match &teachers {
                None => ce,
                Some(t) => {
                    let dc = t.cfg;
                    let need_soft = dc.alpha > 0.0;
                    let need_feat = dc.beta > 0.0;
                    let mut teacher_logits = Vec::new();
                    let mut teacher_feats = None;
                    if need_soft || need_feat {
                        // Presets with identical front-end settings share one extraction.
                        let mut shared: Vec<(Preset, Tensor)> = student_x.into_iter().map(|x| (preset, x)).collect();
                        for (ti, tn) in t.nets.iter().enumerate() {
                            let is_feat = need_feat && t.feature == Some(ti);
                            if !need_soft && !is_feat {
                                continue;
                            }
                            let tp = tn.spec().frontend;
                            let tx = match shared.iter().find(|(p, _)| p.config() == tp.config()) {
                                Some((_, x)) => x.clone(),
                                None => {
                                    let x = featurize_batch(ex.get(tp)?, &wave_refs)?;
                                    shared.push((tp, x.clone()));
                                    x
                                }
                            };
                            let (logits, feats) = tn.infer(tx)?;
                            teacher_logits.push(logits);
                            if is_feat {
                                teacher_feats = Some(feats);
                            }
                        }
                    }
                    if need_soft {
                        let targets = ensemble_soft_targets(&teacher_logits)?;
                        soft = Some(soft_loss_var(&mut g, out.logits, &targets, dc.temperature, dc.kl_direction)?);
                    }
                    if let Some(tf) = teacher_feats {
                        let tvars = tf.map(|f| g.constant(f));
                        if dc.feature_method == FeatureMethod::Dfm {
                            if adapters.is_empty() {
                                adapters = dc
                                    .stages
                                    .iter()
                                    .map(|&s| {
                                        let cs = g.value(out.features[s - 1]).shape()[1];
                                        let ct = g.value(tvars[s - 1]).shape()[1];
                                        FeatureAdapter::new(cs, ct, derive_seed(cfg.seed, DOMAIN_ADAPTER, s as u64, 0))
                                    })
                                    .collect();
                            }
                            adapter_vars = adapters.iter().map(|a| g.leaf(a.weight.clone(), true)).collect();
                        }
                        feat = Some(feature_loss_var(&mut g, &out.features, &tvars, &adapter_vars, dc)?);
                    }
                    combined_loss_var(&mut g, soft, feat, ce, dc)?
                }
            };
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(TrainError::Divergence(format!(
                    "{}: non-finite loss at epoch {epoch}, batch {bi}",
                    ctx.run
                )));
            }
            g.backward(loss)?;

            let k = g.value(out.logits).shape()[1];
            for (row, &y) in g.value(out.logits).values().chunks(k).zip(&labels) {
                sums.correct += usize::from(argmax(row) == y);
            }
            sums.seen += labels.len();
            sums.batches += 1;
            sums.ce += g.value(ce).item()?;
            sums.total += lv;
            if let Some(s) = soft {
                sums.soft += g.value(s).item()?;
            }
            if let Some(f) = feat {
                sums.feat += g.value(f).item()?;
            }

            let grads: Vec<Option<Vec<f64>>> = net
                .params()
                .iter()
                .zip(&out.params)
                .filter(|(p, _)| p.trainable)
                .map(|(_, v)| g.grad(*v).map(|s| s.to_vec()))
                .chain(adapter_vars.iter().map(|v| g.grad(*v).map(|s| s.to_vec())))
                .collect();
            let mut targets: Vec<&mut Tensor> =
                net.params_mut().iter_mut().filter(|p| p.trainable).map(|p| &mut p.tensor).collect();
            targets.extend(adapters.iter_mut().map(|a| &mut a.weight));
            opt.update(targets.into_iter().zip(grads.iter().map(|g| g.as_deref())).collect())?;
            net.update_running_stats(&out.batch_stats);
        }

        let nb = sums.batches.max(1) as f64;
        let train_acc = sums.correct as f64 / sums.seen.max(1) as f64;
        let has_teachers = teachers.as_ref();
        ctx.log.push(MetricsRecord {
            run: ctx.run.clone(),
            epoch,
            split: Split::Train,
            loss_soft: has_teachers.filter(|t| t.cfg.alpha > 0.0).map(|_| sums.soft / nb),
            loss_feat: has_teachers.filter(|t| t.cfg.beta > 0.0).map(|_| sums.feat / nb),
            loss_ce: sums.ce / nb,
            loss_total: sums.total / nb,
            accuracy: train_acc,
        })?;
        let rank_acc = if valid_idx.is_empty() {
            train_acc
        } else {
            let logits = predict_logits(&net, data, &valid_idx, &mut ex)?;
            let preds = logits_to_preds(&logits);
            let acc = accuracy_report(&data.index, &valid_idx, &preds)?.accuracy;
            let ce = mean_ce(&logits, &valid_labels)?;
            ctx.log.push(MetricsRecord {
                run: ctx.run.clone(),
                epoch,
                split: Split::Valid,
                loss_soft: None,
                loss_feat: None,
                loss_ce: ce,
                loss_total: ce,
                accuracy: acc,
            })?;
            acc
        };
        let ckpt = net.to_checkpoint(net.checkpoint_meta(epoch, rank_acc, cfg.seed));
        top.offer(rank_acc, epoch, ckpt, ctx.checkpoint_dir, &ctx.run)?;
        ctx.log.push_timing(TimingRecord {
            run: ctx.run.clone(),
            epoch,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        })?;
    }
    Ok(FitOutput { net, adapters, top })
}

fn split_top(top: TopK) -> (Vec<Checkpoint>, Vec<PathBuf>) {
    let paths = top.entries.iter().filter_map(|e| e.3.clone()).collect();
    (top.entries.into_iter().map(|e| e.2).collect(), paths)
}

/// Cross-entropy training with the teacher's preset augmentations. The
/// network is initialised from `cfg.seed` and the spec name.
pub fn train_teacher(spec: NetworkSpec, data: &Dataset, cfg: &TrainConfig, ctx: &mut TrainContext<'_>) -> Result<TeacherRun, TrainError> {
    let init = derive_seed(cfg.seed, DOMAIN_INIT, name_hash(&spec.name), 0);
    let net = Network::new(spec, init)?;
    let out = fit(net, data, cfg, None, ctx)?;
    let (top, checkpoint_paths) = split_top(out.top);
    Ok(TeacherRun {
        net: out.net,
        top,
        checkpoint_paths,
    })
}

/// Plain cross-entropy training of an already-built student.
pub fn train_student_ce(student: Network, data: &Dataset, cfg: &TrainConfig, ctx: &mut TrainContext<'_>) -> Result<StudentRun, TrainError> {
    let out = fit(student, data, cfg, None, ctx)?;
    let (top, checkpoint_paths) = split_top(out.top);
    Ok(StudentRun {
        net: out.net,
        adapters: out.adapters,
        top,
        checkpoint_paths,
    })
}

/// Distils frozen `teachers` into `student`. Each teacher sees its own
/// front-end of the same augmented audio; `feature_teacher` indexes the
/// teacher whose stage features supervise the feature loss.
pub fn distill_student(
    student: Network,
    teachers: &[Network],
    feature_teacher: Option<usize>,
    data: &Dataset,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    ctx: &mut TrainContext<'_>,
) -> Result<StudentRun, TrainError> {
    let t = Teachers {
        nets: teachers,
        feature: feature_teacher,
        cfg: distill,
    };
    let out = fit(student, data, cfg, Some(t), ctx)?;
    let (top, checkpoint_paths) = split_top(out.top);
    Ok(StudentRun {
        net: out.net,
        adapters: out.adapters,
        top,
        checkpoint_paths,
    })
}
