use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Checkpoint, CheckpointMeta, ModelError, N_CLASSES};
use crate::frontend::Preset;
use crate::nn::{BatchStats, ConvSpec, Graph, LayerSpec, Mode, NnError, Tensor, Var};

const BN_MOMENTUM: f64 = 0.1;

/// The four teacher configurations: two CNN surrogates per model family,
/// each bound to its family's front-end preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherPreset {
    Cpresnet1,
    Cpresnet2,
    PasstSurrogate1,
    PasstSurrogate2,
}

impl TeacherPreset {
    pub const ALL: [TeacherPreset; 4] = [
        TeacherPreset::PasstSurrogate1,
        TeacherPreset::PasstSurrogate2,
        TeacherPreset::Cpresnet1,
        TeacherPreset::Cpresnet2,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TeacherPreset::Cpresnet1 => "cpresnet1",
            TeacherPreset::Cpresnet2 => "cpresnet2",
            TeacherPreset::PasstSurrogate1 => "passt_surrogate1",
            TeacherPreset::PasstSurrogate2 => "passt_surrogate2",
        }
    }

    pub fn frontend(self) -> Preset {
        match self {
            TeacherPreset::Cpresnet1 => Preset::Cpresnet1,
            TeacherPreset::Cpresnet2 => Preset::Cpresnet2,
            TeacherPreset::PasstSurrogate1 => Preset::Passt1,
            TeacherPreset::PasstSurrogate2 => Preset::Passt2,
        }
    }

    pub fn is_cpresnet(self) -> bool {
        matches!(self, TeacherPreset::Cpresnet1 | TeacherPreset::Cpresnet2)
    }
}

impl fmt::Display for TeacherPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for TeacherPreset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TeacherPreset::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown teacher preset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Arch {
    Student { width: f64 },
    Teacher { preset: TeacherPreset },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Sequential(Vec<LayerSpec>),
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub arch: Arch,
    pub frontend: Preset,
    pub input_mels: usize,
    pub width: f64,
    pub n_classes: usize,
    pub stem: Vec<Block>,
    pub stages: Vec<Vec<Block>>,
    pub head: Vec<LayerSpec>,
}

/// One layer in traversal order together with its dotted parameter prefix.
#[derive(Debug, Clone)]
pub struct LayerRef<'a> {
    pub path: String,
    pub layer: &'a LayerSpec,
}

fn bn(c: usize) -> LayerSpec {
    LayerSpec::Batchnorm2d { channels: c }
}

fn separable_down(cin: usize, cout: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::DepthwiseConv2d(ConvSpec::depthwise(cin, 3, 2)),
        bn(cin),
        LayerSpec::Relu,
        LayerSpec::PointwiseConv2d(ConvSpec::pointwise(cin, cout)),
        bn(cout),
        LayerSpec::Relu,
    ]
}

fn inverted_residual(c: usize, expansion: usize) -> Block {
    let hidden = c * expansion;
    Block::Residual {
        body: vec![
            LayerSpec::PointwiseConv2d(ConvSpec::pointwise(c, hidden)),
            bn(hidden),
            LayerSpec::Relu,
            LayerSpec::DepthwiseConv2d(ConvSpec::depthwise(hidden, 3, 1)),
            bn(hidden),
            LayerSpec::Relu,
            LayerSpec::PointwiseConv2d(ConvSpec::pointwise(hidden, c)),
            bn(c),
        ],
        shortcut: Vec::new(),
    }
}

fn basic_residual(c: usize) -> Block {
    Block::Residual {
        body: vec![
            LayerSpec::Conv2d(ConvSpec::new(c, c, 3, 1)),
            bn(c),
            LayerSpec::Relu,
            LayerSpec::Conv2d(ConvSpec::new(c, c, 3, 1)),
            bn(c),
        ],
        shortcut: Vec::new(),
    }
}

fn stem(pool: (usize, usize), channels: usize) -> Vec<Block> {
    vec![Block::Sequential(vec![
        LayerSpec::Avgpool2d {
            kernel: pool,
            stride: pool,
        },
        LayerSpec::Conv2d(ConvSpec::new(1, channels, 3, 2)),
        bn(channels),
        LayerSpec::Relu,
    ])]
}

fn head(channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::GlobalAvgpool,
        LayerSpec::Linear {
            in_features: channels,
            out_features: N_CLASSES,
            bias: true,
        },
    ]
}

impl NetworkSpec {
    pub const STUDENT_BASE_CHANNELS: [usize; 4] = [8, 16, 24, 32];
    pub const TEACHER_CHANNELS: [usize; 4] = [8, 16, 32, 64];

    /// Depthwise-separable student with three stride-2 stages.
    pub fn student_micro(width: f64) -> Result<Self, ModelError> {
        if !(width > 0.0) || !width.is_finite() {
            return Err(ModelError::Config(format!("student width must be > 0, got {width}")));
        }
        let ch: Vec<usize> = Self::STUDENT_BASE_CHANNELS
            .iter()
            .map(|&b| (b as f64 * width).round() as usize)
            .collect();
        if ch.contains(&0) {
            return Err(ModelError::Config(format!("student width {width} produces zero channels")));
        }
        let stage = |i: usize| vec![Block::Sequential(separable_down(ch[i], ch[i + 1])), inverted_residual(ch[i + 1], 2)];
        let frontend = Preset::Cpmobile;
        let spec = Self {
            name: format!("student_micro_w{width}"),
            arch: Arch::Student { width },
            frontend,
            input_mels: frontend.config().n_mels,
            width,
            n_classes: N_CLASSES,
            stem: stem((4, 2), ch[0]),
            stages: vec![stage(0), stage(1), stage(2)],
            head: head(ch[3]),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher_micro(preset: TeacherPreset) -> Self {
        let ch = Self::TEACHER_CHANNELS;
        let frontend = preset.frontend();
        // Bring both resolution families onto a similar post-stem grid.
        let pool = if preset.is_cpresnet() { (4, 2) } else { (2, 4) };
        let mut stage3_entry = separable_down(ch[2], ch[3]);
        stage3_entry.push(LayerSpec::Avgpool2d {
            kernel: (2, 2),
            stride: (2, 2),
        });
        let spec = Self {
            name: format!("teacher_micro_{}", preset.key()),
            arch: Arch::Teacher { preset },
            frontend,
            input_mels: frontend.config().n_mels,
            width: 1.0,
            n_classes: N_CLASSES,
            stem: stem(pool, ch[0]),
            stages: vec![
                vec![Block::Sequential(separable_down(ch[0], ch[1])), inverted_residual(ch[1], 2)],
                vec![Block::Sequential(separable_down(ch[1], ch[2])), inverted_residual(ch[2], 2)],
                vec![Block::Sequential(stage3_entry), basic_residual(ch[3])],
            ],
            head: head(ch[3]),
        };
        spec.validate().expect("teacher presets are well-formed");
        spec
    }

    pub fn from_arch(arch: &Arch) -> Result<Self, ModelError> {
        match arch {
            Arch::Student { width } => Self::student_micro(*width),
            Arch::Teacher { preset } => Ok(Self::teacher_micro(*preset)),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stages.len() != 3 || self.stages.iter().any(|s| s.is_empty()) {
            return Err(ModelError::Config("a network needs exactly three non-empty stages".into()));
        }
        for l in self.layers() {
            l.layer.validate().map_err(|e| ModelError::Config(format!("{}: {e}", l.path)))?;
        }
        match self.head.last() {
            Some(LayerSpec::Linear { out_features, .. }) if *out_features == self.n_classes => Ok(()),
            _ => Err(ModelError::Config(format!("head must end in a linear layer emitting {} logits", self.n_classes))),
        }
    }

    /// All layers in execution order.
    pub fn layers(&self) -> Vec<LayerRef<'_>> {
        let mut out = Vec::new();
        fn block_layers<'a>(prefix: &str, b: &'a Block, out: &mut Vec<LayerRef<'a>>) {
            match b {
                Block::Sequential(ls) => {
                    for (i, l) in ls.iter().enumerate() {
                        out.push(LayerRef {
                            path: format!("{prefix}.{i}"),
                            layer: l,
                        });
                    }
                }
                Block::Residual { body, shortcut } => {
                    for (i, l) in body.iter().enumerate() {
                        out.push(LayerRef {
                            path: format!("{prefix}.body.{i}"),
                            layer: l,
                        });
                    }
                    for (i, l) in shortcut.iter().enumerate() {
                        out.push(LayerRef {
                            path: format!("{prefix}.shortcut.{i}"),
                            layer: l,
                        });
                    }
                }
            }
        }
        for (bi, b) in self.stem.iter().enumerate() {
            block_layers(&format!("stem.{bi}"), b, &mut out);
        }
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                block_layers(&format!("stage{}.{bi}", si + 1), b, &mut out);
            }
        }
        for (i, l) in self.head.iter().enumerate() {
            out.push(LayerRef {
                path: format!("head.{i}"),
                layer: l,
            });
        }
        out
    }

    /// Single-example input shape for a clip of `n_samples` at this network's preset.
    pub fn input_shape(&self, n_samples: usize) -> Vec<usize> {
        vec![1, 1, self.input_mels, self.frontend.config().n_frames(n_samples)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub features: [Var; 3],
    /// Vars bound to each parameter, index-aligned with [`Network::params`].
    pub params: Vec<Var>,
    /// Training-mode batchnorm statistics keyed by layer index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    /// Per layer (in [`NetworkSpec::layers`] order): indices into `params`.
    layer_params: Vec<Vec<usize>>,
}

impl Network {
    /// Builds the network with He-normal weights, unit batchnorm scales and
    /// zero biases, all rounded to f32.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layer_params = Vec::new();
        for l in spec.layers() {
            let mut idx = Vec::new();
            for (role, shape) in l.layer.param_shapes() {
                let len: usize = shape.iter().product();
                let values = match (l.layer, role.suffix()) {
                    (LayerSpec::Batchnorm2d { .. }, "weight") | (_, "running_var") => vec![1.0; len],
                    (_, "weight") => {
                        let fan_in: usize = shape[1..].iter().product();
                        let std = (2.0 / fan_in as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("positive std");
                        (0..len).map(|_| normal.sample(&mut rng) as f32 as f64).collect()
                    }
                    _ => vec![0.0; len],
                };
                idx.push(params.len());
                params.push(Param {
                    name: format!("{}.{}", l.path, role.suffix()),
                    tensor: Tensor::new(shape, values)?,
                    trainable: role.trainable(),
                });
            }
            layer_params.push(idx);
        }
        Ok(Self {
            spec,
            params,
            layer_params,
        })
    }

    pub fn student_micro(width: f64, seed: u64) -> Result<Self, ModelError> {
        Self::new(NetworkSpec::student_micro(width)?, seed)
    }

    pub fn teacher_micro(preset: TeacherPreset, seed: u64) -> Result<Self, ModelError> {
        Self::new(NetworkSpec::teacher_micro(preset), seed)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Bit-level fingerprint of every parameter array, for frozen-weight checks.
    pub fn fingerprint(&self) -> Vec<(String, Vec<u64>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.values().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    /// Records a forward pass. In [`Mode::Train`] trainable parameters are
    /// bound as gradient-carrying leaves and batchnorm uses batch statistics.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardOutput, ModelError> {
        self.forward_with(g, x, mode, mode == Mode::Train)
    }

    pub fn forward_with(&self, g: &mut Graph, x: Var, mode: Mode, param_grads: bool) -> Result<ForwardOutput, ModelError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.spec.input_mels {
            return Err(NnError::Shape {
                op: "network input",
                expected: format!("[B, 1, {}, frames]", self.spec.input_mels),
                got: format!("{shape:?}"),
            }
            .into());
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.leaf(p.tensor.clone(), param_grads)
                } else {
                    // Running statistics are read directly, never recorded.
                    g.constant(Tensor::scalar(0.0))
                }
            })
            .collect();
        let mut run = Runner {
            net: self,
            vars: &vars,
            mode,
            next_layer: 0,
            stats: Vec::new(),
        };
        let mut h = x;
        for b in &self.spec.stem {
            h = run.block(g, b, h)?;
        }
        let mut features = [h; 3];
        for (si, stage) in self.spec.stages.iter().enumerate() {
            for b in stage {
                h = run.block(g, b, h)?;
            }
            features[si] = h;
        }
        for l in &self.spec.head {
            h = run.layer(g, l, h)?;
        }
        let stats = run.stats;
        Ok(ForwardOutput {
            logits: h,
            features,
            params: vars,
            batch_stats: stats,
        })
    }

    /// Eval-mode logits and stage features as plain tensors.
    pub fn infer(&self, x: Tensor) -> Result<(Tensor, [Tensor; 3]), ModelError> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, Mode::Eval)?;
        let feats = out.features.map(|f| g.value(f).clone());
        Ok((g.value(out.logits).clone(), feats))
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            let idx = &self.layer_params[*layer];
            let (rm, rv) = (idx[2], idx[3]);
            for (r, m) in self.params[rm].tensor.values_mut().iter_mut().zip(&s.mean) {
                *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m) as f32 as f64;
            }
            for (r, v) in self.params[rv].tensor.values_mut().iter_mut().zip(&s.var_unbiased) {
                *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v) as f32 as f64;
            }
        }
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            meta,
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.to_f32()))
                .collect(),
        }
    }

    pub fn checkpoint_meta(&self, epoch: usize, val_accuracy: f64, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            arch: self.spec.arch.clone(),
            spec_name: self.spec.name.clone(),
            epoch,
            val_accuracy,
            seed,
            constituents: Vec::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let spec = NetworkSpec::from_arch(&ckpt.meta.arch)?;
        if spec.name != ckpt.meta.spec_name {
            return Err(ModelError::Config(format!(
                "checkpoint spec `{}` does not match architecture `{}`",
                ckpt.meta.spec_name, spec.name
            )));
        }
        let mut net = Self::new(spec, 0)?;
        if net.params.len() != ckpt.tensors.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} arrays, network expects {}",
                ckpt.tensors.len(),
                net.params.len()
            )));
        }
        for (p, (name, shape, values)) in net.params.iter_mut().zip(&ckpt.tensors) {
            if &p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "checkpoint array `{name}` {shape:?} does not match `{}` {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::from_f32(shape.clone(), values)?;
        }
        Ok(net)
    }
}

struct Runner<'a> {
    net: &'a Network,
    vars: &'a [Var],
    mode: Mode,
    next_layer: usize,
    stats: Vec<(usize, BatchStats)>,
}

impl Runner<'_> {
    fn layer(&mut self, g: &mut Graph, l: &LayerSpec, x: Var) -> Result<Var, ModelError> {
        let li = self.next_layer;
        self.next_layer += 1;
        let idx = &self.net.layer_params[li];
        let vars: Vec<Var> = idx.iter().map(|&i| self.vars[i]).collect();
        let running = match l {
            LayerSpec::Batchnorm2d { .. } => Some((
                self.net.params[idx[2]].tensor.values(),
                self.net.params[idx[3]].tensor.values(),
            )),
            _ => None,
        };
        let (y, stats) = l.forward(g, x, &vars, running, self.mode)?;
        if let Some(s) = stats {
            self.stats.push((li, s));
        }
        Ok(y)
    }

    fn block(&mut self, g: &mut Graph, b: &Block, x: Var) -> Result<Var, ModelError> {
        match b {
            Block::Sequential(ls) => {
                let mut h = x;
                for l in ls {
                    h = self.layer(g, l, h)?;
                }
                Ok(h)
            }
            Block::Residual { body, shortcut } => {
                let mut h = x;
                for l in body {
                    h = self.layer(g, l, h)?;
                }
                let mut s = x;
                for l in shortcut {
                    s = self.layer(g, l, s)?;
                }
                let sum = g.add(h, s)?;
                Ok(g.relu(sum)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn student_has_three_stages_and_ten_logits() {
        let net = Network::student_micro(1.0, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 1, 256, 65], 0.1));
        let out = net.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[2, 10]);
        let dims: Vec<Vec<usize>> = out.features.iter().map(|f| g.value(*f).shape().to_vec()).collect();
        assert_eq!(dims[0], vec![2, 16, 16, 8]);
        assert_eq!(dims[1], vec![2, 24, 8, 4]);
        assert_eq!(dims[2], vec![2, 32, 4, 2]);
    }

    #[test]
    fn zero_channel_width_is_a_config_error() {
        assert!(matches!(NetworkSpec::student_micro(0.01), Err(ModelError::Config(_))));
        assert!(matches!(NetworkSpec::student_micro(0.0), Err(ModelError::Config(_))));
        assert!(matches!(NetworkSpec::student_micro(-1.0), Err(ModelError::Config(_))));
    }

    #[test]
    fn input_mel_mismatch_is_a_shape_error() {
        let net = Network::teacher_micro(TeacherPreset::PasstSurrogate1, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 256, 101]));
        assert!(matches!(net.forward(&mut g, x, Mode::Eval), Err(ModelError::Nn(NnError::Shape { .. }))));
    }

    #[test]
    fn teacher_presets_bind_frontends() {
        assert_eq!(NetworkSpec::teacher_micro(TeacherPreset::Cpresnet1).input_mels, 256);
        assert_eq!(NetworkSpec::teacher_micro(TeacherPreset::PasstSurrogate2).input_mels, 128);
        assert!("passt_surrogate3".parse::<TeacherPreset>().is_err());
        for p in TeacherPreset::ALL {
            assert_eq!(p.key().parse::<TeacherPreset>().unwrap(), p);
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let net = Network::teacher_micro(TeacherPreset::Cpresnet2, 0).unwrap();
        let mut names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(net.param("stage3.1.body.0.weight").is_some());
        assert!(net.param("stem.0.2.running_var").is_some());
    }
}
