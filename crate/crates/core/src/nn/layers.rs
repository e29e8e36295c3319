use serde::{Deserialize, Serialize};

use super::{BatchStats, ConvGeometry, Graph, Mode, NnError, Var};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Explicit(usize, usize),
    /// `kernel / 2` on each side; requires an odd kernel.
    Same,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: Padding::Same,
            groups: 1,
            bias: false,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, stride)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            padding: Padding::Explicit(0, 0),
            ..Self::new(in_channels, out_channels, 1, 1)
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn padding(&self) -> (usize, usize) {
        match self.padding {
            Padding::Explicit(h, w) => (h, w),
            Padding::Same => (self.kernel.0 / 2, self.kernel.1 / 2),
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding(),
            groups: self.groups,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv2d,
    Batchnorm2d,
    Relu,
    Avgpool2d,
    GlobalAvgpool,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    DepthwiseConv2d(ConvSpec),
    PointwiseConv2d(ConvSpec),
    Batchnorm2d { channels: usize },
    Relu,
    Avgpool2d { kernel: (usize, usize), stride: (usize, usize) },
    GlobalAvgpool,
    Linear { in_features: usize, out_features: usize, bias: bool },
}

fn cfg_err(msg: String) -> NnError {
    NnError::Input(msg)
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d(_) => LayerKind::Conv2d,
            LayerSpec::DepthwiseConv2d(_) => LayerKind::DepthwiseConv2d,
            LayerSpec::PointwiseConv2d(_) => LayerKind::PointwiseConv2d,
            LayerSpec::Batchnorm2d { .. } => LayerKind::Batchnorm2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Avgpool2d { .. } => LayerKind::Avgpool2d,
            LayerSpec::GlobalAvgpool => LayerKind::GlobalAvgpool,
            LayerSpec::Linear { .. } => LayerKind::Linear,
        }
    }

    fn conv(&self) -> Option<&ConvSpec> {
        match self {
            LayerSpec::Conv2d(c) | LayerSpec::DepthwiseConv2d(c) | LayerSpec::PointwiseConv2d(c) => Some(c),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if let Some(c) = self.conv() {
            if c.in_channels == 0 || c.out_channels == 0 {
                return Err(cfg_err(format!("{:?}: zero channels", self.kind())));
            }
            if c.stride.0 == 0 || c.stride.1 == 0 {
                return Err(cfg_err(format!("{:?}: stride must be >= 1", self.kind())));
            }
            if c.kernel.0 == 0 || c.kernel.1 == 0 {
                return Err(cfg_err(format!("{:?}: kernel must be >= 1", self.kind())));
            }
            if c.groups == 0 || c.in_channels % c.groups != 0 || c.out_channels % c.groups != 0 {
                return Err(cfg_err(format!("{:?}: groups must divide both channel counts", self.kind())));
            }
            if c.padding == Padding::Same && (c.kernel.0 % 2 == 0 || c.kernel.1 % 2 == 0) {
                return Err(cfg_err("same padding needs an odd kernel".into()));
            }
            match self {
                LayerSpec::DepthwiseConv2d(c) if !(c.groups == c.in_channels && c.in_channels == c.out_channels) => {
                    return Err(cfg_err("depthwise conv needs groups == in == out channels".into()))
                }
                LayerSpec::PointwiseConv2d(c) if c.kernel != (1, 1) || c.groups != 1 => {
                    return Err(cfg_err("pointwise conv needs a 1x1 kernel and one group".into()))
                }
                _ => {}
            }
        }
        match *self {
            LayerSpec::Batchnorm2d { channels: 0 } => Err(cfg_err("batchnorm with zero channels".into())),
            LayerSpec::Avgpool2d { kernel, stride } if kernel.0 * kernel.1 * stride.0 * stride.1 == 0 => {
                Err(cfg_err("avgpool kernel and stride must be >= 1".into()))
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } if in_features == 0 || out_features == 0 => Err(cfg_err("linear with zero features".into())),
            _ => Ok(()),
        }
    }

    /// Parameter arrays this layer owns, in storage order.
    pub fn param_shapes(&self) -> Vec<(ParamRole, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d(c) | LayerSpec::DepthwiseConv2d(c) | LayerSpec::PointwiseConv2d(c) => {
                let mut v = vec![(
                    ParamRole::Weight,
                    vec![c.out_channels, c.in_channels / c.groups, c.kernel.0, c.kernel.1],
                )];
                if c.bias {
                    v.push((ParamRole::Bias, vec![c.out_channels]));
                }
                v
            }
            LayerSpec::Batchnorm2d { channels } => vec![
                (ParamRole::Weight, vec![*channels]),
                (ParamRole::Bias, vec![*channels]),
                (ParamRole::RunningMean, vec![*channels]),
                (ParamRole::RunningVar, vec![*channels]),
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![(ParamRole::Weight, vec![*out_features, *in_features])];
                if *bias {
                    v.push((ParamRole::Bias, vec![*out_features]));
                }
                v
            }
            LayerSpec::Relu | LayerSpec::Avgpool2d { .. } | LayerSpec::GlobalAvgpool => Vec::new(),
        }
    }

    /// Trainable parameter count (batchnorm running statistics excluded).
    pub fn trainable_params(&self) -> u64 {
        self.param_shapes()
            .iter()
            .filter(|(r, _)| r.trainable())
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Output shape for a `[B, C, H, W]` (or `[B, F]` for linear) input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let mismatch = |expected: String| NnError::Shape {
            op: "layer",
            expected,
            got: format!("{input:?}"),
        };
        match self {
            LayerSpec::Conv2d(c) | LayerSpec::DepthwiseConv2d(c) | LayerSpec::PointwiseConv2d(c) => {
                let [b, ch, h, w] = *input else {
                    return Err(mismatch("[B, C, H, W]".into()));
                };
                if ch != c.in_channels {
                    return Err(mismatch(format!("{} input channels", c.in_channels)));
                }
                let (ph, pw) = c.padding();
                if h + 2 * ph < c.kernel.0 || w + 2 * pw < c.kernel.1 {
                    return Err(mismatch(format!("spatial dims >= kernel {:?}", c.kernel)));
                }
                Ok(vec![
                    b,
                    c.out_channels,
                    (h + 2 * ph - c.kernel.0) / c.stride.0 + 1,
                    (w + 2 * pw - c.kernel.1) / c.stride.1 + 1,
                ])
            }
            LayerSpec::Batchnorm2d { channels } => match *input {
                [_, ch, _, _] if ch == *channels => Ok(input.to_vec()),
                _ => Err(mismatch(format!("[B, {channels}, H, W]"))),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Avgpool2d { kernel, stride } => match *input {
                [b, ch, h, w] if h >= kernel.0 && w >= kernel.1 => {
                    Ok(vec![b, ch, (h - kernel.0) / stride.0 + 1, (w - kernel.1) / stride.1 + 1])
                }
                _ => Err(mismatch(format!("[B, C, H >= {}, W >= {}]", kernel.0, kernel.1))),
            },
            LayerSpec::GlobalAvgpool => match *input {
                [b, ch, _, _] => Ok(vec![b, ch]),
                _ => Err(mismatch("[B, C, H, W]".into())),
            },
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => match *input {
                [b, f] if f == *in_features => Ok(vec![b, *out_features]),
                _ => Err(mismatch(format!("[B, {in_features}]"))),
            },
        }
    }

    /// Multiply-accumulates for one example. Norm, activation and pooling count as zero.
    pub fn macs(&self, input: &[usize]) -> Result<u64, NnError> {
        let out = self.output_shape(input)?;
        Ok(match self {
            LayerSpec::Conv2d(c) | LayerSpec::DepthwiseConv2d(c) | LayerSpec::PointwiseConv2d(c) => {
                (c.in_channels / c.groups * c.out_channels * c.kernel.0 * c.kernel.1 * out[2] * out[3]) as u64
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => (*in_features * *out_features) as u64,
            _ => 0,
        })
    }

    /// Records this layer on `g`. `params` are the layer's vars in
    /// [`param_shapes`](Self::param_shapes) order; running statistics are passed
    /// separately and only consulted in eval mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        params: &[Var],
        running: Option<(&[f64], &[f64])>,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>), NnError> {
        self.output_shape(g.value(x).shape())?;
        match self {
            LayerSpec::Conv2d(c) | LayerSpec::DepthwiseConv2d(c) | LayerSpec::PointwiseConv2d(c) => {
                let bias = if c.bias { Some(params[1]) } else { None };
                Ok((g.conv2d(x, params[0], bias, c.geometry())?, None))
            }
            LayerSpec::Batchnorm2d { .. } => {
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some(running.ok_or_else(|| {
                        NnError::State("batchnorm in eval mode needs running statistics".into())
                    })?),
                };
                g.batch_norm(x, params[0], params[1], running, BN_EPS)
            }
            LayerSpec::Relu => Ok((g.relu(x)?, None)),
            LayerSpec::Avgpool2d { kernel, stride } => Ok((g.avg_pool2d(x, *kernel, *stride)?, None)),
            LayerSpec::GlobalAvgpool => Ok((g.global_avg_pool(x)?, None)),
            LayerSpec::Linear { bias, .. } => {
                let b = if *bias { Some(params[1]) } else { None };
                Ok((g.linear(x, params[0], b)?, None))
            }
        }
    }
}
