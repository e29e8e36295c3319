//! Parameter, memory and MAC accounting against the challenge budgets.
//!
//! Conventions: batchnorm running statistics are not parameters; norm,
//! activation and pooling layers cost zero MACs; MACs are per example, so the
//! batch dimension of the input shape never multiplies them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::models::{Block, Network, NetworkSpec};
use crate::nn::{LayerSpec, NnError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub path: String,
    pub kind: String,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub network: String,
    pub param_count: u64,
    pub dtype_width: u64,
    pub param_memory_bytes: u64,
    pub macs: u64,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerReport>,
}

impl ComplexityReport {
    pub fn from_layers(network: &str, input_shape: Vec<usize>, layers: Vec<LayerReport>, dtype_width: u64) -> Self {
        let param_count = layers.iter().map(|l| l.params).sum();
        Self {
            network: network.to_string(),
            param_count,
            dtype_width,
            param_memory_bytes: param_count * dtype_width,
            macs: layers.iter().map(|l| l.macs).sum(),
            input_shape,
            layers,
        }
    }

    /// Copy without the layer at `index`, totals recomputed.
    pub fn without_layer(&self, index: usize) -> Self {
        let mut layers = self.layers.clone();
        layers.remove(index);
        Self::from_layers(&self.network, self.input_shape.clone(), layers, self.dtype_width)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}  input {:?}", self.network, self.input_shape)?;
        writeln!(f, "{:<28} {:<18} {:>18} {:>8} {:>12}", "layer", "kind", "output", "params", "macs")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<28} {:<18} {:>18} {:>8} {:>12}",
                l.path,
                l.kind,
                format!("{:?}", l.output_shape),
                l.params,
                l.macs
            )?;
        }
        writeln!(
            f,
            "total: {} params, {} bytes at {} B/value, {} MACs",
            self.param_count, self.param_memory_bytes, self.dtype_width, self.macs
        )
    }
}

/// Challenge limits. "128kB" is read as 128,000 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub memory_bytes: u64,
    pub macs: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            memory_bytes: 128_000,
            macs: 30_000_000,
        }
    }
}

/// float16 inference.
pub const DEFAULT_DTYPE_WIDTH: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub pass: bool,
    pub memory_pass: bool,
    pub macs_pass: bool,
    pub param_memory_bytes: u64,
    pub macs: u64,
    /// Budget minus usage; negative on violation.
    pub memory_margin_bytes: i64,
    pub macs_margin: i64,
    /// Margins as a fraction of the budget.
    pub memory_margin_frac: f64,
    pub macs_margin_frac: f64,
}

pub fn check_constraints(report: &ComplexityReport, budget: Budget, dtype_width: u64) -> BudgetCheck {
    check_totals(report.param_count, report.macs, budget, dtype_width)
}

pub fn check_totals(param_count: u64, macs: u64, budget: Budget, dtype_width: u64) -> BudgetCheck {
    let mem = param_count * dtype_width;
    let memory_margin_bytes = budget.memory_bytes as i64 - mem as i64;
    let macs_margin = budget.macs as i64 - macs as i64;
    let frac = |m: i64, b: u64| if b == 0 { 0.0 } else { m as f64 / b as f64 };
    BudgetCheck {
        pass: memory_margin_bytes >= 0 && macs_margin >= 0,
        memory_pass: memory_margin_bytes >= 0,
        macs_pass: macs_margin >= 0,
        param_memory_bytes: mem,
        macs,
        memory_margin_bytes,
        macs_margin,
        memory_margin_frac: frac(memory_margin_bytes, budget.memory_bytes),
        macs_margin_frac: frac(macs_margin, budget.macs),
    }
}

fn layer_name(l: &LayerSpec) -> String {
    serde_json::to_value(l)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str().map(str::to_string)))
        .unwrap_or_else(|| format!("{:?}", l.kind()))
}

fn layer_report(path: String, l: &LayerSpec, input: &[usize]) -> Result<(LayerReport, Vec<usize>), NnError> {
    let out = l.output_shape(input)?;
    let rep = LayerReport {
        path,
        kind: layer_name(l),
        input_shape: input.to_vec(),
        output_shape: out.clone(),
        params: l.trainable_params(),
        macs: l.macs(input)?,
    };
    Ok((rep, out))
}

fn run_seq(prefix: &str, ls: &[LayerSpec], mut shape: Vec<usize>, out: &mut Vec<LayerReport>) -> Result<Vec<usize>, NnError> {
    for (i, l) in ls.iter().enumerate() {
        let (rep, next) = layer_report(format!("{prefix}.{i}"), l, &shape)?;
        out.push(rep);
        shape = next;
    }
    Ok(shape)
}

fn run_block(prefix: &str, b: &Block, shape: Vec<usize>, out: &mut Vec<LayerReport>) -> Result<Vec<usize>, NnError> {
    match b {
        Block::Sequential(ls) => run_seq(prefix, ls, shape, out),
        Block::Residual { body, shortcut } => {
            let a = run_seq(&format!("{prefix}.body"), body, shape.clone(), out)?;
            let s = run_seq(&format!("{prefix}.shortcut"), shortcut, shape, out)?;
            if a != s {
                return Err(NnError::Shape {
                    op: "residual",
                    expected: format!("{a:?}"),
                    got: format!("{s:?}"),
                });
            }
            Ok(a)
        }
    }
}

/// Per-layer breakdown for a network spec at `input_shape` (`[B, 1, mels, frames]`).
pub fn analyze_spec(spec: &NetworkSpec, input_shape: &[usize], dtype_width: u64) -> Result<ComplexityReport, NnError> {
    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    for (bi, b) in spec.stem.iter().enumerate() {
        shape = run_block(&format!("stem.{bi}"), b, shape, &mut layers)?;
    }
    for (si, stage) in spec.stages.iter().enumerate() {
        for (bi, b) in stage.iter().enumerate() {
            shape = run_block(&format!("stage{}.{bi}", si + 1), b, shape, &mut layers)?;
        }
    }
    run_seq("head", &spec.head, shape, &mut layers)?;
    Ok(ComplexityReport::from_layers(&spec.name, input_shape.to_vec(), layers, dtype_width))
}

pub fn analyze(net: &Network, input_shape: &[usize], dtype_width: u64) -> Result<ComplexityReport, NnError> {
    analyze_spec(net.spec(), input_shape, dtype_width)
}

/// Trainable parameters plus batchnorm affine terms; running statistics excluded.
pub fn count_params(net: &Network) -> u64 {
    net.spec().layers().iter().map(|l| l.layer.trainable_params()).sum()
}

pub fn count_macs(net: &Network, input_shape: &[usize]) -> Result<u64, NnError> {
    Ok(analyze(net, input_shape, DEFAULT_DTYPE_WIDTH)?.macs)
}
