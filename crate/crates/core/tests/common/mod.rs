//! Shared helpers: central finite-difference gradient checks and small
//! random fixtures.
#![allow(dead_code)]

use dualkd::distill::{
    combined_loss_var, dfm_loss_var, ssfm_loss_var, DistillConfig, SoftTargets,
};
use dualkd::nn::{ConvSpec, Graph, KlDirection, LayerSpec, Mode, Padding, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of the difference stencil.
pub fn rand_tensor_off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let vals = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn rand_probs(r: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

/// Builds a scalar from the inputs (all registered as gradient leaves).
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn eval(inputs: &[Tensor], f: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.value(out).item().unwrap()
}

/// Worst relative error over the inputs of analytic against central-difference
/// gradients. Per input the error is `|a - n|_2 / max(|a|_2, |n|_2)`.
pub fn gradcheck(inputs: &[Tensor], f: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= FD_STEP;
            numeric[j] = (eval(&plus, f) - eval(&minus, f)) / (2.0 * FD_STEP);
        }
        let diff = analytic[i].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let err = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(err);
    }
    worst
}

/// A fixed random projection `sum(r ⊙ y)` expressed with graph ops:
/// `mse(y, -r) - mse(y, r)` is `4·mean(r ⊙ y)`.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let r = rand_tensor(&mut rng(seed ^ 0x9e37), &shape);
    let neg = Tensor::new(shape.clone(), r.values().iter().map(|v| -v).collect()).unwrap();
    let rp = g.constant(r);
    let rn = g.constant(neg);
    let a = g.mse(y, rn).unwrap();
    let b = g.mse(y, rp).unwrap();
    g.weighted_sum(&[(a, 1.0), (b, -1.0)]).unwrap()
}

/// One layer plus its parameters as gradient inputs; the output is projected.
fn layer_case(layer: LayerSpec, x_shape: &[usize], mode: Mode, seed: u64, off_zero: bool) -> f64 {
    let mut r = rng(seed);
    let x = if off_zero { rand_tensor_off_zero(&mut r, x_shape) } else { rand_tensor(&mut r, x_shape) };
    let mut inputs = vec![x];
    for (_, shape) in layer.param_shapes().iter().filter(|(role, _)| role.trainable()) {
        inputs.push(rand_tensor(&mut r, shape));
    }
    let channels = match &layer {
        LayerSpec::Batchnorm2d { channels } => *channels,
        _ => 0,
    };
    let rm: Vec<f64> = (0..channels).map(|_| r.random_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..channels).map(|_| r.random_range(0.5..1.5)).collect();
    let f = |g: &mut Graph, v: &[Var]| {
        let running = (mode == Mode::Eval).then_some((rm.as_slice(), rv.as_slice()));
        let (y, _) = layer.forward(g, v[0], &v[1..], running, mode).unwrap();
        project(g, y, seed)
    };
    gradcheck(&inputs, &f)
}

/// Named gradient cases: every layer kind, the graph ops they rest on, and
/// every loss. Each returns the worst relative error over `INSTANCES` draws.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let worst = |f: &dyn Fn(u64) -> f64| (0..INSTANCES).map(|s| f(1000 + s)).fold(0.0, f64::max);

    let mut conv = ConvSpec::new(2, 3, 3, 1).with_bias();
    out.push(("conv2d", worst(&|s| layer_case(LayerSpec::Conv2d(conv.clone()), &[2, 2, 5, 4], Mode::Train, s, false))));
    conv.stride = (2, 1);
    conv.padding = Padding::Explicit(1, 0);
    out.push((
        "conv2d_strided",
        worst(&|s| layer_case(LayerSpec::Conv2d(conv.clone()), &[2, 2, 6, 5], Mode::Train, s, false)),
    ));
    out.push((
        "depthwise_conv2d",
        worst(&|s| layer_case(LayerSpec::DepthwiseConv2d(ConvSpec::depthwise(3, 3, 2)), &[2, 3, 5, 6], Mode::Train, s, false)),
    ));
    out.push((
        "pointwise_conv2d",
        worst(&|s| layer_case(LayerSpec::PointwiseConv2d(ConvSpec::pointwise(3, 4)), &[2, 3, 3, 2], Mode::Train, s, false)),
    ));
    out.push((
        "batchnorm2d_train",
        worst(&|s| layer_case(LayerSpec::Batchnorm2d { channels: 3 }, &[3, 3, 2, 3], Mode::Train, s, false)),
    ));
    out.push((
        "batchnorm2d_eval",
        worst(&|s| layer_case(LayerSpec::Batchnorm2d { channels: 3 }, &[2, 3, 2, 3], Mode::Eval, s, false)),
    ));
    out.push(("relu", worst(&|s| layer_case(LayerSpec::Relu, &[2, 3, 3, 3], Mode::Train, s, true))));
    out.push((
        "avgpool2d",
        worst(&|s| {
            layer_case(
                LayerSpec::Avgpool2d {
                    kernel: (2, 3),
                    stride: (2, 2),
                },
                &[2, 2, 6, 7],
                Mode::Train,
                s,
                false,
            )
        }),
    ));
    out.push(("global_avgpool", worst(&|s| layer_case(LayerSpec::GlobalAvgpool, &[2, 3, 3, 4], Mode::Train, s, false))));
    out.push((
        "linear",
        worst(&|s| {
            layer_case(
                LayerSpec::Linear {
                    in_features: 5,
                    out_features: 4,
                    bias: true,
                },
                &[3, 5],
                Mode::Train,
                s,
                false,
            )
        }),
    ));

    out.push((
        "residual_add",
        worst(&|s| {
            let mut r = rng(s);
            let inputs = [rand_tensor(&mut r, &[2, 2, 3, 3]), rand_tensor(&mut r, &[2, 2, 3, 3])];
            gradcheck(&inputs, &|g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                project(g, y, s)
            })
        }),
    ));
    out.push((
        "adaptive_avgpool2d",
        worst(&|s| {
            let mut r = rng(s);
            let inputs = [rand_tensor(&mut r, &[2, 2, 7, 5])];
            gradcheck(&inputs, &|g, v| {
                let down = g.adaptive_avg_pool2d(v[0], (3, 2)).unwrap();
                let up = g.adaptive_avg_pool2d(v[0], (9, 8)).unwrap();
                let a = project(g, down, s);
                let b = project(g, up, s + 1);
                g.weighted_sum(&[(a, 1.0), (b, 0.5)]).unwrap()
            })
        }),
    ));
    out.push((
        "gram",
        worst(&|s| {
            let mut r = rng(s);
            let inputs = [rand_tensor(&mut r, &[2, 3, 2, 3])];
            gradcheck(&inputs, &|g, v| {
                let y = g.gram(v[0]).unwrap();
                project(g, y, s)
            })
        }),
    ));

    out.push((
        "cross_entropy",
        worst(&|s| {
            let mut r = rng(s);
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            let inputs = [rand_tensor(&mut r, &[4, 5])];
            gradcheck(&inputs, &|g, v| g.cross_entropy(v[0], &labels).unwrap())
        }),
    ));
    for (name, dir) in [("soft_loss", KlDirection::AsWritten), ("soft_loss_teacher_first", KlDirection::TeacherFirst)] {
        out.push((
            name,
            worst(&|s| {
                let mut r = rng(s);
                let targets = SoftTargets {
                    probs: rand_probs(&mut r, 3, 5),
                    batch: 3,
                    n_classes: 5,
                };
                let t = r.random_range(1.0..4.0);
                let inputs = [rand_tensor(&mut r, &[3, 5])];
                gradcheck(&inputs, &|g, v| dualkd::distill::soft_loss_var(g, v[0], &targets, t, dir).unwrap())
            }),
        ));
    }
    out.push((
        "dfm_loss",
        worst(&|s| {
            let mut r = rng(s);
            // Teacher grid larger on one axis and smaller on the other.
            let inputs = [
                rand_tensor(&mut r, &[2, 3, 3, 2]),
                rand_tensor(&mut r, &[2, 4, 5, 1]),
                rand_tensor(&mut r, &[3, 4, 1, 1]),
            ];
            gradcheck(&inputs, &|g, v| dfm_loss_var(g, v[0], v[1], v[2]).unwrap())
        }),
    ));
    out.push((
        "ssfm_loss",
        worst(&|s| {
            let mut r = rng(s);
            let inputs = [rand_tensor(&mut r, &[2, 3, 4, 4]), rand_tensor(&mut r, &[2, 5, 6, 3])];
            gradcheck(&inputs, &|g, v| ssfm_loss_var(g, v[0], v[1], 2).unwrap())
        }),
    ));
    out.push((
        "combined_loss",
        worst(&|s| {
            let mut r = rng(s);
            let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
            let targets = SoftTargets {
                probs: rand_probs(&mut r, 3, 4),
                batch: 3,
                n_classes: 4,
            };
            let cfg = DistillConfig::default();
            let inputs = [
                rand_tensor(&mut r, &[3, 4]),
                rand_tensor(&mut r, &[3, 2, 4, 4]),
                rand_tensor(&mut r, &[3, 3, 4, 4]),
            ];
            gradcheck(&inputs, &|g, v| {
                let soft = dualkd::distill::soft_loss_var(g, v[0], &targets, cfg.temperature, cfg.kl_direction).unwrap();
                let feat = ssfm_loss_var(g, v[1], v[2], 2).unwrap();
                let ce = g.cross_entropy(v[0], &labels).unwrap();
                combined_loss_var(g, Some(soft), Some(feat), ce, &cfg).unwrap()
            })
        }),
    ));
    out
}

/// Naive adaptive average pool of one `[C, H, W]` feature (row-major values).
pub fn pool_oracle(v: &[f64], c: usize, h: usize, w: usize, out: usize) -> Vec<f64> {
    let mut res = vec![0.0; c * out * out];
    for ch in 0..c {
        for i in 0..out {
            let (r0, r1) = (i * h / out, ((i + 1) * h + out - 1) / out);
            for j in 0..out {
                let (c0, c1) = (j * w / out, ((j + 1) * w + out - 1) / out);
                let mut s = 0.0;
                for r in r0..r1 {
                    for q in c0..c1 {
                        s += v[(ch * h + r) * w + q];
                    }
                }
                res[(ch * out + i) * out + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    res
}

/// Brute-force `G[a][b] = sum_c X[c][a] X[c][b] / C` over pooled positions.
pub fn gram_oracle(v: &[f64], c: usize, h: usize, w: usize, pool: usize) -> Vec<f64> {
    let x = pool_oracle(v, c, h, w, pool);
    let n = pool * pool;
    let mut g = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for ch in 0..c {
                s += x[ch * n + a] * x[ch * n + b];
            }
            g[a * n + b] = s / c as f64;
        }
    }
    g
}

/// Worst entrywise gap between `gram()` and the oracle over `count` random features.
pub fn gram_oracle_gap(count: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..count {
        let mut r = rng(500 + s);
        let (c, h, w) = (r.random_range(1..6), r.random_range(2..12), r.random_range(2..12));
        let pool = r.random_range(1..5);
        let f = rand_tensor(&mut r, &[c, h, w]);
        let got = dualkd::distill::gram(&f, pool).unwrap();
        let want = gram_oracle(f.values(), c, h, w, pool);
        for (a, b) in got.values().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Channel-orthogonal transform `Q f` of a `[B, C, H, W]` feature, with `Q`
/// a product of Givens rotations.
pub fn rotate_channels(f: &Tensor, seed: u64) -> Tensor {
    let c = f.shape()[1];
    let mut q = vec![0.0; c * c];
    for i in 0..c {
        q[i * c + i] = 1.0;
    }
    let mut r = rng(seed);
    for _ in 0..3 * c {
        let (i, j) = (r.random_range(0..c), r.random_range(0..c));
        if i == j {
            continue;
        }
        let th: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let (cs, sn) = (th.cos(), th.sin());
        for k in 0..c {
            let (a, b) = (q[i * c + k], q[j * c + k]);
            q[i * c + k] = cs * a - sn * b;
            q[j * c + k] = sn * a + cs * b;
        }
    }
    let (b, hw) = (f.shape()[0], f.shape()[2] * f.shape()[3]);
    let v = f.values();
    let mut out = vec![0.0; v.len()];
    for bi in 0..b {
        for i in 0..c {
            for k in 0..c {
                for p in 0..hw {
                    out[(bi * c + i) * hw + p] += q[i * c + k] * v[(bi * c + k) * hw + p];
                }
            }
        }
    }
    Tensor::new(f.shape().to_vec(), out).unwrap()
}

/// Runs the `dualkd` binary with `args`.
pub fn dualkd(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_dualkd"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Tiny overrides shared by the CLI runs.
pub const TINY: [&str; 10] = [
    "--set",
    "train.n_per_class=5",
    "--set",
    "train.teacher_epochs=1",
    "--set",
    "train.student_epochs=2",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.keep_top_k=1",
];

/// Trains one tiny teacher, then distils into two fresh run directories
/// with the same seed. Returns both `metrics.jsonl` files.
pub fn distill_twice(root: &std::path::Path, seed: &str) -> (Vec<u8>, Vec<u8>) {
    let t = root.join("teacher");
    let mut args = vec!["train-teacher", "--run-dir", t.to_str().unwrap(), "--seed", seed];
    args.extend(TINY);
    let out = dualkd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let soup = t.join("checkpoints/teacher_cpresnet1_soup.ckpt");
    let teachers = format!("paths.teachers=[\"{}\"]", soup.display());
    let run = |name: &str| {
        let d = root.join(name);
        let mut args = vec!["distill", "--run-dir", d.to_str().unwrap(), "--seed", seed, "--set", &teachers];
        args.extend(TINY);
        let out = dualkd(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(d.join("metrics.jsonl")).unwrap()
    };
    (run("a"), run("b"))
}
