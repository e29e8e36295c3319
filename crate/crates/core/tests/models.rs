mod common;

use dualkd::audit::{analyze, check_constraints, count_params, Budget};
use dualkd::models::{Checkpoint, Network, NetworkSpec, TeacherPreset};
use dualkd::nn::Tensor;
use proptest::prelude::*;

/// Closed-form student count: stem conv + bn, per stage a separable
/// downsample (dw 3x3, bn, pw, bn) and an inverted residual with expansion 2
/// (pw, bn, dw 3x3, bn, pw, bn), then a linear head with bias.
fn student_count_oracle(ch: [u64; 4]) -> u64 {
    let mut n = 9 * ch[0] + 2 * ch[0];
    for s in 0..3 {
        let (ci, co) = (ch[s], ch[s + 1]);
        n += 9 * ci + 2 * ci + ci * co + 2 * co;
        let e = 2 * co;
        n += co * e + 2 * e + 9 * e + 2 * e + e * co + 2 * co;
    }
    n + ch[3] * 10 + 10
}

fn perturbed(mut net: Network, seed: u64) -> Network {
    let mut r = common::rng(seed);
    for p in net.params_mut() {
        let shape = p.tensor.shape().to_vec();
        let mut t = common::rand_tensor(&mut r, &shape);
        if p.name.ends_with("running_var") {
            t.values_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        }
        t.round_to_f32();
        p.tensor = t;
    }
    net
}

#[test]
fn student_count_matches_oracle() {
    let net = Network::student_micro(1.0, 0).unwrap();
    assert_eq!(count_params(&net), student_count_oracle([8, 16, 24, 32]));
    assert_eq!(net.num_trainable() as u64, count_params(&net));
}

#[test]
fn default_student_fits_budgets_on_a_one_second_clip() {
    let net = Network::student_micro(1.0, 0).unwrap();
    let shape = net.spec().input_shape(32_000);
    assert_eq!(shape, vec![1, 1, 256, 65]);
    let r = analyze(&net, &shape, 2).unwrap();
    let c = check_constraints(&r, Budget::default(), 2);
    assert!(c.pass && r.param_memory_bytes <= 128_000 && r.macs <= 30_000_000);
}

#[test]
fn teachers_are_over_four_times_the_student() {
    let s = count_params(&Network::student_micro(1.0, 0).unwrap());
    for p in TeacherPreset::ALL {
        let t = count_params(&Network::teacher_micro(p, 0).unwrap());
        assert!(t > 4 * s, "{p}: {t} vs {s}");
    }
    assert_eq!(NetworkSpec::teacher_micro(TeacherPreset::Cpresnet1).input_mels, 256);
    assert_eq!(NetworkSpec::teacher_micro(TeacherPreset::PasstSurrogate1).input_mels, 128);
}

#[test]
fn checkpoint_rebuild_reproduces_eval_logits() {
    let dir = tempfile::tempdir().unwrap();
    for net in [
        perturbed(Network::student_micro(1.0, 3).unwrap(), 3),
        perturbed(Network::teacher_micro(TeacherPreset::PasstSurrogate2, 4).unwrap(), 4),
    ] {
        let mut shape = net.spec().input_shape(32_000);
        shape[0] = 2;
        let x = common::rand_tensor(&mut common::rng(9), &shape);
        let path = dir.path().join(format!("{}.ckpt", net.spec().name));
        net.to_checkpoint(net.checkpoint_meta(7, 0.5, 1)).save(&path).unwrap();
        let back = Network::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let (a, _) = net.infer(x.clone()).unwrap();
        let (b, _) = back.infer(x).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(net.fingerprint(), back.fingerprint());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn any_width_emits_ten_logits_and_shrinking_stages(width in 0.25f64..2.0, batch in 1usize..4, seed in any::<u64>()) {
        let net = Network::student_micro(width, seed).unwrap();
        let mut shape = net.spec().input_shape(16_000);
        shape[0] = batch;
        let x = common::rand_tensor(&mut common::rng(seed), &shape);
        let (logits, feats) = net.infer(x.clone()).unwrap();
        prop_assert_eq!(logits.shape(), &[batch, 10]);
        prop_assert_eq!(feats.len(), 3);
        for w in feats.windows(2) {
            prop_assert!(w[0].shape()[2] >= w[1].shape()[2] && w[0].shape()[3] >= w[1].shape()[3]);
        }
        let (again, _) = net.infer(x).unwrap();
        prop_assert_eq!(logits, again);
    }

    #[test]
    fn teacher_logits_have_ten_classes(idx in 0usize..4, seed in any::<u64>()) {
        let p = TeacherPreset::ALL[idx];
        let net = Network::teacher_micro(p, seed).unwrap();
        let x: Tensor = common::rand_tensor(&mut common::rng(seed), &net.spec().input_shape(32_000));
        let (logits, _) = net.infer(x).unwrap();
        prop_assert_eq!(logits.shape(), &[1, 10]);
    }
}
