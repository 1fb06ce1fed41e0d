use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdm_tensor::gradcheck::{check_gradients, relative_error};
use tsdm_tensor::{Tape, Tensor, Var};

const H: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -2.0, 2.0).with_requires_grad(true)
}

/// Contracts `y` against a fixed random probe so every output entry matters.
fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> tsdm_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

#[test]
fn silu_derivative_at_zero_matches_central_difference() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.silu(x).unwrap();
    let analytic = tape.backward(y).unwrap().get(x).unwrap().data()[0];
    let f = |v: f64| Tensor::scalar(v).silu().unwrap().data()[0];
    let numeric = (f(H) - f(-H)) / (2.0 * H);
    assert!((analytic - 0.5).abs() < 1e-15);
    assert!((analytic - numeric).abs() < 1e-6);
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [param(&mut rng, &[3, 4]), param(&mut rng, &[4, 2])];
    let report = check_gradients(&inputs, H, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe_loss(t, y, 11)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [param(&mut rng, &[2, 8]), param(&mut rng, &[3, 2, 3])];
    let report = check_gradients(&inputs, H, |t, v| {
        let y = t.conv1d(v[0], v[1], 1, 1)?;
        probe_loss(t, y, 12)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");

    let report = check_gradients(&inputs, H, |t, v| {
        let y = t.conv1d(v[0], v[1], 2, 1)?;
        probe_loss(t, y, 13)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "strided: {report:?}");
}

#[test]
fn group_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        param(&mut rng, &[4, 6]),
        param(&mut rng, &[4]),
        param(&mut rng, &[4]),
    ];
    for groups in [1, 2, 4] {
        let report = check_gradients(&inputs, H, |t, v| {
            let y = t.group_norm(v[0], groups, v[1], v[2])?;
            probe_loss(t, y, 14)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "groups={groups}: {report:?}");
    }
}

#[test]
fn self_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        param(&mut rng, &[4, 6]),
        param(&mut rng, &[4, 4]),
        param(&mut rng, &[4, 4]),
        param(&mut rng, &[4, 4]),
    ];
    let report = check_gradients(&inputs, H, |t, v| {
        let y = t.self_attention(v[0], v[1], v[2], v[3])?;
        probe_loss(t, y, 15)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        param(&mut rng, &[3, 4]),
        param(&mut rng, &[2, 4]),
        param(&mut rng, &[5]),
    ];
    let report = check_gradients(&inputs, H, |t, v| {
        let cat = t.concat_channels(v[0], v[1])?;
        let up = t.upsample_nearest(cat, 2)?;
        let biased = t.add_channel(up, v[2])?;
        let tr = t.transpose(biased)?;
        let flat = t.reshape(tr, [40])?;
        let y = t.silu(flat)?;
        probe_loss(t, y, 16)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn composed_conv_norm_silu_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [
        uniform(&mut rng, &[2, 8], -2.0, 2.0),
        param(&mut rng, &[4, 2, 3]),
        param(&mut rng, &[4]),
        param(&mut rng, &[4]),
        param(&mut rng, &[4]),
    ];
    let report = check_gradients(&inputs, H, |t, v| {
        let h = t.conv1d(v[0], v[1], 1, 1)?;
        let h = t.add_channel(h, v[2])?;
        let h = t.group_norm(h, 2, v[3], v[4])?;
        let h = t.silu(h)?;
        t.sum(h)
    })
    .unwrap();
    assert_eq!(report.per_input[0], 0.0, "constant input is not checked");
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn mse_matches_hand_composition() {
    let a = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
    let b = Tensor::new([3], vec![0.0, 1.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(a), tape.constant(b));
    let loss = tape.mse(va, vb).unwrap();
    assert_eq!(tape.value(loss).item().unwrap(), (1.0 + 9.0) / 3.0);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(va).unwrap().data(), &[2.0 / 3.0, -6.0 / 3.0, 0.0]);
}

#[test]
fn ops_are_pure_and_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, &[4, 6], -2.0, 2.0);
    let k = uniform(&mut rng, &[4, 4, 3], -1.0, 1.0);
    let before = x.clone();
    let y1 = x.conv1d(&k, 1, 1).unwrap().silu().unwrap();
    let y2 = x.conv1d(&k, 1, 1).unwrap().silu().unwrap();
    assert_eq!(x, before);
    assert_eq!(y1, y2);
}

#[test]
fn chain_rule_on_scalar_probe() {
    // f(x) = silu(3x)^2 at x = 0.4, derivative by hand
    let x0 = 0.4f64;
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(x0));
    let u = tape.scale(x, 3.0).unwrap();
    let s = tape.silu(u).unwrap();
    let y = tape.mul(s, s).unwrap();
    let g = tape.backward(y).unwrap().get(x).unwrap().data()[0];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let u0 = 3.0 * x0;
    let silu = u0 * sig(u0);
    let dsilu = sig(u0) * (1.0 + u0 * (1.0 - sig(u0)));
    let expected = 2.0 * silu * dsilu * 3.0;
    assert!(relative_error(g, expected) < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elementwise_ops_match_finite_differences(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 6),
        s in -2.0f64..2.0,
    ) {
        let ta = Tensor::new([6], a).unwrap().with_requires_grad(true);
        let tb = Tensor::new([6], b).unwrap().with_requires_grad(true);
        let report = check_gradients(&[ta.clone(), tb], H, |t, v| {
            let sum = t.add(v[0], v[1])?;
            let diff = t.sub(v[0], v[1])?;
            let prod = t.mul(sum, diff)?;
            let scaled = t.scale(prod, s)?;
            let shifted = t.add_scalar(scaled, 0.3)?;
            let act = t.silu(shifted)?;
            probe_loss(t, act, 17)
        }).unwrap();
        prop_assert!(report.max_rel_err < 1e-4, "{:?}", report);

        // sqrt on a strictly positive shift of the input
        let report = check_gradients(&[ta], H, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let pos = t.add_scalar(sq, 0.5)?;
            let r = t.sqrt(pos)?;
            probe_loss(t, r, 18)
        }).unwrap();
        prop_assert!(report.max_rel_err < 1e-4, "{:?}", report);
    }
}
