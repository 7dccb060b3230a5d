use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, FD_STEP};
use super::*;

const PRIMITIVE_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn assert_gradcheck<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let report = check_gradients(inputs, f, FD_STEP, 200).unwrap();
    assert!(
        report.max_error <= PRIMITIVE_TOL,
        "gradient mismatch: {report:?}"
    );
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::randn(&shape, &mut rng(seed)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn conv_hand_cross_correlation() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &[5.0]);
}

#[test]
fn conv_output_geometry() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 9, 7]));
    let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    // (9 + 2 - 3)/2 + 1 = 5, (7 + 2 - 3)/2 + 1 = 4
    assert_eq!(tape.shape(y), &[2, 4, 5, 4]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, k, 1, 1).unwrap_err();
    assert!(matches!(err, crate::Error::Shape { op: "conv2d", .. }), "{err}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x = Tensor::randn(&[2, 3, 8, 8], &mut rng(1));
    let k = Tensor::randn(&[4, 3, 3, 3], &mut rng(2));
    assert_gradcheck(&[x.clone(), k.clone()], |tape, v| {
        let y = tape.conv2d(v[0], v[1], 1, 1)?;
        weighted_sum(tape, y, 3)
    });
    assert_gradcheck(&[x, k], |tape, v| {
        let y = tape.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(tape, y, 4)
    });
}

#[test]
fn dense_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[1, 2], &[3.0, 4.0]));
    let b = tape.constant(t(&[1], &[5.0]));
    let y = tape.dense(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &[16.0]);

    let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zero = tape.constant(Tensor::zeros(&[3]));
    let y = tape.dense(x, eye, Some(zero)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let bad = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(tape.dense(x, bad, None).is_err());
}

#[test]
fn dense_gradients() {
    let x = Tensor::randn(&[3, 5], &mut rng(5));
    let w = Tensor::randn(&[4, 5], &mut rng(6));
    let b = Tensor::randn(&[4], &mut rng(7));
    assert_gradcheck(&[x, w, b], |tape, v| {
        let y = tape.dense(v[0], v[1], Some(v[2]))?;
        weighted_sum(tape, y, 8)
    });
}

#[test]
fn activation_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[-1.0, 2.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r), &[0.0, 2.0, 0.0, 2.0]);
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s)[2], 0.5);
    assert!((tape.value(s)[1] - 0.880797).abs() < 1e-6);
    assert!(tape.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    let w = tape.swish(x).unwrap();
    assert!((tape.value(w)[1] - 2.0 * 0.8807970779778823).abs() < 1e-12);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[0.0, -0.0, 1.0]).with_grad());
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn activation_gradients() {
    // Keep away from the relu kink so the central difference is well defined.
    let x = Tensor::randn(&[2, 7], &mut rng(9)).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    assert_gradcheck(std::slice::from_ref(&x), |tape, v| {
        let y = tape.relu(v[0])?;
        weighted_sum(tape, y, 10)
    });
    assert_gradcheck(std::slice::from_ref(&x), |tape, v| {
        let y = tape.sigmoid(v[0])?;
        weighted_sum(tape, y, 11)
    });
    assert_gradcheck(std::slice::from_ref(&x), |tape, v| {
        let y = tape.swish(v[0])?;
        weighted_sum(tape, y, 12)
    });
    assert_gradcheck(std::slice::from_ref(&x), |tape, v| {
        let y = tape.clamp(v[0], -0.5, 0.7)?;
        weighted_sum(tape, y, 13)
    });
    assert_gradcheck(&[x], |tape, v| {
        let y = tape.softmax_last(v[0])?;
        weighted_sum(tape, y, 14)
    });
}

#[test]
fn elementwise_gradients() {
    let a = Tensor::randn(&[3, 4], &mut rng(15));
    let b = Tensor::randn(&[3, 4], &mut rng(16)).map(|v| v.signum() * (v.abs() + 0.5));
    assert_gradcheck(&[a, b], |tape, v| {
        let s = tape.add(v[0], v[1])?;
        let d = tape.sub(s, v[1])?;
        let m = tape.mul(d, v[1])?;
        let q = tape.div(m, v[1])?;
        let q = tape.affine(q, 1.5, -0.25)?;
        let sq = tape.mul(q, q)?;
        tape.mean(sq)
    });
}

#[test]
fn gap_examples_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).with_grad());
    let p = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(p), &[1, 2]);
    assert_eq!(tape.value(p), &[2.5, 7.0]);
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).unwrap().iter().all(|&v| v == 0.25));

    let x = Tensor::randn(&[2, 3, 4, 5], &mut rng(17));
    assert_gradcheck(&[x], |tape, v| {
        let y = tape.global_avg_pool(v[0])?;
        weighted_sum(tape, y, 18)
    });
}

#[test]
fn channel_broadcast_gradients() {
    let x = Tensor::randn(&[2, 3, 4, 4], &mut rng(19));
    let v = Tensor::randn(&[2, 3], &mut rng(20));
    let b = Tensor::randn(&[3], &mut rng(21));
    assert_gradcheck(&[x, v, b], |tape, p| {
        let y = tape.channel_mul(p[0], p[1])?;
        let y = tape.channel_add(y, p[1])?;
        let y = tape.add_channel_bias(y, p[2])?;
        weighted_sum(tape, y, 22)
    });
}

#[test]
fn group_norm_gradients() {
    let x = Tensor::randn(&[2, 4, 3, 3], &mut rng(23));
    let gamma = Tensor::randn(&[4], &mut rng(24));
    let beta = Tensor::randn(&[4], &mut rng(25));
    assert_gradcheck(&[x, gamma, beta], |tape, p| {
        let y = tape.group_norm(
            p[0],
            GroupNormParams {
                gamma: p[1],
                beta: p[2],
                groups: 2,
            },
        )?;
        weighted_sum(tape, y, 26)
    });
}

#[test]
fn group_norm_normalises_each_group() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[1, 4, 5, 5], &mut rng(27)).map(|v| 3.0 * v + 2.0));
    let gamma = tape.constant(Tensor::full(&[4], 1.0));
    let beta = tape.constant(Tensor::zeros(&[4]));
    let y = tape
        .group_norm(x, GroupNormParams { gamma, beta, groups: 2 })
        .unwrap();
    for group in tape.value(y).chunks(50) {
        let m = group.iter().sum::<f64>() / 50.0;
        let v = group.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 50.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn reshaping_ops_gradients() {
    let a = Tensor::randn(&[2, 2, 3, 3], &mut rng(28));
    let b = Tensor::randn(&[2, 3, 3, 3], &mut rng(29));
    assert_gradcheck(&[a, b], |tape, p| {
        let c = tape.concat_channels(&[p[0], p[1]])?;
        let s = tape.slice_channels(c, 1, 3)?;
        let u = tape.upsample_nearest2x(s)?;
        let r = tape.reshape(u, &[2, 3, 36])?;
        weighted_sum(tape, r, 30)
    });
}

#[test]
fn bmm_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let a = Tensor::randn(&a_shape, &mut rng(31));
        let b = Tensor::randn(&b_shape, &mut rng(32));
        assert_gradcheck(&[a, b], |tape, p| {
            let c = tape.bmm(p[0], p[1], ta, tb)?;
            assert_eq!(tape.shape(c), &[2, 3, 5]);
            weighted_sum(tape, c, 33)
        });
    }
}

fn attention_leaves(c: usize, seed: u64, zero_out: bool) -> Vec<Tensor> {
    let mut r = rng(seed);
    let mut v = vec![];
    for i in 0..4 {
        let w = if zero_out && i == 3 {
            Tensor::zeros(&[c, c, 1, 1])
        } else {
            Tensor::randn(&[c, c, 1, 1], &mut r)
        };
        v.push(w);
        v.push(if zero_out && i == 3 {
            Tensor::zeros(&[c])
        } else {
            Tensor::randn(&[c], &mut r)
        });
    }
    v
}

fn attention(tape: &mut Tape, x: Var, p: &[Var]) -> crate::Result<Var> {
    tape.self_attention(
        x,
        &AttentionParams {
            norm: None,
            q_w: p[0],
            q_b: p[1],
            k_w: p[2],
            k_b: p[3],
            v_w: p[4],
            v_b: p[5],
            out_w: p[6],
            out_b: p[7],
        },
    )
}

#[test]
fn attention_zero_output_projection_is_passthrough() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[1, 2, 3, 3], &mut rng(34)));
    let params: Vec<Var> = attention_leaves(2, 35, true)
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let y = attention(&mut tape, x, &params).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn attention_single_token_uses_full_weight() {
    let mut tape = Tape::new();
    let xt = Tensor::randn(&[1, 3, 1, 1], &mut rng(36));
    let leaves = attention_leaves(3, 37, false);
    let x = tape.constant(xt.clone());
    let params: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let y = attention(&mut tape, x, &params).unwrap();

    // softmax over one key is exactly 1, so the mixed value is v itself
    let mut expect = xt.data().to_vec();
    let v: Vec<f64> = (0..3)
        .map(|o| leaves[5].data()[o] + (0..3).map(|i| leaves[4].data()[o * 3 + i] * xt.data()[i]).sum::<f64>())
        .collect();
    for o in 0..3 {
        expect[o] += leaves[7].data()[o] + (0..3).map(|i| leaves[6].data()[o * 3 + i] * v[i]).sum::<f64>();
    }
    for (a, b) in tape.value(y).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_gradients() {
    let mut inputs = vec![Tensor::randn(&[1, 2, 2, 2], &mut rng(38))];
    inputs.extend(attention_leaves(2, 39, false));
    assert_gradcheck(&inputs, |tape, p| {
        let y = attention(tape, p[0], &p[1..])?;
        weighted_sum(tape, y, 40)
    });
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let xt = t(&[3], &[1.0, -2.0, 0.5]).with_grad();
    let x = tape.leaf(&xt);
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq).unwrap();
    let g = tape.backward(s2).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, -4.0, 1.0]);

    let err = tape.backward(sq).unwrap_err();
    assert!(matches!(err, crate::Error::Shape { op: "backward", .. }));
}

#[test]
fn repeated_backward_accumulates_into_tensor() {
    let mut xt = t(&[2], &[1.0, 3.0]).with_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.leaf(&xt);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        xt.accumulate_grad(g.wrt(x).unwrap()).unwrap();
    }
    assert_eq!(xt.grad().unwrap(), &[4.0, 12.0]);
    xt.zero_grad();
    assert_eq!(xt.grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap(), &[3.0, 4.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1], &[1.0]));
    let z = tape.constant(t(&[1], &[0.0]));
    let err = tape.div(a, z).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { op: "div" }));
}

#[test]
fn shape_algebra_rejects_mismatches() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.reshape(a, &[4]).is_err());
    assert!(tape.global_avg_pool(a).is_err());
    assert!(tape.bmm(a, b, false, false).is_err());
}

#[test]
fn forward_replay_is_deterministic() {
    let x = Tensor::randn(&[1, 3, 8, 8], &mut rng(41));
    let k = Tensor::randn(&[2, 3, 3, 3], &mut rng(42));
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let kv = tape.leaf(&k);
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.swish(y).unwrap();
        let m = tape.mean(y).unwrap();
        tape.scalar(m).unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}
