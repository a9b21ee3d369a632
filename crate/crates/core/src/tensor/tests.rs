use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    t64(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.leaf(&t64(&[2, 2], &[0.3, -2.0, 5.5, 7.0]));
    let c = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(c), tape.value(b));

    let a = tape.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let col = tape.leaf(&t64(&[2, 1], &[5.0, 6.0]));
    let c = tape.matmul(a, col).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t64(&[2, 3], &[0.0; 6]));
    let b = tape.leaf(&t64(&[2, 3], &[0.0; 6]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(tape.matmul_bt(a, b).is_ok());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let r = finite_diff_check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-5, "{r:?}");
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(&[1, 4], &[0.7; 4]));
    let y = tape.softmax_lastdim(x, 1.0).unwrap();
    assert!(close(tape.value(y), &[0.25; 4], 1e-15));

    let x = tape.leaf(&t64(&[1, 1], &[-3.0]));
    let y = tape.softmax_lastdim(x, 0.5).unwrap();
    assert_eq!(tape.value(y), &[1.0]);

    let x = tape.leaf(&t64(&[1, 2], &[0.0, 3f64.ln()]));
    let y = tape.softmax_lastdim(x, 1.0).unwrap();
    assert!(close(tape.value(y), &[0.25, 0.75], 1e-12));
}

#[test]
fn masked_softmax_zeroes_hidden_entries_and_rejects_empty_rows() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape
        .masked_softmax(x, 1.0, &[true, false, true, false, true, false])
        .unwrap();
    let v = tape.value(y);
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
    assert_eq!(v[4], 1.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    let err = tape
        .masked_softmax(x, 1.0, &[true, true, true, false, false, false])
        .unwrap_err();
    assert!(matches!(err, Error::Masking(_)));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(&[1, 4], &[3.0; 4]));
    let gain = tape.leaf(&t64(&[4], &[1.0; 4]));
    let bias = tape.leaf(&t64(&[4], &[0.0; 4]));
    let y = tape.layer_norm(x, Some(gain), Some(bias), 1e-5).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    let standardized = [1.0, -1.0, 1.0, -1.0];
    let x = tape.leaf(&t64(&[1, 4], &standardized));
    let y = tape.layer_norm(x, Some(gain), Some(bias), 1e-5).unwrap();
    assert!(close(tape.value(y), &standardized, 1e-5));

    // statistical oracle: affine output has mean = bias, std = |gain|
    let n = 4096;
    let x = tape.leaf(&random(&[1, n], 7));
    let g = tape.leaf(&t64(&[n], &vec![-1.7; n]));
    let b = tape.leaf(&t64(&[n], &vec![0.4; n]));
    let y = tape.layer_norm(x, Some(g), Some(b), 1e-5).unwrap();
    let v = tape.value(y);
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((mean - 0.4).abs() < 1e-4, "mean {mean}");
    assert!((std - 1.7).abs() < 1e-4, "std {std}");

    let empty_gain = tape.leaf(&t64(&[3], &[1.0; 3]));
    assert!(tape.layer_norm(x, Some(empty_gain), None, 1e-5).is_err());
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(&[2], &[0.0, 10.0]));
    for kind in [GeluKind::Erf, GeluKind::Tanh] {
        let y = tape.gelu(x, kind);
        assert_eq!(tape.value(y)[0], 0.0);
        assert!((tape.value(y)[1] - 10.0).abs() < 1e-4);
    }
    for kind in [GeluKind::Erf, GeluKind::Tanh] {
        let r = finite_diff_check(
            |t, v| {
                let y = t.gelu(v[0], kind);
                Ok(t.sum(y))
            },
            &[t64(&[1], &[0.5])],
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{kind:?}: {r:?}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.leaf(&t64(&[2, 4], &[0.3; 8]));
    let ce = tape.cross_entropy_logits(uniform, &[1, 3], -100).unwrap();
    for &p in &ce.per_position {
        assert!((p - 4f64.ln()).abs() < 1e-12);
    }
    assert!((tape.value(ce.loss)[0] - 4f64.ln()).abs() < 1e-12);

    let confident = tape.leaf(&t64(&[1, 3], &[0.0, 100.0, 0.0]));
    let ce = tape.cross_entropy_logits(confident, &[1], -100).unwrap();
    assert!(tape.value(ce.loss)[0] < 1e-8);

    let ce = tape.cross_entropy_logits(uniform, &[-100, -100], -100).unwrap();
    assert!(ce.no_supervised_positions());
    assert_eq!(tape.value(ce.loss)[0], 0.0);

    let err = tape.cross_entropy_logits(uniform, &[4, 0], -100).unwrap_err();
    assert!(matches!(err, Error::Index(_)));
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&Tensor::full(&[1000, 1000], 1.0f32).unwrap());
    assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.5, &mut rng, false).unwrap(), x);
    assert!(matches!(
        tape.dropout(x, 1.0, &mut rng, true),
        Err(Error::Config(_))
    ));
    let y = tape.dropout(x, 0.1, &mut rng, true).unwrap();
    let zeros = tape.value(y).iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / 1e6;
    assert!((frac - 0.1).abs() < 0.002, "zeroed fraction {frac}");
    let survivor = tape.value(y).iter().find(|&&v| v != 0.0).unwrap();
    assert!((survivor - 1.0 / 0.9).abs() < 1e-6);
}

#[test]
fn every_op_passes_finite_differences() {
    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>>;
    let w = random(&[8, 8], 11);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "matmul_bt",
            vec![random(&[5, 8], 1), random(&[6, 8], 2), random(&[5, 6], 3)],
            Box::new(|t, v| {
                let c = t.matmul_bt(v[0], v[1])?;
                let m = t.mul(c, v[2])?;
                Ok(t.sum(m))
            }),
        ),
        (
            "add_row+scale",
            vec![random(&[4, 8], 4), random(&[8], 5), w.clone()],
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.scale(y, 0.7);
                let y = t.matmul(y, v[2])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "softmax",
            vec![random(&[4, 8], 6), random(&[4, 8], 7)],
            Box::new(|t, v| {
                let y = t.softmax_lastdim(v[0], 0.35)?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "masked_softmax",
            vec![random(&[3, 4], 8), random(&[3, 4], 9)],
            Box::new(|t, v| {
                let mask = [
                    true, true, false, true, false, true, true, false, true, false, false, false,
                ];
                let y = t.masked_softmax(v[0], 1.3, &mask)?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "layer_norm",
            vec![random(&[4, 8], 10), random(&[8], 11), random(&[8], 12), random(&[4, 8], 13)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
                let y = t.mul(y, v[3])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "gelu",
            vec![random(&[8, 8], 14), random(&[8, 8], 15)],
            Box::new(|t, v| {
                let a = t.gelu(v[0], GeluKind::Erf);
                let b = t.gelu(v[0], GeluKind::Tanh);
                let y = t.add(a, b)?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "slices+concats",
            vec![random(&[6, 8], 16), random(&[7, 8], 17)],
            Box::new(|t, v| {
                let a = t.slice_rows(v[0], 1, 3)?;
                let b = t.slice_rows(v[0], 4, 2)?;
                let r = t.concat_rows(&[b, a, b])?;
                let c = t.slice_cols(r, 2, 5)?;
                let d = t.slice_cols(r, 0, 3)?;
                let cc = t.concat_cols(&[d, c])?;
                let y = t.mul(cc, cc)?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "gather+cross_entropy",
            vec![random(&[6, 8], 18), random(&[8, 5], 19)],
            Box::new(|t, v| {
                let e = t.gather_rows(v[0], &[3, 1, 3, 0])?;
                let logits = t.matmul(e, v[1])?;
                let ce = t.weighted_cross_entropy(
                    logits,
                    &[2, -1, 4, 0],
                    -1,
                    &[0.5, 1.0, 2.0, 0.25],
                    None,
                )?;
                Ok(ce.loss)
            }),
        ),
        (
            "attention",
            vec![random(&[5, 8], 20), random(&[7, 8], 21), random(&[7, 8], 22), random(&[5, 8], 23)],
            Box::new(|t, v| {
                let mask: Vec<bool> = (0..5 * 7).map(|i| i % 3 != 1).collect();
                let layout = AttentionLayout {
                    blocks: vec![
                        AttentionBlock { q_offset: 0, q_len: 2, k_offset: 0, k_len: 3, mask: mask[..6].to_vec() },
                        AttentionBlock { q_offset: 2, q_len: 3, k_offset: 3, k_len: 4, mask: mask[..12].to_vec() },
                    ],
                };
                let o = t.attention(v[0], v[1], v[2], Arc::new(layout), 2, 0.5)?;
                let y = t.mul(o, v[3])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "attention_shared_operand",
            vec![random(&[6, 8], 24), random(&[6, 8], 25)],
            Box::new(|t, v| {
                let mask: Vec<bool> = (0..36).map(|i| (i / 6 < 3) != (i % 6 < 3)).collect();
                let o = t.attention(v[0], v[0], v[0], Arc::new(AttentionLayout::single(6, 6, mask)), 4, 0.7)?;
                let y = t.mul(o, v[1])?;
                Ok(t.sum(y))
            }),
        ),
    ];
    for (name, inputs, f) in cases {
        let r = finite_diff_check(f, &inputs, 1e-6).unwrap();
        assert!(r.max_relative_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn fused_attention_matches_primitive_composition() {
    // two routes to the same masked multi-head attention
    let q = random(&[4, 6], 30);
    let k = random(&[5, 6], 31);
    let v = random(&[5, 6], 32);
    let mask: Vec<bool> = (0..20).map(|i| i % 4 != 2).collect();
    let heads = 3;
    let scale = 1.0 / 2f64.sqrt();

    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
    let fused = tape
        .attention(qv, kv, vv, Arc::new(AttentionLayout::single(4, 5, mask.clone())), heads, scale)
        .unwrap();
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = tape.slice_cols(qv, 2 * h, 2).unwrap();
        let kh = tape.slice_cols(kv, 2 * h, 2).unwrap();
        let vh = tape.slice_cols(vv, 2 * h, 2).unwrap();
        let s = tape.matmul_bt(qh, kh).unwrap();
        let p = tape.masked_softmax(s, scale, &mask).unwrap();
        outs.push(tape.matmul(p, vh).unwrap());
    }
    let composed = tape.concat_cols(&outs).unwrap();
    assert!(close(tape.value(fused), tape.value(composed), 1e-14));
}

#[test]
fn attention_hand_oracle() {
    // 2 queries, 3 keys, one head of width 2, no projections.
    let q = [1.0, 0.0, 0.0, 2.0];
    let k = [1.0, 1.0, 0.0, 1.0, 2.0, 0.0];
    let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let scale = 1.0 / 2f64.sqrt();
    let mut expected = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..3)
            .map(|j| (q[2 * i] * k[2 * j] + q[2 * i + 1] * k[2 * j + 1]) * scale)
            .collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        for c in 0..2 {
            expected.push((0..3).map(|j| s[j].exp() / z * v[2 * j + c]).sum::<f64>());
        }
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.leaf(&t64(&[2, 2], &q)),
        tape.leaf(&t64(&[3, 2], &k)),
        tape.leaf(&t64(&[3, 2], &v)),
    );
    let o = tape
        .attention(qv, kv, vv, Arc::new(AttentionLayout::single(2, 3, vec![true; 6])), 1, scale)
        .unwrap();
    assert!(close(tape.value(o), &expected, 1e-14));

    let err = tape
        .attention(qv, kv, vv, Arc::new(AttentionLayout::single(2, 3, vec![false, false, false, true, true, true])), 1, scale)
        .unwrap_err();
    assert!(matches!(err, Error::Masking(_)));
}

#[test]
fn backward_is_deterministic() {
    let x = random(&[6, 8], 40).with_grad();
    let w = random(&[8, 8], 41).with_grad();
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
    let h = tape.matmul(xv, wv).unwrap();
    let h = tape.gelu(h, GeluKind::Erf);
    let h = tape.layer_norm(h, None, None, 1e-5).unwrap();
    let p = tape.softmax_lastdim(h, 1.0).unwrap();
    let ce = tape.cross_entropy_logits(p, &[0, 1, 2, 3, 4, 5], -1).unwrap();
    let g1 = tape.backward(ce.loss).unwrap();
    let g2 = tape.backward(ce.loss).unwrap();
    for v in [xv, wv] {
        let (a, b) = (g1.get(v).unwrap(), g2.get(v).unwrap());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(&[2], &[1.0, 2.0]).with_grad());
    let c = tape.leaf(&t64(&[2], &[3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
    assert!(g.get(y).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.01f64..10.0,
        spread in 0.1f64..300.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| (rng.random_range(-1.0..1.0) * spread) as f32).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax_lastdim(x, scale as f32).unwrap();
        for row in tape.value(y).chunks(cols) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }
    }
}
