mod common;

use ade_core::model::{Model, ModelConfig};
use ade_core::numerics::{swiglu, Tape, Tensor};
use common::gradcheck::{check_model, op_check, op_suite, random_tensor, GradReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_all_pass(name: &str, f32_report: GradReport, f64_report: GradReport) {
    assert_eq!(
        f32_report.passed, f32_report.checked,
        "{name} f32: worst rel err {:.3e}",
        f32_report.worst
    );
    assert_eq!(
        f64_report.passed, f64_report.checked,
        "{name} f64: worst rel err {:.3e}",
        f64_report.worst
    );
}

#[test]
fn matmul_gradient() {
    let mut r = rng(1);
    let c = op_check!(
        vec![random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[4, 5], 1.0)],
        |t, v| t.matmul(v[0], v[1]).unwrap()
    );
    assert_all_pass("matmul", c.check_f32(), c.check_f64());
}

#[test]
fn batched_matmul_gradient() {
    let mut r = rng(2);
    let c = op_check!(
        vec![
            random_tensor(&mut r, &[2, 3, 4], 1.0),
            random_tensor(&mut r, &[4, 2], 1.0)
        ],
        |t, v| t.matmul(v[0], v[1]).unwrap()
    );
    assert_all_pass("batched matmul", c.check_f32(), c.check_f64());
}

#[test]
fn broadcast_add_and_mul_gradients() {
    let mut r = rng(3);
    let c = op_check!(
        vec![random_tensor(&mut r, &[2, 3], 1.0), random_tensor(&mut r, &[3], 1.0)],
        |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            t.mul(s, v[1]).unwrap()
        }
    );
    assert_all_pass("broadcast", c.check_f32(), c.check_f64());
}

#[test]
fn softmax_causal_gradient() {
    let mut r = rng(4);
    let c = op_check!(vec![random_tensor(&mut r, &[2, 4, 4], 2.0)], |t, v| t
        .softmax_causal(v[0])
        .unwrap());
    assert_all_pass("softmax_causal", c.check_f32(), c.check_f64());
}

#[test]
fn rmsnorm_gradient() {
    let mut r = rng(5);
    let c = op_check!(
        vec![random_tensor(&mut r, &[3, 6], 1.0), random_tensor(&mut r, &[6], 1.0)],
        |t, v| t.rmsnorm(v[0], v[1], 1e-5).unwrap()
    );
    assert_all_pass("rmsnorm", c.check_f32(), c.check_f64());
}

#[test]
fn swiglu_gradient() {
    let mut r = rng(6);
    let c = op_check!(
        vec![
            random_tensor(&mut r, &[2, 3], 1.0),
            random_tensor(&mut r, &[3, 4], 1.0),
            random_tensor(&mut r, &[3, 4], 1.0),
            random_tensor(&mut r, &[4, 3], 1.0),
        ],
        |t, v| swiglu(t, v[0], v[1], v[2], v[3]).unwrap()
    );
    assert_all_pass("swiglu", c.check_f32(), c.check_f64());
}

#[test]
fn rope_gradient() {
    let mut r = rng(7);
    let c = op_check!(vec![random_tensor(&mut r, &[2, 5, 2, 4], 1.0)], |t, v| t
        .rope(v[0], 10_000.0)
        .unwrap());
    assert_all_pass("rope", c.check_f32(), c.check_f64());
}

#[test]
fn attention_gradients() {
    let mut r = rng(8);
    let c = op_check!(
        vec![
            random_tensor(&mut r, &[1, 4, 2, 2], 1.0),
            random_tensor(&mut r, &[1, 4, 2, 2], 1.0),
            random_tensor(&mut r, &[1, 4, 2, 2], 1.0),
        ],
        |t, v| {
            let s = t.attention_scores(v[0], v[1], 0.7).unwrap();
            let p = t.softmax_causal(s).unwrap();
            t.attention_mix(p, v[2]).unwrap()
        }
    );
    assert_all_pass("attention", c.check_f32(), c.check_f64());
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(9);
    let c = op_check!(vec![random_tensor(&mut r, &[4, 6], 2.0)], |t, v| t
        .cross_entropy(v[0], &[0, 5, 2, 2])
        .unwrap());
    assert_all_pass("cross_entropy", c.check_f32(), c.check_f64());
}

#[test]
fn gather_transpose_reshape_gradients() {
    let mut r = rng(10);
    let c = op_check!(vec![random_tensor(&mut r, &[5, 3], 1.0)], |t, v| {
        let g = t.gather_rows(v[0], &[4, 0, 4, 2], &[2, 2]).unwrap();
        let flat = t.reshape(g, &[4, 3]).unwrap();
        t.transpose(flat).unwrap()
    });
    assert_all_pass("gather", c.check_f32(), c.check_f64());
}

#[test]
fn duplicated_input_accumulates() {
    // a·a with the same leaf on both sides; the oracle perturbs the single
    // underlying tensor.
    let mut r = rng(11);
    let c = op_check!(vec![random_tensor(&mut r, &[3, 3], 1.0)], |t, v| {
        let sq = t.matmul(v[0], v[0]).unwrap();
        t.add(sq, v[0]).unwrap()
    });
    assert_all_pass("duplicate", c.check_f32(), c.check_f64());
}

#[test]
fn causal_mask_blocks_future_positions() {
    let mut r = rng(12);
    let base = random_tensor(&mut r, &[1, 5, 5], 1.0);
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(base.clone());
    let p0 = tape.softmax_causal(s).unwrap();
    for j in 1..5 {
        let mut bumped = base.clone();
        for i in 0..5 {
            bumped.data_mut()[i * 5 + j] += 3.0;
        }
        let s = tape.constant(bumped);
        let p1 = tape.softmax_causal(s).unwrap();
        for i in 0..j {
            let row0 = &tape.value(p0).data()[i * 5..i * 5 + 5];
            let row1 = &tape.value(p1).data()[i * 5..i * 5 + 5];
            assert_eq!(row0, row1, "row {i} saw column {j}");
        }
    }
}

#[test]
fn rope_preserves_norm_and_relative_position() {
    let mut r = rng(13);
    let hd = 8;
    let t = 12;
    let q = random_tensor(&mut r, &[t, 1, hd], 1.0);
    let k = random_tensor(&mut r, &[t, 1, hd], 1.0);
    let mut tape = Tape::<f64>::new();
    let qv = tape.constant(q.clone());
    let rq = tape.rope(qv, 10_000.0).unwrap();
    for pos in 0..t {
        let before: f64 = q.data()[pos * hd..(pos + 1) * hd].iter().map(|v| v * v).sum();
        let after: f64 = tape.value(rq).data()[pos * hd..(pos + 1) * hd]
            .iter()
            .map(|v| v * v)
            .sum();
        assert!((before.sqrt() - after.sqrt()).abs() < 1e-5);
    }

    // Same vector at every position so the inner product is a function of
    // the positions alone.
    let qrow = &q.data()[..hd];
    let krow = &k.data()[..hd];
    let tile = |row: &[f64]| Tensor::from_fn(&[t, 1, hd], |i| row[i % hd]);
    let qv = tape.constant(tile(qrow));
    let kv = tape.constant(tile(krow));
    let rq = tape.rope(qv, 10_000.0).unwrap();
    let rk = tape.rope(kv, 10_000.0).unwrap();
    let dot = |p1: usize, p2: usize| -> f64 {
        let a = &tape.value(rq).data()[p1 * hd..(p1 + 1) * hd];
        let b = &tape.value(rk).data()[p2 * hd..(p2 + 1) * hd];
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    };
    for p1 in 0..t - 3 {
        for p2 in 0..t - 3 {
            assert!((dot(p1, p2) - dot(p1 + 3, p2 + 3)).abs() < 1e-5);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(14);
    let mut tape = Tape::<f32>::new();
    let s = tape.constant(random_tensor(&mut r, &[3, 6, 6], 5.0).cast());
    let p = tape.softmax_causal(s).unwrap();
    for row in tape.value(p).data().chunks(6) {
        let total: f32 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 9,
        max_seq_len: 8,
        ..ModelConfig::default()
    };
    let mut model: Model = Model::init(cfg, 21).unwrap();
    // Larger weights than the 0.02 init (std 0.08) so every path carries signal.
    for (_, p) in model.params_mut() {
        for v in p.value.data_mut() {
            *v *= 4.0;
        }
    }
    let tokens: Vec<u32> = (0..12).map(|i| (i * 5 % 9) as u32).collect();
    let report = check_model(&model, &tokens, 2, 300, 4);
    assert!(
        report.pass_rate() >= 0.99,
        "pass rate {:.3} worst {:.3e}",
        report.pass_rate(),
        report.worst
    );
}

#[test]
fn every_tape_op_passes_at_f32() {
    for (name, report) in op_suite(31) {
        assert_eq!(
            report.passed, report.checked,
            "{name}: worst rel err {:.3e}",
            report.worst
        );
    }
}
