//! Independent reimplementations used as test oracles.

use ade_core::model::Model;
use ade_core::numerics::Tensor;

/// Block inputs rebuilt by hand: embedding rows, then one block at a time.
pub fn oracle_block_inputs(m: &Model<f64>, tokens: &[u32]) -> Vec<Vec<Vec<f64>>> {
    let d = m.config.d_model;
    let emb = m.token_embedding.value.data();
    let rows: Vec<f64> = tokens
        .iter()
        .flat_map(|&t| emb[t as usize * d..(t as usize + 1) * d].iter().copied())
        .collect();
    let mut x = Tensor::new(vec![tokens.len(), d], rows).unwrap();
    let mut inputs = Vec::new();
    for i in 0..m.n_blocks() {
        inputs.push(x.data().chunks(d).map(<[f64]>::to_vec).collect());
        x = m.apply_block(i, &x).unwrap();
    }
    inputs
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Brute-force metric per consecutive block pair: mean cosine over every
/// position of every sequence, then `acos(-mean)`.
pub fn oracle_metrics(m: &Model<f64>, seqs: &[Vec<u32>]) -> Vec<f64> {
    let pairs = m.n_blocks() - 1;
    let mut sum = vec![0.0; pairs];
    let mut count = 0usize;
    for s in seqs {
        let inputs = oracle_block_inputs(m, s);
        for (i, acc) in sum.iter_mut().enumerate() {
            for (a, b) in inputs[i].iter().zip(&inputs[i + 1]).take(s.len()) {
                *acc += cosine(a, b);
            }
        }
        count += s.len();
    }
    sum.into_iter().map(|s| (-(s / count as f64)).acos()).collect()
}
