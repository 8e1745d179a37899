//! Block importance, block selection, and the two structural adjustments:
//! selective unfreezing and block expansion.
//!
//! Block numbers in this module are 1-based, matching the importance report.
//! The model's own tensor names use 0-based indices.

mod importance;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use importance::{
    angular_distance, block_importance, select_top_k, subsample, ImportanceAccumulator, ImportanceEntry,
    ImportanceReport, Ranking,
};

use crate::error::{AdeError, Result};
use crate::model::{DecoderBlock, Model, Param};
use crate::numerics::{rng, Scalar, SeedStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustMode {
    FreezeOnly,
    ExpandOnly,
    FreezeAndExpand,
}

impl AdjustMode {
    pub fn expands(self) -> bool {
        matches!(self, AdjustMode::ExpandOnly | AdjustMode::FreezeAndExpand)
    }
}

/// How a freshly inserted block is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// i.i.d. normal draws, affinely rescaled per tensor to the mean and
    /// standard deviation (times `gain`) of the block before the insertion.
    RandomScaled { gain: f64 },
    /// Exact copy of the block before the insertion.
    CopyPrevious,
    /// `RandomScaled` with the attention output and MLP down projections set
    /// to zero, so the new block starts as the identity map.
    IdentityZeroOut { gain: f64 },
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::RandomScaled { gain: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdePlan {
    /// 1-based block numbers in the original model.
    pub selected_blocks: BTreeSet<usize>,
    pub mode: AdjustMode,
    pub init: InitStrategy,
    #[serde(default)]
    pub include_embeddings: bool,
    #[serde(default)]
    pub include_head: bool,
}

impl AdePlan {
    pub fn new(selected_blocks: impl IntoIterator<Item = usize>, mode: AdjustMode, init: InitStrategy) -> Self {
        AdePlan {
            selected_blocks: selected_blocks.into_iter().collect(),
            mode,
            init,
            include_embeddings: false,
            include_head: false,
        }
    }

    pub fn k(&self) -> usize {
        self.selected_blocks.len()
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.selected_blocks.is_empty() {
            return Err(AdeError::usage("plan selects no blocks"));
        }
        if let Some(&bad) = self.selected_blocks.iter().find(|&&b| b == 0 || b > n_blocks) {
            return Err(AdeError::usage(format!("block {bad} is outside 1..={n_blocks}")));
        }
        Ok(())
    }
}

/// Where blocks ended up after [`expand`], as 1-based positions in the
/// expanded model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionLayout {
    pub inserted: Vec<usize>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Expansion<T: Scalar = f32> {
    pub model: Model<T>,
    pub layout: ExpansionLayout,
}

fn standardized_normals(n: usize, seeds: &SeedStream, label: &str) -> Vec<f64> {
    let mut r = seeds.rng(label);
    let z: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
    if n < 2 {
        return vec![0.0; n];
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    z.into_iter().map(|v| (v - mean) / std).collect()
}

fn matched_tensor<T: Scalar>(reference: &Tensor<T>, gain: f64, seeds: &SeedStream, label: &str) -> Tensor<T> {
    let (mean, std) = reference.mean_std();
    let z = standardized_normals(reference.numel(), seeds, label);
    Tensor::new(
        reference.shape().to_vec(),
        z.into_iter().map(|v| T::lit(mean + gain * std * v)).collect(),
    )
    .expect("same shape")
}

/// Builds a block to insert after `reference`.
pub fn init_new_block<T: Scalar>(
    strategy: InitStrategy,
    reference: &DecoderBlock<T>,
    seeds: &SeedStream,
) -> DecoderBlock<T> {
    let mut block = reference.clone();
    block.lora.clear();
    let random = |block: &mut DecoderBlock<T>, gain: f64| {
        let refs = reference.base_tensors();
        for ((name, p), r) in DecoderBlock::<T>::TENSOR_NAMES
            .iter()
            .zip(block.base_tensors_mut())
            .zip(refs)
        {
            *p = Param {
                value: matched_tensor(&r.value, gain, seeds, name),
                trainable: true,
            };
        }
    };
    match strategy {
        InitStrategy::CopyPrevious => {}
        InitStrategy::RandomScaled { gain } => random(&mut block, gain),
        InitStrategy::IdentityZeroOut { gain } => {
            random(&mut block, gain);
            block.wo.value = Tensor::zeros(block.wo.value.shape());
            block.w_down.value = Tensor::zeros(block.w_down.value.shape());
        }
    }
    block.set_trainable(true);
    block
}

/// Inserts a new block immediately after each selected block. For selected
/// `s_1 < … < s_k` the `j`-th new block lands at position `s_j + j`. The
/// input model is untouched; every existing tensor is carried over bit-exact.
pub fn expand<T: Scalar>(model: &Model<T>, plan: &AdePlan, seed: u64) -> Result<Expansion<T>> {
    if !plan.mode.expands() {
        return Err(AdeError::usage("plan mode does not include expansion"));
    }
    plan.validate(model.n_blocks())?;
    let seeds = SeedStream::new(seed).child("expand");
    let mut blocks = Vec::with_capacity(model.n_blocks() + plan.k());
    let mut layout = ExpansionLayout {
        inserted: Vec::new(),
        selected: Vec::new(),
    };
    for (i, block) in model.blocks.iter().enumerate() {
        let number = i + 1;
        blocks.push(block.clone());
        if plan.selected_blocks.contains(&number) {
            layout.selected.push(blocks.len());
            let fresh = init_new_block(plan.init, block, &seeds.child(&format!("after.{number}")));
            blocks.push(fresh);
            layout.inserted.push(blocks.len());
        }
    }
    let mut expanded = model.clone();
    expanded.blocks = blocks;
    expanded.config.n_blocks = expanded.blocks.len();
    Ok(Expansion {
        model: expanded,
        layout,
    })
}

/// Sets the freeze mask a plan calls for. `layout` is required when the plan
/// expands; selected blocks are then looked up at their shifted positions.
pub fn apply_plan_freeze<T: Scalar>(
    model: &mut Model<T>,
    plan: &AdePlan,
    layout: Option<&ExpansionLayout>,
) -> Result<()> {
    let zero_based = |v: &[usize]| v.iter().map(|b| b - 1).collect::<BTreeSet<usize>>();
    let trainable = match (plan.mode, layout) {
        (AdjustMode::FreezeOnly, _) => {
            plan.validate(model.n_blocks())?;
            plan.selected_blocks.iter().map(|b| b - 1).collect()
        }
        (AdjustMode::ExpandOnly, Some(l)) => zero_based(&l.inserted),
        (AdjustMode::FreezeAndExpand, Some(l)) => {
            let mut s = zero_based(&l.inserted);
            s.extend(zero_based(&l.selected));
            s
        }
        (_, None) => return Err(AdeError::usage("expanding plan needs the expansion layout")),
    };
    model.set_freeze_mask(&trainable, plan.include_embeddings, plan.include_head)
}

/// Importance, selection, expansion and freezing in one call.
pub fn prepare_ade_model<T: Scalar>(
    model: &Model<T>,
    report: &ImportanceReport,
    k: usize,
    ranking: Ranking,
    mode: AdjustMode,
    init: InitStrategy,
    seed: u64,
) -> Result<(Model<T>, AdePlan, Option<ExpansionLayout>)> {
    let selected = select_top_k(report, k, ranking)?;
    let plan = AdePlan::new(selected, mode, init);
    let (mut out, layout) = if mode.expands() {
        let e = expand(model, &plan, seed)?;
        (e.model, Some(e.layout))
    } else {
        (model.clone(), None)
    };
    apply_plan_freeze(&mut out, &plan, layout.as_ref())?;
    Ok((out, plan, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(n_blocks: usize) -> ModelConfig {
        ModelConfig {
            n_blocks,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 13,
            max_seq_len: 8,
            ..ModelConfig::default()
        }
    }

    fn simulate_insertion(n: usize, selected: &[usize]) -> Vec<Option<usize>> {
        // Oracle: walk a list of original block numbers, pushing a marker
        // after every selected one.
        let mut list = Vec::new();
        for b in 1..=n {
            list.push(Some(b));
            if selected.contains(&b) {
                list.push(None);
            }
        }
        list
    }

    #[test]
    fn expansion_positions_match_list_insertion() {
        let model: Model = Model::init(cfg(22), 3).unwrap();
        let plan = AdePlan::new([2, 8], AdjustMode::FreezeAndExpand, InitStrategy::default());
        let e = expand(&model, &plan, 1).unwrap();
        assert_eq!(e.model.n_blocks(), 24);
        assert_eq!(e.model.config.n_blocks, 24);
        assert_eq!(e.layout.inserted, vec![3, 10]);
        assert_eq!(e.layout.selected, vec![2, 9]);
        let oracle = simulate_insertion(22, &[2, 8]);
        for (pos, slot) in oracle.iter().enumerate() {
            match slot {
                Some(orig) => assert_eq!(e.model.blocks[pos], model.blocks[orig - 1]),
                None => assert!(e.layout.inserted.contains(&(pos + 1))),
            }
        }
        let names: Vec<String> = e.model.named_tensors().into_iter().map(|t| t.name).collect();
        assert!(names.contains(&"blocks.23.mlp.w_down".to_string()));
        assert!(!names.contains(&"blocks.24.mlp.w_down".to_string()));
    }

    #[test]
    fn third_of_four_blocks() {
        let model: Model = Model::init(cfg(4), 3).unwrap();
        let plan = AdePlan::new([3], AdjustMode::ExpandOnly, InitStrategy::CopyPrevious);
        let e = expand(&model, &plan, 1).unwrap();
        assert_eq!(e.model.n_blocks(), 5);
        assert_eq!(e.layout.inserted, vec![4]);
        assert_eq!(e.model.blocks[3], model.blocks[2]);
    }

    #[test]
    fn expand_requires_expanding_mode() {
        let model: Model = Model::init(cfg(4), 3).unwrap();
        let plan = AdePlan::new([1], AdjustMode::FreezeOnly, InitStrategy::default());
        assert!(expand(&model, &plan, 0).is_err());
        let plan = AdePlan::new([5], AdjustMode::ExpandOnly, InitStrategy::default());
        assert!(expand(&model, &plan, 0).is_err());
    }

    #[test]
    fn random_scaled_matches_reference_statistics() {
        let c = ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            ..cfg(2)
        };
        let model: Model = Model::init(c, 4).unwrap();
        let reference = &model.blocks[0];
        let fresh = init_new_block(InitStrategy::RandomScaled { gain: 1.0 }, reference, &SeedStream::new(2));
        let (_, rs) = reference.wq.value.mean_std();
        let (_, ns) = fresh.wq.value.mean_std();
        assert!((ns - rs).abs() / rs < 0.05);
        assert_ne!(fresh.wq.value, reference.wq.value);
        assert_eq!(fresh.attn_norm.value, reference.attn_norm.value);
    }

    #[test]
    fn copy_previous_is_exact() {
        let model: Model = Model::init(cfg(2), 4).unwrap();
        let fresh = init_new_block(InitStrategy::CopyPrevious, &model.blocks[1], &SeedStream::new(2));
        assert_eq!(fresh, model.blocks[1]);
    }

    #[test]
    fn identity_block_passes_input_through() {
        let model: Model = Model::init(cfg(2), 4).unwrap();
        let fresh = init_new_block(
            InitStrategy::IdentityZeroOut { gain: 1.0 },
            &model.blocks[0],
            &SeedStream::new(2),
        );
        let mut m = model.clone();
        m.blocks[0] = fresh;
        let x = Tensor::<f32>::from_fn(&[5, 8], |i| ((i * 7) % 11) as f32 / 3.0 - 1.5);
        assert_eq!(m.apply_block(0, &x).unwrap(), x);
    }

    #[test]
    fn freeze_plans_count_blocks() {
        let model: Model = Model::init(cfg(22), 3).unwrap();
        let per_block = 9;

        let mut m = model.clone();
        let plan = AdePlan::new([2, 8], AdjustMode::FreezeOnly, InitStrategy::default());
        apply_plan_freeze(&mut m, &plan, None).unwrap();
        assert_eq!(m.trainable_names().len(), 2 * per_block);
        let once = m.named_tensors();
        apply_plan_freeze(&mut m, &plan, None).unwrap();
        assert_eq!(m.named_tensors(), once);

        let plan = AdePlan::new([2, 8], AdjustMode::FreezeAndExpand, InitStrategy::default());
        let e = expand(&model, &plan, 0).unwrap();
        let mut m = e.model;
        apply_plan_freeze(&mut m, &plan, Some(&e.layout)).unwrap();
        let trainable = m.trainable_names();
        assert_eq!(trainable.len(), 4 * per_block);
        for b in [1, 2, 8, 9] {
            assert!(trainable.contains(&format!("blocks.{b}.attn.wq")));
        }
        assert!(!trainable.contains("token_embedding"));
        assert!(apply_plan_freeze(&mut m, &plan, None).is_err());
    }

    #[test]
    fn pass_through_block_scores_pi() {
        let mut model: Model = Model::init(cfg(3), 8).unwrap();
        for b in &mut model.blocks[..2] {
            b.wo.value = Tensor::zeros(b.wo.value.shape());
            b.w_down.value = Tensor::zeros(b.w_down.value.shape());
        }
        let seqs = vec![vec![1, 2, 3, 4, 5], vec![7, 7, 2]];
        let r = block_importance(&model, &seqs, 1.0, 0).unwrap();
        assert_eq!(r.entries.len(), 2);
        for e in &r.entries {
            assert!((e.mean_cos - 1.0).abs() < 1e-6);
            assert!((e.metric - std::f64::consts::PI).abs() < 2e-3);
        }
        assert_eq!(r.entries[0].n_samples, 8);
    }

    #[test]
    fn importance_rejects_empty_slice() {
        let model: Model = Model::init(cfg(3), 8).unwrap();
        assert!(matches!(block_importance(&model, &[], 1.0, 0), Err(AdeError::Usage(_))));
    }
}
