//! Comparison arms: full continued pre-training and LoRA.

use serde::{Deserialize, Serialize};

use crate::error::{AdeError, Result};
use crate::model::{normal_tensor, LoraPair, LoraSettings, Model, Param, Projection, INIT_STD};
use crate::numerics::{SeedStream, Tensor};
use crate::training::{run_simple, Evaluator, RunLog, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "LoraConfig::default_rank")]
    pub rank: usize,
    #[serde(default = "LoraConfig::default_alpha")]
    pub alpha: f64,
    #[serde(default = "LoraConfig::default_targets")]
    pub targets: Vec<Projection>,
    #[serde(default)]
    pub seed: u64,
}

impl LoraConfig {
    fn default_rank() -> usize {
        8
    }
    fn default_alpha() -> f64 {
        16.0
    }
    fn default_targets() -> Vec<Projection> {
        Projection::ALL.to_vec()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: Self::default_rank(),
            alpha: Self::default_alpha(),
            targets: Self::default_targets(),
            seed: 0,
        }
    }
}

/// Freezes every base tensor and adds `A[d1×r]` (normal, std 0.02) and
/// `B[r×d2]` (zeros) to each targeted projection of every block.
pub fn attach_lora(model: &Model, cfg: &LoraConfig) -> Result<Model> {
    if model.lora.is_some() {
        return Err(AdeError::usage("model already carries LoRA adapters"));
    }
    if cfg.rank == 0 {
        return Err(AdeError::config("rank", "must be at least 1"));
    }
    if cfg.alpha.is_nan() || cfg.alpha <= 0.0 {
        return Err(AdeError::config(
            "alpha",
            format!("must be positive, got {}", cfg.alpha),
        ));
    }
    if cfg.targets.is_empty() {
        return Err(AdeError::config("targets", "no projections targeted"));
    }
    let mut out = model.clone();
    out.set_all_trainable(false);
    let seeds = SeedStream::new(cfg.seed).child("lora");
    for (i, block) in out.blocks.iter_mut().enumerate() {
        for &proj in &cfg.targets {
            let shape = block.projection(proj).value.shape().to_vec();
            let (d1, d2) = (shape[0], shape[1]);
            if cfg.rank > d1.min(d2) {
                return Err(AdeError::config(
                    "rank",
                    format!("{} exceeds the smaller side of {proj} ({d1}x{d2})", cfg.rank),
                ));
            }
            let label = format!("blocks.{i}.{proj}.lora_a");
            block.lora.insert(
                proj,
                LoraPair {
                    a: Param::new(normal_tensor(&[d1, cfg.rank], INIT_STD, &seeds, &label)),
                    b: Param::new(Tensor::zeros(&[cfg.rank, d2])),
                },
            );
        }
    }
    out.lora = Some(LoraSettings {
        rank: cfg.rank,
        alpha: cfg.alpha,
    });
    Ok(out)
}

/// Folds every adapter into its base matrix, `W + A·B·(alpha/r)`, computed
/// in f64 and rounded once. The result carries no adapters.
pub fn merge_lora(model: &Model) -> Result<Model> {
    let settings = model
        .lora
        .ok_or_else(|| AdeError::usage("no LoRA adapters to merge (already merged?)"))?;
    let scale = settings.scaling();
    let mut out = model.clone();
    for block in &mut out.blocks {
        let adapters = std::mem::take(&mut block.lora);
        for (proj, pair) in adapters {
            let w = &mut block.projection_mut(proj).value;
            let (d1, d2) = (w.shape()[0], w.shape()[1]);
            let r = pair.a.value.shape()[1];
            let (a, b) = (pair.a.value.data(), pair.b.value.data());
            let data = w.data_mut();
            for i in 0..d1 {
                for j in 0..d2 {
                    let mut acc = 0.0f64;
                    for k in 0..r {
                        acc += a[i * r + k] as f64 * b[k * d2 + j] as f64;
                    }
                    data[i * d2 + j] = (data[i * d2 + j] as f64 + scale * acc) as f32;
                }
            }
        }
    }
    out.lora = None;
    Ok(out)
}

/// Number of adapter parameters `attach_lora` adds: `Σ r·(d1 + d2)`.
pub fn lora_param_count(model: &Model, cfg: &LoraConfig) -> usize {
    model
        .blocks
        .iter()
        .flat_map(|b| cfg.targets.iter().map(move |&p| b.projection(p).value.shape().to_vec()))
        .map(|s| cfg.rank * (s[0] + s[1]))
        .sum()
}

/// Continued pre-training with every tensor trainable.
pub fn full_cpt(model: &mut Model, cfg: &TrainConfig, stream: &[u32], evaluate: &mut Evaluator<'_>) -> Result<RunLog> {
    model.set_all_trainable(true);
    run_simple(model, cfg, stream, evaluate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::init(
            ModelConfig {
                n_blocks: 2,
                d_model: 8,
                n_heads: 2,
                d_ff: 12,
                vocab_size: 10,
                max_seq_len: 8,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn attach_is_exact_at_init() {
        let m = model();
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            ..LoraConfig::default()
        };
        let a = attach_lora(&m, &cfg).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        assert_eq!(
            m.forward(&tokens, false).unwrap().logits,
            a.forward(&tokens, false).unwrap().logits
        );
        assert_eq!(a.trainable_param_count(), lora_param_count(&m, &cfg));
        assert!(a.trainable_names().iter().all(|n| n.contains(".lora_")));
        assert!(attach_lora(&a, &cfg).is_err());
    }

    #[test]
    fn rank_bounds() {
        let m = model();
        let cfg = LoraConfig {
            rank: 9,
            ..LoraConfig::default()
        };
        assert!(matches!(attach_lora(&m, &cfg), Err(AdeError::Config { .. })));
        assert_eq!(
            LoraConfig {
                rank: 256,
                alpha: 512.0,
                ..LoraConfig::default()
            }
            .scaling(),
            2.0
        );
    }

    #[test]
    fn merge_untrained_is_base_and_double_merge_fails() {
        let m = model();
        let a = attach_lora(&m, &LoraConfig::default()).unwrap();
        let merged = merge_lora(&a).unwrap();
        for ((_, p), (_, q)) in merged.params().into_iter().zip(m.params()) {
            assert_eq!(p.value, q.value);
        }
        assert!(merge_lora(&merged).is_err());
    }
}
