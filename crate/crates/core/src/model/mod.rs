//! Decoder-only transformer with per-tensor freeze flags and capture of the
//! hidden state entering every block.
//!
//! Tensor naming (stable, used by checkpoints and freeze reports):
//!
//! ```text
//! token_embedding                      [V, d]
//! blocks.{i}.attn_norm.weight          [d]
//! blocks.{i}.attn.{wq,wk,wv,wo}        [d, d]
//! blocks.{i}.mlp_norm.weight           [d]
//! blocks.{i}.mlp.{w_gate,w_up}         [d, f]
//! blocks.{i}.mlp.w_down                [f, d]
//! blocks.{i}.<projection>.lora_{a,b}   adapters, when attached
//! final_norm.weight                    [d]
//! lm_head                              [d, V] (absent when tied)
//! ```
//!
//! Block indices in names are 0-based.

mod block;
mod config;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub(crate) use block::normal_tensor;
pub use block::{DecoderBlock, LoraPair, Param, Projection, INIT_STD};
pub use config::ModelConfig;

use crate::error::{AdeError, Result};
use crate::numerics::{swiglu, Scalar, SeedStream, Tape, Tensor, Var};

/// Rank and alpha of the attached LoRA adapters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSettings {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub token_embedding: Param<T>,
    pub blocks: Vec<DecoderBlock<T>>,
    pub final_norm: Param<T>,
    pub lm_head: Option<Param<T>>,
    pub lora: Option<LoraSettings>,
}

/// One row of [`Model::named_tensors`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Hidden state entering each block, `[.., t, d]` per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSnapshot<T: Scalar = f32> {
    pub block_inputs: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar = f32> {
    /// `[t, V]` for a single sequence, `[rows, t, V]` for a batch.
    pub logits: Tensor<T>,
    pub snapshot: Option<ActivationSnapshot<T>>,
}

/// Tape handles produced by [`Model::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Block inputs, filled only when capture was requested.
    pub block_inputs: Vec<Var>,
    /// Leaf handle of every parameter, in [`Model::named_tensors`] order.
    pub params: Vec<Var>,
}

struct BlockVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
    lora: BTreeMap<Projection, (Var, Var)>,
}

impl BlockVars {
    fn projection(&self, p: Projection) -> Var {
        match p {
            Projection::Wq => self.wq,
            Projection::Wk => self.wk,
            Projection::Wv => self.wv,
            Projection::Wo => self.wo,
            Projection::WGate => self.w_gate,
            Projection::WUp => self.w_up,
            Projection::WDown => self.w_down,
        }
    }
}

struct ModelVars {
    embedding: Var,
    blocks: Vec<BlockVars>,
    final_norm: Var,
    head: Option<Var>,
    flat: Vec<Var>,
}

/// SHA-256 of the little-endian bytes of a tensor.
pub fn tensor_hash(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl<T: Scalar> Model<T> {
    /// Fresh model: normal(0, 0.02) matrices and embeddings, unit norm
    /// weights, everything trainable.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedStream::new(seed).child("init");
        let (d, v) = (config.d_model, config.vocab_size);
        let blocks = (0..config.n_blocks)
            .map(|i| DecoderBlock::init(&config, &seeds.child(&format!("blocks.{i}"))))
            .collect();
        let token_embedding = Param::new(block::normal_tensor(&[v, d], INIT_STD, &seeds, "token_embedding"));
        let lm_head =
            (!config.tie_embeddings).then(|| Param::new(block::normal_tensor(&[d, v], INIT_STD, &seeds, "lm_head")));
        Ok(Model {
            config,
            token_embedding,
            blocks,
            final_norm: Param::new(Tensor::ones(&[d])),
            lm_head,
            lora: None,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// All parameters with their names, in the documented order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, p)| (format!("blocks.{i}.{n}"), p)));
        }
        out.push(("final_norm.weight".to_string(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = vec![("token_embedding".to_string(), &mut self.token_embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut().into_iter().map(|(n, p)| (format!("blocks.{i}.{n}"), p)));
        }
        out.push(("final_norm.weight".to_string(), &mut self.final_norm));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<TensorInfo> {
        self.params()
            .into_iter()
            .map(|(name, p)| TensorInfo {
                name,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params()
            .into_iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for (_, p) in self.params_mut() {
            p.trainable = trainable;
        }
    }

    /// Marks the listed blocks (0-based) trainable and every other block
    /// frozen. The embedding follows `include_embeddings`; the final norm and
    /// head follow `include_head`. Adapter tensors are left alone.
    pub fn set_freeze_mask(
        &mut self,
        trainable_blocks: &BTreeSet<usize>,
        include_embeddings: bool,
        include_head: bool,
    ) -> Result<()> {
        if let Some(bad) = trainable_blocks.iter().find(|&&i| i >= self.blocks.len()) {
            return Err(AdeError::usage(format!(
                "unknown block id {bad} (model has {} blocks)",
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.set_trainable(trainable_blocks.contains(&i));
        }
        let tied = self.lm_head.is_none();
        self.token_embedding.trainable = include_embeddings || (tied && include_head);
        self.final_norm.trainable = include_head;
        if let Some(h) = &mut self.lm_head {
            h.trainable = include_head;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.as_ref().map(|h| h.cast()),
            lora: self.lora,
        }
    }

    fn bind(&self, tape: &mut Tape<T>, track_grads: bool) -> ModelVars {
        let mut flat = Vec::new();
        let mut leaf = |tape: &mut Tape<T>, p: &Param<T>| {
            let v = tape.leaf(p.value.clone(), track_grads && p.trainable);
            flat.push(v);
            v
        };
        let embedding = leaf(tape, &self.token_embedding);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let [an, q, k, v, o, mn, g, u, dn] = b.base_tensors().map(|p| leaf(tape, p));
            let lora = b
                .lora
                .iter()
                .map(|(proj, pair)| (*proj, (leaf(tape, &pair.a), leaf(tape, &pair.b))))
                .collect();
            blocks.push(BlockVars {
                attn_norm: an,
                wq: q,
                wk: k,
                wv: v,
                wo: o,
                mlp_norm: mn,
                w_gate: g,
                w_up: u,
                w_down: dn,
                lora,
            });
        }
        let final_norm = leaf(tape, &self.final_norm);
        let head = self.lm_head.as_ref().map(|h| leaf(tape, h));
        ModelVars {
            embedding,
            blocks,
            final_norm,
            head,
            flat,
        }
    }

    fn project(&self, tape: &mut Tape<T>, x: Var, bv: &BlockVars, p: Projection) -> Result<Var> {
        let base = tape.matmul(x, bv.projection(p))?;
        match (bv.lora.get(&p), self.lora) {
            (Some(&(a, b)), Some(settings)) => {
                let down = tape.matmul(x, a)?;
                let up = tape.matmul(down, b)?;
                let up = tape.scale(up, T::lit(settings.scaling()));
                tape.add(base, up)
            }
            _ => Ok(base),
        }
    }

    /// `x ← x + attn(rmsnorm(x)); x ← x + mlp(rmsnorm(x))` on `[rows, t, d]`.
    fn block_on_tape(&self, tape: &mut Tape<T>, bv: &BlockVars, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        let (rows, t) = (shape[0], shape[1]);
        let (h, hd) = (cfg.n_heads, cfg.head_dim());

        let normed = tape.rmsnorm(x, bv.attn_norm, cfg.rmsnorm_eps)?;
        let q = self.project(tape, normed, bv, Projection::Wq)?;
        let k = self.project(tape, normed, bv, Projection::Wk)?;
        let v = self.project(tape, normed, bv, Projection::Wv)?;
        let q = tape.reshape(q, &[rows, t, h, hd])?;
        let k = tape.reshape(k, &[rows, t, h, hd])?;
        let v = tape.reshape(v, &[rows, t, h, hd])?;
        let q = tape.rope(q, cfg.rope_theta_base)?;
        let k = tape.rope(k, cfg.rope_theta_base)?;
        let scores = tape.attention_scores(q, k, T::lit(1.0 / (hd as f64).sqrt()))?;
        let probs = tape.softmax_causal(scores)?;
        let mixed = tape.attention_mix(probs, v)?;
        let mixed = tape.reshape(mixed, &[rows, t, cfg.d_model])?;
        let attn = self.project(tape, mixed, bv, Projection::Wo)?;
        let x = tape.add(x, attn)?;

        let normed = tape.rmsnorm(x, bv.mlp_norm, cfg.rmsnorm_eps)?;
        let mlp = if bv.lora.is_empty() || self.lora.is_none() {
            swiglu(tape, normed, bv.w_gate, bv.w_up, bv.w_down)?
        } else {
            let gate = self.project(tape, normed, bv, Projection::WGate)?;
            let gate = tape.silu(gate);
            let up = self.project(tape, normed, bv, Projection::WUp)?;
            let hidden = tape.mul(gate, up)?;
            self.project(tape, hidden, bv, Projection::WDown)?
        };
        tape.add(x, mlp)
    }

    fn check_tokens(&self, tokens: &[u32], rows: usize) -> Result<usize> {
        if rows == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(rows) {
            return Err(AdeError::usage(format!(
                "cannot split {} tokens into {rows} equal rows",
                tokens.len()
            )));
        }
        let t = tokens.len() / rows;
        if t > self.config.max_seq_len {
            return Err(AdeError::usage(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(t)
    }

    /// Records a forward pass over `rows` equal-length sequences packed in
    /// `tokens`. Leaves require gradients when `track_grads` is set and the
    /// parameter is trainable.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        tokens: &[u32],
        rows: usize,
        track_grads: bool,
        capture: bool,
    ) -> Result<ForwardPass> {
        let t = self.check_tokens(tokens, rows)?;
        let vars = self.bind(tape, track_grads);
        let ids: Vec<usize> = tokens.iter().map(|&id| id as usize).collect();
        let mut x = tape.gather_rows(vars.embedding, &ids, &[rows, t])?;
        let mut block_inputs = Vec::new();
        for bv in &vars.blocks {
            if capture {
                block_inputs.push(x);
            }
            x = self.block_on_tape(tape, bv, x)?;
        }
        let x = tape.rmsnorm(x, vars.final_norm, self.config.rmsnorm_eps)?;
        let head = match vars.head {
            Some(h) => h,
            None => tape.transpose(vars.embedding)?,
        };
        let logits = tape.matmul(x, head)?;
        Ok(ForwardPass {
            logits,
            block_inputs,
            params: vars.flat,
        })
    }

    /// Next-token cross-entropy over `rows` packed rows of `L` tokens: each
    /// row feeds its first `L-1` tokens and is scored on its last `L-1`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        tokens: &[u32],
        rows: usize,
        track_grads: bool,
    ) -> Result<(ForwardPass, Var)> {
        if rows == 0 || !tokens.len().is_multiple_of(rows) || tokens.len() / rows < 2 {
            return Err(AdeError::usage(format!(
                "need rows of at least 2 tokens, got {} tokens in {rows} rows",
                tokens.len()
            )));
        }
        let len = tokens.len() / rows;
        let mut inputs = Vec::with_capacity(rows * (len - 1));
        let mut targets = Vec::with_capacity(rows * (len - 1));
        for row in tokens.chunks(len) {
            inputs.extend_from_slice(&row[..len - 1]);
            targets.extend(row[1..].iter().map(|&t| t as usize));
        }
        let pass = self.forward_on_tape(tape, &inputs, rows, track_grads, false)?;
        let loss = tape.cross_entropy(pass.logits, &targets)?;
        Ok((pass, loss))
    }

    /// Batched inference. Logits are `[rows, t, V]`.
    pub fn forward_batch(&self, tokens: &[u32], rows: usize, capture: bool) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, tokens, rows, false, capture)?;
        let snapshot = capture.then(|| ActivationSnapshot {
            block_inputs: pass.block_inputs.iter().map(|&v| tape.value(v).clone()).collect(),
        });
        Ok(ForwardOutput {
            logits: tape.value(pass.logits).clone(),
            snapshot,
        })
    }

    /// Single-sequence inference. Logits are `[t, V]`; snapshot entries are
    /// `[t, d]`.
    pub fn forward(&self, tokens: &[u32], capture: bool) -> Result<ForwardOutput<T>> {
        let out = self.forward_batch(tokens, 1, capture)?;
        let t = tokens.len();
        let squeeze = |x: Tensor<T>| -> Result<Tensor<T>> {
            let last = *x.shape().last().unwrap();
            x.reshape(&[t, last])
        };
        Ok(ForwardOutput {
            logits: squeeze(out.logits)?,
            snapshot: match out.snapshot {
                Some(s) => Some(ActivationSnapshot {
                    block_inputs: s.block_inputs.into_iter().map(squeeze).collect::<Result<_>>()?,
                }),
                None => None,
            },
        })
    }

    /// Runs block `index` alone on `x` (`[t, d]` or `[rows, t, d]`), through
    /// the same code path as the full forward pass.
    pub fn apply_block(&self, index: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| AdeError::usage(format!("unknown block id {index}")))?;
        let single = Model {
            config: self.config.clone(),
            token_embedding: self.token_embedding.clone(),
            blocks: vec![block.clone()],
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head.clone(),
            lora: self.lora,
        };
        let mut tape = Tape::new();
        let vars = single.bind(&mut tape, false);
        let shape = x.shape().to_vec();
        let batched = if shape.len() == 2 {
            x.reshape(&[1, shape[0], shape[1]])?
        } else {
            x.clone()
        };
        let xv = tape.constant(batched);
        let out = single.block_on_tape(&mut tape, &vars.blocks[0], xv)?;
        tape.value(out).reshape(&shape)
    }
}

impl Model<f32> {
    /// Per-tensor SHA-256 of the raw values, keyed by name.
    pub fn tensor_hashes(&self) -> BTreeMap<String, String> {
        self.params()
            .into_iter()
            .map(|(n, p)| (n, tensor_hash(&p.value)))
            .collect()
    }
}
