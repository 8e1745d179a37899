use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::{rng, Scalar, SeedStream, Tensor};

use super::ModelConfig;

/// A tensor plus its freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { value, trainable: true }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            trainable: self.trainable,
        }
    }
}

/// The seven projection matrices of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
    WGate,
    WUp,
    WDown,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Wq,
        Projection::Wk,
        Projection::Wv,
        Projection::Wo,
        Projection::WGate,
        Projection::WUp,
        Projection::WDown,
    ];

    /// Name within a block, e.g. `attn.wq`.
    pub fn name(self) -> &'static str {
        match self {
            Projection::Wq => "attn.wq",
            Projection::Wk => "attn.wk",
            Projection::Wv => "attn.wv",
            Projection::Wo => "attn.wo",
            Projection::WGate => "mlp.w_gate",
            Projection::WUp => "mlp.w_up",
            Projection::WDown => "mlp.w_down",
        }
    }

    pub fn parse(s: &str) -> Option<Projection> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().split('.').nth(1) == Some(s))
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Low-rank adapter on one projection: `W + A·B·scaling`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T: Scalar = f32> {
    pub a: Param<T>,
    pub b: Param<T>,
}

/// One decoder layer: pre-norm attention followed by a pre-norm SwiGLU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T: Scalar = f32> {
    pub attn_norm: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub mlp_norm: Param<T>,
    pub w_gate: Param<T>,
    pub w_up: Param<T>,
    pub w_down: Param<T>,
    pub lora: BTreeMap<Projection, LoraPair<T>>,
}

pub const INIT_STD: f64 = 0.02;

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, seeds: &SeedStream, label: &str) -> Tensor<T> {
    let mut r = seeds.rng(label);
    Tensor::from_fn(shape, |_| T::lit(std * rng::normal(&mut r)))
}

impl<T: Scalar> DecoderBlock<T> {
    /// Names of the base tensors, in listing order.
    pub const TENSOR_NAMES: [&'static str; 9] = [
        "attn_norm.weight",
        "attn.wq",
        "attn.wk",
        "attn.wv",
        "attn.wo",
        "mlp_norm.weight",
        "mlp.w_gate",
        "mlp.w_up",
        "mlp.w_down",
    ];

    /// Normal(0, 0.02) projections, unit norm weights.
    pub fn init(cfg: &ModelConfig, seeds: &SeedStream) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mat = |shape: &[usize], name: &str| Param::new(normal_tensor(shape, INIT_STD, seeds, name));
        DecoderBlock {
            attn_norm: Param::new(Tensor::ones(&[d])),
            wq: mat(&[d, d], "attn.wq"),
            wk: mat(&[d, d], "attn.wk"),
            wv: mat(&[d, d], "attn.wv"),
            wo: mat(&[d, d], "attn.wo"),
            mlp_norm: Param::new(Tensor::ones(&[d])),
            w_gate: mat(&[d, f], "mlp.w_gate"),
            w_up: mat(&[d, f], "mlp.w_up"),
            w_down: mat(&[f, d], "mlp.w_down"),
            lora: BTreeMap::new(),
        }
    }

    pub fn projection(&self, p: Projection) -> &Param<T> {
        match p {
            Projection::Wq => &self.wq,
            Projection::Wk => &self.wk,
            Projection::Wv => &self.wv,
            Projection::Wo => &self.wo,
            Projection::WGate => &self.w_gate,
            Projection::WUp => &self.w_up,
            Projection::WDown => &self.w_down,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Param<T> {
        match p {
            Projection::Wq => &mut self.wq,
            Projection::Wk => &mut self.wk,
            Projection::Wv => &mut self.wv,
            Projection::Wo => &mut self.wo,
            Projection::WGate => &mut self.w_gate,
            Projection::WUp => &mut self.w_up,
            Projection::WDown => &mut self.w_down,
        }
    }

    /// Base tensors in [`Self::TENSOR_NAMES`] order.
    pub fn base_tensors(&self) -> [&Param<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn base_tensors_mut(&mut self) -> [&mut Param<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    /// Every tensor of the block (base, then adapters) with its local name.
    pub fn named(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = Self::TENSOR_NAMES
            .iter()
            .zip(self.base_tensors())
            .map(|(n, p)| (n.to_string(), p))
            .collect();
        for (proj, pair) in &self.lora {
            out.push((format!("{proj}.lora_a"), &pair.a));
            out.push((format!("{proj}.lora_b"), &pair.b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let DecoderBlock {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_gate,
            w_up,
            w_down,
            lora,
        } = self;
        let mut out: Vec<(String, &mut Param<T>)> = Self::TENSOR_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip([attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down])
            .collect();
        for (proj, pair) in lora.iter_mut() {
            out.push((format!("{proj}.lora_a"), &mut pair.a));
            out.push((format!("{proj}.lora_b"), &mut pair.b));
        }
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.base_tensors_mut() {
            p.trainable = trainable;
        }
    }

    pub fn cast<U: Scalar>(&self) -> DecoderBlock<U> {
        DecoderBlock {
            attn_norm: self.attn_norm.cast(),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            mlp_norm: self.mlp_norm.cast(),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
            lora: self
                .lora
                .iter()
                .map(|(k, v)| {
                    (
                        *k,
                        LoraPair {
                            a: v.a.cast(),
                            b: v.b.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}
