//! Binary checkpoint format.
//!
//! ```text
//! "ADECKPT\0"            8 bytes
//! format version         u32 LE
//! header length          u64 LE
//! header                 JSON (CheckpointHeader)
//! payload                f32 LE, tensors concatenated in directory order
//! SHA-256                32 bytes over everything above
//! ```
//!
//! Optimizer moments, when present, follow the model tensors in the
//! directory as `optimizer.m.<name>` and `optimizer.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::error::{AdeError, Result};
use crate::model::{DecoderBlock, LoraPair, LoraSettings, Model, ModelConfig, Param, Projection};
use crate::numerics::Tensor;
use crate::training::{AdamWConfig, Moments, OptimizerState, RunLog};

pub const MAGIC: &[u8; 8] = b"ADECKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    pub trainable: bool,
}

impl DirectoryEntry {
    fn bytes(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStateHeader {
    pub interval: usize,
    pub optimizer: AdamWConfig,
    pub optimizer_step: u64,
    pub log: RunLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: Option<ExperimentConfig>,
    pub model: ModelConfig,
    pub lora: Option<LoraSettings>,
    pub tensors: Vec<DirectoryEntry>,
    pub train_state: Option<TrainStateHeader>,
}

/// Optimizer and run log saved at an interval boundary, enough to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub interval: usize,
    pub optimizer: OptimizerState,
    pub log: RunLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub config: Option<ExperimentConfig>,
    pub model: Model,
    pub train: Option<TrainState>,
}

fn m_name(n: &str) -> String {
    format!("optimizer.m.{n}")
}

fn v_name(n: &str) -> String {
    format!("optimizer.v.{n}")
}

/// Base tensor names and shapes implied by a config, in listing order.
pub fn base_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![("token_embedding".to_string(), vec![v, d])];
    let shapes: [Vec<usize>; 9] = [
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d, f],
        vec![d, f],
        vec![f, d],
    ];
    for i in 0..cfg.n_blocks {
        for (n, s) in DecoderBlock::<f32>::TENSOR_NAMES.iter().zip(&shapes) {
            out.push((format!("blocks.{i}.{n}"), s.clone()));
        }
    }
    out.push(("final_norm.weight".to_string(), vec![d]));
    if !cfg.tie_embeddings {
        out.push(("lm_head".to_string(), vec![d, v]));
    }
    out
}

/// Parses `blocks.{i}.{proj}.lora_{a|b}`.
fn parse_lora_name(name: &str) -> Option<(usize, Projection, bool)> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, rest) = rest.split_once('.')?;
    let (proj, which) = rest.rsplit_once('.')?;
    let is_a = match which {
        "lora_a" => true,
        "lora_b" => false,
        _ => return None,
    };
    Some((idx.parse().ok()?, Projection::parse(proj)?, is_a))
}

impl Checkpoint {
    pub fn new(model: Model, config: Option<&ExperimentConfig>) -> Self {
        Checkpoint {
            config_hash: config.map(ExperimentConfig::hash).unwrap_or_default(),
            seed: config.map(|c| c.seed).unwrap_or_default(),
            config: config.cloned(),
            model,
            train: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>, trainable: bool| {
            entries.push(DirectoryEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
                trainable,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (n, p) in self.model.params() {
            push(n, &p.value, p.trainable);
        }
        if let Some(ts) = &self.train {
            for (n, m) in ts.optimizer.moments() {
                push(m_name(n), &m.m, false);
                push(v_name(n), &m.v, false);
            }
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            config: self.config.clone(),
            model: self.model.config.clone(),
            lora: self.model.lora,
            tensors: entries,
            train_state: self.train.as_ref().map(|ts| TrainStateHeader {
                interval: ts.interval,
                optimizer: ts.optimizer.config.clone(),
                optimizer_step: ts.optimizer.step,
                log: ts.log.clone(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len() + HASH_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Reads only the header, after checking framing and the content hash.
    pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
        if bytes.len() < PREFIX + HASH_LEN {
            return Err(AdeError::Format(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(AdeError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(AdeError::Format(format!("unsupported format version {version}")));
        }
        let body_end = bytes.len() - HASH_LEN;
        let expected = hex::encode(&bytes[body_end..]);
        let actual = hex::encode(Sha256::digest(&bytes[..body_end]));
        if expected != actual {
            return Err(AdeError::Integrity { expected, actual });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if header_len > (body_end - PREFIX) as u64 {
            return Err(AdeError::Format(format!(
                "header length {header_len} overruns the file"
            )));
        }
        let header_end = PREFIX + header_len as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[PREFIX..header_end]).map_err(|e| AdeError::Format(format!("header: {e}")))?;
        Ok((header, &bytes[header_end..body_end]))
    }

    /// Checks the directory against the model config before any tensor is
    /// materialized.
    fn validate_directory(h: &CheckpointHeader, payload_len: usize) -> Result<()> {
        h.model.validate()?;
        let mut offset = 0u64;
        for e in &h.tensors {
            if e.dtype != "f32" {
                return Err(AdeError::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != offset {
                return Err(AdeError::Format(format!(
                    "{}: offset {} where {offset} was expected",
                    e.name, e.offset
                )));
            }
            offset += e.bytes();
        }
        if offset != payload_len as u64 {
            return Err(AdeError::Format(format!(
                "directory covers {offset} bytes, payload has {payload_len}"
            )));
        }
        let shapes: BTreeMap<&str, &Vec<usize>> = h.tensors.iter().map(|e| (e.name.as_str(), &e.shape)).collect();
        if shapes.len() != h.tensors.len() {
            return Err(AdeError::Format("duplicate tensor names".into()));
        }
        let base = base_layout(&h.model);
        for (name, shape) in &base {
            match shapes.get(name.as_str()) {
                Some(s) if *s == shape => {}
                Some(s) => {
                    return Err(AdeError::Format(format!(
                        "{name}: shape {s:?} disagrees with config {shape:?}"
                    )))
                }
                None => return Err(AdeError::Format(format!("missing tensor {name}"))),
            }
        }
        let base_names: BTreeMap<&str, &Vec<usize>> = base.iter().map(|(n, s)| (n.as_str(), s)).collect();
        for e in &h.tensors {
            if base_names.contains_key(e.name.as_str()) {
                continue;
            }
            if let Some(rest) = e
                .name
                .strip_prefix("optimizer.m.")
                .or(e.name.strip_prefix("optimizer.v."))
            {
                if h.train_state.is_none() || shapes.get(rest) != Some(&&e.shape) {
                    return Err(AdeError::Format(format!("stray optimizer tensor {}", e.name)));
                }
                continue;
            }
            let (idx, proj, is_a) =
                parse_lora_name(&e.name).ok_or_else(|| AdeError::Format(format!("unknown tensor {}", e.name)))?;
            let settings = h
                .lora
                .ok_or_else(|| AdeError::Format(format!("{} present without LoRA settings", e.name)))?;
            if idx >= h.model.n_blocks {
                return Err(AdeError::Format(format!("{}: block out of range", e.name)));
            }
            let w = base_names[format!("blocks.{idx}.{}", proj.name()).as_str()];
            let want = if is_a {
                vec![w[0], settings.rank]
            } else {
                vec![settings.rank, w[1]]
            };
            if e.shape != want {
                return Err(AdeError::Format(format!(
                    "{}: shape {:?}, expected {want:?}",
                    e.name, e.shape
                )));
            }
        }
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = Self::read_header(bytes)?;
        Self::validate_directory(&h, payload.len())?;
        let read = |e: &DirectoryEntry| -> Tensor<f32> {
            let start = e.offset as usize;
            let data = payload[start..start + e.bytes() as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data).expect("validated shape")
        };
        let by_name: BTreeMap<&str, &DirectoryEntry> = h.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let param = |name: &str| -> Param<f32> {
            let e = by_name[name];
            Param {
                value: read(e),
                trainable: e.trainable,
            }
        };
        let mut blocks = Vec::with_capacity(h.model.n_blocks);
        for i in 0..h.model.n_blocks {
            let p = |n: &str| param(&format!("blocks.{i}.{n}"));
            let mut lora = BTreeMap::new();
            for proj in Projection::ALL {
                let a = format!("blocks.{i}.{proj}.lora_a");
                let b = format!("blocks.{i}.{proj}.lora_b");
                match (by_name.contains_key(a.as_str()), by_name.contains_key(b.as_str())) {
                    (true, true) => {
                        lora.insert(
                            proj,
                            LoraPair {
                                a: param(&a),
                                b: param(&b),
                            },
                        );
                    }
                    (false, false) => {}
                    _ => return Err(AdeError::Format(format!("unpaired adapter on blocks.{i}.{proj}"))),
                }
            }
            blocks.push(DecoderBlock {
                attn_norm: p("attn_norm.weight"),
                wq: p("attn.wq"),
                wk: p("attn.wk"),
                wv: p("attn.wv"),
                wo: p("attn.wo"),
                mlp_norm: p("mlp_norm.weight"),
                w_gate: p("mlp.w_gate"),
                w_up: p("mlp.w_up"),
                w_down: p("mlp.w_down"),
                lora,
            });
        }
        let model = Model {
            config: h.model.clone(),
            token_embedding: param("token_embedding"),
            blocks,
            final_norm: param("final_norm.weight"),
            lm_head: (!h.model.tie_embeddings).then(|| param("lm_head")),
            lora: h.lora,
        };
        let listed: Vec<&str> = h
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !n.starts_with("optimizer."))
            .collect();
        let rebuilt: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        if listed != rebuilt {
            return Err(AdeError::Format(
                "directory order differs from the model listing".into(),
            ));
        }
        let train = match h.train_state {
            Some(ts) => {
                let mut moments = BTreeMap::new();
                for e in &h.tensors {
                    if let Some(n) = e.name.strip_prefix("optimizer.m.") {
                        let v = by_name
                            .get(v_name(n).as_str())
                            .ok_or_else(|| AdeError::Format(format!("missing second moment for {n}")))?;
                        moments.insert(n.to_string(), Moments { m: read(e), v: read(v) });
                    }
                }
                Some(TrainState {
                    interval: ts.interval,
                    optimizer: OptimizerState::restore(ts.optimizer, ts.optimizer_step, moments),
                    log: ts.log,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            config_hash: h.config_hash,
            seed: h.seed,
            config: h.config,
            model,
            train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| AdeError::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| AdeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AdeError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq_len: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn base_layout_matches_enumeration() {
        for tie in [false, true] {
            let c = ModelConfig {
                tie_embeddings: tie,
                ..cfg()
            };
            let m: Model = Model::init(c.clone(), 1).unwrap();
            let listed: Vec<(String, Vec<usize>)> = m.named_tensors().into_iter().map(|t| (t.name, t.shape)).collect();
            assert_eq!(base_layout(&c), listed);
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut m: Model = Model::init(cfg(), 1).unwrap();
        m.blocks[1].set_trainable(false);
        let ck = Checkpoint::new(m, None);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let m: Model = Model::init(cfg(), 1).unwrap();
        let mut bytes = Checkpoint::new(m, None).encode();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(AdeError::Integrity { .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(AdeError::Format(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(AdeError::Format(_))));
    }

    #[test]
    fn header_shape_mismatch_fails_before_loading() {
        let m: Model = Model::init(cfg(), 1).unwrap();
        let bytes = Checkpoint::new(m, None).encode();
        let (mut h, payload) = Checkpoint::read_header(&bytes).unwrap();
        h.model.d_ff = 16;
        let err = Checkpoint::validate_directory(&h, payload.len()).unwrap_err();
        assert!(err.to_string().contains("disagrees"), "{err}");
    }

    #[test]
    fn lora_names_parse() {
        assert_eq!(
            parse_lora_name("blocks.3.mlp.w_up.lora_b"),
            Some((3, Projection::WUp, false))
        );
        assert_eq!(parse_lora_name("blocks.3.mlp.w_up"), None);
    }
}
