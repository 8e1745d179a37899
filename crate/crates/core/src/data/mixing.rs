use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Corpus;
use crate::error::{AdeError, Result};
use crate::numerics::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "SplitSpec::default_importance")]
    pub importance_fraction: f64,
    #[serde(default = "SplitSpec::default_eval")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    fn default_importance() -> f64 {
        0.05
    }

    fn default_eval() -> f64 {
        0.10
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("importance_fraction", self.importance_fraction),
            ("eval_fraction", self.eval_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(AdeError::config(field, format!("must be in (0, 1), got {v}")));
            }
        }
        if self.importance_fraction + self.eval_fraction >= 1.0 {
            return Err(AdeError::config("eval_fraction", "fractions must sum to less than 1"));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            importance_fraction: Self::default_importance(),
            eval_fraction: Self::default_eval(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Corpus,
    pub importance: Corpus,
    pub eval: Corpus,
}

/// Seeded partition of the sequences. Part sizes are
/// `round(n · fraction)`, training takes the rest; each part keeps the
/// corpus order.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = corpus.len();
    let n_imp = (n as f64 * spec.importance_fraction).round() as usize;
    let n_eval = (n as f64 * spec.eval_fraction).round() as usize;
    if n_imp == 0 || n_eval == 0 || n_imp + n_eval >= n {
        return Err(AdeError::usage(format!(
            "corpus {} has {n} sequences, too few to split {}/{}",
            corpus.name, spec.importance_fraction, spec.eval_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedStream::new(spec.seed).rng(&format!("split/{}", corpus.name)));
    let part = |range: std::ops::Range<usize>| {
        let mut p = idx[range].to_vec();
        p.sort_unstable();
        p
    };
    let imp = part(0..n_imp);
    let eval = part(n_imp..n_imp + n_eval);
    let train = part(n_imp + n_eval..n);
    Ok(Split {
        train: corpus.subset(&format!("{}/train", corpus.name), &train),
        importance: corpus.subset(&format!("{}/importance", corpus.name), &imp),
        eval: corpus.subset(&format!("{}/eval", corpus.name), &eval),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixComponent {
    pub corpus: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub components: Vec<MixComponent>,
    #[serde(default)]
    pub seed: u64,
}

impl MixSpec {
    pub fn single(corpus: &str, seed: u64) -> Self {
        MixSpec {
            components: vec![MixComponent {
                corpus: corpus.into(),
                weight: 1.0,
            }],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(AdeError::config("mix.components", "no components"));
        }
        if let Some(c) = self.components.iter().find(|c| c.weight.is_nan() || c.weight <= 0.0) {
            return Err(AdeError::config(
                "mix.components",
                format!("weight of {} must be positive, got {}", c.corpus, c.weight),
            ));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AdeError::config(
                "mix.components",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(())
    }
}

/// Interleaved sequences with the index of the component each came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedStream {
    pub names: Vec<String>,
    pub sequences: Vec<(usize, Vec<u32>)>,
}

impl MixedStream {
    pub fn tokens(&self) -> Vec<u32> {
        self.sequences.iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn tokens_per_source(&self) -> Vec<usize> {
        let mut out = vec![0; self.names.len()];
        for (c, s) in &self.sequences {
            out[*c] += s.len();
        }
        out
    }

    /// SHA-256 over the concatenated little-endian token ids.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, s) in &self.sequences {
            for t in s {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Emits exactly `total_tokens` tokens. At each step the component furthest
/// behind its quota (smallest emitted/weight, lower index on ties) gives its
/// next sequence; each component cycles through seeded reshuffles of its
/// corpus. The last sequence is cut at the budget.
pub fn mix(spec: &MixSpec, corpora: &[&Corpus], total_tokens: usize) -> Result<MixedStream> {
    spec.validate()?;
    let seeds = SeedStream::new(spec.seed).child("mix");
    let mut sources = Vec::with_capacity(spec.components.len());
    for c in &spec.components {
        let corpus = corpora
            .iter()
            .find(|k| k.name == c.corpus)
            .ok_or_else(|| AdeError::config("mix.components", format!("unknown corpus {}", c.corpus)))?;
        if corpus.sequences.iter().all(Vec::is_empty) {
            return Err(AdeError::usage(format!("corpus {} is empty", c.corpus)));
        }
        sources.push(corpus);
    }
    let mut rngs: Vec<_> = spec.components.iter().map(|c| seeds.rng(&c.corpus)).collect();
    let mut orders: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
    let mut emitted = vec![0usize; sources.len()];
    let mut out = MixedStream {
        names: spec.components.iter().map(|c| c.corpus.clone()).collect(),
        sequences: Vec::new(),
    };
    let mut remaining = total_tokens;
    while remaining > 0 {
        let mut pick = 0;
        for c in 1..sources.len() {
            let lhs = emitted[c] as f64 / spec.components[c].weight;
            let best = emitted[pick] as f64 / spec.components[pick].weight;
            if lhs < best {
                pick = c;
            }
        }
        let seq = loop {
            if orders[pick].is_empty() {
                let mut fresh: Vec<usize> = (0..sources[pick].len()).collect();
                fresh.shuffle(&mut rngs[pick]);
                fresh.reverse();
                orders[pick] = fresh;
            }
            let s = &sources[pick].sequences[orders[pick].pop().expect("refilled")];
            if !s.is_empty() {
                break s;
            }
        };
        let take = seq.len().min(remaining);
        out.sequences.push((pick, seq[..take].to_vec()));
        emitted[pick] += take;
        remaining -= take;
    }
    Ok(out)
}

/// `rows × seq_len` token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub rows: usize,
    pub seq_len: usize,
}

/// Concatenates the stream and cuts it into batches of
/// `tokens_per_batch / seq_len` rows. The trailing partial batch is dropped.
pub fn batches(stream: &[u32], tokens_per_batch: usize, seq_len: usize) -> Result<Vec<Batch>> {
    if seq_len < 2 || tokens_per_batch < seq_len {
        return Err(AdeError::usage(format!(
            "need 2 <= seq_len <= tokens_per_batch, got seq_len={seq_len}, tokens_per_batch={tokens_per_batch}"
        )));
    }
    let rows = tokens_per_batch / seq_len;
    Ok(stream
        .chunks_exact(rows * seq_len)
        .map(|c| Batch {
            tokens: c.to_vec(),
            rows,
            seq_len,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn numbered(name: &str, n: usize, len: usize, base: u32) -> Corpus {
        Corpus::new(name, (0..n).map(|i| vec![base + i as u32; len]).collect(), "test")
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let c = Corpus::new("c", (0..100).map(|i| vec![i]).collect(), "t");
        let spec = SplitSpec::default();
        let s = split(&c, &spec).unwrap();
        assert_eq!((s.train.len(), s.importance.len(), s.eval.len()), (85, 5, 10));
        assert_eq!(s, split(&c, &spec).unwrap());
        let ids = |c: &Corpus| c.sequences.iter().map(|s| s[0]).collect::<BTreeSet<u32>>();
        let (a, b, e) = (ids(&s.train), ids(&s.importance), ids(&s.eval));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&e) && b.is_disjoint(&e));
        assert_eq!(a.len() + b.len() + e.len(), 100);
    }

    #[test]
    fn split_rejects_tiny_corpus_and_bad_fractions() {
        let c = Corpus::new("c", (0..5).map(|i| vec![i]).collect(), "t");
        assert!(matches!(split(&c, &SplitSpec::default()), Err(AdeError::Usage(_))));
        let bad = SplitSpec {
            importance_fraction: 0.6,
            eval_fraction: 0.5,
            seed: 0,
        };
        assert!(matches!(bad.validate(), Err(AdeError::Config { .. })));
    }

    #[test]
    fn single_component_is_a_shuffle() {
        let c = numbered("a", 10, 3, 0);
        let s = mix(&MixSpec::single("a", 4), &[&c], 30).unwrap();
        let mut firsts: Vec<u32> = s.sequences.iter().map(|(_, q)| q[0]).collect();
        assert_ne!(firsts, (0..10).collect::<Vec<_>>());
        firsts.sort_unstable();
        assert_eq!(firsts, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn ninety_ten_mix_counts() {
        let a = numbered("a", 50, 20, 0);
        let b = numbered("b", 50, 20, 100);
        let spec = MixSpec {
            components: vec![
                MixComponent {
                    corpus: "a".into(),
                    weight: 0.9,
                },
                MixComponent {
                    corpus: "b".into(),
                    weight: 0.1,
                },
            ],
            seed: 7,
        };
        let s = mix(&spec, &[&a, &b], 10_000).unwrap();
        assert_eq!(s.token_count(), 10_000);
        let per = s.tokens_per_source();
        assert!(per[0].abs_diff(9_000) <= 20 && per[1].abs_diff(1_000) <= 20, "{per:?}");
        assert_eq!(s, mix(&spec, &[&a, &b], 10_000).unwrap());
        assert_eq!(s.hash(), mix(&spec, &[&a, &b], 10_000).unwrap().hash());
    }

    #[test]
    fn mix_errors() {
        let a = numbered("a", 5, 2, 0);
        assert!(matches!(
            mix(&MixSpec::single("z", 0), &[&a], 10),
            Err(AdeError::Config { .. })
        ));
        let spec = MixSpec {
            components: vec![MixComponent {
                corpus: "a".into(),
                weight: 0.5,
            }],
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn batch_arithmetic_and_order() {
        let stream: Vec<u32> = (0..1000).collect();
        let b = batches(&stream, 500, 50).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].rows, b[0].seq_len), (10, 50));
        let rebuilt: Vec<u32> = b.iter().flat_map(|x| x.tokens.iter().copied()).collect();
        assert_eq!(rebuilt, stream);
        assert!(batches(&stream, 10, 50).is_err());
    }

    proptest! {
        #[test]
        fn mix_prefix_tracks_weights(w in 0.05f64..0.95, seed in 0u64..1000) {
            let a = numbered("a", 7, 13, 0);
            let b = numbered("b", 5, 9, 100);
            let spec = MixSpec {
                components: vec![
                    MixComponent { corpus: "a".into(), weight: w },
                    MixComponent { corpus: "b".into(), weight: 1.0 - w },
                ],
                seed,
            };
            let s = mix(&spec, &[&a, &b], 3000).unwrap();
            let mut seen = [0usize; 2];
            let mut total = 0usize;
            for (c, q) in &s.sequences {
                seen[*c] += q.len();
                total += q.len();
                if total >= 130 {
                    prop_assert!((seen[0] as f64 - w * total as f64).abs() <= 13.0);
                }
            }
        }
    }
}
