//! Corpora, tokenization, splits, mixing and batching.

mod mixing;
mod synth;
mod tasks;
mod tokenizer;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use mixing::{batches, mix, split, Batch, MixComponent, MixSpec, MixedStream, Split, SplitSpec};
pub use synth::Generator;
pub use tasks::{choice_tasks, ChoiceTask};
pub use tokenizer::{Scheme, Tokenizer, UNK};

use crate::error::{AdeError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub sequences: Vec<Vec<u32>>,
    pub source: String,
}

impl Corpus {
    pub fn new(name: impl Into<String>, sequences: Vec<Vec<u32>>, source: impl Into<String>) -> Self {
        Corpus {
            name: name.into(),
            sequences,
            source: source.into(),
        }
    }

    pub fn from_texts<S: AsRef<str>>(name: &str, texts: &[S], tokenizer: &Tokenizer, source: &str) -> Self {
        let sequences = texts
            .iter()
            .map(|t| tokenizer.encode(t.as_ref()))
            .filter(|s| !s.is_empty())
            .collect();
        Corpus::new(name, sequences, source)
    }

    /// One document per non-empty line of a UTF-8 file.
    pub fn from_text_file(name: &str, path: &Path, tokenizer: &Tokenizer) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AdeError::io(path, e))?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        Ok(Corpus::from_texts(name, &lines, tokenizer, &path.display().to_string()))
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn max_id(&self) -> Option<u32> {
        self.sequences.iter().flatten().copied().max()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(AdeError::Data {
                    position: i,
                    reason: format!("token {bad} outside vocabulary of {vocab_size} in corpus {}", self.name),
                });
            }
        }
        Ok(())
    }

    pub fn subset(&self, name: &str, indices: &[usize]) -> Corpus {
        Corpus::new(
            name,
            indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            format!("{}[{} of {}]", self.name, indices.len(), self.len()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn text_file_ingestion_skips_blank_lines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "ab\n\n  \nba").unwrap();
        let tok = Tokenizer::char_from_texts(["ab"]);
        let c = Corpus::from_text_file("user", f.path(), &tok).unwrap();
        assert_eq!(c.sequences, vec![vec![1, 2], vec![2, 1]]);
        assert_eq!(c.token_count(), 4);
        assert!(Corpus::from_text_file("x", Path::new("/no/such/file"), &tok).is_err());
    }

    #[test]
    fn vocab_check_reports_sequence() {
        let c = Corpus::new("c", vec![vec![1, 2], vec![3, 9]], "test");
        assert!(c.check_vocab(10).is_ok());
        assert!(matches!(c.check_vocab(5), Err(AdeError::Data { position: 1, .. })));
    }
}
