use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{AdeError, Result};
use crate::numerics::SeedStream;

/// Likelihood-scored multiple choice: which option continues `context`?
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceTask {
    pub context: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub correct: usize,
}

/// Cloze tasks over `own`: a `context_len` window of a sequence, its true
/// `option_len` continuation, and one same-length span drawn from `other`.
/// The correct option's slot is drawn at random.
pub fn choice_tasks(
    own: &Corpus,
    other: &Corpus,
    n: usize,
    context_len: usize,
    option_len: usize,
    seed: u64,
) -> Result<Vec<ChoiceTask>> {
    let need = context_len + option_len;
    let own_ok: Vec<&Vec<u32>> = own.sequences.iter().filter(|s| s.len() >= need).collect();
    let other_ok: Vec<&Vec<u32>> = other.sequences.iter().filter(|s| s.len() >= option_len).collect();
    if own_ok.is_empty() || other_ok.is_empty() || context_len == 0 || option_len == 0 {
        return Err(AdeError::usage(format!(
            "no sequences long enough for {context_len}+{option_len} token tasks from {} / {}",
            own.name, other.name
        )));
    }
    let mut rng = SeedStream::new(seed).rng(&format!("tasks/{}", own.name));
    Ok((0..n)
        .map(|_| {
            let s = own_ok[rng.random_range(0..own_ok.len())];
            let start = rng.random_range(0..=s.len() - need);
            let context = s[start..start + context_len].to_vec();
            let truth = s[start + context_len..start + need].to_vec();
            let d = other_ok[rng.random_range(0..other_ok.len())];
            let ds = rng.random_range(0..=d.len() - option_len);
            let distractor = d[ds..ds + option_len].to_vec();
            let correct = rng.random_range(0..2);
            let options = if correct == 0 {
                vec![truth, distractor]
            } else {
                vec![distractor, truth]
            };
            ChoiceTask {
                context,
                options,
                correct,
            }
        })
        .collect())
}
