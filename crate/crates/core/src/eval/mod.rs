//! Perplexity, choice-task accuracy, improvement arithmetic and forgetting
//! curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ChoiceTask, Corpus};
use crate::error::{AdeError, Result};
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};
use crate::training::{CurvePoint, RunLog};

const EVAL_ROWS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub corpus: String,
    pub perplexity: f64,
    pub accuracy: Option<f64>,
}

/// `log p(target)` at every position of `[rows, t, V]` logits, in f64.
fn target_log_probs<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Vec<f64> {
    let v = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            row[t as usize].as_f64() - lse
        })
        .collect()
}

/// Sum of next-token negative log-likelihoods and the number of predicted
/// tokens. Sequences are visited in sorted order and cut into windows of
/// `max_seq_len + 1` tokens that overlap by one, so every token after the
/// first is predicted exactly once and the result does not depend on the
/// order of `sequences`.
pub fn nll_sum<T: Scalar>(model: &Model<T>, sequences: &[Vec<u32>]) -> Result<(f64, usize)> {
    let mut canonical: Vec<&Vec<u32>> = sequences.iter().collect();
    canonical.sort();
    let span = model.config.max_seq_len;
    let mut windows: Vec<&[u32]> = Vec::new();
    for s in canonical {
        let mut start = 0;
        while start + 1 < s.len() {
            let end = (start + span + 1).min(s.len());
            windows.push(&s[start..end]);
            start += span;
        }
    }
    let (mut total, mut count) = (0.0f64, 0usize);
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].len();
        let mut j = i + 1;
        while j < windows.len() && j - i < EVAL_ROWS && windows[j].len() == len {
            j += 1;
        }
        let group = &windows[i..j];
        let inputs: Vec<u32> = group.iter().flat_map(|w| w[..len - 1].iter().copied()).collect();
        let targets: Vec<u32> = group.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let out = model.forward_batch(&inputs, group.len(), false)?;
        for lp in target_log_probs(&out.logits, &targets) {
            total -= lp;
        }
        count += targets.len();
        i = j;
    }
    Ok((total, count))
}

/// `exp` of the mean next-token cross-entropy over all positions.
pub fn perplexity<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<f64> {
    let (nll, n) = nll_sum(model, &corpus.sequences)?;
    if n == 0 {
        return Err(AdeError::usage(format!(
            "corpus {} has no sequence of two or more tokens",
            corpus.name
        )));
    }
    Ok((nll / n as f64).exp())
}

/// Mean log-likelihood per option token given the context.
pub fn option_score<T: Scalar>(model: &Model<T>, context: &[u32], option: &[u32]) -> Result<f64> {
    let limit = model.config.max_seq_len + 1;
    if option.len() + 1 > limit {
        return Err(AdeError::usage(format!(
            "option of {} tokens does not fit max_seq_len {}",
            option.len(),
            model.config.max_seq_len
        )));
    }
    let keep = context.len().min(limit - option.len());
    let ctx = &context[context.len() - keep..];
    let full: Vec<u32> = ctx.iter().chain(option).copied().collect();
    let out = model.forward(&full[..full.len() - 1], false)?;
    let lps = target_log_probs(&out.logits, &full[1..]);
    let tail = &lps[ctx.len() - 1..];
    Ok(tail.iter().sum::<f64>() / option.len() as f64)
}

/// Index of the best option; the lower index wins ties.
pub fn pick_option<T: Scalar>(model: &Model<T>, task: &ChoiceTask) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, opt) in task.options.iter().enumerate() {
        let s = option_score(model, &task.context, opt)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

pub fn choice_accuracy<T: Scalar>(model: &Model<T>, tasks: &[ChoiceTask]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(AdeError::usage("no choice tasks"));
    }
    let mut correct = 0usize;
    for (id, t) in tasks.iter().enumerate() {
        let malformed = if t.options.len() < 2 {
            Some("fewer than two options")
        } else if t.context.is_empty() {
            Some("empty context")
        } else if t.options.iter().any(Vec::is_empty) {
            Some("empty option")
        } else if t.correct >= t.options.len() {
            Some("correct index out of range")
        } else {
            None
        };
        if let Some(reason) = malformed {
            return Err(AdeError::Data {
                position: id,
                reason: reason.into(),
            });
        }
        if pick_option(model, t)? == t.correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / tasks.len() as f64)
}

/// Mean of `candidate[i] - base[i]`.
pub fn avg_improvement(candidate: &[f64], base: &[f64]) -> Result<f64> {
    if candidate.len() != base.len() || candidate.is_empty() {
        return Err(AdeError::usage(format!(
            "score lists differ in length or are empty: {} vs {}",
            candidate.len(),
            base.len()
        )));
    }
    Ok(candidate.iter().zip(base).map(|(c, b)| c - b).sum::<f64>() / candidate.len() as f64)
}

/// Named held-out corpus with optional choice tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub corpus: Corpus,
    pub tasks: Vec<ChoiceTask>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSuite {
    pub entries: Vec<SuiteEntry>,
}

impl EvalSuite {
    pub fn evaluate<T: Scalar>(&self, model: &Model<T>) -> Result<Vec<CorpusScore>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(CorpusScore {
                    corpus: e.name.clone(),
                    perplexity: perplexity(model, &e.corpus)?,
                    accuracy: if e.tasks.is_empty() {
                        None
                    } else {
                        Some(choice_accuracy(model, &e.tasks)?)
                    },
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub scores: Vec<CorpusScore>,
    pub reference_arm: Option<String>,
    /// Mean accuracy gain over the reference, in percentage points.
    pub avg_improvement: Option<f64>,
}

impl EvalReport {
    pub fn new(arm: &str, scores: Vec<CorpusScore>) -> Self {
        EvalReport {
            arm: arm.into(),
            scores,
            reference_arm: None,
            avg_improvement: None,
        }
    }

    /// Accuracies in percent, in suite order.
    pub fn accuracy_points(&self) -> Vec<f64> {
        self.scores
            .iter()
            .filter_map(|s| s.accuracy.map(|a| 100.0 * a))
            .collect()
    }

    pub fn compare_to(&mut self, reference: &EvalReport) -> Result<()> {
        let names = |r: &EvalReport| r.scores.iter().map(|s| s.corpus.clone()).collect::<Vec<_>>();
        if names(self) != names(reference) {
            return Err(AdeError::usage(format!(
                "reference {} covers different suites",
                reference.arm
            )));
        }
        self.avg_improvement = Some(avg_improvement(&self.accuracy_points(), &reference.accuracy_points())?);
        self.reference_arm = Some(reference.arm.clone());
        Ok(())
    }

    /// Header plus one row per report: arm, avg improvement, then accuracy
    /// and perplexity per suite.
    pub fn comparison_csv(reports: &[EvalReport]) -> String {
        let mut out = String::from("arm,avg_improvement");
        if let Some(first) = reports.first() {
            for s in &first.scores {
                let _ = write!(out, ",{0}_accuracy,{0}_perplexity", s.corpus);
            }
        }
        out.push('\n');
        for r in reports {
            let _ = write!(
                out,
                "{},{}",
                r.arm,
                r.avg_improvement.map(|v| format!("{v:.4}")).unwrap_or_default()
            );
            for s in &r.scores {
                let acc = s.accuracy.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_default();
                let _ = write!(out, ",{acc},{:.6}", s.perplexity);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingPoint {
    pub interval: usize,
    pub tokens_seen: u64,
    pub general_perplexity: f64,
    pub target_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCurve {
    pub general: String,
    pub target: String,
    /// Scores before the first training step.
    pub initial: ForgettingPoint,
    /// One point per interval boundary.
    pub points: Vec<ForgettingPoint>,
}

impl ForgettingCurve {
    pub fn from_run_log(log: &RunLog, general: &str, target: &str) -> Result<Self> {
        let point = |p: &CurvePoint| -> Result<ForgettingPoint> {
            let get = |name: &str| {
                p.score(name)
                    .map(|s| s.perplexity)
                    .ok_or_else(|| AdeError::usage(format!("interval {} has no score for {name}", p.interval)))
            };
            Ok(ForgettingPoint {
                interval: p.interval,
                tokens_seen: p.tokens_seen,
                general_perplexity: get(general)?,
                target_perplexity: get(target)?,
            })
        };
        Ok(ForgettingCurve {
            general: general.into(),
            target: target.into(),
            initial: point(&log.initial)?,
            points: log.curve.iter().map(point).collect::<Result<_>>()?,
        })
    }

    /// `interval,tokens_seen,corpus,perplexity`, initial point first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("interval,tokens_seen,corpus,perplexity\n");
        for p in std::iter::once(&self.initial).chain(&self.points) {
            let _ = writeln!(
                out,
                "{},{},{},{:.6}",
                p.interval, p.tokens_seen, self.general, p.general_perplexity
            );
            let _ = writeln!(
                out,
                "{},{},{},{:.6}",
                p.interval, p.tokens_seen, self.target, p.target_perplexity
            );
        }
        out
    }

    /// Relative change of target perplexity, initial to last point.
    pub fn target_gain(&self) -> Result<f64> {
        let (first, last) = self.ends()?;
        Ok((first.target_perplexity - last.target_perplexity) / first.target_perplexity)
    }

    fn ends(&self) -> Result<(&ForgettingPoint, &ForgettingPoint)> {
        match self.points.last() {
            Some(last) => Ok((&self.initial, last)),
            None => Err(AdeError::usage("a forgetting curve needs at least one interval point")),
        }
    }
}

/// `(final - initial) / initial` of the general-corpus perplexity. Positive
/// means forgetting.
pub fn forgetting_delta(curve: &ForgettingCurve) -> Result<f64> {
    let (first, last) = curve.ends()?;
    Ok((last.general_perplexity - first.general_perplexity) / first.general_perplexity)
}
