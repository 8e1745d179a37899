use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AdeError, Result};
use crate::model::{ActivationSnapshot, Model};
use crate::numerics::{Scalar, SeedStream};

use rand::seq::SliceRandom;

/// Cosine of the angle between the hidden states entering two consecutive
/// blocks at one token position. Computed in f64.
pub fn angular_distance<T: Scalar>(x: &[T], x_next: &[T]) -> Result<f64> {
    if x.len() != x_next.len() {
        return Err(AdeError::Shape {
            op: "angular_distance",
            lhs: vec![x.len()],
            rhs: vec![x_next.len()],
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(x_next) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(AdeError::Degenerate("zero-norm activation vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// How blocks are ranked by [`select_top_k`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Largest `arccos(-mean_cos)` first.
    #[default]
    HighestMetric,
    /// Smallest `arccos(-mean_cos)` first.
    LowestMetric,
    /// Largest per-position variance of the cosine first.
    HighestVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    /// 1-based; entry `i` compares the inputs of blocks `i` and `i + 1`.
    pub block_index: usize,
    pub mean_cos: f64,
    pub var_cos: f64,
    /// `arccos(-mean_cos)`, radians.
    pub metric: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub entries: Vec<ImportanceEntry>,
    pub fraction: f64,
    pub n_sequences: usize,
}

/// Running sums of cosines per consecutive block pair. Positions are added
/// in call order, so callers control the reduction order.
#[derive(Clone, Debug)]
pub struct ImportanceAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: Vec<usize>,
}

impl ImportanceAccumulator {
    pub fn new(n_blocks: usize) -> Self {
        let pairs = n_blocks.saturating_sub(1);
        ImportanceAccumulator {
            sum: vec![0.0; pairs],
            sum_sq: vec![0.0; pairs],
            count: vec![0; pairs],
        }
    }

    /// Adds every token position of a snapshot whose entries are `[.., d]`.
    /// Zero-norm positions are skipped.
    pub fn add_snapshot<T: Scalar>(&mut self, snap: &ActivationSnapshot<T>) -> Result<()> {
        if snap.block_inputs.len() != self.sum.len() + 1 {
            return Err(AdeError::usage(format!(
                "snapshot has {} block inputs, accumulator expects {}",
                snap.block_inputs.len(),
                self.sum.len() + 1
            )));
        }
        for pair in 0..self.sum.len() {
            let (cur, next) = (&snap.block_inputs[pair], &snap.block_inputs[pair + 1]);
            let d = *cur.shape().last().unwrap_or(&1);
            for (a, b) in cur.data().chunks(d).zip(next.data().chunks(d)) {
                match angular_distance(a, b) {
                    Ok(c) => {
                        self.sum[pair] += c;
                        self.sum_sq[pair] += c * c;
                        self.count[pair] += 1;
                    }
                    Err(AdeError::Degenerate(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self, fraction: f64, n_sequences: usize) -> Result<ImportanceReport> {
        let mut entries = Vec::with_capacity(self.sum.len());
        for i in 0..self.sum.len() {
            let n = self.count[i];
            if n == 0 {
                return Err(AdeError::Degenerate(format!(
                    "every position entering block {} has zero norm",
                    i + 1
                )));
            }
            let mean = (self.sum[i] / n as f64).clamp(-1.0, 1.0);
            let var = (self.sum_sq[i] / n as f64 - mean * mean).max(0.0);
            entries.push(ImportanceEntry {
                block_index: i + 1,
                mean_cos: mean,
                var_cos: var,
                metric: (-mean).acos(),
                n_samples: n,
            });
        }
        Ok(ImportanceReport {
            entries,
            fraction,
            n_sequences,
        })
    }
}

const CSV_HEADER: &str = "block_index,mean_cos,var_cos,metric,n_samples,fraction,n_sequences";

/// Picks `ceil(fraction · n)` sequences (at least one). Sequences are first
/// put in canonical (lexicographic) order so the choice, and every sum
/// downstream, is independent of how the slice was ordered.
pub fn subsample(sequences: &[Vec<u32>], fraction: f64, seed: u64) -> Result<Vec<&[u32]>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AdeError::usage(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut canonical: Vec<&[u32]> = sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.as_slice())
        .collect();
    if canonical.is_empty() {
        return Err(AdeError::usage("importance slice is empty"));
    }
    canonical.sort();
    let take = ((fraction * canonical.len() as f64).ceil() as usize).clamp(1, canonical.len());
    if take == canonical.len() {
        return Ok(canonical);
    }
    let mut idx: Vec<usize> = (0..canonical.len()).collect();
    idx.shuffle(&mut SeedStream::new(seed).rng("importance/subsample"));
    let mut chosen = idx[..take].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| canonical[i]).collect())
}

/// Mean cosine between consecutive block inputs over every token position of
/// the chosen sequences, and `arccos(-mean)` per block.
///
/// Sequences longer than `max_seq_len` are scored in consecutive windows.
pub fn block_importance<T: Scalar>(
    model: &Model<T>,
    slice: &[Vec<u32>],
    fraction: f64,
    seed: u64,
) -> Result<ImportanceReport> {
    let chosen = subsample(slice, fraction, seed)?;
    let mut acc = ImportanceAccumulator::new(model.n_blocks());
    let window = model.config.max_seq_len;
    for seq in &chosen {
        for chunk in seq.chunks(window) {
            let out = model.forward(chunk, true)?;
            let snap = out.snapshot.expect("capture requested");
            acc.add_snapshot(&snap)?;
        }
    }
    acc.finish(fraction, chosen.len())
}

impl ImportanceReport {
    pub fn metrics(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.metric).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{},{},{}",
                e.block_index, e.mean_cos, e.var_cos, e.metric, e.n_samples, self.fraction, self.n_sequences
            );
        }
        out
    }

    /// Reads the layout written by [`ImportanceReport::to_csv`]. Lines
    /// starting with `#` are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            other => {
                return Err(AdeError::Data {
                    position: other.map_or(0, |(i, _)| i + 1),
                    reason: format!("expected header `{CSV_HEADER}`"),
                })
            }
        }
        let mut report = ImportanceReport {
            entries: Vec::new(),
            fraction: 1.0,
            n_sequences: 0,
        };
        for (i, line) in lines {
            let bad = |reason: String| AdeError::Data {
                position: i + 1,
                reason,
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 7 {
                return Err(bad(format!("expected 7 columns, found {}", cols.len())));
            }
            let float = |c: &str| c.parse::<f64>().map_err(|e| bad(format!("`{c}`: {e}")));
            let int = |c: &str| c.parse::<usize>().map_err(|e| bad(format!("`{c}`: {e}")));
            let entry = ImportanceEntry {
                block_index: int(cols[0])?,
                mean_cos: float(cols[1])?,
                var_cos: float(cols[2])?,
                metric: float(cols[3])?,
                n_samples: int(cols[4])?,
            };
            if entry.block_index != report.entries.len() + 1 {
                return Err(bad(format!("block_index {} out of sequence", entry.block_index)));
            }
            report.fraction = float(cols[5])?;
            report.n_sequences = int(cols[6])?;
            report.entries.push(entry);
        }
        if report.entries.is_empty() {
            return Err(AdeError::Data {
                position: 0,
                reason: "importance report has no rows".into(),
            });
        }
        Ok(report)
    }

    /// Side-by-side metric table, one column per report (e.g. 5%, 10%, full).
    pub fn render_table(reports: &[&ImportanceReport]) -> String {
        let mut out = String::from("Block");
        for r in reports {
            if r.fraction >= 1.0 {
                out.push_str("\tFull");
            } else {
                let _ = write!(out, "\t{}%", r.fraction * 100.0);
            }
        }
        out.push('\n');
        let rows = reports.iter().map(|r| r.entries.len()).max().unwrap_or(0);
        for i in 0..rows {
            let _ = write!(out, "{}", i + 1);
            for r in reports {
                match r.entries.get(i) {
                    Some(e) => {
                        let _ = write!(out, "\t{:.2}", e.metric);
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// The `k` highest-ranked block indices (1-based). Ties go to the lower
/// index.
pub fn select_top_k(report: &ImportanceReport, k: usize, ranking: Ranking) -> Result<Vec<usize>> {
    let n = report.entries.len();
    if k == 0 || k > n {
        return Err(AdeError::usage(format!("k must be in 1..={n}, got {k}")));
    }
    let key = |e: &ImportanceEntry| match ranking {
        Ranking::HighestMetric => e.metric,
        Ranking::LowestMetric => -e.metric,
        Ranking::HighestVariance => e.var_cos,
    };
    let mut order: Vec<&ImportanceEntry> = report.entries.iter().collect();
    order.sort_by(|a, b| {
        key(b)
            .partial_cmp(&key(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.block_index.cmp(&b.block_index))
    });
    let mut chosen: Vec<usize> = order[..k].iter().map(|e| e.block_index).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use std::f64::consts::PI;

    fn report_from_metrics(metrics: &[f64]) -> ImportanceReport {
        ImportanceReport {
            entries: metrics
                .iter()
                .enumerate()
                .map(|(i, &m)| ImportanceEntry {
                    block_index: i + 1,
                    mean_cos: -m.cos(),
                    var_cos: 0.0,
                    metric: m,
                    n_samples: 1,
                })
                .collect(),
            fraction: 1.0,
            n_sequences: 1,
        }
    }

    #[test]
    fn angular_distance_reference_cases() {
        let v = [0.3f64, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((angular_distance(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(angular_distance(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((angular_distance(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            angular_distance(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(AdeError::Degenerate(_))
        ));
    }

    #[test]
    fn orthogonal_snapshots_give_half_pi() {
        // Inputs alternate between e1 and e2 so every consecutive pair is
        // orthogonal.
        let e1 = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let e2 = Tensor::<f32>::from_f64(&[2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let snap = ActivationSnapshot {
            block_inputs: vec![e1.clone(), e2.clone(), e1],
        };
        let mut acc = ImportanceAccumulator::new(3);
        acc.add_snapshot(&snap).unwrap();
        let r = acc.finish(1.0, 1).unwrap();
        assert_eq!(r.entries.len(), 2);
        for e in &r.entries {
            assert!((e.metric - PI / 2.0).abs() < 1e-12);
            assert_eq!(e.n_samples, 2);
        }
    }

    #[test]
    fn degenerate_positions_are_skipped() {
        let a = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 1.0]).unwrap();
        let mut acc = ImportanceAccumulator::new(2);
        acc.add_snapshot(&ActivationSnapshot {
            block_inputs: vec![a.clone(), b],
        })
        .unwrap();
        let r = acc.finish(1.0, 1).unwrap();
        assert_eq!(r.entries[0].n_samples, 1);
        assert!((r.entries[0].metric - PI).abs() < 1e-12);

        let zero = Tensor::<f32>::zeros(&[2, 2]);
        let mut acc = ImportanceAccumulator::new(2);
        acc.add_snapshot(&ActivationSnapshot {
            block_inputs: vec![zero.clone(), zero],
        })
        .unwrap();
        assert!(matches!(acc.finish(1.0, 1), Err(AdeError::Degenerate(_))));
    }

    #[test]
    fn reference_ranking_selects_blocks_two_and_eight() {
        let full = [
            0.87, 1.68, 1.44, 1.36, 1.35, 1.16, 1.50, 1.61, 1.36, 1.34, 1.38, 1.51, 1.44, 1.09, 1.26, 1.01, 0.86, 0.84,
            0.87, 1.22, 1.42,
        ];
        let r = report_from_metrics(&full);
        assert_eq!(r.entries.len(), 21);
        assert_eq!(select_top_k(&r, 2, Ranking::HighestMetric).unwrap(), vec![2, 8]);
        assert_eq!(select_top_k(&r, 1, Ranking::LowestMetric).unwrap(), vec![18]);
    }

    #[test]
    fn ties_go_to_lower_index_and_k_bounds() {
        let r = report_from_metrics(&[1.0; 5]);
        assert_eq!(select_top_k(&r, 2, Ranking::HighestMetric).unwrap(), vec![1, 2]);
        assert_eq!(
            select_top_k(&r, 5, Ranking::HighestMetric).unwrap(),
            vec![1, 2, 3, 4, 5]
        );
        assert!(select_top_k(&r, 0, Ranking::HighestMetric).is_err());
        assert!(select_top_k(&r, 6, Ranking::HighestMetric).is_err());
    }

    #[test]
    fn subsample_is_order_independent() {
        let seqs: Vec<Vec<u32>> = (0..40).map(|i| vec![i, i * 3 % 7, 5]).collect();
        let mut shuffled = seqs.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        assert_eq!(subsample(&seqs, 0.1, 9).unwrap(), subsample(&shuffled, 0.1, 9).unwrap());
        assert_eq!(subsample(&seqs, 0.1, 9).unwrap().len(), 4);
        assert!(subsample(&[], 1.0, 0).is_err());
        assert!(subsample(&seqs, 0.0, 0).is_err());
    }

    #[test]
    fn csv_and_table_layout() {
        let r = report_from_metrics(&[0.5, 1.5]);
        let csv = r.to_csv();
        assert!(csv.starts_with("block_index,mean_cos,var_cos,metric,n_samples,fraction,n_sequences\n"));
        assert_eq!(csv.lines().count(), 3);
        let back = ImportanceReport::from_csv(&format!("# stamp\n{csv}")).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert!(ImportanceReport::from_csv("block_index\n").is_err());
        assert!(ImportanceReport::from_csv(&csv.replace("\n2,", "\n3,")).is_err());
        let mut five = r.clone();
        five.fraction = 0.05;
        let table = ImportanceReport::render_table(&[&five, &r]);
        assert!(table.starts_with("Block\t5%\tFull\n1\t0.50\t0.50\n"), "{table}");
    }
}
