//! The five pipeline commands. Each writes its artifacts under `out` and
//! stamps every file with the config hash and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AdeError, Result};
use crate::eval::{forgetting_delta, EvalReport, ForgettingCurve};
use crate::model::Model;
use crate::surgery::{AdePlan, AdjustMode, ExpansionLayout, ImportanceReport, InitStrategy};
use crate::training::{run, IntervalState, OptimizerState, RunHooks, RunLog};

use super::{AdeTemplate, ArmConfig, ArmOutcomeParts, Checkpoint, ExperimentConfig, Lab, TrainState};

fn stamp(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AdeError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| AdeError::io(path, e))
}

fn write_stamped(cfg: &ExperimentConfig, path: &Path, body: &str) -> Result<()> {
    write_file(path, format!("{}{body}", stamp(cfg)))
}

/// JSON object `{config_hash, seed, <key>: value}`.
fn write_json<T: Serialize>(cfg: &ExperimentConfig, path: &Path, key: &str, value: &T) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("config_hash".into(), cfg.hash().into());
    obj.insert("seed".into(), cfg.seed.into());
    obj.insert(key.into(), serde_json::to_value(value).expect("serializable"));
    let mut text = serde_json::to_string_pretty(&obj).expect("serializable");
    text.push('\n');
    write_file(path, text)
}

/// The ADE settings that apply to this config: the arm's own when it is an
/// ADE arm, otherwise the reproduce template.
pub fn ade_template(cfg: &ExperimentConfig) -> AdeTemplate {
    match &cfg.arm {
        ArmConfig::Ade(t) => t.clone(),
        _ => cfg.reproduce.ade.clone(),
    }
}

/// Scores the checkpoint's blocks on the target importance split and
/// writes `importance.csv` and `importance.txt`. Prints the top-k.
pub fn cmd_importance(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    fraction: Option<f64>,
    out: &Path,
) -> Result<ImportanceReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let lab = Lab::new(cfg)?;
    let t = ade_template(cfg);
    let report = lab.importance(&ckpt.model, fraction.unwrap_or(t.importance_fraction))?;
    write_stamped(cfg, &out.join("importance.csv"), &report.to_csv())?;
    write_stamped(
        cfg,
        &out.join("importance.txt"),
        &ImportanceReport::render_table(&[&report]),
    )?;
    let k = t.k.min(report.entries.len());
    let top = crate::surgery::select_top_k(&report, k, t.ranking)?;
    println!("top-{k} blocks: {top:?}");
    Ok(report)
}

/// Manifest written next to the surgery checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanManifest {
    pub selected: Vec<usize>,
    /// 1-based positions of the new blocks in the expanded model.
    pub inserted: Vec<usize>,
    pub mode: AdjustMode,
    pub init: InitStrategy,
    pub n_blocks_before: usize,
    pub n_blocks_after: usize,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

impl PlanManifest {
    pub fn new(plan: &AdePlan, layout: Option<&ExpansionLayout>, before: usize, model: &Model) -> Self {
        let (trainable, frozen): (Vec<_>, Vec<_>) = model.params().into_iter().partition(|(_, p)| p.trainable);
        PlanManifest {
            selected: plan.selected_blocks.iter().copied().collect(),
            inserted: layout.map(|l| l.inserted.clone()).unwrap_or_default(),
            mode: plan.mode,
            init: plan.init,
            n_blocks_before: before,
            n_blocks_after: model.n_blocks(),
            trainable: trainable.into_iter().map(|(n, _)| n).collect(),
            frozen: frozen.into_iter().map(|(n, _)| n).collect(),
        }
    }
}

/// Optional overrides of the config's ADE template.
#[derive(Clone, Debug, Default)]
pub struct SurgeryArgs {
    pub k: Option<usize>,
    pub mode: Option<AdjustMode>,
    pub init: Option<InitStrategy>,
    pub fraction: Option<f64>,
    /// Use this importance CSV instead of scoring the checkpoint.
    pub importance: Option<PathBuf>,
}

/// Selects `k` blocks from the importance report (computed inline unless
/// one is given) and applies the plan. Writes `surgery.ckpt`, `plan.json`
/// and `importance.csv`.
pub fn cmd_surgery(cfg: &ExperimentConfig, checkpoint: &Path, args: SurgeryArgs, out: &Path) -> Result<PlanManifest> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let lab = Lab::new(cfg)?;
    let mut t = ade_template(cfg);
    t.k = args.k.unwrap_or(t.k);
    t.mode = args.mode.unwrap_or(t.mode);
    t.init = args.init.unwrap_or(t.init);
    t.importance_fraction = args.fraction.unwrap_or(t.importance_fraction);
    let (model, plan, layout, report) = match &args.importance {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| AdeError::io(path, e))?;
            let report = ImportanceReport::from_csv(&text)?;
            let (model, plan, layout) = lab.apply_ade(&ckpt.model, &report, &t)?;
            (model, plan, layout, report)
        }
        None => lab.prepare_ade(&ckpt.model, &t)?,
    };
    let manifest = PlanManifest::new(&plan, layout.as_ref(), ckpt.model.n_blocks(), &model);
    Checkpoint::new(model, Some(cfg)).save(&out.join("surgery.ckpt"))?;
    write_json(cfg, &out.join("plan.json"), "plan", &manifest)?;
    write_stamped(cfg, &out.join("importance.csv"), &report.to_csv())?;
    println!(
        "selected {:?}, inserted {:?}, {} of {} tensors trainable",
        manifest.selected,
        manifest.inserted,
        manifest.trainable.len(),
        manifest.trainable.len() + manifest.frozen.len()
    );
    Ok(manifest)
}

pub fn interval_checkpoint_name(interval: usize) -> String {
    format!("interval_{interval:02}.ckpt")
}

/// Runs the config's arm. `pretrain` starts from a fresh model; the other
/// arms start from `checkpoint`. A checkpoint that already carries a freeze
/// mask or adapters (e.g. from `surgery`) is trained as it is; a plain one
/// is prepared for the arm first. With `resume`, training continues from an
/// interval checkpoint and yields the same artifacts as an uninterrupted
/// run.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<RunLog> {
    let lab = Lab::new(cfg)?;
    let pretrain = matches!(cfg.arm, ArmConfig::Pretrain);
    let (train_cfg, stream) = if pretrain {
        (lab.pretrain_config(), lab.pretrain_stream()?)
    } else {
        (lab.cpt_config(), lab.cpt_stream(cfg.data.duplicate_fraction)?)
    };
    let (mut model, mut opt, prior) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_hash != cfg.hash() {
                return Err(AdeError::usage(format!(
                    "{} was written under config {}, not {}",
                    path.display(),
                    ckpt.config_hash,
                    cfg.hash()
                )));
            }
            let state = ckpt
                .train
                .ok_or_else(|| AdeError::usage(format!("{} holds no training state", path.display())))?;
            (ckpt.model, state.optimizer, Some(state.log))
        }
        None => {
            let model = match (pretrain, checkpoint) {
                (true, _) => lab.init_model()?,
                (false, None) => {
                    return Err(AdeError::usage(format!(
                        "the {} arm needs --checkpoint",
                        cfg.arm.label()
                    )))
                }
                (false, Some(path)) => {
                    let base = Checkpoint::load(path)?.model;
                    let prepared = base.lora.is_some() || base.params().iter().any(|(_, p)| !p.trainable);
                    if prepared {
                        base
                    } else {
                        lab.prepare_arm(&base, &cfg.arm)?.model
                    }
                }
            };
            (model, OptimizerState::new(train_cfg.optimizer.clone()), None)
        }
    };

    let mut evaluate = |m: &Model| lab.evaluate(m);
    let mut save_interval = |s: &IntervalState<'_>| -> Result<()> {
        let ckpt = Checkpoint {
            train: Some(TrainState {
                interval: s.interval,
                optimizer: s.optimizer.clone(),
                log: s.log.clone(),
            }),
            ..Checkpoint::new(s.model.clone(), Some(cfg))
        };
        ckpt.save(&out.join(interval_checkpoint_name(s.interval)))
    };
    let mut hooks = RunHooks {
        evaluate: &mut evaluate,
        on_interval: Some(&mut save_interval),
    };
    let log = run(&mut model, &mut opt, &train_cfg, &stream, &mut hooks, prior)?;

    Checkpoint::new(model, Some(cfg)).save(&out.join("final.ckpt"))?;
    write_json(cfg, &out.join("runlog.json"), "log", &log)?;
    write_stamped(cfg, &out.join("steps.jsonl"), &log.steps_jsonl())?;
    write_stamped(cfg, &out.join("curve.csv"), &log.curve_csv())?;
    if !pretrain {
        let curve = ForgettingCurve::from_run_log(&log, lab.general_name(), lab.target_name())?;
        write_stamped(cfg, &out.join("forgetting.csv"), &curve.to_csv())?;
    }
    Ok(log)
}

/// `eval.json` as written by [`cmd_eval`].
#[derive(Clone, Debug, Serialize, Deserialize)]
struct EvalFile {
    config_hash: String,
    seed: u64,
    report: EvalReport,
}

pub fn read_eval_report(path: &Path) -> Result<EvalReport> {
    let text =
        fs::read_to_string(path).map_err(|e| AdeError::usage(format!("reference report {}: {e}", path.display())))?;
    let file: EvalFile = serde_json::from_str(&text)
        .map_err(|e| AdeError::usage(format!("reference report {}: {e}", path.display())))?;
    Ok(file.report)
}

/// Scores the checkpoint on the evaluation suite and writes `eval.json`
/// and `comparison.csv`. With a reference report, the comparison carries
/// the average improvement over it.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, reference: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let lab = Lab::new(cfg)?;
    let arm = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let mut report = EvalReport::new(&arm, lab.evaluate(&ckpt.model)?);
    let mut rows = Vec::new();
    if let Some(path) = reference {
        let reference = read_eval_report(path)?;
        report.compare_to(&reference)?;
        let mut base = reference;
        base.compare_to(&base.clone())?;
        rows.push(base);
    }
    rows.push(report.clone());
    write_json(cfg, &out.join("eval.json"), "report", &report)?;
    write_stamped(cfg, &out.join("comparison.csv"), &EvalReport::comparison_csv(&rows))?;
    Ok(report)
}

/// One arm of the reproduce grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub duplicate_fraction: f64,
    pub forgetting_delta: f64,
    pub target_gain: f64,
    pub general_ppl_before: f64,
    pub general_ppl_after: f64,
    pub target_ppl_before: f64,
    pub target_ppl_after: f64,
    /// Accuracy gain over the base model, percentage points.
    pub avg_improvement: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceSummary {
    pub rows: Vec<SummaryRow>,
    pub checks: Vec<Check>,
}

impl ReproduceSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn row(&self, arm: &str, duplicate: f64) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.duplicate_fraction == duplicate)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "arm,duplicate_fraction,forgetting_delta,target_gain,general_ppl_before,general_ppl_after,\
             target_ppl_before,target_ppl_after,avg_improvement,trainable_params\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{}",
                r.arm,
                r.duplicate_fraction,
                r.forgetting_delta,
                r.target_gain,
                r.general_ppl_before,
                r.general_ppl_after,
                r.target_ppl_before,
                r.target_ppl_after,
                r.avg_improvement,
                r.trainable_params
            );
        }
        out
    }

    pub fn checks_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        out
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Hashes of the tensors that are frozen in `model`.
fn frozen_hashes(model: &Model) -> BTreeMap<String, String> {
    let frozen: Vec<String> = model
        .params()
        .into_iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(n, _)| n)
        .collect();
    let mut all = model.tensor_hashes();
    all.retain(|n, _| frozen.contains(n));
    all
}

fn dup_tag(d: f64) -> String {
    format!("dup{:02}", (d * 100.0).round() as u32)
}

/// Pretrains the base model, runs full CPT, LoRA and ADE at every duplicate
/// fraction, and writes per-arm curves plus `summary.csv` and
/// `acceptance.txt`. Stage failures are reported with the stage name.
pub fn cmd_reproduce(cfg: &ExperimentConfig, out: &Path) -> Result<ReproduceSummary> {
    let lab = Lab::new(cfg).map_err(|e| e.in_stage("data"))?;
    let (base, base_log) = lab.pretrain(None).map_err(|e| e.in_stage("pretrain"))?;
    let base_dir = out.join("base");
    Checkpoint::new(base.clone(), Some(cfg)).save(&base_dir.join("final.ckpt"))?;
    write_stamped(cfg, &base_dir.join("curve.csv"), &base_log.curve_csv())?;
    let base_report = EvalReport::new(
        "base",
        base_log
            .curve
            .last()
            .map(|p| p.scores.clone())
            .unwrap_or_else(|| base_log.initial.scores.clone()),
    );

    let base_curve = ForgettingCurve::from_run_log(&base_log, lab.general_name(), lab.target_name())
        .map_err(|e| e.in_stage("pretrain"))?;
    let base_point = *base_curve.points.last().unwrap_or(&base_curve.initial);

    let arms = [
        ArmConfig::FullCpt,
        ArmConfig::Lora(cfg.reproduce.lora.clone()),
        ArmConfig::Ade(cfg.reproduce.ade.clone()),
    ];
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut reports = vec![base_report.clone()];
    for &dup in &cfg.reproduce.duplicate_fractions {
        for arm in &arms {
            let stage = format!("{}/{}", arm.label(), dup_tag(dup));
            let wrap = |e: AdeError| e.in_stage(stage.clone());
            let parts: ArmOutcomeParts = lab.prepare_arm(&base, arm).map_err(wrap)?;
            let frozen_before = frozen_hashes(&parts.model);
            let trainable_params = parts.model.trainable_param_count();
            let outcome = lab.train_arm(parts, arm.label(), dup, None).map_err(wrap)?;
            let dir: PathBuf = out.join(arm.label()).join(dup_tag(dup));
            let curve =
                ForgettingCurve::from_run_log(&outcome.log, lab.general_name(), lab.target_name()).map_err(wrap)?;
            write_stamped(cfg, &dir.join("curve.csv"), &outcome.log.curve_csv())?;
            write_stamped(cfg, &dir.join("forgetting.csv"), &curve.to_csv())?;
            if let Some(plan) = &outcome.plan {
                let manifest = PlanManifest::new(plan, outcome.layout.as_ref(), base.n_blocks(), &outcome.model);
                write_json(cfg, &dir.join("plan.json"), "plan", &manifest)?;
            }

            let frozen_after = frozen_hashes(&outcome.model);
            if !frozen_before.is_empty() {
                let intact = frozen_before.iter().all(|(n, h)| frozen_after.get(n) == Some(h));
                checks.push(check(
                    &format!("{stage} frozen tensors unchanged"),
                    intact,
                    format!("{} frozen tensors", frozen_before.len()),
                ));
            }

            // Deltas are measured from the base model, so surgery that moves
            // the starting point counts against the arm.
            let last = *curve.points.last().expect("curve has a final point");
            let span = ForgettingCurve {
                initial: base_point,
                points: vec![last],
                ..curve.clone()
            };
            let mut report = EvalReport::new(
                &format!("{}_{}", arm.label(), dup_tag(dup)),
                outcome.log.curve.last().map(|p| p.scores.clone()).unwrap_or_default(),
            );
            report.compare_to(&base_report).map_err(wrap)?;
            rows.push(SummaryRow {
                arm: arm.label().to_string(),
                duplicate_fraction: dup,
                forgetting_delta: forgetting_delta(&span)?,
                target_gain: span.target_gain()?,
                general_ppl_before: base_point.general_perplexity,
                general_ppl_after: last.general_perplexity,
                target_ppl_before: base_point.target_perplexity,
                target_ppl_after: last.target_perplexity,
                avg_improvement: report.avg_improvement.unwrap_or(0.0),
                trainable_params,
            });
            reports.push(report);
        }
    }
    let mut summary = ReproduceSummary { rows, checks };
    summary.checks.extend(directional_checks(&summary, cfg));

    write_stamped(cfg, &out.join("summary.csv"), &summary.to_csv())?;
    write_stamped(cfg, &out.join("comparison.csv"), &EvalReport::comparison_csv(&reports))?;
    write_stamped(cfg, &out.join("acceptance.txt"), &summary.checks_text())?;
    Ok(summary)
}

/// The forgetting and duplication properties a reproduce run must show.
fn directional_checks(s: &ReproduceSummary, cfg: &ExperimentConfig) -> Vec<Check> {
    let mut out = Vec::new();
    let fractions = &cfg.reproduce.duplicate_fractions;
    let Some(&d0) = fractions.iter().min_by(|a, b| a.total_cmp(b)) else {
        return out;
    };
    if let (Some(full), Some(ade)) = (s.row("full_cpt", d0), s.row("ade", d0)) {
        out.push(check(
            "full CPT forgets",
            full.forgetting_delta >= 0.20,
            format!("forgetting_delta {:.4} >= 0.20", full.forgetting_delta),
        ));
        out.push(check(
            "ADE forgets less than half as much",
            ade.forgetting_delta < 0.5 * full.forgetting_delta,
            format!("{:.4} < 0.5 * {:.4}", ade.forgetting_delta, full.forgetting_delta),
        ));
        for r in [full, ade] {
            out.push(check(
                &format!("{} learns the target corpus", r.arm),
                r.target_gain >= 0.10,
                format!("target perplexity gain {:.4} >= 0.10", r.target_gain),
            ));
        }
    }
    let mut full: Vec<&SummaryRow> = s.rows.iter().filter(|r| r.arm == "full_cpt").collect();
    full.sort_by(|a, b| a.duplicate_fraction.total_cmp(&b.duplicate_fraction));
    if full.len() >= 2 {
        let gains: Vec<String> = full.iter().map(|r| format!("{:.4}", r.target_gain)).collect();
        out.push(check(
            "duplication lowers the full CPT target gain",
            full.windows(2).all(|w| w[1].target_gain <= w[0].target_gain),
            format!("gains {} at fractions {:?}", gains.join(" >= "), fractions),
        ));
    }
    out
}
