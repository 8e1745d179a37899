//! Corpus preparation and the training arms, shared by the commands.

use crate::baselines::{attach_lora, LoraConfig};
use crate::data::{choice_tasks, mix, Corpus, MixComponent, MixSpec, Scheme, Split, Tokenizer};
use crate::error::{AdeError, Result};
use crate::eval::{CorpusScore, EvalSuite, SuiteEntry};
use crate::model::Model;
use crate::numerics::SeedStream;
use crate::surgery::{block_importance, prepare_ade_model, AdePlan, ExpansionLayout, ImportanceReport};
use crate::training::{run, IntervalHook, OptimizerState, RunHooks, RunLog, TrainConfig};

use super::{AdeTemplate, ArmConfig, CorpusSource, ExperimentConfig};

/// Split corpora, tokenizer and evaluation suite for one config.
pub struct Lab {
    pub config: ExperimentConfig,
    pub tokenizer: Tokenizer,
    pub general: Split,
    pub target: Split,
    pub suite: EvalSuite,
}

/// Result of one training arm.
pub struct ArmOutcome {
    pub label: String,
    pub model: Model,
    pub log: RunLog,
    pub plan: Option<AdePlan>,
    pub layout: Option<ExpansionLayout>,
    pub importance: Option<ImportanceReport>,
}

fn source_texts(src: &CorpusSource, seed: u64) -> Result<Vec<String>> {
    match (&src.generator, &src.path) {
        (Some(g), _) => Ok(g.generate(src.n_docs, src.doc_chars, SeedStream::new(seed).derive(&src.name))),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| AdeError::io(p, e))?;
            Ok(text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect())
        }
        (None, None) => Err(AdeError::config("data", format!("corpus {} has no source", src.name))),
    }
}

fn alphabet_of(src: &CorpusSource, texts: &[String]) -> Vec<char> {
    match src.generator {
        Some(g) => g.alphabet(),
        None => texts.iter().flat_map(|t| t.chars()).collect(),
    }
}

impl Lab {
    pub fn new(config: &ExperimentConfig) -> Result<Lab> {
        config.validate()?;
        let d = &config.data;
        let seed = config.seed;
        let general_texts = source_texts(&d.general, seed)?;
        let target_texts = source_texts(&d.target, seed)?;
        let tokenizer = match d.scheme {
            Scheme::Byte => Tokenizer::byte(),
            Scheme::Char => Tokenizer::from_alphabet(
                alphabet_of(&d.general, &general_texts)
                    .into_iter()
                    .chain(alphabet_of(&d.target, &target_texts)),
            ),
        };
        if tokenizer.vocab_size() > config.model.vocab_size {
            return Err(AdeError::config(
                "model.vocab_size",
                format!(
                    "tokenizer needs {} ids, model has {}",
                    tokenizer.vocab_size(),
                    config.model.vocab_size
                ),
            ));
        }
        let general = Corpus::from_texts(&d.general.name, &general_texts, &tokenizer, Self::describe(&d.general));
        let target = Corpus::from_texts(&d.target.name, &target_texts, &tokenizer, Self::describe(&d.target));
        let spec = crate::data::SplitSpec {
            seed: SeedStream::new(seed).derive("split") ^ d.split.seed,
            ..d.split.clone()
        };
        let general = crate::data::split(&general, &spec)?;
        let target = crate::data::split(&target, &spec)?;
        let t = &d.tasks;
        let task_seed = SeedStream::new(seed).derive("tasks");
        let entry = |own: &Split, other: &Split| -> Result<SuiteEntry> {
            let name = own.eval.name.trim_end_matches("/eval").to_string();
            let tasks = if t.per_corpus == 0 {
                Vec::new()
            } else {
                choice_tasks(
                    &own.eval,
                    &other.eval,
                    t.per_corpus,
                    t.context_len,
                    t.option_len,
                    task_seed,
                )?
            };
            Ok(SuiteEntry {
                name,
                corpus: own.eval.clone(),
                tasks,
            })
        };
        let suite = EvalSuite {
            entries: vec![entry(&general, &target)?, entry(&target, &general)?],
        };
        Ok(Lab {
            config: config.clone(),
            tokenizer,
            general,
            target,
            suite,
        })
    }

    fn describe(src: &CorpusSource) -> &str {
        match (&src.generator, &src.path) {
            (Some(g), _) => g.label(),
            (None, Some(p)) => p.to_str().unwrap_or("file"),
            _ => "unknown",
        }
    }

    pub fn general_name(&self) -> &str {
        &self.config.data.general.name
    }

    pub fn target_name(&self) -> &str {
        &self.config.data.target.name
    }

    pub fn evaluate(&self, model: &Model) -> Result<Vec<CorpusScore>> {
        self.suite.evaluate(model)
    }

    /// Training stream for the base model: the general training split.
    pub fn pretrain_stream(&self) -> Result<Vec<u32>> {
        let spec = MixSpec::single(
            &self.general.train.name,
            SeedStream::new(self.config.seed).derive("pretrain"),
        );
        Ok(mix(&spec, &[&self.general.train], self.config.pretrain.total_tokens)?.tokens())
    }

    /// CPT stream: target training split with `duplicate` of the tokens
    /// drawn from the general training split. Every arm given the same
    /// fraction receives the same stream.
    pub fn cpt_stream(&self, duplicate: f64) -> Result<Vec<u32>> {
        let mut components = vec![MixComponent {
            corpus: self.target.train.name.clone(),
            weight: 1.0 - duplicate,
        }];
        if duplicate > 0.0 {
            components.push(MixComponent {
                corpus: self.general.train.name.clone(),
                weight: duplicate,
            });
        }
        let spec = MixSpec {
            components,
            seed: SeedStream::new(self.config.seed).derive("cpt"),
        };
        Ok(mix(
            &spec,
            &[&self.target.train, &self.general.train],
            self.config.train.total_tokens,
        )?
        .tokens())
    }

    fn train(
        &self,
        model: &mut Model,
        cfg: &TrainConfig,
        stream: &[u32],
        on_interval: Option<&mut IntervalHook<'_>>,
    ) -> Result<RunLog> {
        let mut opt = OptimizerState::new(cfg.optimizer.clone());
        let mut evaluate = |m: &Model| self.evaluate(m);
        let mut hooks = RunHooks {
            evaluate: &mut evaluate,
            on_interval,
        };
        run(model, &mut opt, cfg, stream, &mut hooks, None)
    }

    pub fn init_model(&self) -> Result<Model> {
        Model::init(
            self.config.model.clone(),
            SeedStream::new(self.config.seed).derive("model"),
        )
    }

    /// Trains a fresh model on the general corpus.
    pub fn pretrain(&self, on_interval: Option<&mut IntervalHook<'_>>) -> Result<(Model, RunLog)> {
        let mut model = self.init_model()?;
        let stream = self.pretrain_stream()?;
        let log = self.train(&mut model, &self.pretrain_config(), &stream, on_interval)?;
        Ok((model, log))
    }

    pub fn importance(&self, model: &Model, fraction: f64) -> Result<ImportanceReport> {
        block_importance(
            model,
            &self.target.importance.sequences,
            fraction,
            SeedStream::new(self.config.seed).derive("importance"),
        )
    }

    /// Applies importance, selection, expansion and the freeze mask.
    pub fn prepare_ade(
        &self,
        base: &Model,
        t: &AdeTemplate,
    ) -> Result<(Model, AdePlan, Option<ExpansionLayout>, ImportanceReport)> {
        let report = self.importance(base, t.importance_fraction)?;
        let (model, plan, layout) = self.apply_ade(base, &report, t)?;
        Ok((model, plan, layout, report))
    }

    /// Selection, expansion and the freeze mask from a given report.
    pub fn apply_ade(
        &self,
        base: &Model,
        report: &ImportanceReport,
        t: &AdeTemplate,
    ) -> Result<(Model, AdePlan, Option<ExpansionLayout>)> {
        if report.entries.len() + 1 != base.n_blocks() {
            return Err(AdeError::usage(format!(
                "importance report has {} rows, a {}-block model needs {}",
                report.entries.len(),
                base.n_blocks(),
                base.n_blocks() - 1
            )));
        }
        let (mut model, mut plan, layout) = prepare_ade_model(
            base,
            report,
            t.k,
            t.ranking,
            t.mode,
            t.init,
            SeedStream::new(self.config.seed).derive("expand"),
        )?;
        plan.include_embeddings = t.include_embeddings;
        plan.include_head = t.include_head;
        crate::surgery::apply_plan_freeze(&mut model, &plan, layout.as_ref())?;
        Ok((model, plan, layout))
    }

    /// Prepares the arm's model from `base` without training it.
    pub fn prepare_arm(&self, base: &Model, arm: &ArmConfig) -> Result<ArmOutcomeParts> {
        let mut parts = ArmOutcomeParts {
            model: base.clone(),
            plan: None,
            layout: None,
            importance: None,
        };
        match arm {
            ArmConfig::Pretrain => return Err(AdeError::usage("pretrain is not a continued-pretraining arm")),
            ArmConfig::FullCpt => parts.model.set_all_trainable(true),
            ArmConfig::Lora(cfg) => parts.model = attach_lora(base, &self.seeded_lora(cfg))?,
            ArmConfig::Ade(t) => {
                let (m, plan, layout, report) = self.prepare_ade(base, t)?;
                parts = ArmOutcomeParts {
                    model: m,
                    plan: Some(plan),
                    layout,
                    importance: Some(report),
                };
            }
        }
        Ok(parts)
    }

    fn seeded_lora(&self, cfg: &LoraConfig) -> LoraConfig {
        LoraConfig {
            seed: SeedStream::new(self.config.seed).derive("lora") ^ cfg.seed,
            ..cfg.clone()
        }
    }

    /// Continued pretraining of `base` under `arm` on the stream with the
    /// given duplicate fraction.
    pub fn run_arm(
        &self,
        base: &Model,
        arm: &ArmConfig,
        duplicate: f64,
        on_interval: Option<&mut IntervalHook<'_>>,
    ) -> Result<ArmOutcome> {
        let parts = self.prepare_arm(base, arm)?;
        self.train_arm(parts, arm.label(), duplicate, on_interval)
    }

    /// Trains an already prepared arm.
    pub fn train_arm(
        &self,
        parts: ArmOutcomeParts,
        label: &str,
        duplicate: f64,
        on_interval: Option<&mut IntervalHook<'_>>,
    ) -> Result<ArmOutcome> {
        let mut model = parts.model;
        let stream = self.cpt_stream(duplicate)?;
        let log = self.train(&mut model, &self.cpt_config(), &stream, on_interval)?;
        Ok(ArmOutcome {
            label: label.to_string(),
            model,
            log,
            plan: parts.plan,
            layout: parts.layout,
            importance: parts.importance,
        })
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.config.seed,
            ..self.config.pretrain.clone()
        }
    }

    pub fn cpt_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.config.seed,
            ..self.config.train.clone()
        }
    }
}

pub struct ArmOutcomeParts {
    pub model: Model,
    pub plan: Option<AdePlan>,
    pub layout: Option<ExpansionLayout>,
    pub importance: Option<ImportanceReport>,
}
