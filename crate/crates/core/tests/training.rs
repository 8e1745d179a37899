mod common;

use std::collections::BTreeSet;

use ade_core::data::{batches, mix, Corpus, Generator, MixSpec, Tokenizer};
use ade_core::eval::CorpusScore;
use ade_core::model::Model;
use ade_core::training::{
    lr_at, run, run_simple, train_step, IntervalState, OptimizerState, RunHooks, RunLog, ScheduleConfig, TrainConfig,
    DEFAULT_LR_MAX, DEFAULT_LR_MIN,
};
use ade_core::Result;
use common::fixtures::model;
use proptest::prelude::*;

fn stream(tokens: usize) -> Vec<u32> {
    let t = Tokenizer::from_alphabet(Generator::Arithmetic.alphabet());
    let texts = Generator::Arithmetic.generate(60, 40, 5);
    let c = Corpus::from_texts("a", &texts, &t, "");
    mix(&MixSpec::single("a", 0), &[&c], tokens).unwrap().tokens()
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        tokens_per_batch: 13 * 4,
        seq_len: 13,
        total_tokens: 13 * 4 * steps,
        lr_max: 3e-3,
        lr_min: 3e-4,
        ..TrainConfig::new(0)
    }
}

fn no_eval(_: &Model) -> Result<Vec<CorpusScore>> {
    Ok(Vec::new())
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let mut s = ScheduleConfig::new(1000);
    s.warmup_steps = 100;
    assert_eq!(lr_at(100, &s).unwrap(), DEFAULT_LR_MAX);
    assert_eq!(lr_at(1000, &s).unwrap(), DEFAULT_LR_MIN);
    assert_eq!(DEFAULT_LR_MAX, 4.0e-5);
    assert_eq!(DEFAULT_LR_MIN, 4.0e-6);
    s.warmup_steps = 0;
    assert!((lr_at(500, &s).unwrap() - 2.2e-5).abs() < 1e-12);
}

#[test]
fn curve_has_twenty_points_at_even_boundaries() {
    let cfg = config(40);
    let mut m = model(2, 1);
    let mut eval = |_: &Model| {
        Ok(vec![CorpusScore {
            corpus: "a".into(),
            perplexity: 1.0,
            accuracy: None,
        }])
    };
    let log = run_simple(&mut m, &cfg, &stream(cfg.total_tokens), &mut eval).unwrap();
    assert_eq!(log.curve.len(), 20);
    assert_eq!(log.initial.interval, 0);
    let steps: Vec<u64> = log.curve.iter().map(|p| p.step).collect();
    assert_eq!(steps, (1..=20).map(|j| 2 * j).collect::<Vec<u64>>());
    assert_eq!(log.steps.len(), 40);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = config(20);
    let s = stream(cfg.total_tokens);
    let go = || {
        let mut m = model(2, 3);
        let log = run_simple(&mut m, &cfg, &s, &mut no_eval).unwrap();
        (m, log)
    };
    let (m1, l1) = go();
    let (m2, l2) = go();
    assert_eq!(l1, l2);
    assert_eq!(m1.tensor_hashes(), m2.tensor_hashes());
}

#[test]
fn resume_reproduces_the_remaining_run_bit_exactly() {
    let cfg = config(40);
    let s = stream(cfg.total_tokens);
    let mut saved: Option<(Model, OptimizerState, RunLog)> = None;
    let mut m = model(2, 4);
    let mut opt = OptimizerState::new(cfg.optimizer.clone());
    let mut hook = |st: &IntervalState<'_>| -> Result<()> {
        if st.interval == 7 {
            saved = Some((st.model.clone(), st.optimizer.clone(), st.log.clone()));
        }
        Ok(())
    };
    let mut eval = no_eval;
    let mut hooks = RunHooks {
        evaluate: &mut eval,
        on_interval: Some(&mut hook),
    };
    let full = run(&mut m, &mut opt, &cfg, &s, &mut hooks, None).unwrap();

    let (mut m2, mut opt2, log) = saved.unwrap();
    assert_eq!(log.steps.len(), 14);
    let mut eval = no_eval;
    let mut hooks = RunHooks {
        evaluate: &mut eval,
        on_interval: None,
    };
    let resumed = run(&mut m2, &mut opt2, &cfg, &s, &mut hooks, Some(log)).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(m2.tensor_hashes(), m.tensor_hashes());
}

#[test]
fn frozen_tensors_keep_their_bytes() {
    let cfg = config(30);
    let mut m = model(3, 5);
    m.set_freeze_mask(&BTreeSet::from([1]), false, false).unwrap();
    let before = m.tensor_hashes();
    let trainable = m.trainable_names();
    run_simple(&mut m, &cfg, &stream(cfg.total_tokens), &mut no_eval).unwrap();
    let after = m.tensor_hashes();
    for (name, h) in &before {
        if trainable.contains(name) {
            assert_ne!(&after[name], h, "{name} did not train");
        } else {
            assert_eq!(&after[name], h, "{name} moved while frozen");
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = config(4);
    let mut m = model(2, 6);
    let before = m.clone();
    let mut opt = OptimizerState::new(cfg.optimizer.clone());
    for (i, b) in batches(&stream(cfg.total_tokens), cfg.tokens_per_batch, cfg.seq_len)
        .unwrap()
        .iter()
        .enumerate()
    {
        train_step(&mut m, b, &mut opt, 0.0, i as u64).unwrap();
    }
    assert_eq!(m, before);
    assert_eq!(opt.step, 4);
}

#[test]
fn loss_falls_on_a_learnable_stream() {
    let cfg = config(60);
    let mut m = model(2, 7);
    let log = run_simple(&mut m, &cfg, &stream(cfg.total_tokens), &mut no_eval).unwrap();
    let l = log.losses();
    let tail = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
    // Operands are uniform digits, so the floor is far above zero; a clear
    // drop is all this asks for.
    assert!(tail < 0.85 * l[0], "first {} last-5 mean {tail}", l[0]);
}

#[test]
fn stream_too_short_is_a_usage_error() {
    let cfg = config(20);
    let mut m = model(2, 1);
    let err = run_simple(&mut m, &cfg, &stream(cfg.total_tokens - 1), &mut no_eval).unwrap_err();
    assert!(matches!(err, ade_core::AdeError::Usage(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_stays_within_bounds_and_never_rises_after_warmup(total in 2u64..5_000, w in 0u64..100, step in 0u64..5_000) {
        let warmup = w.min(total - 1);
        let s = ScheduleConfig { lr_max: 1e-3, lr_min: 1e-5, total_steps: total, warmup_steps: warmup };
        let step = step.min(total);
        let lr = lr_at(step, &s).unwrap();
        prop_assert!(lr >= 0.0 && lr <= s.lr_max);
        if step >= warmup {
            prop_assert!(lr >= s.lr_min);
            if step < total {
                prop_assert!(lr_at(step + 1, &s).unwrap() <= lr);
            }
        }
    }
}
