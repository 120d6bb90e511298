mod common;

use bidedpo::diffusion::{DenoiserModel, NoiseSchedule};
use bidedpo::numerics::{RngStream, Tensor};
use bidedpo::pipeline::{build_dataset, PipelineConfig, PreferenceRecord};
use bidedpo::preference::AlbMode;
use bidedpo::trainer::*;
use bidedpo::world::{OracleJudge, WorldConfig};
use common::gens::FlakyGenerator;
use common::{schedule, tiny_model};

const LN2: f64 = std::f64::consts::LN_2;

fn records(n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let world = WorldConfig::default();
    let gen = FlakyGenerator::new(world.clone(), 0.5);
    let judge = OracleJudge::new(world.clone());
    let cfg = PipelineConfig {
        records: n,
        wave: 16,
        ..PipelineConfig::default()
    };
    build_dataset(&gen, &judge, &world, &cfg, seed).unwrap().0.records
}

fn cfg(method: Method, steps: usize) -> TrainConfig {
    TrainConfig {
        method,
        steps,
        batch_size: 4,
        lr: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn run(c: &TrainConfig, start: &DenoiserModel, recs: &[PreferenceRecord], s: &NoiseSchedule) -> (DenoiserModel, TrainLog) {
    finetune(c, start, recs, s).unwrap()
}

#[test]
fn zero_steps_returns_the_start_model() {
    let s = schedule();
    let start = tiny_model(16, 1);
    let recs = records(4, 1);
    for m in [Method::Sft, Method::DpoNaive, Method::Bidedpo] {
        let (out, log) = run(&cfg(m, 0), &start, &recs, &s);
        assert_eq!(out.content_hash(), start.content_hash());
        assert!(log.steps.is_empty());
        assert_eq!(log.final_checkpoint_hash, start.content_hash());
    }
}

#[test]
fn first_preference_loss_is_ln2() {
    let s = schedule();
    let start = tiny_model(16, 2);
    let recs = records(6, 2);
    for m in [
        Method::DpoNaive,
        Method::DpoMixed,
        Method::DpoText,
        Method::DpoCondition,
        Method::Bidedpo,
    ] {
        let (_, log) = run(&cfg(m, 1), &start, &recs, &s);
        let l = log.steps[0].loss;
        assert!((l - LN2).abs() <= 1e-6, "{m:?}: {l}");
    }
}

#[test]
fn zero_learning_rate_keeps_policy_at_reference() {
    let s = schedule();
    let start = tiny_model(16, 3);
    let recs = records(6, 3);
    let c = TrainConfig {
        lr: 0.0,
        ..cfg(Method::Bidedpo, 4)
    };
    let (out, log) = run(&c, &start, &recs, &s);
    assert_eq!(out.content_hash(), start.content_hash());
    for step in &log.steps {
        assert!((step.loss - LN2).abs() <= 1e-12, "{step:?}");
    }
}

#[test]
fn fixed_weights_reduce_to_single_direction_training() {
    let s = schedule();
    let start = tiny_model(16, 4);
    let recs = records(8, 4);
    for (w_text, single) in [(1.0, Method::DpoText), (0.0, Method::DpoCondition)] {
        let bide = TrainConfig {
            alb: AlbMode::Fixed { w_text },
            ..cfg(Method::Bidedpo, 6)
        };
        let (mb, lb) = run(&bide, &start, &recs, &s);
        let (ms, ls) = run(&cfg(single, 6), &start, &recs, &s);
        for (a, b) in lb.steps.iter().zip(&ls.steps) {
            assert!((a.loss - b.loss).abs() <= 1e-10, "{w_text}: {} vs {}", a.loss, b.loss);
        }
        let diff = mb
            .params()
            .iter()
            .zip(ms.params())
            .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "{w_text}: weights differ by {diff}");
    }
}

#[test]
fn bidedpo_log_total_is_the_weighted_sum() {
    let s = schedule();
    let start = tiny_model(16, 5);
    let recs = records(8, 5);
    let (_, log) = run(&cfg(Method::Bidedpo, 5), &start, &recs, &s);
    for step in &log.steps {
        let b = step.breakdown.as_ref().unwrap();
        assert!((b.w_text + b.w_cond - 1.0).abs() <= 1e-12);
        assert!((b.total - (b.w_text * b.l_text + b.w_cond * b.l_cond)).abs() <= 1e-12);
        assert!((step.loss - b.total).abs() <= 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_moves_the_model() {
    let s = schedule();
    let start = tiny_model(16, 6);
    let recs = records(6, 6);
    for m in [Method::Sft, Method::DpoNaive, Method::Bidedpo] {
        let (a, la) = run(&cfg(m, 3), &start, &recs, &s);
        let (b, lb) = run(&cfg(m, 3), &start, &recs, &s);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), start.content_hash());
        let losses = |l: &TrainLog| l.steps.iter().map(|s| s.loss).collect::<Vec<_>>();
        assert_eq!(losses(&la), losses(&lb));
        let mut other = cfg(m, 3);
        other.seed += 1;
        assert_ne!(run(&other, &start, &recs, &s).0.content_hash(), a.content_hash());
    }
}

#[test]
fn lowrank_adapter_starts_at_identity_and_merges_exactly() {
    let s = schedule();
    let start = tiny_model(24, 7);
    let mut rng = RngStream::new(7, 0).rng();
    let adapted = start.apply_lowrank_adapter(4, 8.0, &mut rng).unwrap();
    let world = WorldConfig::default();
    let mut probe = RngStream::new(7, 1).rng();
    let (_, ctx) = common::scene_context(&mut probe, &world);
    let x: Vec<f64> = probe.normals(bidedpo::world::CELLS);
    let input = start.build_input(&[&x], &[&ctx], &[60], &s).unwrap();
    let max_diff = |a: &Tensor, b: &Tensor| common::max_abs_diff(a.data(), b.data());
    assert!(max_diff(&start.predict(&input), &adapted.predict(&input)) <= 1e-12);

    // Train the adapters only, then fold them into the base weights.
    let recs = records(6, 7);
    let c = TrainConfig {
        lora: Some(LoraConfig { rank: 4, alpha: 8.0 }),
        ..cfg(Method::DpoNaive, 3)
    };
    let (merged, _) = run(&c, &start, &recs, &s);
    assert!(!merged.has_adapters());
    assert_ne!(merged.content_hash(), start.content_hash());

    let mut trained = adapted.clone();
    for p in trained.trainable_params_mut() {
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v += 1e-2 * ((i % 7) as f64 - 3.0);
        }
    }
    let folded = trained.merge_adapters();
    assert!(max_diff(&trained.predict(&input), &folded.predict(&input)) <= 1e-10);
}

#[test]
fn log_round_trips_through_jsonl() {
    let s = schedule();
    let start = tiny_model(16, 8);
    let recs = records(4, 8);
    let (_, mut log) = run(&cfg(Method::Bidedpo, 3), &start, &recs, &s);
    log.stamp = Some(bidedpo::diffusion::ArtifactStamp::new("h", 8));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    log.write_jsonl(&path).unwrap();
    assert_eq!(TrainLog::read_jsonl(&path).unwrap(), log);
}

#[test]
fn non_finite_weights_abort_with_the_partial_log() {
    let s = schedule();
    let mut start = tiny_model(16, 9);
    start.trainable_params_mut()[0].data_mut()[0] = f64::NAN;
    let recs = records(4, 9);
    match finetune(&cfg(Method::Bidedpo, 3), &start, &recs, &s) {
        Err(TrainError::Aborted { step, log, .. }) => {
            assert_eq!(step, 0);
            assert!(log.steps.is_empty());
        }
        other => panic!("expected abort, got {:?}", other.map(|(_, l)| l.steps.len())),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let s = schedule();
    let start = tiny_model(16, 10);
    let recs = records(2, 10);
    let bad = [
        TrainConfig {
            batch_size: 0,
            ..cfg(Method::Sft, 1)
        },
        TrainConfig {
            beta_t: 0.0,
            ..cfg(Method::Bidedpo, 1)
        },
        TrainConfig {
            p_drop_condition: 1.5,
            ..cfg(Method::Sft, 1)
        },
        cfg(Method::Pretrain, 1),
    ];
    for c in bad {
        assert!(matches!(finetune(&c, &start, &recs, &s), Err(TrainError::InvalidConfig(_))), "{c:?}");
    }
    assert!(matches!(
        finetune(&cfg(Method::Sft, 1), &start, &[], &s),
        Err(TrainError::EmptyDataset)
    ));
}
