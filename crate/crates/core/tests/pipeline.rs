mod common;

use std::collections::HashMap;

use bidedpo::diffusion::Context;
use bidedpo::numerics::RngStream;
use bidedpo::pipeline::*;
use bidedpo::world::*;
use common::gens::{AlwaysFail, AlwaysPass, Counting, FlakyGenerator};

fn small_cfg(records: usize) -> PipelineConfig {
    PipelineConfig {
        records,
        wave: 16,
        ..PipelineConfig::default()
    }
}

fn render_dataset(records: usize, seed: u64) -> Dataset {
    let world = WorldConfig::default();
    let gen = RenderGenerator::new(world.clone());
    let judge = OracleJudge::new(world.clone());
    build_dataset(&gen, &judge, &world, &small_cfg(records), seed).unwrap().0
}

fn assert_record_invariants(r: &PreferenceRecord, world: &WorldConfig, judge: &dyn TextJudge) {
    assert!(r.cond_pair.preferred.bit_eq(&r.text_pair.preferred), "anchor identity");
    assert_eq!(r.s1(), &extract_condition(r.anchor(), world).unwrap());
    assert_eq!(r.text_pair.context.prompt, r.cond_pair.context.prompt);
    assert!(judge.judge(r.anchor(), r.target()).passed);
    assert!(judge.judge(&r.cond_pair.dispreferred, r.target()).passed);
    assert!(r.source.is_source() && r.target().is_target());
}

#[test]
fn always_pass_judge_fills_the_dataset() {
    let world = WorldConfig::default();
    let gen = RenderGenerator::new(world.clone());
    let (ds, stats) = build_dataset(&gen, &AlwaysPass, &world, &small_cfg(10), 3).unwrap();
    assert_eq!(ds.records.len(), 10);
    assert_eq!(ds.manifest.count, 10);
    for r in &ds.records {
        assert_eq!(r.provenance.anchor_tries, 1);
        assert_eq!(r.provenance.cond_tries, 1);
    }
    assert!(stats.records >= 10);
}

#[test]
fn always_fail_judge_exhausts_exactly_the_budget() {
    let world = WorldConfig::default();
    let gen = Counting::new(RenderGenerator::new(world.clone()));
    let cfg = PipelineConfig {
        records: 10,
        retries: 3,
        max_attempts: Some(25),
        wave: 7,
        ..PipelineConfig::default()
    };
    let err = build_dataset(&gen, &AlwaysFail, &world, &cfg, 4).unwrap_err();
    match err {
        PipelineError::BudgetExhausted {
            realized,
            target,
            attempts,
        } => {
            assert_eq!((realized, target, attempts), (0, 10, 25));
        }
        other => panic!("unexpected {other}"),
    }
    // Re-run through the record builder to read the call counts.
    let pool = generate_context_pool(&gen, &world, 25, cfg.pool_resamples, 4).unwrap();
    let before = gen.count();
    let (records, stats) = build_records(&gen, &AlwaysFail, &world, &cfg, 4, &pool).unwrap();
    assert!(records.iter().all(Option::is_none));
    assert_eq!(stats.calls.anchor, pool.len() * cfg.retries);
    assert_eq!(stats.calls.text_negative + stats.calls.cond_negative, 0);
    assert_eq!(gen.count() - before, stats.calls.total());
}

#[test]
fn build_anchor_counts_tries() {
    let world = WorldConfig::default();
    let gen = Counting::new(RenderGenerator::new(world.clone()));
    let target = PromptSpec::new(ShapeClass::Disc, Some(Intensity::Dim), None);
    let s0 = ConditionMap::new(shape_mask(ShapeClass::Disc, Placement::new(8.0, 8.0, 5.0))).unwrap();
    let (anchor, calls) = build_anchor(&gen, &AlwaysPass, &target, &s0, 8, RngStream::new(1, 1)).unwrap();
    assert_eq!((anchor.unwrap().tries, calls), (1, 1));
    let (anchor, calls) = build_anchor(&gen, &AlwaysFail, &target, &s0, 8, RngStream::new(1, 1)).unwrap();
    assert!(anchor.is_none());
    assert_eq!(calls, 8);
    assert_eq!(gen.count(), 9);
}

#[test]
fn failed_anchor_skips_the_condition_branch() {
    let world = WorldConfig::default();
    let gen = RenderGenerator::new(world.clone());
    let pool = generate_context_pool(&gen, &world, 5, 5, 9).unwrap();
    let cfg = small_cfg(1);
    let (rec, stats) = build_record(&gen, &AlwaysFail, &world, &cfg, 9, &pool[0]).unwrap();
    assert!(rec.is_none());
    assert_eq!(stats.calls.cond_negative, 0);
    assert_eq!(stats.calls.text_negative, 0);
}

#[test]
fn records_satisfy_invariants() {
    let world = WorldConfig::default();
    let judge = OracleJudge::new(world.clone());
    let ds = render_dataset(40, 11);
    for r in &ds.records {
        assert_record_invariants(r, &world, &judge);
        assert!(!r.provenance.text_negative_verified);
        assert!(r.provenance.cond_negative_mse >= 0.0);
    }
}

#[test]
fn strict_mode_verifies_text_negatives() {
    let world = WorldConfig::default();
    let gen = FlakyGenerator::new(world.clone(), 0.3);
    let judge = OracleJudge::new(world.clone());
    let cfg = PipelineConfig {
        strict_negatives: true,
        ..small_cfg(30)
    };
    let (ds, _) = build_dataset(&gen, &judge, &world, &cfg, 12).unwrap();
    for r in &ds.records {
        assert!(r.provenance.text_negative_verified);
        assert!(!judge.judge(&r.text_pair.dispreferred, r.target()).passed);
        assert_record_invariants(r, &world, &judge);
    }
}

#[test]
fn same_seed_same_manifest_hash_regardless_of_wave() {
    let world = WorldConfig::default();
    let gen = FlakyGenerator::new(world.clone(), 0.4);
    let judge = OracleJudge::new(world.clone());
    let a = build_dataset(&gen, &judge, &world, &small_cfg(20), 5).unwrap().0;
    let b = build_dataset(&gen, &judge, &world, &small_cfg(20), 5).unwrap().0;
    let c = build_dataset(
        &gen,
        &judge,
        &world,
        &PipelineConfig {
            wave: 5,
            ..small_cfg(20)
        },
        5,
    )
    .unwrap()
    .0;
    assert_eq!(a.manifest.content_hash(), b.manifest.content_hash());
    assert_eq!(a.records, c.records);
    let d = build_dataset(&gen, &judge, &world, &small_cfg(20), 6).unwrap().0;
    assert_ne!(a.manifest.content_hash(), d.manifest.content_hash());
}

#[test]
fn storage_round_trip_is_bit_exact() {
    let ds = render_dataset(12, 21);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.manifest.content_hash(), ds.manifest.content_hash());
    assert_eq!(back.records.len(), ds.records.len());
    for (x, y) in back.records.iter().zip(&ds.records) {
        assert!(x.text_pair.preferred.bit_eq(&y.text_pair.preferred));
        assert!(x.text_pair.dispreferred.bit_eq(&y.text_pair.dispreferred));
        assert!(x.cond_pair.preferred.bit_eq(&y.cond_pair.preferred));
        assert!(x.cond_pair.dispreferred.bit_eq(&y.cond_pair.dispreferred));
        assert_eq!(x, y);
    }
    assert!(dir.path().join("000003_cond_neg.f64").exists());
}

#[test]
fn corrupted_blob_is_rejected() {
    let ds = render_dataset(3, 22);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    std::fs::write(dir.path().join("000001_text_pos.f64"), [0u8; 16]).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(PipelineError::Manifest(_))));
    assert!(matches!(
        read_dataset(&dir.path().join("missing")),
        Err(PipelineError::MissingFile(_))
    ));
}

#[test]
fn views_have_the_documented_shapes() {
    let ds = render_dataset(30, 31);
    let n = ds.records.len();
    let sft = sft_view(&ds.records);
    assert_eq!(sft.len(), 2 * n);
    for (i, r) in ds.records.iter().enumerate() {
        assert!(sft[2 * i].0.bit_eq(r.anchor()));
        assert_eq!(sft[2 * i].1, r.text_pair.context);
        assert_eq!(sft[2 * i + 1].1, r.cond_pair.context);
    }
    let naive = naive_dpo_view(&ds.records);
    for (p, r) in naive.iter().zip(&ds.records) {
        assert!(p.dispreferred.bit_eq(&r.text_pair.dispreferred));
        assert!(p.preferred.bit_eq(&r.cond_pair.preferred));
        assert_eq!(p.context, r.cond_pair.context);
    }
    let bide = bidedpo_view(&ds.records);
    assert_eq!(bide.len(), n);

    let many: Vec<PreferenceRecord> = (0..100).flat_map(|_| ds.records.iter().cloned()).collect();
    assert_eq!(many.len(), 3000);
    let mut hist: HashMap<MixedNegative, usize> = HashMap::new();
    for (_, kind) in mixed_dpo_view(&many) {
        *hist.entry(kind).or_default() += 1;
    }
    assert_eq!(hist[&MixedNegative::Both], 1000);
    assert_eq!(hist[&MixedNegative::ConditionOnly], 1000);
    assert_eq!(hist[&MixedNegative::TextOnly], 1000);
}

#[test]
fn pool_targets_run_against_the_bias() {
    let mut world = WorldConfig::default();
    world.bias = BiasTable {
        p_bright: [(ShapeClass::Square, 1.0)].into_iter().collect(),
    };
    let gen = RenderGenerator::new(world.clone());
    let pool = generate_context_pool(&gen, &world, 300, 5, 2).unwrap();
    let squares: Vec<_> = pool.iter().filter(|e| e.target.shape == ShapeClass::Square).collect();
    assert!(squares.len() > 50);
    let dim = squares.iter().filter(|e| e.target.intensity == Some(Intensity::Dim)).count();
    assert!(dim as f64 >= 0.9 * squares.len() as f64);
    for e in &pool {
        assert!(!is_held_out(&e.target, mask_extent(&e.s0)));
    }
    let again = generate_context_pool(&gen, &world, 300, 5, 2).unwrap();
    assert_eq!(pool, again);
}

struct Blank;

impl Generator for Blank {
    fn generate(&self, requests: &[(&Context, RngStream)]) -> Result<Vec<Canvas>, PipelineError> {
        Ok(requests.iter().map(|_| Canvas::zeros()).collect())
    }

    fn fingerprint(&self) -> String {
        "blank".into()
    }
}

#[test]
fn degenerate_pool_is_a_configuration_error() {
    let world = WorldConfig::default();
    assert!(matches!(
        generate_context_pool(&Blank, &world, 10, 5, 0),
        Err(PipelineError::DegeneratePool { dropped: 10, total: 10 })
    ));
    assert!(matches!(
        generate_context_pool(&Blank, &world, 0, 5, 0),
        Err(PipelineError::InvalidConfig(_))
    ));
    assert!(matches!(
        build_dataset(&Blank, &AlwaysPass, &world, &small_cfg(5), 0),
        Err(PipelineError::DegeneratePool { .. })
    ));
}

/// Each draw of the flaky renderer passes independently with probability
/// `q = 1 − p_wrong`, so one retry loop of `K` draws succeeds with
/// `1 − (1 − q)^K` and a record needs both loops.
#[test]
fn yield_matches_the_binomial_estimate() {
    let world = WorldConfig::default();
    let p_wrong = 0.5;
    let k = 2;
    let gen = Counting::new(FlakyGenerator::new(world.clone(), p_wrong));
    let judge = OracleJudge::new(world.clone());
    let attempts = 5000;
    let cfg = PipelineConfig {
        records: attempts,
        retries: k,
        max_attempts: Some(attempts),
        wave: 500,
        ..PipelineConfig::default()
    };
    let pool = generate_context_pool(&gen, &world, attempts, cfg.pool_resamples, 77).unwrap();
    let (records, stats) = build_records(&gen, &judge, &world, &cfg, 77, &pool).unwrap();
    let realized = records.iter().flatten().count();
    let loop_p = 1.0 - p_wrong.powi(k as i32);
    let p = loop_p * loop_p;
    let n = pool.len() as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!(
        (realized as f64 - n * p).abs() <= 3.0 * sigma,
        "realized {realized}, expected {:.1} ± {:.1}",
        n * p,
        3.0 * sigma
    );
    let q_anchor = stats.anchors as f64 / n;
    let q_cond = realized as f64 / stats.anchors as f64;
    assert!((q_anchor - loop_p).abs() < 0.03 && (q_cond - loop_p).abs() < 0.03);
    // Per-attempt budget: K anchor draws, one text negative, K condition draws.
    assert!(stats.calls.anchor + stats.calls.text_negative + stats.calls.cond_negative <= pool.len() * (2 * k + 1));
}

#[test]
fn budget_is_monotone_in_the_attempt_count() {
    let world = WorldConfig::default();
    let gen = FlakyGenerator::new(world.clone(), 0.6);
    let judge = OracleJudge::new(world.clone());
    let mut last = 0;
    for budget in [10, 20, 40] {
        let cfg = PipelineConfig {
            records: 1000,
            retries: 3,
            max_attempts: Some(budget),
            wave: 10,
            ..PipelineConfig::default()
        };
        let counted = Counting::new(FlakyGenerator::new(world.clone(), 0.6));
        let _ = build_dataset(&counted, &judge, &world, &cfg, 8);
        let calls = counted.count();
        assert!(calls >= last);
        last = calls;
        let pool = generate_context_pool(&gen, &world, budget, cfg.pool_resamples, 8).unwrap();
        let (_, stats) = build_records(&gen, &judge, &world, &cfg, 8, &pool).unwrap();
        assert!(stats.calls.total() <= budget * (2 * cfg.retries + 1));
    }
}
