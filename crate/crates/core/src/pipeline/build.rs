use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::storage::DatasetManifest;
use super::{Generator, PipelineConfig, PipelineError};
use crate::diffusion::Context;
use crate::evaluation::cond_fidelity;
use crate::numerics::RngStream;
use crate::preference::{PairKind, PreferencePair};
use crate::world::{
    classify_conflict, extract_condition, is_held_out, mask_extent, make_conflict_case, shape_scores, Canvas, ConditionMap, ConflictKind,
    JudgeVerdict, PromptSpec, TextJudge, WorldConfig,
};

/// One pool entry: the prompts of a conflict case and the initial condition
/// extracted from a source sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub attempt: usize,
    pub source: PromptSpec,
    pub target: PromptSpec,
    pub s0: ConditionMap,
    pub conflict: ConflictKind,
    pub source_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub canvas: Canvas,
    pub tries: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub attempt: usize,
    pub source_draws: usize,
    pub anchor_tries: usize,
    pub negative_draws: usize,
    pub cond_tries: usize,
    pub anchor_margin: f64,
    pub text_negative_margin: f64,
    /// The judge was asked to reject the text negative (strict mode).
    pub text_negative_verified: bool,
    pub cond_negative_margin: f64,
    /// Condition MSE of the condition negative against `s₁`; logged, never
    /// filtered on.
    pub cond_negative_mse: f64,
    pub conflict: ConflictKind,
}

/// A text pair under `(target, s₀)` and a condition pair under
/// `(target, s₁)` sharing one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub source: PromptSpec,
    pub text_pair: PreferencePair,
    pub cond_pair: PreferencePair,
    pub provenance: Provenance,
}

impl PreferenceRecord {
    pub fn target(&self) -> &PromptSpec {
        &self.text_pair.context.prompt
    }

    pub fn s0(&self) -> &ConditionMap {
        self.text_pair.context.condition.as_ref().expect("text pairs are conditioned")
    }

    pub fn s1(&self) -> &ConditionMap {
        self.cond_pair.context.condition.as_ref().expect("condition pairs are conditioned")
    }

    pub fn anchor(&self) -> &Canvas {
        &self.text_pair.preferred
    }
}

/// Generator calls by stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub pool: usize,
    pub anchor: usize,
    pub text_negative: usize,
    pub cond_negative: usize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.pool + self.anchor + self.text_negative + self.cond_negative
    }

    fn add(&mut self, other: &CallCounts) {
        self.pool += other.pool;
        self.anchor += other.anchor;
        self.text_negative += other.text_negative;
        self.cond_negative += other.cond_negative;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub attempts: usize,
    pub pool_dropped: usize,
    pub anchors: usize,
    pub negative_failures: usize,
    pub degenerate_s1: usize,
    pub cond_failures: usize,
    pub records: usize,
    pub calls: CallCounts,
}

impl BuildStats {
    /// Fraction of pool entries that found an anchor.
    pub fn anchor_rate(&self) -> f64 {
        let entries = self.attempts - self.pool_dropped;
        if entries == 0 {
            0.0
        } else {
            self.anchors as f64 / entries as f64
        }
    }

    fn add(&mut self, other: &BuildStats) {
        self.attempts += other.attempts;
        self.pool_dropped += other.pool_dropped;
        self.anchors += other.anchors;
        self.negative_failures += other.negative_failures;
        self.degenerate_s1 += other.degenerate_s1;
        self.cond_failures += other.cond_failures;
        self.records += other.records;
        self.calls.add(&other.calls);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<PreferenceRecord>,
    pub manifest: DatasetManifest,
}

fn entry_stream(seed: u64, attempt: usize) -> RngStream {
    RngStream::named(seed, "pipeline-entry", &[attempt as u64])
}

/// An initial condition is usable when it can be extracted, its geometry
/// reads as the source prompt's shape, and its combination with the target
/// prompt is not reserved for testing.
fn usable_condition(
    canvas: &Canvas,
    source: &PromptSpec,
    target: &PromptSpec,
    world: &WorldConfig,
) -> Option<ConditionMap> {
    let mask = extract_condition(canvas, world).ok()?;
    if is_held_out(target, mask_extent(&mask)) {
        return None;
    }
    let scores = shape_scores(&mask);
    let best = (0..scores.len())
        .max_by(|a, b| scores[*a].total_cmp(&scores[*b]))
        .expect("three shape classes");
    (best == source.shape.index()).then_some(mask)
}

pub(super) fn check_pool(dropped: usize, total: usize) -> Result<(), PipelineError> {
    if 2 * dropped > total {
        return Err(PipelineError::DegeneratePool { dropped, total });
    }
    Ok(())
}

struct Pool {
    entries: Vec<ContextEntry>,
    dropped: usize,
    calls: usize,
}

fn pool_wave(
    generator: &dyn Generator,
    world: &WorldConfig,
    resamples: usize,
    seed: u64,
    attempts: Range<usize>,
) -> Result<Pool, PipelineError> {
    let mut slots: Vec<(usize, PromptSpec, PromptSpec, Option<(ConditionMap, usize)>)> = attempts
        .map(|a| {
            let mut rng = entry_stream(seed, a).child("prompts", &[]).rng();
            let (source, target) = make_conflict_case(&mut rng, world);
            (a, source, target, None)
        })
        .collect();
    let mut calls = 0;
    for draw in 0..=resamples {
        let pending: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].3.is_none()).collect();
        if pending.is_empty() {
            break;
        }
        let contexts: Vec<Context> = pending
            .iter()
            .map(|&i| Context::unconditioned(slots[i].1.clone()))
            .collect();
        let requests: Vec<(&Context, RngStream)> = pending
            .iter()
            .zip(&contexts)
            .map(|(&i, c)| (c, entry_stream(seed, slots[i].0).child("source", &[draw as u64])))
            .collect();
        let canvases = generator.generate(&requests)?;
        calls += requests.len();
        for (&i, canvas) in pending.iter().zip(&canvases) {
            if let Some(mask) = usable_condition(canvas, &slots[i].1, &slots[i].2, world) {
                slots[i].3 = Some((mask, draw + 1));
            }
        }
    }
    let total = slots.len();
    let entries: Vec<ContextEntry> = slots
        .into_iter()
        .filter_map(|(attempt, source, target, found)| {
            found.map(|(s0, draws)| ContextEntry {
                attempt,
                conflict: classify_conflict(&target, &s0, world),
                source,
                target,
                s0,
                source_draws: draws,
            })
        })
        .collect();
    Ok(Pool {
        dropped: total - entries.len(),
        entries,
        calls,
    })
}

/// Builds pool entries for attempt indices `0..n`. Entries whose initial
/// condition stays unusable after `1 + resamples` source draws are dropped.
pub fn generate_context_pool(
    generator: &dyn Generator,
    world: &WorldConfig,
    n: usize,
    resamples: usize,
    seed: u64,
) -> Result<Vec<ContextEntry>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::InvalidConfig("pool size must be at least 1".into()));
    }
    let pool = pool_wave(generator, world, resamples, seed, 0..n)?;
    check_pool(pool.dropped, n)?;
    Ok(pool.entries)
}

struct Job {
    context: Context,
    judged: PromptSpec,
    stream: RngStream,
}

struct Draw {
    canvas: Canvas,
    tries: usize,
    verdict: JudgeVerdict,
}

/// For every job, the first of up to `k` draws whose verdict satisfies
/// `accept`. Draw `r` of a job uses `stream.child("draw", [r])`.
fn first_accepted(
    generator: &dyn Generator,
    judge: &dyn TextJudge,
    jobs: &[Job],
    k: usize,
    accept: impl Fn(&JudgeVerdict) -> bool,
) -> Result<(Vec<Option<Draw>>, usize), PipelineError> {
    let mut out: Vec<Option<Draw>> = jobs.iter().map(|_| None).collect();
    let mut calls = 0;
    for r in 0..k {
        let pending: Vec<usize> = (0..jobs.len()).filter(|&i| out[i].is_none()).collect();
        if pending.is_empty() {
            break;
        }
        let requests: Vec<(&Context, RngStream)> = pending
            .iter()
            .map(|&i| (&jobs[i].context, jobs[i].stream.child("draw", &[r as u64])))
            .collect();
        let canvases = generator.generate(&requests)?;
        calls += requests.len();
        for (&i, canvas) in pending.iter().zip(canvases) {
            let verdict = judge.judge(&canvas, &jobs[i].judged);
            if accept(&verdict) {
                out[i] = Some(Draw {
                    canvas,
                    tries: r + 1,
                    verdict,
                });
            }
        }
    }
    Ok((out, calls))
}

/// First of up to `k` samples from `(target, s₀)` the judge accepts for
/// `target`, with the number of generator calls spent.
pub fn build_anchor(
    generator: &dyn Generator,
    judge: &dyn TextJudge,
    target: &PromptSpec,
    s0: &ConditionMap,
    k: usize,
    stream: RngStream,
) -> Result<(Option<Anchor>, usize), PipelineError> {
    let job = Job {
        context: Context::new(target.clone(), s0.clone()),
        judged: target.clone(),
        stream,
    };
    let (mut draws, calls) = first_accepted(generator, judge, &[job], k.max(1), |v| v.passed)?;
    let anchor = draws.remove(0).map(|d| Anchor {
        canvas: d.canvas,
        tries: d.tries,
        margin: d.verdict.margin,
    });
    Ok((anchor, calls))
}

/// Runs the record construction for a batch of pool entries. Results are
/// aligned with `entries`.
pub fn build_records(
    generator: &dyn Generator,
    judge: &dyn TextJudge,
    world: &WorldConfig,
    cfg: &PipelineConfig,
    seed: u64,
    entries: &[ContextEntry],
) -> Result<(Vec<Option<PreferenceRecord>>, BuildStats), PipelineError> {
    let k = cfg.retries.max(1);
    let mut stats = BuildStats::default();
    let streams: Vec<RngStream> = entries.iter().map(|e| entry_stream(seed, e.attempt)).collect();

    let jobs: Vec<Job> = entries
        .iter()
        .zip(&streams)
        .map(|(e, s)| Job {
            context: Context::new(e.target.clone(), e.s0.clone()),
            judged: e.target.clone(),
            stream: s.child("anchor", &[]),
        })
        .collect();
    let (anchors, calls) = first_accepted(generator, judge, &jobs, k, |v| v.passed)?;
    stats.calls.anchor = calls;

    let anchored: Vec<usize> = (0..entries.len()).filter(|&i| anchors[i].is_some()).collect();
    stats.anchors = anchored.len();

    let jobs: Vec<Job> = anchored
        .iter()
        .map(|&i| Job {
            context: Context::new(entries[i].source.clone(), entries[i].s0.clone()),
            judged: entries[i].target.clone(),
            stream: streams[i].child("text-negative", &[]),
        })
        .collect();
    let (negatives, calls) = if cfg.strict_negatives {
        first_accepted(generator, judge, &jobs, k, |v| !v.passed)?
    } else {
        first_accepted(generator, judge, &jobs, 1, |_| true)?
    };
    stats.calls.text_negative = calls;

    let mut cond_jobs = Vec::new();
    let mut cond_owner = Vec::new();
    let mut s1s = Vec::new();
    for (j, &i) in anchored.iter().enumerate() {
        if negatives[j].is_none() {
            stats.negative_failures += 1;
            continue;
        }
        let anchor = anchors[i].as_ref().expect("anchored");
        let Ok(s1) = extract_condition(&anchor.canvas, world) else {
            stats.degenerate_s1 += 1;
            continue;
        };
        cond_jobs.push(Job {
            context: Context::new(entries[i].target.clone(), s1.clone()),
            judged: entries[i].target.clone(),
            stream: streams[i].child("cond-negative", &[]),
        });
        cond_owner.push((i, j));
        s1s.push(s1);
    }
    let (cond_negs, calls) = first_accepted(generator, judge, &cond_jobs, k, |v| v.passed)?;
    stats.calls.cond_negative = calls;

    let mut out: Vec<Option<PreferenceRecord>> = entries.iter().map(|_| None).collect();
    for (((i, j), s1), cond_neg) in cond_owner.into_iter().zip(s1s).zip(cond_negs) {
        let Some(cond_neg) = cond_neg else {
            stats.cond_failures += 1;
            continue;
        };
        let e = &entries[i];
        let anchor = anchors[i].as_ref().expect("anchored");
        let negative = negatives[j].as_ref().expect("negative drawn");
        let provenance = Provenance {
            seed,
            attempt: e.attempt,
            source_draws: e.source_draws,
            anchor_tries: anchor.tries,
            negative_draws: negative.tries,
            cond_tries: cond_neg.tries,
            anchor_margin: anchor.verdict.margin,
            text_negative_margin: negative.verdict.margin,
            text_negative_verified: cfg.strict_negatives,
            cond_negative_margin: cond_neg.verdict.margin,
            cond_negative_mse: cond_fidelity(&cond_neg.canvas, &s1, world).mse,
            conflict: e.conflict,
        };
        out[i] = Some(PreferenceRecord {
            source: e.source.clone(),
            text_pair: PreferencePair::new(
                anchor.canvas.clone(),
                negative.canvas.clone(),
                Context::new(e.target.clone(), e.s0.clone()),
                PairKind::Text,
            ),
            cond_pair: PreferencePair::new(
                anchor.canvas.clone(),
                cond_neg.canvas,
                Context::new(e.target.clone(), s1),
                PairKind::Condition,
            ),
            provenance,
        });
        stats.records += 1;
    }
    stats.attempts = entries.len();
    Ok((out, stats))
}

/// One record from one pool entry.
pub fn build_record(
    generator: &dyn Generator,
    judge: &dyn TextJudge,
    world: &WorldConfig,
    cfg: &PipelineConfig,
    seed: u64,
    entry: &ContextEntry,
) -> Result<(Option<PreferenceRecord>, BuildStats), PipelineError> {
    let (mut records, stats) = build_records(generator, judge, world, cfg, seed, std::slice::from_ref(entry))?;
    Ok((records.remove(0), stats))
}

/// Attempts records until `cfg.records` exist or the attempt budget runs out.
/// The result is the first `N` successes in attempt order, so it does not
/// depend on `cfg.wave`.
pub fn build_dataset(
    generator: &dyn Generator,
    judge: &dyn TextJudge,
    world: &WorldConfig,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Dataset, BuildStats), PipelineError> {
    cfg.validate()?;
    let budget = cfg.attempt_budget();
    let mut stats = BuildStats::default();
    let mut records: Vec<PreferenceRecord> = Vec::new();
    let mut next = 0;
    while records.len() < cfg.records && next < budget {
        let end = (next + cfg.wave).min(budget);
        let pool = pool_wave(generator, world, cfg.pool_resamples, seed, next..end)?;
        let mut wave_stats = BuildStats {
            pool_dropped: pool.dropped,
            ..BuildStats::default()
        };
        wave_stats.calls.pool = pool.calls;
        let (built, s) = build_records(generator, judge, world, cfg, seed, &pool.entries)?;
        wave_stats.add(&s);
        wave_stats.attempts = end - next;
        stats.add(&wave_stats);
        check_pool(stats.pool_dropped, stats.attempts)?;
        records.extend(built.into_iter().flatten());
        next = end;
        log::info!(
            "pipeline: {} attempts, {} records, anchor rate {:.3}",
            stats.attempts,
            records.len(),
            stats.anchor_rate()
        );
    }
    if records.len() < cfg.records {
        return Err(PipelineError::BudgetExhausted {
            realized: records.len(),
            target: cfg.records,
            attempts: stats.attempts,
        });
    }
    records.truncate(cfg.records);
    let manifest = DatasetManifest::describe(&records, seed, &generator.fingerprint(), cfg, world, &stats);
    Ok((Dataset { records, manifest }, stats))
}
