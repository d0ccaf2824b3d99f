//! Leave-one-out evaluation: candidate pools, head scoring and rank metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::Model;
use crate::embeddings::SemanticStore;
use crate::error::{Error, Result};
use crate::events::{Event, Session, SessionSplit, SplitSpec};
use crate::rng::{keyed_rng, splitmix64, Stream};
use crate::tensor::Tensor;
use crate::trainer::{context_sequence, impressed_siblings};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const NDCG_KS: [usize; 2] = [5, 10];

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    debug_assert!(rank >= 1);
    1.0 / rank as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Retrieval,
    Ranking,
}

/// Search supplies the target's query to the task tokens; recommendation
/// leaves the query slot empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Search,
    Recommendation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Target plus uniformly sampled items the user never interacted with.
    Pool100,
    /// Every catalog item.
    Full,
    /// Target plus the items impressed alongside it.
    Impressed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Test,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub task: Task,
    pub mode: Mode,
    pub protocol: Protocol,
    pub target: Target,
    /// Pool size for `pool100` and the cap for `impressed`.
    pub pool_size: usize,
    /// Independent pool draws averaged for `pool100`.
    pub seeds: usize,
    pub seed: u64,
    /// Most recent interactions kept as context.
    pub max_context: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: Task::Retrieval,
            mode: Mode::Recommendation,
            protocol: Protocol::Full,
            target: Target::Test,
            pool_size: 100,
            seeds: 10,
            seed: 0,
            max_context: 512,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task == Task::Ranking && self.protocol == Protocol::Full {
            return Err(Error::Protocol("ranking over the full catalog is not supported; use pool100 or impressed".into()));
        }
        if self.pool_size < 1 || self.seeds == 0 || self.max_context == 0 {
            return Err(Error::Protocol("pool_size, seeds and max_context must be positive".into()));
        }
        Ok(())
    }

    fn draws(&self) -> usize {
        if self.protocol == Protocol::Pool100 {
            self.seeds
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub item: u32,
    pub score: f64,
}

/// Sorts by descending score, ties by ascending item id.
pub fn rank_scores(mut scored: Vec<Scored>) -> Vec<Scored> {
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    scored
}

/// 1-based position of `item` in a ranked list.
pub fn rank_of(ranked: &[Scored], item: u32) -> Option<usize> {
    ranked.iter().position(|s| s.item == item).map(|p| p + 1)
}

/// Scores `pool` for predicting `target` after `history`. Retrieval uses the
/// retrieval token's projected hidden state against each item embedding;
/// ranking appends one ranking token per candidate and reads its logit.
pub fn score_candidates(
    model: &Model,
    store: &SemanticStore,
    history: &[Event],
    target: &Event,
    query: Option<u32>,
    task: Task,
    pool: &[u32],
    max_context: usize,
) -> Result<Vec<Scored>> {
    if pool.is_empty() {
        return Err(Error::Protocol("empty candidate pool".into()));
    }
    let mut seq = context_sequence(history, max_context);
    let ranking: &[u32] = if task == Task::Ranking { pool } else { &[] };
    let (r, ks) = seq.push_task_tokens(target, query, ranking);
    let hidden = model.encode(store, &seq.inputs, &seq.metas, 0)?;
    let scored = match task {
        Task::Retrieval => {
            let proj = model.project(&Tensor::row_vector(hidden.row(r).to_vec())?)?;
            let items = model.fusion(store).item_embedding_matrix(pool)?;
            let scores = items.matmul(&proj.transpose())?;
            pool.iter().zip(scores.data()).map(|(&item, &score)| Scored { item, score }).collect()
        }
        Task::Ranking => {
            let rows: Vec<f64> = ks.iter().flat_map(|&k| hidden.row(k).to_vec()).collect();
            let h = Tensor::matrix(ks.len(), hidden.cols(), rows)?;
            let logits = ranking_logit_rows(model, &h)?;
            pool.iter().zip(logits).map(|(&item, score)| Scored { item, score }).collect()
        }
    };
    Ok(rank_scores(scored))
}

fn ranking_logit_rows(model: &Model, h: &Tensor) -> Result<Vec<f64>> {
    let mut tape = crate::tensor::Tape::new();
    let x = tape.constant(h.clone())?;
    let s = model.ranking_logits(&mut tape, x)?;
    Ok(tape.value(s).data().to_vec())
}

/// Averaged rank metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub samples: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Metrics {
        let n = ranks.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
        Metrics {
            recall: RECALL_KS.iter().map(|&k| (k, mean(&|r| recall_at_k(r, k)))).collect(),
            ndcg: NDCG_KS.iter().map(|&k| (k, mean(&|r| ndcg_at_k(r, k)))).collect(),
            mrr: mean(&mrr),
            samples: ranks.len(),
        }
    }

    fn mean_of(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let avg = |f: &dyn Fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            recall: RECALL_KS.iter().map(|&k| (k, avg(&|m| m.recall[&k]))).collect(),
            ndcg: NDCG_KS.iter().map(|&k| (k, avg(&|m| m.ndcg[&k]))).collect(),
            mrr: avg(&|m| m.mrr),
            samples: all.first().map_or(0, |m| m.samples),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub mode: Mode,
    pub protocol: Protocol,
    pub seed: u64,
    pub mean: Metrics,
    /// One entry per pool draw.
    pub per_seed: Vec<Metrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        crate::decoder::canonical_json(self)
    }

    pub fn table(reports: &[EvalReport]) -> String {
        let mut out = String::from("task       mode            protocol    R@1     R@5     R@10    N@5     N@10    MRR     n\n");
        for r in reports {
            let m = &r.mean;
            let _ = writeln!(
                out,
                "{:<10} {:<15} {:<11} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {}",
                label(&r.task),
                label(&r.mode),
                label(&r.protocol),
                m.recall[&1],
                m.recall[&5],
                m.recall[&10],
                m.ndcg[&5],
                m.ndcg[&10],
                m.mrr,
                m.samples
            );
        }
        out
    }
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Worker count from `SYNERGEN_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("SYNERGEN_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// `pool_size - 1` distinct items outside the user's history, plus the target.
pub fn sample_pool100(items: usize, history: &BTreeSet<u32>, target: u32, pool_size: usize, rng: &mut impl rand::Rng) -> Result<Vec<u32>> {
    let allowed: Vec<u32> = (0..items as u32).filter(|i| *i != target && !history.contains(i)).collect();
    let need = pool_size - 1;
    if allowed.len() < need {
        return Err(Error::Protocol(format!("only {} items outside the user's history; pool needs {need}", allowed.len())));
    }
    let mut pool = vec![target];
    pool.extend(sample(rng, allowed.len(), need).into_iter().map(|i| allowed[i]));
    Ok(pool)
}

struct Case<'a> {
    session: &'a Session,
    target: usize,
}

/// Evaluates every held-out target of `split` under `cfg`.
pub fn run_eval(model: &Model, sessions: &[Session], split: &SplitSpec, store: &SemanticStore, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    model.check_store(store)?;
    let cases: Vec<Case> = sessions
        .iter()
        .zip(&split.sessions)
        .filter_map(|(session, s)| {
            let target = match cfg.target {
                Target::Test => s.test,
                Target::Valid => s.valid,
            }?;
            Some(Case { session, target })
        })
        .collect();
    if cases.is_empty() {
        return Err(Error::Protocol("no evaluation targets".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ranks: Vec<Option<Vec<usize>>> =
        pool.install(|| cases.par_iter().map(|c| eval_case(model, store, c, cfg)).collect::<Result<Vec<_>>>())?;
    let draws = cfg.draws();
    let per_seed: Vec<Metrics> = (0..draws)
        .map(|d| Metrics::from_ranks(&ranks.iter().flatten().map(|r| r[d]).collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport { task: cfg.task, mode: cfg.mode, protocol: cfg.protocol, seed: cfg.seed, mean: Metrics::mean_of(&per_seed), per_seed })
}

/// Ranks of the target for each pool draw, or `None` when the protocol has no
/// pool for this case.
fn eval_case(model: &Model, store: &SemanticStore, case: &Case, cfg: &EvalConfig) -> Result<Option<Vec<usize>>> {
    let events = &case.session.events;
    let target = &events[case.target];
    let history = &events[..SessionSplit::group_start(case.session, case.target)];
    let query = match cfg.mode {
        Mode::Search => target.query_id,
        Mode::Recommendation => None,
    };
    let score = |pool: &[u32]| -> Result<usize> {
        let ranked = score_candidates(model, store, history, target, query, cfg.task, pool, cfg.max_context)?;
        Ok(rank_of(&ranked, target.item_id).expect("target is in its pool"))
    };
    match cfg.protocol {
        Protocol::Full => {
            let pool: Vec<u32> = (0..store.items() as u32).collect();
            Ok(Some(vec![score(&pool)?]))
        }
        Protocol::Impressed => {
            let mut pool = vec![target.item_id];
            pool.extend(impressed_siblings(events, case.target, cfg.pool_size - 1));
            if pool.len() < 2 {
                return Ok(None);
            }
            Ok(Some(vec![score(&pool)?]))
        }
        Protocol::Pool100 => {
            let seen: BTreeSet<u32> = case.session.interactions().map(|e| e.item_id).collect();
            if cfg.task == Task::Retrieval {
                // One forward pass serves every draw.
                let all: Vec<u32> = (0..store.items() as u32).collect();
                let ranked = score_candidates(model, store, history, target, query, cfg.task, &all, cfg.max_context)?;
                let by_item: BTreeMap<u32, f64> = ranked.iter().map(|s| (s.item, s.score)).collect();
                (0..cfg.seeds)
                    .map(|d| {
                        let pool = draw_pool(store.items(), &seen, target, cfg, d)?;
                        let scored = pool.iter().map(|&item| Scored { item, score: by_item[&item] }).collect();
                        Ok(rank_of(&rank_scores(scored), target.item_id).expect("target is in its pool"))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            } else {
                (0..cfg.seeds).map(|d| score(&draw_pool(store.items(), &seen, target, cfg, d)?)).collect::<Result<Vec<_>>>().map(Some)
            }
        }
    }
}

fn draw_pool(items: usize, seen: &BTreeSet<u32>, target: &Event, cfg: &EvalConfig, draw: usize) -> Result<Vec<u32>> {
    let key = splitmix64(target.event_id) ^ splitmix64(draw as u64 + 1);
    let mut rng = keyed_rng(cfg.seed, Stream::Eval, key);
    sample_pool100(items, seen, target.item_id, cfg.pool_size, &mut rng)
}
