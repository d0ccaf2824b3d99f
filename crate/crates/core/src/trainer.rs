//! Sequence assembly, negative sampling, dual-rate AdamW and the training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_mask, TokenKind, TokenMeta};
use crate::decoder::{canonical_json, save_checkpoint, Checkpoint, Model, ModelConfig, OptimizerMoments};
use crate::embeddings::{synth_semantic, SemanticStore, TokenInput};
use crate::error::{Error, Result};
use crate::events::{leave_one_out_split, synth_generate, Action, Event, Session, SplitSpec, SynthSpec};
use crate::losses::{infonce_tape, pairwise_tape, pointwise_tape, LossTerms, LossValues, LossWeights};
use crate::rng::{keyed_rng, splitmix64, stream_rng, RngState, Stream};
use crate::tensor::{relative_error, Gradients, ParamStore, Partition, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Upper bound on tokens per sequence; the oldest events are dropped first.
    pub max_seq_len: usize,
    pub p_insert: f64,
    pub p_query_mask: f64,
    /// In-batch negatives per retrieval token; 0 keeps every other positive.
    pub easy_negatives: usize,
    pub hard_negatives: usize,
    pub loss: LossWeights,
    pub lr_dense: f64,
    pub lr_sparse: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_dense: f64,
    pub weight_decay_sparse: f64,
    pub clip_norm: f64,
    pub steps: u64,
    pub seed: u64,
    /// Context-to-context gaps sampled per training sequence.
    pub theta_set: Vec<i64>,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Write elapsed milliseconds into the metrics log; 0 otherwise.
    pub record_wall_time: bool,
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_seq_len: 512,
            p_insert: 0.5,
            p_query_mask: 0.3,
            easy_negatives: 0,
            hard_negatives: 6,
            loss: LossWeights::default(),
            lr_dense: 0.001,
            lr_sparse: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay_dense: 0.01,
            weight_decay_sparse: 0.0,
            clip_norm: 1.0,
            steps: 2000,
            seed: 0,
            theta_set: vec![0],
            checkpoint_every: 0,
            record_wall_time: true,
            max_loss: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(0.0..=1.0).contains(&self.p_insert) || !(0.0..=1.0).contains(&self.p_query_mask) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.lr_dense > 0.0) || !(self.lr_sparse > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("AdamW betas must lie in [0, 1) and eps be positive");
        }
        if self.batch_size == 0 || self.max_seq_len == 0 {
            return bad("batch_size and max_seq_len must be positive");
        }
        if self.theta_set.is_empty() || self.theta_set.iter().any(|&t| t < 0) {
            return bad("theta_set must be non-empty and non-negative");
        }
        if !(self.clip_norm > 0.0) || self.weight_decay_dense < 0.0 || self.weight_decay_sparse < 0.0 {
            return bad("clip_norm must be positive and weight decay non-negative");
        }
        self.loss.validate()
    }
}

/// A retrieval token and the item it should retrieve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalTarget {
    pub token: usize,
    pub positive: u32,
    /// Impressed-but-not-clicked siblings of the event.
    pub hard: Vec<u32>,
}

/// Ranking tokens for one event, positive first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingGroup {
    pub tokens: Vec<usize>,
    pub items: Vec<u32>,
    pub labels: Vec<bool>,
}

/// Model-facing token sequence for one user.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<TokenInput>,
    pub metas: Vec<TokenMeta>,
    pub retrieval: Vec<RetrievalTarget>,
    pub ranking: Vec<RankingGroup>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: TokenInput, kind: TokenKind, event: &Event) -> usize {
        let index = self.inputs.len();
        self.inputs.push(input);
        self.metas.push(TokenMeta {
            kind,
            t: event.t_unix,
            req_group: event.request_group as i64,
            event_id: event.event_id as i64,
            index,
        });
        index
    }

    /// Appends a retrieval token for `event` followed by one ranking token per
    /// candidate. Returns the retrieval token index and the ranking indices.
    pub fn push_task_tokens(&mut self, event: &Event, query: Option<u32>, candidates: &[u32]) -> (usize, Vec<usize>) {
        let r = self.push(TokenInput::retrieval(query, event.action), TokenKind::Retrieval, event);
        let ks = candidates
            .iter()
            .map(|&c| self.push(TokenInput::ranking(query, c, event.action), TokenKind::Ranking, event))
            .collect();
        (r, ks)
    }

    /// Keeps the last tokens such that no event is split and at most `max`
    /// tokens remain.
    fn truncate_front(self, chunk_starts: &[usize], max: usize) -> Sequence {
        let n = self.len();
        if n <= max {
            return self;
        }
        let cut = chunk_starts.iter().copied().find(|&s| n - s <= max).unwrap_or(n);
        let mut out = Sequence::default();
        for i in cut..n {
            out.inputs.push(self.inputs[i]);
            out.metas.push(TokenMeta { index: i - cut, ..self.metas[i] });
        }
        out.retrieval = self
            .retrieval
            .into_iter()
            .filter(|r| r.token >= cut)
            .map(|r| RetrievalTarget { token: r.token - cut, ..r })
            .collect();
        out.ranking = self
            .ranking
            .into_iter()
            .filter(|g| g.tokens[0] >= cut)
            .map(|g| RankingGroup { tokens: g.tokens.iter().map(|t| t - cut).collect(), ..g })
            .collect();
        out
    }
}

/// Context-only sequence over the interactions in `events`, keeping at most
/// `max` of the most recent ones.
pub fn context_sequence(events: &[Event], max: usize) -> Sequence {
    let interactions: Vec<&Event> = events.iter().filter(|e| e.is_interaction()).collect();
    let start = interactions.len().saturating_sub(max);
    let mut seq = Sequence::default();
    for e in &interactions[start..] {
        seq.push(TokenInput::context_of(e), TokenKind::Context, e);
    }
    seq
}

/// Impressed siblings of `events[i]` in its request group, excluding the
/// clicked item itself, at most `k`.
pub fn impressed_siblings(events: &[Event], i: usize, k: usize) -> Vec<u32> {
    let g = events[i].request_group;
    let pos = events[i].item_id;
    let mut seen = BTreeSet::new();
    events
        .iter()
        .filter(|e| e.request_group == g && !e.is_interaction() && e.item_id != pos)
        .filter(|e| seen.insert(e.item_id))
        .map(|e| e.item_id)
        .take(k)
        .collect()
}

/// Clicked or purchased interactions receive task tokens.
pub fn is_task_eligible(e: &Event) -> bool {
    e.is_interaction() && (e.clicked || e.action == Action::Purchase)
}

/// Builds the training sequence over `session.events[..end]`.
///
/// Every interaction yields a context token. Each eligible interaction also
/// gets, with probability `p_insert`, a retrieval token and a ranking group
/// (positive plus impressed siblings) tagged with its event; with probability
/// `p_query_mask` those task tokens drop the query.
pub fn insert_task_tokens(session: &Session, end: usize, rng: &mut impl Rng, cfg: &TrainConfig) -> Sequence {
    let events = &session.events[..end];
    let mut seq = Sequence::default();
    let mut chunk_starts = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if !e.is_interaction() {
            continue;
        }
        chunk_starts.push(seq.len());
        if is_task_eligible(e) {
            let insert = rng.random::<f64>() < cfg.p_insert;
            let keep_query = rng.random::<f64>() >= cfg.p_query_mask;
            if insert {
                let hard = impressed_siblings(events, i, cfg.hard_negatives);
                let query = e.query_id.filter(|_| keep_query);
                let mut candidates = vec![e.item_id];
                candidates.extend(&hard);
                let (r, ks) = seq.push_task_tokens(e, query, &candidates);
                seq.retrieval.push(RetrievalTarget { token: r, positive: e.item_id, hard });
                let labels = (0..ks.len()).map(|j| j == 0).collect();
                seq.ranking.push(RankingGroup { tokens: ks, items: candidates, labels });
            }
        }
        seq.push(TokenInput::context_of(e), TokenKind::Context, e);
    }
    seq.truncate_front(&chunk_starts, cfg.max_seq_len)
}

/// Negatives for one retrieval token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    pub easy: Vec<u32>,
    pub hard: Vec<u32>,
}

/// In-batch easy negatives are the other distinct positives of the batch;
/// hard negatives are the token's impressed siblings. Output follows the
/// retrieval targets of `sequences` in order.
pub fn sample_negatives(sequences: &[Sequence], rng: &mut impl Rng, cfg: &TrainConfig) -> Vec<NegativeSet> {
    let positives: BTreeSet<u32> = sequences.iter().flat_map(|s| s.retrieval.iter().map(|r| r.positive)).collect();
    let mut out = Vec::new();
    for r in sequences.iter().flat_map(|s| &s.retrieval) {
        let mut easy: Vec<u32> = positives.iter().copied().filter(|&p| p != r.positive).collect();
        if cfg.easy_negatives > 0 && easy.len() > cfg.easy_negatives {
            let mut keep: Vec<usize> = sample(rng, easy.len(), cfg.easy_negatives).into_vec();
            keep.sort_unstable();
            easy = keep.into_iter().map(|i| easy[i]).collect();
        }
        let hard: Vec<u32> = r.hard.iter().copied().filter(|&h| h != r.positive).take(cfg.hard_negatives).collect();
        out.push(NegativeSet { easy, hard });
    }
    out
}

/// Sequences, per-sequence gaps and negatives for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sequences: Vec<Sequence>,
    pub thetas: Vec<i64>,
    pub negatives: Vec<NegativeSet>,
}

impl Batch {
    pub fn task_token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.retrieval.len() + s.ranking.len()).sum()
    }
}

/// Head outputs recorded for a batch.
pub struct BatchOutputs {
    pub hidden: Vec<Var>,
    /// Retrieval-head projections of every retrieval token, in batch order.
    pub projections: Option<Var>,
    /// Ranking logits of every ranking token, in batch order.
    pub logits: Option<Var>,
}

/// Runs fusion and the backbone on each sequence and applies both heads.
pub fn batch_forward(model: &Model, store: &SemanticStore, batch: &Batch, tape: &mut Tape) -> Result<BatchOutputs> {
    let fusion = model.fusion(store);
    let mut hidden = Vec::with_capacity(batch.sequences.len());
    for (seq, &theta) in batch.sequences.iter().zip(&batch.thetas) {
        let x = fusion.fuse(tape, &seq.inputs)?;
        let mask = build_mask(&seq.metas, theta);
        hidden.push(model.forward(tape, x, &seq.metas, &mask)?);
    }
    let picks: Vec<(usize, usize)> =
        batch.sequences.iter().enumerate().flat_map(|(s, seq)| seq.retrieval.iter().map(move |r| (s, r.token))).collect();
    let projections = if picks.is_empty() {
        None
    } else {
        let rows = tape.gather_rows(&hidden, &picks)?;
        Some(model.retrieval_projection(tape, rows)?)
    };
    let picks: Vec<(usize, usize)> = batch
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| seq.ranking.iter().flat_map(move |g| g.tokens.iter().map(move |&t| (s, t))))
        .collect();
    let logits = if picks.is_empty() {
        None
    } else {
        let rows = tape.gather_rows(&hidden, &picks)?;
        Some(model.ranking_logits(tape, rows)?)
    };
    Ok(BatchOutputs { hidden, projections, logits })
}

/// Records the four mean-normalized loss terms and their weighted sum.
pub fn batch_loss(
    model: &Model,
    store: &SemanticStore,
    batch: &Batch,
    weights: &LossWeights,
    tape: &mut Tape,
) -> Result<(LossTerms, Option<Var>)> {
    let out = batch_forward(model, store, batch, tape)?;
    let mut terms = LossTerms::default();
    let targets: Vec<&RetrievalTarget> = batch.sequences.iter().flat_map(|s| &s.retrieval).collect();
    if let Some(proj) = out.projections {
        let mut universe = BTreeSet::new();
        for (t, n) in targets.iter().zip(&batch.negatives) {
            universe.insert(t.positive);
            universe.extend(&n.easy);
            universe.extend(&n.hard);
        }
        let items: Vec<u32> = universe.into_iter().collect();
        let col: BTreeMap<u32, usize> = items.iter().enumerate().map(|(i, &it)| (it, i)).collect();
        let emb = model.fusion(store).item_embeddings(tape, &items)?;
        let scores = tape.matmul_bt(proj, emb)?;
        let lists = |pick: fn(&NegativeSet) -> &Vec<u32>| -> Vec<Vec<usize>> {
            targets
                .iter()
                .zip(&batch.negatives)
                .map(|(t, n)| std::iter::once(t.positive).chain(pick(n).iter().copied()).map(|i| col[&i]).collect())
                .collect()
        };
        terms.easy = infonce_tape(tape, scores, &lists(|n| &n.easy), weights.tau)?;
        terms.hard = infonce_tape(tape, scores, &lists(|n| &n.hard), weights.tau)?;
    }
    if let Some(logits) = out.logits {
        let mut labels = Vec::new();
        let mut pairs = Vec::new();
        for g in batch.sequences.iter().flat_map(|s| &s.ranking) {
            let base = labels.len();
            labels.extend(&g.labels);
            let pos: Vec<usize> = (0..g.labels.len()).filter(|&j| g.labels[j]).collect();
            for &p in &pos {
                for j in (0..g.labels.len()).filter(|&j| !g.labels[j]) {
                    pairs.push((base + p, base + j));
                }
            }
        }
        terms.point = pointwise_tape(tape, logits, &labels)?;
        terms.pair = pairwise_tape(tape, logits, &pairs)?;
    }
    let total = terms.combine(tape, weights)?;
    Ok((terms, total))
}

/// AdamW with decoupled weight decay. Sparse tensors use `lr_sparse` and only
/// rows that received gradient are updated, moments included. Dense tensors
/// absent from `grads` are treated as having zero gradient.
pub fn adamw_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerMoments, cfg: &TrainConfig) -> Result<()> {
    for (id, g) in grads.iter() {
        if !g.grad.is_finite() {
            return Err(Error::NonFiniteGradient { param: params.name(*id).to_string() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let partition = params.partition(id);
        let grad = grads.get(id);
        let (lr, wd) = match partition {
            Partition::Dense => (cfg.lr_dense, cfg.weight_decay_dense),
            Partition::Sparse => (cfg.lr_sparse, cfg.weight_decay_sparse),
        };
        let cols = params.get(id).cols();
        let rows: Vec<usize> = match (partition, grad) {
            (Partition::Sparse, None) => continue,
            (Partition::Sparse, Some(g)) => g.rows.clone().unwrap_or_else(|| (0..params.get(id).rows()).collect()),
            (Partition::Dense, _) => (0..params.get(id).rows()).collect(),
        };
        let p = params.get_mut(id).data_mut();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        for r in rows {
            for c in r * cols..(r + 1) * cols {
                let gi = grad.map_or(0.0, |g| g.grad.data()[c]);
                m[c] = cfg.beta1 * m[c] + (1.0 - cfg.beta1) * gi;
                v[c] = cfg.beta2 * v[c] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[c] / bc1;
                let vh = v[c] / bc2;
                p[c] -= lr * (mh / (vh.sqrt() + cfg.eps) + wd * p[c]);
            }
        }
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_rel_easy: f64,
    pub loss_rel_hard: f64,
    pub loss_point: f64,
    pub loss_pair: f64,
    pub lr_dense: f64,
    pub lr_sparse: f64,
    pub wall_ms: u64,
}

/// Training inputs that stay fixed across steps.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub sessions: &'a [Session],
    pub split: &'a SplitSpec,
    pub store: &'a SemanticStore,
}

impl TrainData<'_> {
    /// Sessions whose training prefix contains at least one interaction.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.sessions.len())
            .filter(|&i| self.sessions[i].events[..self.split.sessions[i].train_end].iter().any(Event::is_interaction))
            .collect()
    }
}

/// Model, optimizer state and sampling stream of a training run.
pub struct Trainer {
    pub model: Model,
    pub moments: OptimizerMoments,
    pub cfg: TrainConfig,
    pub step: u64,
    rng: ChaCha8Rng,
    config_json: String,
}

impl Trainer {
    /// `config_json` is stored verbatim in checkpoints; it must carry the
    /// model configuration under a `model` key.
    pub fn new(model: Model, cfg: TrainConfig, config_json: String) -> Result<Self> {
        cfg.validate()?;
        let moments = OptimizerMoments::zeros_like(&model.params);
        let rng = stream_rng(cfg.seed, Stream::Train);
        Ok(Self { model, moments, cfg, step: 0, rng, config_json })
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::from_checkpoint(ck)?;
        Ok(Self {
            model,
            moments: ck.moments.clone(),
            cfg,
            step: ck.step,
            rng: ck.rng.restore(),
            config_json: ck.config_json.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_json: self.config_json.clone(),
            params: self.model.params.clone(),
            moments: self.moments.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
        }
    }

    /// Draws the next batch: sessions from the run stream, then per-sequence
    /// insertion and gap draws from streams keyed by step and session.
    pub fn assemble(&mut self, data: &TrainData) -> Result<Batch> {
        let pool = data.trainable();
        if pool.is_empty() {
            return Err(Error::Config("no session has a training prefix".into()));
        }
        let k = self.cfg.batch_size.min(pool.len());
        let mut chosen: Vec<usize> = sample(&mut self.rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        chosen.sort_unstable();
        let step_key = splitmix64(self.step);
        let mut sequences = Vec::with_capacity(k);
        let mut thetas = Vec::with_capacity(k);
        for &s in &chosen {
            let mut rng = keyed_rng(self.cfg.seed, Stream::Train, step_key ^ splitmix64(s as u64 + 1));
            let end = data.split.sessions[s].train_end;
            sequences.push(insert_task_tokens(&data.sessions[s], end, &mut rng, &self.cfg));
            thetas.push(self.cfg.theta_set[rng.random_range(0..self.cfg.theta_set.len())]);
        }
        let mut rng = keyed_rng(self.cfg.seed, Stream::Train, step_key);
        let negatives = sample_negatives(&sequences, &mut rng, &self.cfg);
        Ok(Batch { sequences, thetas, negatives })
    }

    /// Assemble, forward, backward and update. On error the trainer is left
    /// exactly as before the call.
    pub fn step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let started = Instant::now();
        let saved_rng = self.rng.clone();
        let result = self.try_step(data);
        if result.is_err() {
            self.rng = saved_rng;
        }
        let values = result?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss_total: values.total,
            loss_rel_easy: values.rel_easy,
            loss_rel_hard: values.rel_hard,
            loss_point: values.point,
            loss_pair: values.pair,
            lr_dense: self.cfg.lr_dense,
            lr_sparse: self.cfg.lr_sparse,
            wall_ms: if self.cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
        })
    }

    fn try_step(&mut self, data: &TrainData) -> Result<LossValues> {
        let batch = self.assemble(data)?;
        let mut tape = Tape::new();
        let (terms, total) = match batch_loss(&self.model, data.store, &batch, &self.cfg.loss, &mut tape) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step: self.step + 1, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let values = terms.values(&tape, total);
        let Some(total) = total else {
            return Ok(values);
        };
        if !values.total.is_finite() || values.total > self.cfg.max_loss {
            return Err(Error::Divergence { step: self.step + 1, loss: values.total });
        }
        let mut grads = tape.backward(total)?;
        clip_gradients(&mut grads, self.cfg.clip_norm);
        let mut params = self.model.params.clone();
        let mut moments = self.moments.clone();
        adamw_step(&mut params, &grads, &mut moments, &self.cfg)?;
        self.model.params = params;
        self.moments = moments;
        Ok(values)
    }
}

/// Output locations for [`train`].
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub metrics_log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Steps until `trainer.cfg.steps` total steps have run. Each step appends one
/// JSON line to the metrics log. On failure the last good state is written to
/// the checkpoint path before the error is returned.
pub fn train(trainer: &mut Trainer, data: &TrainData, out: &RunOutputs) -> Result<Vec<StepRecord>> {
    let mut log = match &out.metrics_log {
        Some(p) => {
            let f = File::options().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
            Some((BufWriter::new(f), p.clone()))
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let rec = match trainer.step(data) {
            Ok(r) => r,
            Err(e) => {
                if let Some(p) = &out.checkpoint {
                    save_checkpoint(p, &trainer.checkpoint())?;
                }
                log::error!("stopping at step {}: {e}", trainer.step);
                return Err(e);
            }
        };
        if let Some((w, p)) = log.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(p.clone(), e))?;
        }
        log::debug!("step {} loss {:.6}", rec.step, rec.loss_total);
        records.push(rec);
        if let Some(p) = &out.checkpoint {
            if trainer.cfg.checkpoint_every > 0 && trainer.step.is_multiple_of(trainer.cfg.checkpoint_every) {
                save_checkpoint(p, &trainer.checkpoint())?;
            }
        }
    }
    if let Some((w, p)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(p.clone(), e))?;
    }
    if let Some(p) = &out.checkpoint {
        save_checkpoint(p, &trainer.checkpoint())?;
    }
    Ok(records)
}

/// Result of comparing backprop with central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
}

/// Denominator floor for relative gradient errors; gradients smaller than this
/// are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// Compares `grads` (from backprop, or tampered with by a caller) with central
/// differences of the batch loss at `samples` coordinates per tensor.
pub fn gradcheck_against(
    model: &Model,
    store: &SemanticStore,
    batch: &Batch,
    weights: &LossWeights,
    grads: &Gradients,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut probe = model.clone();
    let eval = |m: &Model| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let (_, total) = batch_loss(m, store, batch, weights, &mut tape)?;
        let total = total.ok_or_else(|| Error::Config("gradcheck batch has no loss terms".into()))?;
        Ok((tape.value(total).item(), tape.relu_signature()))
    };
    let (_, base_sig) = eval(model)?;
    let mut rng = stream_rng(seed, Stream::Eval);
    let mut report = GradcheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0, skipped: 0 };
    for id in model.params.ids() {
        let n = model.params.get(id).numel();
        let coords: Vec<usize> = match grads.get(id).and_then(|g| g.rows.clone()) {
            Some(rows) if model.params.partition(id) == Partition::Sparse => {
                let cols = model.params.get(id).cols();
                rows.iter().flat_map(|r| r * cols..(r + 1) * cols).collect()
            }
            _ => (0..n).collect(),
        };
        let pick: Vec<usize> = if coords.len() <= samples {
            coords
        } else {
            sample(&mut rng, coords.len(), samples).into_iter().map(|i| coords[i]).collect()
        };
        for c in pick {
            let orig = model.params.get(id).data()[c];
            probe.params.get_mut(id).data_mut()[c] = orig + eps;
            let (fp, sp) = eval(&probe)?;
            probe.params.get_mut(id).data_mut()[c] = orig - eps;
            let (fm, sm) = eval(&probe)?;
            probe.params.get_mut(id).data_mut()[c] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.grad.data()[c]);
            let err = relative_error(analytic, numeric, GRADCHECK_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_param = model.params.name(id).to_string();
                    report.worst_index = c;
                }
            }
        }
    }
    Ok(report)
}

/// Backprop gradients of the batch loss, as the optimizer would see them
/// before clipping.
pub fn batch_gradients(model: &Model, store: &SemanticStore, batch: &Batch, weights: &LossWeights) -> Result<Gradients> {
    let mut tape = Tape::new();
    let (_, total) = batch_loss(model, store, batch, weights, &mut tape)?;
    let total = total.ok_or_else(|| Error::Config("batch has no loss terms".into()))?;
    tape.backward(total)
}

pub fn gradcheck(
    model: &Model,
    store: &SemanticStore,
    batch: &Batch,
    weights: &LossWeights,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let grads = batch_gradients(model, store, batch, weights)?;
    gradcheck_against(model, store, batch, weights, &grads, samples, eps, seed)
}

/// Tiny model, data and batch on which every loss term is active.
pub struct GradcheckFixture {
    pub model: Model,
    pub store: SemanticStore,
    pub batch: Batch,
    pub weights: LossWeights,
}

/// Two layers, width 32, four heads, small embedding slots.
pub fn gradcheck_fixture(seed: u64) -> Result<GradcheckFixture> {
    let spec = SynthSpec { users: 6, items: 24, queries: 4, events_per_user: 5, item_dim: 6, query_dim: 6, ..SynthSpec::default() };
    let sessions = synth_generate(&spec, seed)?;
    let split = leave_one_out_split(&sessions);
    let store = synth_semantic(&spec, seed)?;
    let model = Model::new(ModelConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        mlp_hidden: 32,
        query_dim: 6,
        item_semantic_dim: 6,
        item_collab_dim: 6,
        action_dim: 4,
        items: 24,
        queries: 4,
        // Wider init keeps LayerNorm inputs away from the near-degenerate
        // regime where central differences lose accuracy.
        init_std: 0.3,
        seed,
        ..ModelConfig::default()
    })?;
    let cfg = TrainConfig { p_insert: 1.0, p_query_mask: 0.3, batch_size: 3, seed, ..TrainConfig::default() };
    let data = TrainData { sessions: &sessions, split: &split, store: &store };
    let mut trainer = Trainer::new(model.clone(), cfg.clone(), String::new())?;
    let batch = trainer.assemble(&data)?;
    Ok(GradcheckFixture { model, store, batch, weights: cfg.loss })
}

/// Canonical JSON wrapper used when a trainer is created without a full run
/// configuration.
pub fn model_only_config_json(model: &Model) -> Result<String> {
    canonical_json(&serde_json::json!({ "model": model.config }))
}
