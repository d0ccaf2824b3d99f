//! Interaction events, JSON Lines ingestion, preprocessing and the synthetic
//! corpus generator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Click,
    Purchase,
    AddToCart,
    Impression,
}

impl Action {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Action::Click => 0,
            Action::Purchase => 1,
            Action::AddToCart => 2,
            Action::Impression => 3,
        }
    }
}

/// One timestamped interaction. Field order is the on-disk key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: String,
    pub event_id: u64,
    pub request_group: u64,
    pub t_unix: i64,
    pub item_id: u32,
    pub action: Action,
    #[serde(default)]
    pub query_id: Option<u32>,
    pub clicked: bool,
}

impl Event {
    /// Clicks, purchases and add-to-carts; impressions are exposure only.
    pub fn is_interaction(&self) -> bool {
        self.action != Action::Impression
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub user_id: String,
    pub events: Vec<Event>,
}

impl Session {
    pub fn interactions(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.is_interaction())
    }

    pub fn interaction_count(&self) -> usize {
        self.interactions().count()
    }
}

/// Upper bounds used to reject dangling item/query references while loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Catalog {
    pub items: usize,
    pub queries: usize,
}

pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    load_events_checked(path, None)
}

pub fn load_events_checked(path: impl AsRef<Path>, catalog: Option<Catalog>) -> Result<Vec<Session>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_events(BufReader::new(file), catalog).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses and validates a JSON Lines event log. Sessions come back in order of
/// each user's first appearance.
pub fn read_events<R: BufRead>(reader: R, catalog: Option<Catalog>) -> Result<Vec<Session>> {
    let mut sessions: Vec<Session> = Vec::new();
    let mut by_user: HashMap<String, usize> = HashMap::new();
    let mut seen_ids: HashSet<u64> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<events>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: Event = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if ev.action == Action::Impression && ev.clicked {
            return Err(Error::Parse { line: line_no, msg: "impression events must have clicked=false".into() });
        }
        if !seen_ids.insert(ev.event_id) {
            return Err(Error::Parse { line: line_no, msg: format!("duplicate event_id {}", ev.event_id) });
        }
        if let Some(cat) = catalog {
            if ev.item_id as usize >= cat.items {
                return Err(Error::Dangling {
                    line: line_no,
                    msg: format!("item_id {} outside catalog of {}", ev.item_id, cat.items),
                });
            }
            if let Some(q) = ev.query_id {
                if q as usize >= cat.queries {
                    return Err(Error::Dangling {
                        line: line_no,
                        msg: format!("query_id {q} outside vocabulary of {}", cat.queries),
                    });
                }
            }
        }
        let slot = *by_user.entry(ev.user_id.clone()).or_insert_with(|| {
            sessions.push(Session { user_id: ev.user_id.clone(), events: Vec::new() });
            sessions.len() - 1
        });
        let session = &mut sessions[slot];
        if let Some(prev) = session.events.last() {
            if (ev.t_unix, ev.event_id) <= (prev.t_unix, prev.event_id) {
                return Err(Error::Ordering {
                    line: line_no,
                    msg: format!(
                        "user {} event {} at t={} follows event {} at t={}",
                        ev.user_id, ev.event_id, ev.t_unix, prev.event_id, prev.t_unix
                    ),
                });
            }
            if ev.request_group < prev.request_group {
                return Err(Error::Ordering {
                    line: line_no,
                    msg: format!("request_group {} decreases from {}", ev.request_group, prev.request_group),
                });
            }
        }
        session.events.push(ev);
    }
    Ok(sessions)
}

pub fn write_events(path: impl AsRef<Path>, sessions: &[Session]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_events_to(&mut w, sessions).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_events_to<W: Write>(w: &mut W, sessions: &[Session]) -> Result<()> {
    for s in sessions {
        for e in &s.events {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io("<events>", e))?;
        }
    }
    Ok(())
}

/// Removes users and items with fewer than `n` interactions until nothing
/// changes. Impressions of removed items, request groups left without an
/// interaction, and sessions with fewer than two interactions go too.
pub fn filter_min_interactions(sessions: &[Session], n: usize) -> Vec<Session> {
    assert!(n >= 1, "minimum interaction count must be positive");
    let mut current: Vec<Session> = sessions.to_vec();
    loop {
        let mut item_counts: HashMap<u32, usize> = HashMap::new();
        for s in &current {
            for e in s.interactions() {
                *item_counts.entry(e.item_id).or_default() += 1;
            }
        }
        let before: usize = current.iter().map(|s| s.events.len()).sum::<usize>() + current.len();
        let mut next = Vec::with_capacity(current.len());
        for s in current {
            if s.interaction_count() < n.max(2) {
                continue;
            }
            let kept: Vec<Event> = s
                .events
                .into_iter()
                .filter(|e| item_counts.get(&e.item_id).copied().unwrap_or(0) >= n)
                .collect();
            let live_groups: HashSet<u64> =
                kept.iter().filter(|e| e.is_interaction()).map(|e| e.request_group).collect();
            let kept: Vec<Event> = kept.into_iter().filter(|e| live_groups.contains(&e.request_group)).collect();
            if kept.is_empty() {
                continue;
            }
            next.push(Session { user_id: s.user_id, events: kept });
        }
        let after: usize = next.iter().map(|s| s.events.len()).sum::<usize>() + next.len();
        current = next;
        if after == before {
            return current;
        }
    }
}

/// Position of the held-out targets within one session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionSplit {
    /// Index of the last interaction, if the session is long enough.
    pub test: Option<usize>,
    /// Index of the second-to-last interaction.
    pub valid: Option<usize>,
    /// Events before this index form the training prefix.
    pub train_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Train,
    Valid,
    Test,
}

impl SessionSplit {
    /// Index of the first event in the request group of `target`; the context
    /// for predicting `target` is everything before it.
    pub fn group_start(session: &Session, target: usize) -> usize {
        let g = session.events[target].request_group;
        session.events.iter().position(|e| e.request_group == g).unwrap_or(target)
    }

    pub fn assignments(&self, session: &Session) -> Vec<Assignment> {
        let test_group = self.test.map(|t| session.events[t].request_group);
        (0..session.events.len())
            .map(|i| {
                if i < self.train_end {
                    Assignment::Train
                } else if Some(i) == self.valid {
                    Assignment::Valid
                } else if Some(i) == self.test || Some(session.events[i].request_group) == test_group {
                    Assignment::Test
                } else {
                    Assignment::Valid
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub sessions: Vec<SessionSplit>,
}

impl SplitSpec {
    pub fn test_count(&self) -> usize {
        self.sessions.iter().filter(|s| s.test.is_some()).count()
    }
}

/// Last interaction is the test target, the one before it validation, the rest
/// training. Sessions with fewer than three interactions are training-only.
pub fn leave_one_out_split(sessions: &[Session]) -> SplitSpec {
    let splits = sessions
        .iter()
        .map(|s| {
            let positives: Vec<usize> = (0..s.events.len()).filter(|&i| s.events[i].is_interaction()).collect();
            if positives.len() < 3 {
                return SessionSplit { test: None, valid: None, train_end: s.events.len() };
            }
            let test = positives[positives.len() - 1];
            let valid = positives[positives.len() - 2];
            SessionSplit { test: Some(test), valid: Some(valid), train_end: SessionSplit::group_start(s, valid) }
        })
        .collect();
    SplitSpec { sessions: splits }
}

/// Splits each user's history into ISO-week sub-sessions and keeps only the
/// final `last_n` events of each.
pub fn weekly_subsessions(sessions: &[Session], last_n: usize) -> Vec<Session> {
    const WEEK: i64 = 7 * 86_400;
    let mut out = Vec::new();
    for s in sessions {
        let mut current: Vec<Event> = Vec::new();
        let mut week = None;
        let flush = |events: &mut Vec<Event>, out: &mut Vec<Session>| {
            if events.is_empty() {
                return;
            }
            let start = events.len().saturating_sub(last_n);
            out.push(Session { user_id: s.user_id.clone(), events: events.split_off(start) });
            events.clear();
        };
        for e in &s.events {
            // Unix epoch was a Thursday; shift so weeks start on Monday.
            let w = (e.t_unix + 3 * 86_400).div_euclid(WEEK);
            if week.is_some_and(|cur| cur != w) {
                flush(&mut current, &mut out);
            }
            week = Some(w);
            current.push(e.clone());
        }
        flush(&mut current, &mut out);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.user_id = format!("{}#{i}", s.user_id);
            s
        })
        .filter(|s| s.interaction_count() >= 2)
        .collect()
}

/// Planted signal in the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthPattern {
    /// Next item is `(prev + 1) mod items`; queries name the target's cluster.
    #[default]
    Sequential,
    /// A random query picks the cluster; the member is the successor of the
    /// previous item's rank inside its own cluster.
    QueryCluster,
    /// The gap to the previous event picks one of `gap_classes` offsets.
    TimeGap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub queries: usize,
    pub events_per_user: usize,
    pub noise: f64,
    pub impressions_per_click: usize,
    pub query_prob: f64,
    pub pattern: SynthPattern,
    pub mean_gap_seconds: f64,
    pub gap_step_seconds: i64,
    pub gap_classes: usize,
    pub start_unix: i64,
    pub item_dim: usize,
    pub query_dim: usize,
    /// Per-coordinate noise around each cluster centre in the semantic tables.
    pub cluster_spread: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 100,
            items: 200,
            queries: 20,
            events_per_user: 20,
            noise: 0.05,
            impressions_per_click: 3,
            query_prob: 1.0,
            pattern: SynthPattern::Sequential,
            mean_gap_seconds: 3600.0,
            gap_step_seconds: 600,
            gap_classes: 20,
            start_unix: 1_704_067_200,
            item_dim: 128,
            query_dim: 256,
            cluster_spread: 0.35,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.users == 0 || self.events_per_user == 0 {
            return bad("users and events_per_user must be positive");
        }
        if self.items < 2 {
            return bad("need at least two items");
        }
        if self.queries == 0 || self.queries > self.items {
            return bad("queries must be in 1..=items");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.query_prob) {
            return bad("noise and query_prob must lie in [0, 1]");
        }
        if self.impressions_per_click >= self.items {
            return bad("impressions_per_click must be below the catalog size");
        }
        if !(self.mean_gap_seconds >= 1.0) || self.gap_step_seconds < 1 || self.gap_classes == 0 {
            return bad("gaps must be positive");
        }
        if self.item_dim == 0 || self.query_dim == 0 {
            return bad("embedding dims must be positive");
        }
        Ok(())
    }

    /// Items are split into `queries` contiguous clusters.
    pub fn cluster_of(&self, item: u32) -> u32 {
        (item as usize * self.queries / self.items) as u32
    }

    pub fn cluster_range(&self, cluster: u32) -> std::ops::Range<u32> {
        let lo = (cluster as usize * self.items).div_ceil(self.queries);
        let hi = ((cluster as usize + 1) * self.items).div_ceil(self.queries);
        lo as u32..hi as u32
    }

    /// Offset added per gap class in the time-gap pattern.
    pub fn gap_stride(&self) -> u32 {
        (self.items / self.gap_classes).max(1) as u32
    }

    /// Noise-free successor under the planted rule.
    pub fn rule_target(&self, prev: u32, query: u32, gap_class: usize) -> u32 {
        let v = self.items as u32;
        match self.pattern {
            SynthPattern::Sequential => (prev + 1) % v,
            SynthPattern::QueryCluster => {
                let own = self.cluster_range(self.cluster_of(prev));
                let rank = prev - own.start;
                let target = self.cluster_range(query);
                let size = target.end - target.start;
                target.start + (rank + 1) % size
            }
            SynthPattern::TimeGap => (prev + 1 + gap_class as u32 * self.gap_stride()) % v,
        }
    }
}

/// Deterministic synthetic corpus for `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<Session>> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Data);
    let exp = Exp::new(1.0 / spec.mean_gap_seconds).map_err(|e| Error::Config(e.to_string()))?;
    let v = spec.items as u32;
    let mut event_id: u64 = 0;
    let mut sessions = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let user_id = format!("u{u}");
        let mut events = Vec::new();
        let mut t = spec.start_unix + rng.random_range(0..86_400);
        let mut prev: u32 = rng.random_range(0..v);
        for c in 0..spec.events_per_user {
            let mut query = rng.random_range(0..spec.queries as u32);
            let gap_class = rng.random_range(0..spec.gap_classes);
            let gap = match spec.pattern {
                SynthPattern::TimeGap => {
                    (gap_class as i64 + 1) * spec.gap_step_seconds + rng.random_range(0..spec.gap_step_seconds.max(10) / 10)
                }
                _ => (exp.sample(&mut rng).round() as i64).max(1),
            };
            let item = if c == 0 {
                prev
            } else {
                let rule = spec.rule_target(prev, query, gap_class);
                if rng.random::<f64>() < spec.noise {
                    rng.random_range(0..v)
                } else {
                    rule
                }
            };
            if c > 0 {
                t += gap;
            }
            if spec.pattern != SynthPattern::QueryCluster {
                query = spec.cluster_of(item);
            }
            let query_id = (rng.random::<f64>() < spec.query_prob).then_some(query);
            let roll: f64 = rng.random();
            let action = if roll < 0.8 {
                Action::Click
            } else if roll < 0.9 {
                Action::AddToCart
            } else {
                Action::Purchase
            };
            let group = c as u64;
            events.push(Event {
                user_id: user_id.clone(),
                event_id,
                request_group: group,
                t_unix: t,
                item_id: item,
                action,
                query_id,
                clicked: true,
            });
            event_id += 1;
            let others: Vec<u32> = sample(&mut rng, spec.items - 1, spec.impressions_per_click)
                .into_iter()
                .map(|i| {
                    let i = i as u32;
                    if i >= item {
                        i + 1
                    } else {
                        i
                    }
                })
                .collect::<BTreeSet<u32>>()
                .into_iter()
                .collect();
            for imp in others {
                events.push(Event {
                    user_id: user_id.clone(),
                    event_id,
                    request_group: group,
                    t_unix: t,
                    item_id: imp,
                    action: Action::Impression,
                    query_id,
                    clicked: false,
                });
                event_id += 1;
            }
            prev = item;
        }
        sessions.push(Session { user_id, events });
    }
    Ok(sessions)
}
