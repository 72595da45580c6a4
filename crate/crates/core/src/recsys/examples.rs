use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{Event, InteractionLog, Session};
use crate::keyed::key_seed;
use crate::sketch::decay_factor;
use crate::{par, CodesMatrix, Error, Norm, Result, Sketch};

/// One input modality: an item codes matrix plus an optional event-type
/// filter (e.g. only "dislike" events feed a separate channel).
#[derive(Debug, Clone)]
pub struct Channel {
    pub name: String,
    pub codes: CodesMatrix,
    pub event_type: Option<String>,
}

impl Channel {
    pub fn new(name: impl Into<String>, codes: CodesMatrix) -> Self {
        Channel {
            name: name.into(),
            codes,
            event_type: None,
        }
    }

    pub fn with_event_type(mut self, event_type: impl Into<String>) -> Self {
        self.event_type = Some(event_type.into());
        self
    }

    fn accepts(&self, e: &Event) -> bool {
        self.event_type.as_deref().is_none_or(|t| t == e.event_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Session,
    Topk,
}

impl Task {
    /// Sketch segments per channel: `[last item, history]` for sessions, a
    /// single aggregate for top-k.
    pub fn segments(self) -> usize {
        match self {
            Task::Session => 2,
            Task::Topk => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub name: String,
    pub event_type: Option<String>,
    pub depth: usize,
    pub width: usize,
}

/// Order and shapes of the concatenated input vector. Stored with model
/// checkpoints and compared on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    pub task: Task,
    pub channels: Vec<ChannelLayout>,
    /// Index into `channels` of the channel whose codes define the target.
    pub target: usize,
}

impl InputLayout {
    pub fn new(task: Task, channels: &[Channel], target: usize) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Empty("channels"));
        }
        if target >= channels.len() {
            return Err(Error::invalid(format!("target channel {target} out of range")));
        }
        Ok(InputLayout {
            task,
            channels: channels
                .iter()
                .map(|c| ChannelLayout {
                    name: c.name.clone(),
                    event_type: c.event_type.clone(),
                    depth: c.codes.depth(),
                    width: c.codes.width(),
                })
                .collect(),
            target,
        })
    }

    pub fn input_len(&self) -> usize {
        self.channels.iter().map(|c| c.depth * c.width).sum::<usize>() * self.task.segments()
    }

    /// `(offset, len)` of each segment of channel `c` in the input vector.
    pub fn segments_of(&self, c: usize) -> Vec<(usize, usize)> {
        let seg = self.task.segments();
        let offset: usize = self.channels[..c].iter().map(|ch| ch.depth * ch.width * seg).sum();
        let len = self.channels[c].depth * self.channels[c].width;
        (0..seg).map(|s| (offset + s * len, len)).collect()
    }

    pub fn target_shape(&self) -> (usize, usize) {
        let t = &self.channels[self.target];
        (t.depth, t.width)
    }

    /// Errors unless `channels` produce exactly this layout.
    pub fn check(&self, channels: &[Channel]) -> Result<()> {
        let other = InputLayout::new(self.task, channels, self.target)?;
        if &other != self {
            return Err(Error::shape(format!(
                "input layout mismatch: expected {}, found {}",
                serde_json::to_string(self)?,
                serde_json::to_string(&other)?
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleMeta {
    pub key: String,
    /// Number of events fed to the input.
    pub position: usize,
    /// Input item ids, in event order (used for seen-item exclusion).
    pub input_items: Vec<String>,
    /// Immediate next item (session task).
    pub next: Option<String>,
    /// Distinct hidden items in first-appearance order.
    pub hidden: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Sketch,
    pub meta: ExampleMeta,
}

/// Session decay parameters: an event `dt` steps before the last input event
/// is weighted by `alpha * w^dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decay {
    pub alpha: f64,
    pub w: f64,
}

impl Default for Decay {
    fn default() -> Self {
        Decay { alpha: 0.9, w: 0.01 }
    }
}

/// Counters for rows that could not be used.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub examples: usize,
    pub too_short: usize,
    pub missing_target: usize,
    pub missing_input_items: usize,
}

impl BuildStats {
    fn merge(mut self, o: BuildStats) -> Self {
        self.examples += o.examples;
        self.too_short += o.too_short;
        self.missing_target += o.missing_target;
        self.missing_input_items += o.missing_input_items;
        self
    }
}

fn distinct(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items.into_iter().filter(|i| seen.insert(i.clone())).collect()
}

fn check_channels(channels: &[Channel], target: usize) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::Empty("channels"));
    }
    if target >= channels.len() {
        return Err(Error::invalid(format!("target channel {target} out of range")));
    }
    Ok(())
}

/// Example predicting `session.events[position]` from the events before it.
///
/// Per channel the input holds sketch A (the last accepted input event) and
/// sketch B (every earlier accepted event, weighted by `event weight ×
/// alpha·w^dt`, `dt` = event steps before the last one), each L2-normalized
/// width-wise. Channels are concatenated in order. The target is the one-hot
/// sketch of the next item under the target channel's codes.
///
/// Returns `Ok(None)` when the example has to be skipped; `stats` says why.
pub fn build_session_example(
    session: &Session,
    position: usize,
    channels: &[Channel],
    target: usize,
    decay: Decay,
    stats: &mut BuildStats,
) -> Result<Option<Example>> {
    check_channels(channels, target)?;
    if position == 0 || position >= session.events.len() {
        stats.too_short += 1;
        return Ok(None);
    }
    let next = &session.events[position];
    let tc = &channels[target];
    let Some(trow) = tc.codes.get(&next.item_id) else {
        stats.missing_target += 1;
        return Ok(None);
    };
    let mut tsketch = Sketch::for_codes(&tc.codes);
    tsketch.add_codes(trow, 1.0);

    let inputs = &session.events[..position];
    let mut input = Vec::new();
    for ch in channels {
        let mut a = Sketch::for_codes(&ch.codes);
        let mut b = Sketch::for_codes(&ch.codes);
        let accepted: Vec<&Event> = inputs.iter().filter(|e| ch.accepts(e)).collect();
        if let Some((last, earlier)) = accepted.split_last() {
            match ch.codes.get(&last.item_id) {
                Some(row) => a.add_codes(row, last.weight),
                None => stats.missing_input_items += 1,
            }
            let n = earlier.len();
            for (j, e) in earlier.iter().enumerate() {
                match ch.codes.get(&e.item_id) {
                    Some(row) => b.add_codes(row, e.weight * decay_factor(decay.alpha, decay.w, (n - j) as f64)),
                    None => stats.missing_input_items += 1,
                }
            }
        }
        a.normalize(Norm::L2);
        b.normalize(Norm::L2);
        input.extend_from_slice(a.values());
        input.extend_from_slice(b.values());
    }
    stats.examples += 1;
    let accepted_target = session.events[position..].iter().filter(|e| tc.accepts(e));
    Ok(Some(Example {
        input,
        target: tsketch,
        meta: ExampleMeta {
            key: session.id.clone(),
            position,
            input_items: inputs.iter().map(|e| e.item_id.clone()).collect(),
            next: Some(next.item_id.clone()),
            hidden: distinct(accepted_target.map(|e| e.item_id.clone())),
        },
    }))
}

/// Every prediction point of every session: positions `1..len` whose event
/// passes the target channel's filter. Sessions are processed in parallel;
/// output keeps log order.
pub fn build_session_examples(
    log: &InteractionLog,
    channels: &[Channel],
    target: usize,
    decay: Decay,
) -> Result<(Vec<Example>, BuildStats)> {
    check_channels(channels, target)?;
    let per_session = par::map(log.sessions(), |s| -> Result<(Vec<Example>, BuildStats)> {
        let mut stats = BuildStats::default();
        let mut out = Vec::new();
        if s.events.len() < 2 {
            stats.too_short += 1;
            return Ok((out, stats));
        }
        for pos in 1..s.events.len() {
            if !channels[target].accepts(&s.events[pos]) {
                continue;
            }
            if let Some(ex) = build_session_example(s, pos, channels, target, decay, &mut stats)? {
                out.push(ex);
            }
        }
        Ok((out, stats))
    });
    let mut all = Vec::new();
    let mut stats = BuildStats::default();
    for r in per_session {
        let (ex, st): (Vec<Example>, BuildStats) = r?;
        all.extend(ex);
        stats = stats.merge(st);
    }
    Ok((all, stats))
}

/// Number of input items for a top-k split: `ceil(ratio·n)`, but at least one
/// item is always held out.
pub fn topk_split_point(n: usize, ratio: f64) -> usize {
    (((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n - 1)
}

/// Top-k example for one user. Target-channel events are shuffled with a
/// generator keyed by `(seed, user id)` and split; the held-out part forms the
/// target (unit weights). Every channel aggregates its accepted events from
/// the input part plus all events that are not target-channel events (e.g.
/// dislikes), unit weights, L2-normalized width-wise.
pub fn build_topk_example(
    user: &Session,
    channels: &[Channel],
    target: usize,
    split_ratio: f64,
    seed: u64,
    stats: &mut BuildStats,
) -> Result<Option<Example>> {
    check_channels(channels, target)?;
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::invalid("split_ratio must be in (0, 1)"));
    }
    let tc = &channels[target];
    let (mut liked, other): (Vec<&Event>, Vec<&Event>) = user.events.iter().partition(|e| tc.accepts(e));
    if liked.len() < 2 {
        stats.too_short += 1;
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key_seed(seed, &user.id, 0x746f_706b));
    liked.shuffle(&mut rng);
    let cut = topk_split_point(liked.len(), split_ratio);
    let (input_part, held) = liked.split_at(cut);

    let mut tsketch = Sketch::for_codes(&tc.codes);
    let mut hidden = Vec::new();
    for e in held {
        match tc.codes.get(&e.item_id) {
            Some(row) => {
                tsketch.add_codes(row, 1.0);
                hidden.push(e.item_id.clone());
            }
            None => stats.missing_target += 1,
        }
    }
    if hidden.is_empty() {
        return Ok(None);
    }

    let input_events: Vec<&Event> = input_part.iter().chain(other.iter()).copied().collect();
    let mut input = Vec::new();
    for ch in channels {
        let mut s = Sketch::for_codes(&ch.codes);
        for e in input_events.iter().filter(|e| ch.accepts(e)) {
            match ch.codes.get(&e.item_id) {
                Some(row) => s.add_codes(row, 1.0),
                None => stats.missing_input_items += 1,
            }
        }
        s.normalize(Norm::L2);
        input.extend_from_slice(s.values());
    }
    stats.examples += 1;
    Ok(Some(Example {
        input,
        target: tsketch,
        meta: ExampleMeta {
            key: user.id.clone(),
            position: cut,
            input_items: input_part.iter().map(|e| e.item_id.clone()).collect(),
            next: None,
            hidden: distinct(hidden),
        },
    }))
}

pub fn build_topk_examples(
    log: &InteractionLog,
    channels: &[Channel],
    target: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<(Vec<Example>, BuildStats)> {
    check_channels(channels, target)?;
    let per_user = par::map(log.sessions(), |u| -> Result<(Option<Example>, BuildStats)> {
        let mut stats = BuildStats::default();
        let ex = build_topk_example(u, channels, target, split_ratio, seed, &mut stats)?;
        Ok((ex, stats))
    });
    let mut all = Vec::new();
    let mut stats = BuildStats::default();
    for r in per_user {
        let (ex, st): (Option<Example>, BuildStats) = r?;
        all.extend(ex);
        stats = stats.merge(st);
    }
    Ok((all, stats))
}
