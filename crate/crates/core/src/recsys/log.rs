use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One interaction row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: f64,
    #[serde(default)]
    pub event_type: String,
    #[serde(default = "one", deserialize_with = "weight_or_default")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn weight_or_default<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    match s.as_deref().map(str::trim) {
        None | Some("") => Ok(1.0),
        Some(v) => v.parse().map_err(serde::de::Error::custom),
    }
}

/// A session (or user history): events in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub item_id: String,
    pub timestamp: f64,
    pub event_type: String,
    pub weight: f64,
}

/// Interactions grouped by session. Sessions keep first-appearance order of
/// the source rows; events inside a session are stably sorted by timestamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    sessions: Vec<Session>,
}

impl InteractionLog {
    pub fn from_interactions(rows: impl IntoIterator<Item = Interaction>) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut sessions: Vec<Session> = Vec::new();
        for (i, r) in rows.into_iter().enumerate() {
            if !(r.weight.is_finite() && r.weight >= 0.0) {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("weight must be finite and >= 0, got {}", r.weight),
                });
            }
            if !r.timestamp.is_finite() {
                return Err(Error::NonFinite {
                    line: i + 2,
                    value: r.timestamp.to_string(),
                });
            }
            let slot = *index.entry(r.session_id.clone()).or_insert_with(|| {
                sessions.push(Session {
                    id: r.session_id.clone(),
                    events: Vec::new(),
                });
                sessions.len() - 1
            });
            sessions[slot].events.push(Event {
                item_id: r.item_id,
                timestamp: r.timestamp,
                event_type: r.event_type,
                weight: r.weight,
            });
        }
        for s in &mut sessions {
            s.events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
        Ok(InteractionLog { sessions })
    }

    /// Reads CSV with header `session_id,item_id,timestamp,event_type,weight`.
    /// `event_type` and `weight` may be absent or empty.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let rows: Vec<Interaction> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Self::from_interactions(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(BufReader::new(f))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for s in &self.sessions {
            for e in &s.events {
                wtr.serialize(Interaction {
                    session_id: s.id.clone(),
                    item_id: e.item_id.clone(),
                    timestamp: e.timestamp,
                    event_type: e.event_type.clone(),
                    weight: e.weight,
                })?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sessions.iter().map(|s| s.events.len()).sum()
    }

    /// Interaction count per item.
    pub fn item_counts(&self) -> HashMap<String, usize> {
        let mut counts = HashMap::new();
        for e in self.sessions.iter().flat_map(|s| &s.events) {
            *counts.entry(e.item_id.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// All `(session_id, item_id)` pairs, e.g. for the propagation embedder.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.sessions
            .iter()
            .flat_map(|s| s.events.iter().map(move |e| (s.id.clone(), e.item_id.clone())))
            .collect()
    }
}
