//! Session-based and top-k recommendation on top of sketches: interaction
//! logs, example construction, ranking and evaluation metrics.

mod examples;
mod log;
mod metrics;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::Write;

pub use examples::{
    build_session_example, build_session_examples, build_topk_example, build_topk_examples, topk_split_point,
    BuildStats, Channel, ChannelLayout, Decay, Example, ExampleMeta, InputLayout, Task,
};
pub use log::{Event, Interaction, InteractionLog, Session};
pub use metrics::{
    evaluate_session, evaluate_topk, format_table, topk_point, write_metrics_csv, MetricRow, SessionMetrics,
    SessionPoint, TopkMetrics, TopkPoint,
};

use crate::model::Model;
use crate::sketch::decode_scores;
use crate::{par, Aggregator, CodesMatrix, Error, Norm, Result, Sketch};

/// How catalog scores are produced from an example input.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// Trained network; softmax per depth slice, then decode.
    Conditional(&'a Model),
    /// No model: the target channel's input segments are summed,
    /// L1-normalized and decoded directly.
    Pure,
    /// Pure scores multiplied by item popularity.
    PurePop(&'a Popularity),
    /// Input-independent popularity ranking.
    Popularity(&'a Popularity),
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Conditional(_) => "conditional",
            Predictor::Pure => "pure",
            Predictor::PurePop(_) => "pure+pop",
            Predictor::Popularity(_) => "toppop",
        }
    }
}

/// Interaction counts per item.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Popularity {
    counts: HashMap<String, f64>,
}

impl Popularity {
    pub fn from_log(log: &InteractionLog) -> Self {
        Popularity {
            counts: log.item_counts().into_iter().map(|(k, v)| (k, v as f64)).collect(),
        }
    }

    pub fn count(&self, item: &str) -> f64 {
        self.counts.get(item).copied().unwrap_or(0.0)
    }
}

/// Items ranked by interaction count, ties by item id.
pub fn popularity_baseline(log: &InteractionLog) -> Result<Vec<(String, f64)>> {
    if log.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    let mut v: Vec<(String, f64)> = log.item_counts().into_iter().map(|(k, c)| (k, c as f64)).collect();
    sort_ranked(&mut v);
    Ok(v)
}

fn sort_ranked(v: &mut [(String, f64)]) {
    v.sort_unstable_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
}

/// Predicted output sketch for an example input, before decoding. For pure
/// mode this is the L1-normalized sum of the target channel's segments.
pub fn predict_sketch(predictor: Predictor<'_>, input: &[f64], layout: &InputLayout) -> Result<Option<Sketch>> {
    if input.len() != layout.input_len() {
        return Err(Error::shape(format!(
            "input length {} does not match layout length {}",
            input.len(),
            layout.input_len()
        )));
    }
    let (depth, width) = layout.target_shape();
    match predictor {
        Predictor::Conditional(m) => {
            if m.input_len() != input.len() || m.out_depth() != depth || m.out_width() != width {
                return Err(Error::shape(format!(
                    "model expects input {} and output {}x{}, layout has {} and {}x{}",
                    m.input_len(),
                    m.out_depth(),
                    m.out_width(),
                    input.len(),
                    depth,
                    width
                )));
            }
            Ok(Some(Sketch::from_values(depth, width, m.predict_sketch(input)?)?))
        }
        Predictor::Pure | Predictor::PurePop(_) => {
            let mut acc = vec![0.0; depth * width];
            for (off, len) in layout.segments_of(layout.target) {
                acc.iter_mut().zip(&input[off..off + len]).for_each(|(a, x)| *a += x);
            }
            Ok(Some(Sketch::from_values(depth, width, acc)?.normalized(Norm::L1)))
        }
        Predictor::Popularity(_) => Ok(None),
    }
}

/// Scores for every item of `codes` (aligned with `codes.ids()`).
pub fn score_items(
    predictor: Predictor<'_>,
    input: &[f64],
    layout: &InputLayout,
    codes: &CodesMatrix,
    aggregator: Aggregator,
) -> Result<Vec<f64>> {
    if (codes.depth(), codes.width()) != layout.target_shape() {
        return Err(Error::shape("target codes do not match the layout"));
    }
    let sketch = predict_sketch(predictor, input, layout)?;
    match (predictor, sketch) {
        (Predictor::Popularity(p), _) => Ok(codes.ids().iter().map(|id| p.count(id)).collect()),
        (Predictor::PurePop(p), Some(s)) => {
            let mut scores = decode_scores(&s, codes, aggregator)?;
            scores.iter_mut().zip(codes.ids()).for_each(|(x, id)| *x *= p.count(id));
            Ok(scores)
        }
        (_, Some(s)) => decode_scores(&s, codes, aggregator),
        (_, None) => unreachable!("only popularity has no sketch"),
    }
}

/// Top-`k` of `scores` over `ids`, descending, ties by item id, skipping
/// `exclude`.
pub fn rank_top_k(ids: &[String], scores: &[f64], k: usize, exclude: &HashSet<String>) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = ids
        .iter()
        .zip(scores)
        .filter(|(id, _)| !exclude.contains(*id))
        .map(|(id, &s)| (id.clone(), s))
        .collect();
    let cmp = |a: &(String, f64), b: &(String, f64)| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    };
    if k < v.len() {
        v.select_nth_unstable_by(k, cmp);
        v.truncate(k);
    }
    v.sort_unstable_by(cmp);
    v
}

/// Ranked `(item_id, score)` list of length `≤ k` for one input.
pub fn recommend(
    predictor: Predictor<'_>,
    input: &[f64],
    layout: &InputLayout,
    codes: &CodesMatrix,
    k: usize,
    aggregator: Aggregator,
    exclude: &HashSet<String>,
) -> Result<Vec<(String, f64)>> {
    let scores = score_items(predictor, input, layout, codes, aggregator)?;
    Ok(rank_top_k(codes.ids(), &scores, k, exclude))
}

/// Ranked list per example, with seen-item exclusion when `exclude_seen`.
pub fn recommend_all(
    predictor: Predictor<'_>,
    examples: &[Example],
    layout: &InputLayout,
    codes: &CodesMatrix,
    k: usize,
    aggregator: Aggregator,
    exclude_seen: bool,
) -> Result<Vec<Vec<(String, f64)>>> {
    let empty = HashSet::new();
    par::map(examples, |ex| {
        let seen: HashSet<String>;
        let exclude = if exclude_seen {
            seen = ex.meta.input_items.iter().cloned().collect();
            &seen
        } else {
            &empty
        };
        recommend(predictor, &ex.input, layout, codes, k, aggregator, exclude)
    })
    .into_iter()
    .collect()
}

/// Prediction id of an example: `session@position`.
pub fn prediction_id(ex: &Example) -> String {
    format!("{}@{}", ex.meta.key, ex.meta.position)
}

/// CSV `session_id,rank,item_id,score`; `session_id` is [`prediction_id`].
pub fn write_predictions_csv<W: Write>(examples: &[Example], ranked: &[Vec<(String, f64)>], w: W) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        session_id: &'a str,
        rank: usize,
        item_id: &'a str,
        score: f64,
    }
    let mut wtr = csv::Writer::from_writer(w);
    for (ex, list) in examples.iter().zip(ranked) {
        let id = prediction_id(ex);
        for (r, (item, score)) in list.iter().enumerate() {
            wtr.serialize(Row {
                session_id: &id,
                rank: r + 1,
                item_id: item,
                score: *score,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn session_points(examples: &[Example], ranked: &[Vec<(String, f64)>]) -> Vec<SessionPoint> {
    examples
        .iter()
        .zip(ranked)
        .map(|(ex, r)| SessionPoint {
            ranked: r.iter().map(|(i, _)| i.clone()).collect(),
            next: ex.meta.next.clone().unwrap_or_default(),
            hidden: ex.meta.hidden.clone(),
        })
        .collect()
}

pub fn topk_points(examples: &[Example], ranked: &[Vec<(String, f64)>]) -> Vec<TopkPoint> {
    examples
        .iter()
        .zip(ranked)
        .map(|(ex, r)| TopkPoint {
            ranked: r.iter().map(|(i, _)| i.clone()).collect(),
            held_out: ex.meta.hidden.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::encode_item;

    fn log(rows: &[(&str, &str)]) -> InteractionLog {
        InteractionLog::from_interactions(rows.iter().enumerate().map(|(i, (s, it))| Interaction {
            session_id: s.to_string(),
            item_id: it.to_string(),
            timestamp: i as f64,
            event_type: String::new(),
            weight: 1.0,
        }))
        .unwrap()
    }

    #[test]
    fn popularity_orders_by_count_then_id() {
        let l = log(&[("s", "b"), ("s", "a"), ("t", "a"), ("t", "a")]);
        let r = popularity_baseline(&l).unwrap();
        assert_eq!(r[0].0, "a");
        assert_eq!(r[1].0, "b");
        let l = log(&[("s", "c"), ("s", "a"), ("s", "b")]);
        let ids: Vec<String> = popularity_baseline(&l).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(popularity_baseline(&InteractionLog::default()).is_err());
    }

    #[test]
    fn rank_ties_and_short_catalog() {
        let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let r = rank_top_k(&ids, &[1.0, 1.0, 2.0], 10, &HashSet::new());
        assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        let r = rank_top_k(&ids, &[1.0, 1.0, 1.0], 2, &HashSet::new());
        assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let ex: HashSet<String> = ["a".to_string()].into();
        let r = rank_top_k(&ids, &[1.0, 5.0, 2.0], 3, &ex);
        assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["b", "c"]);
    }

    #[test]
    fn pure_mode_ranks_bucket_mates_first() {
        // a and d share every bucket, b shares one level with a, c none
        let codes = CodesMatrix::from_parts(
            2,
            4,
            ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
            vec![0, 0, 0, 1, 2, 2, 0, 0],
        )
        .unwrap();
        let ch = [Channel::new("item", codes.clone())];
        let layout = InputLayout::new(Task::Session, &ch, 0).unwrap();
        let mut input = encode_item(&codes, "a").unwrap().normalized(Norm::L2).into_values();
        input.extend(vec![0.0; 8]);
        let r = recommend(
            Predictor::Pure,
            &input,
            &layout,
            &codes,
            10,
            Aggregator::Gmean,
            &HashSet::new(),
        )
        .unwrap();
        assert_eq!(r[0], ("a".to_string(), 1.0));
        assert_eq!(r[1], ("d".to_string(), 1.0));
        assert_eq!(r[2].1, 0.0);
        assert_eq!(r[3].1, 0.0);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let codes = CodesMatrix::from_parts(1, 2, vec!["a".into()], vec![0]).unwrap();
        let layout = InputLayout::new(Task::Topk, &[Channel::new("x", codes.clone())], 0).unwrap();
        assert!(recommend(
            Predictor::Pure,
            &[1.0],
            &layout,
            &codes,
            1,
            Aggregator::Gmean,
            &HashSet::new()
        )
        .is_err());
    }
}
