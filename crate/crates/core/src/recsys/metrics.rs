use std::collections::HashSet;
use std::io::Write;

use serde::Serialize;

use crate::{Error, Result};

/// One session prediction point: the ranking, the immediate next item, and
/// the distinct items of the hidden remainder (including the next item).
#[derive(Debug, Clone, PartialEq)]
pub struct SessionPoint {
    pub ranked: Vec<String>,
    pub next: String,
    pub hidden: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopkPoint {
    pub ranked: Vec<String>,
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SessionMetrics {
    pub k: usize,
    pub mrr: f64,
    pub hr: f64,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopkMetrics {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub points: usize,
}

/// `[mrr, hr, precision, recall, map]` for one point.
fn session_point(p: &SessionPoint, k: usize) -> [f64; 5] {
    let hidden: HashSet<&str> = p.hidden.iter().map(String::as_str).collect();
    let top = &p.ranked[..p.ranked.len().min(k)];
    let mut out = [0.0; 5];
    if let Some(r) = top.iter().position(|i| *i == p.next) {
        out[0] = 1.0 / (r + 1) as f64;
        out[1] = 1.0;
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (i, item) in top.iter().enumerate() {
        if hidden.contains(item.as_str()) {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    if !hidden.is_empty() {
        out[2] = hits as f64 / k as f64;
        out[3] = hits as f64 / hidden.len() as f64;
        out[4] = ap / hidden.len() as f64;
    }
    out
}

/// MRR, HR, precision, recall and MAP at `k`, averaged over points. MRR/HR
/// look at the next item; P/R/MAP at the hidden remainder.
pub fn evaluate_session(points: &[SessionPoint], k: usize) -> Result<SessionMetrics> {
    if points.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let per = crate::par::map(points, |p| session_point(p, k));
    let mut sum = [0.0; 5];
    for v in &per {
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let n = points.len() as f64;
    Ok(SessionMetrics {
        k,
        mrr: sum[0] / n,
        hr: sum[1] / n,
        precision: sum[2] / n,
        recall: sum[3] / n,
        map: sum[4] / n,
        points: points.len(),
    })
}

fn dcg_discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// `(recall, ndcg)` at `k` for one point.
pub fn topk_point(ranked: &[String], held_out: &[String], k: usize) -> (f64, f64) {
    let held: HashSet<&str> = held_out.iter().map(String::as_str).collect();
    let top = &ranked[..ranked.len().min(k)];
    let mut hits = 0;
    let mut dcg = 0.0;
    for (i, item) in top.iter().enumerate() {
        if held.contains(item.as_str()) {
            hits += 1;
            dcg += dcg_discount(i);
        }
    }
    let idcg: f64 = (0..k.min(held.len())).map(dcg_discount).sum();
    (hits as f64 / held.len() as f64, dcg / idcg)
}

/// Recall@K and NDCG@K for every `K` in `ks`, averaged over points.
pub fn evaluate_topk(points: &[TopkPoint], ks: &[usize]) -> Result<TopkMetrics> {
    if points.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if ks.contains(&0) {
        return Err(Error::invalid("k must be >= 1"));
    }
    if points.iter().any(|p| p.held_out.is_empty()) {
        return Err(Error::Empty("held-out set"));
    }
    let per = crate::par::map(points, |p| {
        ks.iter()
            .map(|&k| topk_point(&p.ranked, &p.held_out, k))
            .collect::<Vec<_>>()
    });
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    for v in &per {
        for (j, (r, g)) in v.iter().enumerate() {
            recall[j] += r;
            ndcg[j] += g;
        }
    }
    let n = points.len() as f64;
    recall.iter_mut().chain(ndcg.iter_mut()).for_each(|x| *x /= n);
    Ok(TopkMetrics {
        ks: ks.to_vec(),
        recall,
        ndcg,
        points: points.len(),
    })
}

/// Flat `(metric, k, value)` row used for CSV output and tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub method: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

impl SessionMetrics {
    pub fn rows(&self, method: &str) -> Vec<MetricRow> {
        [
            ("MRR", self.mrr),
            ("HR", self.hr),
            ("P", self.precision),
            ("R", self.recall),
            ("MAP", self.map),
        ]
        .into_iter()
        .map(|(m, v)| MetricRow {
            method: method.to_string(),
            metric: m.to_string(),
            k: self.k,
            value: v,
        })
        .collect()
    }
}

impl TopkMetrics {
    pub fn rows(&self, method: &str) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for (name, vals) in [("Recall", &self.recall), ("NDCG", &self.ndcg)] {
            for (&k, &v) in self.ks.iter().zip(vals) {
                out.push(MetricRow {
                    method: method.to_string(),
                    metric: name.to_string(),
                    k,
                    value: v,
                });
            }
        }
        out
    }
}

/// CSV `method,metric,k,value`.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Fixed-width text table, one line per row.
pub fn format_table(rows: &[MetricRow]) -> String {
    let names: Vec<String> = rows.iter().map(|r| format!("{}@{}", r.metric, r.k)).collect();
    let mw = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let nw = names.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut s = format!("{:<mw$}  {:<nw$}  {:>8}\n", "method", "metric", "value");
    for (r, name) in rows.iter().zip(&names) {
        s.push_str(&format!("{:<mw$}  {:<nw$}  {:>8.5}\n", r.method, name, r.value));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn next_item_at_rank_three() {
        let p = SessionPoint {
            ranked: s(&["x", "y", "n", "z"]),
            next: "n".into(),
            hidden: s(&["n"]),
        };
        let m = evaluate_session(&[p], 20).unwrap();
        assert_eq!(m.mrr, 1.0 / 3.0);
        assert_eq!(m.hr, 1.0);
    }

    #[test]
    fn hidden_four_two_retrieved() {
        let mut ranked: Vec<String> = (0..20).map(|i| format!("i{i}")).collect();
        ranked[4] = "h1".into();
        ranked[9] = "h2".into();
        let p = SessionPoint {
            ranked,
            next: "h1".into(),
            hidden: s(&["h1", "h2", "h3", "h4"]),
        };
        let m = evaluate_session(&[p], 20).unwrap();
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.1);
        assert_eq!(m.map, (1.0 / 5.0 + 2.0 / 10.0) / 4.0);
    }

    #[test]
    fn ndcg_closed_forms() {
        let held = s(&["a", "b"]);
        assert_eq!(topk_point(&s(&["a", "b", "c"]), &held, 5).1, 1.0);
        let (_, g) = topk_point(&s(&["x", "a"]), &s(&["a"]), 5);
        assert!((g - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((g - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(evaluate_session(&[], 20).is_err());
        assert!(evaluate_topk(&[], &[1]).is_err());
        let p = TopkPoint {
            ranked: s(&["a"]),
            held_out: vec![],
        };
        assert!(evaluate_topk(&[p], &[1]).is_err());
    }

    #[test]
    fn rows_and_table() {
        let m = TopkMetrics {
            ks: vec![1, 5],
            recall: vec![0.1, 0.2],
            ndcg: vec![0.3, 0.4],
            points: 1,
        };
        let rows = m.rows("emde");
        assert_eq!(rows.len(), 4);
        let mut out = Vec::new();
        write_metrics_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("method,metric,k,value\n"));
        assert!(format_table(&rows).contains("NDCG@5"));
    }
}
