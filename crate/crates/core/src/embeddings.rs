//! Per-modality item embedding tables.
//!
//! Text format, one item per line:
//!
//! ```text
//! <item_id> <f1> <f2> ... <fd>
//! ```
//!
//! Fields are whitespace separated. Floats are written with Rust's shortest
//! round-trip formatting, so `load(save(t)) == t` bit for bit. Blank lines are
//! ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::keyed::key_seed;
use crate::{Error, Result};

/// Item id → dense vector, for one modality. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    modality: String,
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from `(id, vector)` rows, validating every invariant.
    pub fn from_rows<I, S>(modality: impl Into<String>, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut b = TableBuilder::new(modality.into());
        for (i, (id, v)) in rows.into_iter().enumerate() {
            b.push(i + 1, id.into(), &v)?;
        }
        b.finish()
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Item ids in table order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    /// Vector of the `i`-th item in table order.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Row-major `len × dim` storage.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, v) in self.ids.iter().zip(self.rows()) {
            w.write_all(id.as_bytes())?;
            for x in v {
                write!(w, " {x}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: BufRead>(reader: R, modality: impl Into<String>) -> Result<Self> {
        let mut b = TableBuilder::new(modality.into());
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            let mut fields = line.split_whitespace();
            let Some(id) = fields.next() else { continue };
            let mut v = Vec::with_capacity(b.dim.unwrap_or(0));
            for tok in fields {
                let x: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("not a number: {tok:?}"),
                })?;
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        line: lineno,
                        value: tok.to_string(),
                    });
                }
                v.push(x);
            }
            b.push(lineno, id.to_string(), &v)?;
        }
        b.finish()
    }
}

/// Loads and validates an embedding file; the dimension comes from the first row.
pub fn load_embeddings(path: impl AsRef<Path>, modality: &str) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::read_from(BufReader::new(f), modality)
}

struct TableBuilder {
    modality: String,
    dim: Option<usize>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl TableBuilder {
    fn new(modality: String) -> Self {
        TableBuilder {
            modality,
            dim: None,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, line: usize, id: String, v: &[f64]) -> Result<()> {
        let dim = *self.dim.get_or_insert(v.len());
        if dim == 0 {
            return Err(Error::Parse {
                line,
                message: format!("item {id:?} has no vector components"),
            });
        }
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                line,
                expected: dim,
                found: v.len(),
            });
        }
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                line,
                value: bad.to_string(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateItem { id, line: Some(line) });
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    fn finish(self) -> Result<EmbeddingTable> {
        match self.dim {
            Some(dim) if !self.ids.is_empty() => Ok(EmbeddingTable {
                modality: self.modality,
                dim,
                ids: self.ids,
                index: self.index,
                data: self.data,
            }),
            _ => Err(Error::Empty("embedding table has no rows")),
        }
    }
}

fn normalize_l2(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
        true
    } else {
        false
    }
}

/// Seeded random unit vector keyed by `(seed, id)`, independent of item order.
fn keyed_unit_vector(seed: u64, id: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(key_seed(seed, id, 0));
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if normalize_l2(&mut v) {
            return v;
        }
    }
}

/// Test-grade stand-in for an external graph embedder.
///
/// Every item starts as a seeded random unit vector. Each iteration replaces
/// an item's vector with the L2-normalized mean of the vectors of all items
/// sharing at least one context with it (itself included). Items are emitted
/// in lexicographic id order.
pub fn synth_propagation_embedder(
    interactions: &[(String, String)],
    dim: usize,
    iterations: usize,
    seed: u64,
    modality: &str,
) -> Result<EmbeddingTable> {
    if interactions.is_empty() {
        return Err(Error::Empty("interaction list"));
    }
    if dim == 0 {
        return Err(Error::invalid("embedding dim must be >= 1"));
    }

    let mut contexts: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut items: BTreeSet<&str> = BTreeSet::new();
    for (ctx, item) in interactions {
        contexts.entry(ctx).or_default().insert(item);
        items.insert(item);
    }
    let ids: Vec<&str> = items.into_iter().collect();
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    let mut neighbors: Vec<BTreeSet<usize>> = (0..ids.len()).map(|i| BTreeSet::from([i])).collect();
    for members in contexts.values() {
        let idx: Vec<usize> = members.iter().map(|m| pos[m]).collect();
        for &a in &idx {
            neighbors[a].extend(idx.iter().copied());
        }
    }

    let mut vecs: Vec<Vec<f64>> = ids.iter().map(|id| keyed_unit_vector(seed, id, dim)).collect();
    for _ in 0..iterations {
        vecs = (0..ids.len())
            .map(|i| {
                let mut mean = vec![0.0; dim];
                for &j in &neighbors[i] {
                    mean.iter_mut().zip(&vecs[j]).for_each(|(m, x)| *m += x);
                }
                if normalize_l2(&mut mean) {
                    mean
                } else {
                    vecs[i].clone()
                }
            })
            .collect();
    }

    EmbeddingTable::from_rows(modality, ids.into_iter().zip(vecs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<EmbeddingTable> {
        EmbeddingTable::read_from(s.as_bytes(), "m")
    }

    fn pairs(p: &[(&str, &str)]) -> Vec<(String, String)> {
        p.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn parses_two_rows() {
        let t = parse("a 1.0 0.0\nb 0.0 1.0\n").unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("b").unwrap(), &[0.0, 1.0]);
        assert_eq!(t.modality(), "m");
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        match parse("a 1.0\nb 0.0 1.0\n") {
            Err(Error::DimensionMismatch { line, expected, found }) => {
                assert_eq!((line, expected, found), (2, 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse(""), Err(Error::Empty(_))));
        assert!(matches!(parse("\n  \n"), Err(Error::Empty(_))));
    }

    #[test]
    fn non_finite_and_duplicates_are_rejected() {
        assert!(matches!(parse("a 1.0\nb NaN\n"), Err(Error::NonFinite { line: 2, .. })));
        assert!(matches!(parse("a inf\n"), Err(Error::NonFinite { line: 1, .. })));
        assert!(matches!(
            parse("a 1\nb 2\na 3\n"),
            Err(Error::DuplicateItem { line: Some(3), .. })
        ));
        assert!(matches!(parse("a x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn save_load_is_bit_exact() {
        let t = EmbeddingTable::from_rows(
            "m",
            vec![
                ("x", vec![0.1, -1e-300, 1.0 / 3.0]),
                ("y", vec![f64::MAX, f64::MIN_POSITIVE, -0.0]),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = EmbeddingTable::read_from(buf.as_slice(), "m").unwrap();
        assert_eq!(t.ids(), back.ids());
        for (a, b) in t.as_flat().iter().zip(back.as_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn embedder_zero_iterations_is_seeded_identity() {
        let inter = pairs(&[("s1", "a"), ("s1", "b"), ("s2", "c")]);
        let t = synth_propagation_embedder(&inter, 4, 0, 9, "m").unwrap();
        assert_eq!(t.get("a").unwrap(), keyed_unit_vector(9, "a", 4).as_slice());
        // keyed: reordering the interactions does not change any vector
        let mut rev = inter.clone();
        rev.reverse();
        let t2 = synth_propagation_embedder(&rev, 4, 0, 9, "m").unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn embedder_disjoint_cliques() {
        let inter = pairs(&[("s1", "a"), ("s1", "b"), ("s2", "c"), ("s2", "d")]);
        let t = synth_propagation_embedder(&inter, 8, 3, 1, "m").unwrap();
        let ab = cos(t.get("a").unwrap(), t.get("b").unwrap());
        let ac = cos(t.get("a").unwrap(), t.get("c").unwrap());
        assert!(ab > ac, "cos(a,b)={ab} cos(a,c)={ac}");
        for v in t.rows() {
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embedder_single_item_keeps_its_vector() {
        let inter = pairs(&[("s", "only")]);
        let t = synth_propagation_embedder(&inter, 5, 4, 3, "m").unwrap();
        let v0 = keyed_unit_vector(3, "only", 5);
        for (a, b) in t.row(0).iter().zip(&v0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedder_rejects_empty() {
        assert!(matches!(
            synth_propagation_embedder(&[], 4, 1, 0, "m"),
            Err(Error::Empty(_))
        ));
    }
}
