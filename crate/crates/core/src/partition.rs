//! Density-dependent LSH partitionings and per-item region codes.
//!
//! A [`Partitioning`] holds `N` independent depth levels of `K` hyperplanes.
//! Each hyperplane has a unit direction `r` and a bias `b` drawn from the
//! empirical quantile function of the data's projections onto `r`, so every
//! cut lands inside the data. The `K` sign bits of `v·r - b` form a `K`-bit
//! region index per depth level, reduced modulo the sketch width `W`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::format::{Reader, Writer};
use crate::keyed::key_seed;
use crate::{par, EmbeddingTable, Error, Result};

/// Quantile levels are drawn from `[QUANTILE_LO, QUANTILE_HI]`.
pub const QUANTILE_LO: f64 = 0.05;
pub const QUANTILE_HI: f64 = 0.95;

/// Upper bound on `K` so the default width `2^K` fits a `u32` code.
pub const MAX_BITS: usize = 31;

const PART_MAGIC: &[u8; 8] = b"EMDEPART";
const PART_VERSION: u32 = 1;
const CODES_HEADER: &str = "# emde-codes v1";

/// Anything that maps a vector to one region index per depth level.
///
/// DLSH is the only implementation here; quantization-based partitioners can
/// slot in behind the same interface.
pub trait Partitioner: Sync {
    fn dim(&self) -> usize;
    fn depth(&self) -> usize;
    fn width(&self) -> usize;
    /// Writes `depth()` codes, each in `[0, width())`, into `out`.
    fn codes_into(&self, v: &[f64], out: &mut [u32]);

    fn codes_for(&self, v: &[f64]) -> Vec<u32> {
        let mut out = vec![0; self.depth()];
        self.codes_into(v, &mut out);
        out
    }
}

/// `N × K` hyperplanes fitted to one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Partitioning {
    modality: String,
    dim: usize,
    depth: usize,
    bits: usize,
    width: usize,
    seed: u64,
    /// `depth × bits × dim`, row-major.
    directions: Vec<f64>,
    /// `depth × bits`.
    biases: Vec<f64>,
}

/// Linear-interpolation empirical quantile of an ascending sample
/// (`h = u·(n-1)`, interpolate between the neighbouring order statistics).
pub fn empirical_quantile(sorted: &[f64], u: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = u.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Keeps at least one projection strictly above the bias when the sample is
/// not constant. Only reachable with heavy ties at the maximum.
fn keep_upper_side(sorted: &[f64], b: f64) -> f64 {
    let max = sorted[sorted.len() - 1];
    if b < max {
        return b;
    }
    match sorted.iter().rev().find(|&&x| x < max) {
        Some(&below) => below + (max - below) / 2.0,
        None => b,
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits `depth` independent partitionings of `bits` hyperplanes each.
/// Width defaults to `2^bits`; see [`Partitioning::with_width`].
pub fn fit_dlsh(table: &EmbeddingTable, depth: usize, bits: usize, seed: u64) -> Result<Partitioning> {
    if depth == 0 || bits == 0 {
        return Err(Error::invalid("depth and bits must be >= 1"));
    }
    if bits > MAX_BITS {
        return Err(Error::invalid(format!("bits must be <= {MAX_BITS}")));
    }
    if table.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 items to fit quantile biases, table {:?} has {}",
            table.modality(),
            table.len()
        )));
    }
    let dim = table.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut directions = Vec::with_capacity(depth * bits * dim);
    let mut biases = Vec::with_capacity(depth * bits);
    for _ in 0..depth * bits {
        let r = unit_gaussian(&mut rng, dim);
        let u: f64 = rng.random();
        let u = QUANTILE_LO + u * (QUANTILE_HI - QUANTILE_LO);
        let mut proj = par::map_range(table.len(), |i| dot(table.row(i), &r));
        proj.sort_by(f64::total_cmp);
        biases.push(keep_upper_side(&proj, empirical_quantile(&proj, u)));
        directions.extend(r);
    }
    Ok(Partitioning {
        modality: table.modality().to_string(),
        dim,
        depth,
        bits,
        width: 1usize << bits,
        seed,
        directions,
        biases,
    })
}

impl Partitioning {
    /// Assembles a partitioning from explicit hyperplanes. Directions are
    /// normalized to unit length.
    pub fn from_hyperplanes(
        modality: impl Into<String>,
        depth: usize,
        bits: usize,
        width: usize,
        directions: Vec<Vec<f64>>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if depth == 0 || bits == 0 || width == 0 || bits > MAX_BITS || width > u32::MAX as usize {
            return Err(Error::invalid("depth, bits and width must be >= 1 (bits <= 31)"));
        }
        if directions.len() != depth * bits || biases.len() != depth * bits {
            return Err(Error::shape(format!(
                "expected {} hyperplanes, got {} directions and {} biases",
                depth * bits,
                directions.len(),
                biases.len()
            )));
        }
        let dim = directions[0].len();
        let mut flat = Vec::with_capacity(depth * bits * dim);
        for mut r in directions {
            if r.len() != dim || dim == 0 {
                return Err(Error::shape("directions must share one positive dimension"));
            }
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::invalid("direction must be non-zero and finite"));
            }
            r.iter_mut().for_each(|x| *x /= n);
            flat.extend(r);
        }
        Ok(Partitioning {
            modality: modality.into(),
            dim,
            depth,
            bits,
            width,
            seed: 0,
            directions: flat,
            biases,
        })
    }

    /// Decouples the sketch width from `2^bits`; codes reduce modulo `width`.
    pub fn with_width(mut self, width: usize) -> Result<Self> {
        if width == 0 || width > u32::MAX as usize {
            return Err(Error::invalid("width must be in [1, 2^32)"));
        }
        self.width = width;
        Ok(self)
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit direction of hash `bit` at depth level `level`.
    pub fn direction(&self, level: usize, bit: usize) -> &[f64] {
        let start = (level * self.bits + bit) * self.dim;
        &self.directions[start..start + self.dim]
    }

    pub fn bias(&self, level: usize, bit: usize) -> f64 {
        self.biases[level * self.bits + bit]
    }

    /// Raw `K`-bit region index at one depth level, before width reduction.
    /// Ties (`v·r == b`) hash to 0.
    pub fn region(&self, v: &[f64], level: usize) -> u64 {
        (0..self.bits).fold(0u64, |code, i| {
            if dot(v, self.direction(level, i)) - self.bias(level, i) > 0.0 {
                code | (1u64 << i)
            } else {
                code
            }
        })
    }

    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = Writer::new(w, PART_MAGIC, PART_VERSION)?;
        w.str(&self.modality)?;
        for x in [self.dim, self.depth, self.bits, self.width] {
            w.usize(x)?;
        }
        w.u64(self.seed)?;
        w.f64s(&self.directions)?;
        w.f64s(&self.biases)?;
        w.finish().map(|_| ())
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self> {
        const WHAT: &str = "partitioning";
        let (mut r, version) = Reader::open(r, PART_MAGIC, WHAT)?;
        Reader::<R>::expect_version(WHAT, version, PART_VERSION)?;
        let modality = r.str()?;
        let dim = r.usize()?;
        let depth = r.usize()?;
        let bits = r.usize()?;
        let width = r.usize()?;
        let seed = r.u64()?;
        let directions = r.f64s_exact(depth * bits * dim)?;
        let biases = r.f64s_exact(depth * bits)?;
        r.end()?;
        if dim == 0 || depth == 0 || bits == 0 || bits > MAX_BITS || width == 0 || width > u32::MAX as usize {
            return Err(Error::Format {
                what: WHAT,
                message: "zero-sized shape".into(),
            });
        }
        Ok(Partitioning {
            modality,
            dim,
            depth,
            bits,
            width,
            seed,
            directions,
            biases,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

impl Partitioner for Partitioning {
    fn dim(&self) -> usize {
        self.dim
    }

    fn depth(&self) -> usize {
        self.depth
    }

    fn width(&self) -> usize {
        self.width
    }

    fn codes_into(&self, v: &[f64], out: &mut [u32]) {
        debug_assert_eq!(v.len(), self.dim);
        for (level, slot) in out.iter_mut().enumerate().take(self.depth) {
            *slot = (self.region(v, level) % self.width as u64) as u32;
        }
    }
}

/// Per-item region indices: `n_items × depth`, every entry in `[0, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesMatrix {
    depth: usize,
    width: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    codes: Vec<u32>,
}

/// Hashes every item of `table` through `p`. Rows follow the table order.
pub fn assign_codes<P: Partitioner + ?Sized>(p: &P, table: &EmbeddingTable) -> Result<CodesMatrix> {
    if p.dim() != table.dim() {
        return Err(Error::shape(format!(
            "partitioning dim {} != table dim {}",
            p.dim(),
            table.dim()
        )));
    }
    let depth = p.depth();
    let mut codes = vec![0u32; table.len() * depth];
    const ROWS_PER_TASK: usize = 64;
    par::for_each_chunk_mut(&mut codes, ROWS_PER_TASK * depth, |chunk_idx, out| {
        for (j, row) in out.chunks_mut(depth).enumerate() {
            p.codes_into(table.row(chunk_idx * ROWS_PER_TASK + j), row);
        }
    });
    CodesMatrix::from_parts(depth, p.width(), table.ids().to_vec(), codes)
}

/// Geometry-blind codes: each `(item, level)` entry is uniform on `[0, width)`,
/// drawn from a stream keyed by `(seed, item_id, level)`. A row does not depend
/// on which other items are present or their order.
pub fn fit_random_codes<S: AsRef<str>>(item_ids: &[S], depth: usize, width: usize, seed: u64) -> Result<CodesMatrix> {
    if depth == 0 || width == 0 || width > u32::MAX as usize {
        return Err(Error::invalid("depth and width must be >= 1"));
    }
    let ids: Vec<String> = item_ids.iter().map(|s| s.as_ref().to_string()).collect();
    let mut seen = HashSet::with_capacity(ids.len());
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateItem {
                id: id.clone(),
                line: None,
            });
        }
    }
    let mut codes = Vec::with_capacity(ids.len() * depth);
    for id in &ids {
        for level in 0..depth {
            let mut rng = ChaCha8Rng::seed_from_u64(key_seed(seed, id, level as u64));
            codes.push(rng.random_range(0..width as u32));
        }
    }
    CodesMatrix::from_parts(depth, width, ids, codes)
}

impl CodesMatrix {
    pub fn from_parts(depth: usize, width: usize, ids: Vec<String>, codes: Vec<u32>) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::invalid("depth and width must be >= 1"));
        }
        if codes.len() != ids.len() * depth {
            return Err(Error::shape(format!(
                "{} codes for {} items at depth {depth}",
                codes.len(),
                ids.len()
            )));
        }
        if let Some(c) = codes.iter().find(|&&c| c as usize >= width) {
            return Err(Error::invalid(format!("code {c} outside [0, {width})")));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateItem {
                    id: id.clone(),
                    line: None,
                });
            }
        }
        Ok(CodesMatrix {
            depth,
            width,
            ids,
            index,
            codes,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flat sketch length `depth × width`.
    pub fn sketch_len(&self) -> usize {
        self.depth * self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.codes[i * self.depth..(i + 1) * self.depth]
    }

    pub fn get(&self, id: &str) -> Option<&[u32]> {
        self.position(id).map(|i| self.row(i))
    }

    /// Restricts the matrix to `ids` (in that order), skipping unknown ids.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> CodesMatrix {
        let mut keep_ids = Vec::new();
        let mut codes = Vec::new();
        for id in ids {
            if let Some(row) = self.get(id.as_ref()) {
                keep_ids.push(id.as_ref().to_string());
                codes.extend_from_slice(row);
            }
        }
        CodesMatrix::from_parts(self.depth, self.width, keep_ids, codes).expect("subset of a valid matrix")
    }

    /// Text form: a `# emde-codes v1 depth=N width=W` header, then
    /// `<item_id> <c1> ... <cN>` per item.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CODES_HEADER} depth={} width={}", self.depth, self.width)?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_all(id.as_bytes())?;
            for c in self.row(i) {
                write!(w, " {c}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let (depth, width) = parse_codes_header(&header).ok_or_else(|| Error::Format {
            what: "codes",
            message: format!("missing or stale header {header:?}, expected \"{CODES_HEADER} depth=N width=W\""),
        })?;
        let mut ids = Vec::new();
        let mut codes = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let lineno = n + 2;
            let mut fields = line.split_whitespace();
            let Some(id) = fields.next() else { continue };
            let row: Vec<u32> = fields
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("bad code {t:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != depth {
                return Err(Error::DimensionMismatch {
                    line: lineno,
                    expected: depth,
                    found: row.len(),
                });
            }
            ids.push(id.to_string());
            codes.extend(row);
        }
        CodesMatrix::from_parts(depth, width, ids, codes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

fn parse_codes_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix(CODES_HEADER)?;
    let mut depth = None;
    let mut width = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=')? {
            ("depth", v) => depth = v.parse().ok(),
            ("width", v) => width = v.parse().ok(),
            _ => return None,
        }
    }
    Some((depth?, width?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[f64])]) -> EmbeddingTable {
        EmbeddingTable::from_rows("m", rows.iter().map(|(id, v)| (*id, v.to_vec()))).unwrap()
    }

    #[test]
    fn quantile_matches_sort_oracle() {
        // projections {-1, 0, 1, 2}, u = 0.5 → h = 1.5 → halfway between 0 and 1
        assert_eq!(empirical_quantile(&[-1.0, 0.0, 1.0, 2.0], 0.5), 0.5);
        assert_eq!(empirical_quantile(&[-1.0, 0.0, 1.0, 2.0], 0.0), -1.0);
        assert_eq!(empirical_quantile(&[-1.0, 0.0, 1.0, 2.0], 1.0), 2.0);
        assert_eq!(empirical_quantile(&[3.0], 0.7), 3.0);
    }

    #[test]
    fn tied_maximum_keeps_a_point_above_the_cut() {
        let sorted = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let b = keep_upper_side(&sorted, empirical_quantile(&sorted, 0.95));
        assert!((0.0..1.0).contains(&b));
        assert_eq!(keep_upper_side(&[2.0, 2.0], 2.0), 2.0);
    }

    #[test]
    fn fit_is_deterministic_and_unit_norm() {
        let t = table(&[
            ("a", &[1.0, 0.0, 0.5]),
            ("b", &[0.0, 1.0, -1.0]),
            ("c", &[2.0, 2.0, 0.1]),
        ]);
        let p1 = fit_dlsh(&t, 4, 3, 11).unwrap();
        let p2 = fit_dlsh(&t, 4, 3, 11).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, fit_dlsh(&t, 4, 3, 12).unwrap());
        assert_eq!(p1.width(), 8);
        for l in 0..4 {
            for b in 0..3 {
                let n: f64 = p1.direction(l, b).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn every_cut_has_points_on_both_sides() {
        let rows: Vec<(String, Vec<f64>)> = (0..40)
            .map(|i| (format!("i{i}"), vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]))
            .collect();
        let t = EmbeddingTable::from_rows("m", rows).unwrap();
        let p = fit_dlsh(&t, 10, 4, 5).unwrap();
        for l in 0..10 {
            for b in 0..4 {
                let above = t.rows().filter(|v| dot(v, p.direction(l, b)) > p.bias(l, b)).count();
                assert!(above > 0 && above < t.len(), "level {l} bit {b}: {above} above");
            }
        }
    }

    #[test]
    fn fit_rejects_tiny_tables_and_bad_args() {
        let one = table(&[("a", &[1.0])]);
        assert!(matches!(fit_dlsh(&one, 1, 1, 0), Err(Error::Degenerate(_))));
        let two = table(&[("a", &[1.0]), ("b", &[2.0])]);
        assert!(fit_dlsh(&two, 0, 1, 0).is_err());
        assert!(fit_dlsh(&two, 1, 0, 0).is_err());
        assert!(fit_dlsh(&two, 1, 64, 0).is_err());
    }

    #[test]
    fn sign_bits_pack_little_endian() {
        // K=2: first hash positive, second negative → bits (1,0) → code 1
        let p =
            Partitioning::from_hyperplanes("m", 1, 2, 4, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(p.codes_for(&[1.0, -1.0]), vec![1]);
        assert_eq!(p.codes_for(&[-1.0, 1.0]), vec![2]);
        assert_eq!(p.codes_for(&[1.0, 1.0]), vec![3]);
        // ties go to bit 0
        assert_eq!(p.codes_for(&[0.0, 0.0]), vec![0]);
    }

    #[test]
    fn reproduces_zero_three_six_row() {
        // N=3, K=3 over a 1-D manifold. Each level's three thresholds are
        // placed so that x = 1 produces sign patterns (−,−,−), (+,+,−), (−,+,+).
        let dirs = |signs: [f64; 3]| signs.iter().map(|s| vec![*s]).collect::<Vec<_>>();
        let mut directions = dirs([1.0, 1.0, 1.0]);
        directions.extend(dirs([1.0, 1.0, 1.0]));
        directions.extend(dirs([1.0, 1.0, 1.0]));
        let biases = vec![
            2.0, 2.0, 2.0, // 1-2<0 on all three: 0b000 = 0
            0.0, 0.0, 2.0, // bits 0,1 set: 0b011 = 3
            2.0, 0.0, 0.0, // bits 1,2 set: 0b110 = 6
        ];
        let p = Partitioning::from_hyperplanes("m", 3, 3, 8, directions, biases).unwrap();
        let t = table(&[("adidas-sleek-shoes", &[1.0])]);
        let codes = assign_codes(&p, &t).unwrap();
        assert_eq!(codes.get("adidas-sleek-shoes").unwrap(), &[0, 3, 6]);
    }

    #[test]
    fn identical_vectors_share_codes_and_width_reduces() {
        let t = table(&[
            ("a", &[0.3, 0.4]),
            ("b", &[0.3, 0.4]),
            ("c", &[-1.0, 2.0]),
            ("d", &[5.0, 0.0]),
        ]);
        let p = fit_dlsh(&t, 6, 5, 2).unwrap().with_width(7).unwrap();
        let codes = assign_codes(&p, &t).unwrap();
        assert_eq!(codes.get("a"), codes.get("b"));
        assert!(codes
            .ids()
            .iter()
            .all(|id| codes.get(id).unwrap().iter().all(|&c| c < 7)));
        for (i, v) in t.rows().enumerate() {
            let expect: Vec<u32> = (0..6).map(|l| (p.region(v, l) % 7) as u32).collect();
            assert_eq!(codes.row(i), expect.as_slice());
        }
    }

    #[test]
    fn assign_rejects_dimension_mismatch() {
        let t = table(&[("a", &[0.3, 0.4]), ("b", &[1.0, 0.0])]);
        let p = fit_dlsh(&t, 2, 2, 0).unwrap();
        let t3 = table(&[("a", &[0.3, 0.4, 1.0])]);
        assert!(matches!(assign_codes(&p, &t3), Err(Error::Shape(_))));
    }

    #[test]
    fn random_codes_are_order_independent() {
        let a = fit_random_codes(&["x", "y", "z"], 5, 100, 3).unwrap();
        let b = fit_random_codes(&["z", "x"], 5, 100, 3).unwrap();
        assert_eq!(a.get("x"), b.get("x"));
        assert_eq!(a.get("z"), b.get("z"));
        let ones = fit_random_codes(&["x", "y"], 1, 1, 3).unwrap();
        assert_eq!(ones.row(0), &[0]);
        assert_eq!(ones.row(1), &[0]);
        assert!(matches!(
            fit_random_codes(&["x", "x"], 1, 2, 0),
            Err(Error::DuplicateItem { .. })
        ));
    }

    #[test]
    fn random_codes_fill_buckets_evenly() {
        let ids: Vec<String> = (0..10_000).map(|i| format!("item-{i}")).collect();
        let codes = fit_random_codes(&ids, 1, 128, 42).unwrap();
        let mut counts = [0usize; 128];
        for i in 0..codes.len() {
            counts[codes.row(i)[0] as usize] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max / min < 2.0, "occupancy ratio {}", max / min);
        // chi-square against uniform, 127 dof: 99.9th percentile ≈ 181.99
        let expect = 10_000.0 / 128.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 181.99, "chi2 {chi2}");
    }

    #[test]
    fn codes_text_round_trip_and_header_check() {
        let codes = fit_random_codes(&["a", "b"], 3, 9, 1).unwrap();
        let mut buf = Vec::new();
        codes.write_to(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# emde-codes v1 depth=3 width=9\na "));
        assert_eq!(CodesMatrix::read_from(buf.as_slice()).unwrap(), codes);
        assert!(CodesMatrix::read_from("a 1 2 3\n".as_bytes()).is_err());
        assert!(CodesMatrix::read_from("# emde-codes v1 depth=2 width=4\na 1\n".as_bytes()).is_err());
        assert!(CodesMatrix::read_from("# emde-codes v1 depth=1 width=4\na 4\n".as_bytes()).is_err());
    }

    #[test]
    fn partitioning_binary_round_trip() {
        let t = table(&[("a", &[0.1, 0.2]), ("b", &[1.0 / 3.0, -7.0]), ("c", &[2.0, 0.0])]);
        let p = fit_dlsh(&t, 3, 4, 99).unwrap().with_width(10).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = Partitioning::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        for (x, y) in p.directions.iter().zip(&back.directions) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(Partitioning::read_from(&buf[..buf.len() - 3]).is_err());
    }
}
