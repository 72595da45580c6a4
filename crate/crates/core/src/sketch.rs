//! The additive sketch: `depth` histograms of `width` buckets, stored
//! depth-major (bucket `(d, c)` lives at `d * width + c`).

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::format::{Reader, Writer};
use crate::{par, CodesMatrix, Error, Result};

const SKETCH_MAGIC: &[u8; 8] = b"EMDESKT1";
const BUNDLE_MAGIC: &[u8; 8] = b"EMDESKB1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    depth: usize,
    width: usize,
    values: Vec<f64>,
}

/// Width-wise normalization applied to every depth slice independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

/// How the `depth` per-level estimates of one item are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Geometric mean; any zero estimate gives 0.
    #[default]
    Gmean,
    /// Count-min style minimum.
    Min,
    /// Arithmetic mean.
    Mean,
    /// Harmonic mean; any zero estimate gives 0.
    Hmean,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [Aggregator::Gmean, Aggregator::Min, Aggregator::Mean, Aggregator::Hmean];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Gmean => "gmean",
            Aggregator::Min => "min",
            Aggregator::Mean => "mean",
            Aggregator::Hmean => "hmean",
        }
    }

    /// Reduces per-level estimates. Expects non-negative, non-empty input;
    /// a single value is returned unchanged by every aggregator.
    pub fn reduce(self, values: &[f64]) -> f64 {
        match values {
            [] => 0.0,
            [x] => *x,
            _ => {
                let n = values.len() as f64;
                match self {
                    Aggregator::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
                    Aggregator::Mean => values.iter().sum::<f64>() / n,
                    Aggregator::Gmean => {
                        if values.iter().any(|&v| v <= 0.0) {
                            0.0
                        } else {
                            (values.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
                        }
                    }
                    Aggregator::Hmean => {
                        if values.iter().any(|&v| v <= 0.0) {
                            0.0
                        } else {
                            n / values.iter().map(|v| v.recip()).sum::<f64>()
                        }
                    }
                }
            }
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown aggregator {s:?} (gmean|min|mean|hmean)")))
    }
}

impl Sketch {
    pub fn zeros(depth: usize, width: usize) -> Self {
        Sketch {
            depth,
            width,
            values: vec![0.0; depth * width],
        }
    }

    pub fn from_values(depth: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != depth * width {
            return Err(Error::shape(format!(
                "{} values for a {depth}x{width} sketch",
                values.len()
            )));
        }
        Ok(Sketch { depth, width, values })
    }

    /// Zero sketch shaped like `codes`.
    pub fn for_codes(codes: &CodesMatrix) -> Self {
        Sketch::zeros(codes.depth(), codes.width())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slice(&self, level: usize) -> &[f64] {
        &self.values[level * self.width..(level + 1) * self.width]
    }

    pub fn get(&self, level: usize, bucket: usize) -> f64 {
        self.values[level * self.width + bucket]
    }

    pub fn same_shape(&self, other: &Sketch) -> bool {
        self.depth == other.depth && self.width == other.width
    }

    /// Adds `weight` at one bucket per level, as given by a codes row.
    pub fn add_codes(&mut self, row: &[u32], weight: f64) {
        debug_assert_eq!(row.len(), self.depth);
        for (level, &c) in row.iter().enumerate() {
            self.values[level * self.width + c as usize] += weight;
        }
    }

    /// Adds an item by id, erroring if `codes` does not know it.
    pub fn add_item(&mut self, codes: &CodesMatrix, item_id: &str, weight: f64) -> Result<()> {
        self.check_codes(codes)?;
        let row = codes
            .get(item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))?;
        self.add_codes(row, weight);
        Ok(())
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &Sketch, weight: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "{}x{} += {}x{}",
                self.depth, self.width, other.depth, other.width
            )));
        }
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += weight * b);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// Divides every depth slice by its L1 or L2 norm; all-zero slices are
    /// left untouched.
    pub fn normalize(&mut self, norm: Norm) {
        for slice in self.values.chunks_mut(self.width) {
            let n = match norm {
                Norm::L1 => slice.iter().map(|v| v.abs()).sum::<f64>(),
                Norm::L2 => slice.iter().map(|v| v * v).sum::<f64>().sqrt(),
            };
            if n > 0.0 {
                slice.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    pub fn normalized(mut self, norm: Norm) -> Self {
        self.normalize(norm);
        self
    }

    /// Exponential time decay: multiplies every value by `alpha * w^dt`.
    pub fn decay(&mut self, alpha: f64, w: f64, dt: f64) {
        self.scale(decay_factor(alpha, w, dt));
    }

    /// Per-level bucket values of one codes row.
    pub fn gather(&self, row: &[u32], out: &mut [f64]) {
        for (level, (&c, o)) in row.iter().zip(out.iter_mut()).enumerate() {
            *o = self.values[level * self.width + c as usize];
        }
    }

    fn check_codes(&self, codes: &CodesMatrix) -> Result<()> {
        if codes.depth() != self.depth || codes.width() != self.width {
            return Err(Error::shape(format!(
                "sketch {}x{} vs codes {}x{}",
                self.depth,
                self.width,
                codes.depth(),
                codes.width()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = Writer::new(w, SKETCH_MAGIC, FORMAT_VERSION)?;
        w.usize(self.depth)?;
        w.usize(self.width)?;
        w.f64s(&self.values)?;
        w.finish().map(|_| ())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        const WHAT: &str = "sketch";
        let (mut r, v) = Reader::open(r, SKETCH_MAGIC, WHAT)?;
        Reader::<R>::expect_version(WHAT, v, FORMAT_VERSION)?;
        let depth = r.usize()?;
        let width = r.usize()?;
        let values = r.f64s_exact(depth.saturating_mul(width))?;
        r.end()?;
        Ok(Sketch { depth, width, values })
    }
}

/// `alpha * w^dt`.
pub fn decay_factor(alpha: f64, w: f64, dt: f64) -> f64 {
    alpha * w.powf(dt)
}

/// One-hot sketch of a single item: a 1 at `d * W + code[d]` for every level.
pub fn encode_item(codes: &CodesMatrix, item_id: &str) -> Result<Sketch> {
    let row = codes
        .get(item_id)
        .ok_or_else(|| Error::UnknownItem(item_id.to_string()))?;
    let mut s = Sketch::for_codes(codes);
    s.add_codes(row, 1.0);
    Ok(s)
}

/// Weighted elementwise sum. Large inputs are summed in fixed chunks on the
/// worker pool and the partial sums combined in order.
pub fn aggregate(sketches: &[Sketch], weights: &[f64]) -> Result<Sketch> {
    if sketches.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} sketches but {} weights",
            sketches.len(),
            weights.len()
        )));
    }
    let Some(first) = sketches.first() else {
        return Err(Error::Empty("nothing to aggregate"));
    };
    if let Some(bad) = sketches.iter().find(|s| !s.same_shape(first)) {
        return Err(Error::shape(format!(
            "mixed shapes {}x{} and {}x{}",
            first.depth, first.width, bad.depth, bad.width
        )));
    }
    let (depth, width) = (first.depth, first.width);
    let pairs: Vec<(&Sketch, f64)> = sketches.iter().zip(weights.iter().copied()).collect();
    Ok(par::chunked_reduce(
        &pairs,
        || Sketch::zeros(depth, width),
        |mut acc, (s, w)| {
            acc.values.iter_mut().zip(&s.values).for_each(|(a, b)| *a += w * b);
            acc
        },
        |mut a, b| {
            a.values.iter_mut().zip(&b.values).for_each(|(x, y)| *x += y);
            a
        },
    ))
}

/// Aggregates items directly from their codes rows without materializing
/// one-hot sketches. Unknown ids are counted and skipped.
pub fn aggregate_items<S: AsRef<str>>(codes: &CodesMatrix, items: &[(S, f64)]) -> (Sketch, usize) {
    let mut s = Sketch::for_codes(codes);
    let mut missing = 0;
    for (id, w) in items {
        match codes.get(id.as_ref()) {
            Some(row) => s.add_codes(row, *w),
            None => missing += 1,
        }
    }
    (s, missing)
}

/// Scores every item of `codes` against `s`: gathers its `depth` bucket values
/// and reduces them with `aggregator`. Output is aligned with `codes.ids()`.
/// Scores are not normalized across items.
pub fn decode_scores(s: &Sketch, codes: &CodesMatrix, aggregator: Aggregator) -> Result<Vec<f64>> {
    s.check_codes(codes)?;
    Ok(par::map_range(codes.len(), |i| {
        let mut buf = vec![0.0; s.depth];
        s.gather(codes.row(i), &mut buf);
        aggregator.reduce(&buf)
    }))
}

/// Dense `n_items × (depth·width)` one-hot expansion of a codes matrix. Row
/// `i` is the single-item sketch of item `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMatrix {
    depth: usize,
    width: usize,
    rows: usize,
    data: Vec<f64>,
}

impl OneHotMatrix {
    pub fn from_codes(codes: &CodesMatrix) -> Self {
        let cols = codes.sketch_len();
        let mut data = vec![0.0; codes.len() * cols];
        for i in 0..codes.len() {
            let row = &mut data[i * cols..(i + 1) * cols];
            for (level, &c) in codes.row(i).iter().enumerate() {
                row[level * codes.width() + c as usize] = 1.0;
            }
        }
        OneHotMatrix {
            depth: codes.depth(),
            width: codes.width(),
            rows: codes.len(),
            data,
        }
    }

    pub fn from_dense(depth: usize, width: usize, rows: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * depth * width {
            return Err(Error::shape("one-hot matrix data length"));
        }
        Ok(OneHotMatrix {
            depth,
            width,
            rows,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.depth * self.width;
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Per-item, per-level estimates computed as a block-diagonal product of the
/// sketch with the one-hot matrix: entry `(i, d)` is `Σ_c B[i, d·W+c] · s[d·W+c]`.
pub fn batch_decode(s: &Sketch, b: &OneHotMatrix) -> Result<Vec<Vec<f64>>> {
    if b.depth != s.depth || b.width != s.width {
        return Err(Error::shape(format!(
            "sketch {}x{} vs one-hot {}x{}",
            s.depth, s.width, b.depth, b.width
        )));
    }
    Ok(par::map_range(b.rows, |i| {
        b.row(i)
            .chunks_exact(s.width)
            .zip(s.values.chunks_exact(s.width))
            .map(|(bs, ss)| bs.iter().zip(ss).map(|(x, y)| x * y).sum())
            .collect()
    }))
}

/// Sketches keyed by an id, for passing encoded item sets between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchBundle {
    pub entries: Vec<(String, Sketch)>,
}

impl SketchBundle {
    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = Writer::new(w, BUNDLE_MAGIC, FORMAT_VERSION)?;
        w.usize(self.entries.len())?;
        for (id, s) in &self.entries {
            w.str(id)?;
            w.usize(s.depth)?;
            w.usize(s.width)?;
            w.f64s(&s.values)?;
        }
        w.finish().map(|_| ())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        const WHAT: &str = "sketch bundle";
        let (mut r, v) = Reader::open(r, BUNDLE_MAGIC, WHAT)?;
        Reader::<R>::expect_version(WHAT, v, FORMAT_VERSION)?;
        let n = r.usize()?;
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.str()?;
            let depth = r.usize()?;
            let width = r.usize()?;
            let values = r.f64s_exact(depth.saturating_mul(width))?;
            entries.push((id, Sketch { depth, width, values }));
        }
        r.end()?;
        Ok(SketchBundle { entries })
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
