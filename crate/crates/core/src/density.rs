//! Pure (non-conditional) density estimation and a brute-force kernel
//! density oracle to validate it against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::partition::{fit_dlsh, Partitioner};
use crate::{par, Aggregator, EmbeddingTable, Error, Norm, Result, Sketch};

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub queries: Vec<Vec<f64>>,
    /// Unnormalized, one per query.
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `exp(-‖q − x‖₁ / bandwidth)`.
    Laplacian,
}

/// Raw bucket counts of `data` hashed through `p`, each point added with its
/// weight (unit when `weights` is `None`).
pub fn density_sketch<P: Partitioner + ?Sized>(
    p: &P,
    data: &EmbeddingTable,
    weights: Option<&[f64]>,
) -> Result<Sketch> {
    if p.dim() != data.dim() {
        return Err(Error::shape(format!(
            "partitioning dim {} != data dim {}",
            p.dim(),
            data.dim()
        )));
    }
    if let Some(w) = weights {
        if w.len() != data.len() {
            return Err(Error::shape("one weight per data point"));
        }
    }
    let (depth, width) = (p.depth(), p.width());
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(par::chunked_reduce(
        &idx,
        || Sketch::zeros(depth, width),
        |mut acc, &i| {
            let row = p.codes_for(data.row(i));
            acc.add_codes(&row, weights.map_or(1.0, |w| w[i]));
            acc
        },
        |mut a, b| {
            a.add_scaled(&b, 1.0).expect("same shape");
            a
        },
    ))
}

/// Scores `queries` against an already normalized sketch. Queries go through
/// the same hashing path as items.
pub fn query_sketch<P: Partitioner + ?Sized>(
    p: &P,
    sketch: &Sketch,
    queries: &[Vec<f64>],
    aggregator: Aggregator,
) -> Result<Vec<f64>> {
    if let Some(q) = queries.iter().find(|q| q.len() != p.dim()) {
        return Err(Error::shape(format!("query dim {} != {}", q.len(), p.dim())));
    }
    Ok(par::map(queries, |q| {
        let row = p.codes_for(q);
        let mut vals = vec![0.0; row.len()];
        sketch.gather(&row, &mut vals);
        aggregator.reduce(&vals)
    }))
}

/// Sketches all data points with unit weight, L1-normalizes every depth
/// slice, and decodes each query.
pub fn emde_density<P: Partitioner + ?Sized>(
    p: &P,
    data: &EmbeddingTable,
    queries: &[Vec<f64>],
    aggregator: Aggregator,
) -> Result<DensityEstimate> {
    let s = density_sketch(p, data, None)?.normalized(Norm::L1);
    let estimates = query_sketch(p, &s, queries, aggregator)?;
    Ok(DensityEstimate {
        queries: queries.to_vec(),
        estimates,
    })
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Exact kernel sum `Σ_i K(q, x_i)`, O(|data|·|queries|).
pub fn brute_force_kde<D: AsRef<[f64]> + Sync>(
    data: &[D],
    queries: &[Vec<f64>],
    kernel: Kernel,
    bandwidth: f64,
) -> Result<DensityEstimate> {
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return Err(Error::invalid("bandwidth must be > 0"));
    }
    let estimates = par::map(queries, |q| match kernel {
        Kernel::Laplacian => data.iter().map(|x| (-l1(q, x.as_ref()) / bandwidth).exp()).sum(),
    });
    Ok(DensityEstimate {
        queries: queries.to_vec(),
        estimates,
    })
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("pearson inputs differ in length"));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("pearson needs at least 2 points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Median pairwise L1 distance over a seeded subsample of at most
/// `max_points` rows; the default oracle bandwidth.
pub fn median_pairwise_l1(data: &EmbeddingTable, max_points: usize, seed: u64) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::Degenerate("need 2 points for a pairwise distance".into()));
    }
    let mut idx: Vec<usize> = if data.len() > max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, data.len(), max_points.max(2)).into_vec()
    } else {
        (0..data.len()).collect()
    };
    idx.sort_unstable();
    let mut d: Vec<f64> = par::map_range(idx.len(), |i| {
        (i + 1..idx.len())
            .map(|j| l1(data.row(idx[i]), data.row(idx[j])))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    Ok(if m % 2 == 1 {
        d[m / 2]
    } else {
        (d[m / 2 - 1] + d[m / 2]) / 2.0
    })
}

/// One cell of an N/K sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub depth: usize,
    #[serde(rename = "K")]
    pub bits: usize,
    pub seed: u64,
    pub pearson: f64,
}

/// For every `(N, K, seed)`: fit DLSH, estimate the query densities and
/// correlate against the Laplacian-KDE oracle. The oracle is computed once,
/// with bandwidth `median_pairwise_l1(data, 1000, 0)` unless given.
/// Rows come out in `N`, then `K`, then seed order. A constant estimate
/// vector gets Pearson 0.
pub fn nk_sweep(
    data: &EmbeddingTable,
    queries: &[Vec<f64>],
    depths: &[usize],
    bits: &[usize],
    seeds: &[u64],
    aggregator: Aggregator,
    bandwidth: Option<f64>,
) -> Result<Vec<SweepRow>> {
    if depths.is_empty() || bits.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let bw = match bandwidth {
        Some(b) => b,
        None => median_pairwise_l1(data, 1000, 0)?,
    };
    let oracle = brute_force_kde(
        data.rows().collect::<Vec<_>>().as_slice(),
        queries,
        Kernel::Laplacian,
        bw,
    )?;
    let cells: Vec<(usize, usize, u64)> = depths
        .iter()
        .flat_map(|&n| bits.iter().flat_map(move |&k| seeds.iter().map(move |&s| (n, k, s))))
        .collect();
    par::map(&cells, |&(n, k, seed)| -> Result<SweepRow> {
        let p = fit_dlsh(data, n, k, seed)?;
        let est = emde_density(&p, data, queries, aggregator)?;
        let r = match pearson(&est.estimates, &oracle.estimates) {
            Ok(r) => r,
            Err(Error::Degenerate(_)) => 0.0,
            Err(e) => return Err(e),
        };
        Ok(SweepRow {
            depth: n,
            bits: k,
            seed,
            pearson: r,
        })
    })
    .into_iter()
    .collect()
}

/// Writes `N,K,seed,pearson` CSV.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
