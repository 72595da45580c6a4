//! Seeded synthetic data: Gaussian mixtures for density experiments and
//! clustered item catalogs with session logs for recommendation experiments.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::recsys::{Interaction, InteractionLog};
use crate::{EmbeddingTable, Error, Result};

/// Isotropic Gaussian mixture with equal component weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
}

impl GaussianMixture {
    /// Means uniform in `[-spread, spread]^dim`, sigmas uniform in `[0.5, 1.5]`.
    pub fn random(dim: usize, components: usize, spread: f64, seed: u64) -> Result<Self> {
        if dim == 0 || components == 0 {
            return Err(Error::invalid("dim and components must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..components)
            .map(|_| (0..dim).map(|_| rng.random_range(-spread..=spread)).collect())
            .collect();
        let sigmas = (0..components).map(|_| rng.random_range(0.5..=1.5)).collect();
        Ok(GaussianMixture { means, sigmas })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let c = rng.random_range(0..self.means.len());
                self.means[c]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + self.sigmas[c] * z
                    })
                    .collect()
            })
            .collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Samples as an embedding table with ids `p000000, p000001, ...`.
    pub fn sample_table(&self, n: usize, seed: u64, modality: &str) -> Result<EmbeddingTable> {
        EmbeddingTable::from_rows(
            modality,
            self.sample(n, seed)
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("p{i:06}"), v)),
        )
    }
}

/// Items grouped into clusters in embedding space.
#[derive(Debug, Clone)]
pub struct ClusteredCatalog {
    pub embeddings: EmbeddingTable,
    /// Cluster of each item, aligned with `embeddings.ids()`.
    pub cluster_of: Vec<usize>,
    pub clusters: usize,
}

impl ClusteredCatalog {
    /// `clusters × per_cluster` items. Cluster centers are standard normal;
    /// items are centers plus `noise`-scaled Gaussian jitter. Ids are
    /// `c{cluster}_{k}` with zero padding.
    pub fn generate(clusters: usize, per_cluster: usize, dim: usize, noise: f64, seed: u64) -> Result<Self> {
        if clusters == 0 || per_cluster == 0 || dim == 0 {
            return Err(Error::invalid("clusters, per_cluster and dim must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rows = Vec::with_capacity(clusters * per_cluster);
        let mut cluster_of = Vec::with_capacity(clusters * per_cluster);
        for c in 0..clusters {
            let center: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for k in 0..per_cluster {
                let v: Vec<f64> = center.iter().map(|x| x + jitter.sample(&mut rng)).collect();
                rows.push((format!("c{c:03}_{k:03}"), v));
                cluster_of.push(c);
            }
        }
        Ok(ClusteredCatalog {
            embeddings: EmbeddingTable::from_rows("item", rows)?,
            cluster_of,
            clusters,
        })
    }

    pub fn items_in(&self, cluster: usize) -> impl Iterator<Item = &str> + '_ {
        self.embeddings
            .ids()
            .iter()
            .zip(&self.cluster_of)
            .filter(move |(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
    }

    pub fn cluster(&self, item: &str) -> Option<usize> {
        self.embeddings.position(item).map(|i| self.cluster_of[i])
    }
}

/// How the next item of a session is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionDynamics {
    /// Stay in the current cluster.
    SameCluster,
    /// Move to the cluster `(c + shift) mod clusters`.
    Transition { shift: usize },
    /// Step to one of the `neighbors` nearest items (L2) of the current item.
    NeighborWalk { neighbors: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a step follows `dynamics`; otherwise the next item is
    /// uniform over the catalog.
    pub coherence: f64,
    pub dynamics: SessionDynamics,
}

/// Indices of the `k` nearest other items of every item (L2, ties by index).
fn nearest_neighbors(table: &EmbeddingTable, k: usize) -> Vec<Vec<usize>> {
    crate::par::map_range(table.len(), |i| {
        let mut d: Vec<(f64, usize)> = (0..table.len())
            .filter(|&j| j != i)
            .map(|j| {
                let dist = table
                    .row(i)
                    .iter()
                    .zip(table.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
                (dist, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, j)| j).collect()
    })
}

/// Sessions over a clustered catalog. The first item is uniform. Each later
/// step follows `spec.dynamics` with probability `spec.coherence` and is a
/// uniform catalog item otherwise; cluster dynamics pick a uniform item of the
/// chosen cluster. Session ids are `{prefix}{n}`.
pub fn generate_sessions(
    catalog: &ClusteredCatalog,
    spec: &SessionSpec,
    prefix: &str,
    seed: u64,
) -> Result<InteractionLog> {
    if spec.min_len < 2 || spec.max_len < spec.min_len {
        return Err(Error::invalid("need 2 <= min_len <= max_len"));
    }
    if !(0.0..=1.0).contains(&spec.coherence) {
        return Err(Error::invalid("coherence must be in [0, 1]"));
    }
    let n_items = catalog.embeddings.len();
    let members: Vec<Vec<usize>> = (0..catalog.clusters)
        .map(|c| (0..n_items).filter(|&i| catalog.cluster_of[i] == c).collect())
        .collect();
    let knn = match spec.dynamics {
        SessionDynamics::NeighborWalk { neighbors } => {
            if neighbors == 0 || neighbors >= n_items {
                return Err(Error::invalid("neighbors must be in 1..catalog size"));
            }
            nearest_neighbors(&catalog.embeddings, neighbors)
        }
        _ => Vec::new(),
    };
    let ids = catalog.embeddings.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut t = 0.0;
    for s in 0..spec.sessions {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut item = rng.random_range(0..n_items);
        for step in 0..len {
            if step > 0 {
                item = if rng.random_bool(spec.coherence) {
                    let c = catalog.cluster_of[item];
                    match spec.dynamics {
                        SessionDynamics::SameCluster => pick(&mut rng, &members[c]),
                        SessionDynamics::Transition { shift } => {
                            pick(&mut rng, &members[(c + shift) % catalog.clusters])
                        }
                        SessionDynamics::NeighborWalk { .. } => pick(&mut rng, &knn[item]),
                    }
                } else {
                    rng.random_range(0..n_items)
                };
            }
            rows.push(Interaction {
                session_id: format!("{prefix}{s}"),
                item_id: ids[item].clone(),
                timestamp: t,
                event_type: "view".into(),
                weight: 1.0,
            });
            t += 1.0;
        }
    }
    InteractionLog::from_interactions(rows)
}

fn pick<R: Rng>(rng: &mut R, from: &[usize]) -> usize {
    from[rng.random_range(0..from.len())]
}

/// Parameters of the bundled toy dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub noise: f64,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub coherence: f64,
    pub dynamics: SessionDynamics,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            clusters: 20,
            per_cluster: 15,
            dim: 16,
            noise: 0.15,
            train_sessions: 1500,
            test_sessions: 200,
            min_len: 3,
            max_len: 8,
            coherence: 0.85,
            dynamics: SessionDynamics::Transition { shift: 1 },
        }
    }
}

pub struct ToyDataset {
    pub catalog: ClusteredCatalog,
    pub train: InteractionLog,
    pub test: InteractionLog,
}

impl ToyDataset {
    pub fn generate(spec: &ToySpec, seed: u64) -> Result<Self> {
        let catalog = ClusteredCatalog::generate(spec.clusters, spec.per_cluster, spec.dim, spec.noise, seed)?;
        let s = |n| SessionSpec {
            sessions: n,
            min_len: spec.min_len,
            max_len: spec.max_len,
            coherence: spec.coherence,
            dynamics: spec.dynamics,
        };
        let train = generate_sessions(&catalog, &s(spec.train_sessions), "train", seed.wrapping_add(1))?;
        let test = generate_sessions(&catalog, &s(spec.test_sessions), "test", seed.wrapping_add(2))?;
        Ok(ToyDataset { catalog, train, test })
    }

    /// Writes `embeddings.txt`, `train.csv` and `test.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.catalog.embeddings.save(dir.join("embeddings.txt"))?;
        self.train.save(dir.join("train.csv"))?;
        self.test.save(dir.join("test.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_seeded() {
        let g = GaussianMixture::random(3, 2, 5.0, 1).unwrap();
        assert_eq!(g.sample(10, 4), g.sample(10, 4));
        assert_ne!(g.sample(10, 4), g.sample(10, 5));
        assert_eq!(g.sample_table(7, 0, "x").unwrap().len(), 7);
    }

    #[test]
    fn catalog_clusters_are_tight() {
        let c = ClusteredCatalog::generate(4, 5, 8, 0.05, 2).unwrap();
        assert_eq!(c.embeddings.len(), 20);
        assert_eq!(c.items_in(3).count(), 5);
        assert_eq!(c.cluster("c002_004"), Some(2));
        let d = |a: &str, b: &str| -> f64 {
            let (x, y) = (c.embeddings.get(a).unwrap(), c.embeddings.get(b).unwrap());
            x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        };
        assert!(d("c000_000", "c000_001") < d("c000_000", "c001_000"));
    }

    #[test]
    fn transition_sessions_follow_shift() {
        let c = ClusteredCatalog::generate(5, 3, 4, 0.1, 3).unwrap();
        let spec = SessionSpec {
            sessions: 20,
            min_len: 2,
            max_len: 4,
            coherence: 1.0,
            dynamics: SessionDynamics::Transition { shift: 2 },
        };
        let log = generate_sessions(&c, &spec, "s", 9).unwrap();
        assert_eq!(log.len(), 20);
        for s in log.sessions() {
            for w in s.events.windows(2) {
                let (a, b) = (c.cluster(&w[0].item_id).unwrap(), c.cluster(&w[1].item_id).unwrap());
                assert_eq!(b, (a + 2) % 5);
            }
        }
    }

    #[test]
    fn toy_dataset_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            train_sessions: 5,
            test_sessions: 2,
            ..ToySpec::default()
        };
        ToyDataset::generate(&spec, 0).unwrap().write(dir.path()).unwrap();
        for f in ["embeddings.txt", "train.csv", "test.csv"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
