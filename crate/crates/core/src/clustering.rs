//! k-means and the per-class subpopulation construction built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::preprocess::PcaTransform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 8,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Member indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centroids.len()];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let n = data.rows();
    let mut centroids = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = data
        .iter_rows()
        .map(|r| sq_dist(r, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return Err(Error::Clustering(format!("fewer than {k} distinct points")));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in dist.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                acc += d;
                if acc > target {
                    break;
                }
            }
        }
        let chosen = data.row(pick.expect("positive total")).to_vec();
        for (d, r) in dist.iter_mut().zip(data.iter_rows()) {
            *d = d.min(sq_dist(r, &chosen));
        }
        centroids.push(chosen);
    }
    Ok(centroids)
}

fn assign_all(
    data: &FeatureMatrix,
    centroids: &[Vec<f64>],
    assignment: &mut [usize],
    dist: &mut [f64],
) -> f64 {
    let mut inertia = 0.0;
    for (i, row) in data.iter_rows().enumerate() {
        let (c, d) = nearest(row, centroids);
        assignment[i] = c;
        dist[i] = d;
        inertia += d;
    }
    inertia
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Returns whether anything changed.
fn repair_empty(
    centroids: &mut [Vec<f64>],
    assignment: &mut [usize],
    dist: &mut [f64],
    data: &FeatureMatrix,
) -> bool {
    let k = centroids.len();
    let mut repaired = false;
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return repaired;
        };
        // only donors from clusters with more than one member
        let donor = (0..assignment.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            })
            .expect("n >= k guarantees a donor");
        centroids[empty] = data.row(donor).to_vec();
        assignment[donor] = empty;
        dist[donor] = 0.0;
        repaired = true;
    }
}

fn update_centroids(data: &FeatureMatrix, assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; data.cols()]; k];
    let mut counts = vec![0usize; k];
    for (row, &a) in data.iter_rows().zip(assignment) {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}

fn lloyd(data: &FeatureMatrix, opts: &KMeansOptions, restart: usize) -> Result<KMeansResult> {
    let k = opts.k;
    let n = data.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(restart as u64);

    let mut centroids = plus_plus_init(data, k, &mut rng)?;
    let mut assignment = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut inertia = assign_all(data, &centroids, &mut assignment, &mut dist);

    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        repair_empty(&mut centroids, &mut assignment, &mut dist, data);
        let before: f64 = dist.iter().sum();
        let updated = update_centroids(data, &assignment, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        inertia = assign_all(data, &centroids, &mut assignment, &mut dist);
        debug_assert!(
            inertia <= before * (1.0 + 1e-12) + 1e-300,
            "k-means inertia increased: {before} -> {inertia}"
        );
        if shift < opts.tol {
            break;
        }
    }

    // the last reassignment can empty a cluster; repair until argmin is consistent
    let mut guard = 0;
    while repair_empty(&mut centroids, &mut assignment, &mut dist, data) {
        centroids = update_centroids(data, &assignment, k);
        inertia = assign_all(data, &centroids, &mut assignment, &mut dist);
        guard += 1;
        if guard > 10 * k {
            return Err(Error::Clustering(
                "could not keep every cluster non-empty".into(),
            ));
        }
    }

    Ok(KMeansResult {
        centroids,
        assignment,
        inertia,
        iterations,
        seed: opts.seed,
    })
}

/// Lloyd's algorithm from k-means++ seeding, best of `restarts` runs.
///
/// Restarts run in parallel; the winner is the lowest inertia, then the
/// lowest restart index, so the result does not depend on scheduling.
pub fn kmeans(data: &FeatureMatrix, opts: &KMeansOptions) -> Result<KMeansResult> {
    if opts.k == 0 || opts.restarts == 0 {
        return Err(Error::Config("k and restarts must be at least 1".into()));
    }
    if data.rows() < opts.k {
        return Err(Error::Clustering(format!(
            "{} samples cannot form {} clusters",
            data.rows(),
            opts.k
        )));
    }
    let runs: Vec<Result<KMeansResult>> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| lloyd(data, opts, r))
        .collect();
    let mut best: Option<KMeansResult> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// How class-0 clusters are matched with class-1 clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingRule {
    /// Cluster `i` of class 0 with cluster `i` of class 1.
    ByIndex,
    /// Both classes ranked by descending cluster size.
    BySize,
    /// Assignment minimizing the summed squared distance between paired
    /// centroids, measured orthogonally to the class-mean difference.
    #[default]
    NearestCentroid,
}

impl std::str::FromStr for PairingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_index" | "index" => Ok(Self::ByIndex),
            "by_size" | "size" => Ok(Self::BySize),
            "nearest_centroid" | "nearest" => Ok(Self::NearestCentroid),
            other => Err(Error::Config(format!("unknown pairing rule {other:?}"))),
        }
    }
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
/// Returns `assign[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn pair_clusters(
    rule: PairingRule,
    class0: &KMeansResult,
    class1: &KMeansResult,
) -> Vec<(usize, usize)> {
    let k = class0.centroids.len();
    match rule {
        PairingRule::ByIndex => (0..k).map(|i| (i, i)).collect(),
        PairingRule::BySize => {
            let rank = |r: &KMeansResult| {
                let sizes = r.cluster_sizes();
                let mut idx: Vec<usize> = (0..k).collect();
                idx.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
                idx
            };
            rank(class0).into_iter().zip(rank(class1)).collect()
        }
        PairingRule::NearestCentroid => {
            // Every matched pair differs by roughly the class-mean offset, so
            // that direction carries no information about which pair is right.
            let mut u: Vec<f64> = class_mean(class1)
                .iter()
                .zip(class_mean(class0))
                .map(|(b, a)| b - a)
                .collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                u.iter_mut().for_each(|v| *v /= norm);
            }
            let cost: Vec<Vec<f64>> = class0
                .centroids
                .iter()
                .map(|a| {
                    class1
                        .centroids
                        .iter()
                        .map(|b| {
                            let along: f64 =
                                a.iter().zip(b).zip(&u).map(|((x, y), w)| (y - x) * w).sum();
                            (sq_dist(a, b) - along * along).max(0.0)
                        })
                        .collect()
                })
                .collect();
            min_cost_assignment(&cost).into_iter().enumerate().collect()
        }
    }
}

/// Size-weighted mean of the centroids, i.e. the mean of the clustered rows.
fn class_mean(r: &KMeansResult) -> Vec<f64> {
    let sizes = r.cluster_sizes();
    let n: usize = sizes.iter().sum();
    let mut mean = vec![0.0; r.centroids[0].len()];
    for (c, &s) in r.centroids.iter().zip(&sizes) {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v * s as f64 / n as f64;
        }
    }
    mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterCounts {
    pub n_class0: usize,
    pub n_class1: usize,
    pub fraction_class1: f64,
}

/// Combined clusters, each the union of one class-0 and one class-1 k-means cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopulationPartition {
    /// Dataset row indices per combined cluster, ascending.
    pub clusters: Vec<Vec<usize>>,
    /// k-means results on the class-0 and class-1 rows respectively.
    pub per_class: [KMeansResult; 2],
    pub pairing: Vec<(usize, usize)>,
    pub pairing_rule: PairingRule,
    pub counts: Vec<ClusterCounts>,
}

impl SubpopulationPartition {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster index of every dataset row.
    pub fn labels(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (c, members) in self.clusters.iter().enumerate() {
            for &i in members {
                out[i] = c;
            }
        }
        out
    }

    /// Builds a partition directly from cluster index sets, e.g. planted groups.
    pub fn from_clusters(
        clusters: Vec<Vec<usize>>,
        labels: &crate::data::LabelVector,
    ) -> Result<Self> {
        let counts = clusters
            .iter()
            .map(|c| counts_for(c, labels))
            .collect::<Vec<_>>();
        let empty = KMeansResult {
            centroids: Vec::new(),
            assignment: Vec::new(),
            inertia: 0.0,
            iterations: 0,
            seed: 0,
        };
        let k = clusters.len();
        Ok(Self {
            clusters,
            per_class: [empty.clone(), empty],
            pairing: (0..k).map(|i| (i, i)).collect(),
            pairing_rule: PairingRule::ByIndex,
            counts,
        })
    }

    pub fn report(&self, seed: u64) -> ClusterReport {
        let norm = |r: &KMeansResult, i: usize| {
            r.centroids
                .get(i)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        ClusterReport {
            seed,
            pairing_rule: self.pairing_rule,
            clusters: self
                .clusters
                .iter()
                .enumerate()
                .map(|(c, members)| {
                    let (a, b) = self.pairing[c];
                    ClusterReportEntry {
                        cluster: c,
                        size: members.len(),
                        counts: self.counts[c],
                        pairing: (a, b),
                        centroid_norm_class0: norm(&self.per_class[0], a),
                        centroid_norm_class1: norm(&self.per_class[1], b),
                    }
                })
                .collect(),
        }
    }
}

fn counts_for(members: &[usize], labels: &crate::data::LabelVector) -> ClusterCounts {
    let n1 = members
        .iter()
        .filter(|&&i| labels.as_slice()[i] == 1)
        .count();
    let n0 = members.len() - n1;
    ClusterCounts {
        n_class0: n0,
        n_class1: n1,
        fraction_class1: if members.is_empty() {
            0.0
        } else {
            n1 as f64 / members.len() as f64
        },
    }
}

/// Clusters each class separately in the transformed space and pairs the
/// clusters into `k_per_class` combined clusters.
pub fn build_subpopulations(
    dataset: &LabeledDataset,
    transform: &PcaTransform,
    k_per_class: usize,
    kmeans_opts: &KMeansOptions,
    pairing_rule: PairingRule,
) -> Result<SubpopulationPartition> {
    let pcs = transform.apply(&dataset.features)?;
    let class_rows: [Vec<usize>; 2] = [0u8, 1].map(|c| {
        (0..dataset.len())
            .filter(|&i| dataset.labels.as_slice()[i] == c)
            .collect()
    });
    for (c, rows) in class_rows.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::single_class(format!("class {c} is absent")));
        }
        if rows.len() < k_per_class {
            return Err(Error::Clustering(format!(
                "class {c} has {} samples, fewer than k_per_class = {k_per_class}",
                rows.len()
            )));
        }
    }
    let opts = KMeansOptions {
        k: k_per_class,
        ..*kmeans_opts
    };
    let results: Vec<KMeansResult> = class_rows
        .iter()
        .map(|rows| kmeans(&pcs.select_rows(rows)?, &opts))
        .collect::<Result<_>>()?;
    let per_class: [KMeansResult; 2] = results.try_into().expect("two classes");

    let pairing = pair_clusters(pairing_rule, &per_class[0], &per_class[1]);
    let members = [per_class[0].members(), per_class[1].members()];
    let clusters: Vec<Vec<usize>> = pairing
        .iter()
        .map(|&(a, b)| {
            let mut rows: Vec<usize> = members[0][a]
                .iter()
                .map(|&i| class_rows[0][i])
                .chain(members[1][b].iter().map(|&i| class_rows[1][i]))
                .collect();
            rows.sort_unstable();
            rows
        })
        .collect();
    let counts = clusters
        .iter()
        .map(|c| counts_for(c, &dataset.labels))
        .collect();

    Ok(SubpopulationPartition {
        clusters,
        per_class,
        pairing,
        pairing_rule,
        counts,
    })
}

/// Withholds one combined cluster as the test split.
pub fn make_ood_split(
    partition: &SubpopulationPartition,
    test_cluster: usize,
) -> Result<SplitSpec> {
    if test_cluster >= partition.len() {
        return Err(Error::IndexOutOfRange {
            index: test_cluster,
            len: partition.len(),
        });
    }
    let n = partition.clusters.iter().map(Vec::len).sum();
    let train: Vec<usize> = partition
        .clusters
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != test_cluster)
        .flat_map(|(_, m)| m.iter().copied())
        .collect();
    if train.is_empty() {
        return Err(Error::Config(
            "OOD split needs at least two clusters".into(),
        ));
    }
    SplitSpec::new(train, partition.clusters[test_cluster].clone(), n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReportEntry {
    pub cluster: usize,
    pub size: usize,
    #[serde(flatten)]
    pub counts: ClusterCounts,
    pub pairing: (usize, usize),
    pub centroid_norm_class0: Option<f64>,
    pub centroid_norm_class1: Option<f64>,
}

/// Per-cluster summary written to `cluster-report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub seed: u64,
    pub pairing_rule: PairingRule,
    pub clusters: Vec<ClusterReportEntry>,
}
