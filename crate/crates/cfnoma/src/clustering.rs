//! User clustering on large-scale fading feature vectors.
//!
//! Each UE is represented by the column of the `beta` matrix associated with
//! it, i.e. a vector in `R^M` of its gains to every AP. Lloyd iteration plus
//! three initializations (uniform random, farthest-first, AP-association
//! counting) produce the clusterings; silhouette scoring selects the cluster
//! count; greedy distance pairing provides the baselines.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, tags};

/// Feature vectors, one per UE.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn from_beta(beta: &nalgebra::DMatrix<f64>) -> Self {
        let vectors = (0..beta.ncols())
            .map(|n| beta.column(n).iter().copied().collect())
            .collect();
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Disjoint partition of the UEs with per-cluster decode order.
///
/// `clusters[l]` lists UE indices; after [`order_within_cluster`] the list is
/// sorted strongest-first by virtual-channel norm. Serializes to
/// `{"clusters": [[ue,...],...], "centroids": [[...],...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    #[serde(skip)]
    pub assignment: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub centroids: Vec<Vec<f64>>,
}

impl Clustering {
    /// Build from explicit member lists; centroids default to empty until
    /// computed from features.
    pub fn from_clusters(clusters: Vec<Vec<usize>>, num_ues: usize) -> Result<Self> {
        let mut assignment = vec![usize::MAX; num_ues];
        for (l, members) in clusters.iter().enumerate() {
            for &n in members {
                if n >= num_ues {
                    return Err(Error::InvalidClustering(format!(
                        "UE {n} out of range (N = {num_ues})"
                    )));
                }
                if assignment[n] != usize::MAX {
                    return Err(Error::InvalidClustering(format!(
                        "UE {n} appears in more than one cluster"
                    )));
                }
                assignment[n] = l;
            }
        }
        if let Some(n) = assignment.iter().position(|&l| l == usize::MAX) {
            return Err(Error::InvalidClustering(format!(
                "UE {n} missing from the clustering"
            )));
        }
        Ok(Self {
            assignment,
            clusters,
            centroids: Vec::new(),
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Verify the clusters cover `0..num_ues` exactly once.
    pub fn check_partition(&self, num_ues: usize) -> std::result::Result<(), String> {
        let mut seen = vec![false; num_ues];
        for members in &self.clusters {
            for &n in members {
                if n >= num_ues {
                    return Err(format!("UE {n} out of range"));
                }
                if seen[n] {
                    return Err(format!("UE {n} assigned twice"));
                }
                seen[n] = true;
            }
        }
        match seen.iter().position(|s| !s) {
            Some(n) => Err(format!("UE {n} unassigned")),
            None => Ok(()),
        }
    }

    fn rebuild_assignment(&mut self) {
        let num_ues = self.clusters.iter().map(|c| c.len()).sum();
        self.assignment = vec![0; num_ues];
        for (l, members) in self.clusters.iter().enumerate() {
            for &n in members {
                self.assignment[n] = l;
            }
        }
    }
}

/// Map every UE to its nearest centroid; ties go to the lowest cluster index.
pub fn assign_to_nearest(features: &FeatureSet, centroids: &[Vec<f64>]) -> Result<Vec<usize>> {
    if centroids.is_empty() {
        return Err(Error::InvalidInput("no centroids given".into()));
    }
    Ok(features
        .vectors
        .iter()
        .map(|f| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (l, c) in centroids.iter().enumerate() {
                let d = dist(f, c);
                if d < best_d {
                    best_d = d;
                    best = l;
                }
            }
            best
        })
        .collect())
}

/// Per-cluster mean feature vector.
pub fn update_centroids(
    features: &FeatureSet,
    assignment: &[usize],
    num_clusters: usize,
) -> Result<Vec<Vec<f64>>> {
    let dim = features.vectors.first().map_or(0, |v| v.len());
    let mut sums = vec![vec![0.0; dim]; num_clusters];
    let mut counts = vec![0usize; num_clusters];
    for (n, &l) in assignment.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(&features.vectors[n]) {
            *s += x;
        }
    }
    for (l, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::InvalidClustering(format!("cluster {l} is empty")));
        }
        for s in sums[l].iter_mut() {
            *s /= *count as f64;
        }
    }
    Ok(sums)
}

/// Within-cluster sum of squared distances to centroids.
pub fn wcss(features: &FeatureSet, assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    features
        .vectors
        .iter()
        .zip(assignment)
        .map(|(f, &l)| {
            let d = dist(f, &centroids[l]);
            d * d
        })
        .sum()
}

/// Diagnostics from one Lloyd run.
#[derive(Debug, Clone)]
pub struct KmeansStats {
    pub iterations: usize,
    /// Objective after each assignment step.
    pub wcss_history: Vec<f64>,
    /// Scalar multiply-adds spent on distance evaluations.
    pub distance_work: u64,
}

pub const KMEANS_MAX_ITERS: usize = 100;

/// Lloyd iteration from explicit initial centroids.
///
/// Alternates assignment and centroid updates until assignments stop
/// changing or `max_iters` is hit. A centroid that loses all members is
/// reseeded with the UE currently farthest from its own centroid, keeping
/// all `L` clusters alive.
pub fn kmeans(
    features: &FeatureSet,
    num_clusters: usize,
    init_centroids: &[Vec<f64>],
    max_iters: usize,
) -> Result<(Clustering, KmeansStats)> {
    let n = features.len();
    if num_clusters > n {
        return Err(Error::InvalidInput(format!(
            "cannot form {num_clusters} clusters from {n} UEs"
        )));
    }
    if init_centroids.len() != num_clusters {
        return Err(Error::InvalidInput("wrong number of initial centroids".into()));
    }
    let dim = features.vectors.first().map_or(0, |v| v.len());
    let mut centroids = init_centroids.to_vec();
    let mut assignment = vec![usize::MAX; n];
    let mut stats = KmeansStats {
        iterations: 0,
        wcss_history: Vec::new(),
        distance_work: 0,
    };
    for iter in 0..max_iters {
        let new_assignment = assign_to_nearest(features, &centroids)?;
        stats.distance_work += (n * num_clusters * dim) as u64;
        // Empty-cluster repair: steal the UE farthest from its centroid.
        let mut counts = vec![0usize; num_clusters];
        for &l in &new_assignment {
            counts[l] += 1;
        }
        let mut repaired = new_assignment;
        for l in 0..num_clusters {
            if counts[l] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[repaired[i]] > 1)
                .max_by(|&a, &b| {
                    let da = dist(&features.vectors[a], &centroids[repaired[a]]);
                    let db = dist(&features.vectors[b], &centroids[repaired[b]]);
                    da.total_cmp(&db)
                })
                .ok_or_else(|| Error::InvalidClustering("cannot repair empty cluster".into()))?;
            counts[repaired[far]] -= 1;
            repaired[far] = l;
            counts[l] = 1;
        }
        let changed = repaired != assignment;
        assignment = repaired;
        centroids = update_centroids(features, &assignment, num_clusters)?;
        stats.wcss_history.push(wcss(features, &assignment, &centroids));
        stats.iterations = iter + 1;
        if !changed {
            break;
        }
    }
    let mut clusters = vec![Vec::new(); num_clusters];
    for (ue, &l) in assignment.iter().enumerate() {
        clusters[l].push(ue);
    }
    let clustering = Clustering {
        assignment,
        clusters,
        centroids,
    };
    Ok((clustering, stats))
}

/// Farthest-first centroid initialization: the first centroid is a uniform
/// draw, each later one is the UE maximizing the distance to its nearest
/// already-chosen centroid (deterministic argmax, lowest index on ties).
pub fn kmeanspp_init<R: Rng>(
    features: &FeatureSet,
    num_clusters: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = features.len();
    if num_clusters > n {
        return Err(Error::InvalidInput(format!(
            "cannot pick {num_clusters} centroids from {n} UEs"
        )));
    }
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < num_clusters {
        let mut best_ue = None;
        let mut best_d = f64::NEG_INFINITY;
        for ue in 0..n {
            if chosen.contains(&ue) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| dist(&features.vectors[ue], &features.vectors[c]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best_ue = Some(ue);
            }
        }
        chosen.push(best_ue.expect("num_clusters <= n leaves a candidate"));
    }
    Ok(chosen)
}

/// AP-association initialization: every AP nominates the UE it hears best,
/// and the UEs with the most nominations become centroids (lowest index on
/// ties). Fully deterministic.
pub fn improved_kmeanspp_init(
    beta: &nalgebra::DMatrix<f64>,
    num_clusters: usize,
) -> Result<Vec<usize>> {
    let n = beta.ncols();
    if num_clusters > n {
        return Err(Error::InvalidInput(format!(
            "cannot pick {num_clusters} centroids from {n} UEs"
        )));
    }
    let mut nominations = vec![0usize; n];
    for m in 0..beta.nrows() {
        let mut best = 0usize;
        for ue in 1..n {
            if beta[(m, ue)] > beta[(m, best)] {
                best = ue;
            }
        }
        nominations[best] += 1;
    }
    let mut chosen = Vec::with_capacity(num_clusters);
    while chosen.len() < num_clusters {
        let next = (0..n)
            .filter(|ue| !chosen.contains(ue))
            .max_by_key(|&ue| (nominations[ue], std::cmp::Reverse(ue)))
            .expect("num_clusters <= n");
        chosen.push(next);
    }
    Ok(chosen)
}

fn centroids_from_indices(features: &FeatureSet, indices: &[usize]) -> Vec<Vec<f64>> {
    indices.iter().map(|&i| features.vectors[i].clone()).collect()
}

/// Which clustering algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Kmeans,
    Kmeanspp,
    Improved,
    Near,
    Far,
    Random,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Kmeans => "kmeans",
            Algorithm::Kmeanspp => "kmeanspp",
            Algorithm::Improved => "improved",
            Algorithm::Near => "near",
            Algorithm::Far => "far",
            Algorithm::Random => "random",
        }
    }
}

/// Run the selected algorithm end to end (init + Lloyd or pairing).
pub fn cluster(
    algorithm: Algorithm,
    beta: &nalgebra::DMatrix<f64>,
    num_clusters: usize,
    seed: u64,
) -> Result<Clustering> {
    let features = FeatureSet::from_beta(beta);
    match algorithm {
        Algorithm::Kmeans => {
            let n = features.len();
            if num_clusters > n {
                return Err(Error::InvalidInput("more clusters than UEs".into()));
            }
            let mut rng = seeds::stream(seed, tags::KMEANS_INIT);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(num_clusters);
            let init = centroids_from_indices(&features, &idx);
            Ok(kmeans(&features, num_clusters, &init, KMEANS_MAX_ITERS)?.0)
        }
        Algorithm::Kmeanspp => {
            let mut rng = seeds::stream(seed, tags::KMEANS_INIT);
            let idx = kmeanspp_init(&features, num_clusters, &mut rng)?;
            let init = centroids_from_indices(&features, &idx);
            Ok(kmeans(&features, num_clusters, &init, KMEANS_MAX_ITERS)?.0)
        }
        Algorithm::Improved => {
            let idx = improved_kmeanspp_init(beta, num_clusters)?;
            let init = centroids_from_indices(&features, &idx);
            Ok(kmeans(&features, num_clusters, &init, KMEANS_MAX_ITERS)?.0)
        }
        Algorithm::Near => baseline_pairing(&features, PairingMode::Near, seed),
        Algorithm::Far => baseline_pairing(&features, PairingMode::Far, seed),
        Algorithm::Random => baseline_pairing(&features, PairingMode::Random, seed),
    }
}

/// Mean silhouette coefficient over all UEs.
///
/// Per UE: `(c - b) / max(c, b)` with `b` the mean distance to its own
/// cluster's other members and `c` the smallest mean distance to another
/// cluster. Singleton-cluster UEs score 0.
pub fn silhouette_score(features: &FeatureSet, clustering: &Clustering) -> Result<f64> {
    let l = clustering.num_clusters();
    if l < 2 {
        return Err(Error::InvalidInput(
            "silhouette needs at least two clusters".into(),
        ));
    }
    clustering
        .check_partition(features.len())
        .map_err(Error::InvalidClustering)?;
    let mut total = 0.0;
    for (l_own, members) in clustering.clusters.iter().enumerate() {
        for &ue in members {
            if members.len() == 1 {
                continue; // coefficient 0
            }
            let b = members
                .iter()
                .filter(|&&o| o != ue)
                .map(|&o| dist(&features.vectors[ue], &features.vectors[o]))
                .sum::<f64>()
                / (members.len() - 1) as f64;
            let c = clustering
                .clusters
                .iter()
                .enumerate()
                .filter(|(lo, other)| *lo != l_own && !other.is_empty())
                .map(|(_, other)| {
                    other
                        .iter()
                        .map(|&o| dist(&features.vectors[ue], &features.vectors[o]))
                        .sum::<f64>()
                        / other.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            let denom = c.max(b);
            if denom > 0.0 {
                total += (c - b) / denom;
            }
        }
    }
    Ok(total / features.len() as f64)
}

/// Pick the cluster count maximizing the silhouette of the deterministic
/// AP-association clustering; ties resolve to the smallest candidate.
pub fn select_num_clusters(
    beta: &nalgebra::DMatrix<f64>,
    candidates: &[usize],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("empty cluster-count range".into()));
    }
    let features = FeatureSet::from_beta(beta);
    let mut best: Option<(f64, usize)> = None;
    for &l in candidates {
        if l < 2 || l >= features.len() {
            return Err(Error::InvalidInput(format!(
                "candidate L={l} outside [2, N-1]"
            )));
        }
        let idx = improved_kmeanspp_init(beta, l)?;
        let init = centroids_from_indices(&features, &idx);
        let (clustering, _) = kmeans(&features, l, &init, KMEANS_MAX_ITERS)?;
        let score = silhouette_score(&features, &clustering)?;
        let better = match best {
            None => true,
            Some((s, bl)) => score > s + 1e-12 || (score > s - 1e-12 && l < bl),
        };
        if better {
            best = Some((score, l));
        }
    }
    Ok(best.expect("non-empty candidates").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMode {
    Near,
    Far,
    Random,
}

/// Greedy distance pairing baselines. Near repeatedly joins the closest
/// remaining pair, far the farthest, random a uniform matching. For odd N
/// the last three UEs form one triple.
pub fn baseline_pairing(
    features: &FeatureSet,
    mode: PairingMode,
    seed: u64,
) -> Result<Clustering> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidInput("pairing needs at least two UEs".into()));
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    match mode {
        PairingMode::Random => {
            let mut rng = seeds::stream(seed, tags::PAIRING);
            remaining.shuffle(&mut rng);
            while remaining.len() > 3 {
                let a = remaining.pop().unwrap();
                let b = remaining.pop().unwrap();
                clusters.push(vec![a, b]);
            }
            clusters.push(remaining.clone());
        }
        PairingMode::Near | PairingMode::Far => {
            while remaining.len() > 3 {
                let mut best: Option<(f64, usize, usize)> = None;
                for i in 0..remaining.len() {
                    for j in (i + 1)..remaining.len() {
                        let d = dist(
                            &features.vectors[remaining[i]],
                            &features.vectors[remaining[j]],
                        );
                        let take = match (&best, mode) {
                            (None, _) => true,
                            (Some((bd, _, _)), PairingMode::Near) => d < *bd,
                            (Some((bd, _, _)), PairingMode::Far) => d > *bd,
                            _ => unreachable!(),
                        };
                        if take {
                            best = Some((d, i, j));
                        }
                    }
                }
                let (_, i, j) = best.unwrap();
                // Remove j first; it is the larger position.
                let b = remaining.remove(j);
                let a = remaining.remove(i);
                clusters.push(vec![a, b]);
            }
            clusters.push(remaining.clone());
        }
    }
    clusters.retain(|c| !c.is_empty());
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    let mut clustering = Clustering::from_clusters(clusters, n)?;
    clustering.centroids = update_centroids(
        features,
        &clustering.assignment,
        clustering.num_clusters(),
    )?;
    Ok(clustering)
}

/// Sort every cluster strongest-first by virtual-channel norm
/// `||gamma[:, ue]||_2`; ties resolve to the lower UE index.
pub fn order_within_cluster(
    gamma: &nalgebra::DMatrix<f64>,
    clustering: &Clustering,
) -> Result<Clustering> {
    clustering
        .check_partition(gamma.ncols())
        .map_err(Error::InvalidClustering)?;
    let mut out = clustering.clone();
    for members in out.clusters.iter_mut() {
        members.sort_by(|&a, &b| {
            let na = gamma.column(a).norm();
            let nb = gamma.column(b).norm();
            nb.total_cmp(&na).then(a.cmp(&b))
        });
    }
    out.rebuild_assignment();
    Ok(out)
}
