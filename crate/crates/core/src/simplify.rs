//! Merging of locally homogeneous LLMs and flattening into a single hidden
//! layer network.
//!
//! Regions are clustered on their `(w, b)` vectors by Ward linkage, where
//! only clusters joined by an edge of the symmetrized T-nearest-neighbor graph
//! over region centers may merge. Clusters holding fewer than `tau` instances
//! are absorbed by an adjacent cluster, each cluster gets a refitted GLM, and
//! the number of clusters is chosen on a held-out part of the data.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{holdout_split, Dataset, Task};
use crate::glm::{self, Family, GlmError, GlmFit, Penalty};
use crate::metrics;
use crate::network::{Layer, ReluNetwork};
use crate::report::{line, num, opt_num};
use crate::trainer::{self, TrainConfig, TrainError, TrainReport};
use crate::unwrapper::{activation_pattern, UnwrapError, UnwrapResult};

#[derive(Debug, Error)]
pub enum SimplifyError {
    #[error("unwrap result has no regions")]
    Empty,
    #[error("dataset has {found} rows, unwrap result covers {expected}")]
    DatasetMismatch { expected: usize, found: usize },
    #[error("invalid merge config: {0}")]
    Config(String),
    #[error("refit of cluster {cluster} failed: {source}")]
    Refit { cluster: usize, source: GlmError },
    #[error("output layer fit failed: {0}")]
    OutputFit(GlmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Unwrap(#[from] UnwrapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refit {
    Glm,
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub k_grid: Vec<usize>,
    /// Neighbor count; `None` means `ceil(1% of the region count)`.
    pub neighbors: Option<usize>,
    pub tau: usize,
    pub refit: Refit,
    /// lambda for `l1`, C for `l2`.
    pub strength: f64,
    /// Share of instances held out from the refits to choose K.
    pub validation_fraction: f64,
    pub seed: u64,
    /// z-score coefficient columns before clustering.
    pub standardize: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 20],
            neighbors: None,
            tau: 30,
            refit: Refit::Glm,
            strength: 1.0,
            validation_fraction: 0.2,
            seed: 0,
            standardize: false,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), SimplifyError> {
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(SimplifyError::Config("K values must be at least 1".into()));
        }
        if self.neighbors == Some(0) {
            return Err(SimplifyError::Config("neighbor count must be at least 1".into()));
        }
        if self.tau == 0 {
            return Err(SimplifyError::Config("tau must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(SimplifyError::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if self.refit != Refit::Glm && !(self.strength > 0.0) {
            return Err(SimplifyError::Config("penalty strength must be positive".into()));
        }
        Ok(())
    }

    pub fn penalty(&self) -> Penalty {
        match self.refit {
            Refit::Glm => Penalty::None,
            Refit::L1 => Penalty::L1(self.strength),
            Refit::L2 => Penalty::L2(self.strength),
        }
    }
}

/// Penalty used when the configured refit fails on a cluster.
const FALLBACK_PENALTY: Penalty = Penalty::L2(1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Region ids (ranks in the unwrap result), ascending.
    pub regions: Vec<usize>,
    pub count: usize,
    pub response_mean: f64,
    pub response_std: f64,
    /// Mean of the member instances.
    pub center: Vec<f64>,
    pub refit: GlmFit,
    /// The configured refit failed and the l2 fallback was used.
    pub refit_fallback: bool,
    pub local_perf: Option<f64>,
    pub global_perf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    /// Clusters left after small-cluster absorption.
    pub clusters: usize,
    pub validation_perf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedModel {
    pub config: MergeConfig,
    pub task: Task,
    pub input_dim: usize,
    pub feature_names: Vec<String>,
    pub net_fingerprint: String,
    /// Neighbor count after growing it until the graph was connected.
    pub neighbors: usize,
    pub chosen_k: usize,
    pub k_scores: Vec<KScore>,
    /// Sorted by instance count descending.
    pub clusters: Vec<Cluster>,
    /// Cluster of every region.
    pub region_cluster: Vec<usize>,
    pub region_centers: Vec<Vec<f64>>,
    pub region_hashes: Vec<String>,
}

impl MergedModel {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("merged model serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Cluster for an arbitrary point: its own region's cluster when the
    /// pattern was seen, else a vote among the clusters of the T region
    /// centers nearest to `x` (ties go to the cluster of the nearest one).
    pub fn assign(&self, result: &UnwrapResult, net: &ReluNetwork, x: &[f64]) -> Result<(usize, bool), SimplifyError> {
        let pattern = activation_pattern(net, x)?;
        if let Some(r) = result.region_of(&pattern) {
            return Ok((self.region_cluster[r], true));
        }
        let mut near: Vec<(f64, usize)> = self
            .region_centers
            .iter()
            .enumerate()
            .map(|(r, c)| (sq_dist(c, x), r))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(self.neighbors.max(1));
        let mut votes = vec![0usize; self.clusters.len()];
        for &(_, r) in &near {
            votes[self.region_cluster[r]] += 1;
        }
        let best = *votes.iter().max().expect("at least one cluster");
        let cluster = near
            .iter()
            .map(|&(_, r)| self.region_cluster[r])
            .find(|&c| votes[c] == best)
            .expect("winner among neighbors");
        Ok((cluster, false))
    }

    /// Linear predictor of the assigned cluster's refit.
    pub fn eta(&self, result: &UnwrapResult, net: &ReluNetwork, x: &[f64]) -> Result<f64, SimplifyError> {
        let (c, _) = self.assign(result, net, x)?;
        Ok(self.clusters[c].refit.eta(x))
    }
}

/// Prediction on the response scale.
pub fn predict_merged(model: &MergedModel, result: &UnwrapResult, net: &ReluNetwork, x: &[f64]) -> Result<f64, SimplifyError> {
    let (c, _) = model.assign(result, net, x)?;
    Ok(model.clusters[c].refit.predict(x))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Symmetrized T-nearest-neighbor graph over `points`, ties by index.
pub fn knn_graph(points: &[Vec<f64>], t: usize) -> Vec<BTreeSet<usize>> {
    let m = points.len();
    let mut adj = vec![BTreeSet::new(); m];
    for i in 0..m {
        let mut d: Vec<(f64, usize)> = (0..m).filter(|&j| j != i).map(|j| (sq_dist(&points[i], &points[j]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in d.iter().take(t) {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    adj
}

pub fn is_connected(adj: &[BTreeSet<usize>]) -> bool {
    if adj.is_empty() {
        return true;
    }
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == adj.len()
}

/// Smallest neighbor count `>= start` whose graph is connected.
pub fn connected_knn_graph(points: &[Vec<f64>], start: usize) -> (usize, Vec<BTreeSet<usize>>) {
    let m = points.len();
    let mut t = start.max(1).min(m.saturating_sub(1).max(1));
    loop {
        let g = knn_graph(points, t);
        if is_connected(&g) || t + 1 >= m {
            return (t, g);
        }
        t += 1;
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Cost(f64);

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// One agglomeration step: clusters `a` and `b` became cluster `merged`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeStep {
    pub a: usize,
    pub b: usize,
    pub merged: usize,
}

/// Ward linkage restricted to `adj`. Leaves are `0..m`, new clusters get
/// ids `m, m+1, ...`; ties go to the pair with the smallest ids.
pub fn ward_tree(vectors: &[Vec<f64>], adj: &[BTreeSet<usize>]) -> Vec<MergeStep> {
    let m = vectors.len();
    let dim = vectors.first().map_or(0, Vec::len);
    let mut size: Vec<f64> = vec![1.0; m];
    let mut sum: Vec<Vec<f64>> = vectors.to_vec();
    let mut alive = vec![true; m];
    let mut nbrs: Vec<BTreeSet<usize>> = adj.to_vec();
    let ward = |size: &[f64], sum: &[Vec<f64>], a: usize, b: usize| -> f64 {
        let (na, nb) = (size[a], size[b]);
        let d2: f64 = (0..dim).map(|k| (sum[a][k] / na - sum[b][k] / nb).powi(2)).sum();
        na * nb / (na + nb) * d2
    };
    let mut heap = BinaryHeap::new();
    for a in 0..m {
        for &b in &nbrs[a] {
            if a < b {
                heap.push(Reverse((Cost(ward(&size, &sum, a, b)), a, b)));
            }
        }
    }
    let mut steps = Vec::with_capacity(m.saturating_sub(1));
    while let Some(Reverse((_, a, b))) = heap.pop() {
        if !alive[a] || !alive[b] {
            continue;
        }
        let id = size.len();
        alive[a] = false;
        alive[b] = false;
        alive.push(true);
        size.push(size[a] + size[b]);
        let s: Vec<f64> = (0..dim).map(|k| sum[a][k] + sum[b][k]).collect();
        sum.push(s);
        let mut joined: BTreeSet<usize> = nbrs[a].union(&nbrs[b]).copied().collect();
        joined.remove(&a);
        joined.remove(&b);
        for &c in &joined {
            nbrs[c].remove(&a);
            nbrs[c].remove(&b);
            nbrs[c].insert(id);
        }
        for &c in &joined {
            heap.push(Reverse((Cost(ward(&size, &sum, c, id)), c, id)));
        }
        nbrs.push(joined);
        nbrs[a].clear();
        nbrs[b].clear();
        steps.push(MergeStep { a, b, merged: id });
    }
    steps
}

/// Leaf labels after applying the first `m - k` steps, numbered by smallest
/// member leaf.
pub fn cut_tree(m: usize, steps: &[MergeStep], k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..m + steps.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for s in steps.iter().take(m.saturating_sub(k)) {
        parent[s.a] = s.merged;
        parent[s.b] = s.merged;
    }
    let roots: Vec<usize> = (0..m).map(|i| find(&mut parent, i)).collect();
    let mut relabel = std::collections::HashMap::new();
    roots
        .iter()
        .map(|r| {
            let next = relabel.len();
            *relabel.entry(*r).or_insert(next)
        })
        .collect()
}

/// Absorb clusters with fewer than `tau` instances, smallest first, into the
/// adjacent cluster whose instance-weighted center is nearest (preferring
/// clusters that are already large). Returns compact labels.
fn absorb_small(
    labels: &[usize],
    adj: &[BTreeSet<usize>],
    region_counts: &[usize],
    region_centers: &[Vec<f64>],
    tau: usize,
) -> Vec<usize> {
    let mut lab = labels.to_vec();
    let d = region_centers.first().map_or(0, Vec::len);
    loop {
        let n_lab = lab.iter().max().map_or(0, |m| m + 1);
        let mut count = vec![0usize; n_lab];
        let mut wsum = vec![vec![0.0; d]; n_lab];
        for (r, &c) in lab.iter().enumerate() {
            count[c] += region_counts[r];
            for k in 0..d {
                wsum[c][k] += region_counts[r] as f64 * region_centers[r][k];
            }
        }
        let live: Vec<usize> = (0..n_lab).filter(|&c| count[c] > 0).collect();
        if live.len() <= 1 {
            break;
        }
        let small = live
            .iter()
            .copied()
            .filter(|&c| count[c] < tau)
            .min_by(|&a, &b| count[a].cmp(&count[b]).then(a.cmp(&b)));
        let Some(s) = small else { break };
        let mut neighbors = BTreeSet::new();
        for (r, &c) in lab.iter().enumerate() {
            if c == s {
                for &q in &adj[r] {
                    if lab[q] != s {
                        neighbors.insert(lab[q]);
                    }
                }
            }
        }
        let large: Vec<usize> = neighbors.iter().copied().filter(|&c| count[c] >= tau).collect();
        let pool: Vec<usize> = if large.is_empty() { neighbors.into_iter().collect() } else { large };
        let center = |c: usize| -> Vec<f64> { wsum[c].iter().map(|v| v / count[c] as f64).collect() };
        let cs = center(s);
        let target = pool
            .iter()
            .copied()
            .min_by(|&a, &b| sq_dist(&center(a), &cs).total_cmp(&sq_dist(&center(b), &cs)).then(a.cmp(&b)))
            .expect("connected graph gives a neighbor");
        for c in lab.iter_mut() {
            if *c == s {
                *c = target;
            }
        }
    }
    compact(&lab)
}

fn compact(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn family(task: Task) -> Family {
    match task {
        Task::Regression => Family::Gaussian,
        Task::Classification => Family::Binomial,
    }
}

fn metric(task: Task, scores: &[f64], y: &[f64]) -> Option<f64> {
    match task {
        Task::Regression => Some(metrics::mse(scores, y)),
        Task::Classification => metrics::auc(scores, y),
    }
}

/// `true` when `a` is a strictly better value of the task metric than `b`.
fn better(task: Task, a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => match task {
            Task::Regression => x < y,
            Task::Classification => x > y,
        },
        (Some(_), None) => true,
        _ => false,
    }
}

fn fit_rows(data: &Dataset, rows: &[usize], fam: Family, penalty: Penalty) -> Result<(GlmFit, bool), GlmError> {
    let d = data.dim();
    let mut x = Vec::with_capacity(rows.len() * d);
    let mut y = Vec::with_capacity(rows.len());
    for &i in rows {
        x.extend_from_slice(data.row(i));
        y.push(data.response()[i]);
    }
    match glm::fit(&x, d, &y, fam, penalty) {
        Ok(f) => Ok((f, false)),
        Err(_) if penalty != FALLBACK_PENALTY => glm::fit(&x, d, &y, fam, FALLBACK_PENALTY).map(|f| (f, true)),
        Err(e) => Err(e),
    }
}

/// Clusters the regions of `result` and refits one GLM per cluster.
pub fn merge(result: &UnwrapResult, data: &Dataset, cfg: &MergeConfig) -> Result<MergedModel, SimplifyError> {
    cfg.validate()?;
    if result.is_empty() {
        return Err(SimplifyError::Empty);
    }
    if data.len() != result.n_instances {
        return Err(SimplifyError::DatasetMismatch {
            expected: result.n_instances,
            found: data.len(),
        });
    }
    let m = result.len();
    let task = data.task();
    let fam = family(task);
    let penalty = cfg.penalty();
    let centers: Vec<Vec<f64>> = result.regions.iter().map(|r| r.center.clone()).collect();
    let counts = result.counts();
    let mut vectors: Vec<Vec<f64>> = result
        .regions
        .iter()
        .map(|r| r.llm.w_tilde.iter().copied().chain(std::iter::once(r.llm.b_tilde)).collect())
        .collect();
    if cfg.standardize {
        standardize_columns(&mut vectors);
    }
    let start = cfg.neighbors.unwrap_or_else(|| (m as f64 * 0.01).ceil() as usize).max(1);
    let (neighbors, adj) = connected_knn_graph(&centers, start);
    let steps = ward_tree(&vectors, &adj);

    let region_of_instance = result.instance_regions();
    let (keep, hold) = holdout_split(data.len(), cfg.validation_fraction, cfg.seed);
    let y = data.response();

    let mut ks: Vec<usize> = cfg.k_grid.iter().map(|&k| k.min(m)).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut k_scores = Vec::with_capacity(ks.len());
    let mut best: Option<(usize, Vec<usize>, Option<f64>)> = None;
    for &k in &ks {
        let labels = absorb_small(&cut_tree(m, &steps, k), &adj, &counts, &centers, cfg.tau);
        let n_clusters = labels.iter().max().map_or(0, |v| v + 1);
        let mut keep_rows = vec![Vec::new(); n_clusters];
        for &i in &keep {
            keep_rows[labels[region_of_instance[i]]].push(i);
        }
        let mut fits = Vec::with_capacity(n_clusters);
        for (c, rows) in keep_rows.iter().enumerate() {
            let rows = if rows.is_empty() { all_rows(&labels, &region_of_instance, c) } else { rows.clone() };
            let (f, _) = fit_rows(data, &rows, fam, penalty).map_err(|source| SimplifyError::Refit { cluster: c, source })?;
            fits.push(f);
        }
        let scores: Vec<f64> = hold
            .iter()
            .map(|&i| fits[labels[region_of_instance[i]]].eta(data.row(i)))
            .collect();
        let hold_y: Vec<f64> = hold.iter().map(|&i| y[i]).collect();
        let perf = metric(task, &scores, &hold_y);
        k_scores.push(KScore {
            k,
            clusters: n_clusters,
            validation_perf: perf,
        });
        if best.as_ref().is_none_or(|b| better(task, perf, b.2)) {
            best = Some((k, labels, perf));
        }
    }
    let (chosen_k, labels, _) = best.expect("nonempty grid");
    let n_clusters = labels.iter().max().map_or(0, |v| v + 1);

    let mut clusters = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let regions: Vec<usize> = (0..m).filter(|&r| labels[r] == c).collect();
        let rows = all_rows(&labels, &region_of_instance, c);
        let (refit, refit_fallback) =
            fit_rows(data, &rows, fam, penalty).map_err(|source| SimplifyError::Refit { cluster: c, source })?;
        clusters.push(cluster_summary(data, task, regions, &rows, refit, refit_fallback));
    }
    // Largest first, ties by smallest member region.
    let mut order: Vec<usize> = (0..n_clusters).collect();
    order.sort_by(|&a, &b| {
        clusters[b].count.cmp(&clusters[a].count).then(clusters[a].regions[0].cmp(&clusters[b].regions[0]))
    });
    let mut rank = vec![0; n_clusters];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let mut slots: Vec<Option<Cluster>> = clusters.into_iter().map(Some).collect();
    let clusters: Vec<Cluster> = order.iter().map(|&old| slots[old].take().expect("each once")).collect();
    let region_cluster = labels.iter().map(|&l| rank[l]).collect();

    Ok(MergedModel {
        config: cfg.clone(),
        task,
        input_dim: result.input_dim,
        feature_names: result.feature_names.clone(),
        net_fingerprint: result.net_fingerprint.clone(),
        neighbors,
        chosen_k,
        k_scores,
        clusters,
        region_cluster,
        region_centers: centers,
        region_hashes: result.regions.iter().map(|r| r.pattern.hash_hex()).collect(),
    })
}

fn all_rows(labels: &[usize], region_of_instance: &[usize], c: usize) -> Vec<usize> {
    (0..region_of_instance.len()).filter(|&i| labels[region_of_instance[i]] == c).collect()
}

fn standardize_columns(v: &mut [Vec<f64>]) {
    let n = v.len() as f64;
    let dim = v.first().map_or(0, Vec::len);
    for k in 0..dim {
        let mean = v.iter().map(|r| r[k]).sum::<f64>() / n;
        let sd = (v.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for r in v.iter_mut() {
            r[k] = if sd > 0.0 { (r[k] - mean) / sd } else { 0.0 };
        }
    }
}

fn cluster_summary(
    data: &Dataset,
    task: Task,
    regions: Vec<usize>,
    rows: &[usize],
    refit: GlmFit,
    refit_fallback: bool,
) -> Cluster {
    let y = data.response();
    let count = rows.len();
    let member_y: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let response_mean = member_y.iter().sum::<f64>() / count as f64;
    let response_std = (member_y.iter().map(|v| (v - response_mean).powi(2)).sum::<f64>() / count as f64).sqrt();
    let d = data.dim();
    let mut center = vec![0.0; d];
    for &i in rows {
        for (c, v) in center.iter_mut().zip(data.row(i)) {
            *c += v;
        }
    }
    center.iter_mut().for_each(|c| *c /= count as f64);
    let local: Vec<f64> = rows.iter().map(|&i| refit.eta(data.row(i))).collect();
    let global: Vec<f64> = data.rows().map(|x| refit.eta(x)).collect();
    Cluster {
        regions,
        count,
        response_mean,
        response_std,
        center,
        local_perf: metric(task, &local, &member_y),
        global_perf: metric(task, &global, y),
        refit,
        refit_fallback,
    }
}

/// A flattened network before and after fine-tuning.
#[derive(Debug, Clone)]
pub struct Flattened {
    /// Hidden layer from the cluster refits, output layer from the GLM.
    pub initial: ReluNetwork,
    pub network: ReluNetwork,
    pub output_fit: GlmFit,
    /// The unpenalized output GLM failed and the l2 fallback was used.
    pub output_fallback: bool,
    pub report: TrainReport,
}

/// Single hidden layer network with one ReLU unit per cluster: hidden rows
/// are the cluster refits, the output layer is a GLM fit on the hidden
/// activations, and the result is fine-tuned with `cfg` (its
/// `hidden_sizes` are ignored).
pub fn flatten(model: &MergedModel, data: &Dataset, cfg: &TrainConfig) -> Result<Flattened, SimplifyError> {
    let k = model.n_clusters();
    let d = model.input_dim;
    if data.dim() != d {
        return Err(SimplifyError::DatasetMismatch { expected: d, found: data.dim() });
    }
    let mut w = Vec::with_capacity(k * d);
    let mut b = Vec::with_capacity(k);
    for c in &model.clusters {
        w.extend_from_slice(c.refit.slopes());
        b.push(c.refit.intercept());
    }
    let hidden = Layer::new(d, k, w, b);
    let mut h = Vec::with_capacity(data.len() * k);
    let mut z = Vec::new();
    for x in data.rows() {
        hidden.affine_into(x, &mut z);
        h.extend(z.iter().map(|v| v.max(0.0)));
    }
    let fam = family(data.task());
    let (output_fit, output_fallback) = match glm::fit(&h, k, data.response(), fam, Penalty::None) {
        Ok(f) => (f, false),
        Err(_) => (
            glm::fit(&h, k, data.response(), fam, FALLBACK_PENALTY).map_err(SimplifyError::OutputFit)?,
            true,
        ),
    };
    let head = Layer::new(k, 1, output_fit.slopes().to_vec(), vec![output_fit.intercept()]);
    let initial = ReluNetwork::new(d, data.task().link(), vec![hidden, head]).map_err(TrainError::from)?;
    let (network, report) = trainer::finetune_with_report(&initial, data, cfg)?;
    Ok(Flattened {
        initial,
        network,
        output_fit,
        output_fallback,
        report,
    })
}

/// Test-set metric (MSE or AUC) of each model, laid out as
/// `ReLU-Net,Merge-Net,FL-Net,SLFN,n_cluster`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: Task,
    pub relu: Option<f64>,
    pub merged: Option<f64>,
    pub flattened: Option<f64>,
    pub slfn: Option<f64>,
    pub n_cluster: usize,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,ReLU-Net,Merge-Net,FL-Net,SLFN,n_cluster\n");
        let name = match self.task {
            Task::Regression => "MSE",
            Task::Classification => "AUC",
        };
        out.push_str(&line([
            name.to_string(),
            opt_num(self.relu),
            opt_num(self.merged),
            opt_num(self.flattened),
            opt_num(self.slfn),
            self.n_cluster.to_string(),
        ]));
        out
    }
}

fn net_metric(net: &ReluNetwork, test: &Dataset) -> Result<Option<f64>, SimplifyError> {
    let scores = test
        .rows()
        .map(|x| net.eta(x))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| SimplifyError::Unwrap(e.into()))?;
    Ok(metric(test.task(), &scores, test.response()))
}

/// Scores are linear predictors, so AUC is computed on the link scale.
pub fn compare_models(
    net: &ReluNetwork,
    merged: Option<(&MergedModel, &UnwrapResult)>,
    flattened: Option<&ReluNetwork>,
    slfn: Option<&ReluNetwork>,
    test: &Dataset,
) -> Result<Comparison, SimplifyError> {
    let relu = net_metric(net, test)?;
    let (merged_perf, n_cluster) = match merged {
        Some((m, result)) => {
            let scores = test
                .rows()
                .map(|x| m.eta(result, net, x))
                .collect::<Result<Vec<f64>, _>>()?;
            (metric(test.task(), &scores, test.response()), m.n_clusters())
        }
        None => (None, 0),
    };
    let flattened = flattened.map(|f| net_metric(f, test)).transpose()?.flatten();
    let slfn = slfn.map(|s| net_metric(s, test)).transpose()?.flatten();
    Ok(Comparison {
        task: test.task(),
        relu,
        merged: merged_perf,
        flattened,
        slfn,
        n_cluster,
    })
}

/// Wald tables of the cluster refits, stacked with a leading cluster column.
/// Penalized refits have no Wald table; their rows carry the coefficient
/// only.
pub fn cluster_inference_csv(model: &MergedModel, level: f64) -> Result<String, GlmError> {
    let names = glm::coefficient_names(&model.feature_names);
    let header = glm::InferenceReport {
        rows: Vec::new(),
        level,
        family: family(model.task),
        dof: None,
    }
    .column_header();
    let mut out = format!("cluster,term,{header}\n");
    for (c, cl) in model.clusters.iter().enumerate() {
        if !cl.refit.penalty.is_none() {
            for (name, b) in names.iter().zip(&cl.refit.beta_hat) {
                out.push_str(&line([
                    c.to_string(),
                    crate::report::field(name),
                    num(*b),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]));
            }
            continue;
        }
        let rep = glm::wald_inference(&cl.refit, level, &names)?;
        for r in &rep.rows {
            out.push_str(&line([
                c.to_string(),
                crate::report::field(&r.name),
                num(r.coef),
                num(r.std_err),
                num(r.statistic),
                num(r.p_value),
                num(r.ci_lower),
                num(r.ci_upper),
            ]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_cocircles;
    use crate::network::Link;
    use crate::trainer::init_network;
    use crate::unwrapper::unwrap;
    use proptest::prelude::*;

    fn toy_setup(seed: u64, n: usize) -> (ReluNetwork, Dataset, UnwrapResult) {
        let data = gen_cocircles(n, 0.1, seed);
        let net = init_network(2, &[8, 8], Link::Logit, seed).unwrap();
        let result = unwrap(&net, &data).unwrap();
        (net, data, result)
    }

    /// Brute-force Ward: scan every adjacent pair of live clusters.
    fn ward_oracle(vectors: &[Vec<f64>], adj: &[BTreeSet<usize>], k: usize) -> Vec<usize> {
        let m = vectors.len();
        let mut labels: Vec<usize> = (0..m).collect();
        let mut live: BTreeSet<usize> = (0..m).collect();
        while live.len() > k {
            let mut best: Option<(f64, usize, usize)> = None;
            for &a in &live {
                for &b in &live {
                    if a >= b {
                        continue;
                    }
                    let touching = (0..m).any(|i| labels[i] == a && adj[i].iter().any(|&j| labels[j] == b));
                    if !touching {
                        continue;
                    }
                    let mean = |c: usize| -> (f64, Vec<f64>) {
                        let mem: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
                        let dim = vectors[0].len();
                        let mu = (0..dim).map(|t| mem.iter().map(|&i| vectors[i][t]).sum::<f64>() / mem.len() as f64).collect();
                        (mem.len() as f64, mu)
                    };
                    let (na, ma) = mean(a);
                    let (nb, mb) = mean(b);
                    let cost = na * nb / (na + nb) * sq_dist(&ma, &mb);
                    if best.is_none_or(|(c, _, _)| cost < c) {
                        best = Some((cost, a, b));
                    }
                }
            }
            let (_, a, b) = best.unwrap();
            for l in labels.iter_mut() {
                if *l == b {
                    *l = a;
                }
            }
            live.remove(&b);
        }
        compact(&labels)
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn ward_matches_brute_force() {
        let pts: Vec<Vec<f64>> = (0..14).map(|i| vec![(i as f64 * 1.7).sin(), (i as f64 * 0.9).cos()]).collect();
        let vecs: Vec<Vec<f64>> = (0..14).map(|i| vec![(i as f64 * 2.3).cos(), i as f64 * 0.1, (i % 3) as f64]).collect();
        let (_, adj) = connected_knn_graph(&pts, 2);
        let steps = ward_tree(&vecs, &adj);
        assert_eq!(steps.len(), 13);
        for k in 1..=14 {
            let fast = cut_tree(14, &steps, k);
            assert_eq!(fast.iter().max().unwrap() + 1, k);
            assert!(same_partition(&fast, &ward_oracle(&vecs, &adj, k)), "k = {k}");
        }
    }

    #[test]
    fn knn_grows_until_connected() {
        let pts = vec![vec![0.0], vec![0.1], vec![0.2], vec![5.0], vec![5.1]];
        assert!(!is_connected(&knn_graph(&pts, 1)));
        let (t, g) = connected_knn_graph(&pts, 1);
        assert!(is_connected(&g));
        assert_eq!(t, 2);
    }

    #[test]
    fn single_k_is_a_global_glm() {
        let (net, data, result) = toy_setup(1, 300);
        let cfg = MergeConfig {
            k_grid: vec![1],
            ..MergeConfig::default()
        };
        let model = merge(&result, &data, &cfg).unwrap();
        assert_eq!(model.n_clusters(), 1);
        let global = glm::fit(data.features(), 2, data.response(), Family::Binomial, Penalty::None).unwrap();
        assert_eq!(model.clusters[0].refit.beta_hat, global.beta_hat);
        for x in [[0.3, -0.2], [5.0, 5.0]] {
            assert_eq!(predict_merged(&model, &result, &net, &x).unwrap(), global.predict(&x));
        }
    }

    #[test]
    fn merged_model_invariants() {
        let (net, data, result) = toy_setup(2, 600);
        let model = merge(&result, &data, &MergeConfig::default()).unwrap();
        let m = result.len();
        assert_eq!(model.region_cluster.len(), m);
        let total: usize = model.clusters.iter().map(|c| c.count).sum();
        assert_eq!(total, data.len());
        let mut seen = vec![false; m];
        for (c, cl) in model.clusters.iter().enumerate() {
            assert!(cl.count >= model.config.tau.min(data.len()));
            for &r in &cl.regions {
                assert!(!seen[r]);
                seen[r] = true;
                assert_eq!(model.region_cluster[r], c);
            }
        }
        assert!(seen.iter().all(|&s| s));
        for w in model.clusters.windows(2) {
            assert!(w[0].count >= w[1].count);
        }
        // members are connected within the kNN graph
        let centers: Vec<Vec<f64>> = result.regions.iter().map(|r| r.center.clone()).collect();
        let adj = knn_graph(&centers, model.neighbors);
        for cl in &model.clusters {
            let set: BTreeSet<usize> = cl.regions.iter().copied().collect();
            let sub: Vec<BTreeSet<usize>> = cl
                .regions
                .iter()
                .map(|r| adj[*r].iter().filter(|q| set.contains(q)).map(|q| cl.regions.binary_search(q).unwrap()).collect())
                .collect();
            assert!(is_connected(&sub));
        }
        // training instances use their own cluster's refit
        let inst = result.instance_regions();
        for i in (0..data.len()).step_by(37) {
            let c = model.region_cluster[inst[i]];
            let (a, member) = model.assign(&result, &net, data.row(i)).unwrap();
            assert!(member);
            assert_eq!(a, c);
            assert_eq!(predict_merged(&model, &result, &net, data.row(i)).unwrap(), model.clusters[c].refit.predict(data.row(i)));
        }
        let again = merge(&result, &data, &MergeConfig::default()).unwrap();
        assert_eq!(again.to_json_string(), model.to_json_string());
        let back = MergedModel::from_json_str(&model.to_json_string()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn unseen_pattern_uses_nearest_centers() {
        // Training data only above the x-axis; the probe below it falls in
        // the toy network's trivial quadrant, which no training row reaches.
        let net = crate::network::toy_network();
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i % 20) as f64 / 10.0 - 0.95, 0.05 + (i / 20) as f64 / 10.0])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] + 2.0 * r[1]).collect();
        let data = Dataset::from_rows(&rows, y, Task::Regression).unwrap();
        let result = unwrap(&net, &data).unwrap();
        let cfg = MergeConfig {
            k_grid: vec![3],
            tau: 1,
            neighbors: Some(3),
            ..MergeConfig::default()
        };
        let model = merge(&result, &data, &cfg).unwrap();
        let probe = [0.9, -0.9];
        assert!(result.region_of(&activation_pattern(&net, &probe).unwrap()).is_none());
        let mut near: Vec<(f64, usize)> =
            model.region_centers.iter().enumerate().map(|(r, c)| (sq_dist(c, &probe), r)).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        let voters: Vec<usize> = near[..model.neighbors].iter().map(|&(_, r)| model.region_cluster[r]).collect();
        let tally = |c: usize| voters.iter().filter(|&&v| v == c).count();
        let top = voters.iter().map(|&c| tally(c)).max().unwrap();
        let expected = *voters.iter().find(|&&c| tally(c) == top).unwrap();
        let (c, member) = model.assign(&result, &net, &probe).unwrap();
        assert!(!member);
        assert_eq!(c, expected);
        assert_eq!(model.eta(&result, &net, &probe).unwrap(), model.clusters[c].refit.eta(&probe));
    }

    #[test]
    fn absorption_respects_tau() {
        let centers: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let adj = knn_graph(&centers, 1);
        let labels = vec![0, 0, 1, 2, 2, 3];
        let counts = vec![20, 20, 5, 20, 20, 3];
        let out = absorb_small(&labels, &adj, &counts, &centers, 30);
        assert_eq!(out[2], out[1]);
        assert_eq!(out[5], out[4]);
        assert_ne!(out[0], out[3]);
        let all_small = absorb_small(&labels, &adj, &[1; 6], &centers, 30);
        assert!(all_small.iter().all(|&l| l == 0));
    }

    #[test]
    fn flatten_without_finetune_is_exact_composition() {
        let (_, data, result) = toy_setup(4, 400);
        let model = merge(&result, &data, &MergeConfig::default()).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            patience: 0,
            ..TrainConfig::default()
        };
        let flat = flatten(&model, &data, &cfg).unwrap();
        assert_eq!(flat.network, flat.initial);
        let hidden = &flat.network.layers()[0];
        for (u, c) in model.clusters.iter().enumerate() {
            assert_eq!(hidden.row(u), c.refit.slopes());
            assert_eq!(hidden.biases()[u], c.refit.intercept());
        }
        for x in data.rows().take(50) {
            let h: Vec<f64> = model.clusters.iter().map(|c| c.refit.eta(x).max(0.0)).collect();
            let expect = flat.output_fit.eta(&h);
            assert!((flat.network.eta(x).unwrap() - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn comparison_recomputes_metrics() {
        let (net, data, result) = toy_setup(5, 300);
        let model = merge(&result, &data, &MergeConfig::default()).unwrap();
        let cmp = compare_models(&net, Some((&model, &result)), Some(&net), Some(&net), &data).unwrap();
        assert_eq!(cmp.relu, cmp.flattened);
        assert_eq!(cmp.relu, cmp.slfn);
        let scores: Vec<f64> = data.rows().map(|x| net.eta(x).unwrap()).collect();
        let brute = metrics::auc(&scores, data.response()).unwrap();
        assert!((cmp.relu.unwrap() - brute).abs() <= 1e-12);
        assert_eq!(cmp.n_cluster, model.n_clusters());
        assert!(cmp.to_csv().starts_with("metric,ReLU-Net,Merge-Net,FL-Net,SLFN,n_cluster\nAUC,"));
    }

    #[test]
    fn config_validation() {
        let bad = MergeConfig { k_grid: vec![0], ..MergeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = MergeConfig { tau: 0, ..MergeConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(MergeConfig { refit: Refit::L2, strength: 0.1, ..MergeConfig::default() }.penalty(), Penalty::L2(0.1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn cut_gives_k_groups(seed in 0u64..500, m in 2usize..25, t in 1usize..4) {
            let pts: Vec<Vec<f64>> = (0..m).map(|i| vec![((i as u64 * 7919 + seed) % 101) as f64, (i * i % 13) as f64]).collect();
            let vecs: Vec<Vec<f64>> = (0..m).map(|i| vec![((i as u64 + seed) % 17) as f64]).collect();
            let (_, adj) = connected_knn_graph(&pts, t);
            let steps = ward_tree(&vecs, &adj);
            prop_assert_eq!(steps.len(), m - 1);
            for k in 1..=m {
                let labels = cut_tree(m, &steps, k);
                prop_assert_eq!(labels.iter().max().unwrap() + 1, k);
            }
        }
    }
}
