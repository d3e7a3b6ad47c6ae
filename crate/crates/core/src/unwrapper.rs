//! Activation patterns, activation regions and their exact local linear models.
//!
//! For a fixed on/off pattern of every hidden neuron the network is an affine
//! function of its input. [`llm_coefficients`] computes that affine map by
//! pushing the identity through the layers with the inactive rows zeroed, and
//! [`unwrap`] groups a dataset by pattern to recover the equivalent set of
//! local linear models together with per-region summary statistics.
//!
//! A neuron counts as active iff its pre-activation is strictly positive.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, Task};
use crate::metrics;
use crate::network::{dot, Link, NetworkError, ReluNetwork};

#[derive(Debug, Error)]
pub enum UnwrapError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("network expects {expected} features, dataset has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("pattern has {found} bits, network has {expected} hidden neurons")]
    PatternLength { expected: usize, found: usize },
    #[error("grid enumeration needs a 2-input network, got {0} inputs")]
    GridDimension(usize),
    #[error("grid resolution must be at least 2")]
    GridResolution,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// On/off state of every hidden neuron, bit-packed, layer segments in order.
#[derive(Clone)]
pub struct ActivationPattern {
    words: Vec<u64>,
    layer_sizes: Arc<[usize]>,
    hash: u64,
}

impl ActivationPattern {
    pub fn from_bits(bits: &[bool], layer_sizes: &[usize]) -> Self {
        assert_eq!(bits.len(), layer_sizes.iter().sum::<usize>(), "bit count");
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self::from_words(words, layer_sizes.into())
    }

    fn from_words(words: Vec<u64>, layer_sizes: Arc<[usize]>) -> Self {
        // FNV-1a over the words; stable across runs.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in &words {
            for byte in w.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Self {
            words,
            layer_sizes,
            hash: h,
        }
    }

    /// Total number of hidden neurons.
    pub fn len(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Bits of hidden layer `l` (0-based).
    pub fn layer(&self, l: usize) -> Vec<bool> {
        let start: usize = self.layer_sizes[..l].iter().sum();
        (start..start + self.layer_sizes[l]).map(|i| self.bit(i)).collect()
    }

    /// Trivial iff some hidden layer is entirely inactive.
    pub fn is_trivial(&self) -> bool {
        let mut start = 0;
        for &n in self.layer_sizes.iter() {
            if (start..start + n).all(|i| !self.bit(i)) {
                return true;
            }
            start += n;
        }
        false
    }

    /// The pattern restricted to the first `layers` hidden layers.
    pub fn truncate(&self, layers: usize) -> ActivationPattern {
        let sizes: Vec<usize> = self.layer_sizes[..layers.min(self.layer_sizes.len())].to_vec();
        let n: usize = sizes.iter().sum();
        let bits: Vec<bool> = (0..n).map(|i| self.bit(i)).collect();
        Self::from_bits(&bits, &sizes)
    }

    /// Stable 64-bit hash, rendered as 16 hex digits in reports.
    pub fn stable_hash(&self) -> u64 {
        self.hash
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash)
    }
}

impl PartialEq for ActivationPattern {
    fn eq(&self, other: &Self) -> bool {
        self.hash == other.hash && self.words == other.words && self.layer_sizes == other.layer_sizes
    }
}

impl Eq for ActivationPattern {}

impl Hash for ActivationPattern {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.hash);
    }
}

impl Ord for ActivationPattern {
    /// Lexicographic on the bit sequence, neuron 0 first.
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.words.iter().zip(&other.words) {
            let diff = a ^ b;
            if diff != 0 {
                let i = diff.trailing_zeros();
                return if a >> i & 1 == 0 {
                    Ordering::Less
                } else {
                    Ordering::Greater
                };
            }
        }
        self.len().cmp(&other.len())
    }
}

impl PartialOrd for ActivationPattern {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Layers separated by `|`, e.g. `11|0110`.
impl fmt::Display for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut i = 0;
        for (l, &n) in self.layer_sizes.iter().enumerate() {
            if l > 0 {
                f.write_str("|")?;
            }
            for _ in 0..n {
                f.write_str(if self.bit(i) { "1" } else { "0" })?;
                i += 1;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActivationPattern({self})")
    }
}

/// Pattern and linear predictor in one pass, reusing caller buffers.
pub(crate) struct PatternScratch {
    chi: Vec<f64>,
    z: Vec<f64>,
    words: Vec<u64>,
    layer_sizes: Arc<[usize]>,
}

impl PatternScratch {
    pub(crate) fn new(net: &ReluNetwork) -> Self {
        Self {
            chi: Vec::new(),
            z: Vec::new(),
            words: Vec::new(),
            layer_sizes: net.hidden_sizes().into(),
        }
    }

    pub(crate) fn eval(&mut self, net: &ReluNetwork, x: &[f64]) -> (ActivationPattern, f64) {
        let total = net.total_hidden();
        self.words.clear();
        self.words.resize(total.div_ceil(64), 0);
        self.chi.clear();
        self.chi.extend_from_slice(x);
        let layers = net.layers();
        let mut bit = 0;
        for layer in &layers[..layers.len() - 1] {
            layer.affine_into(&self.chi, &mut self.z);
            for v in self.z.iter_mut() {
                if *v > 0.0 {
                    self.words[bit / 64] |= 1 << (bit % 64);
                } else {
                    *v = 0.0;
                }
                bit += 1;
            }
            std::mem::swap(&mut self.chi, &mut self.z);
        }
        let head = layers.last().expect("nonempty");
        let eta = dot(head.row(0), &self.chi) + head.biases()[0];
        (
            ActivationPattern::from_words(self.words.clone(), self.layer_sizes.clone()),
            eta,
        )
    }
}

/// Bit `i` of layer `l` is set iff `z_i^(l) > 0`.
pub fn activation_pattern(net: &ReluNetwork, x: &[f64]) -> Result<ActivationPattern, UnwrapError> {
    if x.len() != net.input_dim() {
        return Err(NetworkError::InputShape {
            expected: net.input_dim(),
            found: x.len(),
        }
        .into());
    }
    Ok(PatternScratch::new(net).eval(net, x).0)
}

/// `eta^P(x) = w . x + b` on the activation region of `pattern`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLinearModel {
    pub w_tilde: Vec<f64>,
    pub b_tilde: f64,
    pub pattern: ActivationPattern,
}

impl LocalLinearModel {
    #[inline]
    pub fn eta(&self, x: &[f64]) -> f64 {
        dot(&self.w_tilde, x) + self.b_tilde
    }
}

/// Closed-form local linear model of `pattern`.
///
/// Carries the affine map `x -> A x + c` from the input to the current
/// layer's post-activation, zeroing the rows of inactive neurons at every
/// layer, and finishes with the output row. A layer with no active neuron
/// zeroes the map, so trivial patterns give `w_tilde == 0` exactly.
pub fn llm_coefficients(net: &ReluNetwork, pattern: &ActivationPattern) -> Result<LocalLinearModel, UnwrapError> {
    if pattern.len() != net.total_hidden() || pattern.layer_sizes() != net.hidden_sizes() {
        return Err(UnwrapError::PatternLength {
            expected: net.total_hidden(),
            found: pattern.len(),
        });
    }
    let d = net.input_dim();
    // a: width x d row-major, starts as the identity on the input.
    let mut width = d;
    let mut a: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    let mut c = vec![0.0; d];
    let mut bit = 0;
    let layers = net.layers();
    for layer in &layers[..layers.len() - 1] {
        let out = layer.out_dim();
        let mut a_next = vec![0.0; out * d];
        let mut c_next = vec![0.0; out];
        for i in 0..out {
            let active = pattern.bit(bit + i);
            if !active {
                continue;
            }
            let row = layer.row(i);
            let target = &mut a_next[i * d..(i + 1) * d];
            for (k, &wik) in row.iter().enumerate().take(width) {
                if wik == 0.0 {
                    continue;
                }
                let src = &a[k * d..(k + 1) * d];
                for (t, s) in target.iter_mut().zip(src) {
                    *t += wik * s;
                }
            }
            c_next[i] = dot(row, &c) + layer.biases()[i];
        }
        bit += out;
        a = a_next;
        c = c_next;
        width = out;
    }
    let head = layers.last().expect("nonempty");
    let w_out = head.row(0);
    let mut w_tilde = vec![0.0; d];
    for (k, &wk) in w_out.iter().enumerate() {
        for (t, s) in w_tilde.iter_mut().zip(&a[k * d..(k + 1) * d]) {
            *t += wk * s;
        }
    }
    let b_tilde = dot(w_out, &c) + head.biases()[0];
    Ok(LocalLinearModel {
        w_tilde,
        b_tilde,
        pattern: pattern.clone(),
    })
}

/// Checks `(-1)^P o z <= 0` at every hidden layer for the pre-activations of
/// `x`, i.e. `z >= 0` on active neurons and `z <= 0` on inactive ones.
pub fn region_constraints_hold(net: &ReluNetwork, pattern: &ActivationPattern, x: &[f64]) -> Result<bool, UnwrapError> {
    let fp = net.forward(x)?;
    let mut bit = 0;
    for z in &fp.preactivations {
        for &zi in z {
            let sign = if pattern.bit(bit) { -1.0 } else { 1.0 };
            if sign * zi > 0.0 {
                return Ok(false);
            }
            bit += 1;
        }
    }
    Ok(true)
}

/// One data-induced activation region.
#[derive(Debug, Clone)]
pub struct RegionRecord {
    pub pattern: ActivationPattern,
    pub llm: LocalLinearModel,
    /// Sorted indices into the unwrapped dataset.
    pub instance_indices: Vec<usize>,
    pub count: usize,
    pub response_mean: f64,
    /// Population standard deviation.
    pub response_std: f64,
    /// MSE (identity link) or AUC (logit link) of the region's LLM on its
    /// members. `None` for single-class regions under the logit link.
    pub local_perf: Option<f64>,
    /// The same metric with the region's LLM applied to every instance.
    pub global_perf: Option<f64>,
    pub center: Vec<f64>,
    /// All member responses identical (single-instance or single-class).
    pub single_flag: bool,
}

/// The equivalent set of local linear models of a network on a dataset.
#[derive(Debug, Clone)]
pub struct UnwrapResult {
    /// Sorted by count descending, ties by pattern bits.
    pub regions: Vec<RegionRecord>,
    pub net_fingerprint: String,
    pub dataset_fingerprint: String,
    pub task: Task,
    pub link: Link,
    pub input_dim: usize,
    pub n_instances: usize,
    pub feature_names: Vec<String>,
    /// Network MSE or AUC on the unwrapped dataset.
    pub network_perf: Option<f64>,
    index: HashMap<ActivationPattern, usize>,
}

impl UnwrapResult {
    /// Assemble a result from already computed region records; sorts them
    /// and builds the pattern index.
    pub fn from_regions(
        mut regions: Vec<RegionRecord>,
        task: Task,
        link: Link,
        input_dim: usize,
        feature_names: Vec<String>,
        network_perf: Option<f64>,
    ) -> Self {
        regions.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.pattern.cmp(&b.pattern)));
        let index = regions
            .iter()
            .enumerate()
            .map(|(i, r)| (r.pattern.clone(), i))
            .collect();
        let n_instances = regions.iter().map(|r| r.count).sum();
        Self {
            regions,
            net_fingerprint: String::new(),
            dataset_fingerprint: String::new(),
            task,
            link,
            input_dim,
            n_instances,
            feature_names,
            network_perf,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Region id (rank) of a pattern seen in the unwrapped data.
    pub fn region_of(&self, pattern: &ActivationPattern) -> Option<usize> {
        self.index.get(pattern).copied()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.count).collect()
    }

    /// Region id of every instance of the unwrapped dataset.
    pub fn instance_regions(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_instances];
        for (r, rec) in self.regions.iter().enumerate() {
            for &i in &rec.instance_indices {
                out[i] = r;
            }
        }
        out
    }
}

fn task_metric(task: Task, scores: &[f64], y: &[f64]) -> Option<f64> {
    match task {
        Task::Regression => Some(metrics::mse(scores, y)),
        Task::Classification => metrics::auc(scores, y),
    }
}

/// Group `data` by activation pattern and derive every region's local
/// linear model and summary statistics.
pub fn unwrap(net: &ReluNetwork, data: &Dataset) -> Result<UnwrapResult, UnwrapError> {
    if data.is_empty() {
        return Err(UnwrapError::EmptyDataset);
    }
    if data.dim() != net.input_dim() {
        return Err(UnwrapError::DimensionMismatch {
            expected: net.input_dim(),
            found: data.dim(),
        });
    }
    let evaluated: Vec<(ActivationPattern, f64)> = (0..data.len())
        .into_par_iter()
        .map_init(|| PatternScratch::new(net), |s, i| s.eval(net, data.row(i)))
        .collect();

    let mut groups: HashMap<&ActivationPattern, Vec<usize>> = HashMap::new();
    for (i, (p, _)) in evaluated.iter().enumerate() {
        groups.entry(p).or_default().push(i);
    }
    let mut groups: Vec<(&ActivationPattern, Vec<usize>)> = groups.into_iter().collect();
    groups.sort_by(|a, b| a.0.cmp(b.0));

    let y = data.response();
    let task = data.task();
    let net_eta: Vec<f64> = evaluated.iter().map(|e| e.1).collect();
    let network_perf = task_metric(task, &net_eta, y);

    let regions: Vec<RegionRecord> = groups
        .into_par_iter()
        .map(|(pattern, idx)| {
            let llm = llm_coefficients(net, pattern).expect("pattern from this network");
            region_record(llm, idx, data)
        })
        .collect();

    let mut result = UnwrapResult::from_regions(
        regions,
        task,
        net.link(),
        net.input_dim(),
        data.feature_names().to_vec(),
        network_perf,
    );
    result.net_fingerprint = net.fingerprint();
    result.dataset_fingerprint = data.fingerprint();
    Ok(result)
}

fn region_record(llm: LocalLinearModel, idx: Vec<usize>, data: &Dataset) -> RegionRecord {
    let y = data.response();
    let d = data.dim();
    let count = idx.len();
    let member_y: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let response_mean = member_y.iter().sum::<f64>() / count as f64;
    let response_std =
        (member_y.iter().map(|v| (v - response_mean).powi(2)).sum::<f64>() / count as f64).sqrt();
    let single_flag = member_y.iter().all(|&v| v == member_y[0]);
    let mut center = vec![0.0; d];
    for &i in &idx {
        for (c, x) in center.iter_mut().zip(data.row(i)) {
            *c += x;
        }
    }
    for c in &mut center {
        *c /= count as f64;
    }
    let member_scores: Vec<f64> = idx.iter().map(|&i| llm.eta(data.row(i))).collect();
    let all_scores: Vec<f64> = data.rows().map(|x| llm.eta(x)).collect();
    let local_perf = task_metric(data.task(), &member_scores, &member_y);
    let global_perf = task_metric(data.task(), &all_scores, y);
    RegionRecord {
        pattern: llm.pattern.clone(),
        llm,
        instance_indices: idx,
        count,
        response_mean,
        response_std,
        local_perf,
        global_perf,
        center,
        single_flag,
    }
}

/// Membership of a new point in the training-induced pattern set.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub pattern: ActivationPattern,
    pub region: Option<usize>,
}

impl Assignment {
    pub fn is_member(&self) -> bool {
        self.region.is_some()
    }
}

pub fn assign_region(result: &UnwrapResult, net: &ReluNetwork, x: &[f64]) -> Result<Assignment, UnwrapError> {
    let pattern = activation_pattern(net, x)?;
    let region = result.region_of(&pattern);
    Ok(Assignment { pattern, region })
}

/// Patterns realized at the nodes of a regular 2-D grid.
#[derive(Debug, Clone)]
pub struct GridEnumeration {
    pub resolution: usize,
    pub bounds: [(f64, f64); 2],
    /// Distinct patterns in order of first appearance (row-major scan).
    pub patterns: Vec<ActivationPattern>,
    /// Pattern id per node; row `r` has `x2 = lo + (hi - lo) r / (res - 1)`.
    pub cells: Vec<u32>,
}

impl GridEnumeration {
    pub fn node(&self, row: usize, col: usize) -> [f64; 2] {
        grid_node(&self.bounds, self.resolution, row, col)
    }

    /// Number of distinct patterns when only the first `layers` hidden
    /// layers are considered.
    pub fn distinct_prefixes(&self, layers: usize) -> usize {
        let set: std::collections::HashSet<ActivationPattern> =
            self.patterns.iter().map(|p| p.truncate(layers)).collect();
        set.len()
    }

    /// Node count per pattern id.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.patterns.len()];
        for &c in &self.cells {
            a[c as usize] += 1;
        }
        a
    }
}

fn grid_node(bounds: &[(f64, f64); 2], res: usize, row: usize, col: usize) -> [f64; 2] {
    let t = |(lo, hi): (f64, f64), k: usize| lo + (hi - lo) * k as f64 / (res - 1) as f64;
    [t(bounds[0], col), t(bounds[1], row)]
}

pub fn enumerate_regions_grid(
    net: &ReluNetwork,
    bounds: [(f64, f64); 2],
    resolution: usize,
) -> Result<GridEnumeration, UnwrapError> {
    if net.input_dim() != 2 {
        return Err(UnwrapError::GridDimension(net.input_dim()));
    }
    if resolution < 2 {
        return Err(UnwrapError::GridResolution);
    }
    let rows: Vec<Vec<ActivationPattern>> = (0..resolution)
        .into_par_iter()
        .map_init(
            || PatternScratch::new(net),
            |s, r| {
                (0..resolution)
                    .map(|c| s.eval(net, &grid_node(&bounds, resolution, r, c)).0)
                    .collect()
            },
        )
        .collect();
    let mut ids: HashMap<ActivationPattern, u32> = HashMap::new();
    let mut patterns = Vec::new();
    let mut cells = Vec::with_capacity(resolution * resolution);
    for row in rows {
        for p in row {
            let next = patterns.len() as u32;
            let id = *ids.entry(p.clone()).or_insert_with(|| {
                patterns.push(p);
                next
            });
            cells.push(id);
        }
    }
    Ok(GridEnumeration {
        resolution,
        bounds,
        patterns,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{toy_network, Layer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, d: usize, hidden: &[usize], link: Link) -> ReluNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut width = d;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            let w = (0..width * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = (0..h).map(|_| rng.random_range(-0.5..0.5)).collect();
            layers.push(Layer::new(width, h, w, b));
            width = h;
        }
        ReluNetwork::new(d, link, layers).unwrap()
    }

    fn naive_pattern(net: &ReluNetwork, x: &[f64]) -> Vec<bool> {
        let mut bits = Vec::new();
        let mut chi = x.to_vec();
        for layer in &net.layers()[..net.layers().len() - 1] {
            let mut next = Vec::new();
            for i in 0..layer.out_dim() {
                let mut z = layer.biases()[i];
                for j in 0..layer.in_dim() {
                    z += layer.weight(i, j) * chi[j];
                }
                bits.push(z > 0.0);
                next.push(if z > 0.0 { z } else { 0.0 });
            }
            chi = next;
        }
        bits
    }

    #[test]
    fn toy_layer_one_patterns() {
        let net = toy_network();
        let p = activation_pattern(&net, &[0.0, 0.5]).unwrap();
        assert_eq!(p.layer(0), vec![true, true]);
        let q = activation_pattern(&net, &[0.0, -0.5]).unwrap();
        assert_eq!(q.layer(0), vec![false, false]);
        assert!(q.is_trivial());
    }

    #[test]
    fn pattern_matches_naive_recomputation() {
        let net = random_net(5, 3, &[6, 5, 4], Link::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = activation_pattern(&net, &x).unwrap();
            let bits = naive_pattern(&net, &x);
            assert_eq!(p, ActivationPattern::from_bits(&bits, net.hidden_sizes()));
        }
    }

    #[test]
    fn single_layer_all_active_collapses() {
        let net = random_net(2, 3, &[4], Link::Identity);
        let p = ActivationPattern::from_bits(&[true; 4], &[4]);
        let llm = llm_coefficients(&net, &p).unwrap();
        let (w0, w1) = (&net.layers()[0], &net.layers()[1]);
        for j in 0..3 {
            let want: f64 = (0..4).map(|i| w1.weight(0, i) * w0.weight(i, j)).sum();
            assert!((llm.w_tilde[j] - want).abs() < 1e-15);
        }
        let want_b: f64 = (0..4).map(|i| w1.weight(0, i) * w0.biases()[i]).sum::<f64>() + w1.biases()[0];
        assert!((llm.b_tilde - want_b).abs() < 1e-15);
    }

    #[test]
    fn all_inactive_is_constant_output_bias() {
        let net = random_net(3, 2, &[3, 4], Link::Logit);
        let p = ActivationPattern::from_bits(&[false; 7], &[3, 4]);
        let llm = llm_coefficients(&net, &p).unwrap();
        assert!(llm.w_tilde.iter().all(|&w| w == 0.0));
        assert_eq!(llm.b_tilde, net.layers()[2].biases()[0]);
    }

    #[test]
    fn trivial_patterns_have_zero_slopes() {
        let net = random_net(4, 2, &[3, 3], Link::Identity);
        let p = ActivationPattern::from_bits(&[true, false, true, false, false, false], &[3, 3]);
        assert!(p.is_trivial());
        let llm = llm_coefficients(&net, &p).unwrap();
        assert!(llm.w_tilde.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn llm_reproduces_forward_pass() {
        let net = random_net(8, 2, &[3, 4], Link::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = activation_pattern(&net, &x).unwrap();
            let llm = llm_coefficients(&net, &p).unwrap();
            assert!((llm.eta(&x) - net.eta(&x).unwrap()).abs() <= 1e-9);
        }
    }

    #[test]
    fn wrong_pattern_length() {
        let net = toy_network();
        let p = ActivationPattern::from_bits(&[true; 3], &[3]);
        assert!(matches!(llm_coefficients(&net, &p), Err(UnwrapError::PatternLength { .. })));
    }

    #[test]
    fn pattern_order_and_display() {
        let a = ActivationPattern::from_bits(&[false, true, true], &[1, 2]);
        let b = ActivationPattern::from_bits(&[true, false, false], &[1, 2]);
        assert!(a < b);
        assert_eq!(a.to_string(), "0|11");
        assert_eq!(b.truncate(1).to_string(), "1");
    }

    #[test]
    fn singleton_dataset() {
        let net = toy_network();
        let d = Dataset::from_rows(&[vec![0.1, 0.7]], vec![1.5], Task::Regression).unwrap();
        let r = unwrap(&net, &d).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.regions[0].count, 1);
        assert!(r.regions[0].single_flag);
        let e = net.predict(&[0.1, 0.7]).unwrap() - 1.5;
        assert_eq!(r.regions[0].local_perf, Some(e * e));
        assert_eq!(r.regions[0].center, vec![0.1, 0.7]);
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(matches!(
            Dataset::from_rows(&[], vec![], Task::Regression),
            Err(crate::data::DataError::Empty)
        ));
    }

    #[test]
    fn unwrap_partitions_and_is_exact() {
        let net = random_net(12, 2, &[5, 5], Link::Logit);
        let data = crate::data::gen_cocircles(300, 0.1, 3);
        let r = unwrap(&net, &data).unwrap();
        let mut seen = vec![0u32; data.len()];
        for rec in &r.regions {
            assert_eq!(rec.count, rec.instance_indices.len());
            assert!(rec.instance_indices.windows(2).all(|w| w[0] < w[1]));
            for &i in &rec.instance_indices {
                seen[i] += 1;
                let eta = net.eta(data.row(i)).unwrap();
                assert!((rec.llm.eta(data.row(i)) - eta).abs() <= 1e-9 + 1e-9 * eta.abs());
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(r.regions.windows(2).all(|w| w[0].count >= w[1].count));
    }

    #[test]
    fn assignment_membership() {
        let net = toy_network();
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![0.0, 0.2 + 0.03 * i as f64]).collect();
        let y = (0..20).map(|i| i as f64).collect();
        let data = Dataset::from_rows(&rows, y, Task::Regression).unwrap();
        let r = unwrap(&net, &data).unwrap();
        let a = assign_region(&r, &net, data.row(5)).unwrap();
        assert!(a.is_member());
        assert!(r.regions[a.region.unwrap()].instance_indices.contains(&5));
        let b = assign_region(&r, &net, &[0.0, -0.5]).unwrap();
        assert!(!b.is_member());
    }

    #[test]
    fn grid_on_zero_network_has_one_pattern() {
        let net = ReluNetwork::zeros(2, &[3, 2], Link::Identity);
        let g = enumerate_regions_grid(&net, [(-1.0, 1.0), (-1.0, 1.0)], 50).unwrap();
        assert_eq!(g.patterns.len(), 1);
        assert!(g.patterns[0].is_trivial());
    }

    #[test]
    fn grid_errors() {
        let net = random_net(1, 3, &[2], Link::Identity);
        assert!(matches!(
            enumerate_regions_grid(&net, [(0.0, 1.0), (0.0, 1.0)], 10),
            Err(UnwrapError::GridDimension(3))
        ));
        assert!(matches!(
            enumerate_regions_grid(&toy_network(), [(0.0, 1.0), (0.0, 1.0)], 1),
            Err(UnwrapError::GridResolution)
        ));
    }
}
