//! Datasets: synthetic generators, CSV ingestion, seeded splits and min-max
//! scaling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::network::Link;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("response column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row} has {found} fields, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("non-numeric value {value:?} at row {row}, column `{column}`")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("NaN at row {row}, column {column}")]
    NaN { row: usize, column: usize },
    #[error("classification response must be 0 or 1, found {value} at row {row}")]
    BadLabel { row: usize, value: f64 },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn link(self) -> Link {
        match self {
            Task::Regression => Link::Identity,
            Task::Classification => Link::Logit,
        }
    }

    pub fn from_link(link: Link) -> Self {
        match link {
            Link::Identity => Task::Regression,
            Link::Logit => Task::Classification,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// Row-major feature matrix with a response vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    features: Vec<f64>,
    response: Vec<f64>,
    feature_names: Vec<String>,
    task: Task,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        d: usize,
        response: Vec<f64>,
        feature_names: Vec<String>,
        task: Task,
    ) -> Result<Self, DataError> {
        let n = response.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if features.len() != n * d || feature_names.len() != d {
            return Err(DataError::Ragged {
                row: 0,
                expected: d,
                found: features.len() / n,
            });
        }
        if let Some(pos) = features.iter().position(|v| v.is_nan()) {
            return Err(DataError::NaN {
                row: pos / d,
                column: pos % d,
            });
        }
        for (row, &y) in response.iter().enumerate() {
            if y.is_nan() {
                return Err(DataError::NaN { row, column: d });
            }
            if task == Task::Classification && y != 0.0 && y != 1.0 {
                return Err(DataError::BadLabel { row, value: y });
            }
        }
        Ok(Self {
            n,
            d,
            features,
            response,
            feature_names,
            task,
        })
    }

    /// Feature names default to `x1..xd`.
    pub fn from_rows(rows: &[Vec<f64>], response: Vec<f64>, task: Task) -> Result<Self, DataError> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(DataError::Ragged {
                row,
                expected: d,
                found: r.len(),
            });
        }
        let features = rows.iter().flatten().copied().collect();
        Self::new(features, d, response, default_names(d), task)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.d.max(1)).take(self.n)
    }

    #[inline]
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    #[inline]
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    #[inline]
    pub fn task(&self) -> Task {
        self.task
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.d);
        let mut response = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            response.push(self.response[i]);
        }
        Dataset {
            n: idx.len(),
            d: self.d,
            features,
            response,
            feature_names: self.feature_names.clone(),
            task: self.task,
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Hex SHA-256 over the raw bit patterns of features and response.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update((self.d as u64).to_le_bytes());
        for v in self.features.iter().chain(&self.response) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes a header row and shortest round-trip decimal floats.
    pub fn write_csv(&self, path: impl AsRef<Path>, response_name: &str) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(response_name);
        w.write_record(&header)?;
        for i in 0..self.n {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.response[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Read a rectangular numeric CSV with a header row.
pub fn load_csv(path: impl AsRef<Path>, response_column: &str, task: Task) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let resp_idx = header
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| DataError::MissingColumn(response_column.to_string()))?;
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != resp_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let d = names.len();
    let mut features = Vec::new();
    let mut response = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DataError::Ragged {
                row,
                expected: header.len(),
                found: rec.len(),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::NonNumeric {
                row,
                column: header[j].clone(),
                value: cell.to_string(),
            })?;
            if j == resp_idx {
                response.push(v);
            } else {
                features.push(v);
            }
        }
    }
    Dataset::new(features, d, response, names, task)
}

/// `y = sin(2 pi / (x + 0.2)) + N(0, noise_sd^2)` with `x ~ U[0, 1]`.
pub fn chirpwave_signal(x: f64) -> f64 {
    (2.0 * PI / (x + 0.2)).sin()
}

pub fn gen_chirpwave(n: usize, noise_sd: f64, seed: u64) -> Dataset {
    assert!(n >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd.max(0.0)).expect("valid sd");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.random_range(0.0..=1.0);
        let eps = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        x.push(xi);
        y.push(chirpwave_signal(xi) + eps);
    }
    Dataset::new(x, 1, y, default_names(1), Task::Regression).expect("finite")
}

/// Inner circle radius relative to the unit outer circle.
pub const COCIRCLES_FACTOR: f64 = 0.8;

/// Two concentric circles: `n / 2` (floor) points evenly spaced on the unit
/// circle with label 0, the rest on a circle of radius 0.8 with label 1,
/// shuffled, plus isotropic Gaussian noise.
pub fn gen_cocircles(n: usize, noise_sd: f64, seed: u64) -> Dataset {
    assert!(n >= 2, "need at least two samples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut pts: Vec<([f64; 2], f64)> = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = 2.0 * PI * i as f64 / n_out as f64;
        pts.push(([t.cos(), t.sin()], 0.0));
    }
    for i in 0..n_in {
        let t = 2.0 * PI * i as f64 / n_in as f64;
        pts.push(([COCIRCLES_FACTOR * t.cos(), COCIRCLES_FACTOR * t.sin()], 1.0));
    }
    pts.shuffle(&mut rng);
    let noise = Normal::new(0.0, noise_sd.max(0.0)).expect("valid sd");
    let mut features = Vec::with_capacity(2 * n);
    let mut response = Vec::with_capacity(n);
    for (p, y) in pts {
        for c in p {
            let eps = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            features.push(c + eps);
        }
        response.push(y);
    }
    Dataset::new(features, 2, response, default_names(2), Task::Classification).expect("finite")
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Split `0..n` by a seeded shuffle: the last `holdout_fraction` of the
/// shuffled order is the holdout part. Both parts keep shuffled order.
pub fn holdout_split(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = permutation(n, seed);
    let n_hold = if n < 2 {
        0
    } else {
        ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1)
    };
    let (keep, hold) = perm.split_at(n - n_hold);
    (keep.to_vec(), hold.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub scale_features: bool,
    pub scale_response: bool,
}

impl SplitSpec {
    /// 80/20 split, features scaled, response scaled for regression.
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            train_fraction: 0.8,
            seed,
            scale_features: true,
            scale_response: task == Task::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Self { min, max }
    }

    #[inline]
    pub fn is_constant(&self) -> bool {
        self.max == self.min
    }

    #[inline]
    pub fn transform(&self, v: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    #[inline]
    pub fn inverse(&self, v: f64) -> f64 {
        if self.is_constant() {
            self.min
        } else {
            v * (self.max - self.min) + self.min
        }
    }
}

/// Min-max parameters fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub features: BTreeMap<String, MinMax>,
    pub feature_order: Vec<String>,
    pub response: Option<MinMax>,
    /// Features with `max == min`; they are mapped to 0.
    pub constant_features: Vec<String>,
}

impl Scaler {
    pub fn fit(train: &Dataset, scale_features: bool, scale_response: bool) -> Self {
        let mut features = BTreeMap::new();
        let mut constant_features = Vec::new();
        if scale_features {
            for (j, name) in train.feature_names.iter().enumerate() {
                let mm = MinMax::fit(train.rows().map(|r| r[j]));
                if mm.is_constant() {
                    constant_features.push(name.clone());
                }
                features.insert(name.clone(), mm);
            }
        }
        let response = scale_response.then(|| MinMax::fit(train.response.iter().copied()));
        Self {
            features,
            feature_order: train.feature_names.clone(),
            response,
            constant_features,
        }
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        self.map(&mut out, MinMax::transform);
        out
    }

    pub fn inverse_transform(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        self.map(&mut out, MinMax::inverse);
        out
    }

    fn map(&self, data: &mut Dataset, f: fn(&MinMax, f64) -> f64) {
        let d = data.d;
        let params: Vec<Option<MinMax>> = data
            .feature_names
            .iter()
            .map(|name| self.features.get(name).copied())
            .collect();
        for (k, v) in data.features.iter_mut().enumerate() {
            if let Some(mm) = &params[k % d] {
                *v = f(mm, *v);
            }
        }
        if let Some(mm) = &self.response {
            for y in &mut data.response {
                *y = f(mm, *y);
            }
        }
    }
}

/// Seeded train/test split with min-max scaling fitted on the training part.
pub fn split_and_scale(data: &Dataset, split: &SplitSpec) -> Result<(Dataset, Dataset, Scaler), DataError> {
    if !(split.train_fraction > 0.0 && split.train_fraction < 1.0) {
        return Err(DataError::InvalidSplit(format!(
            "train_fraction must lie in (0, 1), got {}",
            split.train_fraction
        )));
    }
    if data.len() < 2 {
        return Err(DataError::InvalidSplit("need at least two rows".into()));
    }
    let (train_idx, test_idx) = holdout_split(data.len(), 1.0 - split.train_fraction, split.seed);
    let train_raw = data.subset(&train_idx);
    let test_raw = data.subset(&test_idx);
    let scale_response = split.scale_response && data.task == Task::Regression;
    let scaler = Scaler::fit(&train_raw, split.scale_features, scale_response);
    Ok((scaler.transform(&train_raw), scaler.transform(&test_raw), scaler))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chirpwave_formula() {
        assert!(chirpwave_signal(0.3).abs() < 1e-12);
        assert!(chirpwave_signal(0.8).abs() < 1e-12);
        let d = gen_chirpwave(50, 0.0, 1);
        for (x, y) in d.rows().zip(d.response()) {
            assert_eq!(*y, chirpwave_signal(x[0]));
            assert!((0.0..=1.0).contains(&x[0]));
        }
    }

    #[test]
    fn chirpwave_noise_variance() {
        let d = gen_chirpwave(100_000, 0.1, 9);
        let resid: Vec<f64> = d
            .rows()
            .zip(d.response())
            .map(|(x, y)| y - chirpwave_signal(x[0]))
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!((var - 0.01).abs() < 0.0005, "var {var}");
    }

    #[test]
    fn cocircles_geometry_and_balance() {
        let d = gen_cocircles(2001, 0.0, 4);
        let ones = d.response().iter().filter(|&&y| y == 1.0).count();
        assert_eq!(ones, 1001);
        assert_eq!(d.len() - ones, 1000);
        for (x, y) in d.rows().zip(d.response()) {
            let r = x[0].hypot(x[1]);
            let want = if *y == 0.0 { 1.0 } else { 0.8 };
            assert!((r - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cocircles_radial_classifier() {
        let d = gen_cocircles(2000, 0.1, 5);
        // score: inner circle is class 1, so negative radius ranks it high
        let scores: Vec<f64> = d.rows().map(|x| -x[0].hypot(x[1])).collect();
        let auc = crate::metrics::auc(&scores, d.response()).unwrap();
        // radii are close to N(1, 0.01) and N(0.8, 0.01), so the AUC of the
        // radius is about Phi(0.2 / (0.1 * sqrt 2))
        let oracle = crate::stats::normal_cdf(0.2 / (0.1 * 2f64.sqrt()));
        assert!((auc - oracle).abs() < 0.02, "auc {auc} vs {oracle}");
    }

    #[test]
    fn csv_read_exact_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "a,y,b\n1,0.5,2\n3,1.5,4\n-5,2.5,6e-1\n").unwrap();
        let d = load_csv(&p, "y", Task::Regression).unwrap();
        assert_eq!(d.features(), &[1.0, 2.0, 3.0, 4.0, -5.0, 0.6]);
        assert_eq!(d.response(), &[0.5, 1.5, 2.5]);
        assert_eq!(d.feature_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "a,y\n").unwrap();
        assert!(matches!(load_csv(&p, "y", Task::Regression), Err(DataError::Empty)));
        assert!(matches!(
            load_csv(&p, "z", Task::Regression),
            Err(DataError::MissingColumn(_))
        ));
        std::fs::write(&p, "a,y\n1,2\n3\n").unwrap();
        assert!(matches!(load_csv(&p, "y", Task::Regression), Err(DataError::Ragged { row: 1, .. })));
        std::fs::write(&p, "a,y\n1,2\nfoo,3\n").unwrap();
        match load_csv(&p, "y", Task::Regression) {
            Err(DataError::NonNumeric { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "a");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let d = gen_cocircles(40, 0.1, 2);
        d.write_csv(&p, "y").unwrap();
        let back = load_csv(&p, "y", Task::Classification).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn split_sizes_and_inverse() {
        let d = gen_chirpwave(10, 0.1, 3);
        let (tr, te, sc) = split_and_scale(&d, &SplitSpec::new(Task::Regression, 1)).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        for v in tr.features().iter().chain(tr.response()) {
            assert!((0.0..=1.0).contains(v));
        }
        let back = sc.inverse_transform(&tr);
        let (train_idx, _) = holdout_split(10, 0.2, 1);
        let raw = d.subset(&train_idx);
        for (a, b) in back.features().iter().zip(raw.features()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in back.response().iter().zip(raw.response()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn test_rows_do_not_influence_scaler() {
        let d = gen_cocircles(30, 0.1, 8);
        let split = SplitSpec::new(Task::Classification, 2);
        let (_, _, sc1) = split_and_scale(&d, &split).unwrap();
        let (_, test_idx) = holdout_split(30, 0.2, 2);
        let mut feats = d.features().to_vec();
        for &i in &test_idx {
            feats[2 * i] += 100.0;
        }
        let perturbed = Dataset::new(feats, 2, d.response().to_vec(), default_names(2), Task::Classification).unwrap();
        let (_, _, sc2) = split_and_scale(&perturbed, &split).unwrap();
        assert_eq!(sc1, sc2);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let d = Dataset::from_rows(
            &[vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 4.0], vec![1.0, 5.0]],
            vec![0.0, 1.0, 2.0, 3.0],
            Task::Regression,
        )
        .unwrap();
        let sc = Scaler::fit(&d, true, true);
        assert_eq!(sc.constant_features, vec!["x1".to_string()]);
        let t = sc.transform(&d);
        assert!(t.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(gen_cocircles(100, 0.1, 1), gen_cocircles(100, 0.1, 1));
        assert_ne!(gen_cocircles(100, 0.1, 1), gen_cocircles(100, 0.1, 2));
        assert_ne!(permutation(50, 1), permutation(50, 2));
    }

    #[test]
    fn bad_labels_rejected() {
        let r = Dataset::from_rows(&[vec![0.0]], vec![0.5], Task::Classification);
        assert!(matches!(r, Err(DataError::BadLabel { .. })));
    }
}
