//! Local linear profiles, joint importance and parallel-coordinate tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::report::{field, line, num};
use crate::unwrapper::UnwrapResult;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("feature index {index} out of range for {dim} features")]
    FeatureIndex { index: usize, dim: usize },
    #[error("top_k must be at least 1")]
    TopK,
    #[error("unwrap result has no regions")]
    Empty,
    #[error("dataset does not match the unwrap result")]
    DatasetMismatch,
}

/// Points at which each density curve is sampled.
pub const DENSITY_POINTS: usize = 64;

/// One region's marginal linear function of feature `j`, centered to have
/// zero mean over the region's members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSegment {
    pub region: usize,
    pub feature: usize,
    pub slope: f64,
    /// Mean of `slope * x_j` over the members.
    pub offset: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub x_mean: f64,
    pub count: usize,
    /// Gaussian KDE on an even grid over `[x_min, x_max]`, scaled to unit max.
    pub density: Vec<f64>,
}

impl ProfileSegment {
    /// Centered marginal value at `x`.
    pub fn value(&self, x: f64) -> f64 {
        self.slope * x - self.offset
    }

    pub fn density_grid(&self) -> Vec<f64> {
        even_grid(self.x_min, self.x_max, self.density.len())
    }
}

fn even_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Gaussian kernel density with Silverman's bandwidth, max-normalized.
/// Flat when the sample has no spread.
pub fn kde_curve(sample: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = sample.len();
    let flat = vec![1.0; grid.len()];
    if n < 2 {
        return flat;
    }
    let mean = sample.iter().sum::<f64>() / n as f64;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let h = sd * (0.75 * n as f64).powf(-0.2);
    if h <= 0.0 || !h.is_finite() {
        return flat;
    }
    let curve: Vec<f64> = grid
        .iter()
        .map(|&g| sample.iter().map(|&s| (-0.5 * ((g - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    let max = curve.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        curve.into_iter().map(|v| v / max).collect()
    } else {
        flat
    }
}

/// Profiles of feature `j` for the `top_k` largest regions.
pub fn local_profile(
    result: &UnwrapResult,
    data: &Dataset,
    feature: usize,
    top_k: usize,
) -> Result<Vec<ProfileSegment>, InterpretError> {
    if feature >= result.input_dim {
        return Err(InterpretError::FeatureIndex {
            index: feature,
            dim: result.input_dim,
        });
    }
    if top_k == 0 {
        return Err(InterpretError::TopK);
    }
    if data.len() != result.n_instances || data.dim() != result.input_dim {
        return Err(InterpretError::DatasetMismatch);
    }
    let segments = result
        .regions
        .iter()
        .enumerate()
        .filter(|(_, r)| r.count > 0)
        .take(top_k)
        .map(|(id, r)| {
            let xs: Vec<f64> = r.instance_indices.iter().map(|&i| data.row(i)[feature]).collect();
            let slope = r.llm.w_tilde[feature];
            let n = xs.len() as f64;
            let x_mean = xs.iter().sum::<f64>() / n;
            let offset = xs.iter().map(|x| slope * x).sum::<f64>() / n;
            let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let density = kde_curve(&xs, &even_grid(x_min, x_max, DENSITY_POINTS));
            ProfileSegment {
                region: id,
                feature,
                slope,
                offset,
                x_min,
                x_max,
                x_mean,
                count: r.count,
                density,
            }
        })
        .collect();
    Ok(segments)
}

pub fn profile_csv(segments: &[ProfileSegment]) -> String {
    let mut out = String::from("region_id,feature,slope,offset,xmin,xmax,count\n");
    for s in segments {
        out.push_str(&line([
            s.region.to_string(),
            s.feature.to_string(),
            num(s.slope),
            num(s.offset),
            num(s.x_min),
            num(s.x_max),
            s.count.to_string(),
        ]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub ji_intercept: f64,
    pub ji_features: Vec<f64>,
    /// Features by decreasing importance, ties by index.
    pub order: Vec<usize>,
    pub feature_names: Vec<String>,
}

impl ImportanceTable {
    pub fn total(&self) -> f64 {
        self.ji_intercept + self.ji_features.iter().sum::<f64>()
    }

    /// `name,ji` with the intercept first, then features by rank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,ji\n");
        out.push_str(&line(["intercept".to_string(), num(self.ji_intercept)]));
        for &j in &self.order {
            out.push_str(&line([field(&self.feature_names[j]), num(self.ji_features[j])]));
        }
        out
    }
}

/// Count-weighted share of squared LLM coefficients held by the intercept
/// and by each feature. All zero coefficients give equal shares.
pub fn joint_importance(result: &UnwrapResult) -> Result<ImportanceTable, InterpretError> {
    if result.is_empty() {
        return Err(InterpretError::Empty);
    }
    let d = result.input_dim;
    // Fixed summation order so the table does not depend on region order.
    let mut regions: Vec<_> = result.regions.iter().filter(|r| r.count > 0).collect();
    regions.sort_by(|a, b| a.pattern.cmp(&b.pattern));
    let mut num_b = 0.0;
    let mut num_w = vec![0.0; d];
    for r in &regions {
        let c = r.count as f64;
        num_b += c * r.llm.b_tilde * r.llm.b_tilde;
        for (acc, w) in num_w.iter_mut().zip(&r.llm.w_tilde) {
            *acc += c * w * w;
        }
    }
    let total = num_b + num_w.iter().sum::<f64>();
    let (ji_intercept, ji_features) = if total > 0.0 {
        (num_b / total, num_w.iter().map(|v| v / total).collect())
    } else {
        let share = 1.0 / (d + 1) as f64;
        (share, vec![share; d])
    };
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| ji_features[b].total_cmp(&ji_features[a]).then(a.cmp(&b)));
    let feature_names = if result.feature_names.len() == d {
        result.feature_names.clone()
    } else {
        (1..=d).map(|j| format!("x{j}")).collect()
    };
    Ok(ImportanceTable {
        ji_intercept,
        ji_features,
        order,
        feature_names,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelRow {
    pub region: usize,
    pub count: usize,
    pub values: Vec<f64>,
}

/// Coefficient rows for a parallel-coordinate plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelTable {
    /// Axis labels, `b` first when the intercept is included.
    pub axes: Vec<String>,
    pub rows: Vec<ParallelRow>,
    pub include_intercept: bool,
    pub excluded: usize,
}

impl ParallelTable {
    pub fn to_csv(&self) -> String {
        let mut out = line(
            ["region_id".to_string(), "count".to_string()]
                .into_iter()
                .chain(self.axes.iter().map(|a| field(a))),
        );
        for r in &self.rows {
            out.push_str(&line(
                [r.region.to_string(), r.count.to_string()]
                    .into_iter()
                    .chain(r.values.iter().map(|&v| num(v))),
            ));
        }
        out
    }
}

pub fn parallel_coordinates(
    result: &UnwrapResult,
    exclude_single: bool,
    include_intercept: bool,
) -> Result<ParallelTable, InterpretError> {
    if result.is_empty() {
        return Err(InterpretError::Empty);
    }
    let d = result.input_dim;
    let mut axes = Vec::with_capacity(d + 1);
    if include_intercept {
        axes.push("b".to_string());
    }
    axes.extend((1..=d).map(|j| format!("w{j}")));
    let mut excluded = 0;
    let mut rows = Vec::new();
    for (id, r) in result.regions.iter().enumerate() {
        if r.count == 0 {
            continue;
        }
        if exclude_single && r.single_flag {
            excluded += 1;
            continue;
        }
        let mut values = Vec::with_capacity(d + 1);
        if include_intercept {
            values.push(r.llm.b_tilde);
        }
        values.extend_from_slice(&r.llm.w_tilde);
        rows.push(ParallelRow {
            region: id,
            count: r.count,
            values,
        });
    }
    Ok(ParallelTable {
        axes,
        rows,
        include_intercept,
        excluded,
    })
}
