//! Region summaries, single-instance/single-class census, polar projection of
//! LLM coefficients and local-versus-global extrapolation verdicts.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Task;
use crate::report::{line, num, opt_num};
use crate::unwrapper::UnwrapResult;

#[derive(Debug, Error)]
pub enum DiagnoseError {
    #[error("unwrap result has no regions")]
    Empty,
    #[error("top_k must be at least 1")]
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: usize,
    pub pattern_hash: String,
    pub count: usize,
    pub response_mean: f64,
    pub response_std: f64,
    pub local_perf: Option<f64>,
    pub global_perf: Option<f64>,
    pub single_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    pub task: Task,
    pub rows: Vec<RegionRow>,
}

impl RegionTable {
    /// `Count,Response Mean,Response Std,Local AUC,Global AUC` (or the MSE
    /// pair) after a leading region id.
    pub fn header(&self) -> String {
        let m = metric_name(self.task);
        format!("region,Count,Response Mean,Response Std,Local {m},Global {m}")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line([
                r.region.to_string(),
                r.count.to_string(),
                num(r.response_mean),
                num(r.response_std),
                opt_num(r.local_perf),
                opt_num(r.global_perf),
            ]));
        }
        out
    }
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "MSE",
        Task::Classification => "AUC",
    }
}

/// One row per region, largest first.
pub fn region_table(result: &UnwrapResult) -> Result<RegionTable, DiagnoseError> {
    if result.is_empty() {
        return Err(DiagnoseError::Empty);
    }
    let rows = result
        .regions
        .iter()
        .enumerate()
        .map(|(id, r)| RegionRow {
            region: id,
            pattern_hash: r.pattern.hash_hex(),
            count: r.count,
            response_mean: r.response_mean,
            response_std: r.response_std,
            local_perf: r.local_perf,
            global_perf: r.global_perf,
            single_flag: r.single_flag,
        })
        .collect();
    Ok(RegionTable { task: result.task, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub region: usize,
    /// Radians in `[0, 2 pi)`.
    pub angle: f64,
    pub radius: f64,
    pub count: usize,
    pub single_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarProjection {
    pub points: Vec<PolarPoint>,
    /// PCA had no spread to project; all angles are 0.
    pub degenerate: bool,
    pub sqrt_radius: bool,
}

impl PolarProjection {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region_id,angle,radius,single_flag\n");
        for p in &self.points {
            out.push_str(&line([
                p.region.to_string(),
                num(p.angle),
                num(p.radius),
                p.single_flag.to_string(),
            ]));
        }
        out
    }
}

fn wrap_angle(y: f64, x: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        return 0.0;
    }
    let a = y.atan2(x);
    let a = if a < 0.0 { a + 2.0 * PI } else { a };
    if a >= 2.0 * PI {
        0.0
    } else {
        a
    }
}

/// Top-2 principal directions of the rows of `m` (`rows x d`), each signed so
/// its largest-magnitude component is positive. `None` without spread.
pub fn principal_directions(m: &DMatrix<f64>) -> Option<[Vec<f64>; 2]> {
    let (n, d) = m.shape();
    if n == 0 || d < 2 {
        return None;
    }
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    if cov.iter().all(|&v| v == 0.0) {
        return None;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let dir = |k: usize| -> Vec<f64> {
        let v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    Some([dir(0), dir(1)])
}

/// Direction of each region's slope vector: the raw `(w1, w2)` direction
/// for two features, else the projection on the top two principal
/// components of the centered coefficient rows (regions weighted equally).
pub fn polar_projection(result: &UnwrapResult, sqrt_radius: bool) -> Result<PolarProjection, DiagnoseError> {
    if result.is_empty() {
        return Err(DiagnoseError::Empty);
    }
    let d = result.input_dim;
    let m = result.regions.len();
    let mut degenerate = false;
    let coords: Vec<(f64, f64)> = match d {
        1 => result.regions.iter().map(|r| (r.llm.w_tilde[0], 0.0)).collect(),
        2 => result.regions.iter().map(|r| (r.llm.w_tilde[0], r.llm.w_tilde[1])).collect(),
        _ => {
            let mat = DMatrix::from_fn(m, d, |i, j| result.regions[i].llm.w_tilde[j]);
            match principal_directions(&mat) {
                Some([v1, v2]) => {
                    let mean = mat.row_mean();
                    (0..m)
                        .map(|i| {
                            let mut p = (0.0, 0.0);
                            for j in 0..d {
                                let c = mat[(i, j)] - mean[j];
                                p.0 += c * v1[j];
                                p.1 += c * v2[j];
                            }
                            p
                        })
                        .collect()
                }
                None => {
                    degenerate = true;
                    vec![(0.0, 0.0); m]
                }
            }
        }
    };
    let points = result
        .regions
        .iter()
        .zip(coords)
        .enumerate()
        .map(|(id, (r, (x, y)))| PolarPoint {
            region: id,
            angle: wrap_angle(y, x),
            radius: if sqrt_radius { (r.count as f64).sqrt() } else { r.count as f64 },
            count: r.count,
            single_flag: r.single_flag,
        })
        .collect();
    Ok(PolarProjection {
        points,
        degenerate,
        sqrt_radius,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub regions: usize,
    pub single_regions: usize,
    pub region_fraction: f64,
    pub instances: usize,
    pub single_instances: usize,
    pub instance_fraction: f64,
}

/// Share of single-instance/single-class regions, by region and by instance.
pub fn single_census(result: &UnwrapResult) -> Result<Census, DiagnoseError> {
    if result.is_empty() {
        return Err(DiagnoseError::Empty);
    }
    let regions = result.regions.len();
    let single_regions = result.regions.iter().filter(|r| r.single_flag).count();
    let instances: usize = result.regions.iter().map(|r| r.count).sum();
    let single_instances: usize = result.regions.iter().filter(|r| r.single_flag).map(|r| r.count).sum();
    Ok(Census {
        regions,
        single_regions,
        region_fraction: single_regions as f64 / regions as f64,
        instances,
        single_instances,
        instance_fraction: if instances > 0 {
            single_instances as f64 / instances as f64
        } else {
            0.0
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Poor,
    Good,
    Extraordinary,
    Undefined,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Poor => "poor",
            Verdict::Good => "good",
            Verdict::Extraordinary => "extraordinary",
            Verdict::Undefined => "undefined",
        }
    }
}

/// When a local or global performance counts as good.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// AUC at or above this is good.
    pub auc: f64,
    /// MSE at or below this multiple of the network's MSE is good.
    pub mse_factor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            auc: 0.75,
            mse_factor: 2.0,
        }
    }
}

/// good/good → good; good/poor → poor; poor/good → extraordinary;
/// poor/poor → poor; any undefined side → undefined.
pub fn verdict(task: Task, local: Option<f64>, global: Option<f64>, network_perf: Option<f64>, th: &Thresholds) -> Verdict {
    let good = |v: f64| -> Option<bool> {
        match task {
            Task::Classification => Some(v >= th.auc),
            Task::Regression => network_perf.map(|m| v <= th.mse_factor * m),
        }
    };
    match (local.and_then(good), global.and_then(good)) {
        (Some(true), Some(true)) => Verdict::Good,
        (Some(true), Some(false)) => Verdict::Poor,
        (Some(false), Some(true)) => Verdict::Extraordinary,
        (Some(false), Some(false)) => Verdict::Poor,
        _ => Verdict::Undefined,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub region: usize,
    pub count: usize,
    pub local_perf: Option<f64>,
    pub global_perf: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub task: Task,
    pub thresholds: Thresholds,
    pub network_perf: Option<f64>,
    pub rows: Vec<ExtrapolationRow>,
}

impl ExtrapolationReport {
    /// The last column names the rule, e.g. `verdict[AUC>=0.75]`.
    pub fn to_csv(&self) -> String {
        let m = metric_name(self.task);
        let rule = match self.task {
            Task::Classification => format!("AUC>={}", self.thresholds.auc),
            Task::Regression => format!("MSE<={}x{}", self.thresholds.mse_factor, opt_num(self.network_perf)),
        };
        let mut out = format!("region,count,Local {m},Global {m},verdict[{rule}]\n");
        for r in &self.rows {
            out.push_str(&line([
                r.region.to_string(),
                r.count.to_string(),
                opt_num(r.local_perf),
                opt_num(r.global_perf),
                r.verdict.as_str().to_string(),
            ]));
        }
        out
    }
}

pub fn extrapolation_report(
    result: &UnwrapResult,
    top_k: usize,
    thresholds: &Thresholds,
) -> Result<ExtrapolationReport, DiagnoseError> {
    if top_k == 0 {
        return Err(DiagnoseError::TopK);
    }
    if result.is_empty() {
        return Err(DiagnoseError::Empty);
    }
    let rows = result
        .regions
        .iter()
        .take(top_k)
        .enumerate()
        .map(|(id, r)| ExtrapolationRow {
            region: id,
            count: r.count,
            local_perf: r.local_perf,
            global_perf: r.global_perf,
            verdict: verdict(result.task, r.local_perf, r.global_perf, result.network_perf, thresholds),
        })
        .collect();
    Ok(ExtrapolationReport {
        task: result.task,
        thresholds: *thresholds,
        network_perf: result.network_perf,
        rows,
    })
}
