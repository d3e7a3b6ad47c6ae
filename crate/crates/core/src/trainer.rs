//! Mini-batch training of ReLU networks with early stopping.
//!
//! Squared error for the identity link, log-loss for the logit link. The
//! last `validation_fraction` of a seeded shuffle is held out; the returned
//! network is the snapshot with the lowest validation loss seen, counting the
//! starting parameters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{holdout_split, Dataset};
use crate::network::{sigmoid, Layer, Link, NetworkError, ReluNetwork};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least 2 instances, got {0}")]
    TooFewInstances(usize),
    #[error("task uses the {task} link but the network has the {network} link")]
    LinkMismatch { task: &'static str, network: &'static str },
    #[error("network expects {expected} features, dataset has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// `None` means `min(200, n_train)`.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![40, 40, 40, 40],
            max_epochs: 2000,
            patience: 100,
            validation_fraction: 0.2,
            batch_size: None,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(TrainError::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config("patience must not exceed max_epochs".into()));
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(TrainError::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self, TrainError> {
        serde_json::from_str(s).map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Reads a `.toml` or `.json` config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            _ => Self::from_json_str(&text),
        }
    }
}

/// What happened during a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// 0 when the starting parameters were never beaten.
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Validation loss after each epoch.
    pub val_losses: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<ReluNetwork, TrainError> {
    train_with_report(data, cfg).map(|(net, _)| net)
}

pub fn train_with_report(data: &Dataset, cfg: &TrainConfig) -> Result<(ReluNetwork, TrainReport), TrainError> {
    cfg.validate()?;
    let init = init_network(data.dim(), &cfg.hidden_sizes, data.task().link(), cfg.seed)?;
    run(init, data, cfg)
}

pub fn finetune(net: &ReluNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<ReluNetwork, TrainError> {
    finetune_with_report(net, data, cfg).map(|(net, _)| net)
}

pub fn finetune_with_report(
    net: &ReluNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ReluNetwork, TrainReport), TrainError> {
    cfg.validate()?;
    run(net.clone(), data, cfg)
}

/// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_network(input_dim: usize, hidden_sizes: &[usize], link: Link, seed: u64) -> Result<ReluNetwork, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut layers = Vec::with_capacity(hidden_sizes.len() + 1);
    let mut fan_in = input_dim;
    for &h in hidden_sizes.iter().chain(std::iter::once(&1)) {
        let wl = (6.0 / fan_in as f64).sqrt();
        let bl = 1.0 / (fan_in as f64).sqrt();
        let w = (0..h * fan_in).map(|_| rng.random_range(-wl..wl)).collect();
        let b = (0..h).map(|_| rng.random_range(-bl..bl)).collect();
        layers.push(Layer::new(fan_in, h, w, b));
        fan_in = h;
    }
    Ok(ReluNetwork::new(input_dim, link, layers)?)
}

/// Mean loss of `net` over the given rows.
pub fn loss(net: &ReluNetwork, data: &Dataset, idx: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in idx {
        let eta = net.eta(data.row(i)).expect("dimension checked");
        total += point_loss(net.link(), eta, data.response()[i]);
    }
    total / idx.len().max(1) as f64
}

#[inline]
fn point_loss(link: Link, eta: f64, y: f64) -> f64 {
    match link {
        Link::Identity => (eta - y) * (eta - y),
        Link::Logit => {
            let log1pexp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            log1pexp - y * eta
        }
    }
}

/// d loss / d eta.
#[inline]
fn point_grad(link: Link, eta: f64, y: f64) -> f64 {
    match link {
        Link::Identity => 2.0 * (eta - y),
        Link::Logit => sigmoid(eta) - y,
    }
}

/// Flat parameter buffers with per-layer offsets.
struct Params {
    dims: Vec<(usize, usize)>,
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Params {
    fn from_net(net: &ReluNetwork) -> Self {
        Self {
            dims: net.layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect(),
            w: net.layers().iter().map(|l| l.weights().to_vec()).collect(),
            b: net.layers().iter().map(|l| l.biases().to_vec()).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            w: self.w.iter().map(|v| vec![0.0; v.len()]).collect(),
            b: self.b.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    fn fill_zero(&mut self) {
        for v in self.w.iter_mut().chain(self.b.iter_mut()) {
            v.fill(0.0);
        }
    }

    fn to_net(&self, input_dim: usize, link: Link) -> Result<ReluNetwork, NetworkError> {
        let layers = self
            .dims
            .iter()
            .zip(self.w.iter().zip(&self.b))
            .map(|(&(i, o), (w, b))| Layer::new(i, o, w.clone(), b.clone()))
            .collect();
        ReluNetwork::new(input_dim, link, layers)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut()).flat_map(|v| v.iter_mut())
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter()).flat_map(|v| v.iter())
    }
}

/// Per-sample forward/backward buffers.
struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    fn new(p: &Params) -> Self {
        let mut acts = vec![Vec::new(); p.dims.len()];
        for (l, &(i, _)) in p.dims.iter().enumerate() {
            acts[l] = vec![0.0; i];
        }
        Self {
            acts,
            delta: Vec::new(),
            next: Vec::new(),
        }
    }

    /// Accumulates the gradient of `scale * loss(x, y)` into `g` and returns
    /// the point loss.
    fn accumulate(&mut self, p: &Params, link: Link, x: &[f64], y: f64, scale: f64, g: &mut Params) -> f64 {
        let n_layers = p.dims.len();
        self.acts[0].copy_from_slice(x);
        for l in 0..n_layers - 1 {
            let (i, o) = p.dims[l];
            let (lo, hi) = self.acts.split_at_mut(l + 1);
            let a = &lo[l];
            let out = &mut hi[0];
            for u in 0..o {
                let row = &p.w[l][u * i..(u + 1) * i];
                let z = row.iter().zip(a).map(|(w, v)| w * v).sum::<f64>() + p.b[l][u];
                out[u] = z.max(0.0);
            }
        }
        let last = n_layers - 1;
        let a = &self.acts[last];
        let eta = p.w[last].iter().zip(a).map(|(w, v)| w * v).sum::<f64>() + p.b[last][0];
        let ge = point_grad(link, eta, y) * scale;
        self.delta.clear();
        self.delta.push(ge);
        for l in (0..n_layers).rev() {
            let (i, o) = p.dims[l];
            let a = &self.acts[l];
            for u in 0..o {
                let du = self.delta[u];
                if du == 0.0 {
                    continue;
                }
                g.b[l][u] += du;
                for (gw, v) in g.w[l][u * i..(u + 1) * i].iter_mut().zip(a) {
                    *gw += du * v;
                }
            }
            if l == 0 {
                break;
            }
            self.next.clear();
            self.next.resize(i, 0.0);
            for u in 0..o {
                let du = self.delta[u];
                if du == 0.0 {
                    continue;
                }
                for (nx, w) in self.next.iter_mut().zip(&p.w[l][u * i..(u + 1) * i]) {
                    *nx += du * w;
                }
            }
            // ReLU derivative: active iff the post-activation is positive.
            for (nx, v) in self.next.iter_mut().zip(a) {
                if *v <= 0.0 {
                    *nx = 0.0;
                }
            }
            std::mem::swap(&mut self.delta, &mut self.next);
        }
        point_loss(link, eta, y)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Relative validation improvement that resets the patience counter.
const IMPROVEMENT_TOL: f64 = 1e-4;

fn run(init: ReluNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<(ReluNetwork, TrainReport), TrainError> {
    let n = data.len();
    if n < 2 {
        return Err(TrainError::TooFewInstances(n));
    }
    if init.input_dim() != data.dim() {
        return Err(TrainError::DimensionMismatch {
            expected: init.input_dim(),
            found: data.dim(),
        });
    }
    let link = init.link();
    if data.task().link() != link {
        return Err(TrainError::LinkMismatch {
            task: data.task().link().as_str(),
            network: link.as_str(),
        });
    }
    let (mut train_idx, val_idx) = holdout_split(n, cfg.validation_fraction, cfg.seed);
    let initial_val = loss(&init, data, &val_idx);
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        initial_val_loss: initial_val,
        best_val_loss: initial_val,
        val_losses: Vec::new(),
        train_indices: train_idx.clone(),
        val_indices: val_idx.clone(),
    };
    if cfg.max_epochs == 0 {
        return Ok((init, report));
    }

    let mut params = Params::from_net(&init);
    let mut grad = params.zeros_like();
    let mut m1 = params.zeros_like();
    let mut m2 = params.zeros_like();
    let mut ws = Workspace::new(&params);
    let mut best = init;
    let mut best_val = if initial_val.is_finite() { initial_val } else { f64::INFINITY };
    let mut patience_ref = best_val;
    let mut stale = 0;
    let batch = cfg.batch_size.unwrap_or(200).min(train_idx.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut step: i32 = 0;
    let y = data.response();

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in train_idx.chunks(batch) {
            grad.fill_zero();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                train_loss += ws.accumulate(&params, link, data.row(i), y[i], scale, &mut grad);
            }
            step += 1;
            match cfg.optimizer {
                Optimizer::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(step);
                    let c2 = 1.0 - ADAM_BETA2.powi(step);
                    let lr = cfg.learning_rate;
                    for (((p, g), m), v) in params
                        .values_mut()
                        .zip(grad.values())
                        .zip(m1.values_mut())
                        .zip(m2.values_mut())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
                Optimizer::Sgd => {
                    for (p, g) in params.values_mut().zip(grad.values()) {
                        *p -= cfg.learning_rate * g;
                    }
                }
            }
        }
        report.epochs_run = epoch;
        if !train_loss.is_finite() || params.values().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged { epoch });
        }
        let current = params.to_net(data.dim(), link)?;
        let val = loss(&current, data, &val_idx);
        if !val.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        report.val_losses.push(val);
        if val < best_val {
            best_val = val;
            best = current;
            report.best_epoch = epoch;
        }
        if val < patience_ref - IMPROVEMENT_TOL * patience_ref.abs() {
            patience_ref = val;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    report.best_val_loss = best_val;
    Ok((best, report))
}
