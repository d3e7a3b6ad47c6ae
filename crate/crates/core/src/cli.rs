//! Command-line front end: each subcommand runs one pipeline stage and
//! writes its reports plus a `manifest.json` into `--out-dir`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, SplitSpec, Task};
use crate::diagnose::{self, Thresholds};
use crate::glm::{self, Family, Penalty};
use crate::interpret;
use crate::metrics;
use crate::network::ReluNetwork;
use crate::report::{field, line, num, write_atomic};
use crate::simplify::{self, MergeConfig, MergedModel, Refit};
use crate::svg;
use crate::trainer::{self, Optimizer, TrainConfig};
use crate::unwrapper::{self, UnwrapResult};
use crate::Error;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "RELU_UNWRAP_THREADS";

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "relu-unwrap", version, about = "Unwrap ReLU networks into exact local linear models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on a CSV file or a synthetic dataset.
    Train(TrainArgs),
    /// Region table and local linear models of a network on a dataset.
    Unwrap(UnwrapArgs),
    /// Local profiles, joint importance and parallel coordinates.
    Interpret(InterpretArgs),
    /// Region diagnostics, polar projection and extrapolation verdicts.
    Diagnose(DiagnoseArgs),
    /// Merge regions into clusters with refitted GLMs.
    Merge(MergeArgs),
    /// Turn a merged model into a one-hidden-layer network and fine-tune it.
    Flatten(FlattenArgs),
    /// Coefficient inference for one region or every merged cluster.
    Infer(InferArgs),
    /// Map the activation regions of a 2-D network on a grid.
    Regionmap(RegionmapArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthetic {
    Chirpwave,
    Cocircles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RefitArg {
    Glm,
    L1,
    L2,
}

impl From<RefitArg> for Refit {
    fn from(r: RefitArg) -> Self {
        match r {
            RefitArg::Glm => Refit::Glm,
            RefitArg::L1 => Refit::L1,
            RefitArg::L2 => Refit::L2,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response_col: String,
    /// Defaults to the task implied by the model's link.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArgs {
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "dataset")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<Synthetic>,
    /// Synthetic sample size.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Synthetic noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value = "y")]
    pub response_col: String,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// TOML or JSON file with `TrainConfig` fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct UnwrapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InterpretArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Feature index (0-based) or name.
    #[arg(long, default_value = "0")]
    pub feature: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Keep single-class and single-instance regions in the parallel plot.
    #[arg(long)]
    pub keep_single: bool,
    /// Leave the intercept axis out of the parallel plot.
    #[arg(long)]
    pub no_intercept: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    /// Local or global AUC at or above this is good.
    #[arg(long, default_value_t = 0.75)]
    pub auc_threshold: f64,
    /// Local or global MSE at or below this multiple of the network MSE is good.
    #[arg(long, default_value_t = 2.0)]
    pub mse_factor: f64,
    #[arg(long)]
    pub sqrt_radius: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MergeFlags {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10,15,20")]
    pub k_grid: Vec<usize>,
    /// Defaults to 1% of the region count, rounded up.
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long, default_value_t = 30)]
    pub tau: usize,
    #[arg(long, value_enum, default_value = "glm")]
    pub refit: RefitArg,
    /// lambda for l1, C for l2.
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Held-out CSV for compare.csv; defaults to `--data`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub merge: MergeFlags,
    /// Bootstrap replicates for penalized refits; 0 keeps coefficients only.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FlattenArgs {
    #[arg(long)]
    pub merged: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, conflicts_with = "region", required_unless_present = "region")]
    pub merged: Option<PathBuf>,
    /// Region id (rank in the region table).
    #[arg(long)]
    pub region: Option<usize>,
    /// Bootstrap replicates; 0 gives Wald tests.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// Region refit; merged clusters use their own configuration.
    #[arg(long, value_enum, default_value = "glm")]
    pub refit: RefitArg,
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegionmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `x1_lo,x1_hi,x2_lo,x2_hi`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,1,-1,1")]
    pub bounds: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    pub resolution: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command run. Everything except `wall_time_ms` is a pure
/// function of the arguments and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub tool_version: String,
    pub wall_time_ms: u64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Cli(format!("manifest: {e}")))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Run {
    out_dir: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    seeds: BTreeMap<String, u64>,
    start: Instant,
}

impl Run {
    fn new(out_dir: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            start: Instant::now(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<(), Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::Cli(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Error> {
        let bytes = contents.as_ref();
        write_atomic(self.out_dir.join(name), bytes)?;
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.to_string(), v);
    }

    fn finish(self, command: &str, argv: &[String], config: &impl Serialize) -> Result<(), Error> {
        let manifest = RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config).map_err(|e| Error::Cli(e.to_string()))?,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_ms: self.start.elapsed().as_millis() as u64,
        };
        write_atomic(self.out_dir.join(MANIFEST), pretty(&manifest)?)?;
        Ok(())
    }
}

fn pretty(v: &impl Serialize) -> Result<String, Error> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Cli(e.to_string()))
}

/// Runs the CLI on the process arguments and returns the exit code.
pub fn main_from_env() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    run_argv(&argv)
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
/// Errors are printed to stderr as a single `error: <module>: <message>`
/// line.
pub fn run_argv(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("error: cli: {first}");
                    2
                }
            };
        }
    };
    match with_thread_cap(|| execute(cli.command, &argv[1..])) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs `f` inside a local pool when the thread cap variable is set.
pub fn with_thread_cap<T>(f: impl FnOnce() -> Result<T, Error> + Send) -> Result<T, Error>
where
    T: Send,
{
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::Cli(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Cli(e.to_string()))?;
            pool.install(f)
        }
        Err(_) => f(),
    }
}

/// Runs one parsed command; `argv` excludes the program name and is echoed
/// into the manifest.
pub fn execute(command: Command, argv: &[String]) -> Result<(), Error> {
    match command {
        Command::Train(a) => cmd_train(&a, argv),
        Command::Unwrap(a) => cmd_unwrap(&a, argv),
        Command::Interpret(a) => cmd_interpret(&a, argv),
        Command::Diagnose(a) => cmd_diagnose(&a, argv),
        Command::Merge(a) => cmd_merge(&a, argv),
        Command::Flatten(a) => cmd_flatten(&a, argv),
        Command::Infer(a) => cmd_infer(&a, argv),
        Command::Regionmap(a) => cmd_regionmap(&a, argv),
        Command::Replay(a) => cmd_replay(&a),
    }
}

fn cmd_replay(a: &ReplayArgs) -> Result<(), Error> {
    let m = RunManifest::load(&a.manifest)?;
    if m.argv.first().map(String::as_str) == Some("replay") {
        return Err(Error::Cli("a manifest cannot replay another replay".into()));
    }
    let full: Vec<String> = std::iter::once("relu-unwrap".to_string()).chain(m.argv.iter().cloned()).collect();
    let cli = Cli::try_parse_from(&full).map_err(|e| Error::Cli(one_line(&e.to_string())))?;
    execute(cli.command, &m.argv)
}

fn resolve_task(flag: Option<TaskArg>, implied: Task) -> Result<Task, Error> {
    match flag.map(Task::from) {
        Some(t) if t != implied => Err(Error::Cli(format!(
            "--task {} conflicts with the {} link of the model",
            task_name(t),
            implied.link().as_str()
        ))),
        _ => Ok(implied),
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Regression => "regression",
        Task::Classification => "classification",
    }
}

fn load_model(run: &mut Run, path: &Path) -> Result<ReluNetwork, Error> {
    run.input(path)?;
    Ok(ReluNetwork::load(path)?)
}

fn load_data(run: &mut Run, path: &Path, response_col: &str, task: Task) -> Result<Dataset, Error> {
    run.input(path)?;
    Ok(data::load_csv(path, response_col, task)?)
}

fn load_model_and_data(run: &mut Run, model: &Path, d: &DataArgs) -> Result<(ReluNetwork, Dataset), Error> {
    let net = load_model(run, model)?;
    let task = resolve_task(d.task, Task::from_link(net.link()))?;
    let data = load_data(run, &d.data, &d.response_col, task)?;
    if data.dim() != net.input_dim() {
        return Err(Error::Cli(format!(
            "model expects {} features, {} has {}",
            net.input_dim(),
            d.data.display(),
            data.dim()
        )));
    }
    Ok((net, data))
}

/// The dataset as CSV in the same layout `load_csv` reads.
pub fn dataset_csv(data: &Dataset, response_name: &str) -> String {
    let mut out = line(
        data.feature_names()
            .iter()
            .map(|n| field(n))
            .chain(std::iter::once(field(response_name))),
    );
    for (x, &y) in data.rows().zip(data.response()) {
        out.push_str(&line(x.iter().map(|&v| num(v)).chain(std::iter::once(num(y)))));
    }
    out
}

/// MSE of predictions or AUC of linear predictors.
pub fn network_metric(net: &ReluNetwork, data: &Dataset) -> Result<Option<f64>, Error> {
    match data.task() {
        Task::Regression => {
            let pred = data.rows().map(|x| net.predict(x)).collect::<Result<Vec<_>, _>>()?;
            Ok(Some(metrics::mse(&pred, data.response())))
        }
        Task::Classification => {
            let eta = data.rows().map(|x| net.eta(x)).collect::<Result<Vec<_>, _>>()?;
            Ok(metrics::auc(&eta, data.response()))
        }
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    task: Task,
    n_train: usize,
    n_test: usize,
    train_metric: Option<f64>,
    test_metric: Option<f64>,
    config: &'a TrainConfig,
    report: &'a trainer::TrainReport,
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let mut cfg = match &a.config {
        Some(p) => {
            run.input(p)?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(h) = &a.hidden {
        cfg.hidden_sizes = h.clone();
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.validation_fraction {
        cfg.validation_fraction = v;
    }
    if a.batch_size.is_some() {
        cfg.batch_size = a.batch_size;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(o) = a.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let seed = cfg.seed;
    let full = match (&a.data, a.dataset) {
        (Some(p), _) => {
            let task = a
                .task
                .ok_or_else(|| Error::Cli("--task is required with --data".into()))?;
            load_data(&mut run, p, &a.response_col, task.into())?
        }
        (None, Some(kind)) => {
            let (ds, implied) = match kind {
                Synthetic::Chirpwave => (data::gen_chirpwave(a.n, a.noise, seed), Task::Regression),
                Synthetic::Cocircles => (data::gen_cocircles(a.n, a.noise, seed), Task::Classification),
            };
            if let Some(t) = a.task {
                if Task::from(t) != implied {
                    return Err(Error::Cli(format!("--task {} does not match the synthetic dataset", task_name(t.into()))));
                }
            }
            ds
        }
        (None, None) => return Err(Error::Cli("one of --data or --dataset is required".into())),
    };
    let split = SplitSpec {
        train_fraction: a.train_fraction,
        ..SplitSpec::new(full.task(), seed)
    };
    let (train, test, scaler) = data::split_and_scale(&full, &split)?;
    let (net, report) = trainer::train_with_report(&train, &cfg)?;
    run.seed("seed", seed);
    run.write("model.json", net.to_json_string())?;
    run.write("train.csv", dataset_csv(&train, &a.response_col))?;
    run.write("test.csv", dataset_csv(&test, &a.response_col))?;
    run.write("scaler.json", pretty(&scaler)?)?;
    let summary = TrainSummary {
        task: full.task(),
        n_train: train.len(),
        n_test: test.len(),
        train_metric: network_metric(&net, &train)?,
        test_metric: network_metric(&net, &test)?,
        config: &cfg,
        report: &report,
    };
    run.write("train_report.json", pretty(&summary)?)?;
    run.finish("train", argv, a)
}

/// `region,pattern_hash,pattern,count,b,<features>` per region.
pub fn llms_csv(result: &UnwrapResult) -> String {
    let mut out = line(
        ["region", "pattern_hash", "pattern", "count", "b"]
            .iter()
            .map(|s| s.to_string())
            .chain(result.feature_names.iter().map(|n| field(n))),
    );
    for (i, r) in result.regions.iter().enumerate() {
        out.push_str(&line(
            [
                i.to_string(),
                r.pattern.hash_hex(),
                r.pattern.to_string(),
                r.count.to_string(),
                num(r.llm.b_tilde),
            ]
            .into_iter()
            .chain(r.llm.w_tilde.iter().map(|&w| num(w))),
        ));
    }
    out
}

fn cmd_unwrap(a: &UnwrapArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let (net, data) = load_model_and_data(&mut run, &a.model, &a.data)?;
    let result = unwrapper::unwrap(&net, &data)?;
    run.write("regions.csv", diagnose::region_table(&result)?.to_csv())?;
    run.write("llms.csv", llms_csv(&result))?;
    run.finish("unwrap", argv, a)
}

fn feature_index(split: &str, names: &[String]) -> Result<usize, Error> {
    if let Some(j) = names.iter().position(|n| n == split) {
        return Ok(j);
    }
    split.parse()
        .map_err(|_| Error::Cli(format!("unknown feature {split:?}")))
}

fn cmd_interpret(a: &InterpretArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let (net, data) = load_model_and_data(&mut run, &a.model, &a.data)?;
    let result = unwrapper::unwrap(&net, &data)?;
    let j = feature_index(&a.feature, data.feature_names())?;
    let segments = interpret::local_profile(&result, &data, j, a.top_k)?;
    let importance = interpret::joint_importance(&result)?;
    let parallel = interpret::parallel_coordinates(&result, !a.keep_single, !a.no_intercept)?;
    run.write("profile.csv", interpret::profile_csv(&segments))?;
    run.write("profile.svg", svg::profile_svg(&segments, &data.feature_names()[j]))?;
    run.write("importance.csv", importance.to_csv())?;
    run.write("importance.svg", svg::importance_svg(&importance))?;
    run.write("parallel.csv", parallel.to_csv())?;
    run.write("parallel.svg", svg::parallel_svg(&parallel))?;
    run.finish("interpret", argv, a)
}

fn cmd_diagnose(a: &DiagnoseArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let (net, data) = load_model_and_data(&mut run, &a.model, &a.data)?;
    let result = unwrapper::unwrap(&net, &data)?;
    let th = Thresholds {
        auc: a.auc_threshold,
        mse_factor: a.mse_factor,
    };
    let polar = diagnose::polar_projection(&result, a.sqrt_radius)?;
    let extrapolation = diagnose::extrapolation_report(&result, a.top_k, &th)?;
    let census = diagnose::single_census(&result)?;
    run.write("diagnose.csv", diagnose::region_table(&result)?.to_csv())?;
    run.write("polar.csv", polar.to_csv())?;
    run.write("polar.svg", svg::polar_svg(&polar))?;
    run.write("extrapolation.csv", extrapolation.to_csv())?;
    run.write("extrapolation.svg", svg::extrapolation_svg(&extrapolation))?;
    run.write("census.json", pretty(&census)?)?;
    run.finish("diagnose", argv, a)
}

fn glm_family(task: Task) -> Family {
    match task {
        Task::Regression => Family::Gaussian,
        Task::Classification => Family::Binomial,
    }
}

/// Instance indices of every merged cluster, ascending.
pub fn cluster_members(model: &MergedModel, result: &UnwrapResult) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); model.n_clusters()];
    for (r, region) in result.regions.iter().enumerate() {
        members[model.region_cluster[r]].extend_from_slice(&region.instance_indices);
    }
    for m in &mut members {
        m.sort_unstable();
    }
    members
}

fn stacked_bootstrap(
    model: &MergedModel,
    result: &UnwrapResult,
    data: &Dataset,
    replicates: usize,
    seed: u64,
) -> Result<String, Error> {
    let names = glm::coefficient_names(data.feature_names());
    let mut out = String::from("cluster,term,mean,sd,zero_probability\n");
    for (c, idx) in cluster_members(model, result).iter().enumerate() {
        let sub = data.subset(idx);
        let rep = glm::bootstrap_inference(
            sub.features(),
            sub.dim(),
            sub.response(),
            glm_family(data.task()),
            model.clusters[c].refit.penalty,
            replicates,
            seed,
            &names,
        )?;
        for r in &rep.rows {
            out.push_str(&line([
                c.to_string(),
                field(&r.name),
                num(r.mean),
                num(r.sd),
                num(r.zero_probability),
            ]));
        }
    }
    Ok(out)
}

fn merge_config(f: &MergeFlags, seed: u64) -> MergeConfig {
    MergeConfig {
        k_grid: f.k_grid.clone(),
        neighbors: f.neighbors,
        tau: f.tau,
        refit: f.refit.into(),
        strength: f.strength,
        validation_fraction: f.validation_fraction,
        seed,
        standardize: f.standardize,
    }
}

fn load_test(run: &mut Run, test: Option<&Path>, d: &DataArgs, task: Task) -> Result<Option<Dataset>, Error> {
    test.map(|p| load_data(run, p, &d.response_col, task)).transpose()
}

fn cmd_merge(a: &MergeArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let (net, data) = load_model_and_data(&mut run, &a.model, &a.data)?;
    let test = load_test(&mut run, a.test.as_deref(), &a.data, data.task())?;
    let cfg = merge_config(&a.merge, a.seed);
    let result = unwrapper::unwrap(&net, &data)?;
    let model = simplify::merge(&result, &data, &cfg)?;
    let inference = if cfg.refit != Refit::Glm && a.bootstrap > 0 {
        stacked_bootstrap(&model, &result, &data, a.bootstrap, a.seed)?
    } else {
        simplify::cluster_inference_csv(&model, a.level)?
    };
    let cmp = simplify::compare_models(&net, Some((&model, &result)), None, None, test.as_ref().unwrap_or(&data))?;
    run.seed("seed", a.seed);
    run.write("merged.json", model.to_json_string() + "\n")?;
    run.write("inference.csv", inference)?;
    run.write("compare.csv", cmp.to_csv())?;
    run.finish("merge", argv, a)
}

fn load_merged(run: &mut Run, path: &Path) -> Result<MergedModel, Error> {
    run.input(path)?;
    let text = std::fs::read_to_string(path)?;
    MergedModel::from_json_str(&text).map_err(|e| Error::Cli(format!("{}: {e}", path.display())))
}

fn check_merged(model: &MergedModel, net: &ReluNetwork) -> Result<(), Error> {
    if model.net_fingerprint != net.fingerprint() {
        return Err(Error::Cli("merged model was built from a different network".into()));
    }
    Ok(())
}

fn cmd_flatten(a: &FlattenArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let model = load_merged(&mut run, &a.merged)?;
    let (net, data) = load_model_and_data(&mut run, &a.model, &a.data)?;
    check_merged(&model, &net)?;
    let test = load_test(&mut run, a.test.as_deref(), &a.data, data.task())?;
    let cfg = TrainConfig {
        hidden_sizes: vec![model.n_clusters()],
        max_epochs: a.max_epochs,
        patience: a.patience,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let result = unwrapper::unwrap(&net, &data)?;
    let flat = simplify::flatten(&model, &data, &cfg)?;
    let slfn = trainer::train(&data, &cfg)?;
    let cmp = simplify::compare_models(
        &net,
        Some((&model, &result)),
        Some(&flat.network),
        Some(&slfn),
        test.as_ref().unwrap_or(&data),
    )?;
    run.seed("seed", a.seed);
    run.write("flat_model.json", flat.network.to_json_string())?;
    run.write("slfn_model.json", slfn.to_json_string())?;
    run.write("compare.csv", cmp.to_csv())?;
    run.finish("flatten", argv, a)
}

fn refit_penalty(r: RefitArg, strength: f64) -> Penalty {
    match r {
        RefitArg::Glm => Penalty::None,
        RefitArg::L1 => Penalty::L1(strength),
        RefitArg::L2 => Penalty::L2(strength),
    }
}

fn cmd_infer(a: &InferArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let merged = a.merged.as_deref().map(|p| load_merged(&mut run, p)).transpose()?;
    let (net, data) = load_model_and_data(&mut run, &a.model, &a.data)?;
    let result = unwrapper::unwrap(&net, &data)?;
    let names = glm::coefficient_names(data.feature_names());
    let csv = match (&merged, a.region) {
        (Some(model), _) => {
            check_merged(model, &net)?;
            if a.bootstrap > 0 {
                stacked_bootstrap(model, &result, &data, a.bootstrap, a.seed)?
            } else {
                simplify::cluster_inference_csv(model, a.level)?
            }
        }
        (None, Some(r)) => {
            let region = result.regions.get(r).ok_or_else(|| {
                Error::Cli(format!("region {r} out of range; the data visits {} regions", result.len()))
            })?;
            let sub = data.subset(&region.instance_indices);
            let fam = glm_family(data.task());
            let penalty = refit_penalty(a.refit, a.strength);
            if a.bootstrap > 0 {
                glm::bootstrap_inference(
                    sub.features(),
                    sub.dim(),
                    sub.response(),
                    fam,
                    penalty,
                    a.bootstrap,
                    a.seed,
                    &names,
                )?
                .to_csv()
            } else {
                let fit = glm::fit(sub.features(), sub.dim(), sub.response(), fam, penalty)?;
                glm::wald_inference(&fit, a.level, &names)?.to_csv()
            }
        }
        (None, None) => return Err(Error::Cli("one of --merged or --region is required".into())),
    };
    run.seed("seed", a.seed);
    run.write("inference.csv", csv)?;
    run.finish("infer", argv, a)
}

fn cmd_regionmap(a: &RegionmapArgs, argv: &[String]) -> Result<(), Error> {
    let mut run = Run::new(&a.out.out_dir)?;
    let net = load_model(&mut run, &a.model)?;
    let b = match a.bounds.as_slice() {
        &[x0, x1, y0, y1] if x0 < x1 && y0 < y1 => [(x0, x1), (y0, y1)],
        _ => return Err(Error::Cli("--bounds takes x1_lo,x1_hi,x2_lo,x2_hi with lo < hi".into())),
    };
    let grid = unwrapper::enumerate_regions_grid(&net, b, a.resolution)?;
    let areas = grid.areas();
    let mut ranked: Vec<usize> = (0..grid.patterns.len()).collect();
    ranked.sort_by(|&x, &y| areas[y].cmp(&areas[x]).then(x.cmp(&y)));
    let mut csv = String::from("region,pattern_hash,pattern,layer1,area\n");
    for (rank, &id) in ranked.iter().enumerate() {
        let p = &grid.patterns[id];
        csv.push_str(&line([
            rank.to_string(),
            p.hash_hex(),
            p.to_string(),
            p.truncate(1).to_string(),
            areas[id].to_string(),
        ]));
    }
    run.write("regionmap.svg", svg::regionmap_svg(&grid, ["x1", "x2"]))?;
    run.write("regionmap.csv", csv)?;
    run.finish("regionmap", argv, a)
}
