//! Config-driven experiment loop: sample a task, optionally pick replay
//! classes and merge their stored samples, train, evaluate, log, and write
//! CSV. Also the IID baseline, fixed-sequence repetition and the
//! distractor retention probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_idx_dataset, make_blob_dataset, BlobParams, LabeledDataset, Split};
use crate::error::{invalid, io_err, Error, Result};
use crate::learner::{
    accuracy_on, evaluate, train_task, Architecture, Network, NetworkSpec, Optimizer, OptimizerConfig, OptimizerKind,
    TrainOptions, TrainingSet,
};
use crate::metrics::{local_forgetting_series, meta_test_probe, restricted_test_accuracy, MetricsLog, TaskRecord};
use crate::num::Scalar;
use crate::replay::{random_replay_budgeted, ComputeLedger, FrequencyReplayConfig, ReplayBuffer, DEFAULT_CAPACITY};
use crate::stream::{Sampler, ScenarioSpec, TaskKind, TaskStream};

pub const CSV_HEADER: &str = "seed,task,overall_acc,iid_norm_acc,local_forgetting,gradient_steps_cum,samples_cum,replayed_count_cum,classes_in_task";
pub const DEFAULT_IID_EPOCHS: usize = 20;
pub const IID_LR: f64 = 1e-3;
/// Train-accuracy change (fraction) below which an epoch counts as flat.
pub const CONVERGENCE_DELTA: f64 = 0.005;
pub const CONVERGENCE_PATIENCE: usize = 3;
pub const CONVERGENCE_MAX_EPOCHS: usize = 50;

const RNG_TRAIN: u64 = 5;
const RNG_REPLAY: u64 = 6;
const RNG_PROBE: u64 = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(BlobParams),
    Idx(IdxPaths),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub width: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "one")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub masking: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    32
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn optimizer_config(&self) -> OptimizerConfig {
        let mut cfg = match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
            OptimizerKind::SgdMomentum => OptimizerConfig::sgd_momentum(self.lr, self.momentum),
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
        };
        cfg.momentum = self.momentum;
        cfg
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs_per_task,
            batch_size: self.batch_size,
            masking: self.masking,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplayConfig {
    #[default]
    None,
    Frequency(FrequencyReplayConfig),
    Random(RandomReplayConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomReplayConfig {
    pub budget_ratio: f64,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IidMode {
    #[default]
    Run,
    Reuse,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IidConfig {
    #[serde(default)]
    pub mode: IidMode,
    /// JSON file holding `{"accuracy": <value>}` for mode = "reuse".
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_iid_epochs")]
    pub epochs: usize,
    /// JSON file caching baseline accuracies across runs.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_iid_epochs() -> usize {
    DEFAULT_IID_EPOCHS
}

impl Default for IidConfig {
    fn default() -> Self {
        Self {
            mode: IidMode::Run,
            path: None,
            epochs: DEFAULT_IID_EPOCHS,
            cache: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub eval_stride: usize,
    /// Output path prefix; nothing is written when absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub iid: IidConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            eval_stride: 1,
            out: None,
            iid: IidConfig::default(),
        }
    }
}

/// Full experiment description. Unknown keys are rejected; ranges are
/// checked by [`RunConfig::validate`] before any work starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub precision: Precision,
    pub dataset: DatasetConfig,
    /// The scenario seed is replaced by the run seed.
    pub scenario: ScenarioSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs(b) => b.input_dim,
            DatasetConfig::Idx(_) => 28 * 28,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            architecture: self.model.architecture.clone(),
            width: self.model.width,
            input_dim: self.input_dim(),
            num_classes: self.scenario.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        if let DatasetConfig::Blobs(b) = &self.dataset {
            b.validate().map_err(cfg_err)?;
            if b.num_classes < self.scenario.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, scenario needs {}",
                    b.num_classes, self.scenario.num_classes
                )));
            }
        }
        self.scenario.validate().map_err(cfg_err)?;
        self.network_spec().validate().map_err(cfg_err)?;
        self.train.optimizer_config().validate().map_err(cfg_err)?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        match &self.replay {
            ReplayConfig::None => {}
            ReplayConfig::Frequency(f) => f.validate().map_err(cfg_err)?,
            ReplayConfig::Random(r) => {
                if !(r.budget_ratio >= 0.0 && r.budget_ratio.is_finite()) || r.capacity == 0 {
                    return Err(Error::Config(
                        "random replay needs budget_ratio >= 0 and capacity >= 1".into(),
                    ));
                }
            }
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.run.eval_stride == 0 {
            return Err(Error::Config("run.eval_stride must be >= 1".into()));
        }
        if self.run.iid.mode == IidMode::Reuse && self.run.iid.path.is_none() {
            return Err(Error::Config("run.iid.mode = \"reuse\" needs run.iid.path".into()));
        }
        if self.run.iid.mode == IidMode::Run && self.run.iid.epochs == 0 {
            return Err(Error::Config("run.iid.epochs must be >= 1".into()));
        }
        Ok(())
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Loads (train, test) and keeps the first N classes of the scenario.
pub fn load_datasets<T: Scalar>(config: &RunConfig) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let (train, test) = match &config.dataset {
        DatasetConfig::Blobs(b) => make_blob_dataset::<T>(b)?,
        DatasetConfig::Idx(p) => (
            load_idx_dataset::<T>(&p.train_images, &p.train_labels, Split::Train)?,
            load_idx_dataset::<T>(&p.test_images, &p.test_labels, Split::Test)?,
        ),
    };
    let n = config.scenario.num_classes;
    if train.num_classes() < n || test.num_classes() < n {
        return Err(invalid(format!(
            "dataset has {} classes, scenario needs {n}",
            train.num_classes().min(test.num_classes())
        )));
    }
    if train.input_dim() != config.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset input width {} does not match {}",
            train.input_dim(),
            config.input_dim()
        )));
    }
    Ok((train.restrict_classes(n)?, test.restrict_classes(n)?))
}

/// Result of one seed of a scenario.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub log: MetricsLog,
    pub ledger: ComputeLedger,
    /// Class probabilities of the stream before any evolution.
    pub class_probs: Vec<f64>,
    /// CSV data rows (no header), newline-terminated.
    pub csv_rows: String,
    /// Per-class accuracy rows: seed, task, then one column per class.
    pub perclass_rows: String,
}

impl SeedRun {
    pub fn overhead(&self) -> Result<f64> {
        self.ledger.overhead()
    }
}

#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: Result<SeedRun>,
}

#[derive(Debug, Default)]
pub struct RunOutcome {
    pub seeds: Vec<SeedOutcome>,
}

impl RunOutcome {
    pub fn successes(&self) -> impl Iterator<Item = &SeedRun> {
        self.seeds.iter().filter_map(|s| s.result.as_ref().ok())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row(seed: u64, record: &TaskRecord, iid: Option<f64>, forgetting: Option<f64>, replayed_cum: u64) -> String {
    let classes: Vec<String> = record.classes_in_task.iter().map(|c| c.to_string()).collect();
    format!(
        "{seed},{},{},{},{},{},{},{replayed_cum},{}\n",
        record.t,
        record.overall_acc,
        fmt_opt(iid.map(|a| record.overall_acc / a)),
        fmt_opt(forgetting),
        record.gradient_steps,
        record.cumulative_samples,
        classes.join(";")
    )
}

fn failure_row(seed: u64, err: &Error) -> String {
    let msg = err.to_string().replace([',', '\n'], " ");
    format!("{seed},failed,,,,,,,{msg}\n")
}

fn seed_file(prefix: &Path, seed: u64) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(format!(".seed{seed}.csv"));
    PathBuf::from(s)
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn iid_for_seed(config: &RunConfig, seed: u64) -> Result<Option<f64>> {
    match config.run.iid.mode {
        IidMode::Skip => Ok(None),
        IidMode::Run => run_iid_baseline(config, seed).map(Some),
        IidMode::Reuse => {
            let path = config.run.iid.path.as_ref().expect("validated");
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            #[derive(Deserialize)]
            struct Stored {
                accuracy: f64,
            }
            let stored: Stored = serde_json::from_str(&text)?;
            Ok(Some(stored.accuracy))
        }
    }
}

/// Runs every seed of `config`, isolating failures per seed. With
/// `run.out` set, writes `<out>.csv`, `<out>.perclass.csv`, `<out>.probs.csv`
/// and a flushed-per-row `<out>.seed<s>.csv` per seed.
pub fn run_scenario(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let out = config.run.out.as_deref();
    if let Some(parent) = out.and_then(Path::parent).filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut outcome = RunOutcome::default();
    for &seed in &config.run.seeds {
        let sink = match out {
            Some(prefix) => {
                let path = seed_file(prefix, seed);
                let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
                writeln!(f, "{CSV_HEADER}").map_err(io_err(&path))?;
                Some((f, path))
            }
            None => None,
        };
        let result = iid_for_seed(config, seed).and_then(|iid| match config.precision {
            Precision::F32 => run_seed::<f32>(config, seed, iid, sink),
            Precision::F64 => run_seed::<f64>(config, seed, iid, sink),
        });
        if let (Err(e), Some(prefix)) = (&result, out) {
            let path = seed_file(prefix, seed);
            let mut f = fs::OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
            f.write_all(failure_row(seed, e).as_bytes()).map_err(io_err(&path))?;
        }
        outcome.seeds.push(SeedOutcome { seed, result });
    }
    if let Some(prefix) = out {
        write_merged(prefix, config, &outcome)?;
    }
    Ok(outcome)
}

fn write_merged(prefix: &Path, config: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    let mut order: Vec<&SeedOutcome> = outcome.seeds.iter().collect();
    order.sort_by_key(|s| s.seed);
    let mut main = format!("{CSV_HEADER}\n");
    let n = config.scenario.num_classes;
    let class_cols: Vec<String> = (0..n).map(|c| format!("c{c}")).collect();
    let mut perclass = format!("seed,task,{}\n", class_cols.join(","));
    let mut probs = format!("seed,classes_per_task,{}\n", class_cols.join(","));
    for s in order {
        match &s.result {
            Ok(run) => {
                main.push_str(&run.csv_rows);
                perclass.push_str(&run.perclass_rows);
                let p: Vec<String> = run.class_probs.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(probs, "{},{},{}", s.seed, config.scenario.classes_per_task, p.join(","));
            }
            Err(e) => main.push_str(&failure_row(s.seed, e)),
        }
    }
    for (suffix, body) in [(".csv", main), (".perclass.csv", perclass), (".probs.csv", probs)] {
        let path = with_suffix(prefix, suffix);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}

fn run_seed<T: Scalar>(
    config: &RunConfig,
    seed: u64,
    iid: Option<f64>,
    mut sink: Option<(BufWriter<File>, PathBuf)>,
) -> Result<SeedRun> {
    let (train, test) = load_datasets::<T>(config)?;
    let mut spec = config.scenario.clone();
    spec.seed = seed;
    let mut stream = TaskStream::new(spec, train.input_dim())?;
    let class_probs = stream.distribution().probs().to_vec();
    let mut net = Network::<T>::new(config.network_spec(), seed)?;
    let mut opt = Optimizer::new(config.train.optimizer_config(), &net)?;
    let opts = config.train.options();
    let mut train_rng = seeded(seed, RNG_TRAIN);
    let mut replay_rng = seeded(seed, RNG_REPLAY);
    let mut buffer = match &config.replay {
        ReplayConfig::None => None,
        ReplayConfig::Frequency(f) => Some(ReplayBuffer::<T>::new(f.clone())?),
        ReplayConfig::Random(r) => {
            let mut f = FrequencyReplayConfig::new(0.0, 1.0, 0);
            f.capacity = r.capacity;
            Some(ReplayBuffer::<T>::new(f)?)
        }
    };
    let mut log = MetricsLog::new();
    log.iid_accuracy = iid;
    let mut ledger = ComputeLedger::default();
    let mut steps = 0u64;
    let mut samples = 0u64;
    let mut csv_rows = String::new();
    let mut perclass_rows = String::new();
    let total = config.scenario.num_tasks;
    for t in 0..total {
        let task = stream.next_task(train.class_index())?;
        let data = TrainingSet::from_task(&task, &train)?;
        let replayed = match (&config.replay, buffer.as_mut()) {
            (ReplayConfig::Frequency(_), Some(buf)) => buf.select_replay_classes(&task.classes),
            (ReplayConfig::Random(r), Some(buf)) => {
                random_replay_budgeted(buf, &task.classes, r.budget_ratio, &mut replay_rng)?
            }
            _ => Vec::new(),
        };
        let merged = match buffer.as_ref() {
            Some(buf) => buf.merge_with_oversampling(&data, &replayed)?,
            None => data.clone(),
        };
        let stats = train_task(&mut net, &mut opt, &merged, &opts, &mut train_rng)?;
        steps += stats.steps;
        samples += stats.samples;
        ledger.record(task.classes.len(), replayed.len());
        if let Some(buf) = buffer.as_mut() {
            buf.observe_task(&data, &mut replay_rng)?;
        }
        if t % config.run.eval_stride != 0 && t + 1 != total {
            continue;
        }
        let ev = evaluate(&net, &test)?;
        let record = TaskRecord {
            t,
            overall_acc: ev.overall,
            per_class_acc: ev.per_class,
            classes_in_task: task.classes.clone(),
            gradient_steps: steps,
            replayed_classes: replayed,
            cumulative_samples: samples,
        };
        log.push(record)?;
        let record = log.records().last().expect("just pushed");
        let forgetting = local_forgetting_series(&log).last().copied().flatten();
        let row = csv_row(seed, record, iid, forgetting, ledger.replayed_class_slots);
        let accs: Vec<String> = record.per_class_acc.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(perclass_rows, "{seed},{t},{}", accs.join(","));
        if let Some((f, path)) = sink.as_mut() {
            f.write_all(row.as_bytes()).map_err(io_err(path.as_path()))?;
            f.flush().map_err(io_err(path.as_path()))?;
        }
        csv_rows.push_str(&row);
    }
    Ok(SeedRun {
        seed,
        log,
        ledger,
        class_probs,
        csv_rows,
        perclass_rows,
    })
}

fn iid_cache_key(config: &RunConfig, seed: u64) -> Result<String> {
    Ok(serde_json::to_string(&(
        &config.dataset,
        &config.network_spec(),
        seed,
        config.run.iid.epochs,
        config.train.batch_size,
        config.precision,
    ))?)
}

fn read_cache(path: &Path) -> Result<BTreeMap<String, f64>> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Best test accuracy of the same architecture trained with Adam (default
/// parameters, lr 1e-3) on the shuffled training data of all N classes.
/// Cached in `run.iid.cache` when configured.
pub fn run_iid_baseline(config: &RunConfig, seed: u64) -> Result<f64> {
    let key = iid_cache_key(config, seed)?;
    if let Some(path) = &config.run.iid.cache {
        if let Some(&acc) = read_cache(path)?.get(&key) {
            return Ok(acc);
        }
    }
    let acc = match config.precision {
        Precision::F32 => iid_typed::<f32>(config, seed)?,
        Precision::F64 => iid_typed::<f64>(config, seed)?,
    };
    if let Some(path) = &config.run.iid.cache {
        let mut cache = read_cache(path)?;
        cache.insert(key, acc);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, serde_json::to_string_pretty(&cache)?).map_err(io_err(path))?;
    }
    Ok(acc)
}

fn iid_typed<T: Scalar>(config: &RunConfig, seed: u64) -> Result<f64> {
    let (train, test) = load_datasets::<T>(config)?;
    let mut net = Network::<T>::new(config.network_spec(), seed)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(IID_LR), &net)?;
    let data = TrainingSet::whole(&train);
    let opts = TrainOptions {
        epochs: 1,
        batch_size: config.train.batch_size,
        masking: false,
    };
    let mut rng = seeded(seed, RNG_TRAIN);
    let mut best = 0.0f64;
    for _ in 0..config.run.iid.epochs {
        train_task(&mut net, &mut opt, &data, &opts, &mut rng)?;
        best = best.max(evaluate(&net, &test)?.overall);
    }
    Ok(best)
}

/// Outcome of [`train_to_plateau`].
struct Plateau {
    epochs: usize,
    converged: bool,
    steps: u64,
    samples: u64,
}

/// Trains one epoch at a time until the train accuracy restricted to
/// `classes` moves by less than [`CONVERGENCE_DELTA`] for
/// [`CONVERGENCE_PATIENCE`] consecutive epochs, or the epoch cap is hit.
fn train_to_plateau<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer<T>,
    data: &TrainingSet<T>,
    classes: &[usize],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Plateau> {
    let opts = TrainOptions { epochs: 1, ..*opts };
    let mut out = Plateau {
        epochs: 0,
        converged: false,
        steps: 0,
        samples: 0,
    };
    let mut prev: Option<f64> = None;
    let mut flat = 0usize;
    while out.epochs < CONVERGENCE_MAX_EPOCHS {
        let stats = train_task(net, opt, data, &opts, rng)?;
        out.steps += stats.steps;
        out.samples += stats.samples;
        out.epochs += 1;
        let acc = accuracy_on(net, data, Some(classes))?;
        if let Some(p) = prev {
            flat = if (acc - p).abs() < CONVERGENCE_DELTA {
                flat + 1
            } else {
                0
            };
        }
        prev = Some(acc);
        if flat >= CONVERGENCE_PATIENCE {
            out.converged = true;
            break;
        }
    }
    Ok(out)
}

/// Per-task outcome of a fixed-sequence run.
#[derive(Clone, Debug)]
pub struct RepeatRun {
    pub log: MetricsLog,
    /// Epochs spent on each task.
    pub epochs: Vec<usize>,
    /// Tasks that hit the epoch cap without meeting the plateau criterion.
    pub unconverged: Vec<usize>,
    pub tasks_per_cycle: usize,
}

impl RepeatRun {
    /// Mean overall accuracy over the tasks of cycle `k` (0-based).
    pub fn cycle_mean(&self, k: usize) -> Option<f64> {
        let recs = self.log.records();
        let lo = k * self.tasks_per_cycle;
        let hi = (lo + self.tasks_per_cycle).min(recs.len());
        (lo < hi).then(|| recs[lo..hi].iter().map(|r| r.overall_acc).sum::<f64>() / (hi - lo) as f64)
    }
}

/// Replays the lexicographic pair sequence `cycles` times, training each
/// task until its train accuracy moves by less than 0.5 points for 3
/// consecutive epochs (at most 50 epochs).
pub fn run_fixed_sequence_repeats(config: &RunConfig, seed: u64, cycles: usize) -> Result<RepeatRun> {
    if cycles == 0 {
        return Err(invalid("cycles must be >= 1"));
    }
    if config.scenario.sampler != (Sampler::Structured { flip_p: 0.0 }) {
        return Err(invalid(
            "fixed-sequence repetition needs the structured sampler with flip_p = 0",
        ));
    }
    config.validate()?;
    match config.precision {
        Precision::F32 => repeats_typed::<f32>(config, seed, cycles),
        Precision::F64 => repeats_typed::<f64>(config, seed, cycles),
    }
}

fn repeats_typed<T: Scalar>(config: &RunConfig, seed: u64, cycles: usize) -> Result<RepeatRun> {
    let (train, test) = load_datasets::<T>(config)?;
    let mut spec = config.scenario.clone();
    spec.seed = seed;
    let mut stream = TaskStream::new(spec, train.input_dim())?;
    let per_cycle = stream.task_pool().len();
    let mut net = Network::<T>::new(config.network_spec(), seed)?;
    let mut opt = Optimizer::new(config.train.optimizer_config(), &net)?;
    let opts = TrainOptions {
        epochs: 1,
        ..config.train.options()
    };
    let mut rng = seeded(seed, RNG_TRAIN);
    let mut log = MetricsLog::new();
    let mut epochs = Vec::new();
    let mut unconverged = Vec::new();
    let (mut steps, mut samples) = (0u64, 0u64);
    for t in 0..cycles * per_cycle {
        let task = stream.next_task(train.class_index())?;
        let data = TrainingSet::from_task(&task, &train)?;
        let fit = train_to_plateau(&mut net, &mut opt, &data, &task.classes, &opts, &mut rng)?;
        steps += fit.steps;
        samples += fit.samples;
        epochs.push(fit.epochs);
        if !fit.converged {
            unconverged.push(t);
        }
        let ev = evaluate(&net, &test)?;
        log.push(TaskRecord {
            t,
            overall_acc: ev.overall,
            per_class_acc: ev.per_class,
            classes_in_task: task.classes,
            gradient_steps: steps,
            replayed_classes: Vec::new(),
            cumulative_samples: samples,
        })?;
    }
    Ok(RepeatRun {
        log,
        epochs,
        unconverged,
        tasks_per_cycle: per_cycle,
    })
}

/// Retention measurements after one task of a distractor stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub t: usize,
    pub kind: TaskKind,
    /// Distractor tasks seen so far.
    pub distractors: usize,
    /// Full-head accuracy on the interest test samples, over its value
    /// right after the first interest task.
    pub zero_shot: f64,
    /// Interest-restricted accuracy of a copy fine-tuned for one epoch on
    /// the interest task, over the restricted accuracy after the first
    /// interest task.
    pub meta_test: f64,
}

/// Runs a distractor scenario, training every task to a plateau, and probes
/// the task of interest after every task. The probe's own fine-tune is a
/// single epoch.
pub fn run_distractor_probe(config: &RunConfig, seed: u64) -> Result<Vec<ProbePoint>> {
    if !matches!(config.scenario.sampler, Sampler::Distractor { .. }) {
        return Err(invalid("the retention probe needs the distractor sampler"));
    }
    config.validate()?;
    match config.precision {
        Precision::F32 => probe_typed::<f32>(config, seed),
        Precision::F64 => probe_typed::<f64>(config, seed),
    }
}

fn probe_typed<T: Scalar>(config: &RunConfig, seed: u64) -> Result<Vec<ProbePoint>> {
    let (train, test) = load_datasets::<T>(config)?;
    let mut spec = config.scenario.clone();
    spec.seed = seed;
    let mut stream = TaskStream::new(spec, train.input_dim())?;
    let interest = stream.interest_classes().expect("distractor sampler").to_vec();
    let interest_train = TrainingSet::from_classes(&train, &interest)?;
    let interest_test = TrainingSet::from_classes(&test, &interest)?;
    let mut net = Network::<T>::new(config.network_spec(), seed)?;
    let recipe = config.train.optimizer_config();
    let mut opt = Optimizer::new(recipe.clone(), &net)?;
    let opts = config.train.options();
    let mut rng = seeded(seed, RNG_TRAIN);
    let mut probe_rng = seeded(seed, RNG_PROBE);
    let mut first: Option<(f64, f64)> = None;
    let mut distractors = 0;
    let mut points = Vec::new();
    for _ in 0..config.scenario.num_tasks {
        let task = stream.next_task(train.class_index())?;
        let data = TrainingSet::from_task(&task, &train)?;
        train_to_plateau(&mut net, &mut opt, &data, &task.classes, &opts, &mut rng)?;
        if task.kind == TaskKind::Distractor {
            distractors += 1;
        }
        let zero = accuracy_on(&net, &interest_test, None)?;
        let restricted = restricted_test_accuracy(&net, &test, &interest)?;
        let (zero0, restricted0) = *first.get_or_insert((zero, restricted));
        if zero0 <= 0.0 {
            return Err(Error::Domain(
                "zero first-occurrence accuracy on the interest task".into(),
            ));
        }
        let meta = meta_test_probe(
            &net,
            &recipe,
            &interest_train,
            &interest,
            &test,
            restricted0,
            opts.batch_size,
            opts.masking,
            &mut probe_rng,
        )?;
        points.push(ProbePoint {
            t: task.t,
            kind: task.kind,
            distractors,
            zero_shot: zero / zero0,
            meta_test: meta,
        });
    }
    Ok(points)
}

/// One parsed data row of a run CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub seed: u64,
    pub task: usize,
    pub overall_acc: f64,
    pub iid_norm_acc: Option<f64>,
    pub local_forgetting: Option<f64>,
    pub gradient_steps_cum: u64,
    pub samples_cum: u64,
    pub replayed_count_cum: u64,
    pub classes_in_task: Vec<usize>,
}

fn parse_field<F: std::str::FromStr>(s: &str, what: &str) -> Result<F> {
    s.parse().map_err(|_| Error::Config(format!("bad {what} value {s:?}")))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_field(s, what).map(Some)
    }
}

/// Parses a run CSV, skipping failure rows.
pub fn parse_run_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("unexpected CSV header".into()));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Config(format!("expected 9 CSV fields, got {}", f.len())));
        }
        if f[1] == "failed" {
            continue;
        }
        rows.push(CsvRow {
            seed: parse_field(f[0], "seed")?,
            task: parse_field(f[1], "task")?,
            overall_acc: parse_field(f[2], "overall_acc")?,
            iid_norm_acc: parse_opt(f[3], "iid_norm_acc")?,
            local_forgetting: parse_opt(f[4], "local_forgetting")?,
            gradient_steps_cum: parse_field(f[5], "gradient_steps_cum")?,
            samples_cum: parse_field(f[6], "samples_cum")?,
            replayed_count_cum: parse_field(f[7], "replayed_count_cum")?,
            classes_in_task: if f[8].is_empty() {
                Vec::new()
            } else {
                f[8].split(';')
                    .map(|c| parse_field(c, "class"))
                    .collect::<Result<_>>()?
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r#"
precision = "f64"
dataset.kind = "blobs"
dataset.num_classes = 4
dataset.samples_per_class = 20
dataset.input_dim = 6
dataset.separation = 4.0
scenario.num_classes = 4
scenario.classes_per_task = 2
scenario.num_tasks = 5
model.architecture.kind = "mlp"
model.architecture.hidden = [8]
train.optimizer = "sgd"
train.lr = 0.05
run.seeds = [1, 2]
run.iid.mode = "skip"
"#;

    #[test]
    fn parses_dotted_keys() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(cfg.scenario.num_tasks, 5);
        assert_eq!(cfg.train.batch_size, 32);
        assert!(cfg.train.masking);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_str(&json).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let bad = format!("{SMALL}\ntrain.bogus = 1\n");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = SMALL.replace("train.lr = 0.05", "train.lr = -1.0");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = SMALL.replace(
            "dataset.separation = 4.0",
            "dataset.separation = 4.0\ndataset.extra = 2",
        );
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn one_row_per_task_and_seed() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        let out = run_scenario(&cfg).unwrap();
        assert_eq!(out.seeds.len(), 2);
        for run in out.successes() {
            let rows = parse_run_csv(&format!("{CSV_HEADER}\n{}", run.csv_rows)).unwrap();
            assert_eq!(rows.len(), 5);
            assert_eq!(rows[4].gradient_steps_cum, 5 * 2);
        }
    }
}
