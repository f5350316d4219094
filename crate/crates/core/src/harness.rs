//! Seeded experiment runs on Four Rooms, metric aggregation and CSV output.

use crate::env::{FourRoomsEnv, DEFAULT_T_MAX, N_CELLS, N_DIRECTIONS};
use crate::learner::{EpisodeStats, TabularLearner, UpdateCounters};
use crate::option_net::{parse_layers, Hyperparams, NetError, NetworkSpec, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "COAGENT_THREADS";
pub const LONG_MODE_EPISODES: usize = 500_000;
const RUN_STREAM_SALT: u64 = 0x636f_6167_656e_7473;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot compare runs: {0}")]
    Compare(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: Topology,
    pub layers: Vec<usize>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub hyper: Hyperparams,
    pub t_max: usize,
    pub legacy_update_mode: bool,
    pub output_dir: PathBuf,
    pub ma_window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Fon,
            layers: vec![1, 1],
            episodes: 50_000,
            seeds: (0..10).collect(),
            hyper: Hyperparams::default(),
            t_max: DEFAULT_T_MAX,
            legacy_update_mode: false,
            output_dir: PathBuf::from("runs"),
            ma_window: 500,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.topology, &self.layers, N_DIRECTIONS)
    }

    /// Sets the layer list from `"1,2,2"`.
    pub fn with_layers(mut self, text: &str) -> Result<Self, HarnessError> {
        self.layers = parse_layers(text)?;
        Ok(self)
    }

    /// The single-seed 500,000-episode stability protocol.
    pub fn long_mode(mut self) -> Self {
        self.episodes = LONG_MODE_EPISODES;
        self.seeds.truncate(1);
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.ma_window == 0 {
            return Err(HarnessError::Config("ma_window must be at least 1".into()));
        }
        if self.episodes < self.ma_window {
            return Err(HarnessError::Config(format!(
                "episodes ({}) must be at least ma_window ({})",
                self.episodes, self.ma_window
            )));
        }
        if self.t_max == 0 {
            return Err(HarnessError::Config("t_max must be positive".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        self.hyper.validate()?;
        self.spec().validate()?;
        Ok(())
    }
}

/// Per-episode series of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub steps: Vec<usize>,
    pub discounted_return: Vec<f64>,
    /// Mean completed activation length per option (root = 0), `None` when no
    /// activation of that option completed in the episode.
    pub option_lengths: Vec<Vec<Option<f64>>>,
    pub counters: Vec<UpdateCounters>,
    /// Every learner table was finite at the end of the run.
    pub finite: bool,
}

impl RunRecord {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            steps: Vec::new(),
            discounted_return: Vec::new(),
            option_lengths: Vec::new(),
            counters: Vec::new(),
            finite: true,
        }
    }

    pub fn push(&mut self, stats: &EpisodeStats) {
        self.steps.push(stats.steps);
        self.discounted_return.push(stats.discounted_return);
        self.option_lengths.push(stats.mean_lengths());
        self.counters.push(stats.counters);
    }

    pub fn episodes(&self) -> usize {
        self.steps.len()
    }

    pub fn steps_f64(&self) -> Vec<f64> {
        self.steps.iter().map(|&s| s as f64).collect()
    }

    pub fn total_counters(&self) -> UpdateCounters {
        let mut total = UpdateCounters::default();
        for c in &self.counters {
            total += *c;
        }
        total
    }
}

/// Seed of the counter-based stream owned by the run with this seed.
pub fn run_stream_seed(seed: u64) -> u64 {
    let mut z = seed ^ RUN_STREAM_SALT;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Environment and agent streams of one run: the same key on two ChaCha streams.
pub fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let key = run_stream_seed(seed);
    let env = ChaCha8Rng::seed_from_u64(key);
    let mut agent = ChaCha8Rng::seed_from_u64(key);
    agent.set_stream(1);
    (env, agent)
}

/// Trains `learner` for `episodes` episodes and records every episode.
pub fn drive<R: Rng + ?Sized>(
    learner: &mut TabularLearner,
    env: &mut FourRoomsEnv,
    episodes: usize,
    t_max: usize,
    seed: u64,
    rng: &mut R,
) -> RunRecord {
    let mut record = RunRecord::new(seed);
    for _ in 0..episodes {
        let stats = learner.learn_episode(env, t_max, rng);
        record.push(&stats);
    }
    record.finite = learner.all_finite();
    record
}

/// One seeded run, without I/O.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunRecord, HarnessError> {
    let mut learner =
        TabularLearner::new(&config.spec(), N_CELLS, config.hyper)?.with_legacy_updates(config.legacy_update_mode);
    let (env_rng, mut agent_rng) = run_rngs(seed);
    let mut env = FourRoomsEnv::new(env_rng);
    Ok(drive(
        &mut learner,
        &mut env,
        config.episodes,
        config.t_max,
        seed,
        &mut agent_rng,
    ))
}

fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "run panicked".to_string())
}

/// Applies `job` to every seed on the bounded worker pool, in seed order. A run that
/// fails or panics yields its message and does not stop its siblings.
pub fn run_isolated<T, F>(seeds: &[u64], job: F) -> Result<Vec<Result<T, String>>, HarnessError>
where
    T: Send,
    F: Fn(u64) -> Result<T, HarnessError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    Ok(pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let result = match catch_unwind(AssertUnwindSafe(|| job(seed))) {
                    Ok(Ok(value)) => Ok(value),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(payload) => Err(panic_message(payload)),
                };
                match &result {
                    Ok(_) => log::info!("seed {seed}: done"),
                    Err(e) => log::error!("seed {seed}: {e}"),
                }
                result
            })
            .collect()
    }))
}

/// Every seed of `config`, without I/O.
pub fn run_seeds(config: &ExperimentConfig) -> Result<Vec<Result<RunRecord, String>>, HarnessError> {
    config.validate()?;
    run_isolated(&config.seeds, |seed| run_seed(config, seed))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<(u64, String)>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    runs: Vec<RunSummary>,
    failures: &'a [(u64, String)],
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    final_steps_ma: Option<f64>,
    counters: UpdateCounters,
    finite: bool,
}

/// Runs every seed and writes `run_seed{seed}.csv`, `agg.csv`, `config.json` and
/// `summary.json` under `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    let results = run_seeds(config)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in config.seeds.iter().zip(results) {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push((*seed, e)),
        }
    }
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for record in &records {
        write_run_csv(&dir.join(format!("run_seed{}.csv", record.seed)), record)?;
    }
    if !records.is_empty() {
        write_agg_csv(&dir.join("agg.csv"), &records, config.ma_window)?;
    }
    write_json(&dir.join("config.json"), config)?;
    let summary = Summary {
        config,
        runs: records
            .iter()
            .map(|r| RunSummary {
                seed: r.seed,
                final_steps_ma: moving_average(&r.steps_f64(), config.ma_window).last().copied(),
                counters: r.total_counters(),
                finite: r.finite,
            })
            .collect(),
        failures: &failures,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(ExperimentOutcome { records, failures })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Trailing means: element `j` is the mean of `series[j..j + window]`, i.e. the
/// average ending at index `j + window − 1`. Empty when `window` exceeds the length.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be at least 1");
    if window > series.len() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(series.len() - window + 1);
    let mut sum: f64 = series[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..series.len() {
        sum += series[i] - series[i - window];
        // periodic exact resum keeps long runs free of drift
        if i % 4096 == 0 {
            sum = series[i + 1 - window..=i].iter().sum();
        }
        out.push(sum / window as f64);
    }
    out
}

/// Per-episode option lengths with empty episodes carrying the previous value
/// forward; `None` until an option's first completed activation.
pub fn option_length_series(record: &RunRecord) -> Vec<Vec<Option<f64>>> {
    let width = record.option_lengths.first().map_or(0, Vec::len);
    let mut last = vec![None; width];
    record
        .option_lengths
        .iter()
        .map(|episode| {
            for (slot, value) in last.iter_mut().zip(episode) {
                if value.is_some() {
                    *slot = *value;
                }
            }
            last.clone()
        })
        .collect()
}

/// Mean of each option's carried-forward length over the last `last_n` episodes.
pub fn late_option_lengths(record: &RunRecord, last_n: usize) -> Vec<Option<f64>> {
    let series = option_length_series(record);
    let start = series.len().saturating_sub(last_n);
    let width = series.first().map_or(0, Vec::len);
    (0..width)
        .map(|o| {
            let values: Vec<f64> = series[start..].iter().filter_map(|e| e[o]).collect();
            (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
        })
        .collect()
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn write_run_csv(path: &Path, record: &RunRecord) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let lengths = option_length_series(record);
    let width = lengths.first().map_or(0, Vec::len);
    let mut header = vec!["episode".to_string(), "steps".into(), "discounted_return".into()];
    header.extend((0..width).map(|o| format!("opt{o}_len")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, row_lengths) in lengths.iter().enumerate() {
        let mut row = vec![
            (i + 1).to_string(),
            record.steps[i].to_string(),
            record.discounted_return[i].to_string(),
        ];
        row.extend(row_lengths.iter().map(|l| l.map_or(String::new(), |v| v.to_string())));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a `run_seed{seed}.csv` back; counters are not persisted there and come
/// back empty.
pub fn read_run_csv(path: &Path, seed: u64) -> Result<RunRecord, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let width = r.headers().map_err(csv_err(path))?.len().saturating_sub(3);
    let mut record = RunRecord::new(seed);
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let bad = |what: &str| HarnessError::Config(format!("{}: bad {what} {:?}", path.display(), row));
        record.steps.push(field(1).parse().map_err(|_| bad("steps"))?);
        record
            .discounted_return
            .push(field(2).parse().map_err(|_| bad("return"))?);
        let lengths = (0..width)
            .map(|o| match field(3 + o) {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad("option length")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        record.option_lengths.push(lengths);
    }
    Ok(record)
}

/// Every `run_seed*.csv` under `dir`, ordered by seed.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(seed) = name
            .strip_prefix("run_seed")
            .and_then(|n| n.strip_suffix(".csv"))
            .and_then(|n| n.parse::<u64>().ok())
        {
            found.push((seed, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(HarnessError::Compare(format!(
            "no run_seed*.csv files in {}",
            dir.display()
        )));
    }
    found
        .into_iter()
        .map(|(seed, path)| read_run_csv(&path, seed))
        .collect()
}

pub fn write_agg_csv(path: &Path, records: &[RunRecord], window: usize) -> Result<(), HarnessError> {
    let averaged: Vec<Vec<f64>> = records.iter().map(|r| moving_average(&r.steps_f64(), window)).collect();
    let rows = averaged.iter().map(Vec::len).min().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["episode", "median_steps_ma", "mean_steps_ma", "q25", "q75"])
        .map_err(csv_err(path))?;
    let mut column = Vec::with_capacity(averaged.len());
    for j in 0..rows {
        column.clear();
        column.extend(averaged.iter().map(|a| a[j]));
        let mean = column.iter().sum::<f64>() / column.len() as f64;
        w.write_record([
            (j + window).to_string(),
            median(&column).to_string(),
            mean.to_string(),
            quantile(&column, 0.25).to_string(),
            quantile(&column, 0.75).to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Steps to goal, lower is better.
    Steps,
    /// Discounted return, higher is better.
    DiscountedReturn,
}

impl std::str::FromStr for Metric {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "steps" => Ok(Metric::Steps),
            "discounted_return" | "return" => Ok(Metric::DiscountedReturn),
            other => Err(HarnessError::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl Metric {
    fn series(self, record: &RunRecord) -> Vec<f64> {
        match self {
            Metric::Steps => record.steps_f64(),
            Metric::DiscountedReturn => record.discounted_return.clone(),
        }
    }

    fn lower_is_better(self) -> bool {
        self == Metric::Steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AWins,
    BWins,
    Tie,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub metric: Metric,
    pub horizon: usize,
    pub window: usize,
    pub per_seed_a: Vec<f64>,
    pub per_seed_b: Vec<f64>,
    pub median_a: f64,
    pub median_b: f64,
    /// `median_a − median_b` and its bootstrap 95% interval.
    pub difference: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub verdict: Verdict,
}

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Moving average (`window`) of `metric` at episode `horizon` for every seed of
/// each side, compared by median with a seed-bootstrap confidence interval. A tie
/// is declared when the interval contains zero.
pub fn compare_runs(
    a: &[RunRecord],
    b: &[RunRecord],
    metric: Metric,
    horizon: usize,
    window: usize,
) -> Result<Comparison, HarnessError> {
    if a.is_empty() || b.is_empty() {
        return Err(HarnessError::Compare("both sides need at least one run".into()));
    }
    let lengths: Vec<usize> = a.iter().chain(b).map(RunRecord::episodes).collect();
    if lengths.iter().any(|&l| l != lengths[0]) {
        return Err(HarnessError::Compare(format!(
            "runs have different horizons: {lengths:?}"
        )));
    }
    if horizon == 0 || horizon > lengths[0] || window == 0 || window > horizon {
        return Err(HarnessError::Compare(format!(
            "horizon {horizon} with window {window} does not fit runs of {} episodes",
            lengths[0]
        )));
    }
    let at_horizon = |r: &RunRecord| {
        let series = metric.series(r);
        series[horizon - window..horizon].iter().sum::<f64>() / window as f64
    };
    let per_seed_a: Vec<f64> = a.iter().map(at_horizon).collect();
    let per_seed_b: Vec<f64> = b.iter().map(at_horizon).collect();
    let median_a = median(&per_seed_a);
    let median_b = median(&per_seed_b);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let resample = |xs: &[f64], rng: &mut ChaCha8Rng| {
        let picked: Vec<f64> = (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).collect();
        median(&picked)
    };
    let diffs: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| resample(&per_seed_a, &mut rng) - resample(&per_seed_b, &mut rng))
        .collect();
    let ci_low = quantile(&diffs, 0.025);
    let ci_high = quantile(&diffs, 0.975);
    let a_lower = ci_high < 0.0;
    let b_lower = ci_low > 0.0;
    let verdict = match (a_lower, b_lower, metric.lower_is_better()) {
        (true, _, true) | (_, true, false) => Verdict::AWins,
        (_, true, true) | (true, _, false) => Verdict::BWins,
        _ => Verdict::Tie,
    };
    Ok(Comparison {
        metric,
        horizon,
        window,
        per_seed_a,
        per_seed_b,
        median_a,
        median_b,
        difference: median_a - median_b,
        ci_low,
        ci_high,
        verdict,
    })
}
