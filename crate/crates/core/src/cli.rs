//! Run configuration and mode dispatch behind the `fhmm` binary.
//!
//! Settings resolve in three layers: built-in defaults, then a flat
//! `key = value` config file, then command-line flags. Unknown keys are
//! errors everywhere.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{
    budgeted_comparison, evaluate, infer_smf, infer_svi, scalability_params, validation_params,
    Arm, EvalReport,
};
use crate::io::{
    config_hash, load_csv, parse_columns, parse_key_values, read_text, write_csv, write_jsonl,
    write_observations, write_text, CsvOptions, ModelFile, Provenance, RowRange, Standardization,
};
use crate::model::{init_params, simulate, FhmmParams, Observations, PosteriorMarginals};
use crate::smf::{smf_em_fit, SmfConfig};
use crate::svi::{derive_seed, train, TrainConfig, TrainInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Train,
    Eval,
    Infer,
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Svi,
    Smf,
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svi" => Ok(Algo::Svi),
            "smf" => Ok(Algo::Smf),
            _ => Err(Error::config(format!(
                "unknown algorithm {s:?} (expected svi or smf)"
            ))),
        }
    }
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Svi => "svi",
            Algo::Smf => "smf",
        }
    }
}

/// Ground-truth parameter sets for `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Two chains, two dimensions.
    Validation,
    /// Four chains, two dimensions.
    Scalability,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(Preset::Validation),
            "scalability" => Ok(Preset::Scalability),
            _ => Err(Error::config(format!(
                "unknown preset {s:?} (expected validation or scalability)"
            ))),
        }
    }
}

impl Preset {
    pub fn params(self) -> FhmmParams {
        match self {
            Preset::Validation => validation_params(),
            Preset::Scalability => scalability_params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub model_in: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    /// Main output of `simulate`, `eval`, `infer` and `compare`.
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    /// Hidden states written by `simulate`.
    pub states: Option<PathBuf>,
    pub algo: Algo,
    pub train: TrainConfig,
    pub smf: SmfConfig,
    pub budget_seconds: Option<f64>,
    /// `None` uses every core.
    pub threads: Option<usize>,
    pub csv: CsvOptions,
    pub test_rows: Option<RowRange>,
    pub preset: Preset,
    pub len: usize,
}

pub const CONFIG_KEYS: &[&str] = &[
    "data",
    "test_data",
    "model_in",
    "model_out",
    "out",
    "trace",
    "states",
    "algo",
    "seed",
    "chains",
    "dt",
    "n_minibatch",
    "iterations",
    "learning_rate",
    "decay",
    "epsilon",
    "hidden",
    "activation",
    "sharing",
    "train_gamma",
    "train_omega",
    "log_every",
    "outer_iterations",
    "e_sweeps",
    "e_tol",
    "outer_tol",
    "budget_seconds",
    "threads",
    "columns",
    "rows",
    "test_rows",
    "standardize",
    "preset",
    "len",
];

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key} = {v:?} is not a valid value")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} = {v:?} is not a boolean"))),
    }
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            data: None,
            test_data: None,
            model_in: None,
            model_out: None,
            out: None,
            trace: None,
            states: None,
            algo: Algo::Svi,
            train: TrainConfig::default(),
            smf: SmfConfig::default(),
            budget_seconds: None,
            threads: None,
            csv: CsvOptions::default(),
            test_rows: None,
            preset: Preset::Validation,
            len: 1000,
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "data" => self.data = path(),
            "test_data" => self.test_data = path(),
            "model_in" => self.model_in = path(),
            "model_out" => self.model_out = path(),
            "out" => self.out = path(),
            "trace" => self.trace = path(),
            "states" => self.states = path(),
            "algo" => self.algo = v.parse()?,
            "seed" => self.train.seed = value(key, v)?,
            "chains" => self.train.chains = value(key, v)?,
            "dt" => self.train.dt = value(key, v)?,
            "n_minibatch" => self.train.n_minibatch = value(key, v)?,
            "iterations" => self.train.iterations = value(key, v)?,
            "learning_rate" => self.train.learning_rate = value(key, v)?,
            "decay" => self.train.decay = value(key, v)?,
            "epsilon" => self.train.epsilon = value(key, v)?,
            "hidden" => {
                self.train.hidden = v
                    .split(',')
                    .map(|h| value(key, h.trim()))
                    .collect::<Result<_>>()?
            }
            "activation" => self.train.activation = v.parse()?,
            "sharing" => self.train.sharing = v.parse()?,
            "train_gamma" => self.train.train_gamma = flag(key, v)?,
            "train_omega" => self.train.train_omega = flag(key, v)?,
            "log_every" => self.train.log_every = value(key, v)?,
            "outer_iterations" => self.smf.outer_iterations = value(key, v)?,
            "e_sweeps" => self.smf.e_step.max_sweeps = value(key, v)?,
            "e_tol" => self.smf.e_step.tol = value(key, v)?,
            "outer_tol" => {
                self.smf.outer_tol = if v == "none" {
                    None
                } else {
                    Some(value(key, v)?)
                }
            }
            "budget_seconds" => {
                let b: f64 = value(key, v)?;
                if !(b >= 0.0 && b.is_finite()) {
                    return Err(Error::config(
                        "budget_seconds must be a non-negative number",
                    ));
                }
                self.budget_seconds = Some(b);
            }
            "threads" => {
                let n: usize = value(key, v)?;
                if n == 0 {
                    return Err(Error::config("threads must be at least 1"));
                }
                self.threads = Some(n);
            }
            "columns" => self.csv.columns = Some(parse_columns(v)?),
            "rows" => self.csv.rows = Some(v.parse()?),
            "test_rows" => self.test_rows = Some(v.parse()?),
            "standardize" => self.csv.standardize = flag(key, v)?,
            "preset" => self.preset = v.parse()?,
            "len" => self.len = value(key, v)?,
            _ => {
                return Err(Error::config(format!(
                    "unknown key {key:?}; known keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a config file on top of the current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        for (line, k, v) in parse_key_values(&read_text(path)?, path)? {
            self.set(&k, &v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn budget(&self) -> Option<Duration> {
        self.budget_seconds.map(Duration::from_secs_f64)
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Error::config(format!("{} needs `{key}`", self.mode_name())))
    }

    fn mode_name(&self) -> &'static str {
        match self.mode {
            Mode::Simulate => "simulate",
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Infer => "infer",
            Mode::Compare => "compare",
        }
    }

    /// The settings that determine a trained model, one `key=value` per line.
    /// Paths, thread count and logging cadence are left out.
    pub fn canonical_training(&self) -> String {
        let t = &self.train;
        let mut lines = vec![
            format!("algo={}", self.algo.as_str()),
            format!("seed={}", t.seed),
            format!("chains={}", t.chains),
        ];
        match self.algo {
            Algo::Svi => {
                let hidden: Vec<String> = t.hidden.iter().map(|h| h.to_string()).collect();
                lines.extend([
                    format!("dt={}", t.dt),
                    format!("n_minibatch={}", t.n_minibatch),
                    format!("iterations={}", t.iterations),
                    format!("learning_rate={:?}", t.learning_rate),
                    format!("decay={:?}", t.decay),
                    format!("epsilon={:?}", t.epsilon),
                    format!("hidden={}", hidden.join(",")),
                    format!("activation={}", t.activation),
                    format!("sharing={}", t.sharing),
                    format!("train_gamma={}", t.train_gamma),
                    format!("train_omega={}", t.train_omega),
                ]);
            }
            Algo::Smf => {
                let s = &self.smf;
                lines.extend([
                    format!("outer_iterations={}", s.outer_iterations),
                    format!("e_sweeps={}", s.e_step.max_sweeps),
                    format!("e_tol={:?}", s.e_step.tol),
                    format!("outer_tol={:?}", s.outer_tol),
                ]);
            }
        }
        let cols = self.csv.columns.as_ref().map_or("all".to_string(), |c| {
            c.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        });
        let rows = self.csv.rows.map_or("all".to_string(), |r| {
            format!(
                "{}:{}",
                r.start,
                r.end.map_or(String::new(), |e| e.to_string())
            )
        });
        lines.extend([
            format!("columns={cols}"),
            format!("rows={rows}"),
            format!("standardize={}", self.csv.standardize),
            format!("budget_seconds={:?}", self.budget_seconds),
        ]);
        lines.join("\n") + "\n"
    }
}

/// Runs `config` on a pool of `config.threads` workers (all cores if unset).
pub fn execute(config: &RunConfig) -> Result<Vec<PathBuf>> {
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("cannot build a {n}-thread pool: {e}")))?
            .install(|| run(config)),
        None => run(config),
    }
}

/// Mode dispatch. Returns the paths of every artifact written.
pub fn run(config: &RunConfig) -> Result<Vec<PathBuf>> {
    match config.mode {
        Mode::Simulate => run_simulate(config),
        Mode::Train => run_train(config),
        Mode::Eval => run_eval(config),
        Mode::Infer => run_infer(config),
        Mode::Compare => run_compare(config),
    }
}

fn run_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.require(&cfg.out, "out")?;
    let params = match &cfg.model_in {
        Some(p) => ModelFile::load(p)?.params,
        None => cfg.preset.params(),
    };
    let (states, y) = simulate(&params, cfg.len, cfg.train.seed)?;
    write_observations(out, &y)?;
    let mut written = vec![out.to_path_buf()];
    if let Some(path) = &cfg.states {
        let m = states.num_chains();
        let header: Vec<String> = (1..=m).map(|k| format!("s{k}")).collect();
        write_csv(
            path,
            &header,
            (0..states.len()).map(|t| (0..m).map(|k| states.get(t, k) as f64).collect()),
        )?;
        written.push(path.clone());
    }
    if let Some(path) = &cfg.model_out {
        let model = ModelFile {
            params,
            net: None,
            provenance: Provenance {
                algorithm: "truth".into(),
                seed: cfg.train.seed,
                config_hash: config_hash(&format!("simulate\nlen={}\n", cfg.len)),
                iterations: 0,
                standardization: None,
            },
        };
        model.save(path)?;
        written.push(path.clone());
    }
    Ok(written)
}

fn run_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = cfg.require(&cfg.data, "data")?;
    let model_out = cfg.require(&cfg.model_out, "model_out")?;
    let (y, standardization) = load_csv(data, &cfg.csv)?;
    let budget = cfg.budget();
    // A warm start keeps the parameters (and network, when shapes agree) of `model_in`.
    let warm = cfg.model_in.as_deref().map(ModelFile::load).transpose()?;
    let mut canonical = cfg.canonical_training();
    if let Some(w) = &warm {
        canonical.push_str(&format!("warm_start={}\n", config_hash(&w.to_text())));
    }
    if let Some(w) = &warm {
        if w.provenance.standardization != standardization {
            return Err(Error::config(
                "the warm-start model was fitted under a different standardization",
            ));
        }
    }
    let (params, net, iterations) = match cfg.algo {
        Algo::Svi => {
            let tc = TrainConfig {
                budget,
                ..cfg.train.clone()
            };
            let init = match warm {
                Some(w) => {
                    let spec = tc.net_spec(y.dim())?;
                    TrainInit {
                        params: Some(w.params),
                        net: w.net.filter(|n| n.spec() == &spec),
                    }
                }
                None => TrainInit::default(),
            };
            let out = train(&tc, &y, init)?;
            if let Some(path) = &cfg.trace {
                write_jsonl(path, &out.trace.records)?;
            }
            (out.params, Some(out.net), out.iterations)
        }
        Algo::Smf => {
            let init = match warm {
                Some(w) => w.params,
                None => init_params(&y, cfg.train.chains, derive_seed(cfg.train.seed, 1))?,
            };
            let sc = SmfConfig {
                budget,
                ..cfg.smf.clone()
            };
            let fit = smf_em_fit(&init, &y, &sc)?;
            if let Some(path) = &cfg.trace {
                write_jsonl(path, &fit.trace)?;
            }
            (fit.params, None, fit.iterations)
        }
    };
    let model = ModelFile {
        params,
        net,
        provenance: Provenance {
            algorithm: cfg.algo.as_str().into(),
            seed: cfg.train.seed,
            config_hash: config_hash(&canonical),
            iterations,
            standardization,
        },
    };
    model.save(model_out)?;
    let mut written = vec![model_out.to_path_buf()];
    written.extend(cfg.trace.clone());
    Ok(written)
}

/// Reads observations in the model's coordinates.
fn load_for_model(
    path: &Path,
    cfg: &RunConfig,
    rows: Option<RowRange>,
    model: &ModelFile,
) -> Result<Observations> {
    let opts = CsvOptions {
        columns: cfg.csv.columns.clone(),
        rows,
        standardize: false,
    };
    let (y, _) = load_csv(path, &opts)?;
    match &model.provenance.standardization {
        Some(st) => st.apply(&y),
        None => Ok(y),
    }
}

fn marginals_for(model: &ModelFile, y: &Observations) -> Result<PosteriorMarginals> {
    match &model.net {
        Some(net) => infer_svi(&model.params, net, y),
        None => infer_smf(&model.params, y),
    }
}

/// Re-expresses likelihoods and errors in the units of the raw data.
fn to_original_units(mut report: EvalReport, st: Option<&Standardization>) -> EvalReport {
    if let Some(st) = st {
        report.ll_train = report.ll_train.map(|v| st.loglik_to_original(v));
        report.ll_test = report.ll_test.map(|v| st.loglik_to_original(v));
        report.mse = st.mse_to_original(&report.mse);
    }
    report
}

fn emit(out: Option<&Path>, text: &str) -> Result<Vec<PathBuf>> {
    match out {
        Some(path) => {
            write_text(path, text)?;
            Ok(vec![path.to_path_buf()])
        }
        None => {
            println!("{text}");
            Ok(Vec::new())
        }
    }
}

fn run_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    let model = ModelFile::load(cfg.require(&cfg.model_in, "model_in")?)?;
    let data = cfg.require(&cfg.data, "data")?;
    let train_y = load_for_model(data, cfg, cfg.csv.rows, &model)?;
    let test_y = match &cfg.test_data {
        Some(p) => load_for_model(p, cfg, cfg.test_rows, &model)?,
        None => train_y.clone(),
    };
    let marginals = marginals_for(&model, &test_y)?;
    let mut report = evaluate(
        &model.provenance.algorithm,
        &model.params,
        &marginals,
        &train_y,
        &test_y,
    )?;
    report.iterations = model.provenance.iterations;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let report = to_original_units(report, model.provenance.standardization.as_ref());
    emit(cfg.out.as_deref(), &report.to_json()?)
}

fn run_infer(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = ModelFile::load(cfg.require(&cfg.model_in, "model_in")?)?;
    let y = load_for_model(cfg.require(&cfg.data, "data")?, cfg, cfg.csv.rows, &model)?;
    let out = cfg.require(&cfg.out, "out")?;
    let marginals = marginals_for(&model, &y)?;
    let header: Vec<String> = (1..=marginals.m).map(|k| format!("theta{k}")).collect();
    write_csv(
        out,
        &header,
        (0..marginals.len).map(|t| marginals.theta_row(t).to_vec()),
    )?;
    Ok(vec![out.to_path_buf()])
}

fn run_compare(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = cfg.require(&cfg.data, "data")?;
    let budget = cfg
        .budget()
        .ok_or_else(|| Error::config("compare needs `budget_seconds`"))?;
    let (train_y, st) = load_csv(data, &cfg.csv)?;
    let test_y = match &cfg.test_data {
        Some(p) => {
            let opts = CsvOptions {
                columns: cfg.csv.columns.clone(),
                rows: cfg.test_rows,
                standardize: false,
            };
            let (raw, _) = load_csv(p, &opts)?;
            match &st {
                Some(st) => st.apply(&raw)?,
                None => raw,
            }
        }
        None => train_y.clone(),
    };
    let svi = Arm::Svi(cfg.train.clone());
    let smf = Arm::Smf(cfg.smf.clone());
    let (a, b) = budgeted_comparison(
        &train_y,
        &test_y,
        budget,
        cfg.train.chains,
        derive_seed(cfg.train.seed, 1),
        (&svi, &smf),
    )?;
    let reports = [
        to_original_units(a, st.as_ref()),
        to_original_units(b, st.as_ref()),
    ];
    let text =
        serde_json::to_string_pretty(&reports).map_err(|e| Error::Internal(e.to_string()))?;
    emit(cfg.out.as_deref(), &text)
}

/// Flags accepted by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// svi or smf.
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub budget_seconds: Option<f64>,
    /// Worker threads; defaults to every core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output file (CSV, report or model, depending on the subcommand).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// 1-based columns to keep, e.g. `2,3`.
    #[arg(long)]
    pub columns: Option<String>,
    /// 1-based inclusive row range, e.g. `1:1000`.
    #[arg(long)]
    pub rows: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Draw a sequence from a preset or a saved model.
    Simulate {
        #[command(flatten)]
        shared: SharedArgs,
        /// validation (2 chains) or scalability (4 chains).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        len: Option<usize>,
        /// Also write the hidden states here.
        #[arg(long)]
        states: Option<PathBuf>,
    },
    /// Fit a model with stochastic variational learning or structured mean-field EM.
    /// `--model-in` warm-starts from a saved model.
    Train {
        #[command(flatten)]
        shared: SharedArgs,
        /// Line-delimited JSON training trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        standardize: bool,
    },
    /// Score a saved model: exact per-step log-likelihood and smoothing error.
    Eval {
        #[command(flatten)]
        shared: SharedArgs,
        #[arg(long)]
        test_data: Option<PathBuf>,
    },
    /// Write per-time posterior marginals.
    Infer {
        #[command(flatten)]
        shared: SharedArgs,
    },
    /// Run both training methods under the same wall-clock budget.
    Compare {
        #[command(flatten)]
        shared: SharedArgs,
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        standardize: bool,
    },
}

#[derive(Debug, Parser)]
#[command(
    name = "fhmm",
    version,
    about = "Factorial HMM learning on long sequences"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl SharedArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("data", self.data.as_deref().map(path_str));
        push("model_in", self.model_in.as_deref().map(path_str));
        push("model_out", self.model_out.as_deref().map(path_str));
        push("algo", self.algo.clone());
        push("budget_seconds", self.budget_seconds.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        push("out", self.out.as_deref().map(path_str));
        push("columns", self.columns.clone());
        push("rows", self.rows.clone());
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got {s:?}")))?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }
}

impl Cli {
    /// Resolves defaults, config file and flags into one configuration.
    pub fn into_config(self) -> Result<RunConfig> {
        let (mode, shared, mut extra): (Mode, SharedArgs, Vec<(&str, Option<String>)>) =
            match self.command {
                Command::Simulate {
                    shared,
                    preset,
                    len,
                    states,
                } => (
                    Mode::Simulate,
                    shared,
                    vec![
                        ("preset", preset),
                        ("len", len.map(|v| v.to_string())),
                        ("states", states.as_deref().map(path_str)),
                    ],
                ),
                Command::Train {
                    shared,
                    trace,
                    chains,
                    iterations,
                    standardize,
                } => (
                    Mode::Train,
                    shared,
                    vec![
                        ("trace", trace.as_deref().map(path_str)),
                        ("chains", chains.map(|v| v.to_string())),
                        ("iterations", iterations.map(|v| v.to_string())),
                        ("standardize", standardize.then(|| "true".to_string())),
                    ],
                ),
                Command::Eval { shared, test_data } => (
                    Mode::Eval,
                    shared,
                    vec![("test_data", test_data.as_deref().map(path_str))],
                ),
                Command::Infer { shared } => (Mode::Infer, shared, Vec::new()),
                Command::Compare {
                    shared,
                    test_data,
                    chains,
                    standardize,
                } => (
                    Mode::Compare,
                    shared,
                    vec![
                        ("test_data", test_data.as_deref().map(path_str)),
                        ("chains", chains.map(|v| v.to_string())),
                        ("standardize", standardize.then(|| "true".to_string())),
                    ],
                ),
            };
        let mut cfg = RunConfig::new(mode);
        if let Some(path) = &shared.config {
            cfg.merge_file(path)?;
        }
        // Subcommand flags first so that `--set` can still override them.
        let mut kv: Vec<(String, String)> = extra
            .drain(..)
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect();
        kv.extend(shared.overrides()?);
        for (k, v) in kv {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

/// Process exit code for an error: 2 for bad input, 1 for failures while computing.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Version { .. } | Error::Io { .. } => 2,
        _ => 1,
    }
}
