//! Metrics and the equal-budget comparison between the two training methods.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    exact_loglik, init_params, smoothed_reconstruction, FhmmParams, Observations,
    PosteriorMarginals, TransitionMatrix, EXACT_MAX_CHAINS,
};
use crate::numerics::CholFactor;
use crate::recognition::RecognitionNet;
use crate::smf::{full_marginals, smf_e_step, smf_em_fit, EStepConfig, SmfConfig, SmfState};
use crate::svi::{train, TrainConfig, TrainInit};

/// Largest chain count accepted by [`align_chains`].
pub const ALIGN_MAX_CHAINS: usize = 8;

/// Exact log-likelihood divided by the sequence length.
pub fn loglik_per_timestep(params: &FhmmParams, y: &Observations) -> Result<f64> {
    if params.num_chains() > EXACT_MAX_CHAINS {
        return Err(Error::TooManyChains {
            m: params.num_chains(),
            limit: EXACT_MAX_CHAINS,
        });
    }
    if y.is_empty() {
        return Err(Error::domain("cannot score an empty sequence"));
    }
    Ok(exact_loglik(params, y)? / y.len() as f64)
}

/// Per-dimension mean squared error of the posterior-weighted reconstruction.
pub fn smoothing_mse(
    params: &FhmmParams,
    marginals: &PosteriorMarginals,
    y: &Observations,
) -> Result<Vec<f64>> {
    if marginals.len != y.len() || marginals.offset != 0 {
        return Err(Error::DimensionMismatch {
            what: "marginals covering the sequence",
            expected: y.len(),
            actual: marginals.len,
        });
    }
    if params.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            what: "observation dimension",
            expected: params.dim(),
            actual: y.dim(),
        });
    }
    let recon = smoothed_reconstruction(params, marginals)?;
    let d = y.dim();
    let mut mse = vec![0.0; d];
    for t in 0..y.len() {
        for ((acc, a), b) in mse.iter_mut().zip(y.row(t)).zip(recon.row(t)) {
            *acc += (a - b) * (a - b);
        }
    }
    mse.iter_mut().for_each(|v| *v /= y.len() as f64);
    Ok(mse)
}

/// `learned` chain `perm[k]`, relabeled when `flips[k]`, is matched to true chain `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub flips: Vec<bool>,
    /// Squared Frobenius distance of `W` plus squared distance of all `A` entries.
    pub distance: f64,
    pub aligned: FhmmParams,
}

fn distance(a: &FhmmParams, b: &FhmmParams) -> f64 {
    let w: f64 = a
        .w()
        .iter()
        .zip(b.w())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let t: f64 = a
        .transitions()
        .iter()
        .zip(b.transitions())
        .flat_map(|(x, y)| x.p.iter().flatten().zip(y.p.iter().flatten()))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    w + t
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Exhaustive search over chain permutations and state relabelings.
pub fn align_chains(truth: &FhmmParams, learned: &FhmmParams) -> Result<Alignment> {
    let m = truth.num_chains();
    if learned.num_chains() != m || learned.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            what: "chains × dimension",
            expected: m * truth.dim(),
            actual: learned.num_chains() * learned.dim(),
        });
    }
    if m > ALIGN_MAX_CHAINS {
        return Err(Error::TooManyChains {
            m,
            limit: ALIGN_MAX_CHAINS,
        });
    }
    let mut best: Option<Alignment> = None;
    for perm in permutations(m) {
        let permuted = learned.permuted(&perm)?;
        for mask in 0..1usize << m {
            let mut cand = permuted.clone();
            for k in 0..m {
                if mask >> k & 1 == 1 {
                    cand = cand.relabeled(k);
                }
            }
            let dist = distance(truth, &cand);
            if best.as_ref().is_none_or(|b| dist < b.distance) {
                best = Some(Alignment {
                    perm: perm.clone(),
                    flips: (0..m).map(|k| mask >> k & 1 == 1).collect(),
                    distance: dist,
                    aligned: cand,
                });
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Two persistent chains with well-separated emission directions, `D = 2`.
pub fn validation_params() -> FhmmParams {
    FhmmParams::new(
        2,
        2,
        vec![3.0, 1.0, -1.0, 3.0, 0.0, 0.0],
        CholFactor::new(2, vec![0.8, 0.0, 0.2, 0.7]).expect("valid factor"),
        vec![
            TransitionMatrix::from_switch(0.05, 0.10).expect("valid chain"),
            TransitionMatrix::from_switch(0.10, 0.05).expect("valid chain"),
        ],
    )
    .expect("valid preset")
}

/// Four chains sharing a two-dimensional emission; used for the length sweep.
pub fn scalability_params() -> FhmmParams {
    FhmmParams::new(
        4,
        2,
        vec![2.0, 0.5, -0.5, 2.0, 1.5, -1.5, -1.2, -1.0, 0.0, 0.0],
        CholFactor::new(2, vec![0.5, 0.0, 0.1, 0.45]).expect("valid factor"),
        [(0.05, 0.10), (0.10, 0.05), (0.03, 0.06), (0.08, 0.08)]
            .iter()
            .map(|&(a, b)| TransitionMatrix::from_switch(a, b).expect("valid chain"))
            .collect(),
    )
    .expect("valid preset")
}

/// Marginals from a trained recognition network, with structured boundary handling.
pub fn infer_svi(
    params: &FhmmParams,
    net: &RecognitionNet,
    y: &Observations,
) -> Result<PosteriorMarginals> {
    full_marginals(params, y, net)
}

/// Marginals from a structured mean-field E-step started at the prior.
pub fn infer_smf(params: &FhmmParams, y: &Observations) -> Result<PosteriorMarginals> {
    let state = smf_e_step(
        params,
        y,
        SmfState::prior(params, y.len())?,
        EStepConfig::default(),
    )?;
    state.marginals()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub algorithm: String,
    /// Exact log-likelihood per time step; absent when `M` is too large to score.
    pub ll_train: Option<f64>,
    pub ll_test: Option<f64>,
    /// Per-dimension smoothing MSE on the test sequence.
    pub mse: Vec<f64>,
    pub wall_clock_secs: f64,
    pub iterations: usize,
    /// Set when the budget ran out before a single iteration finished.
    pub no_iteration_completed: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("malformed report: {e}")))
    }

    /// Everything except wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a == *other
    }
}

fn optional_ll(params: &FhmmParams, y: &Observations) -> Result<Option<f64>> {
    if params.num_chains() > EXACT_MAX_CHAINS {
        return Ok(None);
    }
    loglik_per_timestep(params, y).map(Some)
}

/// Scores trained parameters with the marginals of the matching inference method.
pub fn evaluate(
    algorithm: &str,
    params: &FhmmParams,
    marginals: &PosteriorMarginals,
    train: &Observations,
    test: &Observations,
) -> Result<EvalReport> {
    Ok(EvalReport {
        algorithm: algorithm.to_string(),
        ll_train: optional_ll(params, train)?,
        ll_test: optional_ll(params, test)?,
        mse: smoothing_mse(params, marginals, test)?,
        wall_clock_secs: 0.0,
        iterations: 0,
        no_iteration_completed: false,
    })
}

/// The two arms of an equal-budget comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum Arm {
    Svi(TrainConfig),
    Smf(SmfConfig),
}

impl Arm {
    fn tag(&self) -> &'static str {
        match self {
            Arm::Svi(_) => "svi",
            Arm::Smf(_) => "smf",
        }
    }
}

/// Trains one arm under `budget` from `init` and scores its last parameters.
pub fn run_arm(
    arm: &Arm,
    init: &FhmmParams,
    train_y: &Observations,
    test_y: &Observations,
    budget: Duration,
) -> Result<EvalReport> {
    let start = Instant::now();
    let (params, marginals, iterations) = match arm {
        Arm::Svi(cfg) => {
            let cfg = TrainConfig {
                budget: Some(budget),
                ..cfg.clone()
            };
            let out = train(
                &cfg,
                train_y,
                TrainInit {
                    params: Some(init.clone()),
                    net: None,
                },
            )?;
            let marg = infer_svi(&out.params, &out.net, test_y)?;
            (out.params, marg, out.iterations)
        }
        Arm::Smf(cfg) => {
            let cfg = SmfConfig {
                budget: Some(budget),
                ..cfg.clone()
            };
            let fit = smf_em_fit(init, train_y, &cfg)?;
            let marg = infer_smf(&fit.params, test_y)?;
            (fit.params, marg, fit.iterations)
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    let mut report = evaluate(arm.tag(), &params, &marginals, train_y, test_y)?;
    report.wall_clock_secs = elapsed;
    report.iterations = iterations;
    report.no_iteration_completed = iterations == 0;
    Ok(report)
}

/// Runs both arms from the same data-scaled starting point under the same budget.
pub fn budgeted_comparison(
    train_y: &Observations,
    test_y: &Observations,
    budget: Duration,
    chains: usize,
    init_seed: u64,
    arms: (&Arm, &Arm),
) -> Result<(EvalReport, EvalReport)> {
    let init = init_params(train_y, chains, init_seed)?;
    let a = run_arm(arms.0, &init, train_y, test_y, budget)?;
    let b = run_arm(arms.1, &init, train_y, test_y, budget)?;
    Ok((a, b))
}
