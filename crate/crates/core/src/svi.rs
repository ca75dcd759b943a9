//! Stochastic variational training: minibatches of subchains, gradients
//! through the copula pairs and recognition networks, and Rmsprop ascent.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elbo::{
    add_into, center_value, center_value_grad, valid_centers, CenterInputs, EmissionTerms,
    GammaAccum, TRANSITION_FLOOR,
};
use crate::error::{Error, Result};
use crate::model::{init_params, FhmmParams, Observations, TransitionMatrix};
use crate::numerics::CholFactor;
use crate::recognition::{window, Activation, MlpSpec, RecognitionNet, Sharing, Tape};

/// Unconstrained coordinates of `Γ`.
///
/// Layout: `W` row-major, then the lower triangle of `L` row by row with
/// diagonal entries stored as logarithms, then four softmax logits per chain
/// (`λ[i][j]`, row-major).
pub fn gamma_to_unconstrained(params: &FhmmParams) -> Vec<f64> {
    let (m, d) = (params.num_chains(), params.dim());
    let mut v = params.w().to_vec();
    let chol = params.chol();
    for i in 0..d {
        for j in 0..i {
            v.push(chol.get(i, j));
        }
        v.push(chol.get(i, i).ln());
    }
    for k in 0..m {
        for row in &params.transition(k).p {
            for &p in row {
                v.push(p.max(TRANSITION_FLOOR).ln());
            }
        }
    }
    v
}

pub fn gamma_len(m: usize, d: usize) -> usize {
    (m + 1) * d + d * (d + 1) / 2 + 4 * m
}

pub fn gamma_from_unconstrained(m: usize, d: usize, v: &[f64]) -> Result<FhmmParams> {
    if v.len() != gamma_len(m, d) {
        return Err(Error::DimensionMismatch {
            what: "unconstrained parameter vector",
            expected: gamma_len(m, d),
            actual: v.len(),
        });
    }
    let nw = (m + 1) * d;
    let w = v[..nw].to_vec();
    let mut l = vec![0.0; d * d];
    let mut p = nw;
    for i in 0..d {
        for j in 0..i {
            l[i * d + j] = v[p];
            p += 1;
        }
        l[i * d + i] = v[p].exp();
        p += 1;
    }
    let mut trans = Vec::with_capacity(m);
    for _ in 0..m {
        let mut a = [[0.0; 2]; 2];
        for row in a.iter_mut() {
            let (x0, x1) = (v[p], v[p + 1]);
            let mx = x0.max(x1);
            let (e0, e1) = ((x0 - mx).exp(), (x1 - mx).exp());
            *row = [e0 / (e0 + e1), e1 / (e0 + e1)];
            p += 2;
        }
        trans.push(TransitionMatrix::new(a)?);
    }
    FhmmParams::new(m, d, w, CholFactor::new(d, l)?, trans)
}

/// Converts accumulated raw sums into a gradient in unconstrained coordinates.
fn gamma_gradient(params: &FhmmParams, acc: &GammaAccum, scale: f64) -> Vec<f64> {
    let d = params.dim();
    let chol = params.chol();
    let mut g: Vec<f64> = acc.w.iter().map(|v| v * scale).collect();
    for i in 0..d {
        for j in 0..=i {
            // (U L)_ij with L lower triangular.
            let mut ul: f64 = (j..d).map(|k| acc.outer[i * d + k] * chol.get(k, j)).sum();
            if i == j {
                ul -= acc.count / chol.get(i, i);
                ul *= chol.get(i, i);
            }
            g.push(ul * scale);
        }
    }
    for logits in &acc.logits {
        for row in logits {
            for v in row {
                g.push(v * scale);
            }
        }
    }
    g
}

/// One subchain: its center and the rows it needs, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubchainSample {
    pub center: usize,
    pub start: usize,
    pub end: usize,
}

impl SubchainSample {
    /// Subchain for `center` under windows of half-width `half`.
    pub fn new(center: usize, half: usize) -> Self {
        Self {
            center,
            start: center - 1 - half,
            end: center + 2 + half,
        }
    }

    pub fn rows<'a>(&self, y: &'a Observations) -> &'a [f64] {
        y.rows(self.start, self.end)
    }
}

/// Draws minibatches by reshuffling all valid centers once per epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    half: usize,
    n: usize,
    centers: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha20Rng,
}

pub fn epoch_sampler(len: usize, dt: usize, n_minibatch: usize, seed: u64) -> Result<EpochSampler> {
    if n_minibatch == 0 {
        return Err(Error::config("minibatch size must be at least 1"));
    }
    let centers: Vec<usize> = valid_centers(len, dt)?.collect();
    Ok(EpochSampler {
        half: dt / 2,
        n: n_minibatch,
        order: Vec::new(),
        pos: 0,
        centers,
        rng: ChaCha20Rng::seed_from_u64(seed),
    })
}

impl EpochSampler {
    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn next_batch(&mut self) -> Vec<SubchainSample> {
        if self.pos >= self.order.len() {
            self.order = self.centers.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.n).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&t| SubchainSample::new(t, self.half))
            .collect();
        self.pos = end;
        batch
    }

    /// The minibatches of one whole epoch.
    pub fn epoch(&mut self) -> Vec<Vec<SubchainSample>> {
        self.pos = self.order.len();
        let mut out = vec![self.next_batch()];
        while self.pos < self.order.len() {
            out.push(self.next_batch());
        }
        out
    }
}

/// `(T - Δt) / n`.
pub fn batch_factor(len: usize, dt: usize, n_batch: usize) -> Result<f64> {
    if n_batch == 0 {
        return Err(Error::domain("batch factor needs a non-empty minibatch"));
    }
    if len <= dt {
        return Err(Error::domain("sequence shorter than the window"));
    }
    Ok((len - dt) as f64 / n_batch as f64)
}

/// `n_valid / n`, the scaling that makes a minibatch sum an unbiased
/// estimate of the sum over every valid center. Used for training.
pub fn unbiased_batch_factor(n_valid: usize, n_batch: usize) -> Result<f64> {
    if n_batch == 0 {
        return Err(Error::domain("batch factor needs a non-empty minibatch"));
    }
    Ok(n_valid as f64 / n_batch as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticGradient {
    /// In the coordinates of [`gamma_to_unconstrained`].
    pub gamma: Vec<f64>,
    pub omega: Vec<f64>,
    pub elbo: f64,
}

struct CenterContribution {
    value: f64,
    acc: GammaAccum,
    omega: Vec<f64>,
}

impl CenterContribution {
    fn merge(mut self, other: Self) -> Self {
        self.value += other.value;
        self.acc.add(&other.acc);
        add_into(&mut self.omega, &other.omega);
        self
    }
}

fn center_contribution(
    params: &FhmmParams,
    emission: &EmissionTerms,
    net: &RecognitionNet,
    y: &Observations,
    t: usize,
) -> Result<CenterContribution> {
    let dt = net.spec().window;
    let tape = |s: usize| -> Result<Tape> { net.forward_tape(window(y, s, dt)?) };
    let (prev, cur, next) = (tape(t - 1)?, tape(t)?, tape(t + 1)?);
    let inputs = CenterInputs {
        theta_prev: &prev.output.theta,
        theta: &cur.output.theta,
        rho: &cur.output.rho,
        theta_next: &next.output.theta,
        rho_next: &next.output.rho,
        y: y.row(t),
    };
    let mut acc = GammaAccum::zeros(params.num_chains(), params.dim());
    let (value, g) = center_value_grad(params, emission, &inputs, &mut acc)?;
    let mut omega = vec![0.0; net.spec().num_params()];
    let zeros = vec![0.0; params.num_chains()];
    net.backward(&prev, &g.theta_prev, &zeros, &mut omega);
    net.backward(&cur, &g.theta, &g.rho, &mut omega);
    net.backward(&next, &g.theta_next, &g.rho_next, &mut omega);
    Ok(CenterContribution { value, acc, omega })
}

/// Pairwise reduction in a fixed shape, independent of how the items were computed.
fn tree_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

fn check_batch(net: &RecognitionNet, y: &Observations, batch: &[SubchainSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::domain("empty minibatch"));
    }
    let centers = valid_centers(y.len(), net.spec().window)?;
    for s in batch {
        if !centers.contains(&s.center) {
            return Err(Error::Boundary {
                t: s.center,
                len: y.len(),
                half: net.spec().half_window(),
            });
        }
    }
    Ok(())
}

/// `factor × Σ` of the local objective and its gradients over `batch`.
///
/// Centers are evaluated in parallel and reduced in a fixed order, so the
/// result does not depend on the number of worker threads.
pub fn stochastic_gradient(
    params: &FhmmParams,
    net: &RecognitionNet,
    y: &Observations,
    batch: &[SubchainSample],
    factor: f64,
) -> Result<StochasticGradient> {
    check_batch(net, y, batch)?;
    let emission = EmissionTerms::new(params);
    let parts: Vec<CenterContribution> = batch
        .par_iter()
        .map(|s| center_contribution(params, &emission, net, y, s.center))
        .collect::<Result<_>>()?;
    let total = tree_reduce(parts, CenterContribution::merge).expect("batch is non-empty");
    Ok(StochasticGradient {
        gamma: gamma_gradient(params, &total.acc, factor),
        omega: total.omega.iter().map(|v| v * factor).collect(),
        elbo: factor * total.value,
    })
}

/// `factor × Σ` of the local objective over `batch`, without gradients.
pub fn batch_objective(
    params: &FhmmParams,
    net: &RecognitionNet,
    y: &Observations,
    batch: &[SubchainSample],
    factor: f64,
) -> Result<f64> {
    check_batch(net, y, batch)?;
    let emission = EmissionTerms::new(params);
    let values: Vec<f64> = batch
        .par_iter()
        .map(|s| {
            let dt = net.spec().window;
            let at = |t: usize| net.forward(window(y, t, dt)?);
            let (prev, cur, next) = (at(s.center - 1)?, at(s.center)?, at(s.center + 1)?);
            let inputs = CenterInputs {
                theta_prev: &prev.theta,
                theta: &cur.theta,
                rho: &cur.rho,
                theta_next: &next.theta,
                rho_next: &next.rho,
                y: y.row(s.center),
            };
            center_value(params, &emission, &inputs)
        })
        .collect::<Result<_>>()?;
    Ok(factor * tree_reduce(values, |a, b| a + b).unwrap_or(0.0))
}

/// Running mean square of the gradient, one entry per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub mean_square: Vec<f64>,
}

impl RmsProp {
    pub fn new(n: usize) -> Self {
        Self {
            mean_square: vec![0.0; n],
        }
    }
}

/// One ascent step: `v ← γv + (1-γ)g²`, `x ← x + lr·g/(√v + ε)`.
pub fn rmsprop_step(
    state: &mut RmsProp,
    x: &mut [f64],
    grad: &[f64],
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    if x.len() != grad.len() || state.mean_square.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            what: "rmsprop state",
            expected: x.len(),
            actual: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::domain("rmsprop received a non-finite gradient"));
    }
    for ((xi, &g), v) in x.iter_mut().zip(grad).zip(state.mean_square.iter_mut()) {
        *v = decay * *v + (1.0 - decay) * g * g;
        *xi += lr * g / (v.sqrt() + eps);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("rmsprop produced a non-finite parameter"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub chains: usize,
    pub dt: usize,
    pub n_minibatch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sharing: Sharing,
    pub train_gamma: bool,
    pub train_omega: bool,
    /// A trace record is written every `log_every` iterations (and after the last).
    pub log_every: usize,
    /// Wall-clock limit; training stops early, keeping the last parameters.
    pub budget: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            dt: 4,
            n_minibatch: 10,
            iterations: 1000,
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            seed: 0,
            hidden: vec![30],
            activation: Activation::Tanh,
            sharing: Sharing::PerChain,
            train_gamma: true,
            train_omega: true,
            log_every: 100,
            budget: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_minibatch == 0 {
            return Err(Error::config("n_minibatch must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning rate must be non-negative and finite",
            ));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config("rmsprop decay must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("rmsprop epsilon must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        Ok(())
    }

    pub fn net_spec(&self, obs_dim: usize) -> Result<MlpSpec> {
        MlpSpec::new(
            self.dt,
            obs_dim,
            self.chains,
            self.hidden.clone(),
            self.activation,
            self.sharing,
        )
    }
}

/// Independent sub-seeds for the different random consumers of one run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub grad_norm_gamma: f64,
    pub grad_norm_omega: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn push(&mut self, record: TraceRecord) {
        debug_assert!(self
            .records
            .last()
            .is_none_or(|r| r.iteration < record.iteration));
        self.records.push(record);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: FhmmParams,
    pub net: RecognitionNet,
    pub trace: TrainTrace,
    pub iterations: usize,
    pub hit_budget: bool,
}

/// Starting values; `None` fields are drawn from the seed.
#[derive(Debug, Clone, Default)]
pub struct TrainInit {
    pub params: Option<FhmmParams>,
    pub net: Option<RecognitionNet>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn train(config: &TrainConfig, y: &Observations, init: TrainInit) -> Result<TrainResult> {
    config.validate()?;
    let (m, d) = (config.chains, y.dim());
    let spec = config.net_spec(d)?;
    let params = match init.params {
        Some(p) => p,
        None => init_params(y, m, derive_seed(config.seed, 1))?,
    };
    if params.num_chains() != m || params.dim() != d {
        return Err(Error::config(
            "initial parameters do not match the configured M and data D",
        ));
    }
    let mut net = match init.net {
        Some(n) if n.spec() == &spec => n,
        Some(_) => {
            return Err(Error::config(
                "initial recognition network has a different shape",
            ))
        }
        None => RecognitionNet::initialized(spec, derive_seed(config.seed, 2))?,
    };
    let mut sampler = epoch_sampler(
        y.len(),
        config.dt,
        config.n_minibatch,
        derive_seed(config.seed, 3),
    )?;
    let n_valid = sampler.num_centers();

    let mut gamma = gamma_to_unconstrained(&params);
    let mut params = params;
    let mut gamma_state = RmsProp::new(gamma.len());
    let mut omega_state = RmsProp::new(net.spec().num_params());
    let mut trace = TrainTrace::default();
    let start = Instant::now();
    let mut done = 0;
    let mut hit_budget = false;

    for iteration in 1..=config.iterations {
        if config.budget.is_some_and(|b| start.elapsed() >= b) {
            hit_budget = true;
            break;
        }
        let batch = sampler.next_batch();
        let factor = unbiased_batch_factor(n_valid, batch.len())?;
        let grad = stochastic_gradient(&params, &net, y, &batch, factor)?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&grad.gamma) || !finite(&grad.omega) || !grad.elbo.is_finite() {
            return Err(Error::NonFiniteGradient {
                iteration,
                detail: format!(
                    "elbo {}, |∇Γ| {}, |∇Ω| {}",
                    grad.elbo,
                    norm(&grad.gamma),
                    norm(&grad.omega)
                ),
            });
        }
        let wrap = |e: Error| Error::NonFiniteGradient {
            iteration,
            detail: e.to_string(),
        };
        if config.train_gamma {
            let before = gamma.clone();
            rmsprop_step(
                &mut gamma_state,
                &mut gamma,
                &grad.gamma,
                config.learning_rate,
                config.decay,
                config.epsilon,
            )
            .map_err(wrap)?;
            if gamma != before {
                params = gamma_from_unconstrained(m, d, &gamma).map_err(wrap)?;
            }
        }
        if config.train_omega {
            rmsprop_step(
                &mut omega_state,
                net.flat_mut(),
                &grad.omega,
                config.learning_rate,
                config.decay,
                config.epsilon,
            )
            .map_err(wrap)?;
        }
        done = iteration;
        if iteration % config.log_every == 0 || iteration == config.iterations {
            trace.push(TraceRecord {
                iteration,
                elbo: grad.elbo,
                grad_norm_gamma: norm(&grad.gamma),
                grad_norm_omega: norm(&grad.omega),
                wall_clock_secs: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainResult {
        params,
        net,
        trace,
        iterations: done,
        hit_budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elbo::local_elbo;
    use crate::model::{simulate, tests::two_chain_params};

    fn tiny() -> (FhmmParams, RecognitionNet, Observations) {
        let chol = CholFactor::diagonal(&[0.6]).unwrap();
        let a = TransitionMatrix::new([[0.85, 0.15], [0.25, 0.75]]).unwrap();
        let p = FhmmParams::new(1, 1, vec![1.8, -0.4], chol, vec![a]).unwrap();
        let (_, y) = simulate(&p, 30, 4).unwrap();
        let spec = MlpSpec::new(4, 1, 1, vec![3], Activation::Tanh, Sharing::PerChain).unwrap();
        let net = RecognitionNet::initialized(spec, 9).unwrap();
        (p, net, y)
    }

    fn all_centers(len: usize, dt: usize) -> Vec<SubchainSample> {
        valid_centers(len, dt)
            .unwrap()
            .map(|t| SubchainSample::new(t, dt / 2))
            .collect()
    }

    #[test]
    fn unconstrained_roundtrip() {
        let p = two_chain_params();
        let v = gamma_to_unconstrained(&p);
        assert_eq!(v.len(), gamma_len(2, 2));
        let back = gamma_from_unconstrained(2, 2, &v).unwrap();
        for (a, b) in back.w().iter().zip(p.w()) {
            assert_eq!(a, b);
        }
        for (a, b) in back.chol().entries().iter().zip(p.chol().entries()) {
            assert!((a - b).abs() < 1e-15);
        }
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((back.transition(k).p[i][j] - p.transition(k).p[i][j]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn batch_factor_examples() {
        assert!((batch_factor(1000, 4, 10).unwrap() - 99.6).abs() < 1e-12);
        assert_eq!(batch_factor(1000, 4, 996).unwrap(), 1.0);
        assert_eq!(batch_factor(1_000_000, 20, 10).unwrap(), 99_998.0);
        assert!(batch_factor(10, 4, 0).is_err());
        assert_eq!(unbiased_batch_factor(994, 994).unwrap(), 1.0);
    }

    #[test]
    fn sampler_covers_every_center_once_per_epoch() {
        let mut s = epoch_sampler(16, 4, 3, 11).unwrap();
        let expected: Vec<usize> = (3..13).collect();
        for _ in 0..3 {
            let epoch = s.epoch();
            assert_eq!(epoch.len(), 4);
            assert!(epoch[..3].iter().all(|b| b.len() == 3));
            assert_eq!(epoch[3].len(), 1);
            let mut seen: Vec<usize> = epoch.iter().flatten().map(|b| b.center).collect();
            seen.sort_unstable();
            assert_eq!(seen, expected);
            for b in epoch.iter().flatten() {
                assert_eq!(b.start, b.center - 3);
                assert_eq!(b.end, b.center + 4);
                assert!(b.end <= 16);
            }
        }
        let mut big = epoch_sampler(16, 4, 50, 1).unwrap();
        assert_eq!(big.epoch().len(), 1);
        let a = epoch_sampler(100, 4, 7, 5).unwrap().epoch();
        let b = epoch_sampler(100, 4, 7, 5).unwrap().epoch();
        assert_eq!(a, b);
        assert!(epoch_sampler(6, 4, 1, 0).is_err());
        assert!(epoch_sampler(60, 4, 0, 0).is_err());
    }

    #[test]
    fn objective_matches_local_elbo_sum() {
        let (p, net, y) = tiny();
        let batch = all_centers(30, 4);
        let direct: f64 = batch
            .iter()
            .map(|s| local_elbo(&p, &net, &y, s.center).unwrap())
            .sum();
        let obj = batch_objective(&p, &net, &y, &batch, 1.0).unwrap();
        let g = stochastic_gradient(&p, &net, &y, &batch, 1.0).unwrap();
        assert!((obj - direct).abs() < 1e-10);
        assert!((g.elbo - direct).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, net, y) = tiny();
        let batch = all_centers(30, 4)[..5].to_vec();
        let factor = unbiased_batch_factor(24, 5).unwrap();
        let g = stochastic_gradient(&p, &net, &y, &batch, factor).unwrap();
        let gamma = gamma_to_unconstrained(&p);
        let h = 1e-5;
        let f_gamma = |v: &[f64]| {
            let q = gamma_from_unconstrained(1, 1, v).unwrap();
            batch_objective(&q, &net, &y, &batch, factor).unwrap()
        };
        for k in 0..gamma.len() {
            let (mut up, mut down) = (gamma.clone(), gamma.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (f_gamma(&up) - f_gamma(&down)) / (2.0 * h);
            let rel = (g.gamma[k] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "Γ[{k}]: {} vs {fd}", g.gamma[k]);
        }
        for k in 0..net.flat().len() {
            let (mut up, mut down) = (net.clone(), net.clone());
            up.flat_mut()[k] += h;
            down.flat_mut()[k] -= h;
            let fd = (batch_objective(&p, &up, &y, &batch, factor).unwrap()
                - batch_objective(&p, &down, &y, &batch, factor).unwrap())
                / (2.0 * h);
            let rel = (g.omega[k] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "Ω[{k}]: {} vs {fd}", g.omega[k]);
        }
    }

    #[test]
    fn single_center_sweep_is_unbiased() {
        let p = two_chain_params();
        let (_, y) = simulate(&p, 40, 2).unwrap();
        let spec = MlpSpec::new(2, 2, 2, vec![4], Activation::Tanh, Sharing::Shared).unwrap();
        let net = RecognitionNet::initialized(spec, 3).unwrap();
        let centers = all_centers(40, 2);
        let n = centers.len();
        let full = stochastic_gradient(&p, &net, &y, &centers, 1.0).unwrap();
        let mut avg_gamma = vec![0.0; full.gamma.len()];
        let mut avg_omega = vec![0.0; full.omega.len()];
        let c = unbiased_batch_factor(n, 1).unwrap();
        for s in &centers {
            let g = stochastic_gradient(&p, &net, &y, std::slice::from_ref(s), c).unwrap();
            add_into(&mut avg_gamma, &g.gamma);
            add_into(&mut avg_omega, &g.omega);
        }
        for (a, b) in avg_gamma.iter().zip(&full.gamma) {
            assert!((a / n as f64 - b).abs() < 1e-10 * b.abs().max(1.0));
        }
        for (a, b) in avg_omega.iter().zip(&full.omega) {
            assert!((a / n as f64 - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rmsprop_hand_checks() {
        let mut st = RmsProp::new(3);
        let mut x = vec![1.0, -2.0, 0.5];
        rmsprop_step(&mut st, &mut x, &[0.0; 3], 0.1, 0.9, 1e-8).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 0.5]);

        let (lr, gamma, eps, g) = (1e-3, 0.9, 1e-8, 0.37);
        let mut st = RmsProp::new(1);
        let mut x = vec![0.0];
        rmsprop_step(&mut st, &mut x, &[g], lr, gamma, eps).unwrap();
        let v = (1.0 - gamma) * g * g;
        assert!((x[0] - lr * g / (v.sqrt() + eps)).abs() < 1e-10);
        assert!((x[0] - lr / (1.0f64 - gamma).sqrt()).abs() < 1e-6);

        let mut st = RmsProp::new(1);
        let mut x = vec![0.0];
        let g = -2.5;
        rmsprop_step(&mut st, &mut x, &[g], 0.01, 0.0, 1e-8).unwrap();
        let before = x[0];
        rmsprop_step(&mut st, &mut x, &[g], 0.01, 0.0, 1e-8).unwrap();
        assert!((x[0] - before - 0.01 * g / (g.abs() + 1e-8)).abs() < 1e-15);

        let mut st = RmsProp::new(1);
        assert!(rmsprop_step(&mut st, &mut [0.0], &[f64::NAN], 0.1, 0.9, 1e-8).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (p, net, y) = tiny();
        let cfg = TrainConfig {
            chains: 1,
            hidden: vec![3],
            iterations: 20,
            learning_rate: 0.0,
            log_every: 5,
            ..TrainConfig::default()
        };
        let out = train(
            &cfg,
            &y,
            TrainInit {
                params: Some(p.clone()),
                net: Some(net.clone()),
            },
        )
        .unwrap();
        assert_eq!(out.net, net);
        let back = gamma_to_unconstrained(&out.params);
        assert_eq!(back, gamma_to_unconstrained(&p));
        assert_eq!(out.trace.len(), 4);
        assert_eq!(out.iterations, 20);
    }
}
