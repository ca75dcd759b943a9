//! Structured mean-field variational EM.
//!
//! The posterior is approximated by `M` independent Markov chains. Each chain
//! keeps its own transition matrix and sees the data through per-time
//! potentials `exp(δ_t s)`, where `δ_t` is the whitened expected residual of
//! the other chains projected on its own emission row, minus half that row's
//! Mahalanobis norm. Cycling exact chain updates is coordinate ascent on the
//! ELBO, so it never decreases.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::copula::PairPmf;
use crate::elbo::{EmissionTerms, VariationalSource, TRANSITION_FLOOR};
use crate::error::{Error, Result};
use crate::model::{FhmmParams, Observations, PosteriorMarginals, TransitionMatrix};
use crate::numerics::{CholFactor, THETA_EPS};

const LOG_FLOOR: f64 = 1e-300;

/// Posterior of one two-state chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPosterior {
    /// `p(s_t = 1)`.
    pub gamma: Vec<f64>,
    /// `xi[t]` couples `t` and `t + 1`.
    pub xi: Vec<PairPmf>,
    pub log_z: f64,
}

/// Pins the marginal of the first or last position to a given value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anchor {
    First(f64),
    Last(f64),
}

/// Forward-backward with strictly positive per-time potentials `h[t][s]`.
pub fn forward_backward(h: &[[f64; 2]], a: &TransitionMatrix, pi1: f64) -> Result<ChainPosterior> {
    let mut log_h = Vec::with_capacity(h.len());
    for (t, row) in h.iter().enumerate() {
        if row.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || row.iter().all(|v| *v == 0.0) {
            return Err(Error::domain(format!(
                "potential row {t} must be non-negative, finite and not all zero"
            )));
        }
        log_h.push([row[0].ln(), row[1].ln()]);
    }
    forward_backward_log(&log_h, a, pi1, None)
}

/// Scaled forward-backward on log potentials, optionally anchored.
pub fn forward_backward_log(
    log_h: &[[f64; 2]],
    a: &TransitionMatrix,
    pi1: f64,
    anchor: Option<Anchor>,
) -> Result<ChainPosterior> {
    let n = log_h.len();
    if n == 0 {
        return Ok(ChainPosterior {
            gamma: Vec::new(),
            xi: Vec::new(),
            log_z: 0.0,
        });
    }
    if !(0.0..=1.0).contains(&pi1) {
        return Err(Error::domain("initial probability outside [0, 1]"));
    }
    let p = &a.p;
    let mut e: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut shift = Vec::with_capacity(n);
    for row in log_h {
        let mx = row[0].max(row[1]);
        if !mx.is_finite() {
            return Err(Error::domain(
                "potentials must be finite with at least one positive entry",
            ));
        }
        e.push([(row[0] - mx).exp(), (row[1] - mx).exp()]);
        shift.push(mx);
    }
    let mut pi = [1.0 - pi1, pi1];
    match anchor {
        Some(Anchor::First(theta)) => {
            // Unnormalised backward messages of the evidence after position 0.
            let th = theta.clamp(THETA_EPS, 1.0 - THETA_EPS);
            let mut b = [1.0, 1.0];
            for t in (1..n).rev() {
                let nb = [
                    p[0][0] * e[t][0] * b[0] + p[0][1] * e[t][1] * b[1],
                    p[1][0] * e[t][0] * b[0] + p[1][1] * e[t][1] * b[1],
                ];
                let s = nb[0] + nb[1];
                b = [nb[0] / s, nb[1] / s];
            }
            let raw = [(1.0 - th) / b[0], th / b[1]];
            pi = [raw[0] / (raw[0] + raw[1]), raw[1] / (raw[0] + raw[1])];
            e[0] = [1.0, 1.0];
            shift[0] = 0.0;
        }
        Some(Anchor::Last(_)) | None => {}
    }

    let mut alpha = vec![[0.0; 2]; n];
    let mut scale = vec![0.0; n];
    let mut log_z = 0.0;
    for t in 0..n {
        let pred = if t == 0 {
            pi
        } else {
            let prev = alpha[t - 1];
            [
                prev[0] * p[0][0] + prev[1] * p[1][0],
                prev[0] * p[0][1] + prev[1] * p[1][1],
            ]
        };
        if t == n - 1 {
            if let Some(Anchor::Last(theta)) = anchor {
                let th = theta.clamp(THETA_EPS, 1.0 - THETA_EPS);
                e[t] = [
                    (1.0 - th) / pred[0].max(LOG_FLOOR),
                    th / pred[1].max(LOG_FLOOR),
                ];
                shift[t] = 0.0;
            }
        }
        let raw = [pred[0] * e[t][0], pred[1] * e[t][1]];
        let c = raw[0] + raw[1];
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::domain(format!(
                "forward pass lost all mass at position {t}"
            )));
        }
        alpha[t] = [raw[0] / c, raw[1] / c];
        scale[t] = c;
        log_z += c.ln() + shift[t];
    }

    let mut beta = vec![[1.0; 2]; n];
    for t in (0..n - 1).rev() {
        let nxt = beta[t + 1];
        let c = scale[t + 1];
        for i in 0..2 {
            beta[t][i] = (p[i][0] * e[t + 1][0] * nxt[0] + p[i][1] * e[t + 1][1] * nxt[1]) / c;
        }
    }
    let mut gamma = Vec::with_capacity(n);
    for t in 0..n {
        let g0 = alpha[t][0] * beta[t][0];
        let g1 = alpha[t][1] * beta[t][1];
        gamma.push(g1 / (g0 + g1));
    }
    let mut xi = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n.saturating_sub(1) {
        let c = scale[t + 1];
        let mut q = [[0.0; 2]; 2];
        let mut total = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                q[i][j] = alpha[t][i] * p[i][j] * e[t + 1][j] * beta[t + 1][j] / c;
                total += q[i][j];
            }
        }
        q.iter_mut().flatten().for_each(|v| *v /= total);
        xi.push(PairPmf { q });
    }
    Ok(ChainPosterior { gamma, xi, log_z })
}

/// Variational state of the structured approximation over a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SmfState {
    pub len: usize,
    pub m: usize,
    /// `T × M` marginals `q(s_t^m = 1)`.
    pub gamma: Vec<f64>,
    /// `(T-1) × M` pairwise tables.
    pub xi: Vec<PairPmf>,
    /// `T × M` log potential ratios `δ_t^m`.
    pub log_pot: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl SmfState {
    /// Every chain at its prior: stationary marginals and prior pair tables.
    pub fn prior(params: &FhmmParams, len: usize) -> Result<Self> {
        let m = params.num_chains();
        let pi = params.initial_probs()?;
        let mut gamma = Vec::with_capacity(len * m);
        for _ in 0..len {
            gamma.extend_from_slice(&pi);
        }
        let mut xi = Vec::with_capacity(len.saturating_sub(1) * m);
        for _ in 1..len {
            for (k, &p1) in pi.iter().enumerate() {
                let a = &params.transition(k).p;
                let s = [1.0 - p1, p1];
                xi.push(PairPmf {
                    q: [
                        [s[0] * a[0][0], s[0] * a[0][1]],
                        [s[1] * a[1][0], s[1] * a[1][1]],
                    ],
                });
            }
        }
        Ok(Self {
            len,
            m,
            gamma,
            xi,
            log_pot: vec![0.0; len * m],
            sweeps: 0,
            converged: false,
        })
    }

    pub fn marginals(&self) -> Result<PosteriorMarginals> {
        let mut out = PosteriorMarginals::from_theta(0, self.len, self.m, self.gamma.clone())?;
        out.pairs = Some(self.xi.clone());
        Ok(out)
    }
}

#[inline]
fn h_bin(x: f64) -> f64 {
    let f = |v: f64| if v <= 0.0 { 0.0 } else { v * v.ln() };
    f(x) + f(1.0 - x)
}

/// ELBO of the structured approximation described by `state`.
pub fn smf_elbo(params: &FhmmParams, y: &Observations, state: &SmfState) -> Result<f64> {
    check_state(params, y, state)?;
    let (m, len) = (state.m, state.len);
    let emission = EmissionTerms::new(params);
    let mut total = 0.0;
    for t in 0..len {
        total += emission.value(&state.gamma[t * m..(t + 1) * m], y.row(t));
    }
    let pi = params.initial_probs()?;
    for k in 0..m {
        let g0 = state.gamma[k];
        total += (1.0 - g0) * (1.0 - pi[k]).max(LOG_FLOOR).ln() + g0 * pi[k].max(LOG_FLOOR).ln();
        if len == 1 {
            total -= h_bin(g0);
            continue;
        }
        let a = &params.transition(k).p;
        for t in 0..len - 1 {
            let q = &state.xi[t * m + k].q;
            for i in 0..2 {
                for j in 0..2 {
                    total += q[i][j] * a[i][j].max(TRANSITION_FLOOR).ln();
                    if q[i][j] > 0.0 {
                        total -= q[i][j] * q[i][j].ln();
                    }
                }
            }
        }
        for t in 1..len - 1 {
            total += h_bin(state.gamma[t * m + k]);
        }
    }
    Ok(total)
}

fn check_state(params: &FhmmParams, y: &Observations, state: &SmfState) -> Result<()> {
    if state.m != params.num_chains() || state.len != y.len() || y.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            what: "structured mean-field state",
            expected: y.len() * params.num_chains(),
            actual: state.len * state.m,
        });
    }
    Ok(())
}

/// Current expected emission mean `b + Σ_m γ_t^m w_m` for every `t`.
fn expected_means(params: &FhmmParams, gamma: &[f64], len: usize) -> Vec<f64> {
    let (m, d) = (params.num_chains(), params.dim());
    let mut mean = Vec::with_capacity(len * d);
    for t in 0..len {
        let mut row = params.bias().to_vec();
        for k in 0..m {
            let g = gamma[t * m + k];
            for (acc, w) in row.iter_mut().zip(params.w_row(k)) {
                *acc += g * w;
            }
        }
        mean.extend(row);
    }
    mean
}

/// Log potential ratio for chain `k` at one position, given the expected mean
/// of all chains and chain `k`'s own current marginal.
#[inline]
fn log_ratio(
    emission: &EmissionTerms,
    params: &FhmmParams,
    k: usize,
    y: &[f64],
    mean: &[f64],
    g: f64,
) -> f64 {
    let z = emission.z_row(k);
    let w = params.w_row(k);
    let mut acc = 0.0;
    for j in 0..y.len() {
        acc += z[j] * (y[j] - mean[j] + g * w[j]);
    }
    acc - 0.5 * emission.c()[k]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EStepConfig {
    pub max_sweeps: usize,
    /// Relative ELBO change below which the sweep loop stops.
    pub tol: f64,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 50,
            tol: 1e-6,
        }
    }
}

/// Round-robin exact chain updates until the ELBO settles.
pub fn smf_e_step(
    params: &FhmmParams,
    y: &Observations,
    state: SmfState,
    config: EStepConfig,
) -> Result<SmfState> {
    check_state(params, y, &state)?;
    let mut state = state;
    let (m, d, len) = (params.num_chains(), params.dim(), y.len());
    let emission = EmissionTerms::new(params);
    let pi = params.initial_probs()?;
    let mut mean = expected_means(params, &state.gamma, len);
    let mut elbo = smf_elbo(params, y, &state)?;
    let mut log_h = vec![[0.0; 2]; len];
    state.converged = false;
    state.sweeps = 0;
    for _ in 0..config.max_sweeps {
        for k in 0..m {
            for t in 0..len {
                let g = state.gamma[t * m + k];
                let delta = log_ratio(&emission, params, k, y.row(t), &mean[t * d..(t + 1) * d], g);
                state.log_pot[t * m + k] = delta;
                log_h[t] = [0.0, delta];
            }
            let post = forward_backward_log(&log_h, params.transition(k), pi[k], None)?;
            let w = params.w_row(k);
            for t in 0..len {
                let old = state.gamma[t * m + k];
                let new = post.gamma[t];
                state.gamma[t * m + k] = new;
                for (mu, wj) in mean[t * d..(t + 1) * d].iter_mut().zip(w) {
                    *mu += (new - old) * wj;
                }
            }
            for (t, q) in post.xi.into_iter().enumerate() {
                state.xi[t * m + k] = q;
            }
        }
        state.sweeps += 1;
        let next = smf_elbo(params, y, &state)?;
        let slack = 1e-9 * elbo.abs().max(1.0);
        if next < elbo - slack {
            return Err(Error::Internal(format!(
                "structured mean-field ELBO decreased from {elbo} to {next} in sweep {}",
                state.sweeps
            )));
        }
        let change = (next - elbo).abs();
        elbo = next;
        if change < config.tol * elbo.abs().max(1.0) {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

/// Expected sufficient statistics → new `W`, `Σ` and transition matrices.
pub fn smf_m_step(params: &FhmmParams, y: &Observations, state: &SmfState) -> Result<FhmmParams> {
    check_state(params, y, state)?;
    let (m, d, len) = (params.num_chains(), params.dim(), y.len());
    let k1 = m + 1;
    let mut g = vec![0.0; k1 * k1];
    let mut c = vec![0.0; k1 * d];
    let mut yy = vec![0.0; d * d];
    let mut hat = vec![1.0; k1];
    for t in 0..len {
        hat[..m].copy_from_slice(&state.gamma[t * m..(t + 1) * m]);
        let yt = y.row(t);
        for i in 0..k1 {
            for j in 0..k1 {
                g[i * k1 + j] += hat[i] * hat[j];
            }
            g[i * k1 + i] += if i < m { hat[i] * (1.0 - hat[i]) } else { 0.0 };
            for j in 0..d {
                c[i * d + j] += hat[i] * yt[j];
            }
        }
        for i in 0..d {
            for j in 0..d {
                yy[i * d + j] += yt[i] * yt[j];
            }
        }
    }
    let gchol = factor_with_jitter(k1, &g)?;
    let mut w = vec![0.0; k1 * d];
    for j in 0..d {
        let col: Vec<f64> = (0..k1).map(|i| c[i * d + j]).collect();
        for (i, v) in gchol.solve_cov(&col).into_iter().enumerate() {
            w[i * d + j] = v;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let cw: f64 = (0..k1).map(|r| c[r * d + i] * w[r * d + j]).sum();
            cov[i * d + j] = (yy[i * d + j] - cw) / len as f64;
        }
    }
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    let chol = factor_with_jitter(d, &cov)?;

    let mut trans = Vec::with_capacity(m);
    for k in 0..m {
        let mut counts = [[0.0; 2]; 2];
        for t in 0..len.saturating_sub(1) {
            let q = &state.xi[t * m + k].q;
            for i in 0..2 {
                for j in 0..2 {
                    counts[i][j] += q[i][j];
                }
            }
        }
        trans.push(update_transition(
            params.transition(k),
            &counts,
            state.gamma[k],
        )?);
    }
    FhmmParams::new(m, d, w, chol, trans)
}

fn factor_with_jitter(dim: usize, mat: &[f64]) -> Result<CholFactor> {
    if let Ok(l) = CholFactor::from_covariance(dim, mat) {
        return Ok(l);
    }
    let scale = (0..dim)
        .map(|i| mat[i * dim + i].abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let mut jitter = 1e-12 * scale;
    for _ in 0..20 {
        let mut a = mat.to_vec();
        for i in 0..dim {
            a[i * dim + i] += jitter;
        }
        if let Ok(l) = CholFactor::from_covariance(dim, &a) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(Error::Internal(
        "matrix could not be regularised to positive definite".into(),
    ))
}

/// Maximises `Σ N log A + E[log π(A)]`, where `π(A)` is the stationary law.
///
/// The normalised counts maximise the first term alone; a backtracking step
/// from the previous matrix keeps the full objective from decreasing.
fn update_transition(
    old: &TransitionMatrix,
    counts: &[[f64; 2]; 2],
    g0: f64,
) -> Result<TransitionMatrix> {
    let objective = |a: &[[f64; 2]; 2]| -> f64 {
        let mut f = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                f += counts[i][j] * a[i][j].max(TRANSITION_FLOOR).ln();
            }
        }
        let (p01, p10) = (a[0][1], a[1][0]);
        let pi1 = p01 / (p01 + p10);
        f + (1.0 - g0) * (1.0 - pi1).max(LOG_FLOOR).ln() + g0 * pi1.max(LOG_FLOOR).ln()
    };
    let mut target = old.p;
    for i in 0..2 {
        let total = counts[i][0] + counts[i][1];
        if total > 0.0 {
            let p1 = (counts[i][1] / total).clamp(TRANSITION_FLOOR, 1.0 - TRANSITION_FLOOR);
            target[i] = [1.0 - p1, p1];
        }
    }
    let base = objective(&old.p);
    let mut step = 1.0;
    for _ in 0..40 {
        let p01 = old.p[0][1] + step * (target[0][1] - old.p[0][1]);
        let p10 = old.p[1][0] + step * (target[1][0] - old.p[1][0]);
        let cand = [[1.0 - p01, p01], [p10, 1.0 - p10]];
        if objective(&cand) >= base {
            return TransitionMatrix::new(cand);
        }
        step *= 0.5;
    }
    Ok(*old)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmfConfig {
    pub outer_iterations: usize,
    pub e_step: EStepConfig,
    /// Stop once the relative outer ELBO change falls below this.
    pub outer_tol: Option<f64>,
    /// Wall-clock limit; an iteration that would finish past it is discarded.
    pub budget: Option<Duration>,
}

impl Default for SmfConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 100,
            e_step: EStepConfig::default(),
            outer_tol: Some(1e-8),
            budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmfTraceRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SmfFit {
    pub params: FhmmParams,
    pub state: SmfState,
    pub trace: Vec<SmfTraceRecord>,
    pub iterations: usize,
    pub hit_budget: bool,
}

/// Alternates E- and M-steps, recording the ELBO after each M-step.
pub fn smf_em_fit(init: &FhmmParams, y: &Observations, config: &SmfConfig) -> Result<SmfFit> {
    if init.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            what: "data dimension",
            expected: init.dim(),
            actual: y.dim(),
        });
    }
    let start = Instant::now();
    let over = |start: &Instant| config.budget.is_some_and(|b| start.elapsed() >= b);
    let mut params = init.clone();
    let mut state = SmfState::prior(&params, y.len())?;
    let mut trace: Vec<SmfTraceRecord> = Vec::new();
    let mut hit_budget = false;
    for iteration in 1..=config.outer_iterations {
        if over(&start) {
            hit_budget = true;
            break;
        }
        let next_state = smf_e_step(&params, y, state.clone(), config.e_step)?;
        let next_params = smf_m_step(&params, y, &next_state)?;
        let elbo = smf_elbo(&next_params, y, &next_state)?;
        if over(&start) {
            hit_budget = true;
            break;
        }
        if let Some(prev) = trace.last() {
            if elbo < prev.elbo - 1e-6 * prev.elbo.abs().max(1.0) {
                return Err(Error::Internal(format!(
                    "structured mean-field EM decreased the ELBO from {} to {elbo} at iteration {iteration}",
                    prev.elbo
                )));
            }
        }
        let settled = trace
            .last()
            .zip(config.outer_tol)
            .is_some_and(|(prev, tol)| (elbo - prev.elbo).abs() < tol * elbo.abs().max(1.0));
        params = next_params;
        state = next_state;
        trace.push(SmfTraceRecord {
            iteration,
            elbo,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
        if settled {
            break;
        }
    }
    Ok(SmfFit {
        iterations: trace.len(),
        params,
        state,
        trace,
        hit_budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Structured posterior for the positions the recognition windows cannot
/// reach: `0..h` on the left, `T-h..T` on the right.
///
/// The marginals at the nearest interior position (`h`, resp. `T-1-h`) come
/// from `source` and are held fixed as boundary conditions while the boundary
/// chains are updated round-robin.
pub fn boundary_posterior<S: VariationalSource + ?Sized>(
    params: &FhmmParams,
    y: &Observations,
    source: &S,
    side: Side,
) -> Result<PosteriorMarginals> {
    let h = source.half_window();
    let (m, d, len) = (params.num_chains(), params.dim(), y.len());
    if h == 0 {
        let offset = if side == Side::Left { 0 } else { len };
        return PosteriorMarginals::from_theta(offset, 0, m, Vec::new());
    }
    if len < 2 * h + 1 {
        return Err(Error::Boundary { t: 0, len, half: h });
    }
    // Boundary rows plus the anchor; the anchor is first on the right side.
    let (offset, anchor_t) = match side {
        Side::Left => (0, h),
        Side::Right => (len - 1 - h, len - 1 - h),
    };
    let n = h + 1;
    let anchor = source.at(y, anchor_t)?.theta;
    let anchor_pos = anchor_t - offset;
    let pi = params.initial_probs()?;
    let emission = EmissionTerms::new(params);
    let mut gamma = Vec::with_capacity(n * m);
    for _ in 0..n {
        gamma.extend_from_slice(&anchor);
    }
    let sub = y.slice(offset, offset + n)?;
    let mut mean = expected_means(params, &gamma, n);
    let mut log_h = vec![[0.0; 2]; n];
    for _ in 0..200 {
        let mut biggest = 0.0f64;
        for k in 0..m {
            for t in 0..n {
                let delta = if t == anchor_pos {
                    0.0
                } else {
                    log_ratio(
                        &emission,
                        params,
                        k,
                        sub.row(t),
                        &mean[t * d..(t + 1) * d],
                        gamma[t * m + k],
                    )
                };
                log_h[t] = [0.0, delta];
            }
            let (pi1, pin) = match side {
                Side::Left => (pi[k], Anchor::Last(anchor[k])),
                Side::Right => (0.5, Anchor::First(anchor[k])),
            };
            let post = forward_backward_log(&log_h, params.transition(k), pi1, Some(pin))?;
            let w = params.w_row(k);
            for t in 0..n {
                let old = gamma[t * m + k];
                let new = if t == anchor_pos {
                    anchor[k]
                } else {
                    post.gamma[t]
                };
                biggest = biggest.max((new - old).abs());
                gamma[t * m + k] = new;
                for (mu, wj) in mean[t * d..(t + 1) * d].iter_mut().zip(w) {
                    *mu += (new - old) * wj;
                }
            }
        }
        if biggest < 1e-12 {
            break;
        }
    }
    let theta = match side {
        Side::Left => gamma[..h * m].to_vec(),
        Side::Right => gamma[m..].to_vec(),
    };
    let start = if side == Side::Left { 0 } else { len - h };
    PosteriorMarginals::from_theta(start, h, m, theta)
}

/// Complete per-time marginals: boundaries from [`boundary_posterior`],
/// the interior straight from `source`.
pub fn full_marginals<S: VariationalSource + ?Sized>(
    params: &FhmmParams,
    y: &Observations,
    source: &S,
) -> Result<PosteriorMarginals> {
    let h = source.half_window();
    let (m, len) = (params.num_chains(), y.len());
    let left = boundary_posterior(params, y, source, Side::Left)?;
    let right = boundary_posterior(params, y, source, Side::Right)?;
    let mut theta = left.theta;
    for t in h..len - h {
        theta.extend(source.at(y, t)?.theta);
    }
    theta.extend(right.theta);
    PosteriorMarginals::from_theta(0, len, m, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::fit_rho;
    use crate::elbo::{local_elbo, valid_centers, LookupTable};
    use crate::model::tests::two_chain_params;
    use crate::model::{exact_loglik, exact_marginals, simulate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transition(rng: &mut impl Rng) -> TransitionMatrix {
        TransitionMatrix::from_switch(rng.random_range(0.05..0.95), rng.random_range(0.05..0.95))
            .unwrap()
    }

    fn random_params(rng: &mut impl Rng, m: usize, d: usize) -> FhmmParams {
        let w: Vec<f64> = (0..(m + 1) * d)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                l[i * d + j] = rng.random_range(-0.3..0.3);
            }
            l[i * d + i] = rng.random_range(0.4..1.2);
        }
        let trans = (0..m).map(|_| random_transition(rng)).collect();
        FhmmParams::new(m, d, w, CholFactor::new(d, l).unwrap(), trans).unwrap()
    }

    fn enumerate_chain(
        h: &[[f64; 2]],
        a: &TransitionMatrix,
        pi1: f64,
    ) -> (Vec<f64>, Vec<[[f64; 2]; 2]>, f64) {
        let n = h.len();
        let mut gamma = vec![0.0; n];
        let mut xi = vec![[[0.0; 2]; 2]; n.saturating_sub(1)];
        let mut z = 0.0;
        for path in 0..1usize << n {
            let s = |t: usize| path >> t & 1;
            let mut w = if s(0) == 1 { pi1 } else { 1.0 - pi1 } * h[0][s(0)];
            for t in 1..n {
                w *= a.p[s(t - 1)][s(t)] * h[t][s(t)];
            }
            z += w;
            for t in 0..n {
                gamma[t] += w * s(t) as f64;
            }
            for t in 0..n.saturating_sub(1) {
                xi[t][s(t)][s(t + 1)] += w;
            }
        }
        gamma.iter_mut().for_each(|g| *g /= z);
        xi.iter_mut().flatten().flatten().for_each(|v| *v /= z);
        (gamma, xi, z.ln())
    }

    #[test]
    fn forward_backward_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=6 {
            for _ in 0..20 {
                let a = random_transition(&mut rng);
                let pi1 = rng.random_range(0.05..0.95);
                let h: Vec<[f64; 2]> = (0..n)
                    .map(|_| [rng.random_range(0.01..3.0), rng.random_range(0.01..3.0)])
                    .collect();
                let post = forward_backward(&h, &a, pi1).unwrap();
                let (g, x, lz) = enumerate_chain(&h, &a, pi1);
                assert!((post.log_z - lz).abs() < 1e-10);
                for t in 0..n {
                    assert!((post.gamma[t] - g[t]).abs() < 1e-10);
                }
                for t in 0..n - 1 {
                    for i in 0..2 {
                        for j in 0..2 {
                            assert!((post.xi[t].q[i][j] - x[t][i][j]).abs() < 1e-10);
                        }
                    }
                    assert!((post.xi[t].cur_marginal() - post.gamma[t + 1]).abs() < 1e-10);
                    assert!((post.xi[t].prev_marginal() - post.gamma[t]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn forward_backward_trivial_cases() {
        let a = TransitionMatrix::from_switch(0.2, 0.3).unwrap();
        let post = forward_backward(&[[1.0, 3.0]], &a, 0.4).unwrap();
        assert!((post.gamma[0] - 1.2 / (0.6 + 1.2)).abs() < 1e-15);
        let post = forward_backward(&[[2.0, 2.0]; 5], &a, 0.1).unwrap();
        let mut p = 0.1;
        for t in 0..5 {
            assert!((post.gamma[t] - p).abs() < 1e-12);
            p = (1.0 - p) * 0.2 + p * 0.7;
        }
        assert!(forward_backward(&[[0.0, 0.0]], &a, 0.4).is_err());
    }

    #[test]
    fn anchors_pin_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_transition(&mut rng);
        let log_h: Vec<[f64; 2]> = (0..6).map(|_| [0.0, rng.random_range(-2.0..2.0)]).collect();
        let first = forward_backward_log(&log_h, &a, 0.3, Some(Anchor::First(0.8))).unwrap();
        assert!((first.gamma[0] - 0.8).abs() < 1e-12);
        let last = forward_backward_log(&log_h, &a, 0.3, Some(Anchor::Last(0.15))).unwrap();
        assert!((last.gamma[5] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn single_chain_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_params(&mut rng, 1, 2);
            let (_, y) = simulate(&p, 40, rng.random()).unwrap();
            let state = smf_e_step(
                &p,
                &y,
                SmfState::prior(&p, 40).unwrap(),
                EStepConfig::default(),
            )
            .unwrap();
            let exact = exact_loglik(&p, &y).unwrap();
            assert!((smf_elbo(&p, &y, &state).unwrap() - exact).abs() < 1e-8);
            let marg = exact_marginals(&p, &y).unwrap();
            for t in 0..40 {
                assert!((state.gamma[t] - marg[t]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bound_holds_and_fixed_point_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let m = rng.random_range(2..=3);
            let p = random_params(&mut rng, m, 2);
            let len = rng.random_range(2..=10);
            let (_, y) = simulate(&p, len, rng.random()).unwrap();
            let cfg = EStepConfig {
                max_sweeps: 200,
                tol: 1e-12,
            };
            let state = smf_e_step(&p, &y, SmfState::prior(&p, len).unwrap(), cfg).unwrap();
            let elbo = smf_elbo(&p, &y, &state).unwrap();
            assert!(elbo <= exact_loglik(&p, &y).unwrap() + 1e-10);
            let again = smf_e_step(&p, &y, state, cfg).unwrap();
            assert!((smf_elbo(&p, &y, &again).unwrap() - elbo).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_tables_consistent_with_marginals() {
        let p = two_chain_params();
        let (_, y) = simulate(&p, 50, 3).unwrap();
        let s = smf_e_step(
            &p,
            &y,
            SmfState::prior(&p, 50).unwrap(),
            EStepConfig::default(),
        )
        .unwrap();
        for t in 0..49 {
            for k in 0..2 {
                let q = &s.xi[t * 2 + k];
                assert!((q.prev_marginal() - s.gamma[t * 2 + k]).abs() < 1e-10);
                assert!((q.cur_marginal() - s.gamma[(t + 1) * 2 + k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn m_step_recovers_emission_from_one_hot_posteriors() {
        let p = two_chain_params();
        let (states, y) = simulate(&p, 400, 8).unwrap();
        let mut st = SmfState::prior(&p, 400).unwrap();
        for t in 0..400 {
            for k in 0..2 {
                st.gamma[t * 2 + k] = states.get(t, k) as f64;
            }
        }
        for t in 0..399 {
            for k in 0..2 {
                let mut q = [[0.0; 2]; 2];
                q[states.get(t, k) as usize][states.get(t + 1, k) as usize] = 1.0;
                st.xi[t * 2 + k] = PairPmf { q };
            }
        }
        // Noise-free data generated from the true means.
        let mut data = Vec::new();
        for t in 0..400 {
            data.extend(p.mean_for_mask(states.mask(t)));
        }
        let clean = Observations::new(400, 2, data).unwrap();
        let next = smf_m_step(&p, &clean, &st).unwrap();
        for (a, b) in next.w().iter().zip(p.w()) {
            assert!((a - b).abs() < 1e-8);
        }
        // Noisy data: the ELBO cannot go down.
        let before = smf_elbo(&p, &y, &st).unwrap();
        let after = smf_elbo(&smf_m_step(&p, &y, &st).unwrap(), &y, &st).unwrap();
        assert!(after >= before - 1e-9);
    }

    #[test]
    fn em_is_monotone_and_respects_budget() {
        let p = two_chain_params();
        let (_, y) = simulate(&p, 300, 4).unwrap();
        let init = crate::model::init_params(&y, 2, 1).unwrap();
        let fit = smf_em_fit(
            &init,
            &y,
            &SmfConfig {
                outer_iterations: 30,
                ..SmfConfig::default()
            },
        )
        .unwrap();
        assert!(!fit.trace.is_empty());
        for pair in fit.trace.windows(2) {
            assert!(pair[1].elbo >= pair[0].elbo - 1e-6 * pair[0].elbo.abs());
        }
        let zero = SmfConfig {
            budget: Some(Duration::ZERO),
            ..SmfConfig::default()
        };
        let fit = smf_em_fit(&init, &y, &zero).unwrap();
        assert!(fit.trace.is_empty() && fit.hit_budget);
        assert_eq!(fit.params, init);
    }

    #[test]
    fn boundary_single_chain_matches_exact_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 1, 2);
        let (_, y) = simulate(&p, 14, 17).unwrap();
        let exact = exact_marginals(&p, &y).unwrap();
        let table = LookupTable {
            half: 3,
            m: 1,
            theta: exact.clone(),
            rho: vec![0.0; 14],
        };
        let left = boundary_posterior(&p, &y, &table, Side::Left).unwrap();
        let right = boundary_posterior(&p, &y, &table, Side::Right).unwrap();
        assert_eq!((left.offset, left.len), (0, 3));
        assert_eq!((right.offset, right.len), (11, 3));
        for t in 0..3 {
            assert!((left.theta[t] - exact[t]).abs() < 1e-6);
            assert!((right.theta[t] - exact[11 + t]).abs() < 1e-6);
        }
        let none = LookupTable { half: 0, ..table };
        assert_eq!(
            boundary_posterior(&p, &y, &none, Side::Left).unwrap().len,
            0
        );
    }

    #[test]
    fn interior_objective_matches_structured_elbo() {
        // Converted to copula form, SMF marginals and pair tables make the sum
        // of local terms equal the SMF ELBO apart from the edge terms.
        let p = two_chain_params();
        let len = 60;
        let (_, y) = simulate(&p, len, 12).unwrap();
        let st = smf_e_step(
            &p,
            &y,
            SmfState::prior(&p, len).unwrap(),
            EStepConfig::default(),
        )
        .unwrap();
        let m = 2;
        let mut rho = vec![0.0; len * m];
        for t in 1..len {
            for k in 0..m {
                let q = &st.xi[(t - 1) * m + k];
                rho[t * m + k] =
                    fit_rho(st.gamma[(t - 1) * m + k], st.gamma[t * m + k], q.q[0][0]).unwrap();
            }
        }
        let table = LookupTable {
            half: 2,
            m,
            theta: st.gamma.clone(),
            rho,
        };
        let centers = valid_centers(len, 4).unwrap();
        let interior: f64 = centers
            .clone()
            .map(|t| local_elbo(&p, &table, &y, t).unwrap())
            .sum();
        // Every structured-ELBO term not attached to a center.
        let emission = EmissionTerms::new(&p);
        let pi = p.initial_probs().unwrap();
        let xlogx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
        let mut edge = 0.0;
        for t in (0..len).filter(|t| !centers.contains(t)) {
            edge += emission.value(&st.gamma[t * m..(t + 1) * m], y.row(t));
            for k in 0..m {
                let a = &p.transition(k).p;
                if t >= 1 {
                    let prev = &st.xi[(t - 1) * m + k].q;
                    edge += (0..4)
                        .map(|c| prev[c / 2][c % 2] * a[c / 2][c % 2].ln())
                        .sum::<f64>();
                }
                if t + 1 < len {
                    let next = &st.xi[t * m + k].q;
                    edge -= (0..4).map(|c| xlogx(next[c / 2][c % 2])).sum::<f64>();
                }
                if t >= 1 && t + 1 < len {
                    edge += h_bin(st.gamma[t * m + k]);
                }
            }
        }
        for k in 0..m {
            let g0 = st.gamma[k];
            edge += (1.0 - g0) * (1.0 - pi[k]).ln() + g0 * pi[k].ln();
        }
        let full = smf_elbo(&p, &y, &st).unwrap();
        assert!(
            (interior + edge - full).abs() < 1e-6,
            "{interior} + {edge} vs {full}"
        );
    }
}
