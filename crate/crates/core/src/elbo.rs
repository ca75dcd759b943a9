//! Expectation terms of the truncated ELBO and the per-center local objective.
//!
//! Time is 0-based. With `h = Δt/2`, the local term at center `t` uses
//! `θ_{t-1}`, `θ_t`, `θ_{t+1}` and the couplings `ρ_t` (pair `t-1,t`) and
//! `ρ_{t+1}` (pair `t,t+1`). Each of those comes from a window of `2h+1`
//! rows, so a center is valid when `h + 1 <= t <= T - 2 - h`.

use std::ops::Range;

use crate::copula::{pair_pmf, pair_pmf_with_grad, CopulaPairParams, PairPmf};
use crate::error::{Error, Result};
use crate::model::{FhmmParams, Observations, TransitionMatrix};
use crate::numerics::{ln_sqrt_2pi, RHO_EPS, THETA_EPS};
use crate::recognition::{window, RecogOutput, RecognitionNet};

/// Transition entries are floored here before taking logs.
pub const TRANSITION_FLOOR: f64 = 1e-12;

const LOG_FLOOR: f64 = 1e-300;

/// Centers whose local ELBO term is fully defined for a sequence of length `len`.
pub fn valid_centers(len: usize, dt: usize) -> Result<Range<usize>> {
    let h = dt / 2;
    if len < dt + 3 {
        return Err(Error::config(format!(
            "sequence of length {len} has no valid center for window Δt = {dt} (need at least {})",
            dt + 3
        )));
    }
    Ok(h + 1..len - 1 - h)
}

/// `⟨log p(y_t | s_t)⟩` under independent Bernoulli(θ_m) chain states.
pub fn expected_emission_loglik(params: &FhmmParams, theta: &[f64], y: &[f64]) -> Result<f64> {
    check_len("theta", params.num_chains(), theta.len())?;
    check_len("observation", params.dim(), y.len())?;
    if theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::domain("theta entries must lie in [0, 1]"));
    }
    Ok(EmissionTerms::new(params).value(theta, y))
}

/// `Σ_{ij} q[i][j] log A[i][j]`.
pub fn expected_transition_loglik(a: &TransitionMatrix, pair: &PairPmf) -> f64 {
    let mut acc = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            acc += pair.q[i][j] * a.p[i][j].max(TRANSITION_FLOOR).ln();
        }
    }
    acc
}

#[inline]
fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `(θ log θ + (1-θ) log(1-θ), Σ q log q)`. The local ELBO adds the first
/// and subtracts the second.
pub fn entropy_terms(theta: f64, pair_next: &PairPmf) -> (f64, f64) {
    let marginal = xlogx(theta) + xlogx(1.0 - theta);
    let pair = pair_next.q.iter().flatten().map(|&q| xlogx(q)).sum();
    (marginal, pair)
}

/// Anything that can supply `θ_t` and `ρ_t` for a center `t`.
pub trait VariationalSource {
    /// Half window `h`; determines which centers are valid.
    fn half_window(&self) -> usize;
    fn at(&self, y: &Observations, t: usize) -> Result<RecogOutput>;
}

impl VariationalSource for RecognitionNet {
    fn half_window(&self) -> usize {
        self.spec().half_window()
    }

    fn at(&self, y: &Observations, t: usize) -> Result<RecogOutput> {
        self.forward(window(y, t, self.spec().window)?)
    }
}

/// Fixed per-time values; used to evaluate the objective at externally chosen
/// marginals (for instance SMF posteriors converted to copula form).
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    pub half: usize,
    pub m: usize,
    /// `T × M`.
    pub theta: Vec<f64>,
    /// `T × M`; row `t` couples `t-1` and `t`. Row 0 is unused.
    pub rho: Vec<f64>,
}

impl VariationalSource for LookupTable {
    fn half_window(&self) -> usize {
        self.half
    }

    fn at(&self, y: &Observations, t: usize) -> Result<RecogOutput> {
        let h = self.half;
        if t < h || t + h >= y.len() || (t + 1) * self.m > self.theta.len() {
            return Err(Error::Boundary {
                t,
                len: y.len(),
                half: h,
            });
        }
        let clamp_t = |v: &f64| v.clamp(THETA_EPS, 1.0 - THETA_EPS);
        let clamp_r = |v: &f64| v.clamp(-1.0 + RHO_EPS, 1.0 - RHO_EPS);
        let range = t * self.m..(t + 1) * self.m;
        Ok(RecogOutput {
            theta: self.theta[range.clone()].iter().map(clamp_t).collect(),
            rho: self.rho[range].iter().map(clamp_r).collect(),
        })
    }
}

/// The local ELBO term attached to center `t`.
pub fn local_elbo<S: VariationalSource + ?Sized>(
    params: &FhmmParams,
    source: &S,
    y: &Observations,
    t: usize,
) -> Result<f64> {
    let centers = valid_centers(y.len(), 2 * source.half_window())?;
    if !centers.contains(&t) {
        return Err(Error::Boundary {
            t,
            len: y.len(),
            half: source.half_window(),
        });
    }
    let prev = source.at(y, t - 1)?;
    let cur = source.at(y, t)?;
    let next = source.at(y, t + 1)?;
    let emission = EmissionTerms::new(params);
    let inputs = CenterInputs {
        theta_prev: &prev.theta,
        theta: &cur.theta,
        rho: &cur.rho,
        theta_next: &next.theta,
        rho_next: &next.rho,
        y: y.row(t),
    };
    center_value(params, &emission, &inputs)
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Quantities of the emission term that do not depend on `t`.
pub(crate) struct EmissionTerms<'a> {
    params: &'a FhmmParams,
    /// `Σ⁻¹ w_m`, `M × D`.
    z: Vec<f64>,
    /// `w_mᵀ Σ⁻¹ w_m`.
    c: Vec<f64>,
    log_norm: f64,
}

impl<'a> EmissionTerms<'a> {
    pub(crate) fn new(params: &'a FhmmParams) -> Self {
        let (m, d) = (params.num_chains(), params.dim());
        let chol = params.chol();
        let mut z = Vec::with_capacity(m * d);
        let mut c = Vec::with_capacity(m);
        for k in 0..m {
            let w = params.w_row(k);
            let zk = chol.solve_cov(w);
            c.push(w.iter().zip(&zk).map(|(a, b)| a * b).sum());
            z.extend(zk);
        }
        let log_norm = -(d as f64) * ln_sqrt_2pi() - 0.5 * chol.log_det();
        Self {
            params,
            z,
            c,
            log_norm,
        }
    }

    pub(crate) fn c(&self) -> &[f64] {
        &self.c
    }

    /// `Σ⁻¹ w_k`.
    pub(crate) fn z_row(&self, k: usize) -> &[f64] {
        let d = self.params.dim();
        &self.z[k * d..(k + 1) * d]
    }

    fn residual(&self, theta: &[f64], y: &[f64]) -> Vec<f64> {
        let p = self.params;
        let mut mean = p.bias().to_vec();
        for (k, th) in theta.iter().enumerate() {
            for (mu, w) in mean.iter_mut().zip(p.w_row(k)) {
                *mu += th * w;
            }
        }
        y.iter().zip(&mean).map(|(a, b)| a - b).collect()
    }

    pub(crate) fn value(&self, theta: &[f64], y: &[f64]) -> f64 {
        let mut r = self.residual(theta, y);
        self.params.chol().solve_lower_in_place(&mut r);
        let quad: f64 = r.iter().map(|v| v * v).sum();
        let var: f64 = theta
            .iter()
            .zip(&self.c)
            .map(|(t, c)| t * (1.0 - t) * c)
            .sum();
        self.log_norm - 0.5 * quad - 0.5 * var
    }

    /// Value, accumulating `∂/∂θ` into `d_theta` and the model gradient into `acc`.
    fn value_grad(
        &self,
        theta: &[f64],
        y: &[f64],
        d_theta: &mut [f64],
        acc: &mut GammaAccum,
    ) -> f64 {
        let (m, d) = (self.params.num_chains(), self.params.dim());
        let chol = self.params.chol();
        let mut u = self.residual(theta, y);
        chol.solve_lower_in_place(&mut u);
        let quad: f64 = u.iter().map(|v| v * v).sum();
        chol.solve_upper_t_in_place(&mut u);
        let mut var = 0.0;
        for k in 0..m {
            let th = theta[k];
            let v = th * (1.0 - th);
            var += v * self.c[k];
            let zk = &self.z[k * d..(k + 1) * d];
            let wk = self.params.w_row(k);
            d_theta[k] += wk.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
                - 0.5 * (1.0 - 2.0 * th) * self.c[k];
            let g = &mut acc.w[k * d..(k + 1) * d];
            for j in 0..d {
                g[j] += th * u[j] - v * zk[j];
            }
            for i in 0..d {
                for j in 0..d {
                    acc.outer[i * d + j] += v * zk[i] * zk[j];
                }
            }
        }
        for j in 0..d {
            acc.w[m * d + j] += u[j];
        }
        for i in 0..d {
            for j in 0..d {
                acc.outer[i * d + j] += u[i] * u[j];
            }
        }
        acc.count += 1.0;
        self.log_norm - 0.5 * quad - 0.5 * var
    }
}

/// Raw sums from which the gradient with respect to `Γ` is assembled.
///
/// For the Cholesky factor only `U = Σ uuᵀ + Σ v_m z_m z_mᵀ` and the number
/// of emission terms are needed: `∂/∂L = lower(U L) - count · diag(1/Lᵢᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GammaAccum {
    pub w: Vec<f64>,
    pub outer: Vec<f64>,
    pub count: f64,
    /// Per chain, gradient with respect to the row-softmax logits of `A_m`.
    pub logits: Vec<[[f64; 2]; 2]>,
}

impl GammaAccum {
    pub(crate) fn zeros(m: usize, d: usize) -> Self {
        Self {
            w: vec![0.0; (m + 1) * d],
            outer: vec![0.0; d * d],
            count: 0.0,
            logits: vec![[[0.0; 2]; 2]; m],
        }
    }

    pub(crate) fn add(&mut self, other: &Self) {
        add_into(&mut self.w, &other.w);
        add_into(&mut self.outer, &other.outer);
        self.count += other.count;
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            for i in 0..2 {
                for j in 0..2 {
                    a[i][j] += b[i][j];
                }
            }
        }
    }
}

pub(crate) fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// The variational quantities entering one center's term.
pub(crate) struct CenterInputs<'a> {
    pub theta_prev: &'a [f64],
    pub theta: &'a [f64],
    pub rho: &'a [f64],
    pub theta_next: &'a [f64],
    pub rho_next: &'a [f64],
    pub y: &'a [f64],
}

/// Gradient of one center's term with respect to its variational inputs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CenterGrad {
    pub theta_prev: Vec<f64>,
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
    pub theta_next: Vec<f64>,
    pub rho_next: Vec<f64>,
}

pub(crate) fn center_value(
    params: &FhmmParams,
    emission: &EmissionTerms,
    x: &CenterInputs,
) -> Result<f64> {
    let mut value = emission.value(x.theta, x.y);
    for k in 0..params.num_chains() {
        let prev = pair_pmf(&CopulaPairParams::new(
            x.theta_prev[k],
            x.theta[k],
            x.rho[k],
        ))?;
        let next = pair_pmf(&CopulaPairParams::new(
            x.theta[k],
            x.theta_next[k],
            x.rho_next[k],
        ))?;
        let (marginal, pair) = entropy_terms(x.theta[k], &next);
        value += expected_transition_loglik(params.transition(k), &prev) + marginal - pair;
    }
    Ok(value)
}

pub(crate) fn center_value_grad(
    params: &FhmmParams,
    emission: &EmissionTerms,
    x: &CenterInputs,
    acc: &mut GammaAccum,
) -> Result<(f64, CenterGrad)> {
    let m = params.num_chains();
    let mut g = CenterGrad {
        theta_prev: vec![0.0; m],
        theta: vec![0.0; m],
        rho: vec![0.0; m],
        theta_next: vec![0.0; m],
        rho_next: vec![0.0; m],
    };
    let mut value = emission.value_grad(x.theta, x.y, &mut g.theta, acc);
    for k in 0..m {
        let a = &params.transition(k).p;
        let pp = CopulaPairParams::new(x.theta_prev[k], x.theta[k], x.rho[k]);
        let (prev, prev_grad) = pair_pmf_with_grad(&pp)?;
        let np = CopulaPairParams::new(x.theta[k], x.theta_next[k], x.rho_next[k]);
        let (next, next_grad) = pair_pmf_with_grad(&np)?;

        let mut d_prev = [[0.0; 2]; 2];
        for i in 0..2 {
            let row_mass = prev.q[i][0] + prev.q[i][1];
            for j in 0..2 {
                let log_a = a[i][j].max(TRANSITION_FLOOR).ln();
                value += prev.q[i][j] * log_a;
                d_prev[i][j] = log_a;
                acc.logits[k][i][j] += prev.q[i][j] - row_mass * a[i][j];
            }
        }
        let th = x.theta[k];
        let (marginal, pair) = entropy_terms(th, &next);
        value += marginal - pair;
        g.theta[k] += th.ln() - (1.0 - th).ln();
        let mut d_next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                d_next[i][j] = -(next.q[i][j].max(LOG_FLOOR).ln() + 1.0);
            }
        }
        let contract = |d: &[[f64; 2]; 2], j: &[[f64; 2]; 2]| -> f64 {
            (0..2).map(|r| d[r][0] * j[r][0] + d[r][1] * j[r][1]).sum()
        };
        g.theta_prev[k] += contract(&d_prev, &prev_grad.d_theta_prev);
        g.theta[k] += contract(&d_prev, &prev_grad.d_theta_cur);
        g.rho[k] += contract(&d_prev, &prev_grad.d_rho);
        g.theta[k] += contract(&d_next, &next_grad.d_theta_prev);
        g.theta_next[k] += contract(&d_next, &next_grad.d_theta_cur);
        g.rho_next[k] += contract(&d_next, &next_grad.d_rho);
    }
    Ok((value, g))
}
