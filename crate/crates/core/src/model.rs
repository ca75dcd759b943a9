//! The factorial HMM generative model: `M` binary chains, a shared Gaussian
//! emission whose mean is `Wᵀ ŝ_t` with `ŝ_t = (s¹_t, …, sᴹ_t, 1)`.
//!
//! The initial state of every chain is drawn from the stationary
//! distribution of its transition matrix, both when simulating and when
//! scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::copula::PairPmf;
use crate::error::{Error, Result};
use crate::numerics::{ln_sqrt_2pi, CholFactor};

/// Largest number of chains for which the 2^M joint-state forward pass is allowed.
pub const EXACT_MAX_CHAINS: usize = 12;

/// A `T × D` row-major block of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Observations {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("observations need at least one dimension"));
        }
        if data.len() != len * dim {
            return Err(Error::DimensionMismatch {
                what: "observation buffer",
                expected: len * dim,
                actual: data.len(),
            });
        }
        Ok(Self { len, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "observation row",
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Contiguous rows `start..end`.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.dim..end * self.dim]
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len {
            return Err(Error::domain(format!(
                "row range {start}..{end} outside 0..{}",
                self.len
            )));
        }
        Self::new(end - start, self.dim, self.rows(start, end).to_vec())
    }
}

/// 2×2 row-stochastic matrix, `p[i][j] = p(s_t = j | s_{t-1} = i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix {
    pub p: [[f64; 2]; 2],
}

impl TransitionMatrix {
    pub fn new(p: [[f64; 2]; 2]) -> Result<Self> {
        for row in &p {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::domain(format!(
                    "transition entries out of [0,1]: {p:?}"
                )));
            }
            if (row[0] + row[1] - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!(
                    "transition row does not sum to 1: {p:?}"
                )));
            }
        }
        Ok(Self { p })
    }

    /// Builds the matrix from its two switching probabilities `p(0→1)` and `p(1→0)`.
    pub fn from_switch(p01: f64, p10: f64) -> Result<Self> {
        Self::new([[1.0 - p01, p01], [p10, 1.0 - p10]])
    }

    /// Same chain with states 0 and 1 swapped.
    pub fn relabeled(&self) -> Self {
        Self {
            p: [[self.p[1][1], self.p[1][0]], [self.p[0][1], self.p[0][0]]],
        }
    }
}

/// Stationary probability of state 1.
pub fn stationary_dist(a: &TransitionMatrix) -> Result<f64> {
    let p01 = a.p[0][1];
    let p10 = a.p[1][0];
    if p01 < 1e-12 && p10 < 1e-12 {
        return Err(Error::NonErgodic { chain: 0 });
    }
    Ok(p01 / (p01 + p10))
}

/// Generative parameters `Γ = (W, L, A₁..A_M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FhmmParams {
    m: usize,
    d: usize,
    /// `(M+1) × D`, row `M` is the bias.
    w: Vec<f64>,
    chol: CholFactor,
    trans: Vec<TransitionMatrix>,
}

impl FhmmParams {
    pub fn new(
        m: usize,
        d: usize,
        w: Vec<f64>,
        chol: CholFactor,
        trans: Vec<TransitionMatrix>,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::domain("an FHMM needs at least one chain"));
        }
        if w.len() != (m + 1) * d {
            return Err(Error::DimensionMismatch {
                what: "W entries",
                expected: (m + 1) * d,
                actual: w.len(),
            });
        }
        if chol.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "Cholesky dimension",
                expected: d,
                actual: chol.dim(),
            });
        }
        if trans.len() != m {
            return Err(Error::DimensionMismatch {
                what: "transition matrices",
                expected: m,
                actual: trans.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("W has non-finite entries"));
        }
        Ok(Self {
            m,
            d,
            w,
            chol,
            trans,
        })
    }

    pub fn num_chains(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// Row `k` of `W`; `k == M` is the bias.
    #[inline]
    pub fn w_row(&self, k: usize) -> &[f64] {
        &self.w[k * self.d..(k + 1) * self.d]
    }

    pub fn bias(&self) -> &[f64] {
        self.w_row(self.m)
    }

    pub fn chol(&self) -> &CholFactor {
        &self.chol
    }

    pub fn transitions(&self) -> &[TransitionMatrix] {
        &self.trans
    }

    pub fn transition(&self, chain: usize) -> &TransitionMatrix {
        &self.trans[chain]
    }

    /// Stationary `p(s = 1)` for every chain.
    pub fn initial_probs(&self) -> Result<Vec<f64>> {
        self.trans
            .iter()
            .enumerate()
            .map(|(chain, a)| {
                stationary_dist(a).map_err(|e| match e {
                    Error::NonErgodic { .. } => Error::NonErgodic { chain },
                    other => other,
                })
            })
            .collect()
    }

    /// Emission mean for the joint state whose bit `m` is `s^m`.
    pub fn mean_for_mask(&self, mask: usize) -> Vec<f64> {
        let mut mu = self.bias().to_vec();
        for k in 0..self.m {
            if mask >> k & 1 == 1 {
                for (acc, w) in mu.iter_mut().zip(self.w_row(k)) {
                    *acc += w;
                }
            }
        }
        mu
    }

    /// Chains reordered so that new chain `k` is old chain `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.m {
            return Err(Error::DimensionMismatch {
                what: "permutation",
                expected: self.m,
                actual: perm.len(),
            });
        }
        let mut w = Vec::with_capacity(self.w.len());
        for &k in perm {
            w.extend_from_slice(self.w_row(k));
        }
        w.extend_from_slice(self.bias());
        let trans = perm.iter().map(|&k| self.trans[k]).collect();
        Self::new(self.m, self.d, w, self.chol.clone(), trans)
    }

    /// Swaps the meaning of states 0 and 1 in `chain`. The likelihood is unchanged.
    pub fn relabeled(&self, chain: usize) -> Self {
        let mut out = self.clone();
        let d = self.d;
        for j in 0..d {
            let wm = self.w[chain * d + j];
            out.w[self.m * d + j] += wm;
            out.w[chain * d + j] = -wm;
        }
        out.trans[chain] = self.trans[chain].relabeled();
        out
    }
}

/// Binary hidden paths, `T × M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSequence {
    len: usize,
    m: usize,
    s: Vec<u8>,
}

impl StateSequence {
    pub fn new(len: usize, m: usize, s: Vec<u8>) -> Result<Self> {
        if s.len() != len * m {
            return Err(Error::DimensionMismatch {
                what: "state buffer",
                expected: len * m,
                actual: s.len(),
            });
        }
        if s.iter().any(|&v| v > 1) {
            return Err(Error::domain("states must be binary"));
        }
        Ok(Self { len, m, s })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_chains(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, t: usize, chain: usize) -> u8 {
        self.s[t * self.m + chain]
    }

    pub fn mask(&self, t: usize) -> usize {
        (0..self.m).fold(0, |acc, k| acc | (self.get(t, k) as usize) << k)
    }
}

/// Draws a state path and observations.
///
/// The generator is ChaCha20 seeded from `seed`. Stream 0 feeds the emission
/// noise (D standard normals per step, in time order); stream `m + 1` feeds
/// chain `m` with one uniform per time step. The output therefore does not
/// depend on evaluation order or thread count.
pub fn simulate(
    params: &FhmmParams,
    len: usize,
    seed: u64,
) -> Result<(StateSequence, Observations)> {
    if len == 0 {
        return Err(Error::domain("simulation length must be at least 1"));
    }
    let (m, d) = (params.num_chains(), params.dim());
    let pi = params.initial_probs()?;
    let mut states = vec![0u8; len * m];
    for chain in 0..m {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(chain as u64 + 1);
        let a = params.transition(chain);
        let mut prev = 0usize;
        for t in 0..len {
            let u: f64 = rng.random();
            let p1 = if t == 0 { pi[chain] } else { a.p[prev][1] };
            let s = usize::from(u < p1);
            states[t * m + chain] = s as u8;
            prev = s;
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let chol = params.chol();
    let mut data = vec![0.0; len * d];
    let mut noise = vec![0.0; d];
    for t in 0..len {
        for z in noise.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        let row = &mut data[t * d..(t + 1) * d];
        row.copy_from_slice(params.bias());
        for chain in 0..m {
            if states[t * m + chain] == 1 {
                for (acc, w) in row.iter_mut().zip(params.w_row(chain)) {
                    *acc += w;
                }
            }
        }
        for i in 0..d {
            for k in 0..=i {
                row[i] += chol.get(i, k) * noise[k];
            }
        }
    }
    Ok((
        StateSequence::new(len, m, states)?,
        Observations::new(len, d, data)?,
    ))
}

/// Data-scaled random starting point shared by the training algorithms.
///
/// Chain rows of `W` are Gaussian with the per-dimension sample spread, the
/// bias centres the prior mean on the sample mean, `L` is diagonal with the
/// sample standard deviations and every chain starts persistent (`p = 0.9`).
pub fn init_params(y: &Observations, m: usize, seed: u64) -> Result<FhmmParams> {
    let (len, d) = (y.len(), y.dim());
    if len < 2 {
        return Err(Error::domain(
            "need at least two observations to initialise",
        ));
    }
    let mut mean = vec![0.0; d];
    for t in 0..len {
        for (acc, v) in mean.iter_mut().zip(y.row(t)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= len as f64);
    let mut sd = vec![0.0; d];
    for t in 0..len {
        for ((acc, v), mu) in sd.iter_mut().zip(y.row(t)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    for v in sd.iter_mut() {
        *v = (*v / (len - 1) as f64).sqrt().max(1e-3);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity((m + 1) * d);
    for _ in 0..m {
        for s in &sd {
            let z: f64 = rng.sample(StandardNormal);
            w.push(z * s);
        }
    }
    let mut bias = mean;
    for k in 0..m {
        for j in 0..d {
            bias[j] -= 0.5 * w[k * d + j];
        }
    }
    w.extend(bias);
    let trans = vec![TransitionMatrix::from_switch(0.1, 0.1)?; m];
    FhmmParams::new(m, d, w, CholFactor::diagonal(&sd)?, trans)
}

/// Per-joint-state emission log densities, evaluated without forming `Σ⁻¹`.
pub(crate) struct JointEmission {
    d: usize,
    whitened_means: Vec<f64>,
    log_norm: f64,
    chol: CholFactor,
}

impl JointEmission {
    pub(crate) fn new(params: &FhmmParams) -> Self {
        let d = params.dim();
        let k = 1usize << params.num_chains();
        let mut whitened_means = Vec::with_capacity(k * d);
        for mask in 0..k {
            let mut mu = params.mean_for_mask(mask);
            params.chol().solve_lower_in_place(&mut mu);
            whitened_means.extend(mu);
        }
        Self {
            d,
            whitened_means,
            log_norm: -(d as f64) * ln_sqrt_2pi() - 0.5 * params.chol().log_det(),
            chol: params.chol().clone(),
        }
    }

    pub(crate) fn log_densities(&self, y: &[f64], out: &mut [f64]) {
        let mut z = y.to_vec();
        self.chol.solve_lower_in_place(&mut z);
        for (k, o) in out.iter_mut().enumerate() {
            let mu = &self.whitened_means[k * self.d..(k + 1) * self.d];
            let q: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = self.log_norm - 0.5 * q;
        }
    }
}

/// Applies every chain's transition to a distribution over the 2^M joint states.
pub(crate) fn propagate_joint(trans: &[TransitionMatrix], alpha: &mut [f64]) {
    for (chain, a) in trans.iter().enumerate() {
        let bit = 1usize << chain;
        for k in 0..alpha.len() {
            if k & bit == 0 {
                let (a0, a1) = (alpha[k], alpha[k | bit]);
                alpha[k] = a0 * a.p[0][0] + a1 * a.p[1][0];
                alpha[k | bit] = a0 * a.p[0][1] + a1 * a.p[1][1];
            }
        }
    }
}

pub(crate) fn joint_prior(pi: &[f64]) -> Vec<f64> {
    let k = 1usize << pi.len();
    (0..k)
        .map(|mask| {
            pi.iter()
                .enumerate()
                .map(|(c, p)| if mask >> c & 1 == 1 { *p } else { 1.0 - p })
                .product()
        })
        .collect()
}

fn check_obs_dim(params: &FhmmParams, y: &Observations) -> Result<()> {
    if y.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            what: "observation dimension",
            expected: params.dim(),
            actual: y.dim(),
        });
    }
    Ok(())
}

/// Total log-likelihood `log Σ_s p(y, s)` by a scaled forward pass over the
/// 2^M joint states. Refuses `M > 12`.
pub fn exact_loglik(params: &FhmmParams, y: &Observations) -> Result<f64> {
    let m = params.num_chains();
    if m > EXACT_MAX_CHAINS {
        return Err(Error::TooManyChains {
            m,
            limit: EXACT_MAX_CHAINS,
        });
    }
    check_obs_dim(params, y)?;
    let pi = params.initial_probs()?;
    let emission = JointEmission::new(params);
    let mut alpha = joint_prior(&pi);
    let mut logp = vec![0.0; alpha.len()];
    let mut total = 0.0;
    for t in 0..y.len() {
        if t > 0 {
            propagate_joint(params.transitions(), &mut alpha);
        }
        emission.log_densities(y.row(t), &mut logp);
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        for (a, l) in alpha.iter_mut().zip(&logp) {
            *a *= (l - max).exp();
            norm += *a;
        }
        if !(norm > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        for a in alpha.iter_mut() {
            *a /= norm;
        }
        total += norm.ln() + max;
    }
    Ok(total)
}

/// Exact per-chain smoothed marginals `p(s_t^m = 1 | y)` (small M only).
pub fn exact_marginals(params: &FhmmParams, y: &Observations) -> Result<Vec<f64>> {
    let m = params.num_chains();
    if m > EXACT_MAX_CHAINS {
        return Err(Error::TooManyChains {
            m,
            limit: EXACT_MAX_CHAINS,
        });
    }
    check_obs_dim(params, y)?;
    let pi = params.initial_probs()?;
    let emission = JointEmission::new(params);
    let k = 1usize << m;
    let len = y.len();
    let mut lik = vec![0.0; len * k];
    let mut logp = vec![0.0; k];
    for t in 0..len {
        emission.log_densities(y.row(t), &mut logp);
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (dst, l) in lik[t * k..(t + 1) * k].iter_mut().zip(&logp) {
            *dst = (l - max).exp();
        }
    }
    let mut alpha = vec![0.0; len * k];
    let mut cur = joint_prior(&pi);
    for t in 0..len {
        if t > 0 {
            propagate_joint(params.transitions(), &mut cur);
        }
        let mut norm = 0.0;
        for (c, l) in cur.iter_mut().zip(&lik[t * k..(t + 1) * k]) {
            *c *= l;
            norm += *c;
        }
        cur.iter_mut().for_each(|c| *c /= norm);
        alpha[t * k..(t + 1) * k].copy_from_slice(&cur);
    }
    // Backward pass uses the transposed per-chain propagation.
    let transposed: Vec<TransitionMatrix> = params
        .transitions()
        .iter()
        .map(|a| TransitionMatrix {
            p: [[a.p[0][0], a.p[1][0]], [a.p[0][1], a.p[1][1]]],
        })
        .collect();
    let mut beta = vec![1.0; k];
    let mut out = vec![0.0; len * m];
    for t in (0..len).rev() {
        let mut post: Vec<f64> = alpha[t * k..(t + 1) * k]
            .iter()
            .zip(&beta)
            .map(|(a, b)| a * b)
            .collect();
        let norm: f64 = post.iter().sum();
        post.iter_mut().for_each(|p| *p /= norm);
        for chain in 0..m {
            out[t * m + chain] = post
                .iter()
                .enumerate()
                .filter(|(mask, _)| mask >> chain & 1 == 1)
                .map(|(_, p)| p)
                .sum();
        }
        if t > 0 {
            let mut msg: Vec<f64> = beta
                .iter()
                .zip(&lik[t * k..(t + 1) * k])
                .map(|(b, l)| b * l)
                .collect();
            propagate_joint(&transposed, &mut msg);
            let norm: f64 = msg.iter().sum();
            msg.iter_mut().for_each(|v| *v /= norm);
            beta = msg;
        }
    }
    Ok(out)
}

/// Per-time, per-chain Bernoulli marginals and, optionally, within-chain
/// pairwise tables. `pairs[t * M + m]` couples positions `offset + t` and
/// `offset + t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMarginals {
    pub offset: usize,
    pub len: usize,
    pub m: usize,
    pub theta: Vec<f64>,
    pub pairs: Option<Vec<PairPmf>>,
}

impl PosteriorMarginals {
    pub fn from_theta(offset: usize, len: usize, m: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != len * m {
            return Err(Error::DimensionMismatch {
                what: "marginal buffer",
                expected: len * m,
                actual: theta.len(),
            });
        }
        Ok(Self {
            offset,
            len,
            m,
            theta,
            pairs: None,
        })
    }

    #[inline]
    pub fn theta(&self, t: usize, chain: usize) -> f64 {
        self.theta[t * self.m + chain]
    }

    pub fn theta_row(&self, t: usize) -> &[f64] {
        &self.theta[t * self.m..(t + 1) * self.m]
    }
}

/// `ŷ_t = Wᵀ (θ_{t,1}, …, θ_{t,M}, 1)`.
pub fn smoothed_reconstruction(
    params: &FhmmParams,
    marginals: &PosteriorMarginals,
) -> Result<Observations> {
    let (m, d) = (params.num_chains(), params.dim());
    if marginals.m != m {
        return Err(Error::DimensionMismatch {
            what: "marginal chain count",
            expected: m,
            actual: marginals.m,
        });
    }
    if marginals.theta.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::domain("marginals must lie in [0, 1]"));
    }
    let mut data = Vec::with_capacity(marginals.len * d);
    for t in 0..marginals.len {
        let mut row = params.bias().to_vec();
        for (chain, th) in marginals.theta_row(t).iter().enumerate() {
            for (acc, w) in row.iter_mut().zip(params.w_row(chain)) {
                *acc += th * w;
            }
        }
        data.extend(row);
    }
    Observations::new(marginals.len, d, data)
}
