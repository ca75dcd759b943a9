//! Gaussian–Bernoulli copula pairs and the coherent chains built from them.
//!
//! A pair couples `s_{t-1}` and `s_t` with Bernoulli marginals `θ_{t-1}` and
//! `θ_t` through a Gaussian copula of correlation `ρ_t`. Adjacent pairs share
//! the marginal at their junction, so a chain of pairs divided by the interior
//! marginals is a proper distribution over the whole path.

use crate::error::{Error, Result};
use crate::model::PosteriorMarginals;
use crate::numerics::{bvn_cdf, bvn_pdf, std_normal_cdf, std_normal_quantile, RHO_EPS, THETA_EPS};

/// Cells more negative than this are treated as a logic error, not round-off.
const CELL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopulaPairParams {
    pub theta_prev: f64,
    pub theta_cur: f64,
    pub rho: f64,
}

impl CopulaPairParams {
    pub fn new(theta_prev: f64, theta_cur: f64, rho: f64) -> Self {
        Self {
            theta_prev,
            theta_cur,
            rho,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, th) in [
            ("theta_prev", self.theta_prev),
            ("theta_cur", self.theta_cur),
        ] {
            if !(THETA_EPS - 1e-15..=1.0 - THETA_EPS + 1e-15).contains(&th) {
                return Err(Error::domain(format!(
                    "{name} = {th} outside [{THETA_EPS}, 1-{THETA_EPS}]"
                )));
            }
        }
        let lim = 1.0 - RHO_EPS;
        if !(self.rho >= -lim - 1e-15 && self.rho <= lim + 1e-15) {
            return Err(Error::domain(format!(
                "rho = {} outside the clamp box",
                self.rho
            )));
        }
        Ok(())
    }
}

/// `q[i][j] = q(s_{t-1} = i, s_t = j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPmf {
    pub q: [[f64; 2]; 2],
}

impl PairPmf {
    pub fn independent(theta_prev: f64, theta_cur: f64) -> Self {
        let a = [1.0 - theta_prev, theta_prev];
        let b = [1.0 - theta_cur, theta_cur];
        Self {
            q: [[a[0] * b[0], a[0] * b[1]], [a[1] * b[0], a[1] * b[1]]],
        }
    }

    pub fn total(&self) -> f64 {
        self.q[0][0] + self.q[0][1] + self.q[1][0] + self.q[1][1]
    }

    /// `q(s_{t-1} = 1)`.
    pub fn prev_marginal(&self) -> f64 {
        self.q[1][0] + self.q[1][1]
    }

    /// `q(s_t = 1)`.
    pub fn cur_marginal(&self) -> f64 {
        self.q[0][1] + self.q[1][1]
    }
}

/// Partial derivatives of the four cells with respect to each parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPmfGrad {
    pub d_theta_prev: [[f64; 2]; 2],
    pub d_theta_cur: [[f64; 2]; 2],
    pub d_rho: [[f64; 2]; 2],
}

fn cells_from_q00(theta_prev: f64, theta_cur: f64, q00: f64) -> [[f64; 2]; 2] {
    [
        [q00, 1.0 - theta_prev - q00],
        [1.0 - theta_cur - q00, theta_cur + theta_prev + q00 - 1.0],
    ]
}

pub fn pair_pmf(p: &CopulaPairParams) -> Result<PairPmf> {
    p.validate()?;
    let a = std_normal_quantile(1.0 - p.theta_prev)?;
    let b = std_normal_quantile(1.0 - p.theta_cur)?;
    clamp_cells(p, bvn_cdf(a, b, p.rho)?)
}

fn clamp_cells(p: &CopulaPairParams, q00: f64) -> Result<PairPmf> {
    let mut q = cells_from_q00(p.theta_prev, p.theta_cur, q00);
    let mut clamped = false;
    for cell in q.iter_mut().flatten() {
        if *cell < -CELL_TOLERANCE {
            return Err(Error::Internal(format!(
                "copula cell {cell} below tolerance for {p:?}"
            )));
        }
        if *cell < 0.0 {
            *cell = 0.0;
            clamped = true;
        }
    }
    if clamped {
        let total: f64 = q.iter().flatten().sum();
        q.iter_mut().flatten().for_each(|c| *c /= total);
    }
    Ok(PairPmf { q })
}

/// Chain rule through the copula: `dφ⁻¹(u)/du = 1/φ(φ⁻¹(u))` combined with
/// the bivariate CDF partials, which collapses to conditional normal CDFs.
pub fn pair_pmf_grad(p: &CopulaPairParams) -> Result<PairPmfGrad> {
    p.validate()?;
    let a = std_normal_quantile(1.0 - p.theta_prev)?;
    let b = std_normal_quantile(1.0 - p.theta_cur)?;
    Ok(grad_at(p, a, b))
}

fn grad_at(p: &CopulaPairParams, a: f64, b: f64) -> PairPmfGrad {
    let s = ((1.0 - p.rho) * (1.0 + p.rho)).sqrt();
    // dq00/dθprev = -∂Φ/∂a / φ(a) = -Φ((b - ρa)/s)
    let dq_dprev = -std_normal_cdf((b - p.rho * a) / s);
    let dq_dcur = -std_normal_cdf((a - p.rho * b) / s);
    let dq_drho = bvn_pdf(a, b, p.rho);
    let expand = |dq: f64, dprev: f64, dcur: f64| -> [[f64; 2]; 2] {
        [[dq, -dprev - dq], [-dcur - dq, dcur + dprev + dq]]
    };
    PairPmfGrad {
        d_theta_prev: expand(dq_dprev, 1.0, 0.0),
        d_theta_cur: expand(dq_dcur, 0.0, 1.0),
        d_rho: expand(dq_drho, 0.0, 0.0),
    }
}

/// [`pair_pmf`] and [`pair_pmf_grad`] sharing one pair of quantile evaluations.
pub fn pair_pmf_with_grad(p: &CopulaPairParams) -> Result<(PairPmf, PairPmfGrad)> {
    p.validate()?;
    let a = std_normal_quantile(1.0 - p.theta_prev)?;
    let b = std_normal_quantile(1.0 - p.theta_cur)?;
    let q = clamp_cells(p, bvn_cdf(a, b, p.rho)?)?;
    Ok((q, grad_at(p, a, b)))
}

/// The correlation whose copula pair has `q00` as its (0,0) cell.
///
/// Bisection on the monotone map `ρ ↦ Φ_ρ(a, b)`; targets outside the
/// reachable range saturate at the clamp box.
pub fn fit_rho(theta_prev: f64, theta_cur: f64, q00: f64) -> Result<f64> {
    let a = std_normal_quantile(1.0 - theta_prev)?;
    let b = std_normal_quantile(1.0 - theta_cur)?;
    let (mut lo, mut hi) = (-1.0 + RHO_EPS, 1.0 - RHO_EPS);
    if bvn_cdf(a, b, lo)? >= q00 {
        return Ok(lo);
    }
    if bvn_cdf(a, b, hi)? <= q00 {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bvn_cdf(a, b, mid)? < q00 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One chain: `theta[k]` is the marginal at `offset + k`, `rho[k]` couples
/// positions `offset + k` and `offset + k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaChain {
    pub offset: usize,
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
}

impl CopulaChain {
    pub fn new(offset: usize, theta: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if theta.is_empty() || rho.len() + 1 != theta.len() {
            return Err(Error::DimensionMismatch {
                what: "copula chain correlations",
                expected: theta.len().saturating_sub(1),
                actual: rho.len(),
            });
        }
        let chain = Self { offset, theta, rho };
        for k in 0..chain.rho.len() {
            chain.pair_params(k).validate()?;
        }
        if chain.theta.len() == 1 {
            CopulaPairParams::new(chain.theta[0], chain.theta[0], 0.0).validate()?;
        }
        Ok(chain)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn pair_params(&self, k: usize) -> CopulaPairParams {
        CopulaPairParams::new(self.theta[k], self.theta[k + 1], self.rho[k])
    }

    pub fn pair(&self, k: usize) -> Result<PairPmf> {
        pair_pmf(&self.pair_params(k))
    }
}

/// `log q(s) = Σ_t log q(s_{t-1}, s_t) - Σ_{interior t} log q(s_t)`.
///
/// Returns `-∞` when the path touches a cell with probability below 1e-300.
pub fn chain_log_pmf(chain: &CopulaChain, path: &[u8]) -> Result<f64> {
    if path.len() != chain.len() {
        return Err(Error::DimensionMismatch {
            what: "path length",
            expected: chain.len(),
            actual: path.len(),
        });
    }
    if chain.len() == 1 {
        let th = chain.theta[0];
        let p = if path[0] == 1 { th } else { 1.0 - th };
        return Ok(if p < 1e-300 {
            f64::NEG_INFINITY
        } else {
            p.ln()
        });
    }
    let mut total = 0.0;
    for k in 0..chain.rho.len() {
        let q = chain.pair(k)?.q[path[k] as usize][path[k + 1] as usize];
        if q < 1e-300 {
            return Ok(f64::NEG_INFINITY);
        }
        total += q.ln();
    }
    for k in 1..chain.len() - 1 {
        let th = chain.theta[k];
        let p = if path[k] == 1 { th } else { 1.0 - th };
        total -= p.ln();
    }
    Ok(total)
}

/// The factorised posterior: one independent copula chain per hidden chain,
/// all covering the same positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainVariationalParams {
    pub chains: Vec<CopulaChain>,
}

impl ChainVariationalParams {
    pub fn new(chains: Vec<CopulaChain>) -> Result<Self> {
        let first = chains
            .first()
            .ok_or_else(|| Error::domain("variational family needs at least one chain"))?;
        for c in &chains {
            if c.len() != first.len() || c.offset != first.offset {
                return Err(Error::domain("all chains must cover the same positions"));
            }
        }
        Ok(Self { chains })
    }
}

/// Marginals are the stored θ; pairwise tables come from the copula.
pub fn posterior_marginals_from_chain(
    params: &ChainVariationalParams,
) -> Result<PosteriorMarginals> {
    let m = params.chains.len();
    let len = params.chains[0].len();
    let offset = params.chains[0].offset;
    let mut theta = vec![0.0; len * m];
    let mut pairs = Vec::with_capacity(len.saturating_sub(1) * m);
    for t in 0..len {
        for (c, chain) in params.chains.iter().enumerate() {
            theta[t * m + c] = chain.theta[t];
        }
    }
    for t in 0..len.saturating_sub(1) {
        for chain in &params.chains {
            pairs.push(chain.pair(t)?);
        }
    }
    let mut out = PosteriorMarginals::from_theta(offset, len, m, theta)?;
    out.pairs = Some(pairs);
    Ok(out)
}
