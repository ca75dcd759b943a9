//! Scalar and small-matrix probability primitives.
//!
//! Everything here is a pure function of its arguments. The bivariate normal
//! CDF integrates Plackett's identity `dΦ_ρ(a, b)/dρ = φ₂(a, b; ρ)` over the
//! correlation with a fixed Gauss–Legendre rule. For moderate |ρ| the
//! integral runs from 0 after the substitution `r = sin u`; for |ρ| near 1 it
//! runs from the degenerate ±1 end (Drezner–Wesolowsky, as refined by Genz),
//! where the near-singular part is integrated in closed form.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Lower clamp distance for copula correlations: `ρ ∈ [-1+ε, 1-ε]`.
pub const RHO_EPS: f64 = 1e-6;
/// Lower clamp distance for Bernoulli marginals: `θ ∈ [ε, 1-ε]`.
pub const THETA_EPS: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gauss–Legendre orders used by [`bvn_cdf`], picked by |ρ|.
const GL_ORDERS: [usize; 3] = [6, 12, 20];
/// Above this |ρ| the Plackett integral is taken from the ±1 end instead of from 0.
const HIGH_CORRELATION: f64 = 0.925;

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, `Φ(x) = ½ erfc(-x/√2)`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of [`std_normal_cdf`].
///
/// Wichura's AS241 rational approximation followed by one Newton step. The
/// Newton residual is evaluated on the tail nearest to `p` so precision is
/// not lost for `p` close to 1.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "normal quantile requires p in (0, 1), got {p}"
        )));
    }
    let mut x = as241(p);
    let residual = if p < 0.5 {
        std_normal_cdf(x) - p
    } else {
        (1.0 - p) - std_normal_cdf(-x)
    };
    let dens = std_normal_pdf(x);
    if dens > 0.0 {
        x -= residual / dens;
    }
    Ok(x)
}

#[allow(clippy::excessive_precision)]
fn as241(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_672_7e3 * r + 3.343_057_558_358_812_810_5e4)
            * r
            + 6.726_577_092_700_870_085_3e4)
            * r
            + 4.592_195_393_154_987_145_7e4)
            * r
            + 1.373_169_376_550_946_112_5e4)
            * r
            + 1.971_590_950_306_551_442_7e3)
            * r
            + 1.331_416_678_917_843_774_5e2)
            * r
            + 3.387_132_872_796_366_608_0)
            * q;
        let den = ((((((5.226_495_278_852_854_561_0e3 * r + 2.872_908_573_572_194_267_4e4) * r
            + 3.930_789_580_009_271_061_0e4)
            * r
            + 2.121_379_430_158_659_586_7e4)
            * r
            + 5.394_196_021_424_751_107_7e3)
            * r
            + 6.871_870_074_920_579_083_0e2)
            * r
            + 4.231_333_070_160_091_125_2e1)
            * r
            + 1.0;
        return num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414_076_4e-4 * r + 2.272_384_498_926_918_458_3e-2)
            * r
            + 2.417_807_251_774_506_117_7e-1)
            * r
            + 1.270_458_252_452_368_382_58)
            * r
            + 3.647_848_324_763_204_605_04)
            * r
            + 5.769_497_221_460_691_405_5)
            * r
            + 4.630_337_846_156_545_295_9)
            * r
            + 1.423_437_110_749_683_577_34;
        let den = ((((((1.050_750_071_644_416_843_24e-9 * r + 5.475_938_084_995_344_946e-4)
            * r
            + 1.519_866_656_361_645_719_66e-2)
            * r
            + 1.481_039_764_274_800_745_9e-1)
            * r
            + 6.897_673_349_851_000_045_5e-1)
            * r
            + 1.676_384_830_183_803_849_4)
            * r
            + 2.053_191_626_637_758_821_87)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_132_65e-7 * r + 2.711_555_568_743_487_578_15e-5)
            * r
            + 1.242_660_947_388_078_438_6e-3)
            * r
            + 2.653_218_952_657_612_309_3e-2)
            * r
            + 2.965_605_718_285_048_912_3e-1)
            * r
            + 1.784_826_539_917_291_335_8)
            * r
            + 5.463_784_911_164_114_369_9)
            * r
            + 6.657_904_643_501_103_777_2;
        let den = ((((((2.044_263_103_389_939_785_64e-15 * r + 1.421_511_758_316_445_888_7e-7)
            * r
            + 1.846_318_317_510_054_681_8e-5)
            * r
            + 7.868_691_311_456_132_591e-4)
            * r
            + 1.487_536_129_085_061_485_25e-2)
            * r
            + 1.369_298_809_227_358_053_1e-1)
            * r
            + 5.998_322_065_558_879_376_9e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Nodes and weights of the Gauss–Legendre rule of order `n` on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            dp = nf * (z * p1 - p2) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        weights[i] = w;
        nodes[n - 1 - i] = z;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Fewer nodes suffice when the integrand is smooth (small |ρ|).
fn gl_rule(rho: f64) -> &'static (Vec<f64>, Vec<f64>) {
    static RULES: OnceLock<[(Vec<f64>, Vec<f64>); 3]> = OnceLock::new();
    let rules = RULES.get_or_init(|| GL_ORDERS.map(gauss_legendre));
    let r = rho.abs();
    &rules[if r < 0.3 {
        0
    } else if r < 0.75 {
        1
    } else {
        2
    }]
}

/// Standard bivariate normal density with correlation `rho`.
pub fn bvn_pdf(a: f64, b: f64, rho: f64) -> f64 {
    let one_m = (1.0 - rho) * (1.0 + rho);
    let q = (a * a - 2.0 * rho * a * b + b * b) / one_m;
    (-0.5 * q).exp() / (2.0 * PI * one_m.sqrt())
}

fn check_rho(rho: f64) -> Result<()> {
    let lim = 1.0 - RHO_EPS;
    if !(rho >= -lim - 1e-15 && rho <= lim + 1e-15) {
        return Err(Error::domain(format!(
            "correlation {rho} outside [-1+{RHO_EPS}, 1-{RHO_EPS}]"
        )));
    }
    Ok(())
}

/// `P(X ≤ a, Y ≤ b)` for a standard bivariate normal with correlation `rho`.
///
/// The result is clamped into the Fréchet bounds implied by the marginals.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if a.is_nan() || b.is_nan() {
        return Err(Error::domain("bvn_cdf called with NaN limit"));
    }
    let pa = std_normal_cdf(a);
    let pb = std_normal_cdf(b);
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if a == f64::INFINITY {
        return Ok(pb);
    }
    if b == f64::INFINITY {
        return Ok(pa);
    }
    let value = if rho.abs() <= HIGH_CORRELATION {
        pa * pb + plackett_from_zero(a, b, rho)
    } else if rho > 0.0 {
        upper_orthant_high(-a, -b, rho)
    } else {
        // Φ_ρ(a, b) = Φ(a) - Φ_{-ρ}(a, -b)
        pa - upper_orthant_high(-a, b, -rho)
    };
    let lower = (pa + pb - 1.0).max(0.0);
    let upper_bound = pa.min(pb);
    Ok(value.clamp(lower, upper_bound))
}

/// `∫₀^ρ φ₂(a, b; r) dr` with `r = sin u`.
fn plackett_from_zero(a: f64, b: f64, rho: f64) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    let (nodes, weights) = gl_rule(rho);
    let half = 0.5 * rho.asin();
    let hs = 0.5 * (a * a + b * b);
    let ab = a * b;
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        let (s, c) = (half * (1.0 + x)).sin_cos();
        acc += w * ((ab * s - hs) / (c * c)).exp();
    }
    acc * half / (2.0 * PI)
}

/// `P(X > h, Y > k)` for `r > HIGH_CORRELATION`: Plackett's identity
/// integrated from `r` up to 1 in the variable `x = √(1-r²)`, with the
/// leading singular behaviour integrated in closed form.
fn upper_orthant_high(h: f64, k: f64, r: f64) -> f64 {
    let hk = h * k;
    let mut bvn = 0.0;
    if r < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -0.5 * (b_s / a_s + hk);
        if asr > -100.0 {
            bvn = a
                * asr.exp()
                * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        }
        if -hk < 100.0 {
            let b = (h - k).abs();
            bvn -= (-0.5 * hk).exp()
                * (2.0 * PI).sqrt()
                * std_normal_cdf(-b / a)
                * b
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        let half = 0.5 * a;
        let (nodes, weights) = gl_rule(1.0);
        for (x, w) in nodes.iter().zip(weights) {
            let xv = half * (1.0 + x);
            let x_s = xv * xv;
            let r_s = (1.0 - x_s).sqrt();
            let asr = -0.5 * (b_s / x_s + hk);
            if asr > -100.0 {
                bvn += half
                    * w
                    * asr.exp()
                    * ((-hk * (1.0 - r_s) / (2.0 * (1.0 + r_s))).exp() / r_s
                        - (1.0 + c * x_s * (1.0 + d * x_s)));
            }
        }
        bvn *= -1.0 / (2.0 * PI);
    }
    bvn + std_normal_cdf(-h.max(k))
}

/// Partial derivatives of [`bvn_cdf`] with respect to `(a, b, rho)`.
pub fn bvn_cdf_grad(a: f64, b: f64, rho: f64) -> Result<[f64; 3]> {
    check_rho(rho)?;
    let s = ((1.0 - rho) * (1.0 + rho)).sqrt();
    let da = std_normal_pdf(a) * std_normal_cdf((b - rho * a) / s);
    let db = std_normal_pdf(b) * std_normal_cdf((a - rho * b) / s);
    let drho = bvn_pdf(a, b, rho);
    Ok([da, db, drho])
}

/// Lower-triangular Cholesky factor `L` with `Σ = L Lᵀ`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    dim: usize,
    entries: Vec<f64>,
}

impl CholFactor {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain(
                "Cholesky factor must have positive dimension",
            ));
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                what: "Cholesky entries",
                expected: dim * dim,
                actual: entries.len(),
            });
        }
        for i in 0..dim {
            let d = entries[i * dim + i];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::domain(format!(
                    "Cholesky diagonal entry {i} must be positive, got {d}"
                )));
            }
            for j in 0..dim {
                let v = entries[i * dim + j];
                if j > i && v != 0.0 {
                    return Err(Error::domain("Cholesky factor must be lower triangular"));
                }
                if !v.is_finite() {
                    return Err(Error::domain("Cholesky factor has non-finite entry"));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim]).expect("identity is a valid factor")
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let dim = diag.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            entries[i * dim + i] = *d;
        }
        Self::new(dim, entries)
    }

    /// Factorises a symmetric positive-definite matrix (row-major).
    pub fn from_covariance(dim: usize, cov: &[f64]) -> Result<Self> {
        if cov.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                what: "covariance entries",
                expected: dim * dim,
                actual: cov.len(),
            });
        }
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = cov[i * dim + j];
                for k in 0..j {
                    sum -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(Error::domain("covariance matrix is not positive definite"));
                    }
                    l[i * dim + i] = sum.sqrt();
                } else {
                    l[i * dim + j] = sum / l[j * dim + j];
                }
            }
        }
        Self::new(dim, l)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// `Σ = L Lᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.dim;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..=i.min(j) {
                    acc += self.get(i, k) * self.get(j, k);
                }
                s[i * n + j] = acc;
            }
        }
        s
    }

    /// `log det Σ = 2 Σ log Lᵢᵢ`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.entries[i * n..i * n + i];
            let mut acc = b[i];
            for (l, x) in row.iter().zip(b.iter()) {
                acc -= l * x;
            }
            b[i] = acc / self.entries[i * n + i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_t_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut acc = b[i];
            for k in i + 1..n {
                acc -= self.entries[k * n + i] * b[k];
            }
            b[i] = acc / self.entries[i * n + i];
        }
    }

    /// `Σ⁻¹ b` via two triangular solves.
    pub fn solve_cov(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_t_in_place(&mut x);
        x
    }
}

/// `log N(y; mu, L Lᵀ)` via a triangular solve.
pub fn gaussian_logpdf(y: &[f64], mu: &[f64], chol: &CholFactor) -> Result<f64> {
    let d = chol.dim();
    if y.len() != d || mu.len() != d {
        return Err(Error::DimensionMismatch {
            what: "gaussian_logpdf vector",
            expected: d,
            actual: if y.len() != d { y.len() } else { mu.len() },
        });
    }
    let mut z: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    chol.solve_lower_in_place(&mut z);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    Ok(-(d as f64) * LN_SQRT_2PI - 0.5 * chol.log_det() - 0.5 * quad)
}

/// Numerically stable `log Σ exp(xs)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn ln_sqrt_2pi() -> f64 {
    LN_SQRT_2PI
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if std_normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Independent route: `Φ_ρ(a,b) = ∫_{-∞}^{a} φ(x) Φ((b-ρx)/√(1-ρ²)) dx`
    /// by adaptive Simpson quadrature.
    fn bvn_oracle(a: f64, b: f64, rho: f64) -> f64 {
        let s = (1.0 - rho * rho).sqrt();
        let f = |x: f64| std_normal_pdf(x) * std_normal_cdf((b - rho * x) / s);
        fn simpson<F: Fn(f64) -> f64>(
            f: &F,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let lo = -12.0_f64;
        let hi = a.min(12.0);
        if hi <= lo {
            return 0.0;
        }
        let n = 64;
        let h = (hi - lo) / n as f64;
        (0..n)
            .map(|i| {
                let x0 = lo + i as f64 * h;
                let x1 = x0 + h;
                let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
                let whole = h / 6.0 * (f0 + 4.0 * fm + f1);
                simpson(&f, x0, x1, f0, fm, f1, whole, 1e-15, 40)
            })
            .sum()
    }

    #[test]
    fn cdf_reference_points() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        let tail = std_normal_cdf(-8.0);
        assert!(tail < 1e-14 && tail > 0.0);
        // Mills-ratio bounds: φ(x)·x/(1+x²) < 1-Φ(x) < φ(x)/x.
        let x = 8.0;
        assert!(tail < std_normal_pdf(x) / x);
        assert!(tail > std_normal_pdf(x) * x / (1.0 + x * x));
    }

    #[test]
    fn cdf_monotone_on_grid() {
        let mut prev = 0.0;
        for i in 0..=4000 {
            let x = -20.0 + i as f64 * 0.01;
            let v = std_normal_cdf(x);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn quantile_reference_points() {
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        assert!((std_normal_quantile(0.975).unwrap() - 1.959964).abs() < 1e-5);
        let bisected = bisect_quantile(0.975);
        assert!((std_normal_quantile(0.975).unwrap() - bisected).abs() < 1e-10);
        for x in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let back = std_normal_quantile(std_normal_cdf(x)).unwrap();
            assert!((back - x).abs() < 1e-8, "{x} -> {back}");
        }
    }

    #[test]
    fn quantile_domain_errors() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(std_normal_quantile(p), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn quantile_inverts_cdf_on_grid() {
        for i in 0..1000 {
            let p = 1e-6 + (1.0 - 2e-6) * i as f64 / 999.0;
            let x = std_normal_quantile(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() < 1e-10, "p = {p}");
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [6usize, 12, 20, 32] {
            let (x, w) = gauss_legendre(n);
            let total: f64 = w.iter().sum();
            assert!((total - 2.0).abs() < 1e-13);
            // ∫ x^(2n-2) over [-1,1] = 2/(2n-1), exact for order n.
            let k = 2 * n as i32 - 2;
            let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            assert!((m - 2.0 / (k + 1) as f64).abs() < 1e-13);
        }
    }

    #[test]
    fn bvn_reference_points() {
        assert!((bvn_cdf(0.0, 0.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        let expected = 0.25 + 0.5f64.asin() / (2.0 * PI);
        assert!((bvn_cdf(0.0, 0.0, 0.5).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 1.0 / 3.0).abs() < 1e-12);
        for b in [-2.0, 0.3, 1.7] {
            for rho in [-0.9, 0.0, 0.6] {
                let v = bvn_cdf(38.0, b, rho).unwrap();
                assert!((v - std_normal_cdf(b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bvn_matches_conditional_quadrature_oracle() {
        let rhos = [-0.999999, -0.99, -0.7, -0.2, 0.1, 0.5, 0.9, 0.99, 0.999999];
        let pts = [-3.0, -1.2, -0.3, 0.0, 0.4, 1.1, 2.5];
        for &rho in &rhos {
            for &a in &pts {
                for &b in &pts {
                    let v = bvn_cdf(a, b, rho).unwrap();
                    let o = bvn_oracle(a, b, rho);
                    assert!((v - o).abs() < 1e-10, "a={a} b={b} rho={rho}: {v} vs {o}");
                }
            }
        }
    }

    #[test]
    fn bvn_independence_and_symmetry() {
        for i in 0..21 {
            for j in 0..21 {
                let a = -4.0 + 0.4 * i as f64;
                let b = -4.0 + 0.4 * j as f64;
                let v = bvn_cdf(a, b, 0.0).unwrap();
                assert!((v - std_normal_cdf(a) * std_normal_cdf(b)).abs() < 1e-12);
                for rho in [-0.8, 0.3, 0.95] {
                    let ab = bvn_cdf(a, b, rho).unwrap();
                    let ba = bvn_cdf(b, a, rho).unwrap();
                    assert!((ab - ba).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn bvn_rectangles_are_nonnegative() {
        let grid: Vec<f64> = (0..16).map(|i| -3.0 + 0.4 * i as f64).collect();
        for rho in [-0.99, -0.5, 0.0, 0.5, 0.99] {
            for w in grid.windows(2) {
                for v in grid.windows(2) {
                    let mass = bvn_cdf(w[1], v[1], rho).unwrap()
                        - bvn_cdf(w[0], v[1], rho).unwrap()
                        - bvn_cdf(w[1], v[0], rho).unwrap()
                        + bvn_cdf(w[0], v[0], rho).unwrap();
                    assert!(mass > -1e-12);
                }
            }
        }
    }

    #[test]
    fn bvn_rejects_out_of_range_rho() {
        assert!(bvn_cdf(0.0, 0.0, 1.0).is_err());
        assert!(bvn_cdf(0.0, 0.0, -0.9999999).is_err());
        assert!(bvn_cdf(0.0, 0.0, 1.0 - RHO_EPS).is_ok());
    }

    #[test]
    fn bvn_grad_reference_points() {
        let g = bvn_cdf_grad(0.0, 0.0, 0.0).unwrap();
        assert!((g[2] - 1.0 / (2.0 * PI)).abs() < 1e-12);
        assert!((g[2] - 0.159_154_9).abs() < 1e-7);
        assert!((g[0] - 0.199_471_1).abs() < 1e-7);
        assert!((g[0] - g[1]).abs() < 1e-15);
    }

    #[test]
    fn bvn_grad_matches_finite_differences() {
        let h = 1e-5;
        for &(a, b, rho) in &[
            (0.3, -0.4, 0.2),
            (-1.0, 1.5, -0.6),
            (0.8, 0.7, 0.9),
            (-0.2, -0.1, -0.95),
            (1.3, 0.2, 0.5),
        ] {
            let g = bvn_cdf_grad(a, b, rho).unwrap();
            let fd = [
                (bvn_cdf(a + h, b, rho).unwrap() - bvn_cdf(a - h, b, rho).unwrap()) / (2.0 * h),
                (bvn_cdf(a, b + h, rho).unwrap() - bvn_cdf(a, b - h, rho).unwrap()) / (2.0 * h),
                (bvn_cdf(a, b, rho + h).unwrap() - bvn_cdf(a, b, rho - h).unwrap()) / (2.0 * h),
            ];
            for k in 0..3 {
                let rel = (g[k] - fd[k]).abs() / g[k].abs().max(1e-8);
                assert!(rel < 1e-5, "({a},{b},{rho}) k={k}: {} vs {}", g[k], fd[k]);
            }
        }
    }

    #[test]
    fn logpdf_reference_points() {
        let l1 = CholFactor::identity(1);
        let v = gaussian_logpdf(&[0.0], &[0.0], &l1).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let l2 = CholFactor::identity(2);
        let v = gaussian_logpdf(&[0.3, -1.0], &[0.3, -1.0], &l2).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);
        assert!(gaussian_logpdf(&[0.0], &[0.0, 1.0], &l2).is_err());
    }

    fn dense_inverse(n: usize, m: &[f64]) -> (Vec<f64>, f64) {
        // Gauss–Jordan with partial pivoting; returns (inverse, determinant).
        let mut a = m.to_vec();
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        let mut det = 1.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
                .unwrap();
            if piv != col {
                for k in 0..n {
                    a.swap(col * n + k, piv * n + k);
                    inv.swap(col * n + k, piv * n + k);
                }
                det = -det;
            }
            let p = a[col * n + col];
            det *= p;
            for k in 0..n {
                a[col * n + k] /= p;
                inv[col * n + k] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r * n + col];
                    for k in 0..n {
                        a[r * n + k] -= f * a[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
        (inv, det)
    }

    #[test]
    fn logpdf_matches_dense_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 3;
            let mut l = vec![0.0; 9];
            for i in 0..n {
                for j in 0..i {
                    l[i * n + j] = rng.random_range(-1.0..1.0);
                }
                l[i * n + i] = rng.random_range(0.3..2.0);
            }
            let chol = CholFactor::new(n, l).unwrap();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sigma = chol.covariance();
            let (inv, det) = dense_inverse(n, &sigma);
            let r: Vec<f64> = y.iter().zip(&mu).map(|(a, b)| a - b).collect();
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += r[i] * inv[i * n + j] * r[j];
                }
            }
            let oracle = -0.5 * (n as f64) * (2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad;
            let v = gaussian_logpdf(&y, &mu, &chol).unwrap();
            assert!((v - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_roundtrip() {
        let cov = [4.0, 1.2, 1.2, 2.0];
        let l = CholFactor::from_covariance(2, &cov).unwrap();
        let back = l.covariance();
        for (a, b) in cov.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(CholFactor::from_covariance(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(CholFactor::new(2, vec![1.0, 0.5, 0.0, 1.0]).is_err());
    }
}
