//! Feed-forward recognition networks mapping a data window to the copula
//! chain parameters `θ_{t,m}` (sigmoid head) and `ρ_{t,m}` (tanh head).
//!
//! Two layouts are supported. `PerChain` gives every hidden chain its own
//! MLP whose hidden units are shared by that chain's θ and ρ heads.
//! `Shared` uses one MLP with `2M` outputs, ordered `θ₁..θ_M, ρ₁..ρ_M`.
//!
//! All weights live in one flat vector. Each network stores its layers in
//! order, each layer as a row-major `out × in` weight block followed by its
//! bias.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::Observations;
use crate::numerics::{RHO_EPS, THETA_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    PerChain,
    Shared,
}

impl Sharing {
    pub fn as_str(self) -> &'static str {
        match self {
            Sharing::PerChain => "per-chain",
            Sharing::Shared => "shared",
        }
    }
}

impl FromStr for Sharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-chain" => Ok(Sharing::PerChain),
            "shared" | "shared-hidden" => Ok(Sharing::Shared),
            other => Err(Error::config(format!("unknown sharing mode `{other}`"))),
        }
    }
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// Δt; the window holds `Δt + 1` rows.
    pub window: usize,
    pub obs_dim: usize,
    pub chains: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sharing: Sharing,
}

impl MlpSpec {
    pub fn new(
        window: usize,
        obs_dim: usize,
        chains: usize,
        hidden: Vec<usize>,
        activation: Activation,
        sharing: Sharing,
    ) -> Result<Self> {
        let spec = Self {
            window,
            obs_dim,
            chains,
            hidden,
            activation,
            sharing,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || !self.window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "window Δt must be even and at least 2 (got {}); a window of w rows needs Δt = w - 1",
                self.window
            )));
        }
        if self.hidden.is_empty() {
            return Err(Error::config(
                "recognition network needs at least one hidden layer",
            ));
        }
        if self.hidden.contains(&0) || self.obs_dim == 0 || self.chains == 0 {
            return Err(Error::config("layer sizes, D and M must all be at least 1"));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    pub fn input_dim(&self) -> usize {
        (self.window + 1) * self.obs_dim
    }

    pub fn num_nets(&self) -> usize {
        match self.sharing {
            Sharing::PerChain => self.chains,
            Sharing::Shared => 1,
        }
    }

    fn outputs_per_net(&self) -> usize {
        match self.sharing {
            Sharing::PerChain => 2,
            Sharing::Shared => 2 * self.chains,
        }
    }

    /// Sizes `[input, hidden.., output]` of one network.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.outputs_per_net());
        sizes
    }

    pub fn params_per_net(&self) -> usize {
        self.layer_sizes()
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.num_nets() * self.params_per_net()
    }
}

/// The rows `t - Δt/2 ..= t + Δt/2` of `y`, flattened in time order.
pub fn window(y: &Observations, t: usize, dt: usize) -> Result<&[f64]> {
    let half = dt / 2;
    if t < half || t + half >= y.len() {
        return Err(Error::Boundary {
            t,
            len: y.len(),
            half,
        });
    }
    Ok(y.rows(t - half, t + half + 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub flat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecogOutput {
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Saved activations of one forward pass, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Vec<f64>,
    /// Per network, the post-activation outputs of every hidden layer
    /// followed by the raw output layer, concatenated.
    acts: Vec<Vec<f64>>,
    pub output: RecogOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionNet {
    spec: MlpSpec,
    params: MlpParams,
}

impl RecognitionNet {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_params();
        Ok(Self {
            spec,
            params: MlpParams { flat: vec![0.0; n] },
        })
    }

    /// Glorot-uniform weights, zero biases: every θ starts near 0.5, every ρ near 0.
    pub fn initialized(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sizes = net.spec.layer_sizes();
        let mut off = 0;
        for _ in 0..net.spec.num_nets() {
            for w in sizes.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut net.params.flat[off..off + fan_in * fan_out] {
                    *v = rng.random_range(-a..a);
                }
                off += fan_in * fan_out + fan_out;
            }
        }
        Ok(net)
    }

    pub fn from_flat(spec: MlpSpec, flat: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.num_params() {
            return Err(Error::DimensionMismatch {
                what: "recognition parameters",
                expected: spec.num_params(),
                actual: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("recognition parameters must be finite"));
        }
        Ok(Self {
            spec,
            params: MlpParams { flat },
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn flat(&self) -> &[f64] {
        &self.params.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.params.flat
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "recognition input",
                expected: self.spec.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<RecogOutput> {
        Ok(self.forward_tape(x)?.output)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape> {
        self.check_input(x)?;
        let sizes = self.spec.layer_sizes();
        let per_net = self.spec.params_per_net();
        let total_units: usize = sizes[1..].iter().sum();
        let act = self.spec.activation;
        let n_layers = sizes.len() - 1;
        let mut acts = Vec::with_capacity(self.spec.num_nets());
        for net in 0..self.spec.num_nets() {
            let mut buf = Vec::with_capacity(total_units);
            let mut p = net * per_net;
            let mut in_start = usize::MAX;
            for (layer, w) in sizes.windows(2).enumerate() {
                let (n_in, n_out) = (w[0], w[1]);
                let weights = &self.params.flat[p..p + n_in * n_out];
                let bias = &self.params.flat[p + n_in * n_out..p + n_in * n_out + n_out];
                let out_start = buf.len();
                for o in 0..n_out {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let input: &[f64] = if layer == 0 {
                        x
                    } else {
                        &buf[in_start..out_start]
                    };
                    let z = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    let value = if layer + 1 == n_layers {
                        z
                    } else {
                        act.apply(z)
                    };
                    buf.push(value);
                }
                in_start = out_start;
                p += n_in * n_out + n_out;
            }
            acts.push(buf);
        }
        let output = self.heads(&acts);
        Ok(Tape {
            input: x.to_vec(),
            acts,
            output,
        })
    }

    /// Raw output-layer values of `net` within its activation buffer.
    fn raw_outputs<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        let n_out = self.spec.outputs_per_net();
        &buf[buf.len() - n_out..]
    }

    fn heads(&self, acts: &[Vec<f64>]) -> RecogOutput {
        let m = self.spec.chains;
        let mut theta = Vec::with_capacity(m);
        let mut rho = Vec::with_capacity(m);
        let mut push = |zt: f64, zr: f64| {
            theta.push(sigmoid(zt).clamp(THETA_EPS, 1.0 - THETA_EPS));
            rho.push(zr.tanh().clamp(-1.0 + RHO_EPS, 1.0 - RHO_EPS));
        };
        match self.spec.sharing {
            Sharing::PerChain => {
                for buf in acts {
                    let out = self.raw_outputs(buf);
                    push(out[0], out[1]);
                }
            }
            Sharing::Shared => {
                let out = self.raw_outputs(&acts[0]);
                for c in 0..m {
                    push(out[c], out[m + c]);
                }
            }
        }
        RecogOutput { theta, rho }
    }

    /// Accumulates `∂(Σ dθ·θ + Σ dρ·ρ)/∂params` into `grad`.
    pub fn backward(&self, tape: &Tape, d_theta: &[f64], d_rho: &[f64], grad: &mut [f64]) {
        let m = self.spec.chains;
        debug_assert_eq!(grad.len(), self.spec.num_params());
        let head_grad = |z_theta: f64, z_rho: f64, dt: f64, dr: f64| -> (f64, f64) {
            let s = sigmoid(z_theta);
            let gt = if (THETA_EPS..=1.0 - THETA_EPS).contains(&s) {
                dt * s * (1.0 - s)
            } else {
                0.0
            };
            let r = z_rho.tanh();
            let gr = if (-1.0 + RHO_EPS..=1.0 - RHO_EPS).contains(&r) {
                dr * (1.0 - r * r)
            } else {
                0.0
            };
            (gt, gr)
        };
        match self.spec.sharing {
            Sharing::PerChain => {
                for c in 0..m {
                    if d_theta[c] == 0.0 && d_rho[c] == 0.0 {
                        continue;
                    }
                    let out = self.raw_outputs(&tape.acts[c]);
                    let (gt, gr) = head_grad(out[0], out[1], d_theta[c], d_rho[c]);
                    self.backprop_net(c, tape, &[gt, gr], grad);
                }
            }
            Sharing::Shared => {
                let out = self.raw_outputs(&tape.acts[0]);
                let mut dz = vec![0.0; 2 * m];
                for c in 0..m {
                    let (gt, gr) = head_grad(out[c], out[m + c], d_theta[c], d_rho[c]);
                    dz[c] = gt;
                    dz[m + c] = gr;
                }
                self.backprop_net(0, tape, &dz, grad);
            }
        }
    }

    fn backprop_net(&self, net: usize, tape: &Tape, d_out: &[f64], grad: &mut [f64]) {
        let sizes = self.spec.layer_sizes();
        let per_net = self.spec.params_per_net();
        let buf = &tape.acts[net];
        let act = self.spec.activation;
        // Offsets of each layer's parameters and activations.
        let mut param_off = Vec::with_capacity(sizes.len() - 1);
        let mut act_off = Vec::with_capacity(sizes.len() - 1);
        let (mut p, mut a) = (net * per_net, 0);
        for w in sizes.windows(2) {
            param_off.push(p);
            act_off.push(a);
            p += w[0] * w[1] + w[1];
            a += w[1];
        }
        let mut delta = d_out.to_vec();
        for layer in (0..sizes.len() - 1).rev() {
            let (n_in, n_out) = (sizes[layer], sizes[layer + 1]);
            let input: &[f64] = if layer == 0 {
                &tape.input
            } else {
                &buf[act_off[layer - 1]..act_off[layer - 1] + n_in]
            };
            let po = param_off[layer];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[po + o * n_in..po + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[po + n_in * n_out + o] += d;
            }
            if layer == 0 {
                break;
            }
            let weights = &self.params.flat[po..po + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (pv, w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *pv += d * w;
                }
            }
            for (pv, a) in prev.iter_mut().zip(input) {
                *pv *= act.derivative_from_output(*a);
            }
            delta = prev;
        }
    }
}

/// Gradient of `Σ dθ·θ + Σ dρ·ρ` with respect to all network parameters.
pub fn recog_backward(
    net: &RecognitionNet,
    x: &[f64],
    d_theta: &[f64],
    d_rho: &[f64],
) -> Result<Vec<f64>> {
    let m = net.spec.chains;
    if d_theta.len() != m || d_rho.len() != m {
        return Err(Error::DimensionMismatch {
            what: "upstream gradient",
            expected: m,
            actual: d_theta.len().max(d_rho.len()),
        });
    }
    let tape = net.forward_tape(x)?;
    let mut grad = vec![0.0; net.spec.num_params()];
    net.backward(&tape, d_theta, d_rho, &mut grad);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spec(dt: usize, d: usize, m: usize, hidden: Vec<usize>, sharing: Sharing) -> MlpSpec {
        MlpSpec::new(dt, d, m, hidden, Activation::Tanh, sharing).unwrap()
    }

    #[test]
    fn window_examples() {
        let y = Observations::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(window(&y, 1, 2).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(matches!(window(&y, 1, 4), Err(Error::Boundary { .. })));
        assert!(window(&y, 0, 2).is_err());
        assert!(window(&y, 2, 2).is_err());

        let data: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let y = Observations::new(10, 2, data).unwrap();
        for t in 1..9 {
            let w = window(&y, t, 2).unwrap();
            let mut expect = Vec::new();
            for r in t - 1..=t + 1 {
                expect.push((2 * r) as f64);
                expect.push((2 * r + 1) as f64);
            }
            assert_eq!(w, expect.as_slice());
        }
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(3, 1, 1, vec![4], Activation::Tanh, Sharing::PerChain).is_err());
        assert!(MlpSpec::new(0, 1, 1, vec![4], Activation::Tanh, Sharing::PerChain).is_err());
        assert!(MlpSpec::new(2, 1, 1, vec![], Activation::Tanh, Sharing::PerChain).is_err());
        assert!(MlpSpec::new(2, 1, 1, vec![0], Activation::Tanh, Sharing::PerChain).is_err());
        let s = spec(4, 2, 3, vec![30], Sharing::PerChain);
        assert_eq!(s.input_dim(), 10);
        assert_eq!(s.params_per_net(), 30 * 11 + 2 * 31);
        assert_eq!(s.num_params(), 3 * s.params_per_net());
    }

    #[test]
    fn zero_weights_give_neutral_outputs() {
        for sharing in [Sharing::PerChain, Sharing::Shared] {
            let net = RecognitionNet::zeros(spec(2, 2, 3, vec![5], sharing)).unwrap();
            let out = net.forward(&[0.3; 6]).unwrap();
            assert_eq!(out.theta, vec![0.5; 3]);
            assert_eq!(out.rho, vec![0.0; 3]);
        }
    }

    fn hand_net() -> (RecognitionNet, Vec<f64>) {
        // One hidden unit, all weights 1, biases 0; only the middle input is non-zero.
        let s = spec(2, 1, 1, vec![1], Sharing::PerChain);
        let flat = vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        (
            RecognitionNet::from_flat(s, flat).unwrap(),
            vec![0.0, 1.0, 0.0],
        )
    }

    #[test]
    fn hand_computed_forward_and_backward() {
        let (net, x) = hand_net();
        let out = net.forward(&x).unwrap();
        let h = 1f64.tanh();
        assert!((h - 0.761594).abs() < 1e-6);
        let theta = 1.0 / (1.0 + (-h).exp());
        assert!((theta - 0.681700).abs() < 1e-6);
        assert!((out.theta[0] - theta).abs() < 1e-12);
        assert!((out.rho[0] - h.tanh()).abs() < 1e-12);
        let g = recog_backward(&net, &x, &[1.0], &[0.0]).unwrap();
        // Output-layer θ weight sits right after the 3 + 1 hidden-layer parameters.
        let expected = theta * (1.0 - theta) * h;
        assert!((g[4] - expected).abs() < 1e-6);
        let zero = recog_backward(&net, &x, &[0.0], &[0.0]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hidden_permutation_leaves_outputs_unchanged() {
        let s = spec(2, 2, 1, vec![4], Sharing::PerChain);
        let net = RecognitionNet::initialized(s.clone(), 5).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = net.flat();
        // layer 0: 4×6 weights + 4 biases; layer 1: 2×4 weights + 2 biases.
        let perm = [2, 0, 3, 1];
        let mut g = f.to_vec();
        for (new, &old) in perm.iter().enumerate() {
            g[new * 6..new * 6 + 6].copy_from_slice(&f[old * 6..old * 6 + 6]);
            g[24 + new] = f[24 + old];
            for o in 0..2 {
                g[28 + o * 4 + new] = f[28 + o * 4 + old];
            }
        }
        let permuted = RecognitionNet::from_flat(s, g).unwrap();
        let a = net.forward(&x).unwrap();
        let b = permuted.forward(&x).unwrap();
        assert!((a.theta[0] - b.theta[0]).abs() < 1e-12);
        assert!((a.rho[0] - b.rho[0]).abs() < 1e-12);
    }

    #[test]
    fn outputs_stay_inside_clamp_box() {
        let s = spec(2, 1, 2, vec![3], Sharing::Shared);
        let mut net = RecognitionNet::initialized(s, 1).unwrap();
        for v in net.flat_mut() {
            *v *= 1e4;
        }
        let out = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        for th in out.theta {
            assert!((THETA_EPS..=1.0 - THETA_EPS).contains(&th));
        }
        for r in out.rho {
            assert!((-1.0 + RHO_EPS..=1.0 - RHO_EPS).contains(&r));
        }
    }

    #[test]
    fn shared_block_diagonal_matches_per_chain() {
        let (m, h1, h2) = (3, 4, 2);
        let per = spec(2, 2, m, vec![h1, h2], Sharing::PerChain);
        let per_net = RecognitionNet::initialized(per, 7).unwrap();
        let shared_spec = spec(2, 2, m, vec![m * h1, m * h2], Sharing::Shared);
        let n_in = 6;
        let (mh1, mh2, n_out) = (m * h1, m * h2, 2 * m);
        let mut flat = vec![0.0; shared_spec.num_params()];
        let l1 = 0;
        let l2 = l1 + mh1 * n_in + mh1;
        let l3 = l2 + mh2 * mh1 + mh2;
        let pp = per_net.spec().params_per_net();
        for c in 0..m {
            let src = &per_net.flat()[c * pp..(c + 1) * pp];
            let (s1, s2, s3) = (0, h1 * n_in + h1, h1 * n_in + h1 + h2 * h1 + h2);
            for u in 0..h1 {
                let row = c * h1 + u;
                flat[l1 + row * n_in..l1 + (row + 1) * n_in]
                    .copy_from_slice(&src[s1 + u * n_in..s1 + (u + 1) * n_in]);
                flat[l1 + mh1 * n_in + row] = src[s1 + h1 * n_in + u];
            }
            for u in 0..h2 {
                let row = c * h2 + u;
                for k in 0..h1 {
                    flat[l2 + row * mh1 + c * h1 + k] = src[s2 + u * h1 + k];
                }
                flat[l2 + mh2 * mh1 + row] = src[s2 + h2 * h1 + u];
            }
            for (head, out_row) in [(0, c), (1, m + c)] {
                for k in 0..h2 {
                    flat[l3 + out_row * mh2 + c * h2 + k] = src[s3 + head * h2 + k];
                }
                flat[l3 + n_out * mh2 + out_row] = src[s3 + 2 * h2 + head];
            }
        }
        let shared = RecognitionNet::from_flat(shared_spec, flat).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let a = per_net.forward(&x).unwrap();
        let b = shared.forward(&x).unwrap();
        for c in 0..m {
            assert!((a.theta[c] - b.theta[c]).abs() < 1e-12);
            assert!((a.rho[c] - b.rho[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for draw in 0..100 {
            let dt = if rng.random_bool(0.5) { 2 } else { 4 };
            let d = rng.random_range(1..=2);
            let m = rng.random_range(1..=3);
            let hidden = vec![rng.random_range(1..=30)];
            let act = [Activation::Tanh, Activation::Sigmoid, Activation::Tanh][draw % 3];
            let sharing = if draw % 2 == 0 {
                Sharing::PerChain
            } else {
                Sharing::Shared
            };
            let s = MlpSpec::new(dt, d, m, hidden, act, sharing).unwrap();
            let net = RecognitionNet::initialized(s.clone(), draw as u64).unwrap();
            let x: Vec<f64> = (0..s.input_dim())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let dth: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let drh: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = recog_backward(&net, &x, &dth, &drh).unwrap();
            let obj = |n: &RecognitionNet| {
                let o = n.forward(&x).unwrap();
                o.theta.iter().zip(&dth).map(|(a, b)| a * b).sum::<f64>()
                    + o.rho.iter().zip(&drh).map(|(a, b)| a * b).sum::<f64>()
            };
            let h = 1e-5;
            for k in 0..s.num_params() {
                let mut plus = net.clone();
                plus.flat_mut()[k] += h;
                let mut minus = net.clone();
                minus.flat_mut()[k] -= h;
                let fd = (obj(&plus) - obj(&minus)) / (2.0 * h);
                let err = (g[k] - fd).abs() / g[k].abs().max(1e-4);
                assert!(err < 1e-5, "draw {draw} param {k}: {} vs {fd}", g[k]);
            }
        }
    }
}
