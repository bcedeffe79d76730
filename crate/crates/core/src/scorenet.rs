//! Small dense networks for drift and score fields, with hand-rolled
//! reverse-mode differentiation.
//!
//! A [`Mlp`] holds all weights and biases in one flat `Vec<f64>` so
//! optimizers, averaging, and checkpoints can treat parameters as a single
//! vector. Hidden layers use tanh; the output layer is linear. The
//! vector-Jacobian product returns the input gradient and accumulates
//! parameter gradients, which is all the training losses need: value terms
//! use one product per sample, and divergence terms use one per space
//! dimension plus finite-difference pairs for their parameter gradients.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("layer widths must be positive")]
    ZeroWidth,
    #[error("expected {want} parameters, got {got}")]
    ParamCount { got: usize, want: usize },
    #[error("expected input of length {want}, got {got}")]
    InputLength { got: usize, want: usize },
}

/// Fully connected network with tanh hidden activations and a linear output
/// layer, parameters stored flat as `[W_0, b_0, W_1, b_1, ...]` with each
/// weight matrix row-major `(out, in)`.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    pub params: Vec<f64>,
}

/// Number of parameters for the given layer widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(widths: &[usize]) -> Result<Self, NetError> {
        Self::with_params(widths, vec![0.0; param_count(widths)])
    }

    pub fn with_params(widths: &[usize], params: Vec<f64>) -> Result<Self, NetError> {
        if widths.len() < 2 {
            return Err(NetError::TooFewLayers);
        }
        if widths.iter().any(|w| *w == 0) {
            return Err(NetError::ZeroWidth);
        }
        let want = param_count(widths);
        if params.len() != want {
            return Err(NetError::ParamCount {
                got: params.len(),
                want,
            });
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
        })
    }

    /// Uniform Glorot initialization of the weights; biases start at zero.
    pub fn glorot<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(widths)?;
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in net.params[off..off + fan_in * fan_out].iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Evaluate the network.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.forward_cached(input)?.output().to_vec())
    }

    /// Evaluate and keep the per-layer activations for [`Mlp::vjp`].
    pub fn forward_cached(&self, input: &[f64]) -> Result<Cache, NetError> {
        if input.len() != self.in_dim() {
            return Err(NetError::InputLength {
                got: input.len(),
                want: self.in_dim(),
            });
        }
        let n_layers = self.widths.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let last = l == n_layers - 1;
            let prev = &acts[l];
            let mut next = vec![0.0; n_out];
            for (i, out) in next.iter_mut().enumerate() {
                let row = &self.params[off + i * n_in..off + (i + 1) * n_in];
                let mut z = self.params[off + n_in * n_out + i];
                for (w, a) in row.iter().zip(prev) {
                    z += w * a;
                }
                *out = if last { z } else { z.tanh() };
            }
            off += n_in * n_out + n_out;
            acts.push(next);
        }
        Ok(Cache { acts })
    }

    /// Reverse-mode vector-Jacobian product. Given the cache of a forward
    /// pass and a cotangent on the output, returns the gradient with respect
    /// to the input; when `dparams` is given, the parameter gradient of
    /// `<cotangent, output>` is accumulated into it.
    pub fn vjp(
        &self,
        cache: &Cache,
        cotangent: &[f64],
        mut dparams: Option<&mut [f64]>,
    ) -> Result<Vec<f64>, NetError> {
        if cotangent.len() != self.out_dim() {
            return Err(NetError::InputLength {
                got: cotangent.len(),
                want: self.out_dim(),
            });
        }
        if let Some(dp) = dparams.as_ref() {
            if dp.len() != self.params.len() {
                return Err(NetError::ParamCount {
                    got: dp.len(),
                    want: self.params.len(),
                });
            }
        }
        let n_layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut delta = cotangent.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let last = l == n_layers - 1;
            if !last {
                for (d, a) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            if let Some(dp) = dparams.as_deref_mut() {
                for i in 0..n_out {
                    let di = delta[i];
                    let row = &mut dp[off + i * n_in..off + (i + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(&cache.acts[l]) {
                        *g += di * a;
                    }
                    dp[off + n_in * n_out + i] += di;
                }
            }
            let mut prev = vec![0.0; n_in];
            for i in 0..n_out {
                let di = delta[i];
                let row = &self.params[off + i * n_in..off + (i + 1) * n_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += di * w;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[l]` the
/// post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct Cache {
    acts: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// A vector field on space-time built from an [`Mlp`] whose input is the
/// state followed by the time, `[x_1, ..., x_d, t]`, and whose output has
/// the space dimension.
#[derive(Debug, Clone)]
pub struct FieldNet {
    pub net: Mlp,
}

impl FieldNet {
    pub fn new(net: Mlp) -> Result<Self, NetError> {
        if net.in_dim() < 2 || net.out_dim() != net.in_dim() - 1 {
            return Err(NetError::InputLength {
                got: net.out_dim(),
                want: net.in_dim().saturating_sub(1),
            });
        }
        Ok(FieldNet { net })
    }

    pub fn space_dim(&self) -> usize {
        self.net.in_dim() - 1
    }

    fn stacked(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend_from_slice(x);
        input.push(t);
        input
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>, NetError> {
        self.net.forward(&self.stacked(x, t))
    }

    /// Exact spatial divergence via one vector-Jacobian product per space
    /// dimension.
    pub fn divergence(&self, x: &[f64], t: f64) -> Result<f64, NetError> {
        let cache = self.net.forward_cached(&self.stacked(x, t))?;
        let d = self.space_dim();
        let mut cot = vec![0.0; d];
        let mut div = 0.0;
        for i in 0..d {
            cot[i] = 1.0;
            let g = self.net.vjp(&cache, &cot, None)?;
            cot[i] = 0.0;
            div += g[i];
        }
        Ok(div)
    }

    /// Hutchinson estimate of the spatial divergence with `probes` Rademacher
    /// vectors: the average of `v' J v`.
    pub fn divergence_hutchinson<R: Rng>(
        &self,
        x: &[f64],
        t: f64,
        probes: usize,
        rng: &mut R,
    ) -> Result<f64, NetError> {
        let cache = self.net.forward_cached(&self.stacked(x, t))?;
        let d = self.space_dim();
        let mut acc = 0.0;
        let mut v = vec![0.0; d];
        for _ in 0..probes.max(1) {
            for vi in v.iter_mut() {
                *vi = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
            let g = self.net.vjp(&cache, &v, None)?;
            acc += g[..d].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(acc / probes.max(1) as f64)
    }

    /// Accumulate `scale * d(divergence)/d(params)` into `dparams` using a
    /// central difference in space: two vector-Jacobian products per space
    /// dimension at inputs shifted by `h` along each axis.
    pub fn divergence_param_grad(
        &self,
        x: &[f64],
        t: f64,
        h: f64,
        scale: f64,
        dparams: &mut [f64],
    ) -> Result<(), NetError> {
        let d = self.space_dim();
        let mut shifted = x.to_vec();
        let mut cot = vec![0.0; d];
        for i in 0..d {
            cot[i] = scale / (2.0 * h);
            shifted[i] = x[i] + h;
            let cache = self.net.forward_cached(&self.stacked(&shifted, t))?;
            self.net.vjp(&cache, &cot, Some(dparams))?;
            cot[i] = -scale / (2.0 * h);
            shifted[i] = x[i] - h;
            let cache = self.net.forward_cached(&self.stacked(&shifted, t))?;
            self.net.vjp(&cache, &cot, Some(dparams))?;
            cot[i] = 0.0;
            shifted[i] = x[i];
        }
        Ok(())
    }

    /// Accumulate the parameter gradient of the Hutchinson divergence
    /// estimate for a fixed probe vector `v`: a central difference of
    /// `<v, field(x +- h v)>`.
    pub fn hutchinson_param_grad(
        &self,
        x: &[f64],
        t: f64,
        v: &[f64],
        h: f64,
        scale: f64,
        dparams: &mut [f64],
    ) -> Result<(), NetError> {
        let mut shifted = x.to_vec();
        for (s, vi) in shifted.iter_mut().zip(v) {
            *s += h * vi;
        }
        let cot_plus: Vec<f64> = v.iter().map(|vi| vi * scale / (2.0 * h)).collect();
        let cache = self.net.forward_cached(&self.stacked(&shifted, t))?;
        self.net.vjp(&cache, &cot_plus, Some(dparams))?;
        for (s, vi) in shifted.iter_mut().zip(v) {
            *s -= 2.0 * h * vi;
        }
        let cot_minus: Vec<f64> = v.iter().map(|vi| -vi * scale / (2.0 * h)).collect();
        let cache = self.net.forward_cached(&self.stacked(&shifted, t))?;
        self.net.vjp(&cache, &cot_minus, Some(dparams))?;
        Ok(())
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step on `params` given the loss gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<f64>,
}

impl Ema {
    pub fn new(params: &[f64], decay: f64) -> Self {
        Ema {
            decay,
            shadow: params.to_vec(),
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = self.decay * *s + (1.0 - self.decay) * p;
        }
    }
}
