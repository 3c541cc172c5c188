//! Small dense networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Layer `k` stores its weight matrix
//! row-major (`out x in`) followed by its bias vector, layers in order.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn fill(&mut self, value: f64) {
        self.0.fill(value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|p| *p *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, p| m.max(p.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    output: OutputActivation,
    params: ParameterVector,
    /// Start of each layer's weights in `params`.
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    layer_sizes: Vec<usize>,
    output: OutputActivation,
    params: ParameterVector,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        Mlp::from_parts(r.layer_sizes, r.output, r.params)
    }
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr {
            layer_sizes: m.layer_sizes,
            output: m.output,
            params: m.params,
        }
    }
}

/// Layer outputs from one forward pass, reused by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input; `acts[k]` the post-activation output of layer `k`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], |a| a.as_slice())
    }

    fn prepare(&mut self, sizes: &[usize]) {
        if self.acts.len() != sizes.len() || self.acts.iter().zip(sizes).any(|(a, &n)| a.len() != n) {
            self.acts = sizes.iter().map(|&n| vec![0.0; n]).collect();
        }
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "network needs input, at least one hidden layer and output, got sizes {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!("zero-width layer in {layer_sizes:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Hidden weights uniform in ±1/sqrt(fan_in), output weights uniform in
    /// ±3e-3, biases zero.
    pub fn new(layer_sizes: &[usize], output: OutputActivation, seed: u64) -> Result<Self> {
        Self::with_rng(layer_sizes, output, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng<R: Rng + ?Sized>(layer_sizes: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let mut m = Self::zeros(layer_sizes, output)?;
        let n_layers = m.n_layers();
        for k in 0..n_layers {
            let bound = if k + 1 == n_layers {
                3e-3
            } else {
                1.0 / (layer_sizes[k] as f64).sqrt()
            };
            let (w, _) = m.layer_mut(k);
            for x in w.iter_mut() {
                *x = rng.random_range(-bound..=bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(layer_sizes: &[usize], output: OutputActivation) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let n = Self::parameter_count(layer_sizes);
        Self::from_parts(layer_sizes.to_vec(), output, ParameterVector::zeros(n))
    }

    pub fn from_parts(layer_sizes: Vec<usize>, output: OutputActivation, params: ParameterVector) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let expected = Self::parameter_count(&layer_sizes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        let mut offsets = Vec::with_capacity(layer_sizes.len() - 1);
        let mut off = 0;
        for w in layer_sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        Ok(Self {
            layer_sizes,
            output,
            params,
            offsets,
        })
    }

    pub fn parameter_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn parameters(&self) -> &ParameterVector {
        &self.params
    }

    /// Replaces every parameter; the inverse of [`Mlp::parameters`].
    pub fn set_parameters(&mut self, params: ParameterVector) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        self.params = params;
        Ok(())
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layer_sizes == other.layer_sizes && self.output == other.output
    }

    /// Weights (row-major, `out x in`) and biases of layer `k`.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
        let off = self.offsets[k];
        let w = &self.params.0[off..off + n_in * n_out];
        let b = &self.params.0[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
        let off = self.offsets[k];
        let (w, rest) = self.params.0[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        (w, rest)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        Ok(cache.acts.pop().unwrap_or_default())
    }

    pub fn forward_cached<'c>(&self, x: &[f64], cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        self.check_input(x)?;
        cache.prepare(&self.layer_sizes);
        cache.acts[0].copy_from_slice(x);
        let n_layers = self.n_layers();
        for k in 0..n_layers {
            let (w, b) = self.layer(k);
            let n_in = self.layer_sizes[k];
            let (before, after) = cache.acts.split_at_mut(k + 1);
            let input = &before[k];
            let out = &mut after[0];
            for (i, o) in out.iter_mut().enumerate() {
                let row = &w[i * n_in..(i + 1) * n_in];
                let z = b[i] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                *o = if k + 1 < n_layers {
                    z.max(0.0)
                } else {
                    match self.output {
                        OutputActivation::Tanh => z.tanh(),
                        OutputActivation::Identity => z,
                    }
                };
            }
        }
        Ok(cache.output())
    }

    /// Which hidden units are active for input `x`, layer by layer.
    pub fn relu_pattern(&self, x: &[f64]) -> Result<Vec<bool>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        let hidden = &cache.acts[1..cache.acts.len() - 1];
        Ok(hidden.iter().flatten().map(|&a| a > 0.0).collect())
    }

    /// Gradients of `upstream · y(x)` with respect to parameters and input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(ParameterVector, Vec<f64>)> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        let mut grads = ParameterVector::zeros(self.params.len());
        let dx = self.backward_accumulate(&mut cache, upstream, &mut grads)?.to_vec();
        Ok((grads, dx))
    }

    /// Adds parameter gradients into `grads` for the pass stored in `cache`
    /// and returns the input gradient.
    pub fn backward_accumulate<'c>(
        &self,
        cache: &'c mut ForwardCache,
        upstream: &[f64],
        grads: &mut ParameterVector,
    ) -> Result<&'c [f64]> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        if cache.acts.len() != self.layer_sizes.len() {
            return Err(Error::InvalidConfig("backward called without a forward pass".into()));
        }
        let n_layers = self.n_layers();
        let ForwardCache { acts, delta, next_delta } = cache;
        delta.clear();
        let y = &acts[n_layers];
        delta.extend(upstream.iter().zip(y).map(|(u, y)| match self.output {
            OutputActivation::Tanh => u * (1.0 - y * y),
            OutputActivation::Identity => *u,
        }));
        for k in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let off = self.offsets[k];
            let w = &self.params.0[off..off + n_in * n_out];
            let input = &acts[k];
            let g = &mut grads.0[off..off + n_in * n_out + n_out];
            let (gw, gb) = g.split_at_mut(n_in * n_out);
            next_delta.clear();
            next_delta.resize(n_in, 0.0);
            for i in 0..n_out {
                let d = delta[i];
                gb[i] += d;
                if d == 0.0 {
                    continue;
                }
                let row = &w[i * n_in..(i + 1) * n_in];
                let grow = &mut gw[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    grow[j] += d * input[j];
                    next_delta[j] += row[j] * d;
                }
            }
            if k > 0 {
                for (nd, a) in next_delta.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *nd = 0.0;
                    }
                }
            }
            std::mem::swap(delta, next_delta);
        }
        Ok(delta.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_network(net: &Mlp) -> Self {
        Self::new(net.parameters().len())
    }
}

/// One bias-corrected descent step. Non-finite gradients leave both the
/// network and the optimizer untouched.
pub fn adam_step(net: &mut Mlp, grads: &ParameterVector, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = net.params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: grads.len().min(state.m.len()).min(state.v.len()),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be non-negative, got {lr}")));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for i in 0..n {
        let g = grads.0[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        net.params.0[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// `target <- tau * source + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, source: &Mlp, tau: f64) -> Result<()> {
    if !target.same_shape(source) {
        return Err(Error::DimensionMismatch {
            expected: target.params.len(),
            actual: source.params.len(),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau must lie in [0, 1], got {tau}")));
    }
    if tau == 1.0 {
        target.params.0.copy_from_slice(&source.params.0);
        return Ok(());
    }
    for (t, s) in target.params.0.iter_mut().zip(&source.params.0) {
        *t = tau * s + (1.0 - tau) * *t;
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub version: u32,
    pub network: Mlp,
    pub optimizer: AdamState,
    pub rng: ChaCha8Rng,
}

impl NetworkCheckpoint {
    pub fn new(network: Mlp, optimizer: AdamState, rng: ChaCha8Rng) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            network,
            optimizer,
            rng,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = load_json(path)?;
        check_version(c.version, path)?;
        Ok(c)
    }
}

pub(crate) fn check_version(version: u32, path: &Path) -> Result<()> {
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    Ok(())
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    /// Finite-difference check with hidden weights scaled up so the output
    /// layer is not negligible.
    fn max_fd_error(net: &Mlp, x: &[f64], up: &[f64]) -> f64 {
        let h = 1e-6;
        let (g, dx) = net.backward(x, up).unwrap();
        let f = |n: &Mlp, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(up).map(|(a, b)| a * b).sum() };
        let pattern = net.relu_pattern(x).unwrap();
        let rel = |a: f64, n: f64| {
            let d = (a - n).abs();
            if d <= 1e-10 { 0.0 } else { d / a.abs().max(n.abs()) }
        };
        let mut worst = 0.0_f64;
        for i in 0..g.len() {
            let mut p = net.clone();
            let base = p.params.0[i];
            p.params.0[i] = base + h;
            let fp = f(&p, x);
            let pp = p.relu_pattern(x).unwrap();
            p.params.0[i] = base - h;
            let fm = f(&p, x);
            if pp != pattern || p.relu_pattern(x).unwrap() != pattern {
                continue;
            }
            worst = worst.max(rel(g.0[i], (fp - fm) / (2.0 * h)));
        }
        for j in 0..x.len() {
            let mut xp = x.to_vec();
            xp[j] += h;
            let mut xm = x.to_vec();
            xm[j] -= h;
            if net.relu_pattern(&xp).unwrap() != pattern || net.relu_pattern(&xm).unwrap() != pattern {
                continue;
            }
            worst = worst.max(rel(dx[j], (f(net, &xp) - f(net, &xm)) / (2.0 * h)));
        }
        worst
    }

    #[test]
    fn actor_parameter_count() {
        for obs in [2, 61] {
            let net = Mlp::new(&[obs, 20, 20, 1], OutputActivation::Tanh, 0).unwrap();
            assert_eq!(net.parameters().len(), obs * 20 + 20 + 20 * 20 + 20 + 20 + 1);
        }
        let critic = Mlp::new(&[3, 100, 75, 1], OutputActivation::Identity, 0).unwrap();
        assert_eq!(critic.parameters().len(), 3 * 100 + 100 + 100 * 75 + 75 + 75 + 1);
    }

    #[test]
    fn init_ranges_and_determinism() {
        let a = Mlp::new(&[4, 20, 20, 1], OutputActivation::Tanh, 9).unwrap();
        let b = Mlp::new(&[4, 20, 20, 1], OutputActivation::Tanh, 9).unwrap();
        let c = Mlp::new(&[4, 20, 20, 1], OutputActivation::Tanh, 10).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
        let (w0, b0) = a.layer(0);
        assert!(w0.iter().all(|w| w.abs() <= 0.5));
        assert!(b0.iter().all(|&b| b == 0.0));
        let (w2, b2) = a.layer(2);
        assert!(w2.iter().all(|w| w.abs() <= 3e-3));
        assert_eq!(b2, &[0.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Mlp::new(&[2, 1], OutputActivation::Tanh, 0).is_err());
        assert!(Mlp::new(&[2, 0, 1], OutputActivation::Tanh, 0).is_err());
        assert!(Mlp::new(&[], OutputActivation::Tanh, 0).is_err());
        let net = Mlp::new(&[2, 3, 1], OutputActivation::Tanh, 0).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
        assert!(net.backward(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_weights_give_last_bias() {
        let mut net = Mlp::zeros(&[3, 5, 4, 2], OutputActivation::Identity).unwrap();
        net.layer_mut(2).1.copy_from_slice(&[0.25, -1.5]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn affine_arithmetic() {
        // 1 -> 1 -> 1 network with an identity-like hidden unit on positive input
        let net = Mlp::from_parts(
            vec![1, 1, 1],
            OutputActivation::Identity,
            ParameterVector(vec![2.0, 1.0, 1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
        let (g, dx) = net.backward(&[3.0], &[1.0]).unwrap();
        // dW1 = x, db1 = 1, dW2 = hidden, db2 = 1
        assert_eq!(g.0, vec![3.0, 1.0, 7.0, 1.0]);
        assert_eq!(dx, vec![2.0]);
    }

    #[test]
    fn tanh_head_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 20, 20, 1], OutputActivation::Tanh, 4).unwrap();
        // large output weights push the pre-activation far into saturation
        net.layer_mut(2).0.iter_mut().for_each(|w| *w *= 1e4);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-100.0..100.0)).collect();
            let y = net.forward(&x).unwrap()[0];
            assert!((-1.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new(&[3, 8, 8, 2], OutputActivation::Tanh, 2).unwrap();
        let (g, dx) = net.backward(&[0.3, -0.2, 1.0], &[0.0, 0.0]).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (k, sizes) in [[2usize, 20, 20, 1], [3, 100, 75, 1], [5, 7, 3, 2]].iter().enumerate() {
            for trial in 0..5 {
                let out = if k == 1 { OutputActivation::Identity } else { OutputActivation::Tanh };
                let mut net = Mlp::new(sizes, out, trial).unwrap();
                net.layer_mut(2).0.iter_mut().for_each(|w| *w *= 100.0);
                let x = random_input(&mut rng, sizes[0]);
                let up: Vec<f64> = (0..sizes[3]).map(|_| rng.random_range(-1.0..1.0)).collect();
                let err = max_fd_error(&net, &x, &up);
                assert!(err < 1e-5, "{sizes:?} trial {trial}: {err}");
            }
        }
    }

    #[test]
    fn backward_accumulates() {
        let net = Mlp::new(&[2, 6, 4, 1], OutputActivation::Tanh, 8).unwrap();
        let (g1, _) = net.backward(&[0.5, 0.1], &[1.0]).unwrap();
        let (g2, _) = net.backward(&[-0.4, 0.9], &[-2.0]).unwrap();
        let mut acc = ParameterVector::zeros(g1.len());
        let mut cache = ForwardCache::default();
        net.forward_cached(&[0.5, 0.1], &mut cache).unwrap();
        net.backward_accumulate(&mut cache, &[1.0], &mut acc).unwrap();
        net.forward_cached(&[-0.4, 0.9], &mut cache).unwrap();
        net.backward_accumulate(&mut cache, &[-2.0], &mut acc).unwrap();
        for i in 0..acc.len() {
            assert!((acc.0[i] - (g1.0[i] + g2.0[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_scalar_hand_step() {
        let mut net = Mlp::zeros(&[1, 1, 1], OutputActivation::Identity).unwrap();
        let mut state = AdamState::for_network(&net);
        let grads = ParameterVector(vec![1.0, 0.0, 0.0, 0.0]);
        adam_step(&mut net, &grads, &mut state, 1e-3).unwrap();
        // m = 0.1, v = 0.001, both bias corrections give exactly 1
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = -1e-3 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((net.parameters().0[0] - expected).abs() < 1e-18);
        assert!((expected + 9.9999999e-4).abs() < 1e-11);
        assert_eq!(&net.parameters().0[1..], &[0.0, 0.0, 0.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut net = Mlp::new(&[2, 4, 1], OutputActivation::Tanh, 1).unwrap();
        let before = net.clone();
        let mut state = AdamState::for_network(&net);
        adam_step(&mut net, &ParameterVector::zeros(before.parameters().len()), &mut state, 1e-3).unwrap();
        assert_eq!(net, before);
        let g = ParameterVector(vec![0.5; before.parameters().len()]);
        adam_step(&mut net, &g, &mut state, 0.0).unwrap();
        assert_eq!(net, before);
        assert!(state.m.iter().all(|&m| m != 0.0));
        assert_eq!(state.step, 2);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = Mlp::new(&[2, 4, 1], OutputActivation::Tanh, 1).unwrap();
        let before = net.clone();
        let mut state = AdamState::for_network(&net);
        let mut g = ParameterVector::zeros(before.parameters().len());
        g.0[3] = f64::NAN;
        assert!(matches!(adam_step(&mut net, &g, &mut state, 1e-3), Err(Error::NonFinite(_))));
        assert_eq!(net, before);
        assert_eq!(state, AdamState::for_network(&before));
    }

    #[test]
    fn soft_update_endpoints_and_geometry() {
        let src = Mlp::new(&[2, 5, 1], OutputActivation::Tanh, 1).unwrap();
        let init = Mlp::new(&[2, 5, 1], OutputActivation::Tanh, 2).unwrap();
        let mut t = init.clone();
        soft_update(&mut t, &src, 0.0).unwrap();
        assert_eq!(t, init);
        soft_update(&mut t, &src, 1.0).unwrap();
        assert_eq!(t, src);

        let tau = 1e-3;
        let mut t = init.clone();
        let k = 500;
        for _ in 0..k {
            soft_update(&mut t, &src, tau).unwrap();
        }
        let factor = (1.0 - tau).powi(k);
        for i in 0..t.parameters().len() {
            let expected = factor * (init.params.0[i] - src.params.0[i]);
            let got = t.params.0[i] - src.params.0[i];
            assert!((got - expected).abs() <= 1e-12 * init.params.0[i].abs().max(src.params.0[i].abs()).max(1e-3));
        }
        assert!(soft_update(&mut t, &src, 1.5).is_err());
        let other = Mlp::new(&[3, 5, 1], OutputActivation::Tanh, 2).unwrap();
        assert!(soft_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = Mlp::new(&[61, 20, 20, 1], OutputActivation::Tanh, 5).unwrap();
        let mut opt = AdamState::for_network(&net);
        let mut n2 = net.clone();
        let g = net.backward(&vec![0.1; 61], &[1.0]).unwrap().0;
        adam_step(&mut n2, &g, &mut opt, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.random();
        let ck = NetworkCheckpoint::new(n2, opt, rng);
        ck.save(&path).unwrap();
        let back = NetworkCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut r1 = ck.rng.clone();
        let mut r2 = back.rng.clone();
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());

        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":99");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(NetworkCheckpoint::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn corrupt_parameter_count_is_rejected() {
        let net = Mlp::new(&[2, 3, 1], OutputActivation::Identity, 0).unwrap();
        let mut v: serde_json::Value = serde_json::to_value(&net).unwrap();
        v["params"].as_array_mut().unwrap().pop();
        assert!(serde_json::from_value::<Mlp>(v).is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(seed in any::<u64>(), hidden in 1usize..12, obs in 1usize..8) {
            let net = Mlp::new(&[obs, hidden, hidden, 1], OutputActivation::Tanh, seed).unwrap();
            let flat = net.parameters().clone();
            let mut other = Mlp::zeros(&[obs, hidden, hidden, 1], OutputActivation::Tanh).unwrap();
            other.set_parameters(flat).unwrap();
            prop_assert_eq!(other, net);
        }

        #[test]
        fn forward_is_pure(seed in any::<u64>(), x in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let net = Mlp::new(&[3, 10, 10, 2], OutputActivation::Identity, seed).unwrap();
            let a = net.forward(&x).unwrap();
            let b = net.forward(&x).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn frozen_source_converges_geometrically(tau in 0.0f64..=1.0, k in 0i32..50) {
            let src = Mlp::new(&[1, 2, 1], OutputActivation::Identity, 1).unwrap();
            let init = Mlp::new(&[1, 2, 1], OutputActivation::Identity, 2).unwrap();
            let mut t = init.clone();
            for _ in 0..k {
                soft_update(&mut t, &src, tau).unwrap();
            }
            let f = (1.0 - tau).powi(k);
            for i in 0..t.parameters().len() {
                let expected = f * (init.params.0[i] - src.params.0[i]);
                prop_assert!((t.params.0[i] - src.params.0[i] - expected).abs() < 1e-12);
            }
        }
    }
}
