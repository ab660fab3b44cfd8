//! Dense feed-forward networks and the Adam optimizer.
//!
//! Networks use tanh on every hidden layer and an identity output layer.
//! All parameters live in one flat `Vec<f64>`; layer `l` with `n_in` inputs
//! and `n_out` outputs stores its weights row-major as an `(n_in, n_out)`
//! matrix, immediately followed by its `n_out` biases. Gradients, Adam
//! moments and checkpoints share that layout.
//!
//! Batches are row-major `(batch, features)` matrices. `backward` sums the
//! per-row gradients; callers that optimise a mean loss fold the `1/batch`
//! factor into the upstream gradient.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid layer sizes {0:?}: need at least two positive sizes")]
    InvalidLayerSizes(Vec<usize>),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Hidden-layer activation. Same function as `f64::tanh` to within a few
/// ulps in absolute terms, but built on `exp`, which is several times
/// cheaper than the libm `tanh` and dominates training time otherwise.
#[inline]
pub fn tanh(x: f64) -> f64 {
    if x.abs() > 19.0 {
        return x.signum();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Multi-layer perceptron with tanh hidden activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer for one batch, input included.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations
            .last()
            .expect("cache holds at least the input")
    }
}

/// Number of parameters for the given layer sizes.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(NnError::InvalidLayerSizes(layer_sizes.to_vec()));
    }
    Ok(())
}

impl Mlp {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes)?;
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            for p in &mut net.params[offset..offset + n_in * n_out] {
                *p = rng.random_range(-bound..=bound);
            }
            offset += (n_in + 1) * n_out;
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; param_count(layer_sizes)],
        })
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if params.len() != expected {
            return Err(NnError::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// (weight offset, bias offset, n_in, n_out) of layer `l`.
    fn layout(&self, l: usize) -> (usize, usize, usize, usize) {
        let offset = param_count(&self.layer_sizes[..=l]);
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (offset, offset + n_in * n_out, n_in, n_out)
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, b, n_in, n_out) = self.layout(l);
        ArrayView2::from_shape((n_in, n_out), &self.params[w..b]).unwrap()
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b, _, n_out) = self.layout(l);
        ArrayView1::from(&self.params[b..b + n_out])
    }

    fn check_batch(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.ncols(),
            });
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        // Small nets are evaluated one row at a time in rollouts; a plain
        // loop avoids the matrix machinery for this case.
        let mut act = input.to_vec();
        let mut next = Vec::new();
        for l in 0..self.num_layers() {
            let (w_off, b_off, n_in, n_out) = self.layout(l);
            next.clear();
            next.extend_from_slice(&self.params[b_off..b_off + n_out]);
            for (i, &x) in act.iter().enumerate().take(n_in) {
                let row = &self.params[w_off + i * n_out..w_off + (i + 1) * n_out];
                for (acc, &w) in next.iter_mut().zip(row) {
                    *acc += x * w;
                }
            }
            if l + 1 < self.num_layers() {
                next.iter_mut().for_each(|z| *z = tanh(*z));
            }
            std::mem::swap(&mut act, &mut next);
        }
        Ok(act)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&input)?;
        let mut act = input.to_owned();
        for l in 0..self.num_layers() {
            act = self.layer_forward(l, act.view());
        }
        Ok(act)
    }

    fn layer_forward(&self, l: usize, act: ArrayView2<f64>) -> Array2<f64> {
        let mut z = act.dot(&self.weights(l));
        z += &self.bias(l);
        if l + 1 < self.num_layers() {
            z.mapv_inplace(tanh);
        }
        z
    }

    /// Forward pass that keeps every activation for a later `backward`.
    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_batch(&input)?;
        let mut activations = Vec::with_capacity(self.layer_sizes.len());
        activations.push(input.to_owned());
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, activations[l].view());
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradient of `sum_rows(upstream . output)` with respect to the
    /// parameters, plus the gradient with respect to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(NnError::DimensionMismatch {
                expected: out.len(),
                actual: upstream.len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            let (w_off, b_off, n_in, n_out) = self.layout(l);
            let a_prev = &cache.activations[l];
            {
                let (w_grad, b_grad) = grad[w_off..b_off + n_out].split_at_mut(n_in * n_out);
                let mut w_grad = ArrayViewMut2::from_shape((n_in, n_out), w_grad).unwrap();
                general_mat_mul(1.0, &a_prev.t(), &delta, 0.0, &mut w_grad);
                for (g, s) in b_grad.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            let mut d_prev = delta.dot(&self.weights(l).t());
            if l > 0 {
                d_prev.zip_mut_with(a_prev, |d, &a| *d *= 1.0 - a * a);
            }
            delta = d_prev;
        }
        Ok((grad, delta))
    }

    /// `self <- (1 - tau) * self + tau * source`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if source.layer_sizes != self.layer_sizes {
            return Err(NnError::DimensionMismatch {
                expected: self.params.len(),
                actual: source.params.len(),
            });
        }
        for (t, &s) in self.params.iter_mut().zip(&source.params) {
            *t += tau * (s - *t);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mlp serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Mlp = serde_json::from_str(text).map_err(|e| NnError::Malformed(e.to_string()))?;
        Self::from_params(&raw.layer_sizes, raw.params)
    }

    /// Binary checkpoint: magic `AOPN`, `u32` layer count, `u32` sizes, then
    /// the flat parameters as `f64`, all little-endian.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &n in &self.layer_sizes {
            out.write_all(&(n as u32).to_le_bytes())?;
        }
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Malformed("bad magic".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let n_sizes = u32::from_le_bytes(word) as usize;
        if n_sizes > 64 {
            return Err(NnError::Malformed(format!("{n_sizes} layers")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            input.read_exact(&mut word)?;
            sizes.push(u32::from_le_bytes(word) as usize);
        }
        validate_sizes(&sizes)?;
        let mut params = vec![0.0; param_count(&sizes)];
        let mut buf = [0u8; 8];
        for p in &mut params {
            input.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Self::from_params(&sizes, params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AOPN";

/// Adam optimizer state for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
        }
    }

    pub fn for_net(net: &Mlp, learning_rate: f64) -> Self {
        Self::new(net.param_count(), learning_rate)
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }
}

/// One bias-corrected Adam update. Parameters are left untouched when any
/// gradient entry is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NnError::DimensionMismatch {
            expected: state.first_moment.len(),
            actual: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient { index });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let step = state.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
    let eps_hat = state.eps * (1.0 - b2.powi(t)).sqrt();
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step * *m / (v.sqrt() + eps_hat);
    }
    Ok(())
}

/// Mean-squared-error regression step: returns the loss before the update.
pub fn regression_step(
    net: &mut Mlp,
    adam: &mut AdamState,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<f64> {
    let cache = net.forward_cached(inputs)?;
    let pred = cache.output();
    if pred.dim() != targets.dim() {
        return Err(NnError::DimensionMismatch {
            expected: pred.len(),
            actual: targets.len(),
        });
    }
    let n = pred.len() as f64;
    let diff = pred - &targets;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let upstream = diff * (2.0 / n);
    let (grad, _) = net.backward(&cache, upstream.view())?;
    adam_step(net.params_mut(), &grad, adam)?;
    Ok(loss)
}
