//! Minimal dense feedforward engine: explicit forward, reverse-mode
//! gradients for both parameters and inputs, and Adam updates.
//!
//! Hidden layers are ReLU; the output activation is configurable. All hot
//! paths are batched (one matrix product per layer for a whole batch of
//! inputs) so they stay on ndarray's gemm fast path.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding;

/// Output-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "sigmoid")]
    Sigmoid,
    /// Output interpreted as a `rows x cols` matrix stored row-major;
    /// softmax is taken over the rows of each column (max-subtracted).
    #[serde(rename = "column-softmax")]
    ColumnSoftmax { rows: usize, cols: usize },
}

/// Dense feedforward network with ReLU hidden layers.
///
/// Weights are stored `(fan_out, fan_in)`; a forward pass over a batch
/// `X: (B, in)` computes `relu(X W^T + b)` layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet<T> {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
    pub output_activation: OutputActivation,
}

/// Activation record from a forward pass, sufficient for one backward pass.
#[derive(Clone, Debug)]
pub struct BatchCache<T> {
    input: Array2<T>,
    /// Post-activation outputs per layer; the last entry is the network output.
    post: Vec<Array2<T>>,
}

impl<T: Scalar> BatchCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.post.last().expect("cache from a network with layers")
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// ReLU on/off pattern of every hidden unit, used for kink detection.
    fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.post.len() - 1;
        self.post[..hidden]
            .iter()
            .flat_map(|a| a.iter().map(|&x| x > T::zero()))
            .collect()
    }
}

/// Per-parameter partials plus the gradient with respect to the input batch.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub d_weights: Vec<Array2<T>>,
    pub d_biases: Vec<Array1<T>>,
    pub input_grad: Array2<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &DenseNet<T>, batch: usize) -> Self {
        Self {
            d_weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            d_biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            input_grad: Array2::zeros((batch, net.layer_sizes[0])),
        }
    }

    /// Accumulates another gradient of identical shape.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            *a += b;
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in self.d_weights.iter_mut() {
            a.mapv_inplace(|x| x * factor);
        }
        for a in self.d_biases.iter_mut() {
            a.mapv_inplace(|x| x * factor);
        }
    }
}

fn relu_backward_inplace<T: Scalar>(dz: &mut Array2<T>, post: &Array2<T>) {
    ndarray::Zip::from(dz).and(post).for_each(|d, &a| {
        if a <= T::zero() {
            *d = T::zero();
        }
    });
}

fn column_softmax_inplace<T: Scalar>(z: &mut Array2<T>, rows: usize, cols: usize) {
    for mut sample in z.rows_mut() {
        for j in 0..cols {
            let mut max = T::neg_infinity();
            for r in 0..rows {
                max = max.max(sample[r * cols + j]);
            }
            let mut sum = T::zero();
            for r in 0..rows {
                let e = (sample[r * cols + j] - max).exp();
                sample[r * cols + j] = e;
                sum += e;
            }
            for r in 0..rows {
                sample[r * cols + j] /= sum;
            }
        }
    }
}

fn column_softmax_backward<T: Scalar>(
    dy: &Array2<T>,
    y: &Array2<T>,
    rows: usize,
    cols: usize,
) -> Array2<T> {
    let mut dz = Array2::zeros(dy.dim());
    for s in 0..dy.nrows() {
        for j in 0..cols {
            let mut dot = T::zero();
            for r in 0..rows {
                let k = r * cols + j;
                dot += dy[[s, k]] * y[[s, k]];
            }
            for r in 0..rows {
                let k = r * cols + j;
                dz[[s, k]] = y[[s, k]] * (dy[[s, k]] - dot);
            }
        }
    }
    dz
}

impl<T: Scalar> DenseNet<T> {
    /// Fan-in-scaled uniform initialization (weights U(-sqrt(1/fan_in),
    /// sqrt(1/fan_in)), zero biases), deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], output_activation: OutputActivation, seed: u64) -> Self {
        assert!(layer_sizes.len() >= 2, "need an input and an output layer");
        if let OutputActivation::ColumnSoftmax { rows, cols } = output_activation {
            assert_eq!(
                rows * cols,
                *layer_sizes.last().unwrap(),
                "softmax grid must match the output width"
            );
        }
        let mut rng = seeding::rng_from(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                T::from_f64_lossy(rng.gen_range(-bound..bound))
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            output_activation,
        }
    }

    /// All-zero parameters; useful for closed-form test cases.
    pub fn zeros(layer_sizes: &[usize], output_activation: OutputActivation) -> Self {
        let mut net = Self::init(layer_sizes, output_activation, 0);
        for w in net.weights.iter_mut() {
            w.fill(T::zero());
        }
        net
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::DimensionMismatch(format!(
                "network expects input width {}, got {}",
                self.input_width(),
                width
            )));
        }
        Ok(())
    }

    /// Batched forward pass over `input: (B, in)`.
    pub fn forward_batch(&self, input: ArrayView2<'_, T>) -> Result<BatchCache<T>> {
        self.check_input(input.ncols())?;
        let n_layers = self.n_layers();
        let input = input.to_owned();
        let mut post: Vec<Array2<T>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let x = if l == 0 { input.view() } else { post[l - 1].view() };
            let mut z = x.dot(&self.weights[l].t());
            z += &self.biases[l];
            if l + 1 < n_layers {
                z.mapv_inplace(|v| v.max(T::zero()));
            } else {
                match self.output_activation {
                    OutputActivation::Linear => {}
                    OutputActivation::Relu => z.mapv_inplace(|v| v.max(T::zero())),
                    OutputActivation::Sigmoid => {
                        z.mapv_inplace(|v| T::one() / (T::one() + (-v).exp()))
                    }
                    OutputActivation::ColumnSoftmax { rows, cols } => {
                        column_softmax_inplace(&mut z, rows, cols)
                    }
                }
            }
            post.push(z);
        }
        Ok(BatchCache { input, post })
    }

    /// Single-input forward pass; returns the output and the cache.
    pub fn forward(&self, input: ArrayView1<'_, T>) -> Result<(Array1<T>, BatchCache<T>)> {
        let x = input.insert_axis(Axis(0));
        let cache = self.forward_batch(x)?;
        let out = cache.output().row(0).to_owned();
        Ok((out, cache))
    }

    fn output_backward(&self, cache: &BatchCache<T>, output_grad: &Array2<T>) -> Array2<T> {
        let y = cache.output();
        match self.output_activation {
            OutputActivation::Linear => output_grad.clone(),
            OutputActivation::Relu => {
                let mut dz = output_grad.clone();
                relu_backward_inplace(&mut dz, y);
                dz
            }
            OutputActivation::Sigmoid => {
                let mut dz = output_grad.clone();
                ndarray::Zip::from(&mut dz)
                    .and(y)
                    .for_each(|d, &s| *d = *d * s * (T::one() - s));
                dz
            }
            OutputActivation::ColumnSoftmax { rows, cols } => {
                column_softmax_backward(output_grad, y, rows, cols)
            }
        }
    }

    fn check_cache(&self, cache: &BatchCache<T>, output_grad: &Array2<T>) -> Result<()> {
        if cache.post.len() != self.n_layers()
            || cache.input.ncols() != self.input_width()
            || cache.output().dim() != output_grad.dim()
        {
            return Err(Error::DimensionMismatch(
                "cache does not match this network and cotangent".into(),
            ));
        }
        Ok(())
    }

    /// Exact reverse-mode gradients of `<output, output_grad>` with respect
    /// to all parameters and the input batch.
    pub fn backward_batch(
        &self,
        cache: &BatchCache<T>,
        output_grad: &Array2<T>,
    ) -> Result<Gradients<T>> {
        self.check_cache(cache, output_grad)?;
        let n_layers = self.n_layers();
        let mut d_weights = vec![Array2::zeros((0, 0)); n_layers];
        let mut d_biases = vec![Array1::zeros(0); n_layers];
        let mut dz = self.output_backward(cache, output_grad);
        let mut input_grad = Array2::zeros((0, 0));
        for l in (0..n_layers).rev() {
            let x = if l == 0 {
                &cache.input
            } else {
                &cache.post[l - 1]
            };
            d_weights[l] = dz.t().dot(x);
            d_biases[l] = dz.sum_axis(Axis(0));
            let dx = dz.dot(&self.weights[l]);
            if l == 0 {
                input_grad = dx;
            } else {
                dz = dx;
                relu_backward_inplace(&mut dz, &cache.post[l - 1]);
            }
        }
        Ok(Gradients {
            d_weights,
            d_biases,
            input_grad,
        })
    }

    /// Gradient with respect to the input batch only (skips the parameter
    /// partials); the workhorse of the misreport inner loop.
    pub fn input_grad_batch(
        &self,
        cache: &BatchCache<T>,
        output_grad: &Array2<T>,
    ) -> Result<Array2<T>> {
        self.check_cache(cache, output_grad)?;
        let n_layers = self.n_layers();
        let mut dz = self.output_backward(cache, output_grad);
        for l in (1..n_layers).rev() {
            dz = dz.dot(&self.weights[l]);
            relu_backward_inplace(&mut dz, &cache.post[l - 1]);
        }
        Ok(dz.dot(&self.weights[0]))
    }

    /// Single-input backward pass.
    pub fn backward(
        &self,
        cache: &BatchCache<T>,
        output_grad: ArrayView1<'_, T>,
    ) -> Result<Gradients<T>> {
        let g = output_grad.insert_axis(Axis(0)).to_owned();
        self.backward_batch(cache, &g)
    }
}

/// Adam moment estimates; shapes mirror the network parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m_weights: Vec<Array2<T>>,
    pub v_weights: Vec<Array2<T>>,
    pub m_biases: Vec<Array1<T>>,
    pub v_biases: Vec<Array1<T>>,
    pub step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon_adam: T,
}

impl<T: Scalar> AdamState<T> {
    /// Conventional defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(net: &DenseNet<T>) -> Self {
        Self {
            m_weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            step_count: 0,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            epsilon_adam: T::from_f64_lossy(1e-8),
        }
    }
}

fn adam_update<T: Scalar, D: ndarray::Dimension>(
    param: &mut ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
    m: &mut ndarray::Array<T, D>,
    v: &mut ndarray::Array<T, D>,
    beta1: T,
    beta2: T,
    eps: T,
    step_size_m: T,
    inv_bias2: T,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = beta1 * *m + (T::one() - beta1) * g;
            *v = beta2 * *v + (T::one() - beta2) * g * g;
            let v_hat = *v * inv_bias2;
            *p = *p - step_size_m * *m / (v_hat.sqrt() + eps);
        });
}

/// In-place bias-corrected Adam update; increments `state.step_count`.
pub fn adam_step_mut<T: Scalar>(
    net: &mut DenseNet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: T,
) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = T::one() - state.beta1.powi(t);
    let bias2 = T::one() - state.beta2.powi(t);
    // Fold the first-moment bias correction into the step size.
    let step_size_m = lr / bias1;
    let inv_bias2 = T::one() / bias2;
    for l in 0..net.weights.len() {
        adam_update(
            &mut net.weights[l],
            &grads.d_weights[l],
            &mut state.m_weights[l],
            &mut state.v_weights[l],
            state.beta1,
            state.beta2,
            state.epsilon_adam,
            step_size_m,
            inv_bias2,
        );
        adam_update(
            &mut net.biases[l],
            &grads.d_biases[l],
            &mut state.m_biases[l],
            &mut state.v_biases[l],
            state.beta1,
            state.beta2,
            state.epsilon_adam,
            step_size_m,
            inv_bias2,
        );
    }
}

/// Pure Adam step: returns the updated network and state.
pub fn adam_step<T: Scalar>(
    mut net: DenseNet<T>,
    grads: &Gradients<T>,
    mut state: AdamState<T>,
    lr: T,
) -> (DenseNet<T>, AdamState<T>) {
    adam_step_mut(&mut net, grads, &mut state, lr);
    (net, state)
}

/// Outcome of a finite-difference gradient audit.
#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffReport<T> {
    /// Max relative error over all checked coordinates.
    pub max_rel_error: T,
    pub checked: usize,
    /// Coordinates skipped because the probe straddled a ReLU kink.
    pub skipped: usize,
}

/// Compares `backward` against central finite differences of the scalarized
/// output `<f(x), 1>` over every parameter and input coordinate.
///
/// Coordinates whose `+h`/`-h` probes land on different sides of a ReLU kink
/// are flagged and skipped rather than failed.
pub fn finite_diff_check<T: Scalar>(
    net: &DenseNet<T>,
    input: ArrayView1<'_, T>,
    h: T,
) -> Result<FiniteDiffReport<T>> {
    assert!(h > T::zero());
    let ones = Array1::from_elem(net.output_width(), T::one());
    let (_, cache) = net.forward(input)?;
    let analytic = net.backward(&cache, ones.view())?;

    let scalar_out = |net: &DenseNet<T>, x: ArrayView1<'_, T>| -> Result<(T, Vec<bool>)> {
        let (out, cache) = net.forward(x)?;
        Ok((out.iter().cloned().sum(), cache.relu_pattern()))
    };

    let mut max_rel = T::zero();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut probe = |exact: T, plus: (T, Vec<bool>), minus: (T, Vec<bool>)| {
        if plus.1 != minus.1 {
            skipped += 1;
            return;
        }
        let fd = (plus.0 - minus.0) / (h + h);
        let denom = exact.abs().max(fd.abs()).max(T::from_f64_lossy(1e-4));
        max_rel = max_rel.max((exact - fd).abs() / denom);
        checked += 1;
    };

    // Input coordinates.
    let mut x = input.to_owned();
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let plus = scalar_out(net, x.view())?;
        x[k] = orig - h;
        let minus = scalar_out(net, x.view())?;
        x[k] = orig;
        probe(analytic.input_grad[[0, k]], plus, minus);
    }

    // Parameter coordinates.
    let mut net = net.clone();
    for l in 0..net.n_layers() {
        for idx in 0..net.weights[l].len() {
            let (rows, cols) = (net.weights[l].nrows(), net.weights[l].ncols());
            let ij = (idx / cols, idx % cols);
            debug_assert!(ij.0 < rows);
            let orig = net.weights[l][ij];
            net.weights[l][ij] = orig + h;
            let plus = scalar_out(&net, input)?;
            net.weights[l][ij] = orig - h;
            let minus = scalar_out(&net, input)?;
            net.weights[l][ij] = orig;
            probe(analytic.d_weights[l][ij], plus, minus);
        }
        for k in 0..net.biases[l].len() {
            let orig = net.biases[l][k];
            net.biases[l][k] = orig + h;
            let plus = scalar_out(&net, input)?;
            net.biases[l][k] = orig - h;
            let minus = scalar_out(&net, input)?;
            net.biases[l][k] = orig;
            probe(analytic.d_biases[l][k], plus, minus);
        }
    }

    Ok(FiniteDiffReport {
        max_rel_error: max_rel,
        checked,
        skipped,
    })
}
