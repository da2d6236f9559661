//! Regret estimator: predicts a mechanism's regret from the bids alone.
//!
//! Two flavors share one parameter type: shared-backbone taps the frozen
//! mechanism trunk features, black-box reads the raw flattened bids. Both
//! are L1-trained against searched regret labels post hoc, with the
//! mechanism frozen, and clamp predictions at zero.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::auction::ValuationProfile;
use crate::error::{Error, Result};
use crate::mechanism::{Mechanism, MechanismParams};
use crate::nn::{adam_step_mut, AdamState, DenseNet, OutputActivation};
use crate::regret::{self, MisreportSearchConfig};
use crate::scalar::Scalar;
use crate::seeding::{self, subseed};

/// Where the estimator taps its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorMode {
    #[serde(rename = "shared-backbone")]
    SharedBackbone,
    #[serde(rename = "black-box")]
    BlackBox,
}

impl std::fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::SharedBackbone => write!(f, "shared-backbone"),
            Self::BlackBox => write!(f, "black-box"),
        }
    }
}

/// Width-1 linear-output network plus its mode tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams<T> {
    pub net: DenseNet<T>,
    pub mode: EstimatorMode,
}

/// Estimator fit hyperparameters; architecture mirrors the mechanism stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_hidden_layers: usize,
    pub hidden_size: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            n_hidden_layers: 5,
            hidden_size: 100,
        }
    }
}

impl<T: Scalar> EstimatorParams<T> {
    /// Fresh estimator for `mechanism`; shared-backbone mode requires the
    /// mechanism to expose a trunk.
    pub fn init(
        mechanism: &MechanismParams<T>,
        mode: EstimatorMode,
        cfg: &EstimatorConfig,
        seed: u64,
    ) -> Result<Self> {
        let input = match mode {
            EstimatorMode::SharedBackbone => mechanism.feature_width().ok_or_else(|| {
                Error::Config(
                    "shared-backbone estimator requires a mechanism with a shared trunk".into(),
                )
            })?,
            EstimatorMode::BlackBox => mechanism.input_width(),
        };
        let sizes: Vec<usize> = std::iter::once(input)
            .chain(std::iter::repeat(cfg.hidden_size).take(cfg.n_hidden_layers))
            .chain(std::iter::once(1))
            .collect();
        Ok(Self {
            net: DenseNet::init(&sizes, OutputActivation::Linear, seed),
            mode,
        })
    }
}

/// Maps flattened bids to the estimator's input space.
fn estimator_input<T: Scalar>(
    est: &EstimatorParams<T>,
    mechanism: &MechanismParams<T>,
    bids: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    match est.mode {
        EstimatorMode::SharedBackbone => mechanism.features_batch(bids),
        EstimatorMode::BlackBox => Ok(bids.to_owned()),
    }
}

/// Clamped regret predictions for a batch of flattened bid profiles.
pub fn predict_regret_batch<T: Scalar>(
    est: &EstimatorParams<T>,
    mechanism: &MechanismParams<T>,
    bids: ArrayView2<'_, T>,
) -> Result<Array1<T>> {
    let input = estimator_input(est, mechanism, bids)?;
    let cache = est.net.forward_batch(input.view())?;
    Ok(cache
        .output()
        .index_axis(Axis(1), 0)
        .mapv(|r| r.max(T::zero())))
}

/// Nonnegative regret estimate for one bid profile.
pub fn predict_regret<T: Scalar>(
    est: &EstimatorParams<T>,
    mechanism: &MechanismParams<T>,
    bids: &ValuationProfile<T>,
) -> Result<T> {
    let flat = bids.flatten();
    let out = predict_regret_batch(est, mechanism, flat.view().insert_axis(Axis(0)))?;
    Ok(out[0])
}

/// Per-profile max-regret labels via the batched misreport engine;
/// deterministic under `seed`.
pub fn label_regrets<T: Scalar>(
    mechanism: &MechanismParams<T>,
    data: &[ValuationProfile<T>],
    search: &MisreportSearchConfig,
    seed: u64,
) -> Result<Array1<T>> {
    let reports = regret::regret_batch(mechanism, data, search, seed)?;
    Ok(reports.iter().map(|r| r.max_regret).collect())
}

/// Label path for arbitrary black-box mechanisms (adapters included).
pub fn label_regrets_any<T: Scalar, M: Mechanism<T> + ?Sized>(
    mechanism: &M,
    data: &[ValuationProfile<T>],
    search: &MisreportSearchConfig,
    seed: u64,
) -> Result<Array1<T>> {
    data.iter()
        .enumerate()
        .map(|(p, profile)| {
            regret::regret(mechanism, profile, search, subseed(seed, &[p as u64]))
                .map(|r| r.max_regret)
        })
        .collect()
}

/// Adam-trained L1 regression of labels on estimator inputs; the mechanism
/// stays frozen in both modes. Returns the fitted estimator and the
/// per-epoch mean absolute training error.
pub fn train_estimator<T: Scalar>(
    mechanism: &MechanismParams<T>,
    data: &[ValuationProfile<T>],
    labels: &Array1<T>,
    mode: EstimatorMode,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<(EstimatorParams<T>, Vec<f64>)> {
    if data.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} profiles vs {} labels",
            data.len(),
            labels.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut est = EstimatorParams::init(mechanism, mode, cfg, subseed(seed, &[0]))?;
    let mut adam = AdamState::new(&est.net);
    let lr = T::from_f64_lossy(cfg.learning_rate);

    let mut flat = Array2::zeros((data.len(), mechanism.input_width()));
    for (p, profile) in data.iter().enumerate() {
        flat.row_mut(p).assign(&profile.flatten());
    }
    let inputs = estimator_input(&est, mechanism, flat.view())?;

    let batch = cfg.batch_size.max(1).min(data.len());
    let n_batches = data.len() / batch;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeding::rng_from(subseed(seed, &[1, epoch as u64])));
        let mut epoch_abs = 0.0;
        for b in 0..n_batches {
            let idx = &order[b * batch..(b + 1) * batch];
            let mut x = Array2::zeros((idx.len(), inputs.ncols()));
            let mut y = Array1::zeros(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&inputs.row(i));
                y[r] = labels[i];
            }
            let cache = est.net.forward_batch(x.view())?;
            let scale = T::one() / T::from_f64_lossy(idx.len() as f64);
            let mut d_out = Array2::zeros((idx.len(), 1));
            for r in 0..idx.len() {
                let diff = cache.output()[[r, 0]] - y[r];
                epoch_abs += diff.abs().to_f64_lossy();
                d_out[[r, 0]] = if diff > T::zero() {
                    scale
                } else if diff < T::zero() {
                    -scale
                } else {
                    T::zero()
                };
            }
            let grads = est.net.backward_batch(&cache, &d_out)?;
            adam_step_mut(&mut est.net, &grads, &mut adam, lr);
        }
        epoch_losses.push(epoch_abs / (n_batches * batch) as f64);
    }
    Ok((est, epoch_losses))
}
