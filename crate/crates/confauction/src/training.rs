//! Augmented-Lagrangian training of the mechanism network.
//!
//! Training maximizes expected revenue subject to the per-bidder zero-regret
//! constraints by minimizing
//! `mean[-sum_i p_i + sum_i lambda_i * rgt_i + (rho/2) * sum_i rgt_i^2]`,
//! with regrets from the train-time misreport search. Misreport points are
//! held fixed during the outer gradient (envelope treatment); the multipliers
//! follow the classic ascent schedule `lambda_i += rho * mean rgt_i`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::auction::{AuctionConfig, ValuationProfile};
use crate::error::{Error, Result};
use crate::mechanism::{ArchitectureSpec, MechanismParams};
use crate::nn::{adam_step_mut, AdamState, Gradients};
use crate::regret::{misreport_search_batch_with_starts, MisreportSearchConfig};
use crate::scalar::Scalar;
use crate::seeding::{self, subseed};

/// Outer-loop hyperparameters; defaults follow the 2x2 training column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho_init: f64,
    pub rho_increment: f64,
    pub rho_update_period_epochs: usize,
    pub lagrange_init: f64,
    pub lagrange_update_period_iters: usize,
    pub misreport: MisreportSearchConfig,
    /// Reuse each sample's best misreport from the previous epoch as a warm
    /// restart, running only `warm_start_initializations` fresh restarts on
    /// later epochs (the first epoch always runs the full search).
    pub warm_start_misreports: bool,
    pub warm_start_initializations: usize,
    pub n_train_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            rho_init: 1.0,
            rho_increment: 10.0,
            rho_update_period_epochs: 2,
            lagrange_init: 5.0,
            lagrange_update_period_iters: 100,
            misreport: MisreportSearchConfig::train_default(),
            warm_start_misreports: true,
            warm_start_initializations: 1,
            n_train_samples: 100_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.rho_update_period_epochs == 0
            || self.lagrange_update_period_iters == 0
        {
            return Err(Error::Config("training periods and batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.rho_init <= 0.0 || self.rho_increment < 0.0 {
            return Err(Error::Config("training rates must be positive".into()));
        }
        if self.lagrange_init < 0.0 {
            return Err(Error::Config("lambda must start nonnegative".into()));
        }
        if self.warm_start_misreports && self.warm_start_initializations == 0 {
            return Err(Error::Config(
                "warm-started epochs still need at least one restart".into(),
            ));
        }
        self.misreport.validate()
    }
}

/// Multiplier state of the augmented Lagrangian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState<T> {
    pub lambda: Array1<T>,
    pub rho: T,
    pub iteration: u64,
}

impl<T: Scalar> LagrangianState<T> {
    pub fn init(n_bidders: usize, cfg: &TrainConfig) -> Self {
        Self {
            lambda: Array1::from_elem(n_bidders, T::from_f64_lossy(cfg.lagrange_init)),
            rho: T::from_f64_lossy(cfg.rho_init),
            iteration: 0,
        }
    }
}

/// One per-epoch record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub mean_revenue: f64,
    pub mean_regret: f64,
    pub lambda: Vec<f64>,
    pub rho: f64,
    pub seconds: f64,
}

/// Whole-run log, one record per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<TrainEpoch>,
}

impl TrainLog {
    /// One JSON object per line, in epoch order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &self.epochs {
            serde_json::to_writer(&mut out, record)?;
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { epochs })
    }
}

/// Parameter gradients for all three mechanism networks.
#[derive(Clone, Debug)]
pub struct MechanismGradients<T> {
    pub trunk: Option<Gradients<T>>,
    pub allocation: Gradients<T>,
    pub payment: Gradients<T>,
}

/// The scalar objective `-revenue + sum_i lambda_i rgt_i + (rho/2) sum_i rgt_i^2`
/// for one profile.
pub fn penalized_objective<T: Scalar>(
    revenue: T,
    regrets: ArrayView1<'_, T>,
    lambda: ArrayView1<'_, T>,
    rho: T,
) -> T {
    let half = T::from_f64_lossy(0.5);
    let linear: T = regrets.iter().zip(lambda).map(|(&r, &l)| l * r).sum();
    let quadratic: T = regrets.iter().map(|&r| r * r).sum();
    -revenue + linear + half * rho * quadratic
}

/// Backpropagates head cotangents into parameter gradients for all three
/// networks, accumulating into `acc`.
fn accumulate_param_grads<T: Scalar>(
    params: &MechanismParams<T>,
    bids: ArrayView2<'_, T>,
    d_shares: &Array2<T>,
    d_fractions: &Array2<T>,
    acc: &mut Option<MechanismGradients<T>>,
) -> Result<()> {
    let fwd = params.forward_batch(bids)?;
    let alloc = params.allocation_net.backward_batch(&fwd.alloc_cache, d_shares)?;
    let payment = params.payment_net.backward_batch(&fwd.payment_cache, d_fractions)?;
    let trunk = match (&params.trunk, &fwd.trunk_cache) {
        (Some(trunk), Some(cache)) => {
            let d_features = &alloc.input_grad + &payment.input_grad;
            Some(trunk.backward_batch(cache, &d_features)?)
        }
        _ => None,
    };
    match acc {
        Some(acc) => {
            acc.allocation.add_assign(&alloc);
            acc.payment.add_assign(&payment);
            if let (Some(a), Some(t)) = (acc.trunk.as_mut(), trunk.as_ref()) {
                a.add_assign(t);
            }
        }
        None => {
            *acc = Some(MechanismGradients {
                trunk,
                allocation: alloc,
                payment,
            });
        }
    }
    Ok(())
}

/// Loss and parameter gradients on one batch.
///
/// Runs the train-time misreport search (seeded per profile from
/// `seeds`), then differentiates the augmented Lagrangian through the
/// truthful pass and through the utilities at the found misreports, which
/// are treated as constants. Also returns the per-profile per-bidder
/// regrets and the best misreports found, so the caller can drive the
/// multiplier schedule, the logs and the warm-start cache.
pub fn lagrangian_loss<T: Scalar>(
    params: &MechanismParams<T>,
    batch: &[ValuationProfile<T>],
    state: &LagrangianState<T>,
    cfg: &TrainConfig,
    seeds: &[u64],
    warm_starts: Option<ArrayView2<'_, T>>,
) -> Result<(T, MechanismGradients<T>, Array2<T>, Array2<T>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let (n, m) = (params.n_bidders, params.n_items);
    let batch_size = batch.len();
    let search_cfg = match warm_starts {
        Some(_) => MisreportSearchConfig {
            initializations: cfg.warm_start_initializations,
            ..cfg.misreport
        },
        None => cfg.misreport,
    };
    let search = misreport_search_batch_with_starts(params, batch, &search_cfg, seeds, warm_starts)?;
    let regrets = search.regrets;

    let mut truthful = Array2::zeros((batch_size, n * m));
    for (p, profile) in batch.iter().enumerate() {
        truthful.row_mut(p).assign(&profile.flatten());
    }
    let fwd = params.forward_batch(truthful.view())?;
    let shares = fwd.shares();
    let fractions = fwd.fractions();

    // c_i = d(penalty)/d(rgt_i); zero where the regret is floored at 0.
    let mut coeff = Array2::zeros((batch_size, n));
    for p in 0..batch_size {
        for i in 0..n {
            if regrets[[p, i]] > T::zero() {
                coeff[[p, i]] = state.lambda[i] + state.rho * regrets[[p, i]];
            }
        }
    }

    // Loss value.
    let mut loss = T::zero();
    for p in 0..batch_size {
        let mut revenue = T::zero();
        for i in 0..n {
            let sigma = fractions[[p, i]];
            let mut reported = T::zero();
            for j in 0..m {
                reported += truthful[[p, i * m + j]] * shares[[p, i * m + j]];
            }
            revenue += sigma * reported;
        }
        loss += penalized_objective(revenue, regrets.row(p), state.lambda.view(), state.rho);
    }
    let scale = T::one() / T::from_f64_lossy(batch_size as f64);
    loss *= scale;

    // Truthful-pass cotangents: revenue term plus -c_i * u_i^truthful, with
    // u_i^truthful = (1 - sigma_i) * AV_i and AV_i = sum_j v_ij g_ij.
    let mut d_shares = Array2::zeros((batch_size, (n + 1) * m));
    let mut d_fractions = Array2::zeros((batch_size, n));
    for p in 0..batch_size {
        for i in 0..n {
            let sigma = fractions[[p, i]];
            let c = coeff[[p, i]];
            let mut allocated = T::zero();
            for j in 0..m {
                let v = truthful[[p, i * m + j]];
                allocated += v * shares[[p, i * m + j]];
                d_shares[[p, i * m + j]] = (-sigma * v - c * (T::one() - sigma) * v) * scale;
            }
            d_fractions[[p, i]] = (c - T::one()) * allocated * scale;
        }
    }
    let mut grads = None;
    accumulate_param_grads(params, truthful.view(), &d_shares, &d_fractions, &mut grads)?;

    // Misreport-pass cotangents: +c_i * u_i at the fixed misreport, with
    // u_i = sum_j v_ij g_ij - sigma_i * sum_j b_ij g_ij.
    let mut mis_bids = Array2::zeros((batch_size * n, n * m));
    for p in 0..batch_size {
        for i in 0..n {
            let mut row = mis_bids.row_mut(p * n + i);
            row.assign(&truthful.row(p));
            for j in 0..m {
                row[i * m + j] = search.best_misreports[[p * n + i, j]];
            }
        }
    }
    let mis_fwd = params.forward_batch(mis_bids.view())?;
    let mis_shares = mis_fwd.shares();
    let mut d_mis_shares = Array2::zeros((batch_size * n, (n + 1) * m));
    let mut d_mis_fractions = Array2::zeros((batch_size * n, n));
    for p in 0..batch_size {
        for i in 0..n {
            let r = p * n + i;
            let c = coeff[[p, i]];
            let sigma = mis_fwd.fractions()[[r, i]];
            let mut reported = T::zero();
            for j in 0..m {
                let b = mis_bids[[r, i * m + j]];
                reported += b * mis_shares[[r, i * m + j]];
                d_mis_shares[[r, i * m + j]] = c * (truthful[[p, i * m + j]] - sigma * b) * scale;
            }
            d_mis_fractions[[r, i]] = -c * reported * scale;
        }
    }
    accumulate_param_grads(
        params,
        mis_bids.view(),
        &d_mis_shares,
        &d_mis_fractions,
        &mut grads,
    )?;

    Ok((
        loss,
        grads.expect("two passes accumulated"),
        regrets,
        search.best_misreports,
    ))
}

/// Ascent step on the multipliers at a lambda boundary.
pub fn update_multipliers<T: Scalar>(
    state: &LagrangianState<T>,
    batch_mean_regrets: ArrayView1<'_, T>,
) -> LagrangianState<T> {
    let lambda =
        &state.lambda + &batch_mean_regrets.mapv(|r| state.rho * r);
    LagrangianState {
        lambda,
        rho: state.rho,
        iteration: state.iteration,
    }
}

/// Full training loop: `epochs * (|data| / batch_size)` Adam steps on the
/// Lagrangian with the periodic multiplier schedule.
pub fn train<T: Scalar>(
    auction: &AuctionConfig,
    spec: ArchitectureSpec,
    cfg: &TrainConfig,
    data: &[ValuationProfile<T>],
    seed: u64,
) -> Result<(MechanismParams<T>, TrainLog)> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::InsufficientData {
            needed: cfg.batch_size,
            got: data.len(),
        });
    }
    let n = auction.n_bidders;
    let mut params = MechanismParams::init(auction, spec, subseed(seed, &[0]));
    let mut adam_trunk = params.trunk.as_ref().map(AdamState::new);
    let mut adam_alloc = AdamState::new(&params.allocation_net);
    let mut adam_pay = AdamState::new(&params.payment_net);
    let mut state = LagrangianState::<T>::init(n, cfg);
    let lr = T::from_f64_lossy(cfg.learning_rate);

    let n_batches = data.len() / cfg.batch_size;
    let mut log = TrainLog::default();
    // Per-bidder regret sums since the last lambda update.
    let mut window_regret = Array1::<T>::zeros(n);
    let mut window_count = 0usize;

    // Warm-start cache: row `idx * n + i` holds the best misreport found so
    // far for bidder i of sample idx, initialized at the truthful bid.
    let mut warm_cache = if cfg.warm_start_misreports {
        let mut cache = Array2::zeros((data.len() * n, auction.n_items));
        for (idx, profile) in data.iter().enumerate() {
            for i in 0..n {
                cache.row_mut(idx * n + i).assign(&profile.row(i));
            }
        }
        Some(cache)
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeding::rng_from(subseed(seed, &[1, epoch as u64])));

        let mut epoch_revenue = 0.0;
        let mut epoch_regret = 0.0;
        for b in 0..n_batches {
            let indices = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch: Vec<ValuationProfile<T>> =
                indices.iter().map(|&idx| data[idx].clone()).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|k| subseed(seed, &[2, state.iteration, k as u64]))
                .collect();
            // The first epoch runs the full search to populate the cache.
            let warm = match (&warm_cache, epoch) {
                (Some(cache), e) if e > 0 => {
                    let mut rows = Array2::zeros((batch.len() * n, auction.n_items));
                    for (k, &idx) in indices.iter().enumerate() {
                        for i in 0..n {
                            rows.row_mut(k * n + i).assign(&cache.row(idx * n + i));
                        }
                    }
                    Some(rows)
                }
                _ => None,
            };
            let (_, grads, regrets, best) = lagrangian_loss(
                &params,
                &batch,
                &state,
                cfg,
                &seeds,
                warm.as_ref().map(|w| w.view()),
            )?;
            if let Some(cache) = warm_cache.as_mut() {
                for (k, &idx) in indices.iter().enumerate() {
                    for i in 0..n {
                        cache.row_mut(idx * n + i).assign(&best.row(k * n + i));
                    }
                }
            }

            if let (Some(trunk), Some(adam), Some(g)) = (
                params.trunk.as_mut(),
                adam_trunk.as_mut(),
                grads.trunk.as_ref(),
            ) {
                adam_step_mut(trunk, g, adam, lr);
            }
            adam_step_mut(&mut params.allocation_net, &grads.allocation, &mut adam_alloc, lr);
            adam_step_mut(&mut params.payment_net, &grads.payment, &mut adam_pay, lr);

            for p in 0..batch.len() {
                let mut max_r = T::zero();
                for i in 0..n {
                    window_regret[i] += regrets[[p, i]];
                    max_r = max_r.max(regrets[[p, i]]);
                }
                epoch_regret += max_r.to_f64_lossy();
            }
            window_count += batch.len();
            let fwd = {
                let mut flat = Array2::zeros((batch.len(), params.input_width()));
                for (p, profile) in batch.iter().enumerate() {
                    flat.row_mut(p).assign(&profile.flatten());
                }
                params.forward_batch(flat.view())?
            };
            for (p, profile) in batch.iter().enumerate() {
                let mut revenue = T::zero();
                for i in 0..n {
                    let mut reported = T::zero();
                    for j in 0..auction.n_items {
                        reported += profile.values()[[i, j]]
                            * fwd.shares()[[p, i * auction.n_items + j]];
                    }
                    revenue += fwd.fractions()[[p, i]] * reported;
                }
                epoch_revenue += revenue.to_f64_lossy();
            }

            state.iteration += 1;
            if state.iteration % cfg.lagrange_update_period_iters as u64 == 0 && window_count > 0 {
                let mean = window_regret.mapv(|s| s / T::from_f64_lossy(window_count as f64));
                state = update_multipliers(&state, mean.view());
                window_regret.fill(T::zero());
                window_count = 0;
            }
        }

        if (epoch + 1) % cfg.rho_update_period_epochs == 0 {
            state.rho += T::from_f64_lossy(cfg.rho_increment);
        }

        let samples = (n_batches * cfg.batch_size) as f64;
        log.epochs.push(TrainEpoch {
            epoch,
            mean_revenue: epoch_revenue / samples,
            mean_regret: epoch_regret / samples,
            lambda: state.lambda.iter().map(|l| l.to_f64_lossy()).collect(),
            rho: state.rho.to_f64_lossy(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}
