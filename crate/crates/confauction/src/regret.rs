//! Regret computation by inner-loop misreport optimization.
//!
//! Regret of a bidder is the utility gained by optimally deviating from a
//! truthful bid. The engine runs projected gradient ascent over the bidder's
//! own bid row from several restarts (the truthful bid always among them, so
//! reported regret is exactly nonnegative), and a brute-force grid oracle
//! provides independent verification.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::ValuationProfile;
use crate::error::{Error, Result};
use crate::mechanism::{Mechanism, MechanismParams};
use crate::scalar::Scalar;
use crate::seeding::{self, subseed};

/// Knobs of the projected-gradient-ascent misreport search.
///
/// Training defaults follow the standard inner-loop settings (lr 0.1, 25
/// iterations, 10 restarts); evaluation needs a stronger search because an
/// under-searched maximum biases regret low.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisreportSearchConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub initializations: usize,
    pub include_truthful_start: bool,
}

impl MisreportSearchConfig {
    pub fn train_default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 25,
            initializations: 10,
            include_truthful_start: true,
        }
    }

    pub fn eval_default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 200,
            initializations: 100,
            include_truthful_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.iterations == 0 || self.initializations == 0 {
            return Err(Error::Config(format!(
                "misreport search needs positive learning rate, iterations and restarts: {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for MisreportSearchConfig {
    fn default() -> Self {
        Self::train_default()
    }
}

/// Per-bidder regrets and the profile maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct RegretReport<T> {
    pub per_bidder: Array1<T>,
    pub max_regret: T,
    /// Best probed misreport per bidder, one row each.
    pub best_misreports: Array2<T>,
}

fn clamp_unit<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::one())
}

/// Draws the restart point for `(seed, init)`: the truthful bid for restart
/// 0 when configured, otherwise U[0,1]^m.
fn restart_point<T: Scalar>(
    truthful: ArrayView1<'_, T>,
    cfg: &MisreportSearchConfig,
    seed: u64,
    init: usize,
) -> Array1<T> {
    if init == 0 && cfg.include_truthful_start {
        truthful.to_owned()
    } else {
        let mut rng = seeding::rng_from(subseed(seed, &[init as u64]));
        Array1::from_shape_simple_fn(truthful.len(), || T::from_f64_lossy(rng.gen::<f64>()))
    }
}

/// Projected-gradient-ascent misreport search for one bidder against any
/// black-box mechanism. Returns the best probed bid and the utility gain
/// over truthful bidding, floored at zero.
pub fn optimize_misreport<T: Scalar, M: Mechanism<T> + ?Sized>(
    mechanism: &M,
    profile: &ValuationProfile<T>,
    bidder: usize,
    cfg: &MisreportSearchConfig,
    seed: u64,
) -> Result<(Array1<T>, T)> {
    cfg.validate()?;
    if bidder >= mechanism.n_bidders() {
        return Err(Error::DimensionMismatch(format!(
            "bidder {bidder} out of range for {} bidders",
            mechanism.n_bidders()
        )));
    }
    let truthful = profile.row(bidder);
    let truthful_utility = mechanism.utility(truthful, profile, bidder)?;
    let lr = T::from_f64_lossy(cfg.learning_rate);

    let mut best_bid = truthful.to_owned();
    let mut best_utility = T::neg_infinity();
    for init in 0..cfg.initializations {
        let mut bid = restart_point(truthful, cfg, seed, init);
        for _ in 0..cfg.iterations {
            let candidate = profile.with_row(bidder, bid.view());
            let (u, grad) =
                mechanism.utility_and_own_bid_gradient(truthful, &candidate, bidder)?;
            if u > best_utility {
                best_utility = u;
                best_bid = bid.clone();
            }
            bid.zip_mut_with(&grad, |b, &g| *b = clamp_unit(*b + lr * g));
        }
        let candidate = profile.with_row(bidder, bid.view());
        let u = mechanism.utility(truthful, &candidate, bidder)?;
        if u > best_utility {
            best_utility = u;
            best_bid = bid;
        }
    }
    Ok((best_bid, (best_utility - truthful_utility).max(T::zero())))
}

/// Per-bidder regret for one profile; bidder `i` searches with sub-seed
/// derived from `(seed, i)`.
pub fn regret<T: Scalar, M: Mechanism<T> + ?Sized>(
    mechanism: &M,
    profile: &ValuationProfile<T>,
    cfg: &MisreportSearchConfig,
    seed: u64,
) -> Result<RegretReport<T>> {
    let n = mechanism.n_bidders();
    let m = mechanism.n_items();
    let mut per_bidder = Array1::zeros(n);
    let mut best = Array2::zeros((n, m));
    for i in 0..n {
        let (bid, gain) =
            optimize_misreport(mechanism, profile, i, cfg, subseed(seed, &[i as u64]))?;
        per_bidder[i] = gain;
        best.row_mut(i).assign(&bid);
    }
    let max_regret = per_bidder.iter().cloned().fold(T::zero(), T::max);
    Ok(RegretReport {
        per_bidder,
        max_regret,
        best_misreports: best,
    })
}

/// Result of a batched misreport search over many profiles.
#[derive(Clone, Debug)]
pub struct MisreportOutcome<T> {
    /// (P, n) utility gains floored at zero.
    pub regrets: Array2<T>,
    /// (P * n, m) best misreports, row `p * n + i` for (profile p, bidder i).
    pub best_misreports: Array2<T>,
    /// (P, n) truthful utilities.
    pub truthful_utilities: Array2<T>,
}

/// Number of profiles per parallel work unit. Fixed (not derived from the
/// thread count) so reductions happen in the same order on any machine.
const PROFILES_PER_CHUNK: usize = 128;

/// Batched projected-gradient-ascent misreport search against a neural
/// mechanism, with exact bid gradients. `seeds[p]` drives profile `p`,
/// matching [`regret`]'s sub-seeding when `seeds[p] = subseed(seed, [p])`.
pub fn misreport_search_batch<T: Scalar>(
    params: &MechanismParams<T>,
    profiles: &[ValuationProfile<T>],
    cfg: &MisreportSearchConfig,
    seeds: &[u64],
) -> Result<MisreportOutcome<T>> {
    misreport_search_batch_with_starts(params, profiles, cfg, seeds, None)
}

/// [`misreport_search_batch`] with one extra warm restart per (profile,
/// bidder): row `p * n + i` of `warm_starts` seeds an additional candidate,
/// on top of the configured restarts. The training loop uses this to carry
/// the best misreports found for each sample across epochs.
pub fn misreport_search_batch_with_starts<T: Scalar>(
    params: &MechanismParams<T>,
    profiles: &[ValuationProfile<T>],
    cfg: &MisreportSearchConfig,
    seeds: &[u64],
    warm_starts: Option<ndarray::ArrayView2<'_, T>>,
) -> Result<MisreportOutcome<T>> {
    cfg.validate()?;
    if profiles.len() != seeds.len() {
        return Err(Error::DimensionMismatch(
            "one seed per profile required".into(),
        ));
    }
    let (n, m) = (params.n_bidders, params.n_items);
    if let Some(starts) = warm_starts {
        if starts.dim() != (profiles.len() * n, m) {
            return Err(Error::DimensionMismatch(format!(
                "warm starts must be ({} * {n}, {m}), got {:?}",
                profiles.len(),
                starts.dim()
            )));
        }
    }
    let chunks: Vec<(usize, &[ValuationProfile<T>], &[u64])> = profiles
        .chunks(PROFILES_PER_CHUNK)
        .zip(seeds.chunks(PROFILES_PER_CHUNK))
        .enumerate()
        .map(|(c, (ps, ss))| (c * PROFILES_PER_CHUNK, ps, ss))
        .collect();

    let results: Vec<Result<MisreportOutcome<T>>> = chunks
        .par_iter()
        .map(|(offset, ps, ss)| {
            let starts = warm_starts
                .map(|w| w.slice_move(ndarray::s![offset * n..(offset + ps.len()) * n, ..]));
            misreport_search_chunk(params, ps, cfg, ss, starts)
        })
        .collect();

    let mut regrets = Array2::zeros((profiles.len(), n));
    let mut best = Array2::zeros((profiles.len() * n, m));
    let mut truthful = Array2::zeros((profiles.len(), n));
    for ((offset, ps, _), chunk) in chunks.iter().zip(results) {
        let chunk = chunk?;
        regrets
            .slice_mut(ndarray::s![*offset..offset + ps.len(), ..])
            .assign(&chunk.regrets);
        best.slice_mut(ndarray::s![offset * n..(offset + ps.len()) * n, ..])
            .assign(&chunk.best_misreports);
        truthful
            .slice_mut(ndarray::s![*offset..offset + ps.len(), ..])
            .assign(&chunk.truthful_utilities);
    }
    Ok(MisreportOutcome {
        regrets,
        best_misreports: best,
        truthful_utilities: truthful,
    })
}

fn misreport_search_chunk<T: Scalar>(
    params: &MechanismParams<T>,
    profiles: &[ValuationProfile<T>],
    cfg: &MisreportSearchConfig,
    seeds: &[u64],
    warm_starts: Option<ndarray::ArrayView2<'_, T>>,
) -> Result<MisreportOutcome<T>> {
    let (n, m) = (params.n_bidders, params.n_items);
    let n_profiles = profiles.len();
    // Warm starts occupy one extra restart slot past the seeded ones.
    let inits = cfg.initializations + usize::from(warm_starts.is_some());
    let rows = n_profiles * n * inits;
    let lr = T::from_f64_lossy(cfg.learning_rate);

    // Flattened truthful profiles, one per profile.
    let mut base = Array2::zeros((n_profiles, n * m));
    for (p, profile) in profiles.iter().enumerate() {
        base.row_mut(p).assign(&profile.flatten());
    }
    let truthful_utilities = params.truthful_utilities_batch(base.view())?;

    // Row layout: ((p * n) + i) * inits + k.
    let row_of = |p: usize, i: usize, k: usize| (p * n + i) * inits + k;
    let mut candidates = Array2::zeros((rows, m));
    let mut true_values = Array2::zeros((rows, m));
    let mut bidders = vec![0usize; rows];
    for (p, profile) in profiles.iter().enumerate() {
        for i in 0..n {
            let bidder_seed = subseed(seeds[p], &[i as u64]);
            for k in 0..inits {
                let r = row_of(p, i, k);
                let start = match warm_starts {
                    Some(w) if k == cfg.initializations => w.row(p * n + i).to_owned(),
                    _ => restart_point(profile.row(i), cfg, bidder_seed, k),
                };
                candidates.row_mut(r).assign(&start);
                true_values.row_mut(r).assign(&profile.row(i));
                bidders[r] = i;
            }
        }
    }

    let mut bids = Array2::zeros((rows, n * m));
    let fill_bids = |bids: &mut Array2<T>, candidates: &Array2<T>| {
        for p in 0..n_profiles {
            for i in 0..n {
                for k in 0..inits {
                    let r = row_of(p, i, k);
                    let mut row = bids.row_mut(r);
                    row.assign(&base.row(p));
                    for j in 0..m {
                        row[i * m + j] = candidates[[r, j]];
                    }
                }
            }
        }
    };

    let mut best_utility = Array1::from_elem(rows, T::neg_infinity());
    let mut best_bid = candidates.clone();
    let track = |best_utility: &mut Array1<T>,
                     best_bid: &mut Array2<T>,
                     utilities: &Array1<T>,
                     candidates: &Array2<T>| {
        for r in 0..rows {
            if utilities[r] > best_utility[r] {
                best_utility[r] = utilities[r];
                best_bid.row_mut(r).assign(&candidates.row(r));
            }
        }
    };

    for _ in 0..cfg.iterations {
        fill_bids(&mut bids, &candidates);
        let (utilities, grads) =
            params.utility_and_bid_grad_batch(bids.view(), true_values.view(), &bidders)?;
        track(&mut best_utility, &mut best_bid, &utilities, &candidates);
        ndarray::Zip::from(&mut candidates)
            .and(&grads)
            .for_each(|b, &g| *b = clamp_unit(*b + lr * g));
    }
    fill_bids(&mut bids, &candidates);
    let utilities = params.utilities_batch(bids.view(), true_values.view(), &bidders)?;
    track(&mut best_utility, &mut best_bid, &utilities, &candidates);

    // Reduce over restarts.
    let mut regrets = Array2::zeros((n_profiles, n));
    let mut best_misreports = Array2::zeros((n_profiles * n, m));
    for p in 0..n_profiles {
        for i in 0..n {
            let mut top = T::neg_infinity();
            let mut top_row = row_of(p, i, 0);
            for k in 0..inits {
                let r = row_of(p, i, k);
                if best_utility[r] > top {
                    top = best_utility[r];
                    top_row = r;
                }
            }
            regrets[[p, i]] = (top - truthful_utilities[[p, i]]).max(T::zero());
            best_misreports
                .row_mut(p * n + i)
                .assign(&best_bid.row(top_row));
        }
    }
    Ok(MisreportOutcome {
        regrets,
        best_misreports,
        truthful_utilities,
    })
}

/// Batched per-profile regret reports; profile `p` uses sub-seed
/// `subseed(seed, [p])`, so results match per-profile [`regret`] calls.
pub fn regret_batch<T: Scalar>(
    params: &MechanismParams<T>,
    profiles: &[ValuationProfile<T>],
    cfg: &MisreportSearchConfig,
    seed: u64,
) -> Result<Vec<RegretReport<T>>> {
    let seeds: Vec<u64> = (0..profiles.len())
        .map(|p| subseed(seed, &[p as u64]))
        .collect();
    let outcome = misreport_search_batch(params, profiles, cfg, &seeds)?;
    let (n, m) = (params.n_bidders, params.n_items);
    Ok((0..profiles.len())
        .map(|p| {
            let per_bidder = outcome.regrets.row(p).to_owned();
            let max_regret = per_bidder.iter().cloned().fold(T::zero(), T::max);
            let best_misreports = outcome
                .best_misreports
                .slice(ndarray::s![p * n..(p + 1) * n, ..])
                .to_owned();
            debug_assert_eq!(best_misreports.ncols(), m);
            RegretReport {
                per_bidder,
                max_regret,
                best_misreports,
            }
        })
        .collect())
}

/// Guard on the exhaustive lattice size.
pub const GRID_POINT_LIMIT: u128 = 10_000_000;

/// Exhaustive misreport search over the lattice {0, step, ..., 1}^m.
/// Returns the best utility gain floored at zero.
pub fn grid_oracle_regret<T: Scalar, M: Mechanism<T> + ?Sized>(
    mechanism: &M,
    profile: &ValuationProfile<T>,
    bidder: usize,
    grid_step: f64,
) -> Result<T> {
    let m = mechanism.n_items();
    let divisions = (1.0 / grid_step).round() as u64;
    if divisions == 0 || (divisions as f64 * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "grid step {grid_step} does not divide 1 into an integer lattice"
        )));
    }
    let points = (divisions as u128 + 1).pow(m as u32);
    if points > GRID_POINT_LIMIT {
        return Err(Error::LatticeTooLarge {
            points,
            limit: GRID_POINT_LIMIT,
        });
    }

    let truthful = profile.row(bidder);
    let truthful_utility = mechanism.utility(truthful, profile, bidder)?;
    let mut best = truthful_utility;
    let mut digits = vec![0u64; m];
    let mut bid = Array1::zeros(m);
    loop {
        for j in 0..m {
            bid[j] = T::from_f64_lossy(digits[j] as f64 * grid_step);
        }
        let candidate = profile.with_row(bidder, bid.view());
        let u = mechanism.utility(truthful, &candidate, bidder)?;
        if u > best {
            best = u;
        }
        // Odometer increment.
        let mut carry = true;
        for d in digits.iter_mut() {
            if *d < divisions {
                *d += 1;
                carry = false;
                break;
            }
            *d = 0;
        }
        if carry {
            break;
        }
    }
    Ok((best - truthful_utility).max(T::zero()))
}

/// Serializes per-profile regret reports as
/// `auction_id,bidder,regret,max_regret`.
pub fn write_regret_csv<T: Scalar>(path: &Path, reports: &[RegretReport<T>]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "auction_id,bidder,regret,max_regret")?;
    for (id, report) in reports.iter().enumerate() {
        for (bidder, gain) in report.per_bidder.iter().enumerate() {
            writeln!(out, "{id},{bidder},{gain},{}", report.max_regret)?;
        }
    }
    out.flush()?;
    Ok(())
}
