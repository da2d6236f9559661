//! Domain types and pure auction arithmetic.
//!
//! Valuations are additive: a bidder's value for a bundle is the sum of its
//! per-item values. Allocations carry an explicit dummy row (row `n`) so that
//! column-wise normalization makes feasibility a structural invariant.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding;

/// Tag for the per-(bidder, item) valuation distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ValuationDistribution {
    /// I.i.d. U[0,1] per (bidder, item) entry.
    #[default]
    #[serde(rename = "uniform-unit")]
    UniformUnit,
}

/// Static description of an auction environment: `n` bidders, `m` items.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AuctionConfig {
    pub n_bidders: usize,
    pub n_items: usize,
    #[serde(default)]
    pub valuation_distribution: ValuationDistribution,
}

impl AuctionConfig {
    pub fn new(n_bidders: usize, n_items: usize) -> Result<Self> {
        if n_bidders == 0 || n_items == 0 {
            return Err(Error::Config(format!(
                "auction needs at least one bidder and one item, got {n_bidders}x{n_items}"
            )));
        }
        Ok(Self {
            n_bidders,
            n_items,
            valuation_distribution: ValuationDistribution::UniformUnit,
        })
    }
}

/// An `n x m` matrix of per-bidder per-item values in [0,1].
///
/// Doubles as a bid profile: bids live in the same space as valuations.
#[derive(Clone, Debug, PartialEq)]
pub struct ValuationProfile<T> {
    values: Array2<T>,
}

impl<T: Scalar> ValuationProfile<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        for &v in values.iter() {
            if !v.is_finite() || v < T::zero() || v > T::one() {
                return Err(Error::InvalidValue(format!(
                    "valuation entry {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Constructs without range validation; entries must already be in [0,1].
    pub(crate) fn from_unchecked(values: Array2<T>) -> Self {
        Self { values }
    }

    pub fn n_bidders(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn row(&self, bidder: usize) -> ArrayView1<'_, T> {
        self.values.row(bidder)
    }

    /// Bids flattened row-major (bidder-major), the fixed network input encoding.
    pub fn flatten(&self) -> Array1<T> {
        Array1::from_iter(self.values.iter().cloned())
    }

    /// Returns a copy with `bidder`'s row replaced by `bid`.
    pub fn with_row(&self, bidder: usize, bid: ArrayView1<'_, T>) -> Self {
        let mut values = self.values.clone();
        values.row_mut(bidder).assign(&bid);
        Self { values }
    }
}

/// Item shares over `n + 1` rows per item; row `n` is the dummy
/// "unallocated" slot. Every column sums to 1 within tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation<T> {
    shares: Array2<T>,
}

impl<T: Scalar> Allocation<T> {
    /// Validates the type invariant: entries >= 0, columns sum to 1 within `tol`.
    pub fn new(shares: Array2<T>, tol: T) -> Result<Self> {
        for col in shares.columns() {
            let sum: T = col.iter().cloned().sum();
            if (sum - T::one()).abs() > tol {
                return Err(Error::InvalidValue(format!(
                    "allocation column sums to {sum}, expected 1"
                )));
            }
            for &s in col.iter() {
                if !s.is_finite() || s < -tol {
                    return Err(Error::InvalidValue(format!("allocation share {s} < 0")));
                }
            }
        }
        Ok(Self { shares })
    }

    pub(crate) fn from_unchecked(shares: Array2<T>) -> Self {
        Self { shares }
    }

    /// Number of real bidders (excludes the dummy row).
    pub fn n_bidders(&self) -> usize {
        self.shares.nrows() - 1
    }

    pub fn n_items(&self) -> usize {
        self.shares.ncols()
    }

    /// Full (n+1) x m share matrix including the dummy row.
    pub fn shares(&self) -> &Array2<T> {
        &self.shares
    }

    pub fn bidder_row(&self, bidder: usize) -> ArrayView1<'_, T> {
        self.shares.row(bidder)
    }
}

/// Per-bidder charges, same scale as valuations.
#[derive(Clone, Debug, PartialEq)]
pub struct Payments<T> {
    amounts: Array1<T>,
}

impl<T: Scalar> Payments<T> {
    pub fn new(amounts: Array1<T>) -> Result<Self> {
        for &p in amounts.iter() {
            if !p.is_finite() || p < T::zero() {
                return Err(Error::InvalidValue(format!("payment {p} < 0")));
            }
        }
        Ok(Self { amounts })
    }

    pub(crate) fn from_unchecked(amounts: Array1<T>) -> Self {
        Self { amounts }
    }

    pub fn amounts(&self) -> &Array1<T> {
        &self.amounts
    }

    pub fn n_bidders(&self) -> usize {
        self.amounts.len()
    }
}

/// Joint outcome of a mechanism: who gets what, and who pays what.
#[derive(Clone, Debug, PartialEq)]
pub struct AuctionOutcome<T> {
    pub allocation: Allocation<T>,
    pub payments: Payments<T>,
}

/// Additive utility: sum of allocated values minus the payment.
pub fn utility<T: Scalar>(
    valuation_row: ArrayView1<'_, T>,
    allocation_row: ArrayView1<'_, T>,
    payment: T,
) -> Result<T> {
    if valuation_row.len() != allocation_row.len() {
        return Err(Error::DimensionMismatch(format!(
            "valuation row has {} items, allocation row has {}",
            valuation_row.len(),
            allocation_row.len()
        )));
    }
    Ok(valuation_row.dot(&allocation_row) - payment)
}

/// Total payment collected by the auctioneer.
pub fn revenue<T: Scalar>(payments: &Payments<T>) -> T {
    payments.amounts.iter().cloned().sum()
}

/// True iff every item's real-bidder shares sum to <= 1 + tol and all
/// entries are >= -tol.
pub fn check_feasible<T: Scalar>(allocation: &Allocation<T>, tol: T) -> bool {
    let n = allocation.n_bidders();
    for col in allocation.shares.columns() {
        let mut real_sum = T::zero();
        for (i, &s) in col.iter().enumerate() {
            if s < -tol {
                return false;
            }
            if i < n {
                real_sum += s;
            }
        }
        if real_sum > T::one() + tol {
            return false;
        }
    }
    true
}

/// True iff every bidder's utility at the given profile is >= -tol.
pub fn check_ir<T: Scalar>(
    outcome: &AuctionOutcome<T>,
    valuations: &ValuationProfile<T>,
    tol: T,
) -> bool {
    let n = valuations.n_bidders();
    for i in 0..n {
        let u = match utility(
            valuations.row(i),
            outcome.allocation.bidder_row(i),
            outcome.payments.amounts[i],
        ) {
            Ok(u) => u,
            Err(_) => return false,
        };
        if u < -tol {
            return false;
        }
    }
    true
}

/// Draws `count` i.i.d. valuation profiles with every entry U[0,1].
///
/// Entries are filled profile by profile in row-major order from a single
/// ChaCha8 stream keyed by `seed`, so a fixed seed gives bitwise-identical
/// output across runs and platforms.
pub fn sample_valuations<T: Scalar>(
    config: &AuctionConfig,
    count: usize,
    seed: u64,
) -> Vec<ValuationProfile<T>> {
    let ValuationDistribution::UniformUnit = config.valuation_distribution;
    let mut rng = seeding::rng_from(seed);
    let (n, m) = (config.n_bidders, config.n_items);
    (0..count)
        .map(|_| {
            let values = Array2::from_shape_simple_fn((n, m), || T::from_f64_lossy(rng.gen::<f64>()));
            ValuationProfile::from_unchecked(values)
        })
        .collect()
}

/// Writes profiles as CSV with the fixed column order
/// `auction_id,bidder,item,value`.
pub fn write_profiles_csv<T: Scalar>(
    path: &Path,
    profiles: &[ValuationProfile<T>],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "auction_id,bidder,item,value")?;
    for (id, profile) in profiles.iter().enumerate() {
        for ((i, j), v) in profile.values.indexed_iter() {
            writeln!(out, "{id},{i},{j},{v}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_profiles_csv`].
pub fn read_profiles_csv<T: Scalar>(
    path: &Path,
    config: &AuctionConfig,
) -> Result<Vec<ValuationProfile<T>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let (n, m) = (config.n_bidders, config.n_items);
    let mut profiles: Vec<Array2<T>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 4 {
            return Err(Error::InvalidValue(format!(
                "expected 4 CSV columns, got {}",
                record.len()
            )));
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::InvalidValue(format!("bad index {s:?}: {e}")))
        };
        let id = parse_idx(&record[0])?;
        let bidder = parse_idx(&record[1])?;
        let item = parse_idx(&record[2])?;
        let value: f64 = record[3]
            .parse()
            .map_err(|e| Error::InvalidValue(format!("bad value {:?}: {e}", &record[3])))?;
        if id > profiles.len() {
            return Err(Error::InvalidValue(format!(
                "auction_id {id} out of order"
            )));
        }
        if id == profiles.len() {
            profiles.push(Array2::zeros((n, m)));
        }
        if bidder >= n || item >= m {
            return Err(Error::DimensionMismatch(format!(
                "bidder {bidder}, item {item} outside {n}x{m}"
            )));
        }
        profiles[id][[bidder, item]] = T::from_f64_lossy(value);
    }
    profiles.into_iter().map(ValuationProfile::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    fn profile(values: [[f64; 2]; 2]) -> ValuationProfile<f64> {
        ValuationProfile::new(arr2(&values)).unwrap()
    }

    #[test]
    fn utility_hand_cases() {
        let u = utility(arr1(&[0.5, 0.5]).view(), arr1(&[1.0, 0.0]).view(), 0.3).unwrap();
        assert_abs_diff_eq!(u, 0.2, epsilon = 1e-12);
        let u = utility(arr1(&[0.7, 0.2]).view(), arr1(&[0.0, 0.0]).view(), 0.0).unwrap();
        assert_abs_diff_eq!(u, 0.0);
        let u = utility(arr1(&[1.0, 1.0]).view(), arr1(&[0.5, 0.5]).view(), 1.0).unwrap();
        assert_abs_diff_eq!(u, 0.0);
    }

    #[test]
    fn utility_rejects_dimension_mismatch() {
        let err = utility(arr1(&[0.5]).view(), arr1(&[1.0, 0.0]).view(), 0.0);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn revenue_sums_payments() {
        let p = Payments::new(arr1(&[0.0, 0.0])).unwrap();
        assert_eq!(revenue(&p), 0.0);
        let p = Payments::new(arr1(&[0.4, 0.53])).unwrap();
        assert_abs_diff_eq!(revenue(&p), 0.93, epsilon = 1e-12);
        let p = Payments::new(arr1(&[0.1, 0.2, 0.3])).unwrap();
        assert_abs_diff_eq!(revenue(&p), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn feasibility_cases() {
        // Softmax-normalized columns over n+1 rows.
        let a = Allocation::new(arr2(&[[0.2, 0.5], [0.3, 0.25], [0.5, 0.25]]), 1e-6).unwrap();
        assert!(check_feasible(&a, 1e-6));
        // Real-bidder shares 0.7 + 0.7 > 1.
        let a = Allocation::from_unchecked(arr2(&[[0.7, 0.2], [0.7, 0.3], [0.0, 0.5]]));
        assert!(!check_feasible(&a, 1e-6));
        // Dummy row carries the full share.
        let a = Allocation::new(arr2(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]), 1e-6).unwrap();
        assert!(check_feasible(&a, 1e-6));
    }

    #[test]
    fn ir_cases() {
        let v = profile([[0.5, 0.5], [0.3, 0.7]]);
        let alloc = Allocation::new(arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]), 1e-6).unwrap();
        let zero_pay = AuctionOutcome {
            allocation: alloc.clone(),
            payments: Payments::new(arr1(&[0.0, 0.0])).unwrap(),
        };
        assert!(check_ir(&zero_pay, &v, 1e-6));

        // Allocated value 0.5 (bidder 0 gets item 0), payment 0.6.
        let over = AuctionOutcome {
            allocation: alloc.clone(),
            payments: Payments::new(arr1(&[0.6, 0.0])).unwrap(),
        };
        assert!(!check_ir(&over, &v, 1e-6));

        // Payment = 0.9 of allocated value.
        let fraction = AuctionOutcome {
            allocation: alloc,
            payments: Payments::new(arr1(&[0.45, 0.63])).unwrap(),
        };
        assert!(check_ir(&fraction, &v, 1e-6));
    }

    #[test]
    fn sampling_zero_count_and_determinism() {
        let cfg = AuctionConfig::new(2, 2).unwrap();
        let empty = sample_valuations::<f64>(&cfg, 0, 7);
        assert!(empty.is_empty());
        let a = sample_valuations::<f64>(&cfg, 50, 7);
        let b = sample_valuations::<f64>(&cfg, 50, 7);
        assert_eq!(a, b);
        let c = sample_valuations::<f64>(&cfg, 50, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_mean_is_near_half() {
        let cfg = AuctionConfig::new(2, 2).unwrap();
        let profiles = sample_valuations::<f64>(&cfg, 100_000, 7);
        let sum: f64 = profiles.iter().map(|p| p.values().sum()).sum();
        let mean = sum / (100_000.0 * 4.0);
        assert!((mean - 0.5).abs() < 0.01, "sample mean {mean}");
    }

    #[test]
    fn csv_round_trip() {
        let cfg = AuctionConfig::new(2, 3).unwrap();
        let profiles = sample_valuations::<f64>(&cfg, 17, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vals.csv");
        write_profiles_csv(&path, &profiles).unwrap();
        let back = read_profiles_csv::<f64>(&path, &cfg).unwrap();
        assert_eq!(profiles, back);
    }

    proptest! {
        #[test]
        fn utility_linear_in_payment(
            v in proptest::collection::vec(0.0f64..1.0, 3),
            g in proptest::collection::vec(0.0f64..1.0, 3),
            p in 0.0f64..1.0,
            delta in -1.0f64..1.0,
        ) {
            let v = Array1::from(v);
            let g = Array1::from(g);
            let base = utility(v.view(), g.view(), p).unwrap();
            let shifted = utility(v.view(), g.view(), p + delta).unwrap();
            prop_assert!((shifted - (base - delta)).abs() < 1e-12);
        }

        #[test]
        fn revenue_permutation_invariant(amounts in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let fwd = Payments::new(Array1::from(amounts.clone())).unwrap();
            let mut rev_amounts = amounts;
            rev_amounts.reverse();
            let rev = Payments::new(Array1::from(rev_amounts)).unwrap();
            prop_assert!((revenue(&fwd) - revenue(&rev)).abs() < 1e-12);
        }

        #[test]
        fn valid_allocations_are_feasible(cols in proptest::collection::vec(
            proptest::collection::vec(0.0f64..1.0, 3), 2)) {
            // Normalize each column so it sums to 1: the type invariant.
            let mut shares = Array2::zeros((3, 2));
            for (j, col) in cols.iter().enumerate() {
                let s: f64 = col.iter().sum::<f64>().max(1e-9);
                for (i, &x) in col.iter().enumerate() {
                    shares[[i, j]] = x / s;
                }
            }
            let alloc = Allocation::new(shares, 1e-6).unwrap();
            prop_assert!(check_feasible(&alloc, 1e-6));
        }
    }
}
