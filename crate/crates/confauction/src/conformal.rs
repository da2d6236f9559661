//! Split-conformal calibration of the regret estimator and the acceptance
//! rule it licenses.
//!
//! Calibration residuals `e_i = r_i - r_hat_i` on a held-out set yield the
//! quantile `q_alpha` (the k-th smallest residual, `k = ceil((n+1)(1-alpha))`);
//! the gate then accepts an auction iff the predicted regret satisfies
//! `r_hat < epsilon - q_alpha` (strict). Under exchangeability, the chance
//! that an accepted auction's true regret exceeds `epsilon` is at most
//! `alpha`; the Monte Carlo auditor here measures exactly that event.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::auction::{AuctionOutcome, ValuationProfile};
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorParams};
use crate::mechanism::MechanismParams;
use crate::regret::MisreportSearchConfig;
use crate::scalar::Scalar;

/// Conformal index `k = ceil((n+1)(1-alpha))` for a size-`n` calibration set.
pub fn conformal_index(n: usize, alpha: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let k = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    if k > n || n == 0 {
        return Err(Error::CalibrationTooSmall { n, alpha });
    }
    Ok(k)
}

fn total_cmp<T: Scalar>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// The k-th smallest residual at the conformal index.
pub fn conformal_quantile<T: Scalar>(residuals: &[T], alpha: f64) -> Result<T> {
    let k = conformal_index(residuals.len(), alpha)?;
    let mut work = residuals.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, total_cmp);
    Ok(*kth)
}

/// Calibration residuals and the quantile they imply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult<T> {
    /// Ascending.
    pub residuals: Array1<T>,
    pub q_alpha: T,
    pub alpha: f64,
    pub n_cal: usize,
}

/// JSON summary of a calibration: the quantile plus a residual digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub alpha: f64,
    pub n_cal: usize,
    pub q_alpha: f64,
    pub residuals_digest: ResidualsDigest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualsDigest {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub k_index: usize,
}

impl<T: Scalar> CalibrationResult<T> {
    /// Builds the result from raw (regret, prediction) pairs.
    pub fn from_pairs(
        regrets: ArrayView1<'_, T>,
        predictions: ArrayView1<'_, T>,
        alpha: f64,
    ) -> Result<Self> {
        if regrets.len() != predictions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} regrets vs {} predictions",
                regrets.len(),
                predictions.len()
            )));
        }
        let k = conformal_index(regrets.len(), alpha)?;
        let mut residuals: Vec<T> = regrets
            .iter()
            .zip(predictions)
            .map(|(&r, &p)| r - p)
            .collect();
        residuals.sort_by(total_cmp);
        let q_alpha = residuals[k - 1];
        Ok(Self {
            residuals: Array1::from_vec(residuals),
            q_alpha,
            alpha,
            n_cal: regrets.len(),
        })
    }

    pub fn summary(&self) -> CalibrationSummary {
        let n = self.n_cal as f64;
        CalibrationSummary {
            alpha: self.alpha,
            n_cal: self.n_cal,
            q_alpha: self.q_alpha.to_f64_lossy(),
            residuals_digest: ResidualsDigest {
                min: self.residuals[0].to_f64_lossy(),
                max: self.residuals[self.n_cal - 1].to_f64_lossy(),
                mean: self.residuals.iter().map(|r| r.to_f64_lossy()).sum::<f64>() / n,
                k_index: conformal_index(self.n_cal, self.alpha).expect("validated on build"),
            },
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &self.summary())?;
        Ok(())
    }
}

/// End-to-end calibration: search true regrets on the calibration set,
/// predict, take residuals.
pub fn calibrate<T: Scalar>(
    mechanism: &MechanismParams<T>,
    est: &EstimatorParams<T>,
    cal_set: &[ValuationProfile<T>],
    alpha: f64,
    search: &MisreportSearchConfig,
    seed: u64,
) -> Result<CalibrationResult<T>> {
    conformal_index(cal_set.len(), alpha)?;
    let regrets = estimator::label_regrets(mechanism, cal_set, search, seed)?;
    let mut flat = Array2::zeros((cal_set.len(), mechanism.input_width()));
    for (p, profile) in cal_set.iter().enumerate() {
        flat.row_mut(p).assign(&profile.flatten());
    }
    let predictions = estimator::predict_regret_batch(est, mechanism, flat.view())?;
    CalibrationResult::from_pairs(regrets.view(), predictions.view(), alpha)
}

/// The calibrated gate.
#[derive(Clone, Copy, Debug)]
pub struct AcceptanceRule<'a, T> {
    pub mechanism: &'a MechanismParams<T>,
    pub estimator: &'a EstimatorParams<T>,
    pub epsilon: T,
    pub q_alpha: T,
    pub alpha: f64,
}

/// Outcome of the gate on one auction; both arms carry the prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision<T> {
    Accepted { outcome: AuctionOutcome<T>, predicted: T },
    Rejected { predicted: T },
}

/// The bare threshold test: accept iff `predicted < epsilon - q_alpha`.
pub fn accepts<T: Scalar>(predicted: T, epsilon: T, q_alpha: T) -> bool {
    predicted < epsilon - q_alpha
}

/// Runs the gate: predict, compare, and only on acceptance run the
/// mechanism. No regret search happens here — the gate is purely predictive.
pub fn accept<T: Scalar>(rule: &AcceptanceRule<'_, T>, bids: &ValuationProfile<T>) -> Result<Decision<T>> {
    let predicted = estimator::predict_regret(rule.estimator, rule.mechanism, bids)?;
    if accepts(predicted, rule.epsilon, rule.q_alpha) {
        let (outcome, _) = rule.mechanism.run_mechanism(bids)?;
        Ok(Decision::Accepted { outcome, predicted })
    } else {
        Ok(Decision::Rejected { predicted })
    }
}

/// One audited auction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub auction_id: usize,
    pub regret: f64,
    pub predicted_regret: f64,
    pub accepted: bool,
}

/// Aggregate audit statistics over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub alpha: f64,
    pub epsilon: f64,
    pub q_alpha: f64,
    pub acceptance_rate: f64,
    /// Fraction of test auctions both accepted and with regret > epsilon —
    /// the coverage-guarantee event.
    pub violation_rate: f64,
    pub max_accepted_regret: f64,
    pub revenue_mean_accepted: f64,
    pub n_test: usize,
    #[serde(skip)]
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Per-auction CSV: `auction_id,regret,predicted_regret,accepted`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "auction_id,regret,predicted_regret,accepted")?;
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                row.auction_id, row.regret, row.predicted_regret, row.accepted
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<AuditRow>> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for record in reader.deserialize() {
            rows.push(record?);
        }
        Ok(rows)
    }
}

/// Audits precomputed (regret, prediction) pairs against the gate; the
/// shared core of the Monte Carlo validation and the end-to-end audit.
/// `revenues`, when given, feeds the accepted-revenue mean.
pub fn audit_pairs<T: Scalar>(
    regrets: ArrayView1<'_, T>,
    predictions: ArrayView1<'_, T>,
    epsilon: T,
    q_alpha: T,
    alpha: f64,
    revenues: Option<ArrayView1<'_, T>>,
) -> Result<AuditReport> {
    if regrets.len() != predictions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} regrets vs {} predictions",
            regrets.len(),
            predictions.len()
        )));
    }
    let n = regrets.len();
    let mut rows = Vec::with_capacity(n);
    let mut accepted = 0usize;
    let mut violations = 0usize;
    let mut max_accepted = 0.0f64;
    let mut revenue_sum = 0.0f64;
    for i in 0..n {
        let ok = accepts(predictions[i], epsilon, q_alpha);
        if ok {
            accepted += 1;
            max_accepted = max_accepted.max(regrets[i].to_f64_lossy());
            if regrets[i] > epsilon {
                violations += 1;
            }
            if let Some(rev) = revenues {
                revenue_sum += rev[i].to_f64_lossy();
            }
        }
        rows.push(AuditRow {
            auction_id: i,
            regret: regrets[i].to_f64_lossy(),
            predicted_regret: predictions[i].to_f64_lossy(),
            accepted: ok,
        });
    }
    let denom = n.max(1) as f64;
    Ok(AuditReport {
        alpha,
        epsilon: epsilon.to_f64_lossy(),
        q_alpha: q_alpha.to_f64_lossy(),
        acceptance_rate: accepted as f64 / denom,
        violation_rate: violations as f64 / denom,
        max_accepted_regret: max_accepted,
        revenue_mean_accepted: if accepted > 0 {
            revenue_sum / accepted as f64
        } else {
            0.0
        },
        n_test: n,
        rows,
    })
}

/// Full Monte Carlo audit of the gate on fresh profiles: searches the true
/// regrets, predicts, and measures the coverage-guarantee violation event.
pub fn audit_coverage<T: Scalar>(
    rule: &AcceptanceRule<'_, T>,
    test_set: &[ValuationProfile<T>],
    search: &MisreportSearchConfig,
    seed: u64,
) -> Result<AuditReport> {
    let mechanism = rule.mechanism;
    let regrets = estimator::label_regrets(mechanism, test_set, search, seed)?;
    let mut flat = Array2::zeros((test_set.len(), mechanism.input_width()));
    for (p, profile) in test_set.iter().enumerate() {
        flat.row_mut(p).assign(&profile.flatten());
    }
    let predictions = estimator::predict_regret_batch(rule.estimator, mechanism, flat.view())?;
    let fwd = mechanism.forward_batch(flat.view())?;
    let (n, m) = (mechanism.n_bidders, mechanism.n_items);
    let mut revenues = Array1::zeros(test_set.len());
    for p in 0..test_set.len() {
        let mut revenue = T::zero();
        for i in 0..n {
            let mut reported = T::zero();
            for j in 0..m {
                reported += flat[[p, i * m + j]] * fwd.shares()[[p, i * m + j]];
            }
            revenue += fwd.fractions()[[p, i]] * reported;
        }
        revenues[p] = revenue;
    }
    audit_pairs(
        regrets.view(),
        predictions.view(),
        rule.epsilon,
        rule.q_alpha,
        rule.alpha,
        Some(revenues.view()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::{sample_valuations, AuctionConfig};
    use crate::estimator::EstimatorConfig;
    use crate::mechanism::ArchitectureSpec;
    use approx::assert_relative_eq;
    use ndarray::arr1;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn hand_index_example() {
        let q = conformal_quantile(&[0.01, 0.02, 0.03, 0.04], 0.2).unwrap();
        assert_eq!(q, 0.04);
        // Unsorted input, same answer.
        let q = conformal_quantile(&[0.04, 0.01, 0.03, 0.02], 0.2).unwrap();
        assert_eq!(q, 0.04);
    }

    #[test]
    fn too_small_calibration_set_is_an_error() {
        let err = conformal_quantile(&[0.05], 0.4);
        assert!(matches!(err, Err(Error::CalibrationTooSmall { n: 1, .. })));
        assert!(conformal_quantile::<f64>(&[], 0.1).is_err());
        assert!(conformal_quantile(&[0.1, 0.2], 1.0).is_err());
        assert!(conformal_quantile(&[0.1, 0.2], 0.0).is_err());
    }

    #[test]
    fn uniform_residual_quantile_matches_order_statistics() {
        let mut rng = crate::seeding::rng_from(77);
        let residuals: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let q = conformal_quantile(&residuals, 0.1).unwrap();
        assert!((q - 0.90).abs() < 0.01, "q {q}");
    }

    #[test]
    fn quantile_matches_full_sort_oracle() {
        let mut rng = crate::seeding::rng_from(5);
        for trial in 0..200 {
            let n = rng.gen_range(1..=2000);
            let residuals: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            for alpha in [0.01, 0.05, 0.1, 0.2] {
                let expect = match conformal_index(n, alpha) {
                    Ok(k) => {
                        let mut sorted = residuals.clone();
                        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        Some(sorted[k - 1])
                    }
                    Err(_) => None,
                };
                let got = conformal_quantile(&residuals, alpha).ok();
                assert_eq!(got, expect, "trial {trial} n {n} alpha {alpha}");
            }
        }
    }

    #[test]
    fn perfect_estimator_gives_zero_quantile() {
        let regrets = arr1(&[0.01, 0.02, 0.03, 0.04, 0.05]);
        let result =
            CalibrationResult::from_pairs(regrets.view(), regrets.view(), 0.2).unwrap();
        assert_eq!(result.q_alpha, 0.0);
        assert!(result.residuals.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn constant_overprediction_shifts_the_quantile() {
        let regrets = arr1(&[0.01, 0.02, 0.03, 0.04, 0.05]);
        let preds = regrets.mapv(|r| r + 0.1);
        let result = CalibrationResult::from_pairs(regrets.view(), preds.view(), 0.2).unwrap();
        assert_relative_eq!(result.q_alpha, -0.1, max_relative = 1e-12);
    }

    #[test]
    fn acceptance_boundary_is_strict() {
        assert!(accepts(0.019, 0.025, 0.005));
        assert!(!accepts(0.020, 0.025, 0.005));
        // q_alpha >= epsilon rejects everything with clamped predictions.
        assert!(!accepts(0.0, 0.025, 0.025));
        assert!(!accepts(0.0, 0.025, 0.030));
    }

    #[test]
    fn audit_pairs_counts_the_violation_event() {
        let regrets = arr1(&[0.01, 0.06, 0.02, 0.08]);
        let preds = arr1(&[0.005, 0.010, 0.100, 0.015]);
        // epsilon 0.05, q 0: accept rows 0, 1, 3; rows 1 and 3 violate.
        let report =
            audit_pairs(regrets.view(), preds.view(), 0.05, 0.0, 0.1, None).unwrap();
        assert_relative_eq!(report.acceptance_rate, 0.75);
        assert_relative_eq!(report.violation_rate, 0.5);
        assert_relative_eq!(report.max_accepted_regret, 0.08);
        assert_eq!(report.rows.len(), 4);
        assert!(!report.rows[2].accepted);
    }

    #[test]
    fn reject_everything_rule_audits_clean() {
        let regrets = arr1(&[0.5, 0.9]);
        let preds = arr1(&[0.0, 0.0]);
        let report =
            audit_pairs(regrets.view(), preds.view(), 0.05, 0.06, 0.1, None).unwrap();
        assert_eq!(report.acceptance_rate, 0.0);
        assert_eq!(report.violation_rate, 0.0);
        assert_eq!(report.max_accepted_regret, 0.0);
    }

    #[test]
    fn raising_epsilon_never_rejects_an_accepted_auction() {
        let mut rng = crate::seeding::rng_from(31);
        let preds: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() * 0.1).collect();
        let q = 0.004;
        for _ in 0..50 {
            let lo = rng.gen::<f64>() * 0.1;
            let hi = lo + rng.gen::<f64>() * 0.05;
            for &p in &preds {
                if accepts(p, lo, q) {
                    assert!(accepts(p, hi, q));
                }
            }
        }
    }

    #[test]
    fn gate_runs_the_mechanism_only_on_acceptance() {
        let auction = AuctionConfig::new(2, 2).unwrap();
        let spec = ArchitectureSpec {
            n_hidden_layers: 2,
            hidden_size: 8,
            shared_trunk: true,
        };
        let mechanism = MechanismParams::<f64>::init(&auction, spec, 3);
        let est = EstimatorParams::init(
            &mechanism,
            crate::estimator::EstimatorMode::BlackBox,
            &EstimatorConfig {
                n_hidden_layers: 1,
                hidden_size: 4,
                ..EstimatorConfig::default()
            },
            9,
        )
        .unwrap();
        let profile = &sample_valuations::<f64>(&auction, 1, 6)[0];
        let predicted = estimator::predict_regret(&est, &mechanism, profile).unwrap();
        let loose = AcceptanceRule {
            mechanism: &mechanism,
            estimator: &est,
            epsilon: predicted + 1.0,
            q_alpha: 0.0,
            alpha: 0.1,
        };
        match accept(&loose, profile).unwrap() {
            Decision::Accepted { predicted: p, .. } => assert_eq!(p, predicted),
            Decision::Rejected { .. } => panic!("loose gate rejected"),
        }
        let tight = AcceptanceRule { epsilon: predicted, ..loose };
        assert!(matches!(
            accept(&tight, profile).unwrap(),
            Decision::Rejected { .. }
        ));
    }

    #[test]
    fn calibration_summary_round_trips_to_json() {
        let regrets = arr1(&[0.03, 0.01, 0.04, 0.02]);
        let preds = arr1(&[0.0, 0.0, 0.0, 0.0]);
        let result = CalibrationResult::from_pairs(regrets.view(), preds.view(), 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        result.write_json(&path).unwrap();
        let summary: CalibrationSummary =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(summary, result.summary());
        assert_eq!(summary.residuals_digest.k_index, 4);
        assert_eq!(summary.q_alpha, 0.04);
    }

    proptest! {
        #[test]
        fn quantile_is_shift_equivariant(
            base in proptest::collection::vec(-1.0f64..1.0, 2..200),
            shift in -5.0f64..5.0,
        ) {
            let alpha = 0.2;
            if let Ok(q) = conformal_quantile(&base, alpha) {
                let shifted: Vec<f64> = base.iter().map(|&e| e + shift).collect();
                let qs = conformal_quantile(&shifted, alpha).unwrap();
                prop_assert!((qs - (q + shift)).abs() < 1e-12);
            }
        }

        #[test]
        fn sorted_residuals_and_quantile_agree(
            regrets in proptest::collection::vec(0.0f64..1.0, 4..100),
            preds in proptest::collection::vec(0.0f64..1.0, 4..100),
        ) {
            let n = regrets.len().min(preds.len());
            let r = Array1::from_vec(regrets[..n].to_vec());
            let p = Array1::from_vec(preds[..n].to_vec());
            if let Ok(result) = CalibrationResult::from_pairs(r.view(), p.view(), 0.25) {
                for w in result.residuals.as_slice().unwrap().windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
                let residuals: Vec<f64> =
                    r.iter().zip(&p).map(|(&a, &b)| a - b).collect();
                prop_assert_eq!(result.q_alpha, conformal_quantile(&residuals, 0.25).unwrap());
            }
        }
    }
}
