//! Acceptance suite: one test (and one printed pass line) per criterion.
//!
//! 1. Monte Carlo check of the conformal coverage bound on synthetic pairs.
//! 2. Conformal quantile vs a full-sort oracle.
//! 3. Gradients vs central finite differences on random nets.
//! 4. Misreport search vs analytic and grid-oracle regrets.
//! 5. Desk-scale 2x2 training bands and wall clock.
//! 6. Gated pipeline end-to-end on the desk-scale mechanism.
//! 7. Structural invariants over random (parameters, bids) pairs.
//! 8. Byte-identical reruns of the full pipeline.
//!
//! Criteria 4-6 share one desk-scale trained mechanism (`DESK`), so the
//! first of them to run pays the training cost once.

use std::path::Path;
use std::sync::LazyLock;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use confauction::auction::{check_feasible, sample_valuations, AuctionConfig, ValuationProfile};
use confauction::conformal::{audit_pairs, conformal_index, conformal_quantile, CalibrationResult};
use confauction::estimator::{
    label_regrets_any, predict_regret_batch, train_estimator, EstimatorConfig, EstimatorMode,
};
use confauction::mechanism::adapters::{FirstPriceAuction, SecondPriceAuction};
use confauction::mechanism::{ArchitectureSpec, Mechanism, MechanismParams};
use confauction::nn::{finite_diff_check, DenseNet, OutputActivation};
use confauction::regret::{grid_oracle_regret, regret_batch, MisreportSearchConfig};
use confauction::seeding::{rng_from, subseed};
use confauction::training::{train, TrainConfig};
use confauction::Error;

// ---------------------------------------------------------------------------
// Shared desk-scale run (criteria 4-6).

const DESK_N_TEST: usize = 2000;

struct Desk {
    params: MechanismParams<f32>,
    train_minutes: f64,
    test: Vec<ValuationProfile<f32>>,
    /// Per-profile max regret under the evaluation search.
    test_regrets: Array1<f32>,
    /// Per-profile truthful revenue.
    test_revenues: Array1<f32>,
}

fn desk_eval_search() -> MisreportSearchConfig {
    MisreportSearchConfig {
        learning_rate: 0.1,
        iterations: 100,
        initializations: 20,
        include_truthful_start: true,
    }
}

static DESK: LazyLock<Desk> = LazyLock::new(|| {
    let auction = AuctionConfig::new(2, 2).unwrap();
    let spec = ArchitectureSpec {
        n_hidden_layers: 5,
        hidden_size: 100,
        shared_trunk: true,
    };
    let cfg = TrainConfig::default();
    let data = sample_valuations::<f32>(&auction, cfg.n_train_samples, 1);
    let start = Instant::now();
    let (params, _) = train(&auction, spec, &cfg, &data, 1).unwrap();
    let train_minutes = start.elapsed().as_secs_f64() / 60.0;

    let test = sample_valuations::<f32>(&auction, DESK_N_TEST, 3);
    let reports = regret_batch(&params, &test, &desk_eval_search(), 77).unwrap();
    let test_regrets = reports.iter().map(|r| r.max_regret).collect();
    let test_revenues = test
        .iter()
        .map(|profile| {
            let (outcome, _) = params.run_mechanism(profile).unwrap();
            outcome.payments.amounts().sum()
        })
        .collect();
    Desk {
        params,
        train_minutes,
        test,
        test_regrets,
        test_revenues,
    }
});

// ---------------------------------------------------------------------------
// Criterion 1: Monte Carlo check of the conformal coverage bound.

/// Synthetic exchangeable pair generator: true regrets r ~ U[0, 0.1] and
/// predictions r_hat = max(0, r + N(0, 0.02)), i.i.d. across the combined
/// calibration + test draw of one repetition.
fn synthetic_pairs(rng: &mut impl Rng, count: usize) -> (Array1<f64>, Array1<f64>) {
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut regrets = Array1::zeros(count);
    let mut predicted = Array1::zeros(count);
    for i in 0..count {
        let r: f64 = rng.gen::<f64>() * 0.1;
        regrets[i] = r;
        predicted[i] = (r + noise.sample(rng)).max(0.0);
    }
    (regrets, predicted)
}

fn mean_violation_rate(alpha: f64, reps: usize, master: u64) -> f64 {
    let epsilon = 0.05;
    let mut total = 0.0;
    for rep in 0..reps {
        let mut rng = rng_from(subseed(master, &[rep as u64]));
        let (cal_r, cal_p) = synthetic_pairs(&mut rng, 200);
        let (test_r, test_p) = synthetic_pairs(&mut rng, 200);
        let cal = CalibrationResult::from_pairs(cal_r.view(), cal_p.view(), alpha).unwrap();
        let report = audit_pairs(
            test_r.view(),
            test_p.view(),
            epsilon,
            cal.q_alpha,
            alpha,
            None,
        )
        .unwrap();
        total += report.violation_rate;
    }
    total / reps as f64
}

#[test]
fn criterion_1_coverage_monte_carlo_bound() {
    let start = Instant::now();
    let at_10 = mean_violation_rate(0.1, 1000, 101);
    let at_01 = mean_violation_rate(0.01, 1000, 102);
    let secs = start.elapsed().as_secs_f64();
    assert!(at_10 <= 0.10 + 0.02, "alpha 0.1: mean violation {at_10}");
    assert!(at_01 <= 0.01 + 0.01, "alpha 0.01: mean violation {at_01}");
    assert!(secs < 120.0, "runtime {secs}s exceeds 2 minutes");
    println!(
        "criterion 1 PASS: mean violation rate {at_10:.4} <= 0.12 (alpha 0.1), \
         {at_01:.4} <= 0.02 (alpha 0.01), {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: conformal quantile vs full-sort oracle.

#[test]
fn criterion_2_quantile_matches_sort_oracle() {
    let mut rng = rng_from(2);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let size = rng.gen_range(1..=5000);
        let residuals: Vec<f64> = (0..size).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut sorted = residuals.clone();
        sorted.sort_by(f64::total_cmp);
        for alpha in [0.01, 0.05, 0.1, 0.2] {
            let fast = conformal_quantile(&residuals, alpha);
            let oracle = conformal_index(size, alpha).map(|k| sorted[k - 1]);
            match (fast, oracle) {
                (Ok(a), Ok(b)) => assert_eq!(a, b, "size {size} alpha {alpha}"),
                (Err(Error::CalibrationTooSmall { .. }), Err(Error::CalibrationTooSmall { .. })) => {}
                (a, b) => panic!("size {size} alpha {alpha}: {a:?} vs {b:?}"),
            }
            checked += 1;
        }
    }
    println!("criterion 2 PASS: {checked} quantile evaluations, zero mismatches");
}

// ---------------------------------------------------------------------------
// Criterion 3: gradients vs central finite differences.

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    let mut nets = 0usize;

    // Standalone nets over every output activation, including the
    // mechanism's column-softmax head.
    for seed in 0..30u64 {
        let mut rng = rng_from(subseed(3, &[seed]));
        let input = rng.gen_range(2..=5);
        let hidden: Vec<usize> = (0..rng.gen_range(1..=3))
            .map(|_| rng.gen_range(3..=8))
            .collect();
        let (activation, output) = match seed % 4 {
            0 => (OutputActivation::Linear, rng.gen_range(1..=4)),
            1 => (OutputActivation::Relu, rng.gen_range(1..=4)),
            2 => (OutputActivation::Sigmoid, rng.gen_range(1..=4)),
            _ => {
                let (rows, cols) = (rng.gen_range(2..=3), rng.gen_range(1..=2));
                (OutputActivation::ColumnSoftmax { rows, cols }, rows * cols)
            }
        };
        let mut sizes = vec![input];
        sizes.extend(hidden);
        sizes.push(output);
        let net = DenseNet::<f64>::init(&sizes, activation, seed);
        let x = Array1::from_shape_simple_fn(input, || rng.gen::<f64>() * 2.0 - 1.0);
        let report = finite_diff_check(&net, x.view(), 1e-5).unwrap();
        assert!(report.checked > 0, "net {seed}: nothing checked");
        assert!(
            report.max_rel_error < 1e-4,
            "net {seed}: max rel error {}",
            report.max_rel_error
        );
        worst = worst.max(report.max_rel_error);
        nets += 1;
    }

    // Full mechanisms: bid-input gradients through trunk, softmax allocation
    // head and sigmoid payment head at once. A probe whose two step sizes
    // disagree straddles a ReLU kink and is skipped.
    let auction = AuctionConfig::new(2, 2).unwrap();
    for seed in 0..20u64 {
        let spec = ArchitectureSpec {
            n_hidden_layers: 2 + (seed as usize % 2),
            hidden_size: 8,
            shared_trunk: seed % 2 == 0,
        };
        let params = MechanismParams::<f64>::init(&auction, spec, seed);
        let mut rng = rng_from(subseed(4, &[seed]));
        let (n, m) = (2usize, 2usize);
        let bids = Array2::from_shape_simple_fn((n, n * m), || rng.gen::<f64>());
        let mut rng2 = rng_from(subseed(5, &[seed]));
        let true_values = Array2::from_shape_simple_fn((n, m), || rng2.gen::<f64>());
        let bidders: Vec<usize> = (0..n).collect();
        let (_, grads) = params
            .utility_and_bid_grad_batch(bids.view(), true_values.view(), &bidders)
            .unwrap();
        for r in 0..n {
            let i = bidders[r];
            for j in 0..m {
                let fd_at = |h: f64| {
                    let mut plus = bids.clone();
                    let mut minus = bids.clone();
                    plus[[r, i * m + j]] += h;
                    minus[[r, i * m + j]] -= h;
                    let up = params
                        .utilities_batch(plus.view(), true_values.view(), &bidders)
                        .unwrap()[r];
                    let down = params
                        .utilities_batch(minus.view(), true_values.view(), &bidders)
                        .unwrap()[r];
                    (up - down) / (2.0 * h)
                };
                let (fd1, fd2) = (fd_at(1e-5), fd_at(5e-6));
                let scale = fd1.abs().max(grads[[r, j]].abs()).max(1e-4);
                if (fd1 - fd2).abs() > 1e-4 * scale {
                    continue; // kink straddled
                }
                let rel = (fd1 - grads[[r, j]]).abs() / scale;
                assert!(rel < 1e-4, "mechanism {seed} bid ({r},{j}): rel error {rel}");
                worst = worst.max(rel);
            }
        }
        nets += 1;
    }
    println!("criterion 3 PASS: {nets} nets, max relative error {worst:.2e} < 1e-4");
}

// ---------------------------------------------------------------------------
// Criterion 4: misreport oracle equivalence.

#[test]
fn criterion_4_misreport_oracle_equivalence() {
    // Second price: exactly zero regret on 1,000 profiles.
    let auction = AuctionConfig::new(2, 1).unwrap();
    let second = SecondPriceAuction { n_bidders: 2 };
    let profiles = sample_valuations::<f64>(&auction, 1000, 17);
    let search = MisreportSearchConfig::train_default();
    let labels = label_regrets_any(&second, &profiles, &search, 5).unwrap();
    assert!(labels.iter().all(|&r| r == 0.0), "nonzero second-price regret");

    // First price at v = (1.0, 0.5): 0.5 analytic shading gain.
    let first = FirstPriceAuction { n_bidders: 2 };
    let profile =
        ValuationProfile::new(ndarray::arr2(&[[1.0], [0.5]])).unwrap();
    let fine = MisreportSearchConfig {
        learning_rate: 0.001,
        iterations: 300,
        initializations: 30,
        include_truthful_start: true,
    };
    let report = confauction::regret::regret(&first, &profile, &fine, 11).unwrap();
    let gain: f64 = report.per_bidder[0];
    assert!((gain - 0.5).abs() < 2e-3, "first-price gain {gain}");

    // Trained 2x2 mechanism: gradient ascent within 0.02 of the grid oracle.
    let desk = &*DESK;
    let mut worst: f64 = 0.0;
    for (p, profile) in desk.test.iter().take(100).enumerate() {
        let mut grid_max = 0.0f32;
        for bidder in 0..2 {
            let g = grid_oracle_regret(&desk.params, profile, bidder, 0.02).unwrap();
            grid_max = grid_max.max(g);
        }
        let diff = (desk.test_regrets[p] as f64 - grid_max as f64).abs();
        worst = worst.max(diff);
        assert!(
            diff <= 0.02,
            "profile {p}: search {} vs grid {grid_max}",
            desk.test_regrets[p]
        );
    }
    println!(
        "criterion 4 PASS: second-price exact zero, first-price within 2e-3, \
         trained max |search - grid| = {worst:.4} <= 0.02"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: desk-scale 2x2 reproduction bands.

#[test]
fn criterion_5_desk_scale_reproduction() {
    let desk = &*DESK;
    let revenue = desk.test_revenues.iter().map(|&r| r as f64).sum::<f64>()
        / desk.test.len() as f64;
    let regret = desk.test_regrets.iter().map(|&r| r as f64).sum::<f64>()
        / desk.test.len() as f64;
    assert!(
        desk.train_minutes <= 30.0,
        "training took {:.1} min",
        desk.train_minutes
    );
    assert!(revenue >= 0.70, "test revenue {revenue:.4} < 0.70");
    assert!(regret <= 0.02, "mean test regret {regret:.5} > 0.02");
    println!(
        "criterion 5 PASS: revenue {revenue:.4} >= 0.70, mean regret {regret:.5} <= 0.02, \
         training {:.1} min <= 30",
        desk.train_minutes
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: gated pipeline end-to-end on the desk-scale mechanism.

#[test]
fn criterion_6_gated_pipeline_end_to_end() {
    let desk = &*DESK;
    let auction = AuctionConfig::new(2, 2).unwrap();

    // Fit the regret estimator against the frozen mechanism.
    let est_data = sample_valuations::<f32>(&auction, 5000, 4);
    let label_search = MisreportSearchConfig {
        learning_rate: 0.1,
        iterations: 100,
        initializations: 10,
        include_truthful_start: true,
    };
    let labels =
        confauction::estimator::label_regrets(&desk.params, &est_data, &label_search, 21).unwrap();
    let est_cfg = EstimatorConfig {
        epochs: 50,
        ..EstimatorConfig::default()
    };
    let (est, _) = train_estimator(
        &desk.params,
        &est_data,
        &labels,
        EstimatorMode::BlackBox,
        &est_cfg,
        22,
    )
    .unwrap();

    // Calibrate at alpha = 0.01.
    let alpha = 0.01;
    let cal = sample_valuations::<f32>(&auction, 2000, 2);
    let cal_regrets =
        confauction::estimator::label_regrets(&desk.params, &cal, &desk_eval_search(), 23).unwrap();
    let cal_flat = flatten_profiles(&cal);
    let cal_preds = predict_regret_batch(&est, &desk.params, cal_flat.view()).unwrap();
    let calib =
        CalibrationResult::from_pairs(cal_regrets.view(), cal_preds.view(), alpha).unwrap();

    // Epsilon: empirical 0.9-quantile of the ungated test regrets.
    let mut sorted: Vec<f32> = DESK.test_regrets.to_vec();
    sorted.sort_by(f32::total_cmp);
    let epsilon = sorted[(0.9 * sorted.len() as f64) as usize];

    let test_flat = flatten_profiles(&desk.test);
    let test_preds = predict_regret_batch(&est, &desk.params, test_flat.view()).unwrap();
    let report = audit_pairs(
        desk.test_regrets.view(),
        test_preds.view(),
        epsilon,
        calib.q_alpha,
        alpha,
        Some(desk.test_revenues.view()),
    )
    .unwrap();

    let ungated_revenue = desk.test_revenues.iter().map(|&r| r as f64).sum::<f64>()
        / desk.test.len() as f64;
    let accepted_violation = if report.acceptance_rate > 0.0 {
        report.violation_rate / report.acceptance_rate
    } else {
        1.0
    };
    assert!(
        report.acceptance_rate >= 0.60,
        "acceptance rate {:.4} < 0.60 (q_alpha {}, epsilon {epsilon})",
        report.acceptance_rate,
        calib.q_alpha
    );
    assert!(
        accepted_violation <= 0.01,
        "{:.4} of accepted auctions exceed epsilon",
        accepted_violation
    );
    let revenue_gap = (report.revenue_mean_accepted - ungated_revenue).abs() / ungated_revenue;
    assert!(
        revenue_gap <= 0.10,
        "accepted revenue {:.4} vs ungated {ungated_revenue:.4}: gap {revenue_gap:.4}",
        report.revenue_mean_accepted
    );
    println!(
        "criterion 6 PASS: acceptance {:.4} >= 0.60, accepted violations {accepted_violation:.4} \
         <= 0.01, revenue gap {revenue_gap:.4} <= 0.10 (epsilon {epsilon:.5}, q_alpha {:.5})",
        report.acceptance_rate, calib.q_alpha
    );
}

fn flatten_profiles(profiles: &[ValuationProfile<f32>]) -> Array2<f32> {
    let width = profiles[0].n_bidders() * profiles[0].n_items();
    let mut flat = Array2::zeros((profiles.len(), width));
    for (p, profile) in profiles.iter().enumerate() {
        flat.row_mut(p).assign(&profile.flatten());
    }
    flat
}

// ---------------------------------------------------------------------------
// Criterion 7: structural invariants.

#[test]
fn criterion_7_structural_invariants() {
    let auction = AuctionConfig::new(2, 2).unwrap();
    let mut pairs = 0usize;
    for theta in 0..100u64 {
        let spec = ArchitectureSpec {
            n_hidden_layers: 2 + (theta as usize % 3),
            hidden_size: [8, 16, 32][theta as usize % 3],
            shared_trunk: theta % 2 == 0,
        };
        let params = MechanismParams::<f64>::init(&auction, spec, theta);
        for (b, bids) in sample_valuations::<f64>(&auction, 100, subseed(7, &[theta]))
            .iter()
            .enumerate()
        {
            let (outcome, _) = params.run_mechanism(bids).unwrap();
            assert!(
                check_feasible(&outcome.allocation, 1e-6),
                "theta {theta} bids {b}: infeasible allocation"
            );
            for i in 0..2 {
                let u = params.utility(bids.row(i), bids, i).unwrap();
                assert!(u >= -1e-6, "theta {theta} bids {b} bidder {i}: IR violated, u = {u}");
            }
            pairs += 1;
        }
    }
    assert_eq!(pairs, 10_000);

    // Regret values are nonnegative by construction of the search.
    let params = MechanismParams::<f64>::init(
        &auction,
        ArchitectureSpec {
            n_hidden_layers: 3,
            hidden_size: 16,
            shared_trunk: true,
        },
        99,
    );
    let profiles = sample_valuations::<f64>(&auction, 50, 123);
    let search = MisreportSearchConfig {
        iterations: 10,
        initializations: 4,
        ..MisreportSearchConfig::train_default()
    };
    let reports = regret_batch(&params, &profiles, &search, 9).unwrap();
    assert!(reports
        .iter()
        .all(|r| r.per_bidder.iter().all(|&g| g >= 0.0)));

    // The emitted running-max plot series is monotone.
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny_pipeline(dir.path(), "out");
    let text = std::fs::read_to_string(out.join("plots/running_max.csv")).unwrap();
    let mut last = f64::NEG_INFINITY;
    let mut rows = 0usize;
    for line in text.lines().skip(1) {
        let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(value >= last, "running max decreases at {line}");
        last = value;
        rows += 1;
    }
    assert!(rows > 0);
    println!(
        "criterion 7 PASS: 10,000 (theta, b) pairs feasible and IR, all regrets >= 0, \
         running-max series monotone over {rows} rows"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism of the full pipeline.

const TINY_CONFIG: &str = r#"
precision = "f64"
alpha = 0.2
epsilon = 0.025
n_train = 64
n_cal = 32
n_test = 32
n_estimator = 64

[auction]
n_bidders = 2
n_items = 2

[architecture]
n_hidden_layers = 2
hidden_size = 8
shared_trunk = true

[train]
epochs = 2
batch_size = 16

[train.misreport]
learning_rate = 0.1
iterations = 3
initializations = 2
include_truthful_start = true

[estimator]
epochs = 2
batch_size = 16
n_hidden_layers = 1
hidden_size = 8

[eval_search]
learning_rate = 0.1
iterations = 5
initializations = 3
include_truthful_start = true
"#;

fn run_tiny_pipeline(dir: &Path, out_name: &str) -> std::path::PathBuf {
    let config = dir.join("config.toml");
    if !config.exists() {
        std::fs::write(&config, TINY_CONFIG).unwrap();
    }
    let out = dir.join(out_name);
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_confauction"))
        .args([
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "pipeline",
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    out
}

#[test]
fn criterion_8_pipeline_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = run_tiny_pipeline(dir.path(), "a");
    let out_b = run_tiny_pipeline(dir.path(), "b");
    let mut compared = 0usize;
    for name in [
        "train.csv",
        "cal.csv",
        "test.csv",
        "mechanism.json",
        "estimator.json",
        "calibration.json",
        "audit.json",
        "audit.csv",
        "report.json",
        "plots/epsilon_sweep.csv",
        "plots/regret_histogram.csv",
        "plots/running_max.csv",
        "plots/accept_reject.csv",
        "plots/joint.csv",
    ] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        compared += 1;
    }
    println!("criterion 8 PASS: {compared} artifacts byte-identical across reruns");
}
