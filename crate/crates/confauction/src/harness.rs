//! End-to-end experiment driver over a filesystem output directory.
//!
//! Each step reads its inputs from and writes its artifacts into one
//! directory: datasets (`train.csv`, `cal.csv`, `test.csv`), checkpoints
//! (`mechanism.json`, `estimator.json`), the training log, calibration and
//! audit results, the final report, and plot-data CSVs. Steps are
//! restartable: `pipeline` runs them all in order.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::auction::{
    read_profiles_csv, sample_valuations, write_profiles_csv, AuctionConfig, ValuationProfile,
};
use crate::checkpoint;
use crate::conformal::{
    accepts, audit_pairs, AuditReport, CalibrationResult, CalibrationSummary,
};
use crate::error::{Error, Result};
use crate::estimator::{
    label_regrets, predict_regret_batch, train_estimator, EstimatorConfig, EstimatorMode,
    EstimatorParams,
};
use crate::mechanism::{ArchitectureSpec, MechanismParams};
use crate::regret::MisreportSearchConfig;
use crate::scalar::Scalar;
use crate::seeding::subseed;
use crate::training::{train, TrainConfig};

/// Dataset split names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Cal,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Cal => "cal.csv",
            Split::Test => "test.csv",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "cal" => Ok(Split::Cal),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; expected train, cal or test"
            ))),
        }
    }
}

/// Per-split sampling seeds; must be pairwise distinct so the i.i.d. splits
/// stay disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    pub train: u64,
    pub cal: u64,
    pub test: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            train: 1,
            cal: 2,
            test: 3,
        }
    }
}

impl SeedConfig {
    pub fn for_split(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train,
            Split::Cal => self.cal,
            Split::Test => self.test,
        }
    }
}

/// Whole-experiment configuration; desk-scale 2x2 defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub auction: AuctionConfig,
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
    pub estimator: EstimatorConfig,
    pub estimator_mode: EstimatorMode,
    /// Test/calibration-time misreport search strength.
    pub eval_search: MisreportSearchConfig,
    pub alpha: f64,
    pub epsilon: f64,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    /// Train-split prefix used for estimator label/fit (labels use the
    /// evaluation-strength search, so this is the expensive knob).
    pub n_estimator: usize,
    pub seeds: SeedConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            auction: AuctionConfig::new(2, 2).expect("valid default"),
            architecture: ArchitectureSpec::default(),
            train: TrainConfig::default(),
            estimator: EstimatorConfig::default(),
            estimator_mode: EstimatorMode::BlackBox,
            eval_search: MisreportSearchConfig::eval_default(),
            alpha: 0.01,
            epsilon: 0.025,
            n_train: 100_000,
            n_cal: 10_000,
            n_test: 10_000,
            n_estimator: 5_000,
            seeds: SeedConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.train == self.seeds.cal
            || self.seeds.train == self.seeds.test
            || self.seeds.cal == self.seeds.test
        {
            return Err(Error::Config(
                "train/cal/test seeds must be pairwise distinct (split hygiene)".into(),
            ));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.n_cal == 0 || self.n_test == 0 {
            return Err(Error::Config("n_cal and n_test must be >= 1".into()));
        }
        if self.estimator_mode == EstimatorMode::SharedBackbone && !self.architecture.shared_trunk
        {
            return Err(Error::Config(
                "shared-backbone estimator mode requires architecture.shared_trunk = true".into(),
            ));
        }
        self.train.validate()?;
        self.eval_search.validate()
    }

    fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Cal => self.n_cal,
            Split::Test => self.n_test,
        }
    }
}

/// Artifact file names within the output directory.
pub mod artifacts {
    pub const MECHANISM: &str = "mechanism.json";
    pub const ESTIMATOR: &str = "estimator.json";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const CALIBRATION: &str = "calibration.json";
    pub const AUDIT_JSON: &str = "audit.json";
    pub const AUDIT_CSV: &str = "audit.csv";
    pub const REPORT: &str = "report.json";
    pub const SWEEP: &str = "plots/epsilon_sweep.csv";
    pub const HISTOGRAM: &str = "plots/regret_histogram.csv";
    pub const RUNNING_MAX: &str = "plots/running_max.csv";
    pub const ACCEPT_REJECT: &str = "plots/accept_reject.csv";
    pub const JOINT: &str = "plots/joint.csv";
}

fn dataset_path(out: &Path, split: Split) -> PathBuf {
    out.join(split.file_name())
}

fn load_split<T: Scalar>(
    config: &ExperimentConfig,
    out: &Path,
    split: Split,
) -> Result<Vec<ValuationProfile<T>>> {
    let path = dataset_path(out, split);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing dataset {}; run `generate` first",
            path.display()
        )));
    }
    read_profiles_csv(&path, &config.auction)
}

/// Samples and writes one split; byte-identical across reruns of the same
/// config.
pub fn cmd_generate<T: Scalar>(
    config: &ExperimentConfig,
    out: &Path,
    split: Split,
) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let profiles = sample_valuations::<T>(
        &config.auction,
        config.split_size(split),
        config.seeds.for_split(split),
    );
    let path = dataset_path(out, split);
    write_profiles_csv(&path, &profiles)?;
    Ok(path)
}

/// Trains the mechanism on the train split; writes the checkpoint and the
/// JSONL log.
pub fn cmd_train<T: Scalar>(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<MechanismParams<T>> {
    config.validate()?;
    let data = load_split::<T>(config, out, Split::Train)?;
    let (params, log) = train(
        &config.auction,
        config.architecture,
        &config.train,
        &data,
        config.train.seed,
    )?;
    checkpoint::save_mechanism(&out.join(artifacts::MECHANISM), &params)?;
    log.write_jsonl(&out.join(artifacts::TRAIN_LOG))?;
    Ok(params)
}

/// Labels a train-split prefix with the evaluation-strength search and fits
/// the estimator against the frozen mechanism.
pub fn cmd_fit_estimator<T: Scalar>(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<EstimatorParams<T>> {
    config.validate()?;
    let mechanism: MechanismParams<T> =
        checkpoint::load_mechanism(&out.join(artifacts::MECHANISM))?;
    let data = load_split::<T>(config, out, Split::Train)?;
    let subset = &data[..config.n_estimator.min(data.len())];
    let labels = label_regrets(
        &mechanism,
        subset,
        &config.eval_search,
        subseed(config.train.seed, &[10]),
    )?;
    let (est, _) = train_estimator(
        &mechanism,
        subset,
        &labels,
        config.estimator_mode,
        &config.estimator,
        subseed(config.train.seed, &[9]),
    )?;
    checkpoint::save_estimator(&out.join(artifacts::ESTIMATOR), &est)?;
    Ok(est)
}

/// Calibrates the estimator on the cal split at the configured alpha.
pub fn cmd_calibrate<T: Scalar>(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<CalibrationResult<T>> {
    config.validate()?;
    let mechanism: MechanismParams<T> =
        checkpoint::load_mechanism(&out.join(artifacts::MECHANISM))?;
    let est: EstimatorParams<T> = checkpoint::load_estimator(&out.join(artifacts::ESTIMATOR))?;
    let cal_set = load_split::<T>(config, out, Split::Cal)?;
    let result = crate::conformal::calibrate(
        &mechanism,
        &est,
        &cal_set,
        config.alpha,
        &config.eval_search,
        subseed(config.seeds.cal, &[1]),
    )?;
    result.write_json(&out.join(artifacts::CALIBRATION))?;
    Ok(result)
}

/// Ungated statistics of the mechanism on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub revenue_mean: f64,
    pub revenue_std: f64,
    pub regret_mean: f64,
    pub regret_std: f64,
    pub max_regret: f64,
}

/// Report over the test set: ungated baseline plus the gated variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub alpha: f64,
    pub epsilon: f64,
    pub q_alpha: f64,
    pub n_test: usize,
    pub baseline: BaselineStats,
    pub acceptance_rate: f64,
    pub violation_rate: f64,
    pub max_accepted_regret: f64,
    pub revenue_mean_accepted: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Truthful-bid revenue of each profile.
pub fn revenues_batch<T: Scalar>(
    mechanism: &MechanismParams<T>,
    profiles: &[ValuationProfile<T>],
) -> Result<Array1<T>> {
    let (n, m) = (mechanism.n_bidders, mechanism.n_items);
    let mut flat = Array2::zeros((profiles.len(), n * m));
    for (p, profile) in profiles.iter().enumerate() {
        flat.row_mut(p).assign(&profile.flatten());
    }
    let fwd = mechanism.forward_batch(flat.view())?;
    let mut out = Array1::zeros(profiles.len());
    for p in 0..profiles.len() {
        let mut revenue = T::zero();
        for i in 0..n {
            let mut reported = T::zero();
            for j in 0..m {
                reported += flat[[p, i * m + j]] * fwd.shares()[[p, i * m + j]];
            }
            revenue += fwd.fractions()[[p, i]] * reported;
        }
        out[p] = revenue;
    }
    Ok(out)
}

/// Audits the gate on the test split; writes `audit.json`, the per-auction
/// CSV, and the experiment report.
pub fn cmd_audit<T: Scalar>(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let mechanism: MechanismParams<T> =
        checkpoint::load_mechanism(&out.join(artifacts::MECHANISM))?;
    let est: EstimatorParams<T> = checkpoint::load_estimator(&out.join(artifacts::ESTIMATOR))?;
    let summary: CalibrationSummary = serde_json::from_str(&std::fs::read_to_string(
        out.join(artifacts::CALIBRATION),
    )?)?;
    let test_set = load_split::<T>(config, out, Split::Test)?;

    let regrets = label_regrets(
        &mechanism,
        &test_set,
        &config.eval_search,
        subseed(config.seeds.test, &[1]),
    )?;
    let mut flat = Array2::zeros((test_set.len(), mechanism.input_width()));
    for (p, profile) in test_set.iter().enumerate() {
        flat.row_mut(p).assign(&profile.flatten());
    }
    let predictions = predict_regret_batch(&est, &mechanism, flat.view())?;
    let revenues = revenues_batch(&mechanism, &test_set)?;

    let audit = audit_pairs(
        regrets.view(),
        predictions.view(),
        T::from_f64_lossy(config.epsilon),
        T::from_f64_lossy(summary.q_alpha),
        config.alpha,
        Some(revenues.view()),
    )?;
    audit.write_json(&out.join(artifacts::AUDIT_JSON))?;
    audit.write_csv(&out.join(artifacts::AUDIT_CSV))?;

    let regret_f64: Vec<f64> = regrets.iter().map(|r| r.to_f64_lossy()).collect();
    let revenue_f64: Vec<f64> = revenues.iter().map(|r| r.to_f64_lossy()).collect();
    let (regret_mean, regret_std) = mean_std(&regret_f64);
    let (revenue_mean, revenue_std) = mean_std(&revenue_f64);
    let report = ExperimentReport {
        alpha: config.alpha,
        epsilon: config.epsilon,
        q_alpha: summary.q_alpha,
        n_test: test_set.len(),
        baseline: BaselineStats {
            revenue_mean,
            revenue_std,
            regret_mean,
            regret_std,
            max_regret: regret_f64.iter().cloned().fold(0.0, f64::max),
        },
        acceptance_rate: audit.acceptance_rate,
        violation_rate: audit.violation_rate,
        max_accepted_regret: audit.max_accepted_regret,
        revenue_mean_accepted: audit.revenue_mean_accepted,
    };
    let file = std::fs::File::create(out.join(artifacts::REPORT))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
    Ok(report)
}

/// Generate -> train -> fit -> calibrate -> audit -> plots, reusing any
/// datasets already on disk.
pub fn cmd_pipeline<T: Scalar>(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    for split in [Split::Train, Split::Cal, Split::Test] {
        if !dataset_path(out, split).exists() {
            cmd_generate::<T>(config, out, split)?;
        }
    }
    cmd_train::<T>(config, out)?;
    cmd_fit_estimator::<T>(config, out)?;
    cmd_calibrate::<T>(config, out)?;
    let report = cmd_audit::<T>(config, out)?;
    cmd_emit_plots(config, out)?;
    Ok(report)
}

/// One audit per epsilon over the already-audited per-auction table; the
/// quantile is epsilon-independent, only the threshold moves.
pub fn cmd_sweep(config: &ExperimentConfig, out: &Path, epsilon_grid: &[f64]) -> Result<PathBuf> {
    let summary: CalibrationSummary = serde_json::from_str(&std::fs::read_to_string(
        out.join(artifacts::CALIBRATION),
    )?)?;
    let rows = AuditReport::read_csv(&out.join(artifacts::AUDIT_CSV))?;
    let path = out.join(artifacts::SWEEP);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(file, "epsilon,rejections,acceptance_rate")?;
    for &eps in epsilon_grid {
        let accepted = rows
            .iter()
            .filter(|r| accepts(r.predicted_regret, eps, summary.q_alpha))
            .count();
        let rejections = rows.len() - accepted;
        writeln!(
            file,
            "{eps},{rejections},{}",
            accepted as f64 / rows.len().max(1) as f64
        )?;
    }
    file.flush()?;
    let _ = config;
    Ok(path)
}

/// Default sweep grid: 25 points spanning epsilon scales around the gate.
pub fn default_epsilon_grid(config: &ExperimentConfig) -> Vec<f64> {
    (1..=25).map(|i| config.epsilon * i as f64 / 10.0).collect()
}

const HISTOGRAM_BINS: usize = 20;

/// Emits every figure CSV from the per-auction audit table alone.
pub fn cmd_emit_plots(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let rows = AuditReport::read_csv(&out.join(artifacts::AUDIT_CSV))?;
    if rows.is_empty() {
        return Err(Error::Config("audit table is empty; nothing to plot".into()));
    }
    std::fs::create_dir_all(out.join("plots"))?;

    // (a) Regret histogram.
    let max_regret = rows.iter().map(|r| r.regret).fold(0.0, f64::max).max(1e-9);
    let width = max_regret / HISTOGRAM_BINS as f64;
    let mut counts = [0usize; HISTOGRAM_BINS];
    for row in &rows {
        let bin = ((row.regret / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(out.join(artifacts::HISTOGRAM))?);
    writeln!(file, "bin_lo,bin_hi,count")?;
    for (b, count) in counts.iter().enumerate() {
        writeln!(file, "{},{},{count}", b as f64 * width, (b + 1) as f64 * width)?;
    }
    file.flush()?;

    // (b) Running max regret vs auction count.
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(out.join(artifacts::RUNNING_MAX))?);
    writeln!(file, "auction_count,max_regret")?;
    let mut running = 0.0f64;
    for (i, row) in rows.iter().enumerate() {
        running = running.max(row.regret);
        writeln!(file, "{},{running}", i + 1)?;
    }
    file.flush()?;

    // (c) Accepted vs rejected regret groups.
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(out.join(artifacts::ACCEPT_REJECT))?);
    writeln!(file, "group,regret")?;
    for row in &rows {
        let group = if row.accepted { "accepted" } else { "rejected" };
        writeln!(file, "{group},{}", row.regret)?;
    }
    file.flush()?;

    // (d) Joint (regret, predicted regret) pairs.
    let mut file = std::io::BufWriter::new(std::fs::File::create(out.join(artifacts::JOINT))?);
    writeln!(file, "regret,predicted_regret")?;
    for row in &rows {
        writeln!(file, "{},{}", row.regret, row.predicted_regret)?;
    }
    file.flush()?;

    // (e) Epsilon sweep.
    cmd_sweep(config, out, &default_epsilon_grid(config))?;
    Ok(())
}
