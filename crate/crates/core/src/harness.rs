//! Experiment configs, per-seed pipelines, report aggregation and tables.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codebook::{init_gaussian, make_projection, BigCodebook};
use crate::error::{Error, Result};
use crate::features::{read_features, synth_gaussian, synth_gmm, FeatureSet};
use crate::matrix::Matrix;
use crate::metrics::{distortion_profile, pooled_big_usage, stage_usage, DistortionProfile, StageUsage, UsageReport};
use crate::quantizer::{QuantizationResult, QuantizerStack, QuantizerStage, ResampleMode};
use crate::report::{format_value, nonfinite, Aggregate};
use crate::rng::{self, label, RNG_ALGORITHM};
use crate::training::{commitment_codebook_losses, fit_codebooks, FitReport, TrainingConfig};

/// Collapse mitigants applied to every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mitigants {
    /// Select codewords by distance between unit-norm vectors.
    pub normalize: bool,
    /// Quantize in a fixed `d_proj`-dimensional subspace.
    pub projection: Option<usize>,
}

impl Mitigants {
    pub fn on(projection: Option<usize>) -> Self {
        Self {
            normalize: true,
            projection,
        }
    }

    pub fn off() -> Self {
        Self {
            normalize: false,
            projection: None,
        }
    }

    fn any(&self) -> bool {
        self.normalize || self.projection.is_some()
    }
}

/// Where frames come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Gaussian { frames: usize, seed: u64 },
    Gmm { frames: usize, k: usize, separation: f64, seed: u64 },
    File { path: PathBuf },
}

impl DataSpec {
    pub fn load(&self, dim: usize) -> Result<FeatureSet> {
        let fs = match self {
            DataSpec::Gaussian { frames, seed } => synth_gaussian(*frames, dim, *seed)?,
            DataSpec::Gmm {
                frames,
                k,
                separation,
                seed,
            } => synth_gmm(*frames, dim, *k, *separation, *seed)?,
            DataSpec::File { path } => read_features(path)?,
        };
        if fs.dim() != dim {
            return Err(Error::invalid(format!(
                "data has dimension {} but the config sets D={dim}",
                fs.dim()
            )));
        }
        Ok(fs)
    }
}

/// One column of the variant grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(alias = "D")]
    pub dim: usize,
    #[serde(alias = "n_t")]
    pub n_trainable: usize,
    #[serde(alias = "N_t")]
    pub trainable_size: usize,
    #[serde(alias = "n_r")]
    pub n_random: usize,
    #[serde(alias = "N_big")]
    pub big_size: usize,
    #[serde(alias = "s")]
    pub sample_size: usize,
    pub mitigants: Mitigants,
    pub resample_mode: ResampleMode,
    /// Random stages of one frame draw pairwise disjoint sub-codebooks.
    pub disjoint: bool,
    pub train: DataSpec,
    pub eval: DataSpec,
    pub seeds: Vec<u64>,
    pub passes: usize,
    pub decay: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub calibrate_gains: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            name: "randrvq".into(),
            dim: 8,
            n_trainable: 5,
            trainable_size: 256,
            n_random: 4,
            big_size: 4096,
            sample_size: 512,
            mitigants: Mitigants::on(None),
            resample_mode: ResampleMode::PerFrame,
            disjoint: true,
            train: DataSpec::Gaussian {
                frames: 100_000,
                seed: 1001,
            },
            eval: DataSpec::Gaussian {
                frames: 20_000,
                seed: 2002,
            },
            seeds: vec![1, 2, 3, 4, 5],
            passes: t.passes,
            decay: t.decay,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            calibrate_gains: t.calibrate_gains,
        }
    }
}

impl ExperimentConfig {
    /// Trained stages only, mitigants on.
    pub fn baseline() -> Self {
        Self {
            name: "baseline".into(),
            n_random: 0,
            ..Self::default()
        }
    }

    /// Five trained stages, four random stages, `N_big / s = 8`, mitigants on.
    pub fn randrvq1() -> Self {
        Self {
            name: "randrvq1".into(),
            ..Self::default()
        }
    }

    /// Like [`randrvq1`](Self::randrvq1) without mitigants.
    pub fn randrvq2() -> Self {
        Self {
            name: "randrvq2".into(),
            mitigants: Mitigants::off(),
            ..Self::default()
        }
    }

    /// No mitigants and a four times smaller sample size than RandRVQ2.
    pub fn randrvq3() -> Self {
        Self {
            name: "randrvq3".into(),
            mitigants: Mitigants::off(),
            sample_size: Self::default().big_size / 32,
            ..Self::default()
        }
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        serde_json::from_str(raw).map_err(|e| Error::parse(format!("experiment config: {e}")))
    }

    pub fn training(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            passes: self.passes,
            decay: self.decay,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            calibrate_gains: self.calibrate_gains,
            seed: rng::derive_seed(seed, &[label::SHUFFLE]),
            ..TrainingConfig::default()
        }
    }

    /// Checks every config invariant before any work is done.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(format!("config {:?}: {m}", self.name)));
        if self.dim == 0 {
            return fail("D must be >= 1".into());
        }
        if self.n_trainable + self.n_random == 0 {
            return fail("n_t + n_r must be >= 1".into());
        }
        if self.n_trainable > 0 && self.trainable_size == 0 {
            return fail("N_t must be >= 1 when n_t > 0".into());
        }
        if self.n_random > 0 {
            if self.sample_size == 0 {
                return fail("s must be >= 1 when n_r > 0".into());
            }
            if self.sample_size > self.big_size {
                return fail(format!("s ({}) must be <= N_big ({})", self.sample_size, self.big_size));
            }
            if self.disjoint && self.n_random * self.sample_size > self.big_size {
                return fail(format!(
                    "disjoint sampling needs n_r * s ({} * {} = {}) <= N_big ({})",
                    self.n_random,
                    self.sample_size,
                    self.n_random * self.sample_size,
                    self.big_size
                ));
            }
        }
        if let Some(d) = self.mitigants.projection {
            if d == 0 || d >= self.dim {
                return fail(format!("projection d_proj ({d}) must lie in [1, D={})", self.dim));
            }
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return fail(format!("decay ({}) must lie in (0, 1)", self.decay));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon ({}) must be > 0", self.epsilon));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        for (what, spec) in [("train", &self.train), ("eval", &self.eval)] {
            match spec {
                DataSpec::Gaussian { frames, .. } | DataSpec::Gmm { frames, .. } if *frames == 0 => {
                    return fail(format!("{what} data needs at least one frame"));
                }
                DataSpec::Gmm { k, separation, .. } if *k == 0 || !(*separation >= 0.0) => {
                    return fail(format!("{what} mixture needs k >= 1 and separation >= 0"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Untrained stack for `seed`. Every random choice is keyed by the seed.
    pub fn build_stack(&self, seed: u64) -> Result<QuantizerStack> {
        self.validate()?;
        let wd = self.mitigants.projection.unwrap_or(self.dim);
        let projection = |i: usize| -> Result<_> {
            self.mitigants
                .projection
                .map(|d| make_projection(self.dim, d, rng::derive_seed(seed, &[label::PROJECTION, i as u64])))
                .transpose()
        };
        let mut stages = Vec::with_capacity(self.n_trainable + self.n_random);
        for i in 0..self.n_trainable {
            let mut cb = init_gaussian(
                self.trainable_size,
                wd,
                rng::derive_seed(seed, &[label::TRAINABLE_INIT, i as u64]),
            )?;
            cb.id = format!("stage-{i}");
            stages.push(QuantizerStage {
                projection: projection(i)?,
                ..QuantizerStage::trainable(cb).with_normalize(self.mitigants.normalize)
            });
        }
        for i in self.n_trainable..self.n_trainable + self.n_random {
            stages.push(QuantizerStage {
                projection: projection(i)?,
                ..QuantizerStage::random(self.sample_size).with_normalize(self.mitigants.normalize)
            });
        }
        let big = if self.n_random > 0 {
            Some(Arc::new(BigCodebook::gaussian(
                self.big_size,
                wd,
                rng::derive_seed(seed, &[label::BIG_CODEBOOK]),
            )?))
        } else {
            None
        };
        QuantizerStack::new(
            self.dim,
            stages,
            big,
            self.resample_mode,
            self.disjoint,
            rng::derive_seed(seed, &[label::SAMPLING]),
        )
    }
}

/// Usage numbers of one stage, flattened for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePerplexity {
    pub stage: usize,
    pub random: bool,
    pub perplexity: f64,
    pub ratio_to_max: f64,
    pub size: usize,
    pub big_perplexity: Option<f64>,
    pub big_ratio_to_max: Option<f64>,
}

impl From<&StageUsage> for StagePerplexity {
    fn from(u: &StageUsage) -> Self {
        Self {
            stage: u.stage,
            random: u.random,
            perplexity: u.positions.perplexity,
            ratio_to_max: u.positions.ratio_to_max,
            size: u.positions.size(),
            big_perplexity: u.big.as_ref().map(|b| b.perplexity),
            big_ratio_to_max: u.big.as_ref().map(|b| b.ratio_to_max),
        }
    }
}

/// Evaluation metrics of one quantization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub final_mse: f64,
    #[serde(with = "nonfinite")]
    pub si_sdr_db: f64,
    #[serde(with = "nonfinite")]
    pub mean_frame_si_sdr_db: f64,
    pub stage_energies: Vec<f64>,
    pub commitment_loss: f64,
    pub codebook_loss: f64,
    pub perplexities: Vec<StagePerplexity>,
    pub pooled_big_perplexity: Option<f64>,
    pub pooled_big_ratio_to_max: Option<f64>,
}

impl EvalMetrics {
    pub fn compute(frames: &Matrix, result: &QuantizationResult) -> Result<Self> {
        let DistortionProfile {
            stage_energies,
            final_mse,
            si_sdr_db,
            mean_frame_si_sdr_db,
        } = distortion_profile(result)?;
        let losses = commitment_codebook_losses(frames, result)?;
        let usage = stage_usage(result)?;
        let pooled: Option<UsageReport> = pooled_big_usage(result)?;
        Ok(Self {
            final_mse,
            si_sdr_db,
            mean_frame_si_sdr_db,
            stage_energies,
            commitment_loss: losses.commitment,
            codebook_loss: losses.codebook,
            perplexities: usage.iter().map(StagePerplexity::from).collect(),
            pooled_big_perplexity: pooled.as_ref().map(|p| p.perplexity),
            pooled_big_ratio_to_max: pooled.as_ref().map(|p| p.ratio_to_max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub fit: FitReport,
    pub train_seconds: f64,
    pub wall_seconds: f64,
}

/// Mean ± std of the scalar metrics over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub final_mse: Aggregate,
    pub si_sdr_db: Aggregate,
    pub mean_frame_si_sdr_db: Aggregate,
    pub commitment_loss: Aggregate,
    /// Per stage: within-codebook perplexity.
    pub perplexity: Vec<Aggregate>,
    pub ratio_to_max: Vec<Aggregate>,
    /// Per stage: big-codebook perplexity (random stages only).
    pub big_perplexity: Vec<Option<Aggregate>>,
    pub big_ratio_to_max: Vec<Option<Aggregate>>,
    pub pooled_big_perplexity: Option<Aggregate>,
    pub pooled_big_ratio_to_max: Option<Aggregate>,
    pub train_seconds: Aggregate,
}

impl AggregateMetrics {
    pub fn of(rows: &[SeedRow]) -> Self {
        let col = |f: &dyn Fn(&SeedRow) -> f64| Aggregate::of(&rows.iter().map(f).collect::<Vec<_>>());
        let opt_col = |f: &dyn Fn(&SeedRow) -> Option<f64>| -> Option<Aggregate> {
            let v: Option<Vec<f64>> = rows.iter().map(f).collect();
            v.filter(|v| !v.is_empty()).map(|v| Aggregate::of(&v))
        };
        let n_stages = rows.first().map_or(0, |r| r.metrics.perplexities.len());
        Self {
            final_mse: col(&|r| r.metrics.final_mse),
            si_sdr_db: col(&|r| r.metrics.si_sdr_db),
            mean_frame_si_sdr_db: col(&|r| r.metrics.mean_frame_si_sdr_db),
            commitment_loss: col(&|r| r.metrics.commitment_loss),
            perplexity: (0..n_stages).map(|k| col(&|r| r.metrics.perplexities[k].perplexity)).collect(),
            ratio_to_max: (0..n_stages).map(|k| col(&|r| r.metrics.perplexities[k].ratio_to_max)).collect(),
            big_perplexity: (0..n_stages)
                .map(|k| opt_col(&|r| r.metrics.perplexities[k].big_perplexity))
                .collect(),
            big_ratio_to_max: (0..n_stages)
                .map(|k| opt_col(&|r| r.metrics.perplexities[k].big_ratio_to_max))
                .collect(),
            pooled_big_perplexity: opt_col(&|r| r.metrics.pooled_big_perplexity),
            pooled_big_ratio_to_max: opt_col(&|r| r.metrics.pooled_big_ratio_to_max),
            train_seconds: col(&|r| r.train_seconds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rng_algorithm: String,
    pub seeds: Vec<SeedRow>,
    pub aggregate: AggregateMetrics,
}

impl ExperimentReport {
    /// Copy with every wall-time field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.seeds {
            row.train_seconds = 0.0;
            row.wall_seconds = 0.0;
        }
        r.aggregate.train_seconds = Aggregate::of(&vec![0.0; r.seeds.len()]);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format CSV: one row per metric, one column per seed plus mean
    /// and std.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.seeds.iter().map(|r| format!("seed_{}", r.seed)));
        header.extend(["mean".to_string(), "std".to_string()]);
        w.write_record(&header)?;
        let mut emit = |name: String, vals: Vec<f64>| -> Result<()> {
            let agg = Aggregate::of(&vals);
            let mut rec = vec![name];
            rec.extend(vals.iter().map(|&v| format_value(v)));
            rec.push(format_value(agg.mean));
            rec.push(agg.std.map(format_value).unwrap_or_default());
            w.write_record(&rec)?;
            Ok(())
        };
        let col = |f: &dyn Fn(&SeedRow) -> f64| self.seeds.iter().map(f).collect::<Vec<_>>();
        emit("final_mse".into(), col(&|r| r.metrics.final_mse))?;
        emit("si_sdr_db".into(), col(&|r| r.metrics.si_sdr_db))?;
        emit("mean_frame_si_sdr_db".into(), col(&|r| r.metrics.mean_frame_si_sdr_db))?;
        emit("commitment_loss".into(), col(&|r| r.metrics.commitment_loss))?;
        let n_stages = self.seeds.first().map_or(0, |r| r.metrics.perplexities.len());
        for k in 0..n_stages {
            emit(format!("pp_cb{}", k + 1), col(&|r| r.metrics.perplexities[k].perplexity))?;
            emit(format!("pp_cb{}_ratio", k + 1), col(&|r| r.metrics.perplexities[k].ratio_to_max))?;
            if self.seeds[0].metrics.perplexities[k].random {
                emit(
                    format!("pp_cb{}_big", k + 1),
                    col(&|r| r.metrics.perplexities[k].big_perplexity.unwrap_or(f64::NAN)),
                )?;
                emit(
                    format!("pp_cb{}_big_ratio", k + 1),
                    col(&|r| r.metrics.perplexities[k].big_ratio_to_max.unwrap_or(f64::NAN)),
                )?;
            }
        }
        if self.aggregate.pooled_big_perplexity.is_some() {
            emit("pp_big".into(), col(&|r| r.metrics.pooled_big_perplexity.unwrap_or(f64::NAN)))?;
            emit("pp_big_ratio".into(), col(&|r| r.metrics.pooled_big_ratio_to_max.unwrap_or(f64::NAN)))?;
        }
        emit("train_seconds".into(), col(&|r| r.train_seconds))?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Builds, fits and evaluates one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, train: &Matrix, eval: &Matrix) -> Result<SeedRow> {
    let (stack, fit, train_seconds, started) = train_seed(cfg, seed, train)?;
    let result = stack.quantize_sequence(eval)?;
    let metrics = EvalMetrics::compute(eval, &result)?;
    Ok(SeedRow {
        seed,
        metrics,
        fit,
        train_seconds,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn train_seed(cfg: &ExperimentConfig, seed: u64, train: &Matrix) -> Result<(QuantizerStack, FitReport, f64, Instant)> {
    let started = Instant::now();
    let mut stack = cfg.build_stack(seed)?;
    let fit = fit_codebooks(&mut stack, train, &cfg.training(seed))?;
    Ok((stack, fit, started.elapsed().as_secs_f64(), started))
}

/// Trains and evaluates a fitted stack for `cfg` and `seed`, returning the
/// stack too.
pub fn trained_stack(cfg: &ExperimentConfig, seed: u64) -> Result<(QuantizerStack, FitReport)> {
    cfg.validate()?;
    let train = cfg.train.load(cfg.dim)?;
    let (stack, fit, _, _) = train_seed(cfg, seed, &train.frames)?;
    Ok((stack, fit))
}

/// Every seed of `cfg`, then the aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let train = cfg.train.load(cfg.dim)?;
    let eval = cfg.eval.load(cfg.dim)?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| {
            log::info!("{}: seed {s}", cfg.name);
            run_seed(cfg, s, &train.frames, &eval.frames)
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = AggregateMetrics::of(&seeds);
    Ok(ExperimentReport {
        config: cfg.clone(),
        rng_algorithm: RNG_ALGORITHM.into(),
        seeds,
        aggregate,
    })
}

/// Merged table: one row per metric, one column per config.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl GridTable {
    pub fn get(&self, row: &str, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.rows
            .iter()
            .find(|(name, _)| name == row)
            .map(|(_, cells)| cells[c].as_str())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if !self.columns.is_empty() {
            let mut header = vec!["metric".to_string()];
            header.extend(self.columns.iter().cloned());
            w.write_record(&header)?;
            for (name, cells) in &self.rows {
                let mut rec = vec![name.clone()];
                rec.extend(cells.iter().cloned());
                w.write_record(&rec)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn pp_cell(pp: &Aggregate, ratio: &Aggregate) -> String {
    format!("{:.0} ({:.2})", pp.mean, ratio.mean)
}

/// Lays finished reports out side by side.
pub fn grid_table(reports: &[ExperimentReport]) -> GridTable {
    let columns: Vec<String> = reports.iter().map(|r| r.config.name.clone()).collect();
    let mut rows: BTreeMap<(usize, String), Vec<String>> = BTreeMap::new();
    let n = reports.len();
    let mut put = |order: usize, name: String, col: usize, value: String| {
        rows.entry((order, name)).or_insert_with(|| vec![String::new(); n])[col] = value;
    };
    for (c, r) in reports.iter().enumerate() {
        let cfg = &r.config;
        let random = cfg.n_random > 0;
        put(0, "N_big".into(), c, if random { cfg.big_size.to_string() } else { "-".into() });
        put(1, "sample size".into(), c, if random { cfg.sample_size.to_string() } else { "-".into() });
        put(2, "collapse mitigants".into(), c, if cfg.mitigants.any() { "yes" } else { "no" }.into());
        put(3, "# rand. quantizers".into(), c, cfg.n_random.to_string());
        put(10, "final MSE".into(), c, r.aggregate.final_mse.cell());
        put(11, "SI-SDR (dB)".into(), c, r.aggregate.si_sdr_db.cell());
        put(12, "commitment loss".into(), c, r.aggregate.commitment_loss.cell());
        for k in 0..r.aggregate.perplexity.len() {
            // random stages are shown on the big-codebook scale
            let cell = match (&r.aggregate.big_perplexity[k], &r.aggregate.big_ratio_to_max[k]) {
                (Some(pp), Some(ratio)) => pp_cell(pp, ratio),
                _ => pp_cell(&r.aggregate.perplexity[k], &r.aggregate.ratio_to_max[k]),
            };
            put(100 + k, format!("PP - cb {}", k + 1), c, cell);
            if r.aggregate.big_perplexity[k].is_some() {
                put(
                    200 + k,
                    format!("PP - cb {} (within sample)", k + 1),
                    c,
                    pp_cell(&r.aggregate.perplexity[k], &r.aggregate.ratio_to_max[k]),
                );
            }
        }
        if let (Some(pp), Some(ratio)) = (&r.aggregate.pooled_big_perplexity, &r.aggregate.pooled_big_ratio_to_max) {
            put(300, "PP - Big cb".into(), c, pp_cell(pp, ratio));
        }
        put(400, "train time (s)".into(), c, r.aggregate.train_seconds.cell());
    }
    GridTable {
        columns,
        rows: rows.into_iter().map(|((_, name), cells)| (name, cells)).collect(),
    }
}

/// Runs configs one after another and merges their reports.
pub fn run_grid(cfgs: &[ExperimentConfig]) -> Result<(Vec<ExperimentReport>, GridTable)> {
    for c in cfgs {
        c.validate()?;
    }
    let reports = cfgs.iter().map(run_experiment).collect::<Result<Vec<_>>>()?;
    let table = grid_table(&reports);
    Ok((reports, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub seed: u64,
    pub truncated: EvalMetrics,
    pub full: EvalMetrics,
    /// `full - truncated`.
    pub delta_final_mse: f64,
    #[serde(with = "nonfinite")]
    pub delta_si_sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub config: ExperimentConfig,
    pub kept_stages: usize,
    pub seeds: Vec<TruncationRow>,
    pub delta_final_mse: Aggregate,
    pub delta_si_sdr_db: Aggregate,
}

/// Evaluates each seed's trained stack with only its first `k` stages and
/// in full.
pub fn compare_truncation(cfg: &ExperimentConfig, k: usize) -> Result<TruncationReport> {
    cfg.validate()?;
    let total = cfg.n_trainable + cfg.n_random;
    if k > total {
        return Err(Error::invalid(format!(
            "cannot keep {k} stages of a {total}-stage stack"
        )));
    }
    let train = cfg.train.load(cfg.dim)?;
    let eval = cfg.eval.load(cfg.dim)?;
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (stack, _, _, _) = train_seed(cfg, seed, &train.frames)?;
        let full_result = stack.quantize_sequence(&eval.frames)?;
        let short_result = stack.truncated(k)?.quantize_sequence(&eval.frames)?;
        let full = EvalMetrics::compute(&eval.frames, &full_result)?;
        let truncated = EvalMetrics::compute(&eval.frames, &short_result)?;
        let delta_si_sdr_db = if full.si_sdr_db == truncated.si_sdr_db {
            0.0
        } else {
            full.si_sdr_db - truncated.si_sdr_db
        };
        rows.push(TruncationRow {
            seed,
            delta_final_mse: full.final_mse - truncated.final_mse,
            delta_si_sdr_db,
            truncated,
            full,
        });
    }
    let delta_final_mse = Aggregate::of(&rows.iter().map(|r| r.delta_final_mse).collect::<Vec<_>>());
    let delta_si_sdr_db = Aggregate::of(&rows.iter().map(|r| r.delta_si_sdr_db).collect::<Vec<_>>());
    Ok(TruncationReport {
        config: cfg.clone(),
        kept_stages: k,
        seeds: rows,
        delta_final_mse,
        delta_si_sdr_db,
    })
}
