//! Metrics and the three experiment protocols (noise robustness,
//! few-shot calibration, spatial generalization), emitting
//! machine-readable reports and plot-ready CSV tables.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::{
    self, NoiseSpec, SiteAttributes, SplitPlan, WeatherSeries,
};
use crate::hybrid::{self, Surrogate, SurrogateSpec};
use crate::neural::{self, Activation, LstmMode, LstmWeights, MlpWeights};
use crate::pbm::{self, CropParams, DailyWeather, SeasonConfig, SimOptions, DAYS_PER_YEAR};
use crate::training::{
    self, mse_loss, AdamConfig, EarlyStopConfig, FnObjective, TrainError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: predicted {predicted} vs observed {observed}")]
    LengthMismatch { predicted: usize, observed: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("R² undefined: observations are constant at {value}")]
    ConstantObservations { value: f64 },
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// 1 − SS_res/SS_tot with SS_tot about the observed mean.
pub fn r_squared(predicted: &[f64], observed: &[f64]) -> Result<f64, EvalError> {
    check_lengths(predicted, observed)?;
    if observed.len() < 2 {
        return Err(EvalError::TooFewSamples {
            needed: 2,
            got: observed.len(),
        });
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean) * (o - mean)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ConstantObservations { value: observed[0] });
    }
    let ss_res: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// sqrt(mean squared error).
pub fn rmse(predicted: &[f64], observed: &[f64]) -> Result<f64, EvalError> {
    check_lengths(predicted, observed)?;
    if observed.is_empty() {
        return Err(EvalError::TooFewSamples { needed: 1, got: 0 });
    }
    let mse = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / observed.len() as f64;
    Ok(mse.sqrt())
}

fn check_lengths(predicted: &[f64], observed: &[f64]) -> Result<(), EvalError> {
    if predicted.len() != observed.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            observed: observed.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    /// None when undefined (constant observations); the diagnostic is
    /// carried in the cell status instead
    pub r_squared: Option<f64>,
    pub rmse: f64,
    pub n: usize,
}

pub fn metrics(predicted: &[f64], observed: &[f64]) -> Result<Metrics, EvalError> {
    let rmse = rmse(predicted, observed)?;
    let r_squared = match r_squared(predicted, observed) {
        Ok(r2) => Some(r2),
        Err(EvalError::ConstantObservations { .. }) | Err(EvalError::TooFewSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        r_squared,
        rmse,
        n: observed.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linearly interpolated quartiles
/// (midpoint-interpolation rule: the p-quantile sits at rank p·(n−1)).
pub fn boxplot_summary(values: &[f64]) -> Option<BoxSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let quantile = |p: f64| -> f64 {
        let rank = p * (sorted.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Some(BoxSummary {
        min: sorted[0],
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Median convenience over raw values.
pub fn median(values: &[f64]) -> Option<f64> {
    boxplot_summary(values).map(|b| b.median)
}

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PurePbm,
    PureDl,
    EmbeddedNnPbm,
    MassBalanceDl,
    SurrogateDpl,
    PhysicsResidualDl,
}

impl ModelKind {
    pub fn all() -> [ModelKind; 6] {
        [
            ModelKind::PurePbm,
            ModelKind::PureDl,
            ModelKind::EmbeddedNnPbm,
            ModelKind::MassBalanceDl,
            ModelKind::SurrogateDpl,
            ModelKind::PhysicsResidualDl,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PurePbm => "pure_pbm",
            ModelKind::PureDl => "pure_dl",
            ModelKind::EmbeddedNnPbm => "embedded_nn_pbm",
            ModelKind::MassBalanceDl => "mass_balance_dl",
            ModelKind::SurrogateDpl => "surrogate_dpl",
            ModelKind::PhysicsResidualDl => "physics_residual_dl",
        }
    }

    /// Reporting family; the mapping of variants to families follows the
    /// architecture taxonomy and is labeled, not asserted, in reports.
    pub fn family(self) -> &'static str {
        match self {
            ModelKind::PurePbm => "pure",
            ModelKind::PureDl => "pure",
            ModelKind::EmbeddedNnPbm | ModelKind::MassBalanceDl => "dl_informed_pbm",
            ModelKind::SurrogateDpl | ModelKind::PhysicsResidualDl => "pbm_informed_dl",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown model '{s}'"))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Noise,
    Fewshot,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    Weather,
    Biomass,
    Both,
}

impl FromStr for NoiseTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weather" => Ok(NoiseTarget::Weather),
            "biomass" => Ok(NoiseTarget::Biomass),
            "both" => Ok(NoiseTarget::Both),
            other => Err(format!("unknown noise target '{other}'")),
        }
    }
}

/// Desk-scale sizes for the twin dataset and the per-model training
/// budgets. Everything an experiment cell depends on lives here so a
/// report's provenance block is sufficient to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub n_years: usize,
    pub calibration_years: usize,
    pub train_fraction: f64,
    pub sowing_doy: usize,
    /// days aggregated into one recurrent-model step
    pub step_days: usize,
    pub hidden_size: usize,
    pub mlp_hidden: usize,
    pub base_params: CropParams,
    pub nn_adam: AdamConfig,
    pub nn_stop: EarlyStopConfig,
    pub calib_adam: AdamConfig,
    pub calib_stop: EarlyStopConfig,
    pub surrogate_samples: usize,
    pub surrogate_adam: AdamConfig,
    pub surrogate_stop: EarlyStopConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            n_years: 68,
            calibration_years: 48,
            train_fraction: 0.8,
            sowing_doy: 90,
            step_days: data::WEEK_DAYS,
            hidden_size: 8,
            mlp_hidden: 8,
            base_params: CropParams::default(),
            nn_adam: AdamConfig::with_lr(0.02),
            nn_stop: EarlyStopConfig {
                patience: 12,
                min_delta: 1e-4,
                max_epochs: 150,
            },
            calib_adam: AdamConfig::with_lr(0.05),
            calib_stop: EarlyStopConfig {
                patience: 8,
                min_delta: 1e-6,
                max_epochs: 80,
            },
            surrogate_samples: 48,
            surrogate_adam: AdamConfig::with_lr(0.01),
            surrogate_stop: EarlyStopConfig {
                patience: 30,
                min_delta: 1e-5,
                max_epochs: 200,
            },
        }
    }
}

impl HarnessConfig {
    pub fn season(&self) -> SeasonConfig {
        SeasonConfig {
            sowing_doy: self.sowing_doy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    pub models: Vec<ModelKind>,
    pub noise_levels: Vec<u8>,
    pub fewshot_k: Vec<usize>,
    pub seeds: Vec<u64>,
    pub noise_target: NoiseTarget,
    pub lambda_physics: f64,
    pub config: HarnessConfig,
}

impl ExperimentSpec {
    pub fn new(protocol: Protocol, models: Vec<ModelKind>, seeds: Vec<u64>) -> Self {
        Self {
            protocol,
            models,
            noise_levels: vec![1, 2, 3],
            fewshot_k: vec![7, 3, 1],
            seeds,
            noise_target: NoiseTarget::Weather,
            lambda_physics: 0.1,
            config: HarnessConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |m: &str| Err(EvalError::InvalidSpec(m.into()));
        if self.models.is_empty() {
            return fail("at least one model");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed");
        }
        if self.lambda_physics < 0.0 {
            return fail("lambda_physics must be >= 0");
        }
        match self.protocol {
            Protocol::Noise if self.noise_levels.is_empty() => fail("noise_levels empty"),
            Protocol::Fewshot if self.fewshot_k.is_empty() => fail("fewshot_k empty"),
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub model: String,
    pub condition: String,
    pub seed: u64,
    pub split: String,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub model: String,
    /// condition plus the summarized split/metric, e.g. "level=3/validation/r2"
    pub condition: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub package: String,
    pub version: String,
    pub seeds: Vec<u64>,
    /// model → reporting family, a labeled mapping
    pub model_families: Vec<[String; 2]>,
    pub config: HarnessConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub provenance: Provenance,
    pub cells: Vec<CellRecord>,
    pub summaries: Vec<SummaryRecord>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validation-split metric values of one (model, condition) group.
    pub fn validation_values(
        &self,
        model: ModelKind,
        condition: &str,
        metric: &str,
    ) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| {
                c.model == model.name() && c.condition == condition && c.split == "validation"
            })
            .filter_map(|c| match metric {
                "r2" => c.r2,
                "rmse" => c.rmse,
                _ => None,
            })
            .collect()
    }
}

/// year, observed, predicted, model, level — the per-year scatter data.
#[derive(Debug, Clone, Serialize)]
pub struct ScatterRow {
    pub year: i32,
    pub observed: f64,
    pub predicted: f64,
    pub model: String,
    pub level: String,
}

/// model, fold, split, rmse — the box-plot data.
#[derive(Debug, Clone, Serialize)]
pub struct BoxRow {
    pub model: String,
    pub fold: String,
    pub split: String,
    pub rmse: f64,
}

pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub fig7: Vec<ScatterRow>,
    pub fig9: Vec<BoxRow>,
}

pub fn write_fig7_csv<W: Write>(out: &mut W, rows: &[ScatterRow]) -> Result<(), EvalError> {
    writeln!(out, "year,observed,predicted,model,level")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.year, r.observed, r.predicted, r.model, r.level
        )?;
    }
    Ok(())
}

pub fn write_fig9_csv<W: Write>(out: &mut W, rows: &[BoxRow]) -> Result<(), EvalError> {
    writeln!(out, "model,fold,split,rmse")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.6}", r.model, r.fold, r.split, r.rmse)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The synthetic twin as seen by one experiment cell
// ---------------------------------------------------------------------------

pub struct SiteData {
    pub attrs: SiteAttributes,
    pub true_params: CropParams,
    /// uncontaminated weather, used for validation
    pub clean_weather: WeatherSeries,
    /// contaminated weather (equal to clean at level 0 or target=biomass)
    pub noisy_weather: WeatherSeries,
    /// per-year harvest biomass at the true parameters on clean weather
    pub clean_obs: Vec<f64>,
    /// training targets, possibly contaminated
    pub noisy_obs: Vec<f64>,
}

pub struct TwinData {
    pub sites: Vec<SiteData>,
    pub split: SplitPlan,
}

fn sub_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Simulated harvest biomass of one 365-day year.
pub fn pbm_harvest(
    params: &CropParams,
    year_weather: &[DailyWeather],
    season: &SeasonConfig,
) -> Result<f64, String> {
    let tape = Tape::new();
    let pv = params.lift(&tape).map_err(|e| e.to_string())?;
    let run = pbm::simulate_season(
        &tape,
        year_weather,
        &pv,
        &SimOptions::default(),
        season,
        pbm::bucket_stress,
    )
    .map_err(|e| e.to_string())?;
    Ok(run.harvest_biomass.value())
}

/// Generate one seed's view of the twin: weather, true-parameter harvests
/// and the contamination requested for the training portion.
pub fn build_twin(
    cfg: &HarnessConfig,
    seed: u64,
    level: u8,
    target: NoiseTarget,
) -> Result<TwinData, String> {
    let season = cfg.season();
    let split = data::split_years(
        cfg.n_years,
        cfg.calibration_years,
        cfg.train_fraction,
        sub_seed(seed, 1),
    )
    .map_err(|e| e.to_string())?;
    let mut sites = Vec::new();
    for (i, attrs) in data::default_sites().into_iter().enumerate() {
        let true_params = data::true_params_for_site(&attrs);
        let clean_weather = data::generate_weather(&attrs, cfg.n_years, sub_seed(seed, 2));
        let mut clean_obs = Vec::with_capacity(cfg.n_years);
        for y in 0..cfg.n_years {
            let year = &clean_weather.days[y * DAYS_PER_YEAR..(y + 1) * DAYS_PER_YEAR];
            clean_obs.push(pbm_harvest(&true_params, year, &season)?);
        }
        let contaminate_weather =
            level > 0 && matches!(target, NoiseTarget::Weather | NoiseTarget::Both);
        let noisy_weather = if contaminate_weather {
            data::inject_noise(
                &clean_weather,
                &NoiseSpec::new(level, sub_seed(seed, 3 + i as u64)),
            )
        } else {
            clean_weather.clone()
        };
        let contaminate_obs =
            level > 0 && matches!(target, NoiseTarget::Biomass | NoiseTarget::Both);
        let noisy_obs = if contaminate_obs {
            data::inject_observation_noise(
                &clean_obs,
                &NoiseSpec::new(level, sub_seed(seed, 7 + i as u64)),
                &attrs.site_id,
            )
        } else {
            clean_obs.clone()
        };
        sites.push(SiteData {
            attrs,
            true_params,
            clean_weather,
            noisy_weather,
            clean_obs,
            noisy_obs,
        });
    }
    Ok(TwinData { sites, split })
}

/// One labeled site-year as a model sees it.
pub struct Sample<'a> {
    pub site_idx: usize,
    pub year: usize,
    pub weather: &'a [DailyWeather],
    pub observed: f64,
}

/// Pull samples for the listed years; `noisy` selects the contaminated
/// training view, otherwise the clean validation view.
pub fn twin_samples<'a>(
    twin: &'a TwinData,
    site_indices: &[usize],
    years: &[usize],
    noisy: bool,
) -> Vec<Sample<'a>> {
    let mut out = Vec::new();
    for &s in site_indices {
        let site = &twin.sites[s];
        for &y in years {
            let days = if noisy {
                &site.noisy_weather.days
            } else {
                &site.clean_weather.days
            };
            out.push(Sample {
                site_idx: s,
                year: y,
                weather: &days[y * DAYS_PER_YEAR..(y + 1) * DAYS_PER_YEAR],
                observed: if noisy {
                    site.noisy_obs[y]
                } else {
                    site.clean_obs[y]
                },
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SeqStats {
    w_mean: Vec<f64>,
    w_std: Vec<f64>,
    label_mean: f64,
    label_std: f64,
}

/// Standardized aggregated weather with normalized site attributes
/// appended to every step.
fn sequence_for(
    sample: &Sample,
    attrs: &SiteAttributes,
    cfg: &HarnessConfig,
    stats: &SeqStats,
) -> Vec<Vec<f64>> {
    let window = &sample.weather[cfg.sowing_doy - 1..];
    let agg = data::aggregate_features(window, cfg.step_days);
    let site_feats = attrs.normalized();
    data::standardize(&agg, &stats.w_mean, &stats.w_std)
        .into_iter()
        .map(|mut step| {
            step.extend_from_slice(&site_feats);
            step
        })
        .collect()
}

fn seq_stats(samples: &[Sample], cfg: &HarnessConfig, center_labels: bool) -> SeqStats {
    let raw: Vec<Vec<Vec<f64>>> = samples
        .iter()
        .map(|s| data::aggregate_features(&s.weather[cfg.sowing_doy - 1..], cfg.step_days))
        .collect();
    let (w_mean, w_std) = data::feature_stats(&raw);
    let labels: Vec<f64> = samples.iter().map(|s| s.observed).collect();
    let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
    let std = (labels.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
        / labels.len().max(1) as f64)
        .sqrt()
        .max(1e-9);
    SeqStats {
        w_mean,
        w_std,
        // mass-balance coupled heads need a pure scale (no offset) so the
        // biomass/growth relation survives normalization
        label_mean: if center_labels { mean } else { 0.0 },
        label_std: std,
    }
}

/// What a fitted model needs to predict a site-year harvest.
pub enum Fitted {
    Pbm {
        per_site: Vec<(usize, CropParams)>,
        fallback: CropParams,
    },
    Dl {
        weights: LstmWeights,
        stats: SeqStats,
    },
    Embedded {
        mlp: MlpWeights,
    },
    MassBalance {
        weights: LstmWeights,
        stats: SeqStats,
    },
    PhysicsResidual {
        weights: LstmWeights,
        stats: SeqStats,
    },
    SurrogateDpl {
        surrogate: Surrogate,
        mlp: MlpWeights,
    },
}

pub struct FitCtx<'a> {
    pub cfg: &'a HarnessConfig,
    pub sites: Vec<&'a SiteAttributes>,
    pub train: Vec<Sample<'a>>,
    pub test: Vec<Sample<'a>>,
    pub seed: u64,
    pub lambda_physics: f64,
}

impl<'a> FitCtx<'a> {
    fn attrs(&self, site_idx: usize) -> &SiteAttributes {
        self.sites[site_idx]
    }
}

pub fn fit_model(kind: ModelKind, ctx: &FitCtx) -> Result<Fitted, String> {
    if ctx.train.is_empty() {
        return Err("empty training set".into());
    }
    match kind {
        ModelKind::PurePbm => fit_pure_pbm(ctx),
        ModelKind::PureDl => fit_pure_dl(ctx),
        ModelKind::EmbeddedNnPbm => fit_embedded(ctx),
        ModelKind::MassBalanceDl => fit_mass_balance(ctx),
        ModelKind::PhysicsResidualDl => fit_physics_residual(ctx),
        ModelKind::SurrogateDpl => fit_surrogate_dpl(ctx),
    }
}

/// Per-site gradient calibration of the bounded process parameters; a
/// site unseen in training falls back to the field-wise mean.
fn fit_pure_pbm(ctx: &FitCtx) -> Result<Fitted, String> {
    let cfg = ctx.cfg;
    let bounds = training::dpl_bounds();
    let mut per_site = Vec::new();
    let mut site_indices: Vec<usize> = ctx.train.iter().map(|s| s.site_idx).collect();
    site_indices.sort_unstable();
    site_indices.dedup();
    for s in site_indices {
        let mut weather = Vec::new();
        let mut obs = Vec::new();
        for sample in ctx.train.iter().filter(|t| t.site_idx == s) {
            weather.extend_from_slice(sample.weather);
            obs.push(sample.observed);
        }
        let result = training::calibrate_pbm(
            &cfg.base_params,
            &bounds,
            &obs,
            &weather,
            &cfg.season(),
            cfg.calib_adam,
            cfg.calib_stop,
        )
        .map_err(|e| e.to_string())?;
        per_site.push((s, result.params));
    }
    let mut fallback = cfg.base_params;
    for (field, _) in &bounds {
        let mean = per_site
            .iter()
            .map(|(_, p)| field.get(p))
            .sum::<f64>()
            / per_site.len() as f64;
        field.set(&mut fallback, mean);
    }
    Ok(Fitted::Pbm { per_site, fallback })
}

/// Pins a closure to the higher-ranked per-sample loss signature so type
/// inference accepts it at the `fit_lstm` call sites.
fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(
        &'t Tape,
        &[Vec<crate::autodiff::Var<'t>>],
        f64,
    ) -> Result<crate::autodiff::Var<'t>, TrainError>,
{
    f
}

/// Shared full-batch LSTM fit; `per_sample_loss` maps one sample's head
/// outputs and normalized label to a loss contribution on the tape.
fn fit_lstm<F>(
    ctx: &FitCtx,
    head_out: usize,
    mode: LstmMode,
    center_labels: bool,
    salt: u64,
    per_sample_loss: F,
) -> Result<(LstmWeights, SeqStats), String>
where
    F: for<'t> Fn(
        &'t Tape,
        &[Vec<crate::autodiff::Var<'t>>],
        f64,
    ) -> Result<crate::autodiff::Var<'t>, TrainError>,
{
    let cfg = ctx.cfg;
    let stats = seq_stats(&ctx.train, cfg, center_labels);
    let build = |samples: &[Sample]| -> Vec<(Vec<Vec<f64>>, f64)> {
        samples
            .iter()
            .map(|s| {
                let seq = sequence_for(s, ctx.attrs(s.site_idx), cfg, &stats);
                let label = (s.observed - stats.label_mean) / stats.label_std;
                (seq, label)
            })
            .collect()
    };
    let train_set = build(&ctx.train);
    let test_set = if ctx.test.is_empty() {
        build(&ctx.train)
    } else {
        build(&ctx.test)
    };

    let input_size = 4 + 3;
    let init = neural::init_lstm(
        input_size,
        cfg.hidden_size,
        &[cfg.hidden_size, head_out],
        sub_seed(ctx.seed, salt),
    );
    let template = init.clone();

    let batch = |flat: &[f64], set: &[(Vec<Vec<f64>>, f64)], with_grad: bool| {
        let mut w = template.clone();
        w.load_flat(flat);
        let tape = Tape::new();
        let (vars, leaves) = w.lift(&tape).map_err(TrainError::Neural)?;
        let mut acc = tape.constant(0.0);
        for (seq, label) in set {
            let outs = neural::lstm_forward(&vars, &tape, seq, mode)
                .map_err(TrainError::Neural)?;
            acc = acc + per_sample_loss(&tape, &outs, *label)?;
        }
        let loss = acc / set.len() as f64;
        if !with_grad {
            return Ok((loss.value(), Vec::new()));
        }
        let grad = tape.backward(loss).map_err(TrainError::Ad)?;
        Ok((loss.value(), neural::flat_grad(&grad, &leaves)))
    };

    let mut objective = FnObjective {
        train: |p: &[f64]| batch(p, &train_set, true),
        test: |p: &[f64]| batch(p, &test_set, false).map(|(l, _)| l),
    };
    let report = training::train(&mut objective, init.flatten(), cfg.nn_adam, cfg.nn_stop)
        .map_err(|e| e.to_string())?;
    let mut weights = init;
    weights.load_flat(&report.best_params);
    Ok((weights, stats))
}

fn fit_pure_dl(ctx: &FitCtx) -> Result<Fitted, String> {
    let (weights, stats) = fit_lstm(
        ctx,
        1,
        LstmMode::Last,
        true,
        11,
        loss_fn(|_tape, outs, label| {
            let d = outs[0][0] - label;
            Ok(d * d)
        }),
    )?;
    Ok(Fitted::Dl { weights, stats })
}

fn fit_mass_balance(ctx: &FitCtx) -> Result<Fitted, String> {
    let lambda = ctx.lambda_physics;
    let (weights, stats) = fit_lstm(
        ctx,
        2,
        LstmMode::PerStep,
        false,
        13,
        loss_fn(move |_tape, outs, label| {
            let growth: Vec<_> = outs.iter().map(|o| o[0].softplus()).collect();
            let biomass: Vec<_> = outs.iter().map(|o| o[1]).collect();
            let d = *biomass.last().expect("non-empty season") - label;
            let penalty = hybrid::mass_balance_penalty(&growth, &biomass)
                .map_err(|_| TrainError::EmptyInput)?;
            Ok(d * d + penalty * lambda)
        }),
    )?;
    Ok(Fitted::MassBalance { weights, stats })
}

fn fit_physics_residual(ctx: &FitCtx) -> Result<Fitted, String> {
    let cfg = ctx.cfg;
    let lambda = ctx.lambda_physics;
    let stats = seq_stats(&ctx.train, cfg, false);
    // companion growth increments at the fixed prior parameters, in the
    // same scale as the normalized labels
    let growth_of = |samples: &[Sample]| -> Result<Vec<Vec<f64>>, String> {
        samples
            .iter()
            .map(|s| {
                hybrid::companion_growth(s.weather, &cfg.base_params, &cfg.season(), cfg.step_days)
                    .map(|g| g.iter().map(|v| v / stats.label_std).collect::<Vec<f64>>())
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let train_growth = growth_of(&ctx.train)?;
    let test_growth = if ctx.test.is_empty() {
        growth_of(&ctx.train)?
    } else {
        growth_of(&ctx.test)?
    };
    let build = |samples: &[Sample]| -> Vec<(Vec<Vec<f64>>, f64)> {
        samples
            .iter()
            .map(|s| {
                let seq = sequence_for(s, ctx.attrs(s.site_idx), cfg, &stats);
                let label = s.observed / stats.label_std;
                (seq, label)
            })
            .collect()
    };
    let train_set = build(&ctx.train);
    let test_set = if ctx.test.is_empty() {
        build(&ctx.train)
    } else {
        build(&ctx.test)
    };

    let init = neural::init_lstm(
        4 + 3,
        cfg.hidden_size,
        &[cfg.hidden_size, 1],
        sub_seed(ctx.seed, 17),
    );
    let template = init.clone();
    let batch = |flat: &[f64],
                 set: &[(Vec<Vec<f64>>, f64)],
                 growth: &[Vec<f64>],
                 with_grad: bool|
     -> Result<(f64, Vec<f64>), TrainError> {
        let mut w = template.clone();
        w.load_flat(flat);
        let tape = Tape::new();
        let (vars, leaves) = w.lift(&tape).map_err(TrainError::Neural)?;
        let mut acc = tape.constant(0.0);
        for ((seq, label), g) in set.iter().zip(growth) {
            let outs = neural::lstm_forward(&vars, &tape, seq, LstmMode::PerStep)
                .map_err(TrainError::Neural)?;
            let predicted: Vec<_> = outs.iter().map(|o| o[0]).collect();
            let d = *predicted.last().expect("non-empty season") - *label;
            let penalty = hybrid::physics_residual_penalty(&predicted, g)
                .map_err(|_| TrainError::EmptyInput)?;
            acc = acc + d * d + penalty * lambda;
        }
        let loss = acc / set.len() as f64;
        if !with_grad {
            return Ok((loss.value(), Vec::new()));
        }
        let grad = tape.backward(loss).map_err(TrainError::Ad)?;
        Ok((loss.value(), neural::flat_grad(&grad, &leaves)))
    };
    let mut objective = FnObjective {
        train: |p: &[f64]| batch(p, &train_set, &train_growth, true),
        test: |p: &[f64]| batch(p, &test_set, &test_growth, false).map(|(l, _)| l),
    };
    let report = training::train(&mut objective, init.flatten(), cfg.nn_adam, cfg.nn_stop)
        .map_err(|e| e.to_string())?;
    let mut weights = init;
    weights.load_flat(&report.best_params);
    Ok(Fitted::PhysicsResidual { weights, stats })
}

fn fit_embedded(ctx: &FitCtx) -> Result<Fitted, String> {
    let cfg = ctx.cfg;
    let init = neural::init_mlp(
        &[3, cfg.mlp_hidden, 1],
        &[Activation::Tanh, Activation::Identity],
        sub_seed(ctx.seed, 19),
    );
    let template = init.clone();
    let season = cfg.season();
    let batch = |flat: &[f64], set: &[Sample], with_grad: bool| -> Result<(f64, Vec<f64>), TrainError> {
        let mut w = template.clone();
        w.load_flat(flat);
        let tape = Tape::new();
        let (vars, leaves) = w.lift(&tape).map_err(TrainError::Neural)?;
        let params = cfg.base_params.lift(&tape)?;
        let mut preds = Vec::with_capacity(set.len());
        let mut obs = Vec::with_capacity(set.len());
        for s in set {
            let run = hybrid::embedded_season(
                &tape,
                &vars,
                s.weather,
                &params,
                &SimOptions::default(),
                &season,
            )
            .map_err(|_| TrainError::EmptyInput)?;
            preds.push(run.harvest_biomass);
            obs.push(s.observed);
        }
        let loss = mse_loss(&preds, &obs)?;
        if !with_grad {
            return Ok((loss.value(), Vec::new()));
        }
        let grad = tape.backward(loss).map_err(TrainError::Ad)?;
        Ok((loss.value(), neural::flat_grad(&grad, &leaves)))
    };
    let test_ref: &[Sample] = if ctx.test.is_empty() {
        &ctx.train
    } else {
        &ctx.test
    };
    let mut objective = FnObjective {
        train: |p: &[f64]| batch(p, &ctx.train, true),
        test: |p: &[f64]| batch(p, test_ref, false).map(|(l, _)| l),
    };
    let report = training::train(&mut objective, init.flatten(), cfg.nn_adam, cfg.nn_stop)
        .map_err(|e| e.to_string())?;
    let mut mlp = init;
    mlp.load_flat(&report.best_params);
    Ok(Fitted::Embedded { mlp })
}

fn fit_surrogate_dpl(ctx: &FitCtx) -> Result<Fitted, String> {
    let cfg = ctx.cfg;
    let bounds = training::dpl_bounds();
    // the emulator learns from simulations, not observations, so it may
    // draw weather from every window the fit is allowed to see
    let pool: Vec<Vec<DailyWeather>> = ctx
        .train
        .iter()
        .chain(&ctx.test)
        .map(|s| s.weather.to_vec())
        .collect();
    let surrogate = hybrid::train_surrogate(
        &cfg.base_params,
        &bounds,
        &pool,
        &cfg.season(),
        &SurrogateSpec {
            hidden_size: cfg.hidden_size,
            n_samples: cfg.surrogate_samples,
            step_days: cfg.step_days,
            seed: sub_seed(ctx.seed, 23),
            adam: cfg.surrogate_adam,
            stop: cfg.surrogate_stop,
        },
    )
    .map_err(|e| e.to_string())?;

    // dPL head trained through the frozen emulator
    let init = neural::init_mlp(
        &[3, cfg.mlp_hidden, bounds.len()],
        &[Activation::Tanh, Activation::Identity],
        sub_seed(ctx.seed, 29),
    );
    let template = init.clone();
    let season = cfg.season();
    let prepared = |samples: &[Sample]| -> Vec<(usize, Vec<Vec<f64>>, f64)> {
        samples
            .iter()
            .map(|s| {
                let window = &s.weather[season.sowing_doy - 1..];
                let steps = data::standardize(
                    &data::aggregate_features(window, surrogate.step_days),
                    &surrogate.weather_mean,
                    &surrogate.weather_std,
                );
                (s.site_idx, steps, s.observed)
            })
            .collect()
    };
    let train_set = prepared(&ctx.train);
    // early stopping judges candidate θ maps the way they will be used:
    // through the real model, not the emulator
    let test_samples: &[Sample] = if ctx.test.is_empty() {
        &ctx.train
    } else {
        &ctx.test
    };
    let real_test_loss = |flat: &[f64]| -> Result<f64, TrainError> {
        let mut w = template.clone();
        w.load_flat(flat);
        let mut theta_per_site = Vec::with_capacity(ctx.sites.len());
        for attrs in &ctx.sites {
            theta_per_site.push(
                hybrid::dpl_parameterize_values(&w, attrs, &cfg.base_params, &bounds)
                    .map_err(|_| TrainError::EmptyInput)?,
            );
        }
        let mut sq = 0.0;
        for s in test_samples {
            let p = pbm_harvest(&theta_per_site[s.site_idx], s.weather, &season)
                .map_err(|_| TrainError::EmptyInput)?;
            sq += (p - s.observed) * (p - s.observed);
        }
        Ok(sq / test_samples.len() as f64)
    };

    let batch = |flat: &[f64],
                 set: &[(usize, Vec<Vec<f64>>, f64)],
                 with_grad: bool|
     -> Result<(f64, Vec<f64>), TrainError> {
        let mut w = template.clone();
        w.load_flat(flat);
        let tape = Tape::new();
        let (mlp_vars, leaves) = w.lift(&tape).map_err(TrainError::Neural)?;
        let (lstm_vars, _) = surrogate.weights.lift(&tape).map_err(TrainError::Neural)?;
        // per-site normalized θ from the attribute map
        let mut theta_per_site = Vec::new();
        for attrs in &ctx.sites {
            let feats: Vec<_> = attrs
                .normalized()
                .iter()
                .map(|&v| tape.constant(v))
                .collect();
            let raw = neural::mlp_forward(&mlp_vars, &feats).map_err(TrainError::Neural)?;
            let theta_norm: Vec<_> = raw.iter().map(|r| r.sigmoid()).collect();
            theta_per_site.push(theta_norm);
        }
        let mut preds = Vec::with_capacity(set.len());
        let mut obs = Vec::with_capacity(set.len());
        for (site_idx, steps, observed) in set {
            let theta = &theta_per_site[*site_idx];
            let sequence: Vec<Vec<crate::autodiff::Var>> = steps
                .iter()
                .map(|step| {
                    let mut v: Vec<_> = step.iter().map(|&x| tape.constant(x)).collect();
                    v.extend_from_slice(theta);
                    v
                })
                .collect();
            let outs = neural::lstm_forward_vars(&lstm_vars, &tape, &sequence, LstmMode::PerStep)
                .map_err(TrainError::Neural)?;
            let last = outs.last().expect("non-empty season")[0];
            preds.push(last * surrogate.label_std + surrogate.label_mean);
            obs.push(*observed);
        }
        let loss = mse_loss(&preds, &obs)?;
        if !with_grad {
            return Ok((loss.value(), Vec::new()));
        }
        let grad = tape.backward(loss).map_err(TrainError::Ad)?;
        Ok((loss.value(), neural::flat_grad(&grad, &leaves)))
    };
    let mut objective = FnObjective {
        train: |p: &[f64]| batch(p, &train_set, true),
        test: |p: &[f64]| real_test_loss(p),
    };
    let report = training::train(
        &mut objective,
        init.flatten(),
        cfg.surrogate_adam,
        cfg.surrogate_stop,
    )
    .map_err(|e| e.to_string())?;
    let mut mlp = init;
    mlp.load_flat(&report.best_params);
    Ok(Fitted::SurrogateDpl { surrogate, mlp })
}

impl Fitted {
    pub fn predict(
        &self,
        cfg: &HarnessConfig,
        site_idx: usize,
        attrs: &SiteAttributes,
        year_weather: &[DailyWeather],
    ) -> Result<f64, String> {
        let season = cfg.season();
        match self {
            Fitted::Pbm { per_site, fallback } => {
                let params = per_site
                    .iter()
                    .find(|(s, _)| *s == site_idx)
                    .map(|(_, p)| p)
                    .unwrap_or(fallback);
                pbm_harvest(params, year_weather, &season)
            }
            Fitted::Embedded { mlp } => {
                let tape = Tape::new();
                let (vars, _) = mlp.lift(&tape).map_err(|e| e.to_string())?;
                let params = cfg.base_params.lift(&tape).map_err(|e| e.to_string())?;
                let run = hybrid::embedded_season(
                    &tape,
                    &vars,
                    year_weather,
                    &params,
                    &SimOptions::default(),
                    &season,
                )
                .map_err(|e| e.to_string())?;
                Ok(run.harvest_biomass.value())
            }
            Fitted::Dl { weights, stats }
            | Fitted::MassBalance { weights, stats }
            | Fitted::PhysicsResidual { weights, stats } => {
                let sample = Sample {
                    site_idx,
                    year: 0,
                    weather: year_weather,
                    observed: 0.0,
                };
                let seq = sequence_for(&sample, attrs, cfg, stats);
                let tape = Tape::new();
                let (vars, _) = weights.lift(&tape).map_err(|e| e.to_string())?;
                let mode = if matches!(self, Fitted::Dl { .. }) {
                    LstmMode::Last
                } else {
                    LstmMode::PerStep
                };
                let outs = neural::lstm_forward(&vars, &tape, &seq, mode)
                    .map_err(|e| e.to_string())?;
                let raw = match self {
                    // mass balance emits (growth, biomass); biomass is slot 1
                    Fitted::MassBalance { .. } => outs.last().expect("season")[1],
                    _ => outs.last().expect("season")[0],
                };
                Ok(raw.value() * stats.label_std + stats.label_mean)
            }
            Fitted::SurrogateDpl { surrogate, mlp } => {
                // the emulator only supplies training gradients; predictions
                // run the real model at the inferred parameters
                let theta = hybrid::dpl_parameterize_values(
                    mlp,
                    attrs,
                    &cfg.base_params,
                    &surrogate.bounds,
                )
                .map_err(|e| e.to_string())?;
                pbm_harvest(&theta, year_weather, &season)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment protocols
// ---------------------------------------------------------------------------

/// Run independent jobs, in parallel when the `parallel` feature is on;
/// output order always matches input order.
pub fn map_jobs<T, R, F>(jobs: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(f).collect()
    }
}

struct CellResult {
    records: Vec<CellRecord>,
    scatter: Vec<ScatterRow>,
    boxes: Vec<BoxRow>,
}

fn evaluate_split(
    fitted: &Fitted,
    cfg: &HarnessConfig,
    twin: &TwinData,
    samples: &[Sample],
) -> Result<(Metrics, Vec<(usize, usize, f64, f64)>), String> {
    let mut predicted = Vec::with_capacity(samples.len());
    let mut observed = Vec::with_capacity(samples.len());
    let mut points = Vec::with_capacity(samples.len());
    for s in samples {
        let attrs = &twin.sites[s.site_idx].attrs;
        let p = fitted.predict(cfg, s.site_idx, attrs, s.weather)?;
        predicted.push(p);
        observed.push(s.observed);
        points.push((s.site_idx, s.year, s.observed, p));
    }
    let m = metrics(&predicted, &observed).map_err(|e| e.to_string())?;
    Ok((m, points))
}

fn run_cell(
    spec: &ExperimentSpec,
    model: ModelKind,
    condition: &str,
    seed: u64,
    level: u8,
    plan_override: Option<&SplitPlan>,
    fold_sites: Option<(&[usize], usize)>,
    collect_scatter: bool,
    collect_boxes: bool,
) -> CellResult {
    let cfg = &spec.config;
    let outcome = (|| -> Result<CellResult, String> {
        let twin = build_twin(cfg, seed, level, spec.noise_target)?;
        let plan = plan_override.unwrap_or(&twin.split);
        let (train_sites, validation_sites): (Vec<usize>, Vec<usize>) = match fold_sites {
            Some((train, held_out)) => (train.to_vec(), vec![held_out]),
            None => {
                let all: Vec<usize> = (0..twin.sites.len()).collect();
                (all.clone(), all)
            }
        };
        let train = twin_samples(&twin, &train_sites, &plan.train_years, true);
        let test = twin_samples(&twin, &train_sites, &plan.test_years, true);
        let validation =
            twin_samples(&twin, &validation_sites, &plan.validation_years, false);
        let ctx = FitCtx {
            cfg,
            sites: twin.sites.iter().map(|s| &s.attrs).collect(),
            train,
            test,
            seed,
            lambda_physics: spec.lambda_physics,
        };
        let fitted = fit_model(model, &ctx)?;

        let mut records = Vec::new();
        let mut scatter = Vec::new();
        let mut boxes = Vec::new();
        for (split, samples) in [
            ("train", &ctx.train),
            ("test", &ctx.test),
            ("validation", &validation),
        ] {
            if samples.is_empty() {
                continue;
            }
            let (m, points) = evaluate_split(&fitted, cfg, &twin, samples)?;
            records.push(CellRecord {
                model: model.name().into(),
                condition: condition.into(),
                seed,
                split: split.into(),
                r2: m.r_squared,
                rmse: Some(m.rmse),
                status: if m.r_squared.is_some() {
                    "ok".into()
                } else {
                    "ok (r2 undefined: constant observations)".into()
                },
            });
            if collect_scatter && split == "validation" {
                for (site_idx, year, obs, pred) in &points {
                    scatter.push(ScatterRow {
                        year: twin.sites[*site_idx].clean_weather.start_year + *year as i32,
                        observed: *obs,
                        predicted: *pred,
                        model: model.name().into(),
                        level: condition.into(),
                    });
                }
            }
            if collect_boxes {
                boxes.push(BoxRow {
                    model: model.name().into(),
                    fold: condition.into(),
                    split: split.into(),
                    rmse: m.rmse,
                });
            }
        }
        Ok(CellResult {
            records,
            scatter,
            boxes,
        })
    })();

    outcome.unwrap_or_else(|message| CellResult {
        records: ["train", "test", "validation"]
            .iter()
            .map(|split| CellRecord {
                model: model.name().into(),
                condition: condition.into(),
                seed,
                split: (*split).into(),
                r2: None,
                rmse: None,
                status: format!("failed: {message}"),
            })
            .collect(),
        scatter: Vec::new(),
        boxes: Vec::new(),
    })
}

fn provenance(spec: &ExperimentSpec) -> Provenance {
    Provenance {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seeds: spec.seeds.clone(),
        model_families: spec
            .models
            .iter()
            .map(|m| [m.name().to_string(), m.family().to_string()])
            .collect(),
        config: spec.config.clone(),
    }
}

fn summarize(cells: &[CellRecord], groups: &[(ModelKind, String)]) -> Vec<SummaryRecord> {
    let mut out = Vec::new();
    for (model, condition) in groups {
        for (metric_name, pick) in [
            ("r2", Box::new(|c: &CellRecord| c.r2) as Box<dyn Fn(&CellRecord) -> Option<f64>>),
            ("rmse", Box::new(|c: &CellRecord| c.rmse)),
        ] {
            let values: Vec<f64> = cells
                .iter()
                .filter(|c| {
                    c.model == model.name()
                        && &c.condition == condition
                        && c.split == "validation"
                })
                .filter_map(&pick)
                .collect();
            if let Some(b) = boxplot_summary(&values) {
                out.push(SummaryRecord {
                    model: model.name().into(),
                    condition: format!("{condition}/validation/{metric_name}"),
                    min: b.min,
                    q1: b.q1,
                    median: b.median,
                    q3: b.q3,
                    max: b.max,
                });
            }
        }
    }
    out
}

pub fn run_noise_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, EvalError> {
    if spec.protocol != Protocol::Noise {
        return Err(EvalError::InvalidSpec("protocol must be noise".into()));
    }
    spec.validate()?;
    let mut jobs = Vec::new();
    for &model in &spec.models {
        for &level in &spec.noise_levels {
            for &seed in &spec.seeds {
                jobs.push((model, level, seed));
            }
        }
    }
    let results = map_jobs(&jobs, |&(model, level, seed)| {
        run_cell(
            spec,
            model,
            &format!("level={level}"),
            seed,
            level,
            None,
            None,
            true,
            false,
        )
    });
    Ok(assemble(spec, results, |spec| {
        let mut groups = Vec::new();
        for &m in &spec.models {
            for &l in &spec.noise_levels {
                groups.push((m, format!("level={l}")));
            }
        }
        groups
    }))
}

pub fn run_fewshot_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, EvalError> {
    if spec.protocol != Protocol::Fewshot {
        return Err(EvalError::InvalidSpec("protocol must be fewshot".into()));
    }
    spec.validate()?;
    let mut jobs = Vec::new();
    for &model in &spec.models {
        for &k in &spec.fewshot_k {
            for &seed in &spec.seeds {
                jobs.push((model, k, seed));
            }
        }
    }
    let results = map_jobs(&jobs, |&(model, k, seed)| {
        // reduce the training years to k before fitting; the base plan is
        // the one the twin for this seed would produce
        let base_plan = data::split_years(
            spec.config.n_years,
            spec.config.calibration_years,
            spec.config.train_fraction,
            sub_seed(seed, 1),
        );
        match base_plan.and_then(|p| data::fewshot_subset(&p, k, sub_seed(seed, 31))) {
            Ok(plan) => run_cell(
                spec,
                model,
                &format!("k={k}"),
                seed,
                0,
                Some(&plan),
                None,
                false,
                false,
            ),
            Err(e) => CellResult {
                records: vec![CellRecord {
                    model: model.name().into(),
                    condition: format!("k={k}"),
                    seed,
                    split: "all".into(),
                    r2: None,
                    rmse: None,
                    status: format!("failed: {e}"),
                }],
                scatter: Vec::new(),
                boxes: Vec::new(),
            },
        }
    });
    Ok(assemble(spec, results, |spec| {
        let mut groups = Vec::new();
        for &m in &spec.models {
            for &k in &spec.fewshot_k {
                groups.push((m, format!("k={k}")));
            }
        }
        groups
    }))
}

pub fn run_spatial_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, EvalError> {
    if spec.protocol != Protocol::Spatial {
        return Err(EvalError::InvalidSpec("protocol must be spatial".into()));
    }
    spec.validate()?;
    let sites = data::default_sites();
    let folds = data::spatial_folds(&sites)?;
    let mut jobs = Vec::new();
    for &model in &spec.models {
        for (fold_idx, fold) in folds.iter().enumerate() {
            for &seed in &spec.seeds {
                jobs.push((model, fold_idx, fold.validation_site.clone(), seed));
            }
        }
    }
    let results = map_jobs(&jobs, |(model, fold_idx, validation_site, seed)| {
        let train_sites: Vec<usize> = (0..sites.len()).filter(|i| i != fold_idx).collect();
        run_cell(
            spec,
            *model,
            &format!("fold={validation_site}"),
            *seed,
            0,
            None,
            Some((&train_sites, *fold_idx)),
            false,
            true,
        )
    });
    Ok(assemble(spec, results, |spec| {
        let mut groups = Vec::new();
        for &m in &spec.models {
            for fold in &folds {
                groups.push((m, format!("fold={}", fold.validation_site)));
            }
        }
        groups
    }))
}

fn assemble<G>(spec: &ExperimentSpec, results: Vec<CellResult>, groups: G) -> ExperimentOutput
where
    G: Fn(&ExperimentSpec) -> Vec<(ModelKind, String)>,
{
    let mut cells = Vec::new();
    let mut fig7 = Vec::new();
    let mut fig9 = Vec::new();
    for r in results {
        cells.extend(r.records);
        fig7.extend(r.scatter);
        fig9.extend(r.boxes);
    }
    let summaries = summarize(&cells, &groups(spec));
    ExperimentOutput {
        report: ExperimentReport {
            spec: spec.clone(),
            provenance: provenance(spec),
            cells,
            summaries,
        },
        fig7,
        fig9,
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, EvalError> {
    match spec.protocol {
        Protocol::Noise => run_noise_experiment(spec),
        Protocol::Fewshot => run_fewshot_experiment(spec),
        Protocol::Spatial => run_spatial_experiment(spec),
    }
}
