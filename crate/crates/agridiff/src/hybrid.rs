//! The four hybrid architectures coupling the crop model and the neural
//! components on one tape: a learned stress response embedded in the
//! simulator, a mass-balance-penalized recurrent predictor, a trainable
//! emulator used for gradient calibration, and a physics-residual loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::data::{self, SiteAttributes};
use crate::neural::{
    self, LstmCheckpoint, LstmMode, LstmVars, LstmWeights, MlpCheckpoint, MlpVars, MlpWeights,
    NeuralError,
};
use crate::pbm::{
    self, CropParams, DailyWeather, ParamVars, PbmError, SeasonConfig, SeasonRun, SimOptions,
    StateVars, StressCtx,
};
use crate::training::{
    self, mse_loss, AdamConfig, Bounds, CropField, EarlyStopConfig, FnObjective, TrainError,
};

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("invalid hybrid model: {0}")]
    InvalidModel(String),
    #[error("degenerate sampling bounds for {0:?}")]
    DegenerateBounds(CropField),
    #[error("length mismatch: {context} expected {expected}, got {got}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Pbm(#[from] PbmError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridKind {
    EmbeddedNnPbm,
    MassBalanceDl,
    SurrogateDpl,
    PhysicsResidualDl,
}

impl HybridKind {
    /// Reporting taxonomy: neural components inside a process model vs
    /// process structure constraining a neural model.
    pub fn family(self) -> &'static str {
        match self {
            HybridKind::EmbeddedNnPbm | HybridKind::MassBalanceDl => "dl_informed_pbm",
            HybridKind::SurrogateDpl | HybridKind::PhysicsResidualDl => "pbm_informed_dl",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnCheckpoint {
    Mlp(MlpCheckpoint),
    Lstm(LstmCheckpoint),
}

/// One hybrid instance: the crop parameters it holds fixed, the subset it
/// treats as trainable (with bounds), its network, and the physics weight.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub kind: HybridKind,
    pub params: CropParams,
    pub learnable: Vec<(CropField, Bounds)>,
    pub mlp: Option<MlpWeights>,
    pub lstm: Option<LstmWeights>,
    pub lambda_physics: f64,
}

impl HybridModel {
    pub fn validate(&self) -> Result<(), HybridError> {
        let fail = |msg: &str| Err(HybridError::InvalidModel(msg.into()));
        if self.lambda_physics < 0.0 {
            return fail("lambda_physics must be >= 0");
        }
        let uses_lambda = matches!(
            self.kind,
            HybridKind::MassBalanceDl | HybridKind::PhysicsResidualDl
        );
        if !uses_lambda && self.lambda_physics != 0.0 {
            return fail("lambda_physics is only used by MassBalanceDl and PhysicsResidualDl");
        }
        for (i, (field, _)) in self.learnable.iter().enumerate() {
            if self.learnable[i + 1..].iter().any(|(f, _)| f == field) {
                return fail("learnable fields must be distinct");
            }
        }
        match self.kind {
            HybridKind::EmbeddedNnPbm => match &self.mlp {
                Some(m) if m.input_size() == 3 && m.output_size() == 1 => Ok(()),
                Some(_) => fail("EmbeddedNnPbm needs a 3-input, 1-output MLP"),
                None => fail("EmbeddedNnPbm needs an MLP"),
            },
            HybridKind::SurrogateDpl => match &self.mlp {
                Some(m) if m.output_size() == self.learnable.len() => Ok(()),
                Some(_) => fail("SurrogateDpl MLP must emit one output per learnable field"),
                None => fail("SurrogateDpl needs an MLP"),
            },
            HybridKind::MassBalanceDl => match &self.lstm {
                Some(l) if l.head.output_size() == 2 => Ok(()),
                Some(_) => fail("MassBalanceDl LSTM head must emit (growth, biomass)"),
                None => fail("MassBalanceDl needs an LSTM"),
            },
            HybridKind::PhysicsResidualDl => match &self.lstm {
                Some(l) if l.head.output_size() == 1 => Ok(()),
                Some(_) => fail("PhysicsResidualDl LSTM head must emit biomass"),
                None => fail("PhysicsResidualDl needs an LSTM"),
            },
        }
    }

    pub fn checkpoint(&self) -> HybridCheckpoint {
        let nn = match (&self.mlp, &self.lstm) {
            (Some(m), _) => NnCheckpoint::Mlp(MlpCheckpoint::capture(m, 0)),
            (_, Some(l)) => NnCheckpoint::Lstm(LstmCheckpoint::capture(l, 0)),
            _ => unreachable!("validated models carry a network"),
        };
        HybridCheckpoint {
            kind: self.kind,
            params: self.params,
            learnable: self.learnable.clone(),
            nn,
            lambda_physics: self.lambda_physics,
        }
    }
}

/// JSON-serializable bundle of a hybrid model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridCheckpoint {
    pub kind: HybridKind,
    pub params: CropParams,
    pub learnable: Vec<(CropField, Bounds)>,
    pub nn: NnCheckpoint,
    pub lambda_physics: f64,
}

impl HybridCheckpoint {
    pub fn restore(&self) -> HybridModel {
        let (mlp, lstm) = match &self.nn {
            NnCheckpoint::Mlp(c) => (Some(c.restore()), None),
            NnCheckpoint::Lstm(c) => (None, Some(c.restore())),
        };
        HybridModel {
            kind: self.kind,
            params: self.params,
            learnable: self.learnable.clone(),
            mlp,
            lstm,
            lambda_physics: self.lambda_physics,
        }
    }
}

// ---------------------------------------------------------------------------
// EmbeddedNnPbm: learned water-stress response inside the simulator
// ---------------------------------------------------------------------------

/// Learned stress multiplier m = σ(MLP(soil_water/s_max, t_mean/30, dvs)).
/// The MLP must be 3-in/1-out; shape is checked by `HybridModel::validate`.
pub fn embedded_stress<'t>(mlp: &MlpVars<'t>, ctx: &StressCtx<'t>) -> Var<'t> {
    let features = [
        ctx.soil_water / ctx.params.s_max,
        ctx.t_mean / 30.0,
        ctx.dvs,
    ];
    let out = neural::mlp_forward(mlp, &features).expect("stress MLP shape checked at build");
    out[0].sigmoid()
}

/// The full simulator with the water-stress subprocess replaced by the
/// learned response; everything else is the unmodified process model.
pub fn embedded_forward<'t>(
    mlp: &MlpVars<'t>,
    init: StateVars<'t>,
    weather: &[DailyWeather],
    params: &ParamVars<'t>,
    opts: &SimOptions,
) -> Result<Vec<StateVars<'t>>, HybridError> {
    Ok(pbm::simulate_with(init, weather, params, opts, |ctx| {
        embedded_stress(mlp, ctx)
    })?)
}

/// One growing season under the embedded model.
pub fn embedded_season<'t>(
    tape: &'t Tape,
    mlp: &MlpVars<'t>,
    year_weather: &[DailyWeather],
    params: &ParamVars<'t>,
    opts: &SimOptions,
    season: &SeasonConfig,
) -> Result<SeasonRun<'t>, HybridError> {
    Ok(pbm::simulate_season(
        tape,
        year_weather,
        params,
        opts,
        season,
        |ctx| embedded_stress(mlp, ctx),
    )?)
}

// ---------------------------------------------------------------------------
// MassBalanceDl: recurrent predictor constrained by mass balance
// ---------------------------------------------------------------------------

pub struct MassBalanceOutput<'t> {
    /// non-negative per-step growth (softplus of the first head output)
    pub growth: Vec<Var<'t>>,
    /// per-step biomass (second head output)
    pub biomass: Vec<Var<'t>>,
    /// mean over t of (biomass_t − Σ_{τ≤t} growth_τ)²
    pub penalty: Var<'t>,
}

/// Mean squared gap between the emitted biomass and the running sum of
/// the emitted growth.
pub fn mass_balance_penalty<'t>(
    growth: &[Var<'t>],
    biomass: &[Var<'t>],
) -> Result<Var<'t>, HybridError> {
    if growth.is_empty() || growth.len() != biomass.len() {
        return Err(HybridError::LengthMismatch {
            context: "mass balance penalty",
            expected: biomass.len(),
            got: growth.len(),
        });
    }
    let tape = growth[0].tape();
    let mut cumulative = tape.constant(0.0);
    let mut acc = tape.constant(0.0);
    for (&g, &b) in growth.iter().zip(biomass) {
        cumulative = cumulative + g;
        let gap = b - cumulative;
        acc = acc + gap * gap;
    }
    Ok(acc / growth.len() as f64)
}

/// LSTM sweep over one season's (aggregated) weather; the head emits raw
/// growth (made non-negative via softplus) and biomass at every step.
pub fn mass_balance_forward<'t>(
    lstm: &LstmVars<'t>,
    tape: &'t Tape,
    sequence: &[Vec<f64>],
) -> Result<MassBalanceOutput<'t>, HybridError> {
    let outputs = neural::lstm_forward(lstm, tape, sequence, LstmMode::PerStep)?;
    let mut growth = Vec::with_capacity(outputs.len());
    let mut biomass = Vec::with_capacity(outputs.len());
    for step in &outputs {
        if step.len() != 2 {
            return Err(HybridError::LengthMismatch {
                context: "mass balance head",
                expected: 2,
                got: step.len(),
            });
        }
        growth.push(step[0].softplus());
        biomass.push(step[1]);
    }
    let penalty = mass_balance_penalty(&growth, &biomass)?;
    Ok(MassBalanceOutput {
        growth,
        biomass,
        penalty,
    })
}

// ---------------------------------------------------------------------------
// SurrogateDpl part 1: differentiable parameter learning
// ---------------------------------------------------------------------------

/// θ = g(A): the MLP maps normalized site attributes to raw outputs that
/// are squashed into the physical bounds; all other fields stay at `base`.
pub fn dpl_parameterize<'t>(
    mlp: &MlpVars<'t>,
    attributes: &SiteAttributes,
    base: &ParamVars<'t>,
    bounds: &[(CropField, Bounds)],
) -> Result<ParamVars<'t>, HybridError> {
    let tape = base.rue.tape();
    let features: Vec<Var> = attributes
        .normalized()
        .iter()
        .map(|&v| tape.constant(v))
        .collect();
    let raw = neural::mlp_forward(mlp, &features)?;
    if raw.len() != bounds.len() {
        return Err(HybridError::LengthMismatch {
            context: "dPL outputs",
            expected: bounds.len(),
            got: raw.len(),
        });
    }
    let mut params = *base;
    for ((field, b), &r) in bounds.iter().zip(&raw) {
        field.set_var(&mut params, b.squash(r));
    }
    Ok(params)
}

/// Plain-value view of the dPL map, for inspection and reporting.
pub fn dpl_parameterize_values(
    mlp: &MlpWeights,
    attributes: &SiteAttributes,
    base: &CropParams,
    bounds: &[(CropField, Bounds)],
) -> Result<CropParams, HybridError> {
    let tape = Tape::new();
    let (mlp_vars, _) = mlp.lift(&tape)?;
    let base_vars = base.lift(&tape)?;
    let pv = dpl_parameterize(&mlp_vars, attributes, &base_vars, bounds)?;
    let mut out = *base;
    for (field, _) in bounds {
        let value = match field {
            CropField::TBase => pv.t_base,
            CropField::TtMature => pv.tt_mature,
            CropField::TtSen => pv.tt_sen,
            CropField::KExt => pv.k_ext,
            CropField::Rue => pv.rue,
            CropField::Sla => pv.sla,
            CropField::LaiInit => pv.lai_init,
            CropField::SMax => pv.s_max,
            CropField::PCrit => pv.p_crit,
            CropField::KEt => pv.k_et,
            CropField::RSen => pv.r_sen,
        }
        .value();
        field.set(&mut out, value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// SurrogateDpl part 2: emulator training and gradient calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SurrogateSpec {
    pub hidden_size: usize,
    pub n_samples: usize,
    pub step_days: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub stop: EarlyStopConfig,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            hidden_size: 8,
            n_samples: 64,
            step_days: data::WEEK_DAYS,
            seed: 0,
            adam: AdamConfig::with_lr(0.01),
            stop: EarlyStopConfig {
                patience: 15,
                min_delta: 1e-5,
                max_epochs: 120,
            },
        }
    }
}

/// A trained emulator of the crop model: weekly weather plus normalized
/// parameters in, weekly total biomass out, with the normalization
/// statistics needed to apply it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Surrogate {
    pub weights: LstmWeights,
    pub base: CropParams,
    pub bounds: Vec<(CropField, Bounds)>,
    pub season_sowing_doy: usize,
    pub step_days: usize,
    pub weather_mean: Vec<f64>,
    pub weather_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
    pub train_rmse: f64,
    pub validation_rmse: f64,
}

/// Step-end total biomass of one simulated season, aligned with the
/// aggregated weather steps of the same window.
pub fn biomass_step_labels(
    year_weather: &[DailyWeather],
    params: &CropParams,
    season: &SeasonConfig,
    step_days: usize,
) -> Result<Vec<f64>, HybridError> {
    let tape = Tape::new();
    let pv = params.lift(&tape)?;
    let run = pbm::simulate_season(
        &tape,
        year_weather,
        &pv,
        &SimOptions::default(),
        season,
        pbm::bucket_stress,
    )?;
    Ok(run
        .trajectory
        .chunks_exact(step_days)
        .map(|chunk| chunk[step_days - 1].w_total.value())
        .collect())
}

/// `biomass_step_labels` at the default weekly step.
pub fn weekly_biomass_labels(
    year_weather: &[DailyWeather],
    params: &CropParams,
    season: &SeasonConfig,
) -> Result<Vec<f64>, HybridError> {
    biomass_step_labels(year_weather, params, season, data::WEEK_DAYS)
}

fn season_window<'a>(year_weather: &'a [DailyWeather], season: &SeasonConfig) -> &'a [DailyWeather] {
    &year_weather[season.sowing_doy - 1..]
}

fn normalized_theta(theta: &CropParams, bounds: &[(CropField, Bounds)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|(field, b)| {
            if b.is_point() {
                0.5
            } else {
                (field.get(theta) - b.low) / (b.high - b.low)
            }
        })
        .collect()
}

/// Emulator input sequence: standardized weekly weather with the
/// normalized parameter vector appended to every step.
fn surrogate_inputs(
    weekly: &[Vec<f64>],
    mean: &[f64],
    std: &[f64],
    theta_norm: &[f64],
) -> Vec<Vec<f64>> {
    data::standardize(weekly, mean, std)
        .into_iter()
        .map(|mut step| {
            step.extend_from_slice(theta_norm);
            step
        })
        .collect()
}

/// Fit an LSTM to emulate the simulator: sample parameter vectors inside
/// the bounds and weather years from the pool, label them with simulated
/// weekly biomass, and train on standardized inputs and labels.
pub fn train_surrogate(
    base: &CropParams,
    bounds: &[(CropField, Bounds)],
    weather_pool: &[Vec<DailyWeather>],
    season: &SeasonConfig,
    spec: &SurrogateSpec,
) -> Result<Surrogate, HybridError> {
    assert!(spec.n_samples >= 1);
    assert!(!weather_pool.is_empty());
    if let Some((field, _)) = bounds.iter().find(|(_, b)| b.is_point()) {
        return Err(HybridError::DegenerateBounds(*field));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut thetas = Vec::with_capacity(spec.n_samples);
    let mut weekly_weather = Vec::with_capacity(spec.n_samples);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let mut theta = *base;
        for (field, b) in bounds {
            field.set(&mut theta, rng.gen_range(b.low..b.high));
        }
        let year = &weather_pool[rng.gen_range(0..weather_pool.len())];
        thetas.push(theta);
        weekly_weather.push(data::aggregate_features(
            season_window(year, season),
            spec.step_days,
        ));
        labels.push(biomass_step_labels(year, &theta, season, spec.step_days)?);
    }

    // last fifth of the samples held out for the emulation RMSE; tiny
    // runs train on everything
    let n_val = spec.n_samples / 5;
    let n_train = spec.n_samples - n_val;

    let (w_mean, w_std) = data::feature_stats(&weekly_weather[..n_train]);
    let flat_labels: Vec<f64> = labels[..n_train].iter().flatten().copied().collect();
    let label_mean = flat_labels.iter().sum::<f64>() / flat_labels.len() as f64;
    let label_std = (flat_labels
        .iter()
        .map(|l| (l - label_mean) * (l - label_mean))
        .sum::<f64>()
        / flat_labels.len() as f64)
        .sqrt()
        .max(1e-9);

    let inputs: Vec<Vec<Vec<f64>>> = (0..spec.n_samples)
        .map(|i| {
            surrogate_inputs(
                &weekly_weather[i],
                &w_mean,
                &w_std,
                &normalized_theta(&thetas[i], bounds),
            )
        })
        .collect();
    let norm_labels: Vec<Vec<f64>> = labels
        .iter()
        .map(|ls| ls.iter().map(|l| (l - label_mean) / label_std).collect())
        .collect();

    let input_size = 4 + bounds.len();
    let mut weights =
        neural::init_lstm(input_size, spec.hidden_size, &[spec.hidden_size, 1], spec.seed);

    let batch_loss = |weights_flat: &[f64],
                      template: &LstmWeights,
                      range: std::ops::Range<usize>,
                      with_grad: bool|
     -> Result<(f64, Vec<f64>), TrainError> {
        let mut w = template.clone();
        w.load_flat(weights_flat);
        let tape = Tape::new();
        let (vars, leaves) = w.lift(&tape)?;
        let mut acc = tape.constant(0.0);
        let mut count = 0usize;
        for i in range {
            let preds = neural::lstm_forward(&vars, &tape, &inputs[i], LstmMode::PerStep)?;
            for (p, &l) in preds.iter().zip(&norm_labels[i]) {
                let d = p[0] - l;
                acc = acc + d * d;
                count += 1;
            }
        }
        let loss = acc / count.max(1) as f64;
        if !with_grad {
            return Ok((loss.value(), Vec::new()));
        }
        let grad = tape.backward(loss)?;
        Ok((loss.value(), neural::flat_grad(&grad, &leaves)))
    };

    let template = weights.clone();
    let template2 = weights.clone();
    let test_range = if n_val > 0 {
        n_train..spec.n_samples
    } else {
        0..n_train
    };
    let mut objective = FnObjective {
        train: |p: &[f64]| batch_loss(p, &template, 0..n_train, true),
        test: |p: &[f64]| batch_loss(p, &template2, test_range.clone(), false).map(|(l, _)| l),
    };
    let report = training::train(&mut objective, weights.flatten(), spec.adam, spec.stop)?;
    weights.load_flat(&report.best_params);

    // emulation RMSE in physical units
    let rmse_over = |range: std::ops::Range<usize>| -> Result<f64, HybridError> {
        let tape = Tape::new();
        let (vars, _) = weights.lift(&tape)?;
        let mut sq = 0.0;
        let mut n = 0usize;
        for i in range {
            let preds = neural::lstm_forward(&vars, &tape, &inputs[i], LstmMode::PerStep)?;
            for (p, &l) in preds.iter().zip(&labels[i]) {
                let raw = p[0].value() * label_std + label_mean;
                sq += (raw - l) * (raw - l);
                n += 1;
            }
        }
        Ok((sq / n.max(1) as f64).sqrt())
    };
    let train_rmse = rmse_over(0..n_train)?;
    let validation_rmse = if n_val > 0 {
        rmse_over(n_train..spec.n_samples)?
    } else {
        f64::NAN
    };

    Ok(Surrogate {
        weights,
        base: *base,
        bounds: bounds.to_vec(),
        season_sowing_doy: season.sowing_doy,
        step_days: spec.step_days,
        weather_mean: w_mean,
        weather_std: w_std,
        label_mean,
        label_std,
        train_rmse,
        validation_rmse,
    })
}

impl Surrogate {
    /// Predicted weekly total biomass for one year at given parameters.
    pub fn predict_weekly(
        &self,
        year_weather: &[DailyWeather],
        theta: &CropParams,
    ) -> Result<Vec<f64>, HybridError> {
        let season = SeasonConfig {
            sowing_doy: self.season_sowing_doy,
        };
        let weekly =
            data::aggregate_features(season_window(year_weather, &season), self.step_days);
        let inputs = surrogate_inputs(
            &weekly,
            &self.weather_mean,
            &self.weather_std,
            &normalized_theta(theta, &self.bounds),
        );
        let tape = Tape::new();
        let (vars, _) = self.weights.lift(&tape)?;
        let preds = neural::lstm_forward(&vars, &tape, &inputs, LstmMode::PerStep)?;
        Ok(preds
            .iter()
            .map(|p| p[0].value() * self.label_std + self.label_mean)
            .collect())
    }

    /// Final-season biomass prediction (last weekly step).
    pub fn predict_final(
        &self,
        year_weather: &[DailyWeather],
        theta: &CropParams,
    ) -> Result<f64, HybridError> {
        Ok(*self
            .predict_weekly(year_weather, theta)?
            .last()
            .expect("season has at least one week"))
    }
}

/// Gradient descent on bounded parameters through the frozen emulator,
/// minimizing MSE between its final-biomass predictions and observations.
pub fn surrogate_calibrate(
    surrogate: &Surrogate,
    observations: &[f64],
    weather_years: &[Vec<DailyWeather>],
    theta_init: &CropParams,
    adam: AdamConfig,
    stop: EarlyStopConfig,
) -> Result<training::CalibrationResult, HybridError> {
    if observations.len() != weather_years.len() {
        return Err(HybridError::LengthMismatch {
            context: "calibration observations",
            expected: weather_years.len(),
            got: observations.len(),
        });
    }
    let season = SeasonConfig {
        sowing_doy: surrogate.season_sowing_doy,
    };
    let free: Vec<(CropField, Bounds)> = surrogate
        .bounds
        .iter()
        .filter(|(_, b)| !b.is_point())
        .cloned()
        .collect();
    let raw_init: Vec<f64> = free
        .iter()
        .map(|(field, b)| b.unsquash(field.get(theta_init)))
        .collect();

    // per-year prepared inputs; θ features are appended on the tape
    let prepared: Vec<Vec<Vec<f64>>> = weather_years
        .iter()
        .map(|year| {
            data::standardize(
                &data::aggregate_features(season_window(year, &season), surrogate.step_days),
                &surrogate.weather_mean,
                &surrogate.weather_std,
            )
        })
        .collect();
    let fixed_norm = normalized_theta(theta_init, &surrogate.bounds);

    let evaluate = |raw: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>), TrainError> {
        let tape = Tape::new();
        let (vars, _) = surrogate.weights.lift(&tape)?;
        let leaves: Vec<Var> = raw.iter().map(|&r| tape.leaf(r)).collect::<Result<_, _>>()?;
        // normalized θ features: free fields from squashed leaves, the
        // rest pinned at the init values
        let mut theta_feats: Vec<Var> =
            fixed_norm.iter().map(|&v| tape.constant(v)).collect();
        let mut free_idx = 0usize;
        for (slot, (field, b)) in surrogate.bounds.iter().enumerate() {
            if !b.is_point() {
                debug_assert_eq!(*field, free[free_idx].0);
                theta_feats[slot] = leaves[free_idx].sigmoid();
                free_idx += 1;
            }
        }
        let mut preds = Vec::with_capacity(prepared.len());
        for steps in &prepared {
            let sequence: Vec<Vec<Var>> = steps
                .iter()
                .map(|step| {
                    let mut vars_step: Vec<Var> =
                        step.iter().map(|&v| tape.constant(v)).collect();
                    vars_step.extend_from_slice(&theta_feats);
                    vars_step
                })
                .collect();
            let out = neural::lstm_forward_vars(&vars, &tape, &sequence, LstmMode::PerStep)
                .map_err(TrainError::Neural)?;
            let last = out.last().expect("non-empty season")[0];
            preds.push(last * surrogate.label_std + surrogate.label_mean);
        }
        let loss = mse_loss(&preds, observations)?;
        if !with_grad {
            return Ok((loss.value(), Vec::new()));
        }
        let grad = tape.backward(loss)?;
        Ok((loss.value(), leaves.iter().map(|&l| grad.wrt(l)).collect()))
    };

    let mut objective = FnObjective {
        train: |p: &[f64]| evaluate(p, true),
        test: |p: &[f64]| evaluate(p, false).map(|(l, _)| l),
    };
    let report = training::train(&mut objective, raw_init, adam, stop)?;
    let mut params = *theta_init;
    for ((field, b), &raw) in free.iter().zip(&report.best_params) {
        field.set(&mut params, b.squash_value(raw));
    }
    Ok(training::CalibrationResult { params, report })
}

// ---------------------------------------------------------------------------
// PhysicsResidualDl: process-model growth increments as a soft constraint
// ---------------------------------------------------------------------------

/// Step-over-step growth increments of a companion simulator pass at
/// fixed parameters, aligned with predictions (length = steps − 1).
pub fn companion_growth(
    year_weather: &[DailyWeather],
    params: &CropParams,
    season: &SeasonConfig,
    step_days: usize,
) -> Result<Vec<f64>, HybridError> {
    let labels = biomass_step_labels(year_weather, params, season, step_days)?;
    Ok(labels.windows(2).map(|w| w[1] - w[0]).collect())
}

/// `companion_growth` at the default weekly step.
pub fn companion_weekly_growth(
    year_weather: &[DailyWeather],
    params: &CropParams,
    season: &SeasonConfig,
) -> Result<Vec<f64>, HybridError> {
    companion_growth(year_weather, params, season, data::WEEK_DAYS)
}

/// mean over t of ((Ŵ_{t+1} − Ŵ_t) − growth_t)².
pub fn physics_residual_penalty<'t>(
    predicted: &[Var<'t>],
    growth: &[f64],
) -> Result<Var<'t>, HybridError> {
    if predicted.len() < 2 || growth.len() != predicted.len() - 1 {
        return Err(HybridError::LengthMismatch {
            context: "physics residual",
            expected: predicted.len().saturating_sub(1),
            got: growth.len(),
        });
    }
    let tape = predicted[0].tape();
    let mut acc = tape.constant(0.0);
    for (pair, &g) in predicted.windows(2).zip(growth) {
        let r = pair[1] - pair[0] - g;
        acc = acc + r * r;
    }
    Ok(acc / growth.len() as f64)
}

/// data MSE + λ · physics residual penalty.
pub fn physics_residual_loss<'t>(
    predicted: &[Var<'t>],
    observed: &[f64],
    growth: &[f64],
    lambda_physics: f64,
) -> Result<Var<'t>, HybridError> {
    let data_term = mse_loss(predicted, observed)?;
    let penalty = physics_residual_penalty(predicted, growth)?;
    Ok(data_term + penalty * lambda_physics)
}
