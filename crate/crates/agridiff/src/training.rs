//! Losses, the Adam optimizer, the early-stopping training loop, and
//! gradient-based calibration of the crop model through the tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::neural::NeuralError;
use crate::pbm::{
    self, CropParams, DailyWeather, ParamVars, PbmError, SeasonConfig, SimOptions,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: predicted {predicted} vs observed {observed}")]
    LengthMismatch { predicted: usize, observed: usize },
    #[error("empty loss input")]
    EmptyInput,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Pbm(#[from] PbmError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Mean squared error on the tape against fixed observations.
pub fn mse_loss<'t>(predicted: &[Var<'t>], observed: &[f64]) -> Result<Var<'t>, TrainError> {
    if predicted.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    if predicted.len() != observed.len() {
        return Err(TrainError::LengthMismatch {
            predicted: predicted.len(),
            observed: observed.len(),
        });
    }
    let tape = predicted[0].tape();
    let mut acc = tape.constant(0.0);
    for (&p, &o) in predicted.iter().zip(observed) {
        let diff = p - o;
        acc = acc + diff * diff;
    }
    Ok(acc / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam moments aligned one-to-one with the trainable parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step_count: usize,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    config: AdamConfig,
}

impl OptimizerState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            config,
        }
    }

    /// Standard bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], gradients: &[f64]) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.first_moment.len());
        assert_eq!(gradients.len(), params.len());
        if let Some(index) = gradients.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { index });
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for i in 0..params.len() {
            let g = gradients[i];
            self.first_moment[i] = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            self.second_moment[i] = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience: 20,
            min_delta: 1e-4,
            max_epochs: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss_curve: Vec<f64>,
    pub test_loss_curve: Vec<f64>,
    pub stopped_epoch: usize,
    /// 1-based epoch with the lowest test loss
    pub best_epoch: usize,
    pub best_params: Vec<f64>,
}

impl TrainReport {
    /// Loss curves as CSV: epoch,train_loss,test_loss.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_loss\n");
        for (i, (tr, te)) in self
            .train_loss_curve
            .iter()
            .zip(&self.test_loss_curve)
            .enumerate()
        {
            out.push_str(&format!("{},{:.12},{:.12}\n", i + 1, tr, te));
        }
        out
    }
}

/// One full-batch differentiable objective. `train_loss_and_grad` is
/// expected to rebuild its tape on every call.
pub trait Objective {
    fn train_loss_and_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>), TrainError>;
    fn test_loss(&mut self, params: &[f64]) -> Result<f64, TrainError>;
}

/// Objective built from two closures.
pub struct FnObjective<F, G>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
    G: FnMut(&[f64]) -> Result<f64, TrainError>,
{
    pub train: F,
    pub test: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
    G: FnMut(&[f64]) -> Result<f64, TrainError>,
{
    fn train_loss_and_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        (self.train)(params)
    }

    fn test_loss(&mut self, params: &[f64]) -> Result<f64, TrainError> {
        (self.test)(params)
    }
}

/// Full-batch gradient descent with Adam and early stopping on the test
/// loss; the returned report carries the best (lowest-test-loss) weights.
pub fn train<O: Objective>(
    objective: &mut O,
    init_params: Vec<f64>,
    adam: AdamConfig,
    stop: EarlyStopConfig,
) -> Result<TrainReport, TrainError> {
    assert!(stop.max_epochs >= 1);
    let mut params = init_params;
    let mut optimizer = OptimizerState::new(params.len(), adam);
    let mut train_curve = Vec::new();
    let mut test_curve = Vec::new();
    let mut best_test = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut since_improved = 0usize;

    for epoch in 1..=stop.max_epochs {
        let (train_loss, grads) = objective.train_loss_and_grad(&params)?;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        optimizer.step(&mut params, &grads)?;
        let test_loss = objective.test_loss(&params)?;
        if !test_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        train_curve.push(train_loss);
        test_curve.push(test_loss);
        if test_loss < best_test - stop.min_delta || best_epoch == 0 {
            best_test = test_loss.min(best_test);
            best_epoch = epoch;
            best_params = params.clone();
            since_improved = 0;
        } else {
            since_improved += 1;
            if since_improved > stop.patience {
                break;
            }
        }
    }

    Ok(TrainReport {
        stopped_epoch: train_curve.len(),
        best_epoch,
        best_params,
        train_loss_curve: train_curve,
        test_loss_curve: test_curve,
    })
}

// ---------------------------------------------------------------------------
// Bounded parameters
// ---------------------------------------------------------------------------

/// Addressable crop-parameter fields, for calibration subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropField {
    TBase,
    TtMature,
    TtSen,
    KExt,
    Rue,
    Sla,
    LaiInit,
    SMax,
    PCrit,
    KEt,
    RSen,
}

impl CropField {
    pub fn get(self, p: &CropParams) -> f64 {
        match self {
            CropField::TBase => p.t_base,
            CropField::TtMature => p.tt_mature,
            CropField::TtSen => p.tt_sen,
            CropField::KExt => p.k_ext,
            CropField::Rue => p.rue,
            CropField::Sla => p.sla,
            CropField::LaiInit => p.lai_init,
            CropField::SMax => p.s_max,
            CropField::PCrit => p.p_crit,
            CropField::KEt => p.k_et,
            CropField::RSen => p.r_sen,
        }
    }

    pub fn set(self, p: &mut CropParams, value: f64) {
        match self {
            CropField::TBase => p.t_base = value,
            CropField::TtMature => p.tt_mature = value,
            CropField::TtSen => p.tt_sen = value,
            CropField::KExt => p.k_ext = value,
            CropField::Rue => p.rue = value,
            CropField::Sla => p.sla = value,
            CropField::LaiInit => p.lai_init = value,
            CropField::SMax => p.s_max = value,
            CropField::PCrit => p.p_crit = value,
            CropField::KEt => p.k_et = value,
            CropField::RSen => p.r_sen = value,
        }
    }

    pub fn set_var<'t>(self, p: &mut ParamVars<'t>, value: Var<'t>) {
        match self {
            CropField::TBase => p.t_base = value,
            CropField::TtMature => p.tt_mature = value,
            CropField::TtSen => p.tt_sen = value,
            CropField::KExt => p.k_ext = value,
            CropField::Rue => p.rue = value,
            CropField::Sla => p.sla = value,
            CropField::LaiInit => p.lai_init = value,
            CropField::SMax => p.s_max = value,
            CropField::PCrit => p.p_crit = value,
            CropField::KEt => p.k_et = value,
            CropField::RSen => p.r_sen = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Bounds {
    pub fn new(low: f64, high: f64) -> Self {
        assert!(low <= high);
        Self { low, high }
    }

    pub fn is_point(&self) -> bool {
        self.high == self.low
    }

    /// low + (high − low)·σ(raw); a collapsed interval pins the value.
    pub fn squash<'t>(&self, raw: Var<'t>) -> Var<'t> {
        if self.is_point() {
            return raw.tape().constant(self.low);
        }
        raw.sigmoid() * (self.high - self.low) + self.low
    }

    pub fn squash_value(&self, raw: f64) -> f64 {
        if self.is_point() {
            return self.low;
        }
        self.low + (self.high - self.low) / (1.0 + (-raw).exp())
    }

    /// logit of the relative position, clamped into the open interval.
    pub fn unsquash(&self, physical: f64) -> f64 {
        if self.is_point() {
            return 0.0;
        }
        let frac = ((physical - self.low) / (self.high - self.low)).clamp(1e-6, 1.0 - 1e-6);
        (frac / (1.0 - frac)).ln()
    }
}

/// The dPL parameter bounds table; other fields stay fixed.
pub fn dpl_bounds() -> Vec<(CropField, Bounds)> {
    vec![
        (CropField::Rue, Bounds::new(1.0, 5.0)),
        (CropField::KExt, Bounds::new(0.3, 0.9)),
        (CropField::TBase, Bounds::new(0.0, 10.0)),
        (CropField::SMax, Bounds::new(50.0, 200.0)),
    ]
}

// ---------------------------------------------------------------------------
// PBM calibration
// ---------------------------------------------------------------------------

pub struct CalibrationResult {
    pub params: CropParams,
    pub report: TrainReport,
}

/// Gradient descent on bound-squashed free parameters through the full
/// simulation, minimizing MSE on annual harvest biomass.
pub fn calibrate_pbm(
    params_init: &CropParams,
    free: &[(CropField, Bounds)],
    observations: &[f64],
    weather: &[DailyWeather],
    season: &SeasonConfig,
    adam: AdamConfig,
    stop: EarlyStopConfig,
) -> Result<CalibrationResult, TrainError> {
    params_init.validate()?;
    let n_years = weather.len() / pbm::DAYS_PER_YEAR;
    if observations.len() != n_years {
        return Err(TrainError::LengthMismatch {
            predicted: n_years,
            observed: observations.len(),
        });
    }
    let raw_init: Vec<f64> = free
        .iter()
        .map(|(field, bounds)| bounds.unsquash(field.get(params_init)))
        .collect();

    let base = *params_init;
    let season = *season;
    let free_owned: Vec<(CropField, Bounds)> = free.to_vec();
    let weather_owned: Vec<DailyWeather> = weather.to_vec();
    let obs_owned: Vec<f64> = observations.to_vec();

    let evaluate = move |raw: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>), TrainError> {
        let tape = Tape::new();
        let mut pv = base.lift(&tape)?;
        let mut leaves = Vec::with_capacity(raw.len());
        for ((field, bounds), &r) in free_owned.iter().zip(raw) {
            let leaf = tape.leaf(r)?;
            leaves.push(leaf);
            field.set_var(&mut pv, bounds.squash(leaf));
        }
        let runs = pbm::simulate_years(
            &tape,
            &weather_owned,
            &pv,
            &SimOptions::default(),
            &season,
            pbm::bucket_stress,
        )?;
        let harvests: Vec<Var> = runs.iter().map(|r| r.harvest_biomass).collect();
        let loss = mse_loss(&harvests, &obs_owned)?;
        if !with_grad {
            return Ok((loss.value(), Vec::new()));
        }
        let grad = tape.backward(loss)?;
        Ok((loss.value(), leaves.iter().map(|&l| grad.wrt(l)).collect()))
    };

    let eval_train = evaluate.clone();
    let eval_test = evaluate;
    let mut objective = FnObjective {
        train: move |p: &[f64]| eval_train(p, true),
        test: move |p: &[f64]| eval_test(p, false).map(|(l, _)| l),
    };

    let report = train(&mut objective, raw_init, adam, stop)?;
    let mut params = base;
    for ((field, bounds), &raw) in free.iter().zip(&report.best_params) {
        field.set(&mut params, bounds.squash_value(raw));
    }
    Ok(CalibrationResult { params, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_sites, generate_weather, true_params_for_site};

    #[test]
    fn mse_cases() {
        let tape = Tape::new();
        let p: Vec<Var> = [1.0, 2.0].iter().map(|&x| tape.leaf(x).unwrap()).collect();
        assert_eq!(mse_loss(&p, &[1.0, 2.0]).unwrap().value(), 0.0);
        assert_eq!(mse_loss(&p, &[0.0, 0.0]).unwrap().value(), 2.5);
        // scaling by c scales the loss by c²
        let scaled: Vec<Var> = p.iter().map(|&v| v * 3.0).collect();
        assert_eq!(mse_loss(&scaled, &[0.0, 0.0]).unwrap().value(), 22.5);
        assert!(matches!(
            mse_loss(&p, &[0.0]),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn tape_loss_matches_off_tape() {
        let tape = Tape::new();
        let values = [1.7, -0.3, 12.0, 4.4];
        let obs = [1.2, 0.0, 11.0, 5.0];
        let p: Vec<Var> = values.iter().map(|&x| tape.leaf(x).unwrap()).collect();
        let on_tape = mse_loss(&p, &obs).unwrap().value();
        let off_tape = values
            .iter()
            .zip(&obs)
            .map(|(v, o)| (v - o) * (v - o))
            .sum::<f64>()
            / 4.0;
        assert!((on_tape - off_tape).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut state = OptimizerState::new(3, AdamConfig::default());
        let mut params = vec![1.0, -2.0, 0.5];
        state.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_descends_convex_bowl() {
        let mut state = OptimizerState::new(1, AdamConfig::with_lr(0.1));
        let mut x: Vec<f64> = vec![1.0];
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            state.step(&mut x, &g).unwrap();
        }
        assert!(x[0].abs() < 0.05, "did not approach minimum: {}", x[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = OptimizerState::new(2, AdamConfig::default());
            let mut p = vec![0.3, -0.7];
            for i in 0..20 {
                s.step(&mut p, &[(i as f64).sin(), (i as f64).cos()]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut state = OptimizerState::new(2, AdamConfig::default());
        let mut params = vec![0.0, 0.0];
        match state.step(&mut params, &[0.0, f64::NAN]).unwrap_err() {
            TrainError::NonFiniteGradient { index } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn quadratic_objective() -> impl Objective {
        // train on f(x) = (x-2)², "test" identical
        FnObjective {
            train: |p: &[f64]| Ok(((p[0] - 2.0).powi(2), vec![2.0 * (p[0] - 2.0)])),
            test: |p: &[f64]| Ok((p[0] - 2.0).powi(2)),
        }
    }

    #[test]
    fn train_descends_and_stops() {
        let mut obj = quadratic_objective();
        let report = train(
            &mut obj,
            vec![0.0],
            AdamConfig::with_lr(0.05),
            EarlyStopConfig {
                patience: 10,
                min_delta: 1e-6,
                max_epochs: 400,
            },
        )
        .unwrap();
        assert!(report.train_loss_curve.last().unwrap() < &report.train_loss_curve[0]);
        assert_eq!(report.train_loss_curve.len(), report.stopped_epoch);
        let best_idx = report.best_epoch - 1;
        let min_test = report
            .test_loss_curve
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.test_loss_curve[best_idx], min_test);
    }

    #[test]
    fn max_epochs_one() {
        let mut obj = quadratic_objective();
        let report = train(
            &mut obj,
            vec![0.0],
            AdamConfig::default(),
            EarlyStopConfig {
                patience: 5,
                min_delta: 1e-4,
                max_epochs: 1,
            },
        )
        .unwrap();
        assert_eq!(report.stopped_epoch, 1);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn patience_zero_stops_on_first_plateau() {
        // loss that improves once then plateaus
        let mut calls = 0usize;
        let mut obj = FnObjective {
            train: move |_: &[f64]| Ok((1.0, vec![0.0])),
            test: move |_: &[f64]| {
                calls += 1;
                Ok(if calls == 1 { 1.0 } else { 1.0 })
            },
        };
        let report = train(
            &mut obj,
            vec![0.0],
            AdamConfig::default(),
            EarlyStopConfig {
                patience: 0,
                min_delta: 1e-4,
                max_epochs: 50,
            },
        )
        .unwrap();
        assert_eq!(report.stopped_epoch, 2);
    }

    #[test]
    fn bounds_squash_round_trip() {
        let b = Bounds::new(1.0, 5.0);
        for v in [1.2, 2.0, 3.3, 4.9] {
            assert!((b.squash_value(b.unsquash(v)) - v).abs() < 1e-9);
        }
        let point = Bounds::new(2.0, 2.0);
        assert_eq!(point.squash_value(123.0), 2.0);
    }

    #[test]
    fn calibrate_already_optimal_converges_immediately() {
        let site = &default_sites()[0];
        let truth = true_params_for_site(site);
        let weather = generate_weather(site, 4, 3);
        let tape = Tape::new();
        let pv = truth.lift(&tape).unwrap();
        let runs = pbm::simulate_years(
            &tape,
            &weather.days,
            &pv,
            &SimOptions::default(),
            &SeasonConfig::default(),
            pbm::bucket_stress,
        )
        .unwrap();
        let obs: Vec<f64> = runs.iter().map(|r| r.harvest_biomass.value()).collect();
        let result = calibrate_pbm(
            &truth,
            &[(CropField::Rue, Bounds::new(1.0, 5.0))],
            &obs,
            &weather.days,
            &SeasonConfig::default(),
            AdamConfig::default(),
            EarlyStopConfig {
                patience: 0,
                min_delta: 1e-6,
                max_epochs: 10,
            },
        )
        .unwrap();
        assert!(result.report.train_loss_curve[0] < 1e-12);
        assert!((result.params.rue - truth.rue).abs() < 0.05);
    }

    #[test]
    fn calibrate_recovers_free_rue() {
        let site = &default_sites()[1];
        let truth = true_params_for_site(site);
        let weather = generate_weather(site, 6, 11);
        let tape = Tape::new();
        let pv = truth.lift(&tape).unwrap();
        let runs = pbm::simulate_years(
            &tape,
            &weather.days,
            &pv,
            &SimOptions::default(),
            &SeasonConfig::default(),
            pbm::bucket_stress,
        )
        .unwrap();
        let obs: Vec<f64> = runs.iter().map(|r| r.harvest_biomass.value()).collect();
        let mut init = truth;
        init.rue = 2.0; // start away from the truth
        let result = calibrate_pbm(
            &init,
            &[(CropField::Rue, Bounds::new(1.0, 5.0))],
            &obs,
            &weather.days,
            &SeasonConfig::default(),
            AdamConfig::with_lr(0.05),
            EarlyStopConfig {
                patience: 30,
                min_delta: 1e-9,
                max_epochs: 300,
            },
        )
        .unwrap();
        let rel = (result.params.rue - truth.rue).abs() / truth.rue;
        assert!(rel < 0.01, "recovered {} vs {}", result.params.rue, truth.rue);
    }

    #[test]
    fn calibrate_with_point_bounds_returns_the_point() {
        let site = &default_sites()[2];
        let truth = true_params_for_site(site);
        let weather = generate_weather(site, 2, 5);
        let obs = vec![500.0, 480.0];
        let result = calibrate_pbm(
            &truth,
            &[(CropField::Rue, Bounds::new(truth.rue, truth.rue))],
            &obs,
            &weather.days,
            &SeasonConfig::default(),
            AdamConfig::default(),
            EarlyStopConfig {
                patience: 0,
                min_delta: 1e-4,
                max_epochs: 3,
            },
        )
        .unwrap();
        assert_eq!(result.params.rue, truth.rue);
    }
}
