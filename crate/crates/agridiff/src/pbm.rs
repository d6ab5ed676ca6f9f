//! Daily-time-step process-based crop model (LINTUL-class): thermal time
//! drives phenology, Lambert-Beer interception and radiation use
//! efficiency drive growth, a single-bucket water balance supplies a
//! stress factor. Every arithmetic step is recorded on the autodiff tape
//! so the whole simulation is differentiable in its parameters and
//! forcings.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};

#[derive(Debug, Error)]
pub enum PbmError {
    #[error("invalid parameter {field}: {message}")]
    InvalidParams { field: &'static str, message: String },
    #[error("invalid weather on day {day}: {message}")]
    InvalidWeather { day: usize, message: String },
    #[error("weather sequence is empty")]
    EmptyWeather,
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Physical parameters of the crop model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    /// base temperature, °C
    pub t_base: f64,
    /// thermal time to maturity, °C·day
    pub tt_mature: f64,
    /// thermal time at senescence onset, °C·day
    pub tt_sen: f64,
    /// light extinction coefficient
    pub k_ext: f64,
    /// radiation use efficiency, g/MJ
    pub rue: f64,
    /// specific leaf area, m²/g
    pub sla: f64,
    /// seedling leaf area index, m²/m²
    pub lai_init: f64,
    /// bucket capacity, mm
    pub s_max: f64,
    /// critical soil-water fraction in (0, 1]
    pub p_crit: f64,
    /// evapotranspiration coefficient
    pub k_et: f64,
    /// senescence rate per unit thermal time
    pub r_sen: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            t_base: 5.0,
            tt_mature: 1500.0,
            tt_sen: 900.0,
            k_ext: 0.6,
            rue: 3.0,
            sla: 0.02,
            lai_init: 0.1,
            s_max: 120.0,
            p_crit: 0.5,
            k_et: 1.0,
            r_sen: 0.005,
        }
    }
}

macro_rules! require {
    ($cond:expr, $field:literal, $msg:expr) => {
        if !($cond) {
            return Err(PbmError::InvalidParams {
                field: $field,
                message: $msg.to_string(),
            });
        }
    };
}

impl CropParams {
    pub fn validate(&self) -> Result<(), PbmError> {
        let all = [
            self.t_base,
            self.tt_mature,
            self.tt_sen,
            self.k_ext,
            self.rue,
            self.sla,
            self.lai_init,
            self.s_max,
            self.p_crit,
            self.k_et,
            self.r_sen,
        ];
        require!(all.iter().all(|v| v.is_finite()), "params", "non-finite entry");
        require!(self.k_ext > 0.0, "k_ext", "must be > 0");
        require!(self.rue > 0.0, "rue", "must be > 0");
        require!(self.sla >= 0.0, "sla", "must be >= 0");
        require!(self.s_max > 0.0, "s_max", "must be > 0");
        require!(self.k_et > 0.0, "k_et", "must be > 0");
        require!(self.r_sen > 0.0, "r_sen", "must be > 0");
        require!(self.tt_mature > 0.0, "tt_mature", "must be > 0");
        require!(self.tt_sen > 0.0, "tt_sen", "must be > 0");
        require!(
            self.tt_sen < self.tt_mature,
            "tt_sen",
            format!("must be < tt_mature ({})", self.tt_mature)
        );
        require!(
            self.p_crit > 0.0 && self.p_crit <= 1.0,
            "p_crit",
            "must be in (0, 1]"
        );
        require!(self.lai_init >= 0.0, "lai_init", "must be >= 0");
        Ok(())
    }

    /// Lift every parameter onto the tape as a leaf.
    pub fn lift<'t>(&self, tape: &'t Tape) -> Result<ParamVars<'t>, PbmError> {
        self.validate()?;
        Ok(ParamVars {
            t_base: tape.leaf(self.t_base)?,
            tt_mature: tape.leaf(self.tt_mature)?,
            tt_sen: tape.leaf(self.tt_sen)?,
            k_ext: tape.leaf(self.k_ext)?,
            rue: tape.leaf(self.rue)?,
            sla: tape.leaf(self.sla)?,
            lai_init: tape.leaf(self.lai_init)?,
            s_max: tape.leaf(self.s_max)?,
            p_crit: tape.leaf(self.p_crit)?,
            k_et: tape.leaf(self.k_et)?,
            r_sen: tape.leaf(self.r_sen)?,
        })
    }
}

/// Tape-resident parameters.
#[derive(Clone, Copy)]
pub struct ParamVars<'t> {
    pub t_base: Var<'t>,
    pub tt_mature: Var<'t>,
    pub tt_sen: Var<'t>,
    pub k_ext: Var<'t>,
    pub rue: Var<'t>,
    pub sla: Var<'t>,
    pub lai_init: Var<'t>,
    pub s_max: Var<'t>,
    pub p_crit: Var<'t>,
    pub k_et: Var<'t>,
    pub r_sen: Var<'t>,
}

/// One day of forcings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyWeather {
    pub t_min: f64,
    pub t_max: f64,
    pub radiation: f64,
    pub precip: f64,
}

impl DailyWeather {
    pub fn validate(&self, day: usize) -> Result<(), PbmError> {
        let bad = |message: String| PbmError::InvalidWeather { day, message };
        if ![self.t_min, self.t_max, self.radiation, self.precip]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(bad("non-finite field".into()));
        }
        if self.t_min > self.t_max {
            return Err(bad(format!("t_min {} > t_max {}", self.t_min, self.t_max)));
        }
        if self.radiation < 0.0 {
            return Err(bad(format!("negative radiation {}", self.radiation)));
        }
        if self.precip < 0.0 {
            return Err(bad(format!("negative precip {}", self.precip)));
        }
        Ok(())
    }

    pub fn lift<'t>(&self, tape: &'t Tape) -> Result<WeatherVars<'t>, PbmError> {
        Ok(WeatherVars {
            t_min: tape.leaf(self.t_min)?,
            t_max: tape.leaf(self.t_max)?,
            radiation: tape.leaf(self.radiation)?,
            precip: tape.leaf(self.precip)?,
        })
    }
}

#[derive(Clone, Copy)]
pub struct WeatherVars<'t> {
    pub t_min: Var<'t>,
    pub t_max: Var<'t>,
    pub radiation: Var<'t>,
    pub precip: Var<'t>,
}

/// Off-tape snapshot of the crop state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropState {
    pub tt_cum: f64,
    pub dvs: f64,
    pub w_total: f64,
    pub w_leaf: f64,
    pub lai: f64,
    pub soil_water: f64,
}

/// Tape-resident crop state. `emerged` flips once leaf area first
/// appears; before that the canopy is the seedling `lai_init`.
#[derive(Clone, Copy)]
pub struct StateVars<'t> {
    pub tt_cum: Var<'t>,
    pub dvs: Var<'t>,
    pub w_total: Var<'t>,
    pub w_leaf: Var<'t>,
    pub lai: Var<'t>,
    pub soil_water: Var<'t>,
    pub emerged: bool,
}

impl<'t> StateVars<'t> {
    pub fn snapshot(&self) -> CropState {
        CropState {
            tt_cum: self.tt_cum.value(),
            dvs: self.dvs.value(),
            w_total: self.w_total.value(),
            w_leaf: self.w_leaf.value(),
            lai: self.lai.value(),
            soil_water: self.soil_water.value(),
        }
    }
}

/// Kink handling: hard max/clamp by default, softplus smoothing when a
/// sharpness is given.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub beta_smooth: Option<f64>,
}

impl SimOptions {
    pub fn smooth(beta: f64) -> Self {
        Self {
            beta_smooth: Some(beta),
        }
    }

    /// max(0, x), hard or smoothed.
    fn floor0<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self.beta_smooth {
            None => x.max_const(0.0),
            Some(beta) => (x * beta).softplus() / beta,
        }
    }
}

/// Inputs available to the water-stress subprocess; hybrids swap in a
/// learned response here.
pub struct StressCtx<'t> {
    pub soil_water: Var<'t>,
    pub t_mean: Var<'t>,
    pub dvs: Var<'t>,
    pub params: ParamVars<'t>,
}

/// Bucket-model stress: clamp(soil_water / (p_crit · s_max), 0, 1).
pub fn bucket_stress<'t>(ctx: &StressCtx<'t>) -> Var<'t> {
    (ctx.soil_water / (ctx.params.p_crit * ctx.params.s_max)).clamp01()
}

pub fn thermal_time_increment<'t>(
    w: &WeatherVars<'t>,
    t_base: Var<'t>,
    opts: &SimOptions,
) -> Var<'t> {
    let t_mean = (w.t_min + w.t_max) * 0.5;
    opts.floor0(t_mean - t_base)
}

pub fn light_interception<'t>(lai: Var<'t>, k_ext: Var<'t>) -> Var<'t> {
    let one = lai.tape().constant(1.0);
    one - (k_ext * lai * (-1.0)).exp()
}

pub fn par_from_radiation(radiation: Var<'_>) -> Var<'_> {
    radiation * 0.5
}

/// Initial state at sowing: no biomass, seedling canopy, full bucket.
pub fn initial_state<'t>(tape: &'t Tape, params: &ParamVars<'t>) -> Result<StateVars<'t>, PbmError> {
    let zero = tape.leaf(0.0)?;
    Ok(StateVars {
        tt_cum: zero,
        dvs: zero,
        w_total: zero,
        w_leaf: zero,
        lai: params.lai_init,
        soil_water: params.s_max,
        emerged: false,
    })
}

/// One explicit-Euler day with the default bucket stress.
pub fn step<'t>(
    state: &StateVars<'t>,
    weather: &WeatherVars<'t>,
    params: &ParamVars<'t>,
    opts: &SimOptions,
) -> Result<StateVars<'t>, PbmError> {
    step_with(state, weather, params, opts, bucket_stress)
}

/// One explicit-Euler day with a caller-supplied stress subprocess.
pub fn step_with<'t, F>(
    state: &StateVars<'t>,
    weather: &WeatherVars<'t>,
    params: &ParamVars<'t>,
    opts: &SimOptions,
    stress: F,
) -> Result<StateVars<'t>, PbmError>
where
    F: FnOnce(&StressCtx<'t>) -> Var<'t>,
{
    step_detailed(state, weather, params, opts, stress).map(|(s, _)| s)
}

/// Water fluxes of one day, for balance accounting.
#[derive(Clone, Copy)]
pub struct DayFluxes<'t> {
    pub transpiration: Var<'t>,
    pub evaporation: Var<'t>,
    pub drainage: Var<'t>,
}

pub fn step_detailed<'t, F>(
    state: &StateVars<'t>,
    weather: &WeatherVars<'t>,
    params: &ParamVars<'t>,
    opts: &SimOptions,
    stress: F,
) -> Result<(StateVars<'t>, DayFluxes<'t>), PbmError>
where
    F: FnOnce(&StressCtx<'t>) -> Var<'t>,
{
    let tape = state.tt_cum.tape();
    let one = tape.constant(1.0);

    // (1) phenology
    let t_mean = (weather.t_min + weather.t_max) * 0.5;
    let dtt = thermal_time_increment(weather, params.t_base, opts);
    let tt_cum = state.tt_cum + dtt;
    let dvs = tt_cum / params.tt_mature;

    // (2) interception off yesterday's canopy
    let f_int = light_interception(state.lai, params.k_ext);

    // (3) stress
    let ctx = StressCtx {
        soil_water: state.soil_water,
        t_mean,
        dvs,
        params: *params,
    };
    let f_w = stress(&ctx);

    // (4) growth
    let dw = params.rue * f_int * par_from_radiation(weather.radiation) * f_w;
    let w_total = state.w_total + dw;

    // (5) leaf partition, fading linearly to zero at senescence onset
    let dvs_l = params.tt_sen / params.tt_mature;
    let f_leaf = opts.floor0(one - dvs / dvs_l);
    let mut w_leaf = state.w_leaf + f_leaf * dw;

    // (6) senescence after tt_sen
    if tt_cum.value() > params.tt_sen.value() {
        w_leaf = opts.floor0(w_leaf - params.r_sen * dtt * w_leaf);
    }

    // (7) canopy
    let emerged = state.emerged || params.sla.value() * w_leaf.value() > 0.0;
    let lai = if emerged {
        params.sla * w_leaf
    } else {
        params.lai_init
    };

    // (8) single-bucket water balance; extraction is scaled down to the
    // available supply so closure holds exactly
    let et0 = opts.floor0((t_mean + 17.78) * (weather.radiation / 2.45) * 0.0135);
    let demand_t = params.k_et * f_int * f_w * et0;
    let demand_e = params.k_et * (one - f_int) * et0;
    let demand = demand_t + demand_e;
    let supply = state.soil_water + weather.precip;
    let (transp, evap) = if demand.value() > 0.0 {
        let capped = demand - opts.floor0(demand - supply); // min(demand, supply)
        let scale = capped / demand;
        (demand_t * scale, demand_e * scale)
    } else {
        let zero = tape.constant(0.0);
        (zero, zero)
    };
    let drain = opts.floor0(supply - transp - evap - params.s_max);
    let soil_water = supply - transp - evap - drain;

    Ok((
        StateVars {
            tt_cum,
            dvs,
            w_total,
            w_leaf,
            lai,
            soil_water,
            emerged,
        },
        DayFluxes {
            transpiration: transp,
            evaporation: evap,
            drainage: drain,
        },
    ))
}

/// Fold `step` over a weather sequence; the trajectory has one state per
/// day.
pub fn simulate<'t>(
    init: StateVars<'t>,
    weather: &[DailyWeather],
    params: &ParamVars<'t>,
    opts: &SimOptions,
) -> Result<Vec<StateVars<'t>>, PbmError> {
    simulate_with(init, weather, params, opts, |ctx| bucket_stress(ctx))
}

pub fn simulate_with<'t, F>(
    init: StateVars<'t>,
    weather: &[DailyWeather],
    params: &ParamVars<'t>,
    opts: &SimOptions,
    mut stress: F,
) -> Result<Vec<StateVars<'t>>, PbmError>
where
    F: FnMut(&StressCtx<'t>) -> Var<'t>,
{
    if weather.is_empty() {
        return Err(PbmError::EmptyWeather);
    }
    let tape = init.tt_cum.tape();
    let mut trajectory = Vec::with_capacity(weather.len());
    let mut state = init;
    for (day, w) in weather.iter().enumerate() {
        w.validate(day)?;
        let wv = w.lift(tape)?;
        state = step_with(&state, &wv, params, opts, &mut stress)?;
        trajectory.push(state);
    }
    Ok(trajectory)
}

/// One growing season inside a 365-day year.
pub const DAYS_PER_YEAR: usize = 365;

#[derive(Debug, Clone, Copy)]
pub struct SeasonConfig {
    /// day-of-year of sowing, 1-based
    pub sowing_doy: usize,
}

impl Default for SeasonConfig {
    fn default() -> Self {
        Self { sowing_doy: 90 }
    }
}

pub struct SeasonRun<'t> {
    /// biomass at harvest (dvs reaching 1, else the last day of the year)
    pub harvest_biomass: Var<'t>,
    /// index into the season trajectory where harvest happened
    pub harvest_day: usize,
    pub trajectory: Vec<StateVars<'t>>,
}

/// Simulate the season of one 365-day year: state is re-initialized at
/// sowing and the harvest is read where dvs first reaches 1.
pub fn simulate_season<'t, F>(
    tape: &'t Tape,
    year_weather: &[DailyWeather],
    params: &ParamVars<'t>,
    opts: &SimOptions,
    season: &SeasonConfig,
    stress: F,
) -> Result<SeasonRun<'t>, PbmError>
where
    F: FnMut(&StressCtx<'t>) -> Var<'t>,
{
    assert_eq!(year_weather.len(), DAYS_PER_YEAR, "one 365-day year");
    assert!(season.sowing_doy >= 1 && season.sowing_doy < DAYS_PER_YEAR);
    let init = initial_state(tape, params)?;
    let window = &year_weather[season.sowing_doy - 1..];
    let trajectory = simulate_with(init, window, params, opts, stress)?;
    let harvest_day = trajectory
        .iter()
        .position(|s| s.dvs.value() >= 1.0)
        .unwrap_or(trajectory.len() - 1);
    Ok(SeasonRun {
        harvest_biomass: trajectory[harvest_day].w_total,
        harvest_day,
        trajectory,
    })
}

/// Per-year harvest biomass over a multi-year series, one fresh season
/// per 365-day year on a shared tape.
pub fn simulate_years<'t, F>(
    tape: &'t Tape,
    weather: &[DailyWeather],
    params: &ParamVars<'t>,
    opts: &SimOptions,
    season: &SeasonConfig,
    mut stress: F,
) -> Result<Vec<SeasonRun<'t>>, PbmError>
where
    F: FnMut(&StressCtx<'t>) -> Var<'t>,
{
    if weather.is_empty() || weather.len() % DAYS_PER_YEAR != 0 {
        return Err(PbmError::InvalidWeather {
            day: weather.len(),
            message: "series length must be a positive multiple of 365".into(),
        });
    }
    weather
        .chunks(DAYS_PER_YEAR)
        .map(|year| simulate_season(tape, year, params, opts, season, &mut stress))
        .collect()
}

/// CSV export: date_index,tt_cum,dvs,lai,w_total,w_leaf,soil_water in
/// 6-decimal fixed format.
pub fn write_trajectory_csv<W: Write>(out: &mut W, trajectory: &[CropState]) -> Result<(), PbmError> {
    writeln!(out, "date_index,tt_cum,dvs,lai,w_total,w_leaf,soil_water")?;
    for (i, s) in trajectory.iter().enumerate() {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            i, s.tt_cum, s.dvs, s.lai, s.w_total, s.w_leaf, s.soil_water
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn lift_day<'t>(tape: &'t Tape, w: &DailyWeather) -> WeatherVars<'t> {
        w.lift(tape).unwrap()
    }

    fn day(t_min: f64, t_max: f64, radiation: f64, precip: f64) -> DailyWeather {
        DailyWeather {
            t_min,
            t_max,
            radiation,
            precip,
        }
    }

    #[test]
    fn thermal_time_cases() {
        let tape = Tape::new();
        let opts = SimOptions::default();
        let t_base = tape.leaf(5.0).unwrap();
        let w = lift_day(&tape, &day(2.0, 6.0, 0.0, 0.0));
        assert_eq!(thermal_time_increment(&w, t_base, &opts).value(), 0.0);
        let w = lift_day(&tape, &day(10.0, 20.0, 0.0, 0.0));
        assert_eq!(thermal_time_increment(&w, t_base, &opts).value(), 10.0);
        let w = lift_day(&tape, &day(5.0, 5.0, 0.0, 0.0));
        assert_eq!(thermal_time_increment(&w, t_base, &opts).value(), 0.0);
    }

    #[test]
    fn interception_cases() {
        let tape = Tape::new();
        let k = tape.leaf(0.6).unwrap();
        let zero = tape.leaf(0.0).unwrap();
        assert_eq!(light_interception(zero, k).value(), 0.0);
        let lai3 = tape.leaf(3.0).unwrap();
        assert!((light_interception(lai3, k).value() - 0.8347011117784134).abs() < 1e-12);
        let lai50 = tape.leaf(50.0).unwrap();
        let f = light_interception(lai50, k).value();
        assert!(f < 1.0 && f > 0.999999);
    }

    #[test]
    fn par_is_half_radiation() {
        let tape = Tape::new();
        assert_eq!(par_from_radiation(tape.leaf(0.0).unwrap()).value(), 0.0);
        assert_eq!(par_from_radiation(tape.leaf(20.0).unwrap()).value(), 10.0);
    }

    #[test]
    fn water_stress_cases() {
        let tape = Tape::new();
        let params = CropParams {
            s_max: 100.0,
            p_crit: 0.5,
            ..CropParams::default()
        }
        .lift(&tape)
        .unwrap();
        let ctx = |sw: f64| StressCtx {
            soil_water: tape.leaf(sw).unwrap(),
            t_mean: tape.leaf(15.0).unwrap(),
            dvs: tape.leaf(0.3).unwrap(),
            params,
        };
        assert_eq!(bucket_stress(&ctx(100.0)).value(), 1.0);
        assert_eq!(bucket_stress(&ctx(0.0)).value(), 0.0);
        assert_eq!(bucket_stress(&ctx(25.0)).value(), 0.5);
    }

    #[test]
    fn params_validation() {
        let mut p = CropParams::default();
        assert!(p.validate().is_ok());
        p.tt_sen = p.tt_mature + 1.0;
        assert!(matches!(
            p.validate(),
            Err(PbmError::InvalidParams { field: "tt_sen", .. })
        ));
        let mut p = CropParams::default();
        p.p_crit = 0.0;
        assert!(p.validate().is_err());
    }

    /// Independent plain-f64 re-derivation of one day, used as the oracle
    /// for the tape-recorded step.
    fn step_oracle(s: CropState, w: DailyWeather, p: CropParams, emerged: bool) -> CropState {
        let t_mean = 0.5 * (w.t_min + w.t_max);
        let dtt = (t_mean - p.t_base).max(0.0);
        let tt_cum = s.tt_cum + dtt;
        let dvs = tt_cum / p.tt_mature;
        let f_int = 1.0 - (-p.k_ext * s.lai).exp();
        let f_w = (s.soil_water / (p.p_crit * p.s_max)).clamp(0.0, 1.0);
        let dw = p.rue * f_int * (0.5 * w.radiation) * f_w;
        let w_total = s.w_total + dw;
        let f_leaf = (1.0 - dvs / (p.tt_sen / p.tt_mature)).max(0.0);
        let mut w_leaf = s.w_leaf + f_leaf * dw;
        if tt_cum > p.tt_sen {
            w_leaf = (w_leaf - p.r_sen * dtt * w_leaf).max(0.0);
        }
        let now_emerged = emerged || p.sla * w_leaf > 0.0;
        let lai = if now_emerged { p.sla * w_leaf } else { p.lai_init };
        let et0 = ((t_mean + 17.78) * (w.radiation / 2.45) * 0.0135).max(0.0);
        let demand_t = p.k_et * f_int * f_w * et0;
        let demand_e = p.k_et * (1.0 - f_int) * et0;
        let demand = demand_t + demand_e;
        let supply = s.soil_water + w.precip;
        let (transp, evap) = if demand > 0.0 {
            let scale = (demand - (demand - supply).max(0.0)) / demand;
            (demand_t * scale, demand_e * scale)
        } else {
            (0.0, 0.0)
        };
        let drain = (supply - transp - evap - p.s_max).max(0.0);
        CropState {
            tt_cum,
            dvs,
            w_total,
            w_leaf,
            lai,
            soil_water: supply - transp - evap - drain,
        }
    }

    #[test]
    fn step_matches_hand_example() {
        // lai=0.1, full bucket, t 10..20, rad 20, rue 3, k_ext 0.6, t_base 5
        let p = CropParams {
            rue: 3.0,
            k_ext: 0.6,
            t_base: 5.0,
            ..CropParams::default()
        };
        let tape = Tape::new();
        let pv = p.lift(&tape).unwrap();
        let init = initial_state(&tape, &pv).unwrap();
        let w = lift_day(&tape, &day(10.0, 20.0, 20.0, 0.0));
        let next = step(&init, &w, &pv, &SimOptions::default()).unwrap();
        let dw = next.w_total.value();
        assert!((dw - 1.7470639924725384).abs() < 1e-12, "dW = {dw}");
    }

    #[test]
    fn step_matches_oracle_on_random_days() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = CropParams::default();
        for _ in 0..200 {
            let s = CropState {
                tt_cum: rng.gen_range(0.0..1400.0),
                dvs: 0.0, // recomputed by the step
                w_total: rng.gen_range(0.0..800.0),
                w_leaf: rng.gen_range(0.0..300.0),
                lai: rng.gen_range(0.0..6.0),
                soil_water: rng.gen_range(0.0..p.s_max),
            };
            let w = day(
                rng.gen_range(-5.0..15.0),
                rng.gen_range(15.0..30.0),
                rng.gen_range(0.0..30.0),
                if rng.gen_bool(0.3) {
                    rng.gen_range(0.0..20.0)
                } else {
                    0.0
                },
            );
            let tape = Tape::new();
            let pv = p.lift(&tape).unwrap();
            let sv = StateVars {
                tt_cum: tape.leaf(s.tt_cum).unwrap(),
                dvs: tape.leaf(s.tt_cum / p.tt_mature).unwrap(),
                w_total: tape.leaf(s.w_total).unwrap(),
                w_leaf: tape.leaf(s.w_leaf).unwrap(),
                lai: tape.leaf(s.lai).unwrap(),
                soil_water: tape.leaf(s.soil_water).unwrap(),
                emerged: true,
            };
            let wv = lift_day(&tape, &w);
            let got = step(&sv, &wv, &pv, &SimOptions::default()).unwrap().snapshot();
            let want = step_oracle(s, w, p, true);
            for (g, e) in [
                (got.tt_cum, want.tt_cum),
                (got.dvs, want.dvs),
                (got.w_total, want.w_total),
                (got.w_leaf, want.w_leaf),
                (got.lai, want.lai),
                (got.soil_water, want.soil_water),
            ] {
                assert!((g - e).abs() < 1e-9, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn zero_radiation_means_no_growth() {
        let tape = Tape::new();
        let pv = CropParams::default().lift(&tape).unwrap();
        let init = initial_state(&tape, &pv).unwrap();
        let weather: Vec<_> = (0..30).map(|_| day(8.0, 18.0, 0.0, 2.0)).collect();
        let traj = simulate(init, &weather, &pv, &SimOptions::default()).unwrap();
        for s in &traj {
            assert_eq!(s.w_total.value(), 0.0);
        }
    }

    #[test]
    fn water_balance_closes_each_step() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = CropParams::default();
        let tape = Tape::new();
        let pv = p.lift(&tape).unwrap();
        let mut state = initial_state(&tape, &pv).unwrap();
        for _ in 0..365 {
            let w = day(
                rng.gen_range(0.0..12.0),
                rng.gen_range(12.0..32.0),
                rng.gen_range(0.0..30.0),
                if rng.gen_bool(0.3) {
                    rng.gen_range(0.0..25.0)
                } else {
                    0.0
                },
            );
            let wv = w.lift(&tape).unwrap();
            let before = state.soil_water.value();
            let (next, fluxes) =
                step_detailed(&state, &wv, &pv, &SimOptions::default(), bucket_stress).unwrap();
            let after = next.soil_water.value();
            assert!(after >= -1e-9 && after <= p.s_max + 1e-9);
            assert!(next.w_total.value() >= state.w_total.value());
            assert!(next.dvs.value() >= state.dvs.value());
            let closure = after - before - w.precip
                + fluxes.transpiration.value()
                + fluxes.evaporation.value()
                + fluxes.drainage.value();
            assert!(closure.abs() <= 1e-9, "closure residual {closure}");
            state = next;
        }
    }

    #[test]
    fn rue_linearity_with_fixed_canopy() {
        let run = |rue: f64| {
            let p = CropParams {
                rue,
                sla: 0.0,
                ..CropParams::default()
            };
            let tape = Tape::new();
            let pv = p.lift(&tape).unwrap();
            let init = initial_state(&tape, &pv).unwrap();
            let weather: Vec<_> = (0..60)
                .map(|i| day(8.0, 20.0, 15.0 + (i % 5) as f64, if i % 4 == 0 { 6.0 } else { 0.0 }))
                .collect();
            let traj = simulate(init, &weather, &pv, &SimOptions::default()).unwrap();
            traj.last().unwrap().w_total.value()
        };
        let b1 = run(1.5);
        let b2 = run(3.0);
        assert!(b1 > 0.0);
        assert!((b2 / b1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn simulate_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let pv = CropParams::default().lift(&tape).unwrap();
            let init = initial_state(&tape, &pv).unwrap();
            let weather: Vec<_> = (0..90)
                .map(|i| day(6.0, 19.0, 12.0 + (i % 7) as f64, if i % 3 == 0 { 4.0 } else { 0.0 }))
                .collect();
            simulate(init, &weather, &pv, &SimOptions::default())
                .unwrap()
                .iter()
                .map(|s| s.snapshot())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn season_gradient_wrt_rue_passes_grad_check() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let weather: Vec<DailyWeather> = (0..DAYS_PER_YEAR)
            .map(|d| {
                let t = 10.0 + 10.0 * (2.0 * std::f64::consts::PI * (d as f64 - 120.0) / 365.0).sin();
                day(
                    t - 4.0,
                    t + 4.0,
                    (8.0 + 12.0 * (2.0 * std::f64::consts::PI * (d as f64 - 100.0) / 365.0).sin())
                        .max(0.0),
                    if rng.gen_bool(0.3) { rng.gen_range(0.0..12.0) } else { 0.0 },
                )
            })
            .collect();
        let base = CropParams::default();
        let report = grad_check(
            |tape, xs| {
                let p = CropParams {
                    rue: xs[0].value(),
                    ..base
                };
                let mut pv = p.lift(tape).map_err(|_| crate::autodiff::AdError::ForeignVariable)?;
                pv.rue = xs[0];
                let run = simulate_season(
                    tape,
                    &weather,
                    &pv,
                    &SimOptions::default(),
                    &SeasonConfig::default(),
                    bucket_stress,
                )
                .map_err(|_| crate::autodiff::AdError::ForeignVariable)?;
                Ok(run.harvest_biomass)
            },
            &["rue"],
            &[base.rue],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn trajectory_csv_format() {
        let traj = vec![CropState {
            tt_cum: 1.0,
            dvs: 0.001,
            w_total: 2.5,
            w_leaf: 1.25,
            lai: 0.1,
            soil_water: 120.0,
        }];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "date_index,tt_cum,dvs,lai,w_total,w_leaf,soil_water\n0,1.000000,0.001000,0.100000,2.500000,1.250000,120.000000\n"
        );
    }

    #[test]
    fn empty_weather_rejected() {
        let tape = Tape::new();
        let pv = CropParams::default().lift(&tape).unwrap();
        let init = initial_state(&tape, &pv).unwrap();
        assert!(matches!(
            simulate(init, &[], &pv, &SimOptions::default()),
            Err(PbmError::EmptyWeather)
        ));
    }
}
