//! Synthetic-twin dataset: three-site weather generation, CSV
//! ingestion/export, Gaussian contamination, and the year/site splits
//! used by the experiment protocols.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pbm::{CropParams, DailyWeather, DAYS_PER_YEAR};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("empty weather file: {0}")]
    EmptyFile(String),
    #[error("series length {0} is not a multiple of 365")]
    RaggedSeries(usize),
    #[error("train_fraction {0} must lie in (0, 1)")]
    BadTrainFraction(f64),
    #[error("series has {have} calibration years, need {need}")]
    TooShort { have: usize, need: usize },
    #[error("few-shot k must satisfy 1 <= k <= {max}, got {k}")]
    BadFewshotK { k: usize, max: usize },
    #[error("spatial folds need exactly 3 distinct sites, got {0}")]
    BadSiteCount(usize),
    #[error("duplicate site id {0}")]
    DuplicateSite(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Static per-site attributes, the `A` that differentiable parameter
/// learning maps to crop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAttributes {
    pub site_id: String,
    pub latitude: f64,
    pub soil_capacity_proxy: f64,
    pub mean_annual_temp: f64,
}

impl SiteAttributes {
    /// Attributes normalized to roughly [0, 1] over the twin's ranges.
    pub fn normalized(&self) -> [f64; 3] {
        [
            (self.latitude - 48.0) / 6.0,
            (self.soil_capacity_proxy - 80.0) / 80.0,
            (self.mean_annual_temp - 7.5) / 3.0,
        ]
    }
}

/// The three synthetic sites, spanning the attribute ranges of the twin.
pub fn default_sites() -> Vec<SiteAttributes> {
    vec![
        SiteAttributes {
            site_id: "site_a".into(),
            latitude: 48.5,
            soil_capacity_proxy: 150.0,
            mean_annual_temp: 10.2,
        },
        SiteAttributes {
            site_id: "site_b".into(),
            latitude: 51.0,
            soil_capacity_proxy: 110.0,
            mean_annual_temp: 9.0,
        },
        SiteAttributes {
            site_id: "site_c".into(),
            latitude: 53.5,
            soil_capacity_proxy: 85.0,
            mean_annual_temp: 7.8,
        },
    ]
}

/// Ground-truth attribute→parameter rule of the twin. Every produced
/// value sits strictly inside the dPL bounds, so the truth is learnable.
pub fn true_params_for_site(site: &SiteAttributes) -> CropParams {
    let [lat, soil, temp] = site.normalized();
    CropParams {
        rue: 2.0 + 1.5 * soil,
        k_ext: 0.45 + 0.15 * lat,
        t_base: 3.0 + 2.0 * temp,
        s_max: site.soil_capacity_proxy,
        ..CropParams::default()
    }
}

/// Daily weather for one site, 365 days per year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub site_id: String,
    pub start_year: i32,
    pub days: Vec<DailyWeather>,
}

impl WeatherSeries {
    pub fn n_years(&self) -> usize {
        self.days.len() / DAYS_PER_YEAR
    }

    pub fn year(&self, index: usize) -> &[DailyWeather] {
        &self.days[index * DAYS_PER_YEAR..(index + 1) * DAYS_PER_YEAR]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.days.is_empty() || self.days.len() % DAYS_PER_YEAR != 0 {
            return Err(DataError::RaggedSeries(self.days.len()));
        }
        Ok(())
    }
}

fn site_stream(site_id: &str, seed: u64) -> ChaCha8Rng {
    // stable FNV-1a so the stream depends only on (site_id, seed)
    let mut h: u64 = 0xcbf29ce484222325;
    for b in site_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed)
}

/// Sinusoidal seasonal cycles with an AR(1) temperature anomaly,
/// Gaussian radiation noise, and Bernoulli–exponential precipitation.
/// Deterministic per (site_id, seed).
pub fn generate_weather(site: &SiteAttributes, years: usize, seed: u64) -> WeatherSeries {
    assert!(years >= 1);
    let mut rng = site_stream(&site.site_id, seed);
    let temp_innov = Normal::new(0.0, 2.0).unwrap();
    let rad_noise = Normal::new(0.0, 2.0).unwrap();
    let rain_amount = Exp::new(1.0 / 5.0).unwrap();
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut days = Vec::with_capacity(years * DAYS_PER_YEAR);
    let mut anomaly = 0.0;
    for _ in 0..years {
        for doy in 1..=DAYS_PER_YEAR {
            let d = doy as f64;
            anomaly = 0.7 * anomaly + temp_innov.sample(&mut rng);
            let t_mean = site.mean_annual_temp + 10.0 * (two_pi * (d - 120.0) / 365.0).sin() + anomaly;
            let half_range = 3.0 + anomaly.abs();
            let radiation =
                (8.0 + 12.0 * (two_pi * (d - 100.0) / 365.0).sin() + rad_noise.sample(&mut rng)).max(0.0);
            let precip = if rng.gen_bool(0.3) {
                rain_amount.sample(&mut rng)
            } else {
                0.0
            };
            days.push(DailyWeather {
                t_min: t_mean - half_range,
                t_max: t_mean + half_range,
                radiation,
                precip,
            });
        }
    }
    WeatherSeries {
        site_id: site.site_id.clone(),
        start_year: 1951,
        days,
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const WEATHER_CSV_HEADER: &str = "site_id,year,doy,t_min,t_max,radiation,precip";

pub fn write_weather_csv<W: Write>(out: &mut W, series: &WeatherSeries) -> Result<(), DataError> {
    series.validate()?;
    writeln!(out, "{WEATHER_CSV_HEADER}")?;
    for (i, d) in series.days.iter().enumerate() {
        let year = series.start_year + (i / DAYS_PER_YEAR) as i32;
        let doy = i % DAYS_PER_YEAR + 1;
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            series.site_id, year, doy, d.t_min, d.t_max, d.radiation, d.precip
        )?;
    }
    Ok(())
}

pub fn ingest_csv(path: &Path) -> Result<WeatherSeries, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    ingest_csv_reader(reader, &path.display().to_string())
}

pub fn ingest_csv_reader<R: BufRead>(reader: R, name: &str) -> Result<WeatherSeries, DataError> {
    let mut site_id: Option<String> = None;
    let mut start_year: Option<i32> = None;
    let mut days = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim() != WEATHER_CSV_HEADER {
                return Err(DataError::Csv {
                    line: lineno,
                    message: format!("expected header `{WEATHER_CSV_HEADER}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(DataError::Csv {
                line: lineno,
                message: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let bad = |message: String| DataError::Csv {
            line: lineno,
            message,
        };
        let year: i32 = fields[1]
            .parse()
            .map_err(|e| bad(format!("year: {e}")))?;
        let doy: usize = fields[2].parse().map_err(|e| bad(format!("doy: {e}")))?;
        if doy == 366 {
            continue; // leap days are dropped
        }
        if !(1..=DAYS_PER_YEAR).contains(&doy) {
            return Err(bad(format!("doy {doy} outside 1..365")));
        }
        let mut nums = [0.0f64; 4];
        for (k, field) in fields[3..].iter().enumerate() {
            nums[k] = field
                .parse()
                .map_err(|e| bad(format!("field {}: {e}", k + 4)))?;
        }
        let [t_min, t_max, radiation, precip] = nums;
        if t_min > t_max {
            return Err(bad(format!(
                "t_min {t_min} > t_max {t_max} on year {year} doy {doy}"
            )));
        }
        if radiation < 0.0 || precip < 0.0 {
            return Err(bad(format!(
                "negative radiation or precip on year {year} doy {doy}"
            )));
        }
        site_id.get_or_insert_with(|| fields[0].to_string());
        start_year.get_or_insert(year);
        days.push(DailyWeather {
            t_min,
            t_max,
            radiation,
            precip,
        });
    }
    let site_id = site_id.ok_or_else(|| DataError::EmptyFile(name.to_string()))?;
    let series = WeatherSeries {
        site_id,
        start_year: start_year.unwrap(),
        days,
    };
    series.validate()?;
    Ok(series)
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Gaussian contamination at an integer multiple of a per-variable base
/// scale (a fraction of the variable's sample standard deviation).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// 0 = identity, 1..3 = the contamination multiples
    pub level: u8,
    pub base_fraction: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(level: u8, seed: u64) -> Self {
        Self {
            level,
            base_fraction: 0.1,
            seed,
        }
    }
}

fn sample_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Contaminate every weather variable with level·σ_v·ε, σ_v being
/// base_fraction of the variable's sample std. Crossed t_min/t_max are
/// re-ordered; radiation and precip are floored at 0.
pub fn inject_noise(series: &WeatherSeries, spec: &NoiseSpec) -> WeatherSeries {
    if spec.level == 0 {
        return series.clone();
    }
    let sigma_tmin = spec.base_fraction * sample_std(series.days.iter().map(|d| d.t_min));
    let sigma_tmax = spec.base_fraction * sample_std(series.days.iter().map(|d| d.t_max));
    let sigma_rad = spec.base_fraction * sample_std(series.days.iter().map(|d| d.radiation));
    let sigma_pr = spec.base_fraction * sample_std(series.days.iter().map(|d| d.precip));
    let level = spec.level as f64;
    let mut rng = site_stream(&series.site_id, spec.seed ^ 0x6e6f697365);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut eps = move || normal.sample(&mut rng);
    let days = series
        .days
        .iter()
        .map(|d| {
            let mut t_min = d.t_min + level * sigma_tmin * eps();
            let mut t_max = d.t_max + level * sigma_tmax * eps();
            if t_min > t_max {
                std::mem::swap(&mut t_min, &mut t_max);
            }
            let radiation = (d.radiation + level * sigma_rad * eps()).max(0.0);
            let precip = (d.precip + level * sigma_pr * eps()).max(0.0);
            DailyWeather {
                t_min,
                t_max,
                radiation,
                precip,
            }
        })
        .collect();
    WeatherSeries {
        site_id: series.site_id.clone(),
        start_year: series.start_year,
        days,
    }
}

/// Same contamination formula applied to a vector of observations
/// (the biomass-noise mode).
pub fn inject_observation_noise(values: &[f64], spec: &NoiseSpec, tag: &str) -> Vec<f64> {
    if spec.level == 0 {
        return values.to_vec();
    }
    let sigma = spec.base_fraction * sample_std(values.iter().copied());
    let mut rng = site_stream(tag, spec.seed ^ 0x6f6273);
    let normal = Normal::new(0.0, 1.0).unwrap();
    values
        .iter()
        .map(|&v| v + spec.level as f64 * sigma * normal.sample(&mut rng))
        .collect()
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Year-index split: a chronological calibration window partitioned into
/// train/test, with the remaining years held out for validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub calibration_years: Vec<usize>,
    pub validation_years: Vec<usize>,
    pub train_years: Vec<usize>,
    pub test_years: Vec<usize>,
}

impl SplitPlan {
    pub fn assert_no_leak(&self) {
        for y in &self.train_years {
            assert!(!self.test_years.contains(y), "train/test leak at year {y}");
            assert!(self.calibration_years.contains(y));
        }
        for y in &self.calibration_years {
            assert!(
                !self.validation_years.contains(y),
                "calibration/validation leak at year {y}"
            );
        }
    }
}

/// First `calibration_count` years form the calibration window; the rest
/// validate. Train years are drawn without replacement at
/// `train_fraction` (floor rule), deterministic per seed.
pub fn split_years(
    n_years: usize,
    calibration_count: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitPlan, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadTrainFraction(train_fraction));
    }
    if n_years < calibration_count + 1 {
        return Err(DataError::TooShort {
            have: n_years,
            need: calibration_count + 1,
        });
    }
    let calibration_years: Vec<usize> = (0..calibration_count).collect();
    let validation_years: Vec<usize> = (calibration_count..n_years).collect();
    let n_train = ((calibration_count as f64) * train_fraction).floor() as usize;
    let mut pool = calibration_years.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates
    for i in 0..n_train {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut train_years: Vec<usize> = pool[..n_train].to_vec();
    train_years.sort_unstable();
    let test_years: Vec<usize> = calibration_years
        .iter()
        .copied()
        .filter(|y| !train_years.contains(y))
        .collect();
    let plan = SplitPlan {
        calibration_years,
        validation_years,
        train_years,
        test_years,
    };
    plan.assert_no_leak();
    Ok(plan)
}

/// Reduce the train set to `k_years` uniformly chosen years; everything
/// else is unchanged.
pub fn fewshot_subset(plan: &SplitPlan, k_years: usize, seed: u64) -> Result<SplitPlan, DataError> {
    if k_years < 1 || k_years > plan.train_years.len() {
        return Err(DataError::BadFewshotK {
            k: k_years,
            max: plan.train_years.len(),
        });
    }
    if k_years == plan.train_years.len() {
        return Ok(plan.clone());
    }
    let mut pool = plan.train_years.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66657773686f74);
    for i in 0..k_years {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut train_years: Vec<usize> = pool[..k_years].to_vec();
    train_years.sort_unstable();
    let reduced = SplitPlan {
        train_years,
        ..plan.clone()
    };
    reduced.assert_no_leak();
    Ok(reduced)
}

/// One leave-one-site-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialFold {
    pub train_sites: [String; 2],
    pub validation_site: String,
}

/// All three leave-one-out folds over exactly 3 distinct sites, in a
/// deterministic order (fold i holds out site i).
pub fn spatial_folds(sites: &[SiteAttributes]) -> Result<Vec<SpatialFold>, DataError> {
    if sites.len() != 3 {
        return Err(DataError::BadSiteCount(sites.len()));
    }
    for (i, s) in sites.iter().enumerate() {
        for other in &sites[i + 1..] {
            if s.site_id == other.site_id {
                return Err(DataError::DuplicateSite(s.site_id.clone()));
            }
        }
    }
    Ok((0..3)
        .map(|held| {
            let rest: Vec<&SiteAttributes> =
                sites.iter().enumerate().filter(|(i, _)| *i != held).map(|(_, s)| s).collect();
            SpatialFold {
                train_sites: [rest[0].site_id.clone(), rest[1].site_id.clone()],
                validation_site: sites[held].site_id.clone(),
            }
        })
        .collect())
}

/// Default number of days folded into one sequence step for the
/// recurrent models.
pub const WEEK_DAYS: usize = 7;

/// Aggregate daily weather into steps of `step_days`: mean temperatures,
/// summed radiation and precipitation. A trailing partial step is dropped.
pub fn aggregate_features(days: &[DailyWeather], step_days: usize) -> Vec<Vec<f64>> {
    assert!(step_days >= 1);
    days.chunks_exact(step_days)
        .map(|chunk| {
            let n = chunk.len() as f64;
            vec![
                chunk.iter().map(|d| d.t_min).sum::<f64>() / n,
                chunk.iter().map(|d| d.t_max).sum::<f64>() / n,
                chunk.iter().map(|d| d.radiation).sum::<f64>(),
                chunk.iter().map(|d| d.precip).sum::<f64>(),
            ]
        })
        .collect()
}

/// Weekly aggregation, the default step for the recurrent models.
pub fn weekly_features(days: &[DailyWeather]) -> Vec<Vec<f64>> {
    aggregate_features(days, WEEK_DAYS)
}

/// Per-feature mean and standard deviation over all steps of all
/// sequences, for standardizing recurrent-model inputs.
pub fn feature_stats(sequences: &[Vec<Vec<f64>>]) -> (Vec<f64>, Vec<f64>) {
    let width = sequences
        .iter()
        .flat_map(|s| s.iter())
        .map(|step| step.len())
        .next()
        .unwrap_or(0);
    let mut mean = vec![0.0; width];
    let mut count = 0usize;
    for step in sequences.iter().flat_map(|s| s.iter()) {
        for (m, &v) in mean.iter_mut().zip(step) {
            *m += v;
        }
        count += 1;
    }
    for m in &mut mean {
        *m /= count.max(1) as f64;
    }
    let mut var = vec![0.0; width];
    for step in sequences.iter().flat_map(|s| s.iter()) {
        for ((v, &x), &m) in var.iter_mut().zip(step).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count.max(1) as f64).sqrt().max(1e-9))
        .collect();
    (mean, std)
}

/// Apply (x − mean) / std per feature.
pub fn standardize(sequence: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    sequence
        .iter()
        .map(|step| {
            step.iter()
                .zip(mean.iter().zip(std))
                .map(|(&x, (&m, &s))| (x - m) / s)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site() -> SiteAttributes {
        default_sites().remove(1)
    }

    #[test]
    fn generator_counts_and_determinism() {
        let s = site();
        let series = generate_weather(&s, 68, 7);
        assert_eq!(series.days.len(), 24_820);
        let again = generate_weather(&s, 68, 7);
        assert_eq!(series, again);
        let other_seed = generate_weather(&s, 68, 8);
        assert_ne!(series, other_seed);
        let mut other_site = s.clone();
        other_site.site_id = "elsewhere".into();
        assert_ne!(generate_weather(&other_site, 68, 7).days, series.days);
    }

    #[test]
    fn generator_mean_temperature_tracks_attribute() {
        let s = site();
        let series = generate_weather(&s, 68, 42);
        let mean: f64 = series
            .days
            .iter()
            .map(|d| 0.5 * (d.t_min + d.t_max))
            .sum::<f64>()
            / series.days.len() as f64;
        assert!(
            (mean - s.mean_annual_temp).abs() < 0.5,
            "mean {mean} vs attribute {}",
            s.mean_annual_temp
        );
    }

    #[test]
    fn generated_weather_satisfies_invariants() {
        let series = generate_weather(&site(), 10, 3);
        for (i, d) in series.days.iter().enumerate() {
            d.validate(i).unwrap();
        }
    }

    #[test]
    fn csv_round_trip() {
        let series = generate_weather(&site(), 2, 1);
        let mut buf = Vec::new();
        write_weather_csv(&mut buf, &series).unwrap();
        let back = ingest_csv_reader(std::io::BufReader::new(&buf[..]), "mem").unwrap();
        assert_eq!(back.site_id, series.site_id);
        assert_eq!(back.days.len(), series.days.len());
        for (a, b) in back.days.iter().zip(&series.days) {
            assert!((a.t_min - b.t_min).abs() < 1e-6);
            assert!((a.precip - b.precip).abs() < 1e-6);
        }
    }

    #[test]
    fn header_only_file_rejected() {
        let data = format!("{WEATHER_CSV_HEADER}\n");
        let err = ingest_csv_reader(std::io::BufReader::new(data.as_bytes()), "mem").unwrap_err();
        assert!(matches!(err, DataError::EmptyFile(_)));
    }

    #[test]
    fn bad_rows_rejected_with_line_numbers() {
        let data = format!("{WEATHER_CSV_HEADER}\ns,1951,1,1.0,5.0,10.0,-1.0\n");
        match ingest_csv_reader(std::io::BufReader::new(data.as_bytes()), "mem").unwrap_err() {
            DataError::Csv { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let data = format!("{WEATHER_CSV_HEADER}\ns,1951,1,9.0,5.0,10.0,0.0\n");
        match ingest_csv_reader(std::io::BufReader::new(data.as_bytes()), "mem").unwrap_err() {
            DataError::Csv { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("t_min"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn noise_level_zero_is_identity() {
        let series = generate_weather(&site(), 3, 5);
        let out = inject_noise(&series, &NoiseSpec::new(0, 99));
        assert_eq!(out, series);
    }

    #[test]
    fn noise_scales_with_level() {
        let series = generate_weather(&site(), 68, 21);
        let sigma_rad = 0.1 * sample_std(series.days.iter().map(|d| d.radiation));
        for level in [1u8, 3] {
            let noisy = inject_noise(&series, &NoiseSpec::new(level, 4));
            // radiation floor biases the difference, so measure where the
            // original is far from the floor
            let deltas: Vec<f64> = noisy
                .days
                .iter()
                .zip(&series.days)
                .filter(|(_, o)| o.radiation > 3.0 * level as f64 * sigma_rad)
                .map(|(n, o)| n.radiation - o.radiation)
                .collect();
            let sd = sample_std(deltas.iter().copied());
            let expect = level as f64 * sigma_rad;
            assert!(
                (sd - expect).abs() / expect < 0.05,
                "level {level}: sd {sd} vs {expect}"
            );
            for d in &noisy.days {
                assert!(d.radiation >= 0.0 && d.precip >= 0.0 && d.t_min <= d.t_max);
            }
        }
    }

    #[test]
    fn split_years_shapes() {
        let plan = split_years(68, 48, 0.8, 1).unwrap();
        assert_eq!(plan.validation_years.len(), 20);
        assert_eq!(plan.train_years.len(), 38);
        assert_eq!(plan.test_years.len(), 10);
        assert_eq!(split_years(68, 48, 0.8, 1).unwrap(), plan);
        assert!(split_years(68, 48, 1.5, 1).is_err());
        assert!(split_years(10, 48, 0.5, 1).is_err());
    }

    #[test]
    fn fewshot_reduction() {
        let plan = split_years(68, 48, 0.8, 1).unwrap();
        for k in [7usize, 3, 1] {
            let sub = fewshot_subset(&plan, k, 2).unwrap();
            assert_eq!(sub.train_years.len(), k);
            assert_eq!(sub.test_years, plan.test_years);
            for y in &sub.train_years {
                assert!(plan.train_years.contains(y));
            }
        }
        let full = fewshot_subset(&plan, plan.train_years.len(), 2).unwrap();
        assert_eq!(full, plan);
        assert!(fewshot_subset(&plan, 0, 2).is_err());
    }

    #[test]
    fn spatial_folds_enumeration() {
        let sites = default_sites();
        let folds = spatial_folds(&sites).unwrap();
        assert_eq!(folds.len(), 3);
        for s in &sites {
            assert_eq!(
                folds
                    .iter()
                    .filter(|f| f.validation_site == s.site_id)
                    .count(),
                1
            );
        }
        assert!(spatial_folds(&sites[..2]).is_err());
        let mut dup = sites.clone();
        dup[2].site_id = dup[0].site_id.clone();
        assert!(matches!(
            spatial_folds(&dup),
            Err(DataError::DuplicateSite(_))
        ));
    }

    #[test]
    fn true_params_within_dpl_bounds() {
        for s in default_sites() {
            let p = true_params_for_site(&s);
            p.validate().unwrap();
            assert!(p.rue > 1.0 && p.rue < 5.0);
            assert!(p.k_ext > 0.3 && p.k_ext < 0.9);
            assert!(p.t_base > 0.0 && p.t_base < 10.0);
            assert!(p.s_max > 50.0 && p.s_max < 200.0);
        }
    }

    #[test]
    fn observation_noise_identity_and_scale() {
        let values: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.017).sin() * 10.0).collect();
        assert_eq!(
            inject_observation_noise(&values, &NoiseSpec::new(0, 1), "t"),
            values
        );
        let noisy = inject_observation_noise(&values, &NoiseSpec::new(2, 1), "t");
        let sigma = 0.1 * sample_std(values.iter().copied());
        let deltas: Vec<f64> = noisy.iter().zip(&values).map(|(n, o)| n - o).collect();
        let sd = sample_std(deltas.iter().copied());
        assert!((sd - 2.0 * sigma).abs() / (2.0 * sigma) < 0.1);
    }
}
