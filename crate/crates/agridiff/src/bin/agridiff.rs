//! Command-line entry point: data generation, simulation, calibration,
//! model training, the experiment protocols, gradient checking, and
//! report summaries. Settings resolve as flags > config file > defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use agridiff::autodiff::{RandomProgram, Tape};
use agridiff::data;
use agridiff::evaluation::{
    self, ExperimentSpec, FitCtx, HarnessConfig, ModelKind, NoiseTarget, Protocol,
};
use agridiff::pbm::{self, SimOptions, DAYS_PER_YEAR};
use agridiff::training;

const CONFIG_KEYS: &str = "\
Config file keys (TOML, all optional; flags override):
  [twin]        n_years, calibration_years, train_fraction, sowing_doy
  [model]       hidden_size, mlp_hidden, step_days, lambda
  [training]    learning_rate, max_epochs, patience, min_delta,
                calib_learning_rate, calib_max_epochs, calib_patience,
                surrogate_samples
  [experiment]  models (list), levels (list), fewshot (list), seeds (list),
                noise_target (weather|biomass|both)

--seeds accepts either an explicit comma list ('3,5,9') or a single
integer N meaning the N seeds 0..N.

Environment: AGRIDIFF_LOG in {error,warn,info,debug} controls logging.";

#[derive(Parser)]
#[command(
    name = "agridiff",
    version,
    about = "Differentiable crop modeling toolkit",
    after_long_help = CONFIG_KEYS
)]
struct Cli {
    /// TOML config file; flags take precedence over its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory; nothing outside it is written
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// worker pool size for experiment cells (default: logical processors)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic twin: weather and observation CSVs
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        /// noise level 0-3 applied to the training view
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        noise_target: Option<CliNoiseTarget>,
    },
    /// Run one season at a site's true parameters and dump the trajectory
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "site_a")]
        site: String,
        /// zero-based year index within the generated series
        #[arg(long, default_value_t = 0)]
        year: usize,
    },
    /// Gradient-calibrate the process model on one site's noisy years
    Calibrate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "site_a")]
        site: String,
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        noise_target: Option<CliNoiseTarget>,
    },
    /// Train one model on the twin and report split metrics
    Train {
        #[arg(long)]
        seed: Option<u64>,
        /// one model name, e.g. pure_dl or surrogate_dpl
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        noise_target: Option<CliNoiseTarget>,
    },
    /// Run an experiment protocol over models × conditions × seeds
    Experiment {
        #[arg(value_enum)]
        protocol: CliProtocol,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        fewshot: Option<String>,
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        noise_target: Option<CliNoiseTarget>,
    },
    /// Check reverse-mode gradients against finite differences
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// number of random programs
        #[arg(long, default_value_t = 100)]
        programs: usize,
    },
    /// Summarize an existing experiment report JSON
    Report {
        /// path to a report.json written by `experiment`
        path: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CliProtocol {
    Noise,
    Fewshot,
    Spatial,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliNoiseTarget {
    Weather,
    Biomass,
    Both,
}

impl From<CliNoiseTarget> for NoiseTarget {
    fn from(t: CliNoiseTarget) -> Self {
        match t {
            CliNoiseTarget::Weather => NoiseTarget::Weather,
            CliNoiseTarget::Biomass => NoiseTarget::Biomass,
            CliNoiseTarget::Both => NoiseTarget::Both,
        }
    }
}

// ---------------------------------------------------------------------------
// Config file layer
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    twin: TwinSection,
    model: ModelSection,
    training: TrainingSection,
    experiment: ExperimentSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TwinSection {
    n_years: Option<usize>,
    calibration_years: Option<usize>,
    train_fraction: Option<f64>,
    sowing_doy: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    hidden_size: Option<usize>,
    mlp_hidden: Option<usize>,
    step_days: Option<usize>,
    lambda: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainingSection {
    learning_rate: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    min_delta: Option<f64>,
    calib_learning_rate: Option<f64>,
    calib_max_epochs: Option<usize>,
    calib_patience: Option<usize>,
    surrogate_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentSection {
    models: Option<Vec<String>>,
    levels: Option<Vec<u8>>,
    fewshot: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    noise_target: Option<String>,
}

/// Fully resolved settings after merging defaults, file, and flags.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    harness: HarnessConfig,
    models: Vec<ModelKind>,
    levels: Vec<u8>,
    fewshot: Vec<usize>,
    seeds: Vec<u64>,
    noise_target: NoiseTarget,
    lambda: f64,
}

enum CliError {
    /// bad input: exit 1
    Validation(String),
    /// a run that started but could not finish: exit 2
    Runtime(String),
}

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))
}

fn resolve(file: &FileConfig) -> Result<Resolved, CliError> {
    let mut h = HarnessConfig::default();
    let t = &file.twin;
    if let Some(v) = t.n_years {
        h.n_years = v;
    }
    if let Some(v) = t.calibration_years {
        h.calibration_years = v;
    }
    if let Some(v) = t.train_fraction {
        h.train_fraction = v;
    }
    if let Some(v) = t.sowing_doy {
        h.sowing_doy = v;
    }
    let m = &file.model;
    if let Some(v) = m.hidden_size {
        h.hidden_size = v;
    }
    if let Some(v) = m.mlp_hidden {
        h.mlp_hidden = v;
    }
    if let Some(v) = m.step_days {
        h.step_days = v;
    }
    let tr = &file.training;
    if let Some(v) = tr.learning_rate {
        h.nn_adam.learning_rate = v;
    }
    if let Some(v) = tr.max_epochs {
        h.nn_stop.max_epochs = v;
    }
    if let Some(v) = tr.patience {
        h.nn_stop.patience = v;
    }
    if let Some(v) = tr.min_delta {
        h.nn_stop.min_delta = v;
    }
    if let Some(v) = tr.calib_learning_rate {
        h.calib_adam.learning_rate = v;
    }
    if let Some(v) = tr.calib_max_epochs {
        h.calib_stop.max_epochs = v;
    }
    if let Some(v) = tr.calib_patience {
        h.calib_stop.patience = v;
    }
    if let Some(v) = tr.surrogate_samples {
        h.surrogate_samples = v;
    }
    let e = &file.experiment;
    let models = match &e.models {
        Some(names) => parse_models(&names.join(","))?,
        None => ModelKind::all().to_vec(),
    };
    let noise_target = match &e.noise_target {
        Some(s) => s.parse::<NoiseTarget>().map_err(CliError::Validation)?,
        None => NoiseTarget::Weather,
    };
    Ok(Resolved {
        harness: h,
        models,
        levels: e.levels.clone().unwrap_or_else(|| vec![1, 2, 3]),
        fewshot: e.fewshot.clone().unwrap_or_else(|| vec![7, 3, 1]),
        seeds: e.seeds.clone().unwrap_or_else(|| vec![0, 1, 2]),
        noise_target,
        lambda: file.model.lambda.unwrap_or(0.1),
    })
}

fn parse_list<T: FromStrErr>(s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| T::parse(p.trim()).map_err(CliError::Validation))
        .collect()
}

/// FromStr with a String error, so u8/u64/usize and ModelKind share one
/// comma-list parser.
trait FromStrErr: Sized {
    fn parse(s: &str) -> Result<Self, String>;
}

macro_rules! from_str_err {
    ($($t:ty),*) => {$(
        impl FromStrErr for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("bad value '{s}': {e}"))
            }
        }
    )*};
}
from_str_err!(u8, u64, usize);

impl FromStrErr for ModelKind {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse()
    }
}

fn parse_models(s: &str) -> Result<Vec<ModelKind>, CliError> {
    let models: Vec<ModelKind> = parse_list(s)?;
    if models.is_empty() {
        return Err(CliError::Validation("no models given".into()));
    }
    Ok(models)
}

/// "3,5,9" is an explicit list; a bare integer N means seeds 0..N.
fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    if !s.contains(',') {
        let n: u64 = FromStrErr::parse(s.trim()).map_err(CliError::Validation)?;
        return Ok((0..n).collect());
    }
    parse_list(s)
}

fn single_level(s: Option<&String>) -> Result<u8, CliError> {
    match s {
        None => Ok(0),
        Some(text) => {
            let levels: Vec<u8> = parse_list(text)?;
            match levels.as_slice() {
                [one] => Ok(*one),
                _ => Err(CliError::Validation(
                    "this subcommand takes a single noise level".into(),
                )),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Output plumbing
// ---------------------------------------------------------------------------

fn ensure_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

/// The provenance header is written before any result so a rerun from it
/// alone reproduces the outputs.
fn write_provenance(out: &Path, resolved: &Resolved, extra: &str) -> Result<(), CliError> {
    let body = serde_json::json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": extra,
        "resolved": resolved,
    });
    fs::write(
        out.join("provenance.json"),
        serde_json::to_string_pretty(&body).map_err(runtime)? + "\n",
    )
    .map_err(runtime)
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::write(out.join(name), text).map_err(runtime)?;
    log::info!("wrote {}", out.join(name).display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    out: &Path,
    resolved: &Resolved,
    seed: u64,
    level: u8,
    target: NoiseTarget,
) -> Result<(), CliError> {
    ensure_out(out)?;
    write_provenance(out, resolved, &format!("gen-data seed={seed} level={level}"))?;
    let twin = evaluation::build_twin(&resolved.harness, seed, level, target).map_err(runtime)?;
    for site in &twin.sites {
        let mut csv = String::from("year,day,t_min,t_max,radiation,precipitation\n");
        for (i, d) in site.noisy_weather.days.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4}\n",
                site.noisy_weather.start_year + (i / DAYS_PER_YEAR) as i32,
                i % DAYS_PER_YEAR + 1,
                d.t_min,
                d.t_max,
                d.radiation,
                d.precip
            ));
        }
        write_text(out, &format!("weather_{}.csv", site.attrs.site_id), &csv)?;
    }
    let mut obs = String::from("site,year,clean_biomass,observed_biomass\n");
    for site in &twin.sites {
        for (y, (clean, noisy)) in site.clean_obs.iter().zip(&site.noisy_obs).enumerate() {
            obs.push_str(&format!(
                "{},{},{:.4},{:.4}\n",
                site.attrs.site_id,
                site.clean_weather.start_year + y as i32,
                clean,
                noisy
            ));
        }
    }
    write_text(out, "observations.csv", &obs)?;
    println!(
        "generated {} sites x {} years at noise level {level}",
        twin.sites.len(),
        resolved.harness.n_years
    );
    Ok(())
}

fn cmd_simulate(
    out: &Path,
    resolved: &Resolved,
    seed: u64,
    site_id: &str,
    year: usize,
) -> Result<(), CliError> {
    let cfg = &resolved.harness;
    if year >= cfg.n_years {
        return Err(CliError::Validation(format!(
            "year index {year} out of range (n_years = {})",
            cfg.n_years
        )));
    }
    let site = data::default_sites()
        .into_iter()
        .find(|s| s.site_id == site_id)
        .ok_or_else(|| CliError::Validation(format!("unknown site '{site_id}'")))?;
    ensure_out(out)?;
    write_provenance(out, resolved, &format!("simulate seed={seed} site={site_id}"))?;
    let weather = data::generate_weather(&site, cfg.n_years, seed);
    let params = data::true_params_for_site(&site);
    let year_days = &weather.days[year * DAYS_PER_YEAR..(year + 1) * DAYS_PER_YEAR];

    let tape = Tape::new();
    let pv = params.lift(&tape).map_err(runtime)?;
    let run = pbm::simulate_season(
        &tape,
        year_days,
        &pv,
        &SimOptions::default(),
        &cfg.season(),
        pbm::bucket_stress,
    )
    .map_err(runtime)?;
    let states: Vec<_> = run.trajectory.iter().map(|s| s.snapshot()).collect();
    let mut csv = Vec::new();
    pbm::write_trajectory_csv(&mut csv, &states).map_err(runtime)?;
    write_text(out, "trajectory.csv", &String::from_utf8_lossy(&csv))?;
    println!(
        "site {site_id}, year {}: harvest biomass {:.2} g/m2 on day {}",
        weather.start_year + year as i32,
        run.harvest_biomass.value(),
        run.harvest_day
    );
    Ok(())
}

fn cmd_calibrate(
    out: &Path,
    resolved: &Resolved,
    seed: u64,
    site_id: &str,
    level: u8,
    target: NoiseTarget,
) -> Result<(), CliError> {
    let cfg = &resolved.harness;
    let twin = evaluation::build_twin(cfg, seed, level, target).map_err(runtime)?;
    let site = twin
        .sites
        .iter()
        .find(|s| s.attrs.site_id == site_id)
        .ok_or_else(|| CliError::Validation(format!("unknown site '{site_id}'")))?;
    ensure_out(out)?;
    write_provenance(out, resolved, &format!("calibrate seed={seed} site={site_id}"))?;
    let mut weather = Vec::new();
    let mut obs = Vec::new();
    for &y in &twin.split.calibration_years {
        weather.extend_from_slice(
            &site.noisy_weather.days[y * DAYS_PER_YEAR..(y + 1) * DAYS_PER_YEAR],
        );
        obs.push(site.noisy_obs[y]);
    }
    let result = training::calibrate_pbm(
        &cfg.base_params,
        &training::dpl_bounds(),
        &obs,
        &weather,
        &cfg.season(),
        cfg.calib_adam,
        cfg.calib_stop,
    )
    .map_err(runtime)?;
    let body = serde_json::json!({
        "site": site_id,
        "params": result.params,
        "true_params": site.true_params,
        "best_epoch": result.report.best_epoch,
        "stopped_epoch": result.report.stopped_epoch,
    });
    write_text(
        out,
        "calibration.json",
        &(serde_json::to_string_pretty(&body).map_err(runtime)? + "\n"),
    )?;
    write_text(out, "loss_curves.csv", &result.report.curves_csv())?;
    println!(
        "calibrated {site_id} in {} epochs (best {})",
        result.report.stopped_epoch, result.report.best_epoch
    );
    Ok(())
}

fn cmd_train(
    out: &Path,
    resolved: &Resolved,
    seed: u64,
    model: ModelKind,
    level: u8,
    target: NoiseTarget,
) -> Result<(), CliError> {
    let cfg = &resolved.harness;
    ensure_out(out)?;
    write_provenance(out, resolved, &format!("train seed={seed} model={model}"))?;
    let twin = evaluation::build_twin(cfg, seed, level, target).map_err(runtime)?;
    let all: Vec<usize> = (0..twin.sites.len()).collect();
    let ctx = FitCtx {
        cfg,
        sites: twin.sites.iter().map(|s| &s.attrs).collect(),
        train: evaluation::twin_samples(&twin, &all, &twin.split.train_years, true),
        test: evaluation::twin_samples(&twin, &all, &twin.split.test_years, true),
        seed,
        lambda_physics: resolved.lambda,
    };
    let fitted = evaluation::fit_model(model, &ctx).map_err(runtime)?;
    let mut splits = serde_json::Map::new();
    let validation = evaluation::twin_samples(&twin, &all, &twin.split.validation_years, false);
    for (name, samples) in [
        ("train", &ctx.train),
        ("test", &ctx.test),
        ("validation", &validation),
    ] {
        let mut predicted = Vec::new();
        let mut observed = Vec::new();
        for s in samples {
            let p = fitted
                .predict(cfg, s.site_idx, &twin.sites[s.site_idx].attrs, s.weather)
                .map_err(runtime)?;
            predicted.push(p);
            observed.push(s.observed);
        }
        let m = evaluation::metrics(&predicted, &observed).map_err(runtime)?;
        splits.insert(name.into(), serde_json::to_value(m).map_err(runtime)?);
        println!(
            "{name:>10}: rmse {:.3}, r2 {}",
            m.rmse,
            m.r_squared
                .map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    let body = serde_json::json!({
        "model": model.name(),
        "family": model.family(),
        "seed": seed,
        "metrics": splits,
    });
    write_text(
        out,
        "train.json",
        &(serde_json::to_string_pretty(&body).map_err(runtime)? + "\n"),
    )
}

fn cmd_experiment(
    out: &Path,
    resolved: &Resolved,
    protocol: CliProtocol,
) -> Result<(), CliError> {
    let protocol = match protocol {
        CliProtocol::Noise => Protocol::Noise,
        CliProtocol::Fewshot => Protocol::Fewshot,
        CliProtocol::Spatial => Protocol::Spatial,
    };
    let spec = ExperimentSpec {
        protocol,
        models: resolved.models.clone(),
        noise_levels: resolved.levels.clone(),
        fewshot_k: resolved.fewshot.clone(),
        seeds: resolved.seeds.clone(),
        noise_target: resolved.noise_target,
        lambda_physics: resolved.lambda,
        config: resolved.harness.clone(),
    };
    spec.validate().map_err(validation)?;
    ensure_out(out)?;
    write_provenance(out, resolved, &format!("experiment {protocol:?}"))?;
    let output = evaluation::run_experiment(&spec).map_err(runtime)?;
    write_text(
        out,
        "report.json",
        &(output.report.to_json().map_err(runtime)? + "\n"),
    )?;
    if !output.fig7.is_empty() {
        let mut buf = Vec::new();
        evaluation::write_fig7_csv(&mut buf, &output.fig7).map_err(runtime)?;
        write_text(out, "fig7_scatter.csv", &String::from_utf8_lossy(&buf))?;
    }
    if !output.fig9.is_empty() {
        let mut buf = Vec::new();
        evaluation::write_fig9_csv(&mut buf, &output.fig9).map_err(runtime)?;
        write_text(out, "fig9_box.csv", &String::from_utf8_lossy(&buf))?;
    }
    let failed = output
        .report
        .cells
        .iter()
        .filter(|c| c.status.starts_with("failed"))
        .count();
    println!(
        "{} cells ({} failed), {} summaries -> {}",
        output.report.cells.len(),
        failed,
        output.report.summaries.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, programs: usize) -> Result<(), CliError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    println!("{:>8} {:>7} {:>5} {:>12}  result", "program", "inputs", "ops", "max_rel_err");
    for i in 0..programs {
        let n_inputs = rng.gen_range(2..=5);
        let point: Vec<f64> = (0..n_inputs).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let program = RandomProgram::generate(rng.gen(), n_inputs, 12, &point);
        let names: Vec<String> = (0..n_inputs).map(|j| format!("x{j}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = agridiff::autodiff::grad_check(
            |tape, vars| program.eval(tape, vars),
            &name_refs,
            &point,
            1e-6,
            1e-5,
        )
        .map_err(runtime)?;
        let max_err = report
            .entries
            .iter()
            .map(|e| e.rel_error)
            .fold(0.0f64, f64::max);
        if !report.pass {
            failures += 1;
        }
        println!(
            "{i:>8} {n_inputs:>7} {:>5} {max_err:>12.3e}  {}",
            12,
            if report.pass { "pass" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(CliError::Validation(format!(
            "{failures}/{programs} programs failed the gradient check"
        )));
    }
    println!("all {programs} programs passed");
    Ok(())
}

fn cmd_report(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let report: agridiff::evaluation::ExperimentReport =
        serde_json::from_str(&text).map_err(validation)?;
    println!(
        "{} v{}: {:?} over {} seeds, {} cells",
        report.provenance.package,
        report.provenance.version,
        report.spec.protocol,
        report.provenance.seeds.len(),
        report.cells.len()
    );
    println!(
        "{:<22} {:<32} {:>9} {:>9} {:>9}",
        "model", "condition", "q1", "median", "q3"
    );
    for s in &report.summaries {
        println!(
            "{:<22} {:<32} {:>9.4} {:>9.4} {:>9.4}",
            s.model, s.condition, s.q1, s.median, s.q3
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// main
// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_file_config(cli.config.as_deref())?;
    let mut resolved = resolve(&file)?;

    #[cfg(feature = "parallel")]
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(runtime)?;
    }
    #[cfg(not(feature = "parallel"))]
    if cli.jobs.is_some() {
        log::warn!("built without the parallel feature; --jobs ignored");
    }

    let out = cli.out.clone();
    match cli.command {
        Command::GenData {
            seed,
            levels,
            noise_target,
        } => {
            let level = single_level(levels.as_ref())?;
            let target = noise_target.map_or(resolved.noise_target, Into::into);
            cmd_gen_data(&out, &resolved, seed.unwrap_or(0), level, target)
        }
        Command::Simulate { seed, site, year } => {
            cmd_simulate(&out, &resolved, seed.unwrap_or(0), &site, year)
        }
        Command::Calibrate {
            seed,
            site,
            levels,
            noise_target,
        } => {
            let level = single_level(levels.as_ref())?;
            let target = noise_target.map_or(resolved.noise_target, Into::into);
            cmd_calibrate(&out, &resolved, seed.unwrap_or(0), &site, level, target)
        }
        Command::Train {
            seed,
            models,
            lambda,
            levels,
            noise_target,
        } => {
            if let Some(l) = lambda {
                resolved.lambda = l;
            }
            let model = match models {
                Some(s) => match parse_models(&s)?.as_slice() {
                    [one] => *one,
                    _ => {
                        return Err(CliError::Validation(
                            "train takes exactly one model".into(),
                        ))
                    }
                },
                None => ModelKind::PureDl,
            };
            let level = single_level(levels.as_ref())?;
            let target = noise_target.map_or(resolved.noise_target, Into::into);
            cmd_train(&out, &resolved, seed.unwrap_or(0), model, level, target)
        }
        Command::Experiment {
            protocol,
            seeds,
            levels,
            fewshot,
            models,
            lambda,
            noise_target,
        } => {
            if let Some(s) = seeds {
                resolved.seeds = parse_seeds(&s)?;
            }
            if let Some(l) = levels {
                resolved.levels = parse_list(&l)?;
            }
            if let Some(f) = fewshot {
                resolved.fewshot = parse_list(&f)?;
            }
            if let Some(m) = models {
                resolved.models = parse_models(&m)?;
            }
            if let Some(l) = lambda {
                resolved.lambda = l;
            }
            if let Some(t) = noise_target {
                resolved.noise_target = t.into();
            }
            cmd_experiment(&out, &resolved, protocol)
        }
        Command::Gradcheck { seed, programs } => cmd_gradcheck(seed.unwrap_or(0), programs),
        Command::Report { path } => cmd_report(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("AGRIDIFF_LOG", "warn"),
    )
    .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
