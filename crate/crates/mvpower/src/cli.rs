//! Command-line front end: argument definitions and subcommand drivers.
//!
//! Every run writes its artifacts into an output directory containing exactly
//! one reproducibility manifest: `fit` writes the model JSON plus diagnostic
//! tables, `power` writes the report JSON plus the null/alternative statistic
//! CSVs, `curve` writes the grid CSV. Primary outputs are byte-identical
//! across reruns with the same seed; timestamps and wall times live only in
//! the manifest and on stdout.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::copula::{fit_copula, CopulaOptions};
use crate::effects::{effect_alt, EffectSpec};
use crate::error::{Error, Result};
use crate::glm::diagnostics::{diagnostics, write_mean_variance_csv, write_residual_fit_csv};
use crate::glm::manyglm::fit_manyglm;
use crate::glm::model_matrix::build_model_matrix;
use crate::ingest::{read_counts, read_design, DesignSchema, RunConfig};
use crate::manifest::RunManifest;
use crate::model_io::{load_model, save_model};
use crate::power::{
    power_curve, powersim_critical, powersim_nested, write_power_curve_csv, PowerMethod,
    PowerResult, PowerSettings,
};
use crate::rng::{stream, Phase};

#[derive(Debug, Parser)]
#[command(
    name = "mvpower",
    version,
    about = "Simulation-based power analysis for many-taxon count data"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit per-taxon count models and a factor-analytic correlation to pilot data
    Fit(FitArgs),
    /// Estimate power at a hypothetical sample size from a fitted model
    Power(PowerArgs),
    /// Tabulate power over a grid of effect sizes and sample sizes
    Curve(CurveArgs),
    /// Write mean-variance and residual diagnostics for a fitted model
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Counts CSV: header `sample_id,taxon...`, one row per sample
    #[arg(long)]
    counts: PathBuf,
    /// Design CSV: header of covariate names, rows aligned with the counts
    #[arg(long)]
    design: PathBuf,
    /// Model terms (design columns), comma separated, in order
    #[arg(long, value_delimiter = ',', required = true)]
    terms: Vec<String>,
    /// Count family: poisson, negative_binomial (nb), or binomial
    #[arg(long)]
    family: Option<String>,
    /// Number of latent factors in the correlation model
    #[arg(long = "n-factors")]
    n_factors: Option<usize>,
    /// Fix a categorical column's level order: NAME=ref,other,... (repeatable)
    #[arg(long = "levels")]
    levels: Vec<String>,
    /// Residual randomizations averaged into the score correlation
    #[arg(long = "residual-draws")]
    residual_draws: Option<usize>,
    /// key=value defaults file applied before command-line flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads: 'auto' or a positive integer
    #[arg(long)]
    workers: Option<String>,
    /// Output directory (model.json, diagnostics CSVs, manifest.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PowerArgs {
    /// Fitted model JSON produced by `fit`
    #[arg(long)]
    model: PathBuf,
    /// Model term whose effect is tested
    #[arg(long)]
    term: String,
    /// Multiplicative per-level effect size applied to the listed taxa
    #[arg(long = "effect-size")]
    effect_size: f64,
    /// File of taxon names (one per line) whose abundance increases
    #[arg(long)]
    increasers: Option<PathBuf>,
    /// File of taxon names (one per line) whose abundance decreases
    #[arg(long)]
    decreasers: Option<PathBuf>,
    /// Hypothetical total sample size
    #[arg(long = "n")]
    n_total: usize,
    /// Estimator: critical (fast) or nested (reference)
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Alternative-hypothesis simulations
    #[arg(long)]
    nsim: Option<usize>,
    /// Null simulations (critical value, or per-dataset p-value resolution)
    #[arg(long)]
    nresamp: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads: 'auto' or a positive integer
    #[arg(long)]
    workers: Option<String>,
    /// key=value defaults file applied before command-line flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (power.json, statistic CSVs, manifest.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CurveArgs {
    /// Fitted model JSON produced by `fit`
    #[arg(long)]
    model: PathBuf,
    /// Model term whose effect is tested
    #[arg(long)]
    term: String,
    /// Comma-separated effect sizes
    #[arg(long = "effect-sizes", value_delimiter = ',', required = true)]
    effect_sizes: Vec<f64>,
    /// Comma-separated total sample sizes
    #[arg(long = "sample-sizes", value_delimiter = ',', required = true)]
    sample_sizes: Vec<usize>,
    /// File of taxon names (one per line) whose abundance increases
    #[arg(long)]
    increasers: Option<PathBuf>,
    /// File of taxon names (one per line) whose abundance decreases
    #[arg(long)]
    decreasers: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Alternative-hypothesis simulations per grid point
    #[arg(long)]
    nsim: Option<usize>,
    /// Null simulations per grid point
    #[arg(long)]
    nresamp: Option<usize>,
    /// Master seed; each grid point derives its own seed from it
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads: 'auto' or a positive integer
    #[arg(long)]
    workers: Option<String>,
    /// key=value defaults file applied before command-line flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (curve.csv, manifest.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Fitted model JSON produced by `fit`
    #[arg(long)]
    model: PathBuf,
    /// Seed for the randomized residuals (default: the model's fit seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the diagnostic tables
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Power(args) => run_power(args),
        Command::Curve(args) => run_curve(args),
        Command::Diagnose(args) => run_diagnose(args),
    }
}

/// Assemble the effective configuration: defaults, then config file, then flags.
fn effective_config(
    config: Option<&Path>,
    overrides: &[(&str, Option<String>)],
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.apply_pair(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write a simulation-statistic vector as CSV with a 1-based dataset index.
/// `p_values`, when given, adds a third column (nested method).
fn write_stats_csv(path: &Path, stats: &[f64], p_values: Option<&[f64]>) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    match p_values {
        Some(_) => text.push_str("dataset,stat,p_value\n"),
        None => text.push_str("dataset,stat\n"),
    }
    for (i, &t) in stats.iter().enumerate() {
        match p_values {
            Some(p) => writeln!(text, "{},{},{}", i + 1, t, p[i]).expect("in-memory write"),
            None => writeln!(text, "{},{}", i + 1, t).expect("in-memory write"),
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_taxa_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn run_fit(args: FitArgs) -> Result<()> {
    let cfg = effective_config(
        args.config.as_deref(),
        &[
            ("family", args.family.clone()),
            ("n_factors", args.n_factors.map(|v| v.to_string())),
            ("residual_draws", args.residual_draws.map(|v| v.to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
            ("workers", args.workers.clone()),
        ],
    )?;

    let counts = Arc::new(read_counts(&args.counts)?);
    let mut schema = DesignSchema::new();
    for spec in &args.levels {
        schema.declare_from_spec(spec)?;
    }
    let design = Arc::new(read_design(&args.design, &schema, Some(counts.n()))?);
    let x = Arc::new(build_model_matrix(&design, &args.terms)?);

    let fit = fit_manyglm(Arc::clone(&counts), x, cfg.family)?;
    let not_converged = fit.converged().iter().filter(|&&c| !c).count();
    if not_converged > 0 {
        eprintln!(
            "warning: {not_converged} of {} per-taxon fits did not converge",
            fit.n_taxa()
        );
    }

    let opts = CopulaOptions {
        n_randomizations: cfg.residual_draws,
        ..CopulaOptions::default()
    };
    let mut rng = stream(cfg.seed, Phase::PilotResiduals, 0, 0);
    let model = fit_copula(&fit, &counts, cfg.n_factors, &opts, &mut rng)?;
    print_warnings(&model.estimation().warnings);

    ensure_out_dir(&args.out)?;
    let model_path = args.out.join("model.json");
    save_model(&model_path, &model, cfg.seed)?;

    let mut diag_rng = stream(cfg.seed, Phase::Diagnostics, 0, 0);
    let tables = diagnostics(&fit, &counts, &mut diag_rng)?;
    write_mean_variance_csv(&tables.mean_variance, &args.out.join("mean_variance.csv"))?;
    write_residual_fit_csv(&tables.residual_fit, &args.out.join("residual_fit.csv"))?;

    let mut manifest = RunManifest::new("fit", cfg.seed);
    manifest.add_input(&args.counts)?;
    manifest.add_input(&args.design)?;
    if let Some(cfg_path) = &args.config {
        manifest.add_input(cfg_path)?;
    }
    manifest.set("family", cfg.family.label());
    manifest.set("n_factors", cfg.n_factors);
    manifest.set("residual_draws", cfg.residual_draws);
    manifest.set("terms", args.terms.join(","));
    manifest.set("workers", cfg.workers.label());
    manifest.set("n_samples", counts.n());
    manifest.set("n_taxa", counts.p());
    manifest.write(&args.out.join("manifest.json"))?;

    println!(
        "fitted {} taxa x {} samples ({}, {} factor{})",
        counts.p(),
        counts.n(),
        cfg.family.label(),
        model.n_factors(),
        if model.n_factors() == 1 { "" } else { "s" }
    );
    println!(
        "correlation log-likelihood {:.4} after {} iterations",
        model.estimation().loglik,
        model.estimation().iterations
    );
    println!("model written to {}", model_path.display());
    Ok(())
}

/// Deterministic power report; the statistic vectors live in sibling CSVs and
/// wall time in the manifest and on stdout.
#[derive(Serialize)]
struct PowerReport<'a> {
    method: &'a str,
    term: &'a str,
    effect_size: f64,
    n_total: usize,
    alpha: f64,
    n_power: usize,
    n_resamp: usize,
    seed: u64,
    power: f64,
    mc_se: f64,
    critical_value: Option<f64>,
    fit_count: u64,
    stat_count: u64,
    warnings: &'a [String],
}

fn write_power_report(
    path: &Path,
    result: &PowerResult,
    term: &str,
    effect_size: f64,
    settings: &PowerSettings,
) -> Result<()> {
    let report = PowerReport {
        method: result.method.label(),
        term,
        effect_size,
        n_total: settings.n_total,
        alpha: settings.alpha,
        n_power: settings.n_power,
        n_resamp: settings.n_resamp,
        seed: settings.seed,
        power: result.power,
        mc_se: result.mc_se,
        critical_value: result.critical_value,
        fit_count: result.fit_count,
        stat_count: result.stat_count,
        warnings: &result.warnings,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::numeric(format!("could not serialize report: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct EffectInputs {
    spec: EffectSpec,
    increaser_file: Option<PathBuf>,
    decreaser_file: Option<PathBuf>,
}

fn effect_inputs(
    term: &str,
    effect_size: f64,
    increasers: Option<&Path>,
    decreasers: Option<&Path>,
) -> Result<EffectInputs> {
    let inc = increasers.map(read_taxa_list).transpose()?.unwrap_or_default();
    let dec = decreasers.map(read_taxa_list).transpose()?.unwrap_or_default();
    if inc.is_empty() && dec.is_empty() {
        return Err(Error::validation(
            "no effect taxa: provide --increasers and/or --decreasers files with at least one taxon",
        ));
    }
    Ok(EffectInputs {
        spec: EffectSpec {
            term: term.to_string(),
            effect_size,
            increasers: inc,
            decreasers: dec,
        },
        increaser_file: increasers.map(Path::to_path_buf),
        decreaser_file: decreasers.map(Path::to_path_buf),
    })
}

fn run_power(args: PowerArgs) -> Result<()> {
    let cfg = effective_config(
        args.config.as_deref(),
        &[
            ("alpha", args.alpha.map(|v| v.to_string())),
            ("n_power", args.nsim.map(|v| v.to_string())),
            ("n_resamp", args.nresamp.map(|v| v.to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
            ("workers", args.workers.clone()),
        ],
    )?;
    let method = match &args.method {
        Some(m) => PowerMethod::parse(m)?,
        None => PowerMethod::Critical,
    };

    let (model, _fit_seed) = load_model(&args.model)?;
    let effect = effect_inputs(
        &args.term,
        args.effect_size,
        args.increasers.as_deref(),
        args.decreasers.as_deref(),
    )?;
    let coeffs = effect_alt(model.margins(), &effect.spec)?;
    let settings = PowerSettings {
        n_total: args.n_total,
        alpha: cfg.alpha,
        n_power: cfg.n_power,
        n_resamp: cfg.n_resamp,
        seed: cfg.seed,
        workers: cfg.workers,
    };
    let result = match method {
        PowerMethod::Critical => powersim_critical(&model, &coeffs, &args.term, &settings)?,
        PowerMethod::Nested => powersim_nested(&model, &coeffs, &args.term, &settings)?,
    };
    print_warnings(&result.warnings);

    ensure_out_dir(&args.out)?;
    write_power_report(
        &args.out.join("power.json"),
        &result,
        &args.term,
        args.effect_size,
        &settings,
    )?;
    write_stats_csv(&args.out.join("null_stats.csv"), &result.null_stats, None)?;
    let p_values = match method {
        PowerMethod::Nested => Some(result.p_values.as_slice()),
        PowerMethod::Critical => None,
    };
    write_stats_csv(&args.out.join("alt_stats.csv"), &result.alt_stats, p_values)?;

    let mut manifest = RunManifest::new("power", settings.seed);
    manifest.add_input(&args.model)?;
    if let Some(p) = &effect.increaser_file {
        manifest.add_input(p)?;
    }
    if let Some(p) = &effect.decreaser_file {
        manifest.add_input(p)?;
    }
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }
    manifest.set("method", method.label());
    manifest.set("term", &args.term);
    manifest.set("effect_size", args.effect_size);
    manifest.set("n_total", settings.n_total);
    manifest.set("alpha", settings.alpha);
    manifest.set("n_power", settings.n_power);
    manifest.set("n_resamp", settings.n_resamp);
    manifest.set("workers", settings.workers.label());
    manifest.set("fit_count", result.fit_count);
    manifest.set("wall_time_seconds", format!("{:.3}", result.wall_time_seconds));
    manifest.write(&args.out.join("manifest.json"))?;

    println!(
        "power {:.4} (mc se {:.4}), method {}, N {}, alpha {}",
        result.power,
        result.mc_se,
        method.label(),
        settings.n_total,
        settings.alpha
    );
    if let Some(c) = result.critical_value {
        println!("critical value {c:.4} from {} null simulations", settings.n_resamp);
    }
    println!(
        "{} model fits in {:.1} s; report written to {}",
        result.fit_count,
        result.wall_time_seconds,
        args.out.join("power.json").display()
    );
    Ok(())
}

fn run_curve(args: CurveArgs) -> Result<()> {
    let cfg = effective_config(
        args.config.as_deref(),
        &[
            ("alpha", args.alpha.map(|v| v.to_string())),
            ("n_power", args.nsim.map(|v| v.to_string())),
            ("n_resamp", args.nresamp.map(|v| v.to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
            ("workers", args.workers.clone()),
        ],
    )?;

    let (model, _fit_seed) = load_model(&args.model)?;
    let effect = effect_inputs(
        &args.term,
        1.0, // overridden per grid point
        args.increasers.as_deref(),
        args.decreasers.as_deref(),
    )?;
    let mut grid = Vec::new();
    for &rho in &args.effect_sizes {
        for &n in &args.sample_sizes {
            grid.push((rho, n));
        }
    }
    let settings = PowerSettings {
        n_total: 0, // overridden per grid point
        alpha: cfg.alpha,
        n_power: cfg.n_power,
        n_resamp: cfg.n_resamp,
        seed: cfg.seed,
        workers: cfg.workers,
    };
    let rows = power_curve(&model, &effect.spec, &grid, &settings)?;
    ensure_out_dir(&args.out)?;
    let csv_path = args.out.join("curve.csv");
    write_power_curve_csv(&rows, &csv_path)?;

    let mut ok = 0usize;
    for row in &rows {
        match &row.outcome {
            Ok(res) => {
                ok += 1;
                println!(
                    "rho {} N {} -> power {:.4} (mc se {:.4})",
                    row.effect_size, row.n_total, res.power, res.mc_se
                );
            }
            Err(msg) => {
                eprintln!("rho {} N {} -> failed: {msg}", row.effect_size, row.n_total);
            }
        }
    }

    let mut manifest = RunManifest::new("curve", cfg.seed);
    manifest.add_input(&args.model)?;
    if let Some(p) = &effect.increaser_file {
        manifest.add_input(p)?;
    }
    if let Some(p) = &effect.decreaser_file {
        manifest.add_input(p)?;
    }
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }
    manifest.set("term", &args.term);
    manifest.set(
        "effect_sizes",
        args.effect_sizes
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.set(
        "sample_sizes",
        args.sample_sizes
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.set("alpha", cfg.alpha);
    manifest.set("n_power", cfg.n_power);
    manifest.set("n_resamp", cfg.n_resamp);
    manifest.set("workers", cfg.workers.label());
    manifest.set("points_total", rows.len());
    manifest.set("points_failed", rows.len() - ok);
    manifest.write(&args.out.join("manifest.json"))?;

    println!("curve written to {}", csv_path.display());
    if ok == 0 {
        let first = rows
            .iter()
            .find_map(|r| r.outcome.as_ref().err())
            .cloned()
            .unwrap_or_default();
        return Err(Error::numeric(format!(
            "all {} power-curve points failed; first error: {first}",
            rows.len()
        )));
    }
    Ok(())
}

fn run_diagnose(args: DiagnoseArgs) -> Result<()> {
    let (model, fit_seed) = load_model(&args.model)?;
    let seed = args.seed.unwrap_or(fit_seed);
    ensure_out_dir(&args.out)?;

    let fit = model.margins();
    let data = Arc::clone(fit.data());
    let mut rng = stream(seed, Phase::Diagnostics, 0, 0);
    let tables = diagnostics(fit, &data, &mut rng)?;

    let mv_path = args.out.join("mean_variance.csv");
    let rf_path = args.out.join("residual_fit.csv");
    write_mean_variance_csv(&tables.mean_variance, &mv_path)?;
    write_residual_fit_csv(&tables.residual_fit, &rf_path)?;

    let mut manifest = RunManifest::new("diagnose", seed);
    manifest.add_input(&args.model)?;
    manifest.set("n_samples", data.n());
    manifest.set("n_taxa", data.p());
    manifest.write(&args.out.join("manifest.json"))?;

    println!(
        "wrote {} and {}",
        mv_path.display(),
        rf_path.display()
    );
    Ok(())
}
