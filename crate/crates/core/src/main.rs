use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use singular_sde::config::{
    load_config, parse_config, validate, ExperimentConfig, ValidatedConfig,
};
use singular_sde::io;
use singular_sde::mollify::mollify;
use singular_sde::pipeline::{
    self, base_envelope, cross_level_stage, decomposition_stage, density_stage, level_stage,
    transform_stage, write_cross_level, write_density, write_json, write_level, zvonkin_stage,
    CheckStatus, LevelView, PipelineOptions,
};
use singular_sde::simulation::level_scale;
use singular_sde::Error;

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "SINGULAR_SDE_THREADS";

const EXIT_PASS: u8 = 0;
const EXIT_CERTIFICATE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(version, about = "Singular-drift SDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// Named preset.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML experiment file (may start from `preset = "..."`).
    #[arg(long, alias = "coeffs")]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mollification levels, `n0..n1` (inclusive) or a single level.
    #[arg(long)]
    levels: Option<String>,
    /// Half-width `L` of the spatial box.
    #[arg(long = "box")]
    half_width: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and list every violated assumption.
    Validate {
        #[command(flatten)]
        source: Source,
    },
    /// Split the total drift at the configured exponents.
    Decompose {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the corrector and certify the transform.
    Zvonkin {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the mollified levels and write ensembles and diagnostics.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Densities, Fokker-Planck residuals and duality checks from ensembles
    /// written by `simulate`.
    Density {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        overrides: Overrides,
        /// Directory holding `ensemble_level_<n>.bin`.
        #[arg(long)]
        ensembles: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the binary ensemble of every level.
        #[arg(long)]
        keep_ensembles: bool,
        #[arg(long)]
        quiet: bool,
    },
}

enum Failure {
    Config(Vec<String>),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Runtime(e)
    }
}

fn parse_levels(s: &str) -> Result<Vec<usize>, String> {
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad level {t:?}: {e}"))
    };
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
            if b < a {
                return Err(format!("empty level range {s}"));
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![parse(s)?]),
    }
}

fn load(source: &Source, overrides: &Overrides) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&source.preset, &source.config) {
        (Some(name), None) => parse_config(&format!("preset = {name:?}\n")),
        (None, Some(path)) => load_config(path),
        _ => {
            return Err(Failure::Config(vec![
                "give exactly one of --preset or --config".into(),
            ]))
        }
    }
    .map_err(|e| Failure::Config(vec![e.to_string()]))?;
    if let Some(n) = overrides.n_paths {
        cfg.monte_carlo.n_paths = n;
    }
    if let Some(dt) = overrides.dt {
        cfg.monte_carlo.dt = dt;
    }
    if let Some(s) = overrides.seed {
        cfg.master_seed = s;
    }
    if let Some(l) = overrides.half_width {
        cfg.grid.half_width = l;
    }
    if let Some(spec) = &overrides.levels {
        let levels = parse_levels(spec).map_err(|e| Failure::Config(vec![e]))?;
        cfg.diagnostics.stable_levels.retain(|n| levels.contains(n));
        if cfg.diagnostics.stable_levels.is_empty() {
            cfg.diagnostics.stable_levels = levels.clone();
        }
        cfg.mollification.levels = levels;
    }
    Ok(cfg)
}

fn validated(source: &Source, overrides: &Overrides) -> Result<ValidatedConfig, Failure> {
    let cfg = load(source, overrides)?;
    validate(&cfg).map_err(|errs| Failure::Config(errs.iter().map(|e| e.to_string()).collect()))
}

fn out_dir(v: &ValidatedConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| PathBuf::from(&v.config.output_dir))
}

fn verdict(statuses: &[CheckStatus]) -> u8 {
    for s in statuses {
        println!("{:<32} {}", s.name, if s.passed { "PASS" } else { "FAIL" });
    }
    if statuses.iter().all(|s| s.passed) {
        EXIT_PASS
    } else {
        EXIT_CERTIFICATE
    }
}

fn status(name: &str, passed: bool) -> CheckStatus {
    CheckStatus {
        name: name.into(),
        passed,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Validate { source } => {
            let v = validated(&source, &Overrides::default())?;
            println!(
                "{}: valid (d = {}, epsilon = {})",
                v.config.name,
                v.grid.dim(),
                v.epsilon
            );
            Ok(EXIT_PASS)
        }
        Command::Decompose { source, out } => {
            let v = validated(&source, &Overrides::default())?;
            let dir = out_dir(&v, &out);
            ensure_dir(&dir)?;
            match decomposition_stage(&v)? {
                Some(cert) => {
                    write_json(&dir, "decomposition.json", &cert)?;
                    Ok(verdict(&[status("decomposition", cert.passed)]))
                }
                None => {
                    println!("no exponents configured; nothing to split");
                    Ok(EXIT_PASS)
                }
            }
        }
        Command::Zvonkin { source, out } => {
            let v = validated(&source, &Overrides::default())?;
            let dir = out_dir(&v, &out);
            ensure_dir(&dir)?;
            let z = zvonkin_stage(&v)?;
            write_json(&dir, "zvonkin.json", &z.report)?;
            write_json(&dir, "transform_properties.json", &z.properties)?;
            let mut statuses = vec![
                status("zvonkin-calibration", z.report.passed),
                status("transform-properties", z.properties.passed),
            ];
            if z.properties.passed {
                let t = transform_stage(&v, &z)?;
                write_json(&dir, "transform.json", &t)?;
                statuses.push(status("transformed-coefficients", t.envelope.passed));
            }
            Ok(verdict(&statuses))
        }
        Command::Simulate {
            source,
            overrides,
            out,
        } => {
            let v = validated(&source, &overrides)?;
            let dir = out_dir(&v, &out);
            ensure_dir(&dir)?;
            let z = zvonkin_stage(&v)?;
            let h = base_envelope(&v, &z)?;
            let mut runs = Vec::new();
            let mut statuses = Vec::new();
            for &n in &v.config.mollification.levels {
                let l = level_stage(&v, &z.grid, &h.h, n)?;
                write_level(&dir, &l, true)?;
                statuses.push(status(
                    &format!("mollified-sequence[{n}]"),
                    l.report.mollification.passed,
                ));
                statuses.push(status(
                    &format!("x-path-bound[{n}]"),
                    l.report.path_bound.fraction_within >= pipeline::PATH_BOUND_FRACTION,
                ));
                if l.report.box_warning {
                    eprintln!(
                        "warning: level {n} exit fraction {} exceeds {}",
                        l.report.exit_fraction,
                        pipeline::EXIT_WARNING_FRACTION
                    );
                }
                runs.push(l);
            }
            if runs.len() >= 2 {
                write_cross_level(&dir, &cross_level_stage(&v, &runs)?)?;
            }
            Ok(verdict(&statuses))
        }
        Command::Density {
            source,
            overrides,
            ensembles,
            out,
        } => {
            let v = validated(&source, &overrides)?;
            let dir = out_dir(&v, &out);
            ensure_dir(&dir)?;
            let mut loaded = Vec::new();
            for &n in &v.config.mollification.levels {
                let ens = io::read_ensemble(&ensembles.join(format!("ensemble_level_{n}.bin")))?;
                let delta = level_scale(v.config.mollification.delta0, n);
                let c = &v.coefficients;
                let set = c.with_fields(
                    mollify(&c.b1, delta)?,
                    mollify(&c.b2, delta)?,
                    mollify(&c.sigma, delta)?,
                )?;
                loaded.push((n, ens, set));
            }
            let views: Vec<LevelView<'_>> = loaded
                .iter()
                .map(|(n, e, s)| LevelView {
                    level: *n,
                    ensemble: e,
                    coefficients: s,
                })
                .collect();
            let d = density_stage(&v, &views)?;
            write_density(&dir, &d)?;
            let mut statuses = vec![
                status("density-mixed-norm", d.report.mixed_norm.passed),
                status("mass-accounting", d.report.mass_accounting_error <= 1e-12),
            ];
            if let Some(du) = &d.report.duality {
                statuses.push(status("duality-pairing", du.passed));
            }
            println!(
                "fokker-planck max residual       {:e}",
                d.report.fokker_planck.max_residual
            );
            Ok(verdict(&statuses))
        }
        Command::Pipeline {
            source,
            overrides,
            out,
            keep_ensembles,
            quiet,
        } => {
            let v = validated(&source, &overrides)?;
            let opts = PipelineOptions {
                output_dir: Some(out_dir(&v, &out)),
                write_ensembles: keep_ensembles,
                verbose: !quiet,
            };
            let report = pipeline::run_pipeline(&v, &opts)?;
            for w in &report.summary.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(stage) = &report.summary.aborted_after {
                eprintln!("stopped after stage {stage}: a certificate failed");
            }
            Ok(verdict(&report.summary.certificates))
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(errs)) => {
            for e in errs {
                eprintln!("config error: {e}");
            }
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
