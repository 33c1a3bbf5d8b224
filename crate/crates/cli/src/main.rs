//! `siren` — adaptive single-index kernel regression from the command
//! line: simulation experiments, estimation on CSV data, oracle
//! bandwidths, rate tables, and threshold calibration.

use clap::{Parser, Subcommand};
use siren_core::constants::{bandwidth_scales, derive_constants, Mode};
use siren_core::density::{kde_truncated, plugin_constants, plugin_threshold_offset};
use siren_core::estimators::Sample;
use siren_core::harness::{self, ExperimentConfig, LinkSpec};
use siren_core::oracle::oracle_bandwidth;
use siren_core::rates::{global_rate, pointwise_rate, RateQuery};
use siren_core::selection::SelectionContext;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "siren",
    version,
    about = "Adaptive single-index kernel regression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the Monte Carlo risk experiment described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the base seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the mode: `theory` or `calibrated:<kappa>`.
        #[arg(long)]
        mode: Option<String>,
        /// Worker cap (also capped by SIREN_THREADS).
        #[arg(long)]
        threads: Option<usize>,
        /// Config override `path.to.key=value`; repeatable, beats the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Estimate the regression at given points from a data CSV.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `known` (use the configured design density) or `unknown`
        /// (plug in a kernel estimate from --aux-data).
        #[arg(long, default_value = "known")]
        design_density: String,
        #[arg(long)]
        aux_data: Option<PathBuf>,
        /// Smoothness order driving the plug-in bandwidth and accuracy.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Oracle bandwidth of a link at a point.
    OracleBandwidth {
        /// Link spec: `constant:<c>`, `linear:<a>`, `sqrt_abs`, or
        /// `bump:beta=B,L=L[,scale=S]`.
        #[arg(long)]
        link: String,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        y: f64,
        /// Noise tail exponent entering the minimal bandwidth.
        #[arg(long, default_value_t = 2.0)]
        omega: f64,
        /// Kernel: `triangular` or `orthopoly:<order>`.
        #[arg(long, default_value = "triangular")]
        kernel: String,
    },
    /// Closed-form adaptive and minimax rates.
    Rates {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        beta: f64,
        #[arg(long = "L")]
        l: f64,
        /// Integrability index, a number or `inf`.
        #[arg(long)]
        p: String,
        #[arg(long)]
        r: f64,
    },
    /// Sweep the threshold level against the null experiment and persist
    /// the smallest admissible one into the config.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Where to write the updated config; defaults to in place.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

enum CliError {
    User(String),
    Internal(String),
}

impl From<siren_core::Error> for CliError {
    fn from(e: siren_core::Error) -> Self {
        match e {
            siren_core::Error::InvalidArgument(_) | siren_core::Error::Csv { .. } => {
                CliError::User(e.to_string())
            }
            siren_core::Error::DensityViolation { .. } => CliError::Internal(e.to_string()),
        }
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn main() -> ExitCode {
    // die quietly when the downstream pipe closes
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Simulate {
            config,
            out,
            seed,
            mode,
            threads,
            set,
        } => {
            let cfg = load_config(&config, &set, seed, mode.as_deref())?;
            cfg.validate()?;
            let pool = harness::build_pool(threads)?;
            let rows = pool.install(|| harness::run_experiment(&cfg))?;
            let mut text = String::from("n,risk,std_error,mean_h_hat,mean_angle_err\n");
            for r in &rows {
                writeln!(
                    text,
                    "{},{},{},{},{}",
                    r.n, r.risk, r.std_error, r.mean_h_hat, r.mean_angle_err
                )
                .expect("string write");
            }
            std::fs::write(&out, text).map_err(user)?;
            if rows.len() >= 3 {
                let fit = harness::rate_fit(&rows)?;
                println!(
                    "rate fit: slope {} intercept {} std_err {}",
                    fit.slope, fit.intercept, fit.std_err
                );
            }
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Cmd::Estimate {
            data,
            config,
            points,
            out,
            design_density,
            aux_data,
            gamma,
            seed,
            mode,
            threads,
            set,
        } => {
            let cfg = load_config(&config, &set, seed, mode.as_deref())?;
            cfg.validate_procedure()?;
            let sample = read_sample(&data)?;
            let pts = read_points(&points)?;
            let kernel = cfg.kernel.build()?;
            let envelope = cfg.noise.envelope()?;
            let n = sample.n() as u64;
            let pool = harness::build_pool(threads)?;

            let results = match design_density.as_str() {
                "known" => {
                    let density = cfg.design.density()?;
                    let dc = derive_constants(n, &envelope, &cfg.procedure_params()?)?;
                    let ctx = SelectionContext::new(&sample, &density, &kernel, dc, cfg.n_theta)?;
                    pool.install(|| ctx.estimate_on_grid(&pts))?
                }
                "unknown" => {
                    let aux_path = aux_data
                        .ok_or_else(|| user("--design-density unknown requires --aux-data"))?;
                    let gamma =
                        gamma.ok_or_else(|| user("--design-density unknown requires --gamma"))?;
                    let aux = read_sample(&aux_path)?;
                    let de = kde_truncated(&aux, n, gamma, &kernel)?;
                    if de.truncation_active {
                        eprintln!(
                            "warning: plug-in density touched its truncation floor \
                             (min {} <= b_n {}); estimates may be unreliable",
                            de.g_hat_min, de.b_n
                        );
                    }
                    let params = cfg.procedure_params()?;
                    let dc = plugin_constants(n, &envelope, &params, &de)?;
                    let density = de.as_design_density();
                    // the additive threshold term uses the preliminary
                    // statistic computed under the plug-in weights
                    let base_ctx =
                        SelectionContext::new(&sample, &density, &kernel, dc, cfg.n_theta)?;
                    let offset = plugin_threshold_offset(&de, kernel.l1_norm, base_ctx.f_hat_inf);
                    let ctx = SelectionContext::with_threshold_offset(
                        &sample,
                        &density,
                        &kernel,
                        dc,
                        cfg.n_theta,
                        offset,
                    )?;
                    pool.install(|| ctx.estimate_on_grid(&pts))?
                }
                other => {
                    return Err(user(format!(
                        "--design-density must be `known` or `unknown`, got `{other}`"
                    )))
                }
            };

            let mut text =
                String::from("t1,t2,estimate,theta_hat_angle,h_hat,objective,r1,r2,th\n");
            for (t, res) in pts.iter().zip(&results) {
                writeln!(
                    text,
                    "{},{},{},{},{},{},{},{},{}",
                    t[0],
                    t[1],
                    res.estimate,
                    res.theta_hat.angle(),
                    res.h_hat,
                    res.objective,
                    res.r1,
                    res.r2,
                    res.th
                )
                .expect("string write");
            }
            std::fs::write(&out, text).map_err(user)?;
            println!("wrote {} estimates to {}", results.len(), out.display());
            Ok(())
        }
        Cmd::OracleBandwidth {
            link,
            n,
            y,
            omega,
            kernel,
        } => {
            let link = parse_link(&link)?.build()?;
            let kernel = parse_kernel(&kernel)?.build()?;
            let (h_min, _) = bandwidth_scales(n, omega)?;
            let report = oracle_bandwidth(&link, &kernel, n, y, h_min)?;
            println!("h_star = {}", report.h_star);
            println!("delta_star = {}", report.delta_star_at_h_star);
            println!("criterion_slack = {}", report.criterion_slack);
            if report.at_lower_flag {
                println!(
                    "warning: criterion violated even at h_min; n is below its minimum for this link"
                );
            }
            Ok(())
        }
        Cmd::Rates { n, beta, l, p, r } => {
            let p = if p == "inf" {
                f64::INFINITY
            } else {
                p.parse::<f64>()
                    .map_err(|_| user("p must be a number or `inf`"))?
            };
            let q = RateQuery { n, beta, l, p, r };
            let psi = pointwise_rate(&q)?;
            let g = global_rate(&q)?;
            println!("psi = {psi}");
            println!("phi_upper = {}", g.upper);
            println!("phi_lower = {}", g.lower);
            println!("regime = {}", g.regime);
            Ok(())
        }
        Cmd::Calibrate {
            config,
            out,
            threads,
            set,
        } => {
            let cfg = load_config(&config, &set, None, None)?;
            cfg.validate()?;
            let pool = harness::build_pool(threads)?;
            let report = pool.install(|| harness::calibrate(&cfg))?;
            println!("kappa,frac_h_hat_below_one");
            for (kappa, frac) in &report.table {
                println!("{kappa},{frac}");
            }
            match report.kappa {
                Some(kappa) => {
                    println!(
                        "chosen kappa = {kappa} (n = {}, reps = {})",
                        report.n, report.reps
                    );
                    let target = out.unwrap_or_else(|| config.clone());
                    persist_kappa(&config, &target, kappa)?;
                    println!("persisted to {}", target.display());
                    Ok(())
                }
                None => Err(user(
                    "no kappa in the sweep met the 5% criterion; see the table above",
                )),
            }
        }
    }
}

fn read_sample(path: &Path) -> Result<Sample, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    Ok(Sample::from_csv_str(&text, &path.display().to_string())?)
}

fn read_points(path: &Path) -> Result<Vec<[f64; 2]>, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| user(format!("{}: empty file", path.display())))?
        .1;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["t1", "t2"] {
        return Err(user(format!(
            "{}:1: expected header `t1,t2`",
            path.display()
        )));
    }
    let mut pts = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(user(format!(
                "{}:{}: expected 2 fields, found {}",
                path.display(),
                idx + 1,
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 2];
        for (j, f) in fields.iter().enumerate() {
            vals[j] = f.parse().map_err(|_| {
                user(format!(
                    "{}:{}: cannot parse `{f}` as a number",
                    path.display(),
                    idx + 1
                ))
            })?;
            if !vals[j].is_finite() {
                return Err(user(format!(
                    "{}:{}: non-finite value `{f}`",
                    path.display(),
                    idx + 1
                )));
            }
        }
        pts.push(vals);
    }
    Ok(pts)
}

/// Parse the config, apply `--set` overrides and the typed flag
/// overrides, then deserialize.
fn load_config(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
    mode: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| user(format!("{}: {e}", path.display())))?;
    let mut value = toml::Value::Table(table);
    for s in sets {
        apply_override(&mut value, s)?;
    }
    let mut cfg: ExperimentConfig = value
        .try_into()
        .map_err(|e| user(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        cfg.base_seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = parse_mode(mode)?;
    }
    Ok(cfg)
}

fn apply_override(value: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| user(format!("override `{spec}` is not KEY=VALUE")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| user(format!("override path `{path}`: `{seg}` is not a table")))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("override paths have at least one segment")
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    if s == "theory" {
        return Ok(Mode::Theory);
    }
    if let Some(rest) = s.strip_prefix("calibrated:") {
        let kappa: f64 = rest
            .parse()
            .map_err(|_| user(format!("bad kappa in mode `{s}`")))?;
        return Ok(Mode::Calibrated { kappa });
    }
    Err(user(format!(
        "mode must be `theory` or `calibrated:<kappa>`, got `{s}`"
    )))
}

fn parse_kernel(s: &str) -> Result<siren_core::kernels::KernelSpec, CliError> {
    use siren_core::kernels::KernelSpec;
    if s == "triangular" {
        return Ok(KernelSpec::Triangular);
    }
    if let Some(rest) = s.strip_prefix("orthopoly:") {
        let order: u32 = rest
            .parse()
            .map_err(|_| user(format!("bad kernel order in `{s}`")))?;
        return Ok(KernelSpec::Orthopoly { order });
    }
    Err(user(format!(
        "kernel must be `triangular` or `orthopoly:<order>`, got `{s}`"
    )))
}

fn parse_link(s: &str) -> Result<LinkSpec, CliError> {
    if s == "sqrt_abs" {
        return Ok(LinkSpec::SqrtAbs);
    }
    if let Some(rest) = s.strip_prefix("constant:") {
        let value: f64 = rest
            .parse()
            .map_err(|_| user(format!("bad constant in `{s}`")))?;
        return Ok(LinkSpec::Constant { value });
    }
    if let Some(rest) = s.strip_prefix("linear:") {
        let slope: f64 = rest
            .parse()
            .map_err(|_| user(format!("bad slope in `{s}`")))?;
        return Ok(LinkSpec::Linear { slope });
    }
    if let Some(rest) = s.strip_prefix("bump:") {
        let mut beta = None;
        let mut l = None;
        let mut scale = 1.0;
        for part in rest.split(',') {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| user(format!("bad bump parameter `{part}`")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| user(format!("bad number in bump parameter `{part}`")))?;
            match key {
                "beta" => beta = Some(val),
                "L" => l = Some(val),
                "scale" => scale = val,
                other => return Err(user(format!("unknown bump parameter `{other}`"))),
            }
        }
        return Ok(LinkSpec::Bump {
            beta: beta.ok_or_else(|| user("bump link needs beta"))?,
            l: l.ok_or_else(|| user("bump link needs L"))?,
            scale,
        });
    }
    Err(user(format!(
        "link must be `constant:<c>`, `linear:<a>`, `sqrt_abs` or `bump:beta=..,L=..[,scale=..]`, got `{s}`"
    )))
}

/// Rewrite the mode in a config file, preserving everything else.
fn persist_kappa(source: &Path, target: &Path, kappa: f64) -> Result<(), CliError> {
    let text =
        std::fs::read_to_string(source).map_err(|e| user(format!("{}: {e}", source.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| user(format!("{}: {e}", source.display())))?;
    let mut calibrated = toml::Table::new();
    let mut inner = toml::Table::new();
    inner.insert("kappa".into(), toml::Value::Float(kappa));
    calibrated.insert("calibrated".into(), toml::Value::Table(inner));
    table.insert("mode".into(), toml::Value::Table(calibrated));
    let rendered = toml::to_string_pretty(&table).map_err(user)?;
    std::fs::write(target, rendered).map_err(user)?;
    Ok(())
}
