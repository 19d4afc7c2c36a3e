//! Config-driven commands behind the thin binary: assembly, ground-state
//! solving, simulation, gauge estimation and the verification suite.
//!
//! Every output file starts with a header comment carrying the tool
//! version and the digest of the effective config, and all floats are
//! printed with 17 significant digits, so identical (config, seed) pairs
//! produce byte-identical files.
//!
//! Exit codes: 0 success / all checks pass, 1 config error, 2 numerical
//! failure, 3 check failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forms::{assumption_a_radius, domain_principal_value, FormSystem};

use crate::montecarlo::{Domain, PathMode, Simulator};
use crate::perturbations::li_decompose;
use crate::verify::{calibrate_critical, g17, CheckReport, VerifySession};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Path-count divisor, step-size multiplier and horizon for the
/// long-horizon killed-Green estimator (its published bias tracks these).
const GREEN_PATH_DIVISOR: usize = 4;
const GREEN_DT_FACTOR: f64 = 5.0;
const GREEN_HORIZON: f64 = 512.0;

fn header(cfg: &RunConfig) -> String {
    format!("# stable-schrodinger {TOOL_VERSION} config={}", cfg.digest())
}

fn write_csv(path: &Path, cfg: &RunConfig, columns: &str, rows: &[String]) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{}", header(cfg)).unwrap();
    writeln!(text, "{columns}").unwrap();
    for row in rows {
        writeln!(text, "{row}").unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Assemble the form system, write the versioned binary cache and a
/// summary row (the principal value is not computed at this stage).
pub fn cmd_assemble(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    ensure_out(out)?;
    let sys = assemble_system(cfg)?;
    let cache = out.join("formsys.bin");
    sys.save(&cache)?;
    let h = sys.grid().spacing();
    let rho_plus_mass: f64 = sys.rho_plus().iter().map(|r| r * h).sum();
    let rho_minus_mass: f64 = sys.rho_minus().iter().map(|r| r * h).sum();
    let row = format!(
        "{},{},{},{},{},{},{},{}",
        sys.grid().len(),
        g17(sys.grid().half_width()),
        g17(sys.spec().alpha()),
        g17(sys.spec().mass()),
        g17(sys.spec().intensity_multiplier()),
        g17(rho_plus_mass),
        g17(rho_minus_mass),
        cfg.assembly_digest(),
    );
    write_csv(
        &out.join("assemble_summary.csv"),
        cfg,
        "n,half_width,alpha,mass,intensity_multiplier,rho_plus_mass,rho_minus_mass,assembly_digest",
        &[row],
    )?;
    if !quiet {
        println!("assembled n = {} into {}", sys.grid().len(), cache.display());
    }
    Ok(())
}

fn assemble_system(cfg: &RunConfig) -> Result<FormSystem> {
    FormSystem::assemble(
        &cfg.process_spec()?,
        &cfg.grid()?,
        &cfg.local_measure()?,
        &cfg.nonlocal_perturbation()?,
    )
}

/// Load the cache from the output directory when present, otherwise
/// assemble from the config.
fn system_from_cache_or_config(cfg: &RunConfig, out: &Path) -> Result<FormSystem> {
    let cache = out.join("formsys.bin");
    if cache.exists() {
        FormSystem::load(&cache)
    } else {
        assemble_system(cfg)
    }
}

/// Solve the ground state; write the nodal CSV and the manifest row
/// (principal value, residual, killed-potential sup, restricted principal
/// value over the gauge domain, and the lower-bound margin).
pub fn cmd_groundstate(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    ensure_out(out)?;
    let sys = system_from_cache_or_config(cfg, out)?;
    let gs = sys.ground_state()?;
    let grid = sys.grid();
    let rows: Vec<String> = (0..grid.len())
        .map(|i| format!("{},{},{}", i, g17(grid.node(i)), g17(gs.h[i])))
        .collect();
    write_csv(&out.join("ground_state.csv"), cfg, "index,x,h", &rows)?;

    let sup = sys.killed_potential_sup()?;
    let (ga, gb) = cfg.verify.gauge_domain;
    let d_idx: Vec<usize> = (0..grid.len())
        .filter(|&i| grid.node(i) > ga && grid.node(i) < gb)
        .collect();
    let theta = domain_principal_value(&d_idx, sys.a_y(), sys.b_rho(), gs.lambda)?;
    let bound_ok = gs.lambda * sup >= 1.0 - 1e-8;
    let row = format!(
        "{},{},{},{},{}",
        g17(gs.lambda),
        g17(gs.residual),
        g17(sup),
        g17(theta),
        bound_ok
    );
    write_csv(
        &out.join("groundstate_manifest.csv"),
        cfg,
        "lambda,residual,killed_potential_sup,theta_gauge_domain,lower_bound_ok",
        &[row],
    )?;
    if !quiet {
        println!(
            "lambda = {} (residual {}, bound margin {})",
            g17(gs.lambda),
            g17(gs.residual),
            g17(gs.lambda * sup - 1.0)
        );
    }
    Ok(())
}

fn build_simulator(cfg: &RunConfig, sys: &FormSystem) -> Result<Simulator> {
    let dec = li_decompose(sys.perturbation());
    Simulator::new(
        sys.spec(),
        sys.local_measure(),
        &dec,
        cfg.sim.epsilon,
        sys.grid().outer_bound(),
    )
}

/// Feynman-Kac estimates of the ground state at the configured probes.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    ensure_out(out)?;
    let sys = system_from_cache_or_config(cfg, out)?;
    let gs = sys.ground_state()?;
    let sim = build_simulator(cfg, &sys)?;
    let sim_cfg = cfg.sim_config();
    let grid = *sys.grid();
    let hvals = gs.h.clone();
    let payoff = move |x: f64| grid.interpolate(&hvals, x);
    let ball = Domain::interval(-0.5 * grid.half_width(), 0.5 * grid.half_width());
    let mut rows = Vec::new();
    for &x in &cfg.simulate.probes {
        let est = sim.feynman_kac(x, &ball, &payoff, gs.lambda, &sim_cfg)?;
        rows.push(format!(
            "{},{},{},{},{}",
            g17(x),
            g17(est.mean),
            g17(est.stderr),
            g17(est.bias_bound),
            est.n_censored
        ));
        if !quiet {
            println!(
                "probe {}: fk {} +- {} (h = {})",
                g17(x),
                g17(est.mean),
                g17(est.stderr),
                g17(sys.grid().interpolate(&gs.h, x))
            );
        }
    }
    write_csv(
        &out.join("estimates.csv"),
        cfg,
        "probe,mean,stderr,bias_bound,censored",
        &rows,
    )?;
    if cfg.sim.log_event_paths > 0 {
        write_event_logs(cfg, &sim, out)?;
    }
    Ok(())
}

fn write_event_logs(cfg: &RunConfig, sim: &Simulator, out: &Path) -> Result<()> {
    use rand::SeedableRng;
    let sim_cfg = cfg.sim_config();
    let horizon = cfg.verify.levy_horizon.min(cfg.sim.t_max);
    for i in 0..cfg.sim.log_event_paths {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.sim.master_seed);
        rng.set_stream(i as u64);
        let path = sim.sample_path(0.0, PathMode::Horizon(horizon), &sim_cfg, &mut rng)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(
            out.join(format!("events_path{i}.log")),
        )?);
        path.write_events(&mut file)?;
    }
    Ok(())
}

/// Gauge estimates over the configured domain at the configured probes.
pub fn cmd_gauge(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    ensure_out(out)?;
    let sys = system_from_cache_or_config(cfg, out)?;
    let gs = sys.ground_state()?;
    let sim = build_simulator(cfg, &sys)?;
    let sim_cfg = cfg.sim_config();
    let (ga, gb) = cfg.verify.gauge_domain;
    let domain = Domain::interval(ga, gb);
    let grid = sys.grid();
    let d_idx: Vec<usize> = (0..grid.len())
        .filter(|&i| domain.contains(grid.node(i)))
        .collect();
    let theta = domain_principal_value(&d_idx, sys.a_y(), sys.b_rho(), gs.lambda)?;
    let mut rows = Vec::new();
    for &x in &cfg.verify.gauge_probes {
        let est = sim.gauge(x, &domain, gs.lambda, &sim_cfg)?;
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            g17(x),
            g17(est.mean),
            g17(est.stderr),
            g17(est.bias_bound),
            est.n_censored,
            g17(est.max_weight),
            g17(theta)
        ));
        if !quiet {
            println!("gauge at {}: {} +- {}", g17(x), g17(est.mean), g17(est.stderr));
        }
    }
    write_csv(
        &out.join("gauge.csv"),
        cfg,
        "probe,mean,stderr,bias_bound,censored,max_weight,theta",
        &rows,
    )?;
    Ok(())
}

/// The five check groups of the verification suite, in manifest order.
pub const CHECK_GROUPS: [&str; 5] =
    ["levy_system", "ground_state", "harmonicity", "gauge", "green_cross"];

/// Run the verification suite (all groups, or the subset from the config),
/// write per-check artifacts plus the manifest, and return the reports.
pub fn run_verify_suite(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<Vec<CheckReport>> {
    ensure_out(out)?;
    let selected: Vec<String> = if cfg.verify.checks.is_empty() {
        CHECK_GROUPS.iter().map(|s| s.to_string()).collect()
    } else {
        for c in &cfg.verify.checks {
            if !CHECK_GROUPS.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "unknown check group '{c}' (expected one of {CHECK_GROUPS:?})"
                )));
            }
        }
        cfg.verify.checks.clone()
    };
    let spec = cfg.process_spec()?;
    let grid = cfg.grid()?;
    let mu = cfg.local_measure()?;
    let f = cfg.nonlocal_perturbation()?;
    let session = VerifySession::new(&spec, &grid, &mu, &f, cfg.sim_config(), Some(out.into()))?;

    let mut reports = Vec::new();

    for group in &selected {
        match group.as_str() {
            "levy_system" => {
                reports.push(session.check_levy_system(
                    cfg.verify.levy_origin,
                    cfg.verify.levy_horizon,
                    cfg.verify.levy_paths,
                )?);
            }
            "ground_state" => {
                reports.push(session.check_ground_state()?);
            }
            "harmonicity" => {
                reports.extend(harmonicity_group(cfg, &session)?);
            }
            "gauge" => {
                reports.extend(gauge_group(cfg, &session)?);
            }
            "green_cross" => {
                let mut gcfg = cfg.sim_config();
                gcfg.n_paths = (gcfg.n_paths / GREEN_PATH_DIVISOR).max(100);
                gcfg.dt *= GREEN_DT_FACTOR;
                gcfg.t_max = GREEN_HORIZON;
                reports.push(session.check_green_cross(&cfg.verify.green_probes, Some(gcfg))?);
            }
            _ => unreachable!(),
        }
    }
    if !quiet {
        for r in &reports {
            println!(
                "[{}] {} statistic {} tolerance {} | {}",
                if r.pass { "pass" } else { "FAIL" },
                r.name,
                g17(r.statistic),
                g17(r.tolerance),
                r.notes
            );
        }
    }
    Ok(reports)
}

fn ball_probes(center: f64, radius: f64) -> Vec<f64> {
    [-0.6, -0.3, 0.0, 0.3, 0.6]
        .iter()
        .map(|&s| center + s * radius)
        .collect()
}

fn harmonicity_group(cfg: &RunConfig, session: &VerifySession) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let lambda = session.ground.lambda;
    let grid = session.system.grid();
    let gy = session.system.green_y()?;

    // single admissible ball
    let z1 = cfg.verify.harmonicity_center;
    let ball1 = assumption_a_radius(z1, lambda, &gy, session.system.rho_plus(), grid)?;
    let d1 = Domain::ball(z1, ball1.radius);
    let probes1 = ball_probes(z1, ball1.radius);
    let bias1 = session.ground_state_grid_bias(&probes1)?;
    reports.push(session.check_harmonicity(
        "harmonicity_ball",
        &d1,
        &probes1,
        lambda,
        &session.simulator,
        &session.ground.h,
        &bias1,
    )?);

    // union of two overlapping admissible balls
    let z2 = cfg.verify.union_second_center;
    let ball2 = assumption_a_radius(z2, lambda, &gy, session.system.rho_plus(), grid)?;
    if (z1 - z2).abs() >= ball1.radius + ball2.radius {
        return Err(Error::Precondition(format!(
            "admissible balls at {z1} and {z2} do not overlap"
        )));
    }
    let union = Domain::union(&[
        (z1 - ball1.radius, z1 + ball1.radius),
        (z2 - ball2.radius, z2 + ball2.radius),
    ]);
    let lo = (z1 - ball1.radius).min(z2 - ball2.radius);
    let hi = (z1 + ball1.radius).max(z2 + ball2.radius);
    let probes_u: Vec<f64> = [0.2, 0.35, 0.5, 0.65, 0.8]
        .iter()
        .map(|&s| lo + s * (hi - lo))
        .collect();
    let bias_u = session.ground_state_grid_bias(&probes_u)?;
    reports.push(session.check_harmonicity(
        "harmonicity_union",
        &union,
        &probes_u,
        lambda,
        &session.simulator,
        &session.ground.h,
        &bias_u,
    )?);

    // recalibrated to lambda = 1 (the plain Feynman-Kac weight)
    let (c_star, _, _) = calibrate_critical(&session.system)?;
    let mu_c = session.system.local_measure().scale_plus(c_star);
    let session_c = VerifySession::new(
        session.system.spec(),
        grid,
        &mu_c,
        session.system.perturbation(),
        session.sim_cfg,
        session.out_dir().cloned(),
    )?;
    let gy_c = session_c.system.green_y()?;
    let ball_c = assumption_a_radius(z1, 1.0, &gy_c, session_c.system.rho_plus(), grid)?;
    let d_c = Domain::ball(z1, ball_c.radius);
    let probes_c = ball_probes(z1, ball_c.radius);
    let bias_c = session_c.ground_state_grid_bias(&probes_c)?;
    let mut rep = session_c.check_harmonicity(
        "harmonicity_critical",
        &d_c,
        &probes_c,
        1.0,
        &session_c.simulator,
        &session_c.ground.h,
        &bias_c,
    )?;
    rep.notes = format!(
        "critical scale c* = {} (lambda calibrated to {}); {}",
        g17(c_star),
        g17(session_c.ground.lambda),
        rep.notes
    );
    reports.push(rep);
    Ok(reports)
}

fn gauge_group(cfg: &RunConfig, session: &VerifySession) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let lambda = session.ground.lambda;

    let (ga, gb) = cfg.verify.gauge_domain;
    let domain = Domain::interval(ga, gb);
    let probes: Vec<f64> = cfg.verify.gauge_probes.clone();
    reports.push(session.check_gauge_spectral(
        &domain,
        &probes,
        lambda,
        &session.system,
        &session.simulator,
        "subcritical",
    )?);

    // supercritical control: scale the creation measure past criticality
    // of the restricted principal value (bisection on the scale)
    let grid = session.system.grid();
    let d_idx: Vec<usize> = (0..grid.len())
        .filter(|&i| domain.contains(grid.node(i)))
        .collect();
    let c_critical = bisect_domain_criticality(session, &d_idx, lambda)?;
    let c_super = 4.0 * c_critical;
    let mu_super = session.system.local_measure().scale_plus(c_super);
    let sys_super = FormSystem::assemble(
        session.system.spec(),
        grid,
        &mu_super,
        session.system.perturbation(),
    )?;
    let dec = li_decompose(session.system.perturbation());
    let sim_super = Simulator::new(
        session.system.spec(),
        &mu_super,
        &dec,
        session.sim_cfg.epsilon,
        grid.outer_bound(),
    )?;
    let mut rep = session.check_gauge_spectral(
        &domain,
        &probes,
        lambda,
        &sys_super,
        &sim_super,
        "supercritical",
    )?;
    rep.notes = format!(
        "creation scale {} (criticality at {}); {}",
        g17(c_super),
        g17(c_critical),
        rep.notes
    );
    reports.push(rep);
    Ok(reports)
}

/// Scale on the creation measure at which the restricted principal value
/// crosses 1 (with the unscaled principal value held fixed).
fn bisect_domain_criticality(
    session: &VerifySession,
    d_idx: &[usize],
    lambda: f64,
) -> Result<f64> {
    let sys = &session.system;
    let grid = sys.grid();
    let h = grid.spacing();
    let mu_plus_h: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| sys.local_measure().density_plus(x) * h)
        .collect();
    let xi_h: Vec<f64> = sys
        .b_rho()
        .iter()
        .zip(&mu_plus_h)
        .map(|(&b, &m)| b - m)
        .collect();
    let theta_of = |c: f64| -> Result<f64> {
        let b: Vec<f64> = xi_h.iter().zip(&mu_plus_h).map(|(&xi, &m)| xi + c * m).collect();
        domain_principal_value(d_idx, sys.a_y(), &b, lambda)
    };
    let (mut lo, mut hi) = (1.0f64, 2f64.powi(20));
    if theta_of(lo)? <= 1.0 {
        return Ok(lo);
    }
    if theta_of(hi)? > 1.0 {
        return Err(Error::Calibration(
            "restricted principal value never crosses 1 on the scale range".into(),
        ));
    }
    for _ in 0..60 {
        let c = (lo * hi).sqrt();
        if theta_of(c)? > 1.0 {
            lo = c;
        } else {
            hi = c;
        }
        if hi / lo < 1.01 {
            break;
        }
    }
    Ok(hi)
}

/// Run the suite and write the machine-readable manifest; true iff every
/// check passed.
pub fn cmd_verify(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<bool> {
    let reports = run_verify_suite(cfg, out, quiet)?;
    let rows: Vec<String> = reports.iter().map(CheckReport::manifest_row).collect();
    write_csv(
        &out.join("verify_manifest.csv"),
        cfg,
        "name,inputs_digest,statistic,tolerance,verdict",
        &rows,
    )?;
    Ok(reports.iter().all(|r| r.pass))
}

/// Command-line surface of the binary.
#[derive(Debug, clap::Parser)]
#[command(
    name = "stable-schrodinger",
    version,
    about = "Ground states and harmonic functions for recurrent stable processes with non-local perturbations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file (TOML); omit to use the built-in default configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Path count override.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, clap::Subcommand)]
pub enum Command {
    /// Assemble the discrete operators and write the binary cache.
    Assemble,
    /// Solve the variational problem and export the ground state.
    Groundstate,
    /// Feynman-Kac estimates of the ground state at the configured probes.
    Simulate,
    /// Gauge estimates over the configured domain.
    Gauge,
    /// Run the verification suite; exit 0 iff every check passes.
    Verify,
}

/// Entry point used by the binary; maps errors to the documented exit
/// codes.
pub fn run_cli(cli: Cli) -> i32 {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default_config()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.sim.master_seed = seed;
    }
    if let Some(paths) = cli.paths {
        cfg.sim.n_paths = paths;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("config error: {e}");
        return 1;
    }
    let result = match cli.command {
        Command::Assemble => cmd_assemble(&cfg, &cli.out, cli.quiet).map(|()| true),
        Command::Groundstate => cmd_groundstate(&cfg, &cli.out, cli.quiet).map(|()| true),
        Command::Simulate => cmd_simulate(&cfg, &cli.out, cli.quiet).map(|()| true),
        Command::Gauge => cmd_gauge(&cfg, &cli.out, cli.quiet).map(|()| true),
        Command::Verify => cmd_verify(&cfg, &cli.out, cli.quiet),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("verification failed: see verify_manifest.csv");
            3
        }
        Err(Error::Config(e)) => {
            eprintln!("config error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
