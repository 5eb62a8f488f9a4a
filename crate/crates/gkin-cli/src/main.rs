//! `gkin` — experiment runner: each subcommand checks a family of numeric
//! claims against stated tolerances and writes a JSON summary (plus CSV scan
//! tables) whose bytes depend only on config, seed, and worker count.

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;

use gkin::analysis::{
    boundary_change_of_variables, divergence_scan, eta_gap_scan, flight_change_of_variables,
    log_divergence_identity_max_err, min_chord_over_flat_region, op_norm_checks, w1p_of_jg_scan,
    DivergenceVerdict, GrowthModel, NormSpec, ScanStatus,
};
use gkin::collision::{
    apply_k, gain_full_closed, half_space_gain_certified, identity_check, nu,
    pointwise_envelope_constant, z_abs, GainQuad, ZTable, INV_SQRT8,
};
use gkin::config::ExperimentConfig;
use gkin::report::{csv_cell, CsvTable, Summary};
use gkin::solver::{
    first_iterate_l1_ratio, mc_solve_point, neumann_solve, second_iterate_sup, McParams,
};
use gkin::transport::BoundaryData;
use gkin::{ConvexDomain, GkinError, V3};

#[derive(Parser)]
#[command(name = "gkin", version, about = "Kinetic boundary-layer experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for report files (overrides the config's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Collision-kernel invariants: loss/gain constants, symmetry, the
    /// exponent-shift identity, envelope bounds.
    VerifyKernel,
    /// Exit-time oracles: bisection cross-check, chord ray traces, gradient
    /// finite differences.
    VerifyGeometry,
    /// Norm bounds of the boundary and flight operators on random inputs,
    /// plus contraction scaling in the domain diameter.
    OperatorNorms,
    /// Flight-variable and volume-to-boundary integral identities.
    ChangeOfVariables,
    /// Grazing-integral divergence scans over the configured exponents.
    Grazing,
    /// Certified gap between collision loss and half-space gain at low speed.
    EtaGap,
    /// Gradient-norm cutoff scans showing where J g leaves W^{1,p}.
    Counterexample {
        #[arg(value_parser = ["flat", "ball"])]
        which: String,
    },
    /// Neumann-series solve with Monte Carlo cross-check.
    Solve,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::VerifyKernel => "verify-kernel",
            Command::VerifyGeometry => "verify-geometry",
            Command::OperatorNorms => "operator-norms",
            Command::ChangeOfVariables => "change-of-variables",
            Command::Grazing => "grazing",
            Command::EtaGap => "eta-gap",
            Command::Counterexample { .. } => "counterexample",
            Command::Solve => "solve",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, GkinError> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| GkinError::Config(e.to_string()))?;
    }
    let workers = rayon::current_num_threads();
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let resolved = serde_json::to_value(&cfg).map_err(|e| GkinError::Config(e.to_string()))?;
    let mut summary = Summary::new(&cfg.name, cli.command.name(), workers, resolved);

    match &cli.command {
        Command::VerifyKernel => verify_kernel(&cfg, &mut summary, &out_dir)?,
        Command::VerifyGeometry => verify_geometry(&cfg, &mut summary)?,
        Command::OperatorNorms => operator_norms(&cfg, &mut summary, &out_dir)?,
        Command::ChangeOfVariables => change_of_variables(&cfg, &mut summary, &out_dir)?,
        Command::Grazing => grazing(&cfg, &mut summary, &out_dir)?,
        Command::EtaGap => eta_gap(&cfg, &mut summary, &out_dir)?,
        Command::Counterexample { which } => counterexample(&cfg, which, &mut summary, &out_dir)?,
        Command::Solve => solve(&cfg, &mut summary, &out_dir)?,
    }

    let path = summary.write(&out_dir)?;
    for c in &summary.claims {
        println!(
            "{} {}  measured={:.10e} tolerance={:.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.id,
            c.measured,
            c.tolerance
        );
    }
    println!("summary: {}", path.display());
    Ok(ExitCode::from(if summary.all_passed() { 0 } else { 1 }))
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian3(rng: &mut impl Rng) -> V3 {
    V3::new(gaussian(rng), gaussian(rng), gaussian(rng))
}

fn verify_kernel(cfg: &ExperimentConfig, s: &mut Summary, out: &PathBuf) -> Result<(), GkinError> {
    let q = GainQuad::default();
    s.check_close("kernel.loss_at_rest", nu(0.0), std::f64::consts::FRAC_1_SQRT_2, 1e-10);
    let (gain0, _) = half_space_gain_certified(&V3::zeros(), &V3::x(), &q);
    s.check_close("kernel.half_gain_at_rest", gain0, INV_SQRT8, 1e-4);
    s.check_close("kernel.z_at_rest", z_abs(0.0, &q), 4.0 * 2.0f64.sqrt() / std::f64::consts::E, 1e-6);

    // Detailed balance: the gain applied to the Maxwellian reproduces
    // nu(v) e^{-|v|^2/2} at every velocity.
    let vq = cfg.quadrature.build();
    let mut balance_err: f64 = 0.0;
    for speed in [0.3, 1.0, 2.7] {
        let v = V3::new(speed, 0.0, 0.0);
        let gain = apply_k(&v, |vs| (-0.5 * vs.norm_squared()).exp(), &vq);
        let want = nu(speed) * (-0.5 * speed * speed).exp();
        balance_err = balance_err.max((gain - want).abs() / want);
    }
    s.check("kernel.detailed_balance_max_rel", balance_err <= 1e-6, balance_err, 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sym: f64 = 0.0;
    let mut ident: f64 = 0.0;
    for _ in 0..10_000 {
        let v = gaussian3(&mut rng) * 1.5;
        let vs = gaussian3(&mut rng) * 1.5;
        if (vs - v).norm() < 1e-8 {
            continue;
        }
        let kab = gkin::collision::kernel(&v, &vs).unwrap_or(f64::NAN);
        let kba = gkin::collision::kernel(&vs, &v).unwrap_or(f64::NAN);
        sym = sym.max((kab - kba).abs());
        let a = rng.gen::<f64>() * 0.24;
        ident = ident.max(identity_check(&v, &vs, a, 0.5));
    }
    s.check("kernel.symmetry_exact", sym == 0.0, sym, 0.0);
    s.check("kernel.exponent_shift_identity", ident <= 1e-12, ident, 1e-12);

    let envelope_c = pointwise_envelope_constant(0.5, &mut rng, 20_000);
    s.check("kernel.envelope_constant_finite", envelope_c.is_finite() && envelope_c > 0.0, envelope_c, 0.0);

    let mut csv = CsvTable::new(&["speed", "nu", "gain_closed", "z_abs"]);
    for i in 0..=16 {
        let speed = 0.25 * i as f64;
        csv.row(vec![
            csv_cell(speed),
            csv_cell(nu(speed)),
            csv_cell(gain_full_closed(speed)),
            csv_cell(z_abs(speed, &q)),
        ]);
    }
    csv.write(out, &cfg.name, "kernel").map(|p| s.artifacts.push(p.display().to_string()))?;
    Ok(())
}

fn verify_geometry(cfg: &ExperimentConfig, s: &mut Summary) -> Result<(), GkinError> {
    let dom = cfg.domain.build()?;
    let diam = dom.diameter();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tau_err: f64 = 0.0;
    for _ in 0..10_000 {
        let x = dom.sample_interior(&mut rng);
        let v = gaussian3(&mut rng);
        if v.norm() < 1e-9 {
            continue;
        }
        let tau = dom.exit_time(&x, &v)?;
        let tau_b = dom.exit_time_bisection(&x, &v)?;
        tau_err = tau_err.max((tau - tau_b).abs());
    }
    s.check("geometry.exit_time_vs_bisection", tau_err <= 1e-9 * diam, tau_err, 1e-9 * diam);

    // Chord consistency: the closed chord time against a fresh ray trace
    // from a point nudged just inside the boundary.
    let mut chord_err: f64 = 0.0;
    for _ in 0..2_000 {
        let bp = dom.sample_boundary(&mut rng);
        let dir = {
            let d = gaussian3(&mut rng).normalize();
            if d.dot(&bp.n) < 0.0 {
                d
            } else {
                -d
            }
        };
        if dir.dot(&bp.n).abs() < 1e-3 {
            continue;
        }
        let delta = 1e-9 * diam;
        let x_in = bp.z + dir * delta;
        if !dom.contains(&x_in) {
            continue;
        }
        let traced = delta + dom.exit_time(&x_in, &-dir)?;
        let closed = dom.chord_time(&bp, &dir);
        chord_err = chord_err.max((traced - closed).abs());
    }
    s.check("geometry.chord_vs_ray_trace", chord_err <= 1e-7 * diam, chord_err, 1e-7 * diam);

    let mut grad_err: f64 = 0.0;
    let mut checked = 0;
    let h = 1e-6 * diam;
    while checked < 3_000 {
        let x = dom.sample_interior(&mut rng);
        let v = gaussian3(&mut rng);
        if v.norm() < 1e-6 {
            continue;
        }
        let fp = dom.footpoint(&x, &v)?;
        if fp.incidence < 0.1 || fp.tau * v.norm() < 1e-3 * diam {
            continue;
        }
        let grad = dom.grad_x_tau(&x, &v)?;
        for axis in 0..3 {
            let mut e = V3::zeros();
            e[axis] = h;
            if !(dom.contains(&(x + e)) && dom.contains(&(x - e))) {
                continue;
            }
            let fd = (dom.exit_time(&(x + e), &v)? - dom.exit_time(&(x - e), &v)?) / (2.0 * h);
            grad_err = grad_err.max((fd - grad[axis]).abs() / grad.norm().max(1e-12));
        }
        checked += 1;
    }
    s.check("geometry.tau_gradient_fd_rel", grad_err <= 1e-5, grad_err, 1e-5);
    Ok(())
}

fn operator_norms(cfg: &ExperimentConfig, s: &mut Summary, out: &PathBuf) -> Result<(), GkinError> {
    let dom = cfg.domain.build()?;
    let cases = op_norm_checks(&dom, 20, 20_000, cfg.seed);
    let mut csv = CsvTable::new(&[
        "operator", "p", "alpha", "func", "measured", "input_norm", "bound", "sigma", "pass",
    ]);
    let mut j_viol = 0usize;
    let mut s_viol = 0usize;
    for case in &cases {
        if !case.holds_within_3_sigma {
            if case.operator == "J" {
                j_viol += 1;
            } else {
                s_viol += 1;
            }
        }
        csv.row(vec![
            case.operator.to_string(),
            csv_cell(case.p),
            csv_cell(case.alpha),
            format!("{}", case.func_index),
            csv_cell(case.measured),
            csv_cell(case.input_norm),
            csv_cell(case.bound_constant),
            csv_cell(case.sigma),
            format!("{}", case.holds_within_3_sigma),
        ]);
    }
    s.check("opnorm.boundary_to_volume_violations", j_viol == 0, j_viol as f64, 0.0);
    s.check("opnorm.flight_operator_violations", s_viol == 0, s_viol as f64, 0.0);
    csv.write(out, &cfg.name, "opnorms").map(|p| s.artifacts.push(p.display().to_string()))?;

    // Contraction scaling in the domain diameter: the first-iterate mass
    // ratio shrinks at least linearly, and the second iterate is bounded by
    // a constant times the diameter.
    let radii = [0.4, 0.2, 0.1, 0.05];
    let ratios: Vec<f64> = radii.iter().map(|r| first_iterate_l1_ratio(*r)).collect();
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    s.check("contraction.first_iterate_decreasing", decreasing, ratios[3], ratios[2]);
    let slope = (ratios[0] / ratios[3]).ln() / (radii[0] / radii[3]).ln();
    s.check("contraction.first_iterate_loglog_slope", slope >= 0.9, slope, 0.9);
    // The per-diameter constant drifts up as the ball shrinks (the flight
    // damping that softens the large-ball value is itself O(diam)), so the
    // fit needs 1.6x headroom; sqrt-of-diameter scaling would need 2.83x.
    let c_fit = second_iterate_sup(0.4, 0.1) / 0.8;
    let small = second_iterate_sup(0.05, 0.1);
    s.check(
        "contraction.second_iterate_diameter_bound",
        small <= 1.6 * c_fit * 0.1,
        small,
        1.6 * c_fit * 0.1,
    );
    Ok(())
}

fn change_of_variables(cfg: &ExperimentConfig, s: &mut Summary, out: &PathBuf) -> Result<(), GkinError> {
    let dom = cfg.domain.build()?;
    let n = cfg.solver.mc_paths.max(50_000);
    let flights = flight_change_of_variables(&dom, n, cfg.seed);
    let sigma_f = 3.0 * (flights.lhs_se.powi(2) + flights.rhs_se.powi(2)).sqrt();
    s.check("cov.flight_swap", flights.within_3_sigma(), (flights.lhs - flights.rhs).abs(), sigma_f);
    let surface = boundary_change_of_variables(&dom, n, cfg.seed + 1);
    let sigma_b = 3.0 * (surface.lhs_se.powi(2) + surface.rhs_se.powi(2)).sqrt();
    s.check("cov.volume_to_boundary", surface.within_3_sigma(), (surface.lhs - surface.rhs).abs(), sigma_b);

    let mut csv = CsvTable::new(&["check", "lhs", "lhs_se", "rhs", "rhs_se"]);
    csv.row(vec![
        "flight_swap".into(),
        csv_cell(flights.lhs),
        csv_cell(flights.lhs_se),
        csv_cell(flights.rhs),
        csv_cell(flights.rhs_se),
    ]);
    csv.row(vec![
        "volume_to_boundary".into(),
        csv_cell(surface.lhs),
        csv_cell(surface.lhs_se),
        csv_cell(surface.rhs),
        csv_cell(surface.rhs_se),
    ]);
    csv.write(out, &cfg.name, "cov").map(|p| s.artifacts.push(p.display().to_string()))?;
    Ok(())
}

fn scan_csv(verdict: &DivergenceVerdict) -> CsvTable {
    let mut csv = CsvTable::new(&["epsilon", "value", "fitted_model", "verdict"]);
    let model = match verdict.model {
        GrowthModel::Limit { value, rate } => format!("geometric(rate={rate:.4};limit={value:.6e})"),
        GrowthModel::LogPower => "log".to_string(),
        GrowthModel::Power { exponent } => format!("power({exponent:.4})"),
    };
    let status = match verdict.status {
        ScanStatus::Convergent => "CONVERGENT",
        ScanStatus::Divergent => "DIVERGENT",
        ScanStatus::Inconclusive => "INCONCLUSIVE",
    };
    for (i, eps) in verdict.epsilons.iter().enumerate() {
        let value = verdict.values.get(i).copied().unwrap_or(f64::INFINITY);
        csv.row(vec![csv_cell(*eps), csv_cell(value), model.clone(), status.to_string()]);
    }
    csv
}

fn expected_status(dom: &ConvexDomain, p: f64) -> ScanStatus {
    let threshold = match dom {
        ConvexDomain::Ball { .. } => 3.0,
        ConvexDomain::FlatCap { .. } => 2.0,
    };
    if p < threshold {
        ScanStatus::Convergent
    } else {
        ScanStatus::Divergent
    }
}

fn grazing(cfg: &ExperimentConfig, s: &mut Summary, out: &PathBuf) -> Result<(), GkinError> {
    let dom = cfg.domain.build()?;
    let mut ps: Vec<f64> = cfg.norms.iter().map(|n| n.p).collect();
    ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ps.dedup();
    let (a, b) = (1.0, 0.0);
    for p in ps {
        let verdict = divergence_scan(&dom, p, a, b)?;
        let want = expected_status(&dom, p);
        s.check(
            &format!("grazing.p{p}.verdict"),
            verdict.status == want,
            if verdict.status == want { 1.0 } else { 0.0 },
            0.0,
        );
        if let GrowthModel::Limit { value, .. } = verdict.model {
            // The scan's geometric extrapolation against the antiderivative
            // limit of the incidence factor.
            let eps_ref = verdict.epsilons[0];
            let (t_ref, t_closed) = match dom {
                ConvexDomain::Ball { .. } => {
                    ((1.0 - eps_ref.powf(3.0 - p)) / (3.0 - p), 1.0 / (3.0 - p))
                }
                ConvexDomain::FlatCap { .. } => {
                    ((1.0 - eps_ref.powf(2.0 - p)) / (2.0 - p), 1.0 / (2.0 - p))
                }
            };
            let analytic = verdict.values[0] / t_ref * t_closed;
            s.check(
                &format!("grazing.p{p}.closed_form_limit"),
                (value - analytic).abs() <= 0.02 * analytic,
                value,
                0.02 * analytic,
            );
        }
        let table = scan_csv(&verdict);
        table
            .write(out, &cfg.name, &format!("grazing-p{p}"))
            .map(|path| s.artifacts.push(path.display().to_string()))?;
    }
    Ok(())
}

fn eta_gap(cfg: &ExperimentConfig, s: &mut Summary, out: &PathBuf) -> Result<(), GkinError> {
    let scan = eta_gap_scan(0.5, 21, 21);
    s.check_close("eta.limit_at_rest", scan.limit_gap, INV_SQRT8, 1e-3);
    s.check("eta.certified_min_positive", scan.certified_min > 0.0, scan.certified_min, 0.0);
    let step = scan.speed_step.max(scan.cos_step);
    s.check("eta.adjacent_jump_lipschitz", scan.max_adjacent_jump <= step, scan.max_adjacent_jump, step);
    s.check("eta.half_limit_speed", true, scan.half_limit_speed, 0.0);

    let mut csv = CsvTable::new(&["speed", "cos", "gap", "certified"]);
    for sample in &scan.samples {
        csv.row(vec![
            csv_cell(sample.speed),
            csv_cell(sample.cos),
            csv_cell(sample.gap),
            csv_cell(sample.certified),
        ]);
    }
    csv.write(out, &cfg.name, "eta").map(|p| s.artifacts.push(p.display().to_string()))?;
    Ok(())
}

fn counterexample(
    cfg: &ExperimentConfig,
    which: &str,
    s: &mut Summary,
    out: &PathBuf,
) -> Result<(), GkinError> {
    let configured = cfg.domain.build()?;
    match which {
        "flat" => {
            let dom = match configured {
                ConvexDomain::FlatCap { .. } => configured,
                _ => ConvexDomain::FlatCap { sphere_radius: 0.5, offset: 0.1 },
            };
            let data = match cfg.data {
                BoundaryData::FlatCutoff { .. } => cfg.data,
                _ => BoundaryData::FlatCutoff { r1: 0.8 * dom.flat_radius().unwrap() },
            };
            let r1 = match data {
                BoundaryData::FlatCutoff { r1 } => r1,
                _ => unreachable!(),
            };
            let min_chord = min_chord_over_flat_region(&dom, r1, r1 / 2.0);
            s.check("ctrex.flat.flight_cap_certified", min_chord > 1.0, min_chord, 1.0);
            for (p, want) in [(1.5, ScanStatus::Convergent), (2.0, ScanStatus::Divergent)] {
                let spec = NormSpec { p, alpha: 0.1 };
                let verdict = w1p_of_jg_scan(&dom, &data, &spec)?;
                s.check(
                    &format!("ctrex.flat.p{p}.verdict"),
                    verdict.status == want,
                    if verdict.status == want { 1.0 } else { 0.0 },
                    0.0,
                );
                scan_csv(&verdict)
                    .write(out, &cfg.name, &format!("w1p-flat-p{p}"))
                    .map(|path| s.artifacts.push(path.display().to_string()))?;
            }
        }
        "ball" => {
            let dom = match configured {
                ConvexDomain::Ball { .. } => configured,
                _ => ConvexDomain::Ball { radius: 0.5 },
            };
            let data = match cfg.data {
                BoundaryData::CapCutoff { .. } => cfg.data,
                _ => BoundaryData::default(),
            };
            for (p, want) in [(2.5, ScanStatus::Convergent), (3.0, ScanStatus::Divergent)] {
                let spec = NormSpec { p, alpha: 0.1 };
                let verdict = w1p_of_jg_scan(&dom, &data, &spec)?;
                s.check(
                    &format!("ctrex.ball.p{p}.verdict"),
                    verdict.status == want,
                    if verdict.status == want { 1.0 } else { 0.0 },
                    0.0,
                );
                scan_csv(&verdict)
                    .write(out, &cfg.name, &format!("w1p-ball-p{p}"))
                    .map(|path| s.artifacts.push(path.display().to_string()))?;
            }
            let log_err = log_divergence_identity_max_err(0.5, 0.25);
            s.check("ctrex.log_squared_identity", log_err <= 1e-3, log_err, 1e-3);
        }
        other => return Err(GkinError::Config(format!("unknown counterexample: {other}"))),
    }
    Ok(())
}

fn solve(cfg: &ExperimentConfig, s: &mut Summary, out: &PathBuf) -> Result<(), GkinError> {
    let dom = cfg.domain.build()?;
    let data = cfg.data;
    let params = cfg.solver.params();
    let sol = match neumann_solve(&dom, &data, &params) {
        Ok(sol) => sol,
        Err(GkinError::NonContractive { ratios }) => {
            let last = ratios.last().copied().unwrap_or(f64::NAN);
            s.check("solve.contractive", false, last, 1.0);
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    let rep = &sol.report;
    s.check("solve.converged", rep.converged, rep.iterations as f64, params.max_iter as f64);
    let rel_res = rep.residual / rep.jg_norm;
    s.check("solve.relative_residual", rel_res <= params.tol, rel_res, params.tol);

    let mut csv = CsvTable::new(&["iteration", "increment", "ratio"]);
    for (i, inc) in rep.increments.iter().enumerate() {
        let ratio = if i == 0 { f64::NAN } else { rep.ratios[i - 1] };
        csv.row(vec![format!("{i}"), csv_cell(*inc), csv_cell(ratio)]);
    }
    csv.write(out, &cfg.name, "iterations").map(|p| s.artifacts.push(p.display().to_string()))?;

    // Monte Carlo cross-check at deterministic probe points. The MC side is
    // unbiased, so this certifies the grid solution at the accuracy class a
    // coarse phase-space grid can deliver: a few percent of the solution's
    // sup. (Refined-grid error estimates are NOT used here: convergence in
    // the grid parameters is non-monotone — errors from the spatial and
    // velocity directions partially cancel — so a one-notch refinement
    // difference can understate the truncation error by two orders.) The
    // tight 3-sigma comparison lives in the library's acceptance suite on a
    // small ball, where the grid truncation is subdominant.
    let zt = ZTable::build(16.0, &GainQuad::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut probes = CsvTable::new(&["x1", "x2", "x3", "v1", "v2", "v3", "det", "mc", "mc_se"]);
    let n_probes = 20;
    let mut rows: Vec<(f64, f64, f64)> = Vec::with_capacity(n_probes);
    for i in 0..n_probes {
        let x = dom.sample_interior(&mut rng) * 0.9;
        let v = {
            let d = gaussian3(&mut rng);
            let speed = 0.3 + 1.2 * rng.gen::<f64>();
            d.normalize() * speed
        };
        let det = sol.probe(&x, &v)?;
        let mc_params = McParams {
            n_paths: cfg.solver.mc_paths,
            seed: cfg.solver.seed.wrapping_add(i as u64),
            scattering: params.scattering,
        };
        let (mc, se) = mc_solve_point(&dom, &data, &x, &v, &mc_params, &zt)?;
        rows.push((det, mc, se));
        probes.row(vec![
            csv_cell(x.x),
            csv_cell(x.y),
            csv_cell(x.z),
            csv_cell(v.x),
            csv_cell(v.y),
            csv_cell(v.z),
            csv_cell(det),
            csv_cell(mc),
            csv_cell(se),
        ]);
    }
    let scale = rows.iter().map(|r| r.0.abs()).fold(0.0_f64, f64::max);
    let violations = rows
        .iter()
        .filter(|&&(det, mc, se)| (det - mc).abs() > 3.0 * se.max(1e-12) + 0.03 * scale)
        .count();
    s.check("solve.mc_probe_violations", violations == 0, violations as f64, 0.0);
    probes.write(out, &cfg.name, "probes").map(|p| s.artifacts.push(p.display().to_string()))?;

    // With scattering off the probe is the damped boundary term bit for bit:
    // the scattered field is identically zero, so the line correction
    // vanishes exactly and both sides reduce to the same quadrature call.
    let mut off = params;
    off.scattering = false;
    let sol0 = neumann_solve(&dom, &data, &off)?;
    let g = |bp: &gkin::BoundaryPoint, v: &V3| data.eval(&dom, bp, v);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfeed);
    let mut off_err: f64 = 0.0;
    for _ in 0..20 {
        let x = dom.sample_interior(&mut rng) * 0.9;
        let v = gaussian3(&mut rng);
        let direct = gkin::transport::apply_j(&dom, &g, &x, &v)?;
        off_err = off_err.max((sol0.probe(&x, &v)? - direct).abs());
    }
    s.check("solve.kernel_off_exact", off_err == 0.0, off_err, 0.0);
    Ok(())
}

