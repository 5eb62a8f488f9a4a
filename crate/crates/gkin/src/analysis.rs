//! Weighted norms, the grazing-set integrals whose convergence thresholds
//! separate flat from curved boundaries, divergence diagnostics, the eta-gap
//! experiment, operator-norm bound checks, and change-of-variables identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::gamma;

use crate::collision::{half_space_gain_certified, nu, GainQuad, INV_SQRT8};
use crate::error::{GkinError, Result};
use crate::geometry::{sample_unit_sphere, BoundaryPoint, ConvexDomain, V3};
use crate::quad::gl_on;
use crate::transport::BoundaryData;

/// Norm parameters for L^p with velocity weight e^{p alpha |v|^2}.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormSpec {
    pub p: f64,
    pub alpha: f64,
}

impl NormSpec {
    pub fn new(p: f64, alpha: f64) -> Result<Self> {
        let spec = NormSpec { p, alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(GkinError::InvalidNormSpec(format!("p = {} must be >= 1", self.p)));
        }
        if !(self.alpha >= 0.0) {
            return Err(GkinError::InvalidNormSpec(format!("alpha = {} must be >= 0", self.alpha)));
        }
        // Against Maxwellian-decay data the weighted integrand carries
        // e^{-p(1/2 - alpha)|v|^2}: the weight eats the decay at alpha = 1/2.
        if self.alpha >= 0.5 {
            return Err(GkinError::NonIntegrableWeight { alpha: self.alpha });
        }
        Ok(())
    }

    /// Admissibility relative to the kernel envelope decay rho: the theory
    /// needs alpha strictly below (1 - rho)/2.
    pub fn admissible(&self, rho: f64) -> bool {
        self.alpha < (1.0 - rho) / 2.0
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    /// MC: one standard error of the norm; grid: delta under refinement.
    pub error: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum NormMethod {
    Mc { samples: usize, seed: u64 },
    Grid { level: usize },
}

/// Stratification edges in |v|: shells tame the Gaussian-weighted variance
/// and make indicator-type radial profiles exact within aligned shells.
pub const V_SHELL_EDGES: [f64; 12] =
    [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 12.0];

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian3(rng: &mut impl Rng) -> V3 {
    V3::new(gaussian(rng), gaussian(rng), gaussian(rng))
}

/// Shell-stratified MC of several specs at once over Omega x R^3, reusing
/// one set of samples: per sample the integrand value and speed are cached
/// and re-weighted per (p, alpha).
pub fn volume_norms_mc(
    dom: &ConvexDomain,
    f: &(dyn Fn(&V3, &V3) -> f64 + Sync),
    specs: &[NormSpec],
    samples: usize,
    seed: u64,
) -> Vec<NormEstimate> {
    let vol = dom.volume();
    let n_shell = (samples / (V_SHELL_EDGES.len() - 1)).max(64);
    let mut acc = vec![(0.0f64, 0.0f64); specs.len()]; // (integral, variance)
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for shell in V_SHELL_EDGES.windows(2) {
        let (lo, hi) = (shell[0], shell[1]);
        let mut sums = vec![(0.0f64, 0.0f64); specs.len()];
        for _ in 0..n_shell {
            let x = dom.sample_interior(&mut rng);
            let s = lo + (hi - lo) * rng.gen::<f64>();
            let v = sample_unit_sphere(&mut rng) * s;
            let base = f(&x, &v).abs();
            let jac = 4.0 * std::f64::consts::PI * s * s * (hi - lo) * vol;
            for (i, spec) in specs.iter().enumerate() {
                let val = base.powf(spec.p) * (spec.p * spec.alpha * s * s).exp() * jac;
                sums[i].0 += val;
                sums[i].1 += val * val;
            }
        }
        for (i, (s1, s2)) in sums.into_iter().enumerate() {
            let mean = s1 / n_shell as f64;
            let var = (s2 / n_shell as f64 - mean * mean).max(0.0) / n_shell as f64;
            acc[i].0 += mean;
            acc[i].1 += var;
        }
    }
    acc.iter()
        .zip(specs)
        .map(|(&(integral, var), spec)| power_root_estimate(integral, var.sqrt(), spec.p))
        .collect()
}

/// Convert an estimate of the p-th power integral (value, se) into the norm.
fn power_root_estimate(integral: f64, se: f64, p: f64) -> NormEstimate {
    let value = integral.max(0.0).powf(1.0 / p);
    let error = if value > 0.0 { se / (p * value.powf(p - 1.0)) } else { se.powf(1.0 / p) };
    NormEstimate { value, error }
}

/// Spatial product quadrature adapted to the domain: spherical about the
/// carrier-sphere centre with per-direction radial extent, so both domains
/// integrate smooth functions at Gauss-Legendre accuracy.
fn domain_x_nodes(dom: &ConvexDomain, n_r: usize, n_ang: usize) -> Vec<(V3, f64)> {
    let (radius, offset) = match *dom {
        ConvexDomain::Ball { radius } => (radius, 0.0),
        ConvexDomain::FlatCap { sphere_radius, offset } => (sphere_radius, offset),
    };
    let (ts, tw) = gl_on(n_ang, -1.0, 1.0);
    let mut nodes = Vec::new();
    for (t, wt) in ts.iter().zip(&tw) {
        let rho_max = match *dom {
            ConvexDomain::Ball { .. } => radius,
            ConvexDomain::FlatCap { .. } => {
                if *t > 0.0 {
                    radius.min(offset / t)
                } else {
                    radius
                }
            }
        };
        if rho_max <= 0.0 {
            continue;
        }
        let (rs, rw) = gl_on(n_r, 0.0, rho_max);
        let sin = (1.0 - t * t).max(0.0).sqrt();
        for (r, wr) in rs.iter().zip(&rw) {
            for c in 0..n_ang {
                let phi = 2.0 * std::f64::consts::PI * c as f64 / n_ang as f64;
                let w = wr * r * r * wt * 2.0 * std::f64::consts::PI / n_ang as f64;
                let y = V3::new(r * t, r * sin * phi.cos(), r * sin * phi.sin());
                nodes.push((y - V3::new(offset, 0.0, 0.0), w));
            }
        }
    }
    nodes
}

/// Velocity product quadrature in a given orthonormal frame (polar axis
/// `axis`), radial Gauss-Legendre panels on [0, 12], polar cosine on
/// [t_lo, t_hi].
fn velocity_nodes_in_frame(
    axis: &V3,
    n_r: usize,
    n_ang: usize,
    t_lo: f64,
    t_hi: f64,
) -> Vec<(V3, f64)> {
    let a = if axis.x.abs() < 0.9 {
        axis.cross(&V3::new(1.0, 0.0, 0.0)).normalize()
    } else {
        axis.cross(&V3::new(0.0, 1.0, 0.0)).normalize()
    };
    let b = axis.cross(&a);
    let panels = [0.0, 1.5, 3.0, 6.0, 12.0];
    let mut radial = Vec::new();
    for pair in panels.windows(2) {
        let (rs, rw) = gl_on(n_r, pair[0], pair[1]);
        radial.extend(rs.into_iter().zip(rw));
    }
    let (ts, tw) = gl_on(n_ang, t_lo, t_hi);
    let mut nodes = Vec::new();
    for (s, ws) in &radial {
        for (t, wt) in ts.iter().zip(&tw) {
            let sin = (1.0 - t * t).max(0.0).sqrt();
            for c in 0..n_ang {
                let phi = 2.0 * std::f64::consts::PI * c as f64 / n_ang as f64;
                let v = (axis * *t + a * (sin * phi.cos()) + b * (sin * phi.sin())) * *s;
                let w = ws * s * s * wt * 2.0 * std::f64::consts::PI / n_ang as f64;
                nodes.push((v, w));
            }
        }
    }
    nodes
}

fn volume_norm_grid(
    dom: &ConvexDomain,
    f: &(dyn Fn(&V3, &V3) -> f64 + Sync),
    spec: &NormSpec,
    level: usize,
) -> NormEstimate {
    let run = |n_r: usize, n_ang: usize| -> f64 {
        let xs = domain_x_nodes(dom, n_r, n_ang);
        let vs = velocity_nodes_in_frame(&V3::new(1.0, 0.0, 0.0), n_r.div_ceil(2), n_ang, -1.0, 1.0);
        // Collect per-node partial sums first, then reduce sequentially:
        // the float summation order must not depend on thread scheduling.
        let parts: Vec<f64> = xs
            .par_iter()
            .map(|(x, wx)| {
                let mut acc = 0.0;
                for (v, wv) in &vs {
                    let s2 = v.norm_squared();
                    acc += wv * f(x, v).abs().powf(spec.p) * (spec.p * spec.alpha * s2).exp();
                }
                acc * wx
            })
            .collect();
        let total: f64 = parts.iter().sum();
        total.max(0.0).powf(1.0 / spec.p)
    };
    let n_ang = level.saturating_sub(4).max(8);
    let coarse = run(level, n_ang);
    let fine = run(level + 4, n_ang + 2);
    NormEstimate { value: fine, error: (fine - coarse).abs() }
}

/// ||f||_{L^p_alpha(Omega x R^3)}.
pub fn lp_norm(
    dom: &ConvexDomain,
    f: &(dyn Fn(&V3, &V3) -> f64 + Sync),
    spec: &NormSpec,
    method: NormMethod,
) -> Result<NormEstimate> {
    spec.validate()?;
    dom.validate()?;
    Ok(match method {
        NormMethod::Mc { samples, seed } => {
            volume_norms_mc(dom, f, std::slice::from_ref(spec), samples, seed).pop().unwrap()
        }
        NormMethod::Grid { level } => volume_norm_grid(dom, f, spec, level),
    })
}

/// Which surface measure the boundary norm carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BoundaryWeight {
    /// Plain dSigma(z) dv.
    Plain,
    /// Incoming-trace measure N(z,v) |v| dSigma(z) dv restricted to n.v < 0.
    IncomingFlux,
}

pub fn boundary_norms_mc(
    dom: &ConvexDomain,
    h: &(dyn Fn(&BoundaryPoint, &V3) -> f64 + Sync),
    specs: &[NormSpec],
    weight: BoundaryWeight,
    samples: usize,
    seed: u64,
) -> Vec<NormEstimate> {
    let area = dom.boundary_area();
    let n_shell = (samples / (V_SHELL_EDGES.len() - 1)).max(64);
    let mut acc = vec![(0.0f64, 0.0f64); specs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for shell in V_SHELL_EDGES.windows(2) {
        let (lo, hi) = (shell[0], shell[1]);
        let mut sums = vec![(0.0f64, 0.0f64); specs.len()];
        for _ in 0..n_shell {
            let bp = dom.sample_boundary(&mut rng);
            let s = lo + (hi - lo) * rng.gen::<f64>();
            let dir = sample_unit_sphere(&mut rng);
            let v = dir * s;
            let trace = match weight {
                BoundaryWeight::Plain => 1.0,
                BoundaryWeight::IncomingFlux => {
                    let ndotv = bp.n.dot(&dir);
                    if ndotv < 0.0 {
                        -ndotv * s
                    } else {
                        0.0
                    }
                }
            };
            let base = if trace > 0.0 { h(&bp, &v).abs() } else { 0.0 };
            let jac = 4.0 * std::f64::consts::PI * s * s * (hi - lo) * area;
            for (i, spec) in specs.iter().enumerate() {
                let val = if base > 0.0 {
                    base.powf(spec.p) * (spec.p * spec.alpha * s * s).exp() * trace * jac
                } else {
                    0.0
                };
                sums[i].0 += val;
                sums[i].1 += val * val;
            }
        }
        for (i, (s1, s2)) in sums.into_iter().enumerate() {
            let mean = s1 / n_shell as f64;
            let var = (s2 / n_shell as f64 - mean * mean).max(0.0) / n_shell as f64;
            acc[i].0 += mean;
            acc[i].1 += var;
        }
    }
    acc.iter()
        .zip(specs)
        .map(|(&(integral, var), spec)| power_root_estimate(integral, var.sqrt(), spec.p))
        .collect()
}

/// Boundary surface quadrature: (point, area weight) pairs.
fn boundary_nodes(dom: &ConvexDomain, n_a: usize, n_b: usize) -> Vec<(BoundaryPoint, f64)> {
    let mut nodes = Vec::new();
    match *dom {
        ConvexDomain::Ball { radius } => {
            let (ts, tw) = gl_on(n_a, -1.0, 1.0);
            for (t, wt) in ts.iter().zip(&tw) {
                let sin = (1.0 - t * t).max(0.0).sqrt();
                for c in 0..n_b {
                    let phi = 2.0 * std::f64::consts::PI * c as f64 / n_b as f64;
                    let n = V3::new(*t, sin * phi.cos(), sin * phi.sin());
                    let w = radius * radius * wt * 2.0 * std::f64::consts::PI / n_b as f64;
                    nodes.push((BoundaryPoint { z: n * radius, n }, w));
                }
            }
        }
        ConvexDomain::FlatCap { sphere_radius, offset } => {
            let disc_r = (sphere_radius * sphere_radius - offset * offset).sqrt();
            let (rs, rw) = gl_on(n_a, 0.0, disc_r);
            for (r, wr) in rs.iter().zip(&rw) {
                for c in 0..n_b {
                    let phi = 2.0 * std::f64::consts::PI * c as f64 / n_b as f64;
                    let z = V3::new(0.0, r * phi.cos(), r * phi.sin());
                    let w = wr * r * 2.0 * std::f64::consts::PI / n_b as f64;
                    nodes.push((BoundaryPoint { z, n: V3::new(1.0, 0.0, 0.0) }, w));
                }
            }
            // Spherical zone y_1 in [-R, offset): area element R dy_1 dphi.
            let (ys, yw) = gl_on(n_a, -sphere_radius, offset);
            for (y1, wy) in ys.iter().zip(&yw) {
                let rho = (sphere_radius * sphere_radius - y1 * y1).max(0.0).sqrt();
                for c in 0..n_b {
                    let phi = 2.0 * std::f64::consts::PI * c as f64 / n_b as f64;
                    let y = V3::new(*y1, rho * phi.cos(), rho * phi.sin());
                    let w = sphere_radius * wy * 2.0 * std::f64::consts::PI / n_b as f64;
                    nodes.push((
                        BoundaryPoint { z: y - V3::new(offset, 0.0, 0.0), n: y / sphere_radius },
                        w,
                    ));
                }
            }
        }
    }
    nodes
}

fn boundary_norm_grid(
    dom: &ConvexDomain,
    h: &(dyn Fn(&BoundaryPoint, &V3) -> f64 + Sync),
    spec: &NormSpec,
    weight: BoundaryWeight,
    level: usize,
) -> NormEstimate {
    let run = |n_a: usize, n_ang: usize| -> f64 {
        let zs = boundary_nodes(dom, n_a, n_ang);
        let parts: Vec<f64> = zs
            .par_iter()
            .map(|(bp, wz)| {
                // Polar axis along the local normal keeps N = |t| smooth on
                // the integration range (no absolute-value kink).
                let (t_lo, t_hi) = match weight {
                    BoundaryWeight::Plain => (-1.0, 1.0),
                    BoundaryWeight::IncomingFlux => (-1.0, 0.0),
                };
                let vs = velocity_nodes_in_frame(&bp.n, n_a.div_ceil(2), n_ang, t_lo, t_hi);
                let mut acc = 0.0;
                for (v, wv) in &vs {
                    let s = v.norm();
                    let trace = match weight {
                        BoundaryWeight::Plain => 1.0,
                        BoundaryWeight::IncomingFlux => -bp.n.dot(v),
                    };
                    acc += wv
                        * h(bp, v).abs().powf(spec.p)
                        * (spec.p * spec.alpha * s * s).exp()
                        * trace;
                }
                acc * wz
            })
            .collect();
        let total: f64 = parts.iter().sum();
        total.max(0.0).powf(1.0 / spec.p)
    };
    let n_ang = level.saturating_sub(4).max(8);
    let coarse = run(level, n_ang);
    let fine = run(level + 4, n_ang + 2);
    NormEstimate { value: fine, error: (fine - coarse).abs() }
}

/// ||h||_{L^p_alpha} over the boundary, plain or incoming-flux weighted.
pub fn boundary_lp_norm(
    dom: &ConvexDomain,
    h: &(dyn Fn(&BoundaryPoint, &V3) -> f64 + Sync),
    spec: &NormSpec,
    weight: BoundaryWeight,
    method: NormMethod,
) -> Result<NormEstimate> {
    spec.validate()?;
    dom.validate()?;
    Ok(match method {
        NormMethod::Mc { samples, seed } => {
            boundary_norms_mc(dom, h, std::slice::from_ref(spec), weight, samples, seed)
                .pop()
                .unwrap()
        }
        NormMethod::Grid { level } => boundary_norm_grid(dom, h, spec, weight, level),
    })
}

// ---------------------------------------------------------------------------
// Grazing integrals and divergence scans
// ---------------------------------------------------------------------------

/// Dyadic Gauss-Legendre panels on [eps, top]: panel edges double away from
/// the cutoff so power/log endpoint behaviour is resolved uniformly.
fn dyadic_panels(eps: f64, top: f64, n_per_panel: usize) -> Vec<(f64, f64)> {
    let mut nodes = Vec::new();
    let mut lo = eps;
    while lo < top {
        let hi = (2.0 * lo).min(top);
        let (xs, ws) = gl_on(n_per_panel, lo, hi);
        nodes.extend(xs.into_iter().zip(ws));
        lo = hi;
    }
    nodes
}

/// Cutoff integral of |grad_x tau|^p |v|^b e^{-ap|v|^2} over the phase-space
/// region whose footpoint incidence exceeds eps, in the closed reduced form
/// (boundary parameterization, incidence t and speed rho separated).
///
/// Ball: 2r |dOmega| 2pi (int_eps^1 t^{2-p} dt)(int_0^inf rho^{2+b-p}
/// e^{-ap rho^2} drho) - the chord factor 2rt/rho supplies one extra t and
/// removes one rho. FlatCap flat face: footpoints on the quarter-radius disc,
/// speeds below half the face radius, flight capped at time 1, giving
/// area 2pi (int_eps^1 t^{1-p} dt)(int_0^{r2} rho^{3+b-p} e^{-ap rho^2} drho).
pub fn grazing_integral(dom: &ConvexDomain, p: f64, a: f64, b: f64, eps: f64) -> Result<f64> {
    if !(p >= 1.0 && a > 0.0 && b >= 0.0 && eps > 0.0 && eps < 1.0) {
        return Err(GkinError::InvalidNormSpec(format!(
            "grazing integral needs p >= 1, a > 0, b >= 0, 0 < eps < 1 (got p={p}, a={a}, b={b}, eps={eps})"
        )));
    }
    match *dom {
        ConvexDomain::Ball { radius } => {
            if p >= 3.0 + b {
                return Err(GkinError::InvalidNormSpec(format!(
                    "speed factor rho^{} is not integrable at 0",
                    2.0 + b - p
                )));
            }
            let t_factor = if (p - 3.0).abs() < 1e-12 {
                -eps.ln()
            } else {
                (1.0 - eps.powf(3.0 - p)) / (3.0 - p)
            };
            // int_0^inf rho^m e^{-c rho^2} drho = Gamma((m+1)/2) / (2 c^{(m+1)/2})
            let m = 2.0 + b - p;
            let c = a * p;
            let rho_factor = 0.5 * gamma((m + 1.0) / 2.0) / c.powf((m + 1.0) / 2.0);
            let area = 4.0 * std::f64::consts::PI * radius * radius;
            Ok(2.0 * radius * area * 2.0 * std::f64::consts::PI * t_factor * rho_factor)
        }
        ConvexDomain::FlatCap { .. } => {
            if p >= 4.0 + b {
                return Err(GkinError::InvalidNormSpec(format!(
                    "speed factor rho^{} is not integrable at 0",
                    3.0 + b - p
                )));
            }
            let r1 = dom.flat_radius().unwrap();
            let (region_r, r2) = (r1 / 4.0, r1 / 2.0);
            let t_factor = if (p - 2.0).abs() < 1e-12 {
                -eps.ln()
            } else {
                (1.0 - eps.powf(2.0 - p)) / (2.0 - p)
            };
            let rho_factor: f64 = dyadic_panels(r2 * 1e-12, r2, 12)
                .iter()
                .map(|(rho, w)| w * rho.powf(3.0 + b - p) * (-a * p * rho * rho).exp())
                .sum();
            let area = std::f64::consts::PI * region_r * region_r;
            Ok(area * 2.0 * std::f64::consts::PI * t_factor * rho_factor)
        }
    }
}

/// Independent evaluation path for `grazing_integral`: same boundary
/// parameterization, but quadrature in place of antiderivatives and flight
/// extents measured by ray tracing instead of chord formulas.
pub fn grazing_integral_measured(dom: &ConvexDomain, p: f64, a: f64, b: f64, eps: f64) -> Result<f64> {
    if !(p >= 1.0 && a > 0.0 && b >= 0.0 && eps > 0.0 && eps < 1.0) {
        return Err(GkinError::InvalidNormSpec("bad grazing parameters".into()));
    }
    match *dom {
        ConvexDomain::Ball { radius } => {
            // Footpoint fixed at r e1 by symmetry; chord length recovered by
            // two ray traces from the mid-chord point.
            let z = V3::new(radius, 0.0, 0.0);
            let area = 4.0 * std::f64::consts::PI * radius * radius;
            let t_nodes = dyadic_panels(eps, 1.0, 10);
            let rho_nodes = dyadic_panels(1e-4, 14.0, 10);
            let mut total = 0.0;
            for (t, wt) in &t_nodes {
                let dir = V3::new(-t, (1.0 - t * t).max(0.0).sqrt(), 0.0);
                let x_mid = z + dir * (radius * *t);
                let chord_len = dom.exit_time(&x_mid, &dir).unwrap_or(0.0)
                    + dom.exit_time(&x_mid, &-dir).unwrap_or(0.0);
                for (rho, wr) in &rho_nodes {
                    // N|v| trace weight t*rho, flight extent chord/rho, and
                    // the rho^2 volume element.
                    let s_extent = chord_len / rho;
                    total += wt
                        * wr
                        * t.powf(1.0 - p)
                        * rho.powf(1.0 + b - p)
                        * (-a * p * rho * rho).exp()
                        * rho
                        * rho
                        * s_extent;
                }
            }
            Ok(total * area * 2.0 * std::f64::consts::PI)
        }
        ConvexDomain::FlatCap { .. } => {
            let r1 = dom.flat_radius().unwrap();
            let (region_r, r2) = (r1 / 4.0, r1 / 2.0);
            let (zs, zw) = gl_on(8, 0.0, region_r);
            let n_psi = 12;
            let t_nodes = dyadic_panels(eps, 1.0, 10);
            let rho_nodes = dyadic_panels(r2 * 1e-5, r2, 10);
            let mut total = 0.0;
            // The integrand is independent of the position azimuth, so the
            // disc area element zeta dzeta dphi contributes a plain 2 pi
            // factor (applied at the end); psi below is the velocity azimuth.
            for (zeta, wz) in zs.iter().zip(&zw) {
                let z = V3::new(0.0, *zeta, 0.0);
                for ipsi in 0..n_psi {
                    let psi = 2.0 * std::f64::consts::PI * ipsi as f64 / n_psi as f64;
                    for (t, wt) in &t_nodes {
                        let sin = (1.0 - t * t).max(0.0).sqrt();
                        let dir = V3::new(-t, sin * psi.cos(), sin * psi.sin());
                        // Forward chord from the flat face, measured by a ray
                        // trace from a point nudged inside.
                        let x_in = z + dir * 1e-9;
                        let chord_len = 1e-9 + dom.exit_time(&x_in, &-dir).unwrap_or(0.0);
                        for (rho, wr) in &rho_nodes {
                            let s_extent = (chord_len / rho).min(1.0);
                            total += wz
                                * zeta
                                * (2.0 * std::f64::consts::PI / n_psi as f64)
                                * wt
                                * wr
                                * t.powf(1.0 - p)
                                * rho.powf(3.0 + b - p)
                                * (-a * p * rho * rho).exp()
                                * s_extent;
                        }
                    }
                }
            }
            Ok(total * 2.0 * std::f64::consts::PI)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ScanStatus {
    Convergent,
    Divergent,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub enum GrowthModel {
    /// Geometric tail: extrapolated limit and the per-halving delta ratio.
    Limit { value: f64, rate: f64 },
    /// Values grow like |log eps|: constant deltas per cutoff halving.
    LogPower,
    /// Values grow like eps^{-exponent}.
    Power { exponent: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct DivergenceVerdict {
    pub status: ScanStatus,
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    pub model: GrowthModel,
    pub note: String,
}

/// Cutoff refinement levels eps_k = 2^{-k}.
pub const SCAN_LEVELS: std::ops::RangeInclusive<u32> = 4..=14;

/// Classify a cutoff sequence by the ratio of consecutive deltas under
/// eps -> eps/2: ratio < 1 geometric tail (convergent), = 1 log growth,
/// 2^s power growth eps^{-s}.
fn classify(epsilons: Vec<f64>, values: Vec<f64>) -> DivergenceVerdict {
    let deltas: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let tail: Vec<f64> = deltas.iter().rev().take(6).rev().copied().collect();
    if tail.iter().any(|d| *d <= 0.0) {
        // Increments at rounding level: converged to machine accuracy.
        let value = *values.last().unwrap();
        return DivergenceVerdict {
            status: ScanStatus::Convergent,
            epsilons,
            values,
            model: GrowthModel::Limit { value, rate: 0.0 },
            note: "increments vanished within rounding".into(),
        };
    }
    let ratios: Vec<f64> = tail.windows(2).map(|w| w[1] / w[0]).collect();
    let log_mean = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
    let r_star = log_mean.exp();
    let spread = ratios.iter().map(|r| (r / r_star - 1.0).abs()).fold(0.0, f64::max);
    let note = format!("delta ratio {r_star:.4}, spread {spread:.2e}");
    if r_star <= 0.95 {
        let last = *values.last().unwrap();
        let delta = *tail.last().unwrap();
        let value = last + delta * r_star / (1.0 - r_star);
        DivergenceVerdict {
            status: ScanStatus::Convergent,
            epsilons,
            values,
            model: GrowthModel::Limit { value, rate: r_star },
            note,
        }
    } else if r_star <= 1.05 {
        let status = if spread <= 0.1 { ScanStatus::Divergent } else { ScanStatus::Inconclusive };
        DivergenceVerdict { status, epsilons, values, model: GrowthModel::LogPower, note }
    } else {
        let status = if spread <= 0.1 { ScanStatus::Divergent } else { ScanStatus::Inconclusive };
        DivergenceVerdict {
            status,
            epsilons,
            values,
            model: GrowthModel::Power { exponent: r_star.log2() },
            note,
        }
    }
}

/// Cutoff-refinement divergence diagnosis of the grazing integral.
pub fn divergence_scan(dom: &ConvexDomain, p: f64, a: f64, b: f64) -> Result<DivergenceVerdict> {
    let epsilons: Vec<f64> = SCAN_LEVELS.map(|k| 2.0f64.powi(-(k as i32))).collect();
    // When the speed factor itself fails to integrate at rho = 0 the value
    // is infinite at every incidence cutoff: divergence is certified without
    // (and cannot be resolved by) the cutoff refinement.
    let speed_excess = match dom {
        ConvexDomain::Ball { .. } => p - (3.0 + b),
        ConvexDomain::FlatCap { .. } => p - (4.0 + b),
    };
    if speed_excess >= 0.0 {
        let model = if speed_excess < 1e-12 {
            GrowthModel::LogPower
        } else {
            GrowthModel::Power { exponent: speed_excess }
        };
        return Ok(DivergenceVerdict {
            status: ScanStatus::Divergent,
            epsilons,
            values: Vec::new(),
            model,
            note: format!(
                "speed factor rho^{} non-integrable at rho = 0: \
                 integral is infinite for every incidence cutoff",
                2.0 + b - p + if matches!(dom, ConvexDomain::FlatCap { .. }) { 1.0 } else { 0.0 }
            ),
        });
    }
    let values = epsilons
        .iter()
        .map(|eps| grazing_integral(dom, p, a, b, *eps))
        .collect::<Result<Vec<f64>>>()?;
    Ok(classify(epsilons, values))
}

/// Cutoff scan of ||grad_x J g||^p_{L^p_alpha} restricted to the data's flat
/// region. There grad of the data vanishes along the boundary, so the whole
/// x-gradient is the chain-rule term -nu (grad_x tau) J g and the norm
/// reduces to the boundary parameterization with the exact flight-time
/// integral int_0^{T} (nu e^{-nu s})^p ds = nu^{p-1} (1 - e^{-p nu T}) / p.
pub fn w1p_of_jg_scan(
    dom: &ConvexDomain,
    data: &BoundaryData,
    spec: &NormSpec,
) -> Result<DivergenceVerdict> {
    spec.validate()?;
    let p = spec.p;
    let decay = p * (0.5 - spec.alpha);
    let epsilons: Vec<f64> = SCAN_LEVELS.map(|k| 2.0f64.powi(-(k as i32))).collect();
    let values: Vec<f64> = match (dom, data) {
        (ConvexDomain::Ball { radius }, BoundaryData::CapCutoff { theta1, .. }) => {
            // Footpoints in the polar cap where the data is identically 1;
            // speeds below r0 = 0.5; flight capped at min(chord, 1).
            let r = *radius;
            let r0 = 0.5;
            let cap_area = 2.0 * std::f64::consts::PI * r * r * (1.0 - theta1.cos());
            let rho_nodes = dyadic_panels(r0 * 1e-5, r0, 10);
            epsilons
                .iter()
                .map(|eps| {
                    let t_nodes = dyadic_panels(*eps, 1.0, 10);
                    let mut total = 0.0;
                    for (t, wt) in &t_nodes {
                        for (rho, wr) in &rho_nodes {
                            let cap_t = (2.0 * r * t / rho).min(1.0);
                            let nu_r = nu(*rho);
                            let flight = nu_r.powf(p - 1.0) * (1.0 - (-p * nu_r * cap_t).exp()) / p;
                            total += wt
                                * wr
                                * t.powf(1.0 - p)
                                * rho.powf(3.0 - p)
                                * flight
                                * (-decay * rho * rho).exp();
                        }
                    }
                    cap_area * 2.0 * std::f64::consts::PI * total
                })
                .collect()
        }
        (ConvexDomain::FlatCap { .. }, BoundaryData::FlatCutoff { r1 }) => {
            let (region_r, r2) = (r1 / 4.0, r1 / 2.0);
            let rho_nodes = dyadic_panels(r2 * 1e-5, r2, 10);
            // On this region every backward chord lasts longer than time 1
            // (checked by min_chord_over_flat_region in the tests), so the
            // flight cap is exactly min(chord, 1) = 1 and the double integral
            // separates.
            let area = std::f64::consts::PI * region_r * region_r;
            epsilons
                .iter()
                .map(|eps| {
                    let t_nodes = dyadic_panels(*eps, 1.0, 10);
                    let t_sum: f64 = t_nodes.iter().map(|(t, w)| w * t.powf(1.0 - p)).sum();
                    let rho_sum: f64 = rho_nodes
                        .iter()
                        .map(|(rho, w)| {
                            let nu_r = nu(*rho);
                            let flight = nu_r.powf(p - 1.0) * (1.0 - (-p * nu_r).exp()) / p;
                            w * rho.powf(3.0 - p) * flight * (-decay * rho * rho).exp()
                        })
                        .sum();
                    area * 2.0 * std::f64::consts::PI * t_sum * rho_sum
                })
                .collect()
        }
        _ => {
            return Err(GkinError::InvalidDomain(
                "gradient scan pairs FlatCutoff data with flat_cap and CapCutoff data with ball"
                    .into(),
            ))
        }
    };
    Ok(classify(epsilons, values))
}

/// Minimum forward chord time (unit speed scaled by 1/r2-speeds) from the
/// data region of the flat face: certifies the flight cap used by the scan.
pub fn min_chord_over_flat_region(dom: &ConvexDomain, r1: f64, r2: f64) -> f64 {
    let mut min_time = f64::INFINITY;
    for iz in 0..9 {
        let zeta = r1 / 4.0 * iz as f64 / 8.0;
        let z = V3::new(0.0, zeta, 0.0);
        for ipsi in 0..12 {
            let psi = 2.0 * std::f64::consts::PI * ipsi as f64 / 12.0;
            for it in 1..=12 {
                let t = it as f64 / 12.0;
                let sin = (1.0 - t * t).max(0.0).sqrt();
                let dir = V3::new(-t, sin * psi.cos(), sin * psi.sin());
                let x_in = z + dir * 1e-9;
                let chord_len = 1e-9 + dom.exit_time(&x_in, &-dir).unwrap_or(0.0);
                // Slowest crossing in the region moves at speed r2.
                min_time = min_time.min(chord_len / r2);
            }
        }
    }
    min_time
}

/// Max relative error, over the cutoff levels, between the quadrature of
/// 2 pi int_eps^{r0/2r} (log r0 - log 2rt)/t dt and the closed form
/// pi log^2(r0 / (2 r eps)).
pub fn log_divergence_identity_max_err(r0: f64, r: f64) -> f64 {
    let top = r0 / (2.0 * r);
    let mut worst: f64 = 0.0;
    for k in SCAN_LEVELS {
        let eps = 2.0f64.powi(-(k as i32));
        if eps >= top {
            continue;
        }
        let quad: f64 = dyadic_panels(eps, top, 12)
            .iter()
            .map(|(t, w)| w * (r0 / (2.0 * r * t)).ln() / t)
            .sum::<f64>()
            * 2.0
            * std::f64::consts::PI;
        let closed = std::f64::consts::PI * (r0 / (2.0 * r * eps)).ln().powi(2);
        worst = worst.max(((quad - closed) / closed).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Eta-gap scan
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EtaGapSample {
    pub speed: f64,
    pub cos: f64,
    pub gap: f64,
    pub certified: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EtaGapScan {
    /// min over the grid of (gap - quadrature error bound).
    pub certified_min: f64,
    pub min_speed: f64,
    /// Cosine of the angle between v and the outward normal at the minimum.
    pub min_cos: f64,
    /// Gap at v = 0 (analytic value 2^{-3/2}).
    pub limit_gap: f64,
    /// Largest scanned speed whose worst-case gap stays >= 2^{-3/2} / 2.
    pub half_limit_speed: f64,
    /// Empirical modulus: max |gap difference| between adjacent grid points.
    pub max_adjacent_jump: f64,
    pub speed_step: f64,
    pub cos_step: f64,
    #[serde(skip)]
    pub samples: Vec<EtaGapSample>,
}

/// Scan the gap nu(v) e^{-|v|^2/2} - (half-space gain) over speeds in
/// [0, r0] and orientations of v against the half-space normal. By
/// rotational symmetry one normal direction suffices; the scan grid covers
/// the full orientation range cos in [-1, 1].
pub fn eta_gap_scan(r0: f64, n_speed: usize, n_cos: usize) -> EtaGapScan {
    let normal = V3::new(1.0, 0.0, 0.0);
    let q = GainQuad::default();
    let speeds: Vec<f64> =
        (0..n_speed).map(|i| r0 * i as f64 / (n_speed - 1) as f64).collect();
    let coses: Vec<f64> = (0..n_cos).map(|j| -1.0 + 2.0 * j as f64 / (n_cos - 1) as f64).collect();
    let rows: Vec<Vec<(f64, f64)>> = speeds
        .par_iter()
        .map(|s| {
            coses
                .iter()
                .map(|u| {
                    let sin = (1.0 - u * u).max(0.0).sqrt();
                    let v = V3::new(*u, sin, 0.0) * *s;
                    let (gain, err) = half_space_gain_certified(&v, &normal, &q);
                    let gap = nu(*s) * (-0.5 * s * s).exp() - gain;
                    (gap - err, gap)
                })
                .collect()
        })
        .collect();
    let mut certified_min = f64::INFINITY;
    let mut min_speed = 0.0;
    let mut min_cos = 0.0;
    let mut max_jump: f64 = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (j, &(cert, gap)) in row.iter().enumerate() {
            if cert < certified_min {
                certified_min = cert;
                min_speed = speeds[i];
                min_cos = coses[j];
            }
            if i + 1 < rows.len() {
                max_jump = max_jump.max((rows[i + 1][j].1 - gap).abs());
            }
            if j + 1 < row.len() {
                max_jump = max_jump.max((row[j + 1].1 - gap).abs());
            }
        }
    }
    let half_limit_speed = speeds
        .iter()
        .enumerate()
        .take_while(|(i, _)| rows[*i].iter().all(|&(cert, _)| cert >= INV_SQRT8 / 2.0))
        .map(|(_, s)| *s)
        .last()
        .unwrap_or(0.0);
    let samples = rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            let speeds = &speeds;
            let coses = &coses;
            row.iter().enumerate().map(move |(j, &(cert, gap))| EtaGapSample {
                speed: speeds[i],
                cos: coses[j],
                gap,
                certified: cert,
            })
        })
        .collect();
    EtaGapScan {
        certified_min,
        min_speed,
        min_cos,
        limit_gap: rows[0][0].1,
        half_limit_speed,
        max_adjacent_jump: max_jump,
        speed_step: r0 / (n_speed - 1) as f64,
        cos_step: 2.0 / (n_cos - 1) as f64,
        samples,
    }
}

// ---------------------------------------------------------------------------
// Operator-norm bound checks
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct OpNormCase {
    pub operator: &'static str,
    pub p: f64,
    pub alpha: f64,
    pub func_index: usize,
    pub measured: f64,
    pub input_norm: f64,
    pub bound_constant: f64,
    /// Combined standard error of (measured - bound * input_norm).
    pub sigma: f64,
    pub holds_within_3_sigma: bool,
}

/// Random smooth test functions: trigonometric spatial modulation times a
/// Maxwellian velocity profile, strictly positive.
fn random_test_params(rng: &mut impl Rng) -> (V3, V3, f64) {
    let k = gaussian3(rng) * 2.0;
    let w = gaussian3(rng);
    let phase = rng.gen::<f64>() * std::f64::consts::PI * 2.0;
    (k, w, phase)
}

fn test_profile(k: &V3, w: &V3, phase: f64, x: &V3, v: &V3) -> f64 {
    (1.0 + 0.5 * (k.dot(x) + phase).sin()) * (1.0 + 0.3 * w.dot(v).cos())
        * (-0.5 * v.norm_squared()).exp()
}

/// Measured norm ratios of J against the incoming-trace norm, and of S
/// against the volume norm, for a family of random inputs at several (p,
/// alpha). Bounds: ||Jg|| <= (p nu(0))^{-1/p} ||g||_{incoming} and
/// ||S f|| <= nu(0)^{-1} ||f||.
pub fn op_norm_checks(
    dom: &ConvexDomain,
    n_funcs: usize,
    samples: usize,
    seed: u64,
) -> Vec<OpNormCase> {
    let specs: Vec<NormSpec> = [1.0, 2.0, 3.0]
        .iter()
        .flat_map(|&p| [0.0, 0.1].iter().map(move |&alpha| NormSpec { p, alpha }))
        .collect();
    let nu0 = nu(0.0);
    let lq = crate::transport::LineQuadrature::default();
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for func_index in 0..n_funcs {
        let (k, w, phase) = random_test_params(&mut rng);
        let sub_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(func_index as u64);

        let g = move |bp: &BoundaryPoint, v: &V3| test_profile(&k, &w, phase, &bp.z, v);
        let jg = |x: &V3, v: &V3| crate::transport::apply_j(dom, &g, x, v).unwrap_or(0.0);
        let jg_norms = volume_norms_mc(dom, &jg, &specs, samples, sub_seed);
        let g_norms =
            boundary_norms_mc(dom, &g, &specs, BoundaryWeight::IncomingFlux, samples, sub_seed + 1);
        for ((spec, num), den) in specs.iter().zip(&jg_norms).zip(&g_norms) {
            let bound = (spec.p * nu0).powf(-1.0 / spec.p);
            let sigma = (num.error * num.error + bound * bound * den.error * den.error).sqrt();
            out.push(OpNormCase {
                operator: "J",
                p: spec.p,
                alpha: spec.alpha,
                func_index,
                measured: num.value,
                input_norm: den.value,
                bound_constant: bound,
                sigma,
                holds_within_3_sigma: num.value <= bound * den.value + 3.0 * sigma,
            });
        }

        let f = move |x: &V3, v: &V3| test_profile(&k, &w, phase, x, v);
        let sf = |x: &V3, v: &V3| crate::transport::apply_s(dom, &f, x, v, &lq).unwrap_or(0.0);
        let sf_norms = volume_norms_mc(dom, &sf, &specs, samples, sub_seed + 2);
        let f_norms = volume_norms_mc(dom, &f, &specs, samples, sub_seed + 3);
        for ((spec, num), den) in specs.iter().zip(&sf_norms).zip(&f_norms) {
            let bound = 1.0 / nu0;
            let sigma = (num.error * num.error + bound * bound * den.error * den.error).sqrt();
            out.push(OpNormCase {
                operator: "S",
                p: spec.p,
                alpha: spec.alpha,
                func_index,
                measured: num.value,
                input_norm: den.value,
                bound_constant: bound,
                sigma,
                holds_within_3_sigma: num.value <= bound * den.value + 3.0 * sigma,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Change-of-variables identities
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CovCheck {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
}

impl CovCheck {
    pub fn within_3_sigma(&self) -> bool {
        let sigma = (self.lhs_se * self.lhs_se + self.rhs_se * self.rhs_se).sqrt();
        (self.lhs - self.rhs).abs() <= 3.0 * sigma
    }
}

fn mc_mean(n: usize, mut draw: impl FnMut() -> f64) -> (f64, f64) {
    let mut s = 0.0;
    let mut s2 = 0.0;
    for _ in 0..n {
        let val = draw();
        s += val;
        s2 += val * val;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// Flight-variable swap: the triple integral of a test function over
/// backward flights {s < tau(x, v)} equals the same integral anchored at the
/// footpoint side {t < forward exit of y along v}, with unit Jacobian.
pub fn flight_change_of_variables(dom: &ConvexDomain, n: usize, seed: u64) -> CovCheck {
    let h = |y: &V3, v: &V3, s: f64| {
        (-0.5 * y.norm_squared()).exp()
            * (1.0 + 0.2 * (3.0 * y.x).sin())
            * (-0.4 * v.norm_squared()).exp()
            * (-0.3 * s).exp()
    };
    let vol = dom.volume();
    let diam = dom.diameter();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lhs, lhs_se) = mc_mean(n, || {
        let x = dom.sample_interior(&mut rng);
        let v = gaussian3(&mut rng);
        let s_max = diam / v.norm();
        let s = s_max * rng.gen::<f64>();
        match dom.exit_time(&x, &v) {
            Ok(tau) if s < tau => h(&(x - v * s), &v, s) * s_max * vol,
            _ => 0.0,
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (rhs, rhs_se) = mc_mean(n, || {
        let y = dom.sample_interior(&mut rng);
        let v = gaussian3(&mut rng);
        let s_max = diam / v.norm();
        let t = s_max * rng.gen::<f64>();
        // Forward exit time along +v is the backward exit time against -v.
        match dom.exit_time(&y, &-v) {
            Ok(tau_fwd) if t < tau_fwd => h(&y, &v, t) * s_max * vol,
            _ => 0.0,
        }
    });
    CovCheck { lhs, lhs_se, rhs, rhs_se }
}

/// Volume-to-boundary parameterization: int_Omega F dx rewritten over
/// (footpoint z, incoming v, flight time s) with the N(z,v)|v| surface
/// weight. Both sides share the same Gaussian velocity averaging.
pub fn boundary_change_of_variables(dom: &ConvexDomain, n: usize, seed: u64) -> CovCheck {
    let f = |x: &V3, v: &V3| {
        (-0.5 * x.norm_squared() - 0.4 * v.norm_squared()).exp()
            * (1.0 + 0.3 * (2.0 * x.y + v.x).sin())
    };
    let vol = dom.volume();
    let area = dom.boundary_area();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lhs, lhs_se) = mc_mean(n, || {
        let x = dom.sample_interior(&mut rng);
        let v = gaussian3(&mut rng);
        f(&x, &v) * vol
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (rhs, rhs_se) = mc_mean(n, || {
        let bp = dom.sample_boundary(&mut rng);
        let v = gaussian3(&mut rng);
        let ndotv = bp.n.dot(&v);
        if ndotv >= 0.0 {
            return 0.0;
        }
        let chord = dom.chord_time(&bp, &v);
        let s = chord * rng.gen::<f64>();
        let x = bp.z + v * s;
        f(&x, &v) * (-ndotv) * chord * area
    });
    CovCheck { lhs, lhs_se, rhs, rhs_se }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // L2 norm of exp(-|v|^2) over Ball(r = 1): sqrt(4 pi / 3 * (pi/2)^{3/2}).
    const GAUSS_L2_BALL_R1: f64 = 2.871_667_892_311_199_6;
    const INCOMING_MAXWELL_FLUX_R_HALF: f64 = 19.739_208_802_178_716;

    #[test]
    fn norm_spec_validation() {
        assert!(NormSpec::new(0.9, 0.0).is_err());
        assert!(NormSpec::new(1.0, -0.1).is_err());
        assert!(matches!(
            NormSpec::new(2.0, 0.5),
            Err(GkinError::NonIntegrableWeight { .. })
        ));
        let spec = NormSpec::new(2.0, 0.2).unwrap();
        assert!(spec.admissible(0.5));
        assert!(!NormSpec::new(2.0, 0.26).unwrap().admissible(0.5));
    }

    #[test]
    fn indicator_norm_gives_volume_times_unit_ball() {
        let dom = ConvexDomain::Ball { radius: 0.7 };
        let f = |_: &V3, v: &V3| if v.norm() <= 1.0 { 1.0 } else { 0.0 };
        let spec = NormSpec { p: 1.0, alpha: 0.0 };
        let est =
            lp_norm(&dom, &f, &spec, NormMethod::Mc { samples: 120_000, seed: 3 }).unwrap();
        let want = dom.volume() * 4.0 / 3.0 * std::f64::consts::PI;
        assert!(
            (est.value - want).abs() <= 4.0 * est.error.max(1e-9),
            "got {} want {want} se {}",
            est.value,
            est.error
        );
    }

    #[test]
    fn gaussian_l2_norm_matches_closed_form_both_methods() {
        let dom = ConvexDomain::Ball { radius: 1.0 };
        let f = |_: &V3, v: &V3| (-v.norm_squared()).exp();
        let spec = NormSpec { p: 2.0, alpha: 0.0 };
        let grid = lp_norm(&dom, &f, &spec, NormMethod::Grid { level: 12 }).unwrap();
        assert_relative_eq!(grid.value, GAUSS_L2_BALL_R1, max_relative = 1e-6);
        let mc = lp_norm(&dom, &f, &spec, NormMethod::Mc { samples: 120_000, seed: 5 }).unwrap();
        assert!((mc.value - GAUSS_L2_BALL_R1).abs() <= 4.0 * mc.error);
    }

    #[test]
    fn plain_boundary_norm_of_truncated_indicator() {
        let dom = ConvexDomain::Ball { radius: 1.0 };
        let h = |_: &BoundaryPoint, v: &V3| if v.norm() <= 1.0 { 1.0 } else { 0.0 };
        let spec = NormSpec { p: 1.0, alpha: 0.0 };
        let est = boundary_lp_norm(
            &dom,
            &h,
            &spec,
            BoundaryWeight::Plain,
            NormMethod::Mc { samples: 120_000, seed: 11 },
        )
        .unwrap();
        let want = 4.0 * std::f64::consts::PI * 4.0 / 3.0 * std::f64::consts::PI;
        assert!((est.value - want).abs() <= 4.0 * est.error.max(1e-9));
    }

    #[test]
    fn incoming_flux_norm_of_maxwellian_matches_reduction() {
        // For data e^{-|v|^2/2}, p = 1, alpha = 0 the incoming-trace integral
        // reduces per surface point to 2 pi int s^3 e^{-s^2/2} ds int_0^1 t dt
        // = pi / (2 c^2) with c = 1/2, times the area.
        let dom = ConvexDomain::Ball { radius: 0.5 };
        let h = |_: &BoundaryPoint, v: &V3| (-0.5 * v.norm_squared()).exp();
        let spec = NormSpec { p: 1.0, alpha: 0.0 };
        let est = boundary_lp_norm(
            &dom,
            &h,
            &spec,
            BoundaryWeight::IncomingFlux,
            NormMethod::Grid { level: 14 },
        )
        .unwrap();
        assert_relative_eq!(est.value, INCOMING_MAXWELL_FLUX_R_HALF, max_relative = 1e-6);
    }

    #[test]
    fn incoming_norm_bounded_by_plain_norm_on_truncated_velocities() {
        // N(z,v)|v| <= 1 once |v| <= 1, so the flux-weighted p-th power
        // integral is dominated by the plain one for truncated data.
        let dom = ConvexDomain::FlatCap { sphere_radius: 0.6, offset: 0.2 };
        let h = |_: &BoundaryPoint, v: &V3| {
            if v.norm() <= 1.0 {
                (-0.5 * v.norm_squared()).exp()
            } else {
                0.0
            }
        };
        let spec = NormSpec { p: 1.0, alpha: 0.0 };
        let flux = boundary_lp_norm(
            &dom,
            &h,
            &spec,
            BoundaryWeight::IncomingFlux,
            NormMethod::Mc { samples: 60_000, seed: 21 },
        )
        .unwrap();
        let plain = boundary_lp_norm(
            &dom,
            &h,
            &spec,
            BoundaryWeight::Plain,
            NormMethod::Mc { samples: 60_000, seed: 22 },
        )
        .unwrap();
        assert!(flux.value <= plain.value + 3.0 * (flux.error + plain.error));
    }

    #[test]
    fn reduced_and_measured_grazing_integrals_agree() {
        let flat = ConvexDomain::FlatCap { sphere_radius: 0.5, offset: 0.1 };
        let ball = ConvexDomain::Ball { radius: 0.5 };
        for dom in [ball, flat] {
            let reduced = grazing_integral(&dom, 1.5, 1.0, 0.0, 1e-3).unwrap();
            let measured = grazing_integral_measured(&dom, 1.5, 1.0, 0.0, 1e-3).unwrap();
            assert_relative_eq!(reduced, measured, max_relative = 0.02);
        }
    }

    #[test]
    fn ball_t_factor_limit_matches_antiderivative() {
        // For p = 2.5 the incidence factor tends to 1/(3 - p) = 2.
        let dom = ConvexDomain::Ball { radius: 0.5 };
        let tiny = grazing_integral(&dom, 2.5, 1.0, 0.0, 1e-14).unwrap();
        let radius = 0.5f64;
        let area = 4.0 * std::f64::consts::PI * radius * radius;
        let m: f64 = 2.0 + 0.0 - 2.5;
        let c: f64 = 2.5;
        let rho_factor = 0.5 * gamma((m + 1.0) / 2.0) / c.powf((m + 1.0) / 2.0);
        let scale = 2.0 * radius * area * 2.0 * std::f64::consts::PI * rho_factor;
        assert_relative_eq!(tiny / scale, 2.0, max_relative = 1e-6);
    }

    #[test]
    fn divergence_scan_reproduces_the_geometry_thresholds() {
        let flat = ConvexDomain::FlatCap { sphere_radius: 0.5, offset: 0.1 };
        let ball = ConvexDomain::Ball { radius: 0.5 };
        for p in [1.0, 1.5, 1.9, 2.0, 2.5, 2.9, 3.0] {
            let vf = divergence_scan(&flat, p, 1.0, 0.0).unwrap();
            let expect_flat =
                if p < 2.0 { ScanStatus::Convergent } else { ScanStatus::Divergent };
            assert_eq!(vf.status, expect_flat, "flat p={p}: {}", vf.note);
            let vb = divergence_scan(&ball, p, 1.0, 0.0).unwrap();
            let expect_ball =
                if p < 3.0 { ScanStatus::Convergent } else { ScanStatus::Divergent };
            assert_eq!(vb.status, expect_ball, "ball p={p}: {}", vb.note);
        }
    }

    #[test]
    fn convergent_scan_values_stabilize() {
        // The near-threshold exponents (flat 1.9, ball 2.9) are excluded:
        // their geometric tail rate 2^{-0.1} is genuine but the two finest
        // levels still differ by ~4%, so the 1% bar only applies away from
        // the threshold.
        let ball = ConvexDomain::Ball { radius: 0.5 };
        for p in [1.0, 1.5, 2.0, 2.5] {
            let verdict = divergence_scan(&ball, p, 1.0, 0.0).unwrap();
            let n = verdict.values.len();
            let rel = (verdict.values[n - 1] - verdict.values[n - 2]).abs() / verdict.values[n - 1];
            assert!(rel < 0.01, "ball p={p}: last refinement moved by {rel}");
        }
        let flat = ConvexDomain::FlatCap { sphere_radius: 0.5, offset: 0.1 };
        for p in [1.0, 1.5] {
            let verdict = divergence_scan(&flat, p, 1.0, 0.0).unwrap();
            let n = verdict.values.len();
            let rel = (verdict.values[n - 1] - verdict.values[n - 2]).abs() / verdict.values[n - 1];
            assert!(rel < 0.01, "flat p={p}: last refinement moved by {rel}");
        }
    }

    #[test]
    fn log_growth_shows_constant_deltas() {
        let flat = ConvexDomain::FlatCap { sphere_radius: 0.5, offset: 0.1 };
        let verdict = divergence_scan(&flat, 2.0, 1.0, 0.0).unwrap();
        assert!(matches!(verdict.model, GrowthModel::LogPower), "{:?}", verdict.model);
    }

    #[test]
    fn gradient_scan_matches_the_thresholds_for_real_data() {
        let flat = ConvexDomain::FlatCap { sphere_radius: 0.5, offset: 0.1 };
        let flat_data = BoundaryData::FlatCutoff { r1: 0.4 };
        let v = w1p_of_jg_scan(&flat, &flat_data, &NormSpec { p: 1.5, alpha: 0.1 }).unwrap();
        assert_eq!(v.status, ScanStatus::Convergent, "{}", v.note);
        let v = w1p_of_jg_scan(&flat, &flat_data, &NormSpec { p: 2.0, alpha: 0.1 }).unwrap();
        assert_eq!(v.status, ScanStatus::Divergent, "{}", v.note);

        let ball = ConvexDomain::Ball { radius: 0.5 };
        let ball_data = BoundaryData::default();
        let v = w1p_of_jg_scan(&ball, &ball_data, &NormSpec { p: 2.5, alpha: 0.1 }).unwrap();
        assert_eq!(v.status, ScanStatus::Convergent, "{}", v.note);
        let v = w1p_of_jg_scan(&ball, &ball_data, &NormSpec { p: 3.0, alpha: 0.1 }).unwrap();
        assert_eq!(v.status, ScanStatus::Divergent, "{}", v.note);
    }

    #[test]
    fn flat_region_chords_outlast_the_flight_cap() {
        let flat = ConvexDomain::FlatCap { sphere_radius: 0.5, offset: 0.1 };
        let r1 = 0.4;
        assert!(min_chord_over_flat_region(&flat, r1, r1 / 2.0) > 1.0);
    }

    #[test]
    fn gradient_of_jg_is_the_chain_rule_term_where_data_is_flat() {
        // Central finite differences of J g against -nu (grad_x tau) J g at
        // points whose footpoint lies in the constant part of the data.
        let dom = ConvexDomain::Ball { radius: 0.5 };
        let data = BoundaryData::default();
        let g = |bp: &BoundaryPoint, v: &V3| data.eval(&dom, bp, v);
        let jg = |x: &V3, v: &V3| crate::transport::apply_j(&dom, &g, x, v).unwrap();
        let probes = [
            (V3::new(0.1, 0.05, -0.02), V3::new(-0.8, 0.1, 0.0)),
            (V3::new(-0.05, 0.1, 0.1), V3::new(-0.9, 0.15, 0.1)),
            (V3::new(0.2, -0.1, 0.0), V3::new(-0.9, 0.2, -0.1)),
        ];
        for (x, v) in probes {
            let fp = dom.footpoint(&x, &v).unwrap();
            let theta = (fp.point.z.x / 0.5).clamp(-1.0, 1.0).acos();
            assert!(theta < std::f64::consts::FRAC_PI_6, "probe footpoint must sit in the cap");
            let grad = dom.grad_x_tau(&x, &v).unwrap() * (-nu(v.norm()) * jg(&x, &v));
            let h = 1e-6;
            for axis in 0..3 {
                let mut e = V3::zeros();
                e[axis] = h;
                let fd = (jg(&(x + e), &v) - jg(&(x - e), &v)) / (2.0 * h);
                assert_relative_eq!(fd, grad[axis], max_relative = 1e-4, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn log_divergence_identity_holds_to_a_tenth_percent() {
        assert!(log_divergence_identity_max_err(0.5, 0.25) < 1e-3);
    }

    #[test]
    fn eta_gap_scan_limit_and_location() {
        let scan = eta_gap_scan(0.5, 11, 11);
        assert_relative_eq!(scan.limit_gap, INV_SQRT8, max_relative = 1e-3);
        assert!(scan.certified_min > 0.0, "gap must stay positive: {}", scan.certified_min);
        // The worst case sits at the largest speed, head-on incidence.
        assert_relative_eq!(scan.min_speed, 0.5, epsilon = 1e-12);
        assert_relative_eq!(scan.min_cos, -1.0, epsilon = 1e-12);
        assert_relative_eq!(scan.certified_min, 0.069_762_832_7, epsilon = 3e-4);
        assert!(scan.half_limit_speed > 0.0 && scan.half_limit_speed < 0.5);
    }

    #[test]
    fn operator_norm_bounds_hold_for_random_functions() {
        let dom = ConvexDomain::Ball { radius: 0.8 };
        let cases = op_norm_checks(&dom, 4, 30_000, 17);
        for case in &cases {
            assert!(
                case.holds_within_3_sigma,
                "{} bound violated at p={}, alpha={}: {} vs {} * {}",
                case.operator, case.p, case.alpha, case.measured, case.bound_constant,
                case.input_norm
            );
        }
        assert_eq!(cases.len(), 4 * 6 * 2);
    }

    #[test]
    fn change_of_variables_identities_hold() {
        for dom in [
            ConvexDomain::Ball { radius: 0.7 },
            ConvexDomain::FlatCap { sphere_radius: 0.6, offset: 0.15 },
        ] {
            let flights = flight_change_of_variables(&dom, 80_000, 29);
            assert!(
                flights.within_3_sigma(),
                "flight swap: {} +- {} vs {} +- {}",
                flights.lhs, flights.lhs_se, flights.rhs, flights.rhs_se
            );
            let surface = boundary_change_of_variables(&dom, 80_000, 31);
            assert!(
                surface.within_3_sigma(),
                "boundary swap: {} +- {} vs {} +- {}",
                surface.lhs, surface.lhs_se, surface.rhs, surface.rhs_se
            );
        }
    }
}
