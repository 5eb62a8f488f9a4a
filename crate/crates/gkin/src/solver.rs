//! Neumann/Picard solution of f = J g + S K f by grid collocation, plus an
//! independent backward-path Monte Carlo estimator for pointwise values.
//!
//! The deterministic iteration alternates a velocity-space collision matrix
//! (Nystrom discretization of K with a detailed-balance-corrected diagonal)
//! with characteristic line integrals for S, interpolating the collision
//! field spatially. Working with H = K f per iteration keeps the boundary
//! term J g exact: probe values are J g (exact) + S H (interpolated), so the
//! grid only carries the collision correction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{nu, KernelSampler, ZTable};
use crate::error::{GkinError, Result};
use crate::geometry::{ConvexDomain, V3};
use crate::quad::{gl_on, VelocityQuadrature};
use crate::transport::{BoundaryData, LineQuadrature};

/// Grid resolution knobs: n_x controls each spatial direction, n_v_r the
/// radial velocity nodes, n_v_ang both angular velocity directions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_v_r: usize,
    pub n_v_ang: usize,
    pub v_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n_x: 12, n_v_r: 10, n_v_ang: 8, v_max: 6.0 }
    }
}

/// Velocity grid: product of Gauss-Legendre radial nodes (three panels of
/// [0, v_max]), Gauss-Legendre polar cosine, and uniform azimuth. Doubles as
/// a quadrature rule (for the collision matrix) and an interpolation lattice.
#[derive(Clone, Debug)]
pub struct VGrid {
    pub s: Vec<f64>,
    pub s_w: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_w: Vec<f64>,
    pub n_phi: usize,
    pub v_max: f64,
}

impl VGrid {
    pub fn new(spec: &GridSpec) -> Self {
        let thirds = [spec.n_v_r - 2 * (spec.n_v_r / 3), spec.n_v_r / 3, spec.n_v_r / 3];
        let cuts = [0.0, spec.v_max / 4.0, spec.v_max / 2.0, spec.v_max];
        let mut s = Vec::new();
        let mut s_w = Vec::new();
        for (k, n) in thirds.iter().enumerate() {
            let (xs, ws) = gl_on(*n, cuts[k], cuts[k + 1]);
            s.extend(xs);
            s_w.extend(ws);
        }
        let (mu, mu_w) = gl_on(spec.n_v_ang, -1.0, 1.0);
        VGrid { s, s_w, mu, mu_w, n_phi: spec.n_v_ang, v_max: spec.v_max }
    }

    pub fn len(&self) -> usize {
        self.s.len() * self.mu.len() * self.n_phi
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.mu.len() + b) * self.n_phi + c
    }

    /// Node velocity: polar axis +e1 (aligned with the boundary-data axis).
    pub fn node(&self, m: usize) -> V3 {
        let c = m % self.n_phi;
        let b = (m / self.n_phi) % self.mu.len();
        let a = m / (self.n_phi * self.mu.len());
        let (s, mu) = (self.s[a], self.mu[b]);
        let sin = (1.0 - mu * mu).max(0.0).sqrt();
        let phi = 2.0 * std::f64::consts::PI * c as f64 / self.n_phi as f64;
        V3::new(s * mu, s * sin * phi.cos(), s * sin * phi.sin())
    }

    /// Quadrature weight including the s^2 Jacobian and the 2 pi / n azimuth.
    pub fn weight(&self, m: usize) -> f64 {
        let b = (m / self.n_phi) % self.mu.len();
        let a = m / (self.n_phi * self.mu.len());
        self.s_w[a] * self.s[a] * self.s[a] * self.mu_w[b] * 2.0 * std::f64::consts::PI
            / self.n_phi as f64
    }

    /// Multilinear interpolation stencil in (s, mu, phi); periodic in phi,
    /// clamped in s and mu, and 0 beyond v_max.
    pub fn interp_weights(&self, v: &V3, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let speed = v.norm();
        if speed > self.v_max {
            return;
        }
        let (ai, at) = bracket_clamped(&self.s, speed);
        let mu = if speed > 1e-14 { (v.x / speed).clamp(-1.0, 1.0) } else { 0.0 };
        let (bi, bt) = bracket_clamped(&self.mu, mu);
        let phi = v.z.atan2(v.y).rem_euclid(2.0 * std::f64::consts::PI);
        let step = 2.0 * std::f64::consts::PI / self.n_phi as f64;
        let cf = phi / step;
        let ci = (cf as usize).min(self.n_phi - 1);
        let ct = cf - ci as f64;
        let cj = (ci + 1) % self.n_phi;
        for (a, wa) in [(ai, 1.0 - at), (ai + 1, at)] {
            if wa == 0.0 {
                continue;
            }
            for (b, wb) in [(bi, 1.0 - bt), (bi + 1, bt)] {
                if wb == 0.0 {
                    continue;
                }
                for (c, wc) in [(ci, 1.0 - ct), (cj, ct)] {
                    if wc == 0.0 {
                        continue;
                    }
                    out.push((self.index(a, b, c), wa * wb * wc));
                }
            }
        }
    }
}

/// Clamped linear bracket in a sorted node list: returns (i, t) with the
/// value between nodes i and i+1 at fraction t; outside the node range the
/// nearer end is used with t in {0, 1}.
fn bracket_clamped(nodes: &[f64], x: f64) -> (usize, f64) {
    let n = nodes.len();
    if n == 1 || x <= nodes[0] {
        return (0, 0.0);
    }
    if x >= nodes[n - 1] {
        return (n - 2, 1.0);
    }
    let mut i = nodes.partition_point(|&p| p <= x) - 1;
    if i > n - 2 {
        i = n - 2;
    }
    (i, (x - nodes[i]) / (nodes[i + 1] - nodes[i]))
}

/// Spatial grid, domain-adapted.
#[derive(Clone, Debug)]
pub enum XGrid {
    /// Ball: centre node + shells at Chebyshev-spaced radii (outermost at
    /// 0.995 r), uniform polar cosine (axis +e1) and azimuth.
    Spherical { rho: Vec<f64>, n_mu: usize, n_phi: usize },
    /// FlatCap: full Cartesian lattice over the bounding box with an
    /// inside-mask; interpolation renormalises over interior corners.
    Cartesian { axes: [Vec<f64>; 3], inside: Vec<bool> },
}

impl XGrid {
    pub fn new(dom: &ConvexDomain, spec: &GridSpec) -> Self {
        let n = spec.n_x;
        match *dom {
            ConvexDomain::Ball { radius } => {
                let rho = (1..=n)
                    .map(|a| {
                        0.995 * radius * 0.5
                            * (1.0 - (std::f64::consts::PI * (2 * a - 1) as f64 / (2 * n) as f64).cos())
                    })
                    .collect();
                XGrid::Spherical { rho, n_mu: n, n_phi: n }
            }
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                let eps = 1e-3 * sphere_radius;
                let lo = [-(sphere_radius + offset) + eps, -sphere_radius + eps, -sphere_radius + eps];
                let hi = [-eps, sphere_radius - eps, sphere_radius - eps];
                let axes: [Vec<f64>; 3] = std::array::from_fn(|d| {
                    (0..n)
                        .map(|i| lo[d] + (hi[d] - lo[d]) * i as f64 / (n - 1) as f64)
                        .collect()
                });
                let mut inside = Vec::with_capacity(n * n * n);
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let x = V3::new(axes[0][i], axes[1][j], axes[2][k]);
                            inside.push(dom.contains(&x));
                        }
                    }
                }
                XGrid::Cartesian { axes, inside }
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            XGrid::Spherical { rho, n_mu, n_phi } => 1 + rho.len() * n_mu * n_phi,
            XGrid::Cartesian { axes, .. } => axes[0].len() * axes[1].len() * axes[2].len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether node i carries field values (Cartesian lattices have masked
    /// exterior nodes that always hold 0).
    pub fn active(&self, i: usize) -> bool {
        match self {
            XGrid::Spherical { .. } => true,
            XGrid::Cartesian { inside, .. } => inside[i],
        }
    }

    pub fn node(&self, i: usize) -> V3 {
        match self {
            XGrid::Spherical { rho, n_mu, n_phi } => {
                if i == 0 {
                    return V3::zeros();
                }
                let i = i - 1;
                let c = i % n_phi;
                let b = (i / n_phi) % n_mu;
                let a = i / (n_phi * n_mu);
                let mu = -1.0 + 2.0 * b as f64 / (*n_mu as f64 - 1.0);
                let sin = (1.0 - mu * mu).max(0.0).sqrt();
                let phi = 2.0 * std::f64::consts::PI * c as f64 / *n_phi as f64;
                V3::new(rho[a] * mu, rho[a] * sin * phi.cos(), rho[a] * sin * phi.sin())
            }
            XGrid::Cartesian { axes, .. } => {
                let nk = axes[2].len();
                let nj = axes[1].len();
                let k = i % nk;
                let j = (i / nk) % nj;
                let ii = i / (nk * nj);
                V3::new(axes[0][ii], axes[1][j], axes[2][k])
            }
        }
    }

    /// Interpolation stencil at an interior point. Spherical grids blend the
    /// centre node below the first shell; Cartesian grids renormalise over
    /// interior corners (points whose cell has no interior corner get 0).
    pub fn interp_weights(&self, y: &V3, out: &mut Vec<(usize, f64)>) {
        out.clear();
        match self {
            XGrid::Spherical { rho, n_mu, n_phi } => {
                let r = y.norm();
                let idx = |a: usize, b: usize, c: usize| 1 + (a * n_mu + b) * n_phi + c;
                let (mu, phi) = if r > 1e-300 {
                    ((y.x / r).clamp(-1.0, 1.0), y.z.atan2(y.y).rem_euclid(2.0 * std::f64::consts::PI))
                } else {
                    (0.0, 0.0)
                };
                let mu_nodes: Vec<f64> =
                    (0..*n_mu).map(|b| -1.0 + 2.0 * b as f64 / (*n_mu as f64 - 1.0)).collect();
                let (bi, bt) = bracket_clamped(&mu_nodes, mu);
                let step = 2.0 * std::f64::consts::PI / *n_phi as f64;
                let cf = phi / step;
                let ci = (cf as usize).min(n_phi - 1);
                let ct = cf - ci as f64;
                let cj = (ci + 1) % n_phi;
                let angular: [(usize, usize, f64); 4] = [
                    (bi, ci, (1.0 - bt) * (1.0 - ct)),
                    (bi, cj, (1.0 - bt) * ct),
                    (bi + 1, ci, bt * (1.0 - ct)),
                    (bi + 1, cj, bt * ct),
                ];
                if r <= rho[0] {
                    let t = r / rho[0];
                    out.push((0, 1.0 - t));
                    for (b, c, w) in angular {
                        if w * t > 0.0 {
                            out.push((idx(0, b, c), w * t));
                        }
                    }
                } else {
                    let (ai, at) = bracket_clamped(rho, r);
                    for (a, wa) in [(ai, 1.0 - at), (ai + 1, at)] {
                        if wa == 0.0 {
                            continue;
                        }
                        for (b, c, w) in angular {
                            if w * wa > 0.0 {
                                out.push((idx(a, b, c), w * wa));
                            }
                        }
                    }
                }
            }
            XGrid::Cartesian { axes, inside } => {
                let (i0, it) = bracket_clamped(&axes[0], y.x);
                let (j0, jt) = bracket_clamped(&axes[1], y.y);
                let (k0, kt) = bracket_clamped(&axes[2], y.z);
                let nk = axes[2].len();
                let nj = axes[1].len();
                let mut total = 0.0;
                for (i, wi) in [(i0, 1.0 - it), (i0 + 1, it)] {
                    for (j, wj) in [(j0, 1.0 - jt), (j0 + 1, jt)] {
                        for (k, wk) in [(k0, 1.0 - kt), (k0 + 1, kt)] {
                            let w = wi * wj * wk;
                            if w == 0.0 {
                                continue;
                            }
                            let flat = (i * nj + j) * nk + k;
                            if inside[flat] {
                                out.push((flat, w));
                                total += w;
                            }
                        }
                    }
                }
                if total > 0.0 {
                    for e in out.iter_mut() {
                        e.1 /= total;
                    }
                } else {
                    out.clear();
                }
            }
        }
    }

    /// Volume weight of node i for grid norms (midpoint shells / cells).
    pub fn quad_weight(&self, i: usize) -> f64 {
        match self {
            XGrid::Spherical { rho, n_mu, n_phi } => {
                let bounds = |a: usize| -> (f64, f64) {
                    let lo = if a == 0 { 0.5 * rho[0] } else { 0.5 * (rho[a - 1] + rho[a]) };
                    let hi = if a + 1 == rho.len() {
                        rho[a] / 0.995
                    } else {
                        0.5 * (rho[a] + rho[a + 1])
                    };
                    (lo, hi)
                };
                if i == 0 {
                    let c = 0.5 * rho[0];
                    return 4.0 / 3.0 * std::f64::consts::PI * c * c * c;
                }
                let i = i - 1;
                let b = (i / n_phi) % n_mu;
                let a = i / (n_phi * n_mu);
                let (lo, hi) = bounds(a);
                let radial = (hi.powi(3) - lo.powi(3)) / 3.0;
                // Trapezoid weights in mu (uniform nodes incl endpoints).
                let dmu = 2.0 / (*n_mu as f64 - 1.0);
                let wmu = if b == 0 || b + 1 == *n_mu { 0.5 * dmu } else { dmu };
                radial * wmu * 2.0 * std::f64::consts::PI / *n_phi as f64
            }
            XGrid::Cartesian { axes, inside } => {
                if !inside[i] {
                    return 0.0;
                }
                let nk = axes[2].len();
                let nj = axes[1].len();
                let k = i % nk;
                let j = (i / nk) % nj;
                let ii = i / (nk * nj);
                let span = |nodes: &Vec<f64>, t: usize| -> f64 {
                    let lo = if t == 0 { nodes[0] } else { 0.5 * (nodes[t - 1] + nodes[t]) };
                    let hi = if t + 1 == nodes.len() {
                        nodes[t]
                    } else {
                        0.5 * (nodes[t] + nodes[t + 1])
                    };
                    hi - lo
                };
                span(&axes[0], ii) * span(&axes[1], j) * span(&axes[2], k)
            }
        }
    }
}

/// Discrete carrier of a phase-space function on XGrid x VGrid, values
/// indexed x-major: values[ix * n_v + m].
#[derive(Clone)]
pub struct PhaseField {
    pub domain: ConvexDomain,
    pub xg: XGrid,
    pub vg: VGrid,
    pub values: Vec<f64>,
}

impl PhaseField {
    pub fn zeros(dom: &ConvexDomain, spec: &GridSpec) -> Self {
        let xg = XGrid::new(dom, spec);
        let vg = VGrid::new(spec);
        let values = vec![0.0; xg.len() * vg.len()];
        PhaseField { domain: *dom, xg, vg, values }
    }

    pub fn from_fn(dom: &ConvexDomain, spec: &GridSpec, f: impl Fn(&V3, &V3) -> f64) -> Self {
        let mut field = Self::zeros(dom, spec);
        let nv = field.vg.len();
        for ix in 0..field.xg.len() {
            if !field.xg.active(ix) {
                continue;
            }
            let x = field.xg.node(ix);
            for m in 0..nv {
                field.values[ix * nv + m] = f(&x, &field.vg.node(m));
            }
        }
        field
    }

    /// Spatial-only interpolation at fixed velocity node m.
    pub fn interp_x(&self, y: &V3, m: usize, scratch: &mut Vec<(usize, f64)>) -> f64 {
        self.xg.interp_weights(y, scratch);
        let nv = self.vg.len();
        scratch.iter().map(|&(ix, w)| w * self.values[ix * nv + m]).sum()
    }

    /// Full multilinear interpolation in (x, v); 0 for |v| > v_max.
    pub fn interp(&self, x: &V3, v: &V3) -> f64 {
        let mut xw = Vec::with_capacity(10);
        let mut vw = Vec::with_capacity(8);
        self.xg.interp_weights(x, &mut xw);
        self.vg.interp_weights(v, &mut vw);
        let nv = self.vg.len();
        let mut total = 0.0;
        for &(ix, wx) in &xw {
            let base = ix * nv;
            for &(m, wv) in &vw {
                total += wx * wv * self.values[base + m];
            }
        }
        total
    }

    /// Grid L^p norm with velocity weight e^{alpha |v|^2}, using the grids'
    /// native quadrature weights.
    pub fn lp_grid_norm(&self, p: f64, alpha: f64) -> f64 {
        let nv = self.vg.len();
        let mut total = 0.0;
        for ix in 0..self.xg.len() {
            let wx = self.xg.quad_weight(ix);
            if wx == 0.0 {
                continue;
            }
            for m in 0..nv {
                let v = self.vg.node(m);
                let w = wx * self.vg.weight(m);
                let val = self.values[ix * nv + m].abs() * (alpha * v.norm_squared()).exp();
                total += w * val.powf(p);
            }
        }
        total.powf(1.0 / p)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// L^1 grid norms of the per-iteration increments (S K)^i J g.
    pub increments: Vec<f64>,
    /// Consecutive increment ratios.
    pub ratios: Vec<f64>,
    pub residual: f64,
    pub jg_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub grid: GridSpec,
    pub tol: f64,
    pub max_iter: usize,
    /// K term on/off; off makes the equation f = J g exactly.
    pub scattering: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams { grid: GridSpec::default(), tol: 1e-6, max_iter: 30, scattering: true }
    }
}

/// Converged solution: f on the grid, and the collision field H = K f used
/// for high-accuracy probe evaluation f(x,v) = J g(x,v) + (S H)(x,v).
pub struct Solution {
    pub f: PhaseField,
    pub h: PhaseField,
    pub report: SolveReport,
    pub data: BoundaryData,
}

/// Nystrom matrix of K on the velocity grid. Off-diagonal entries are
/// kernel values times quadrature weights; the diagonal absorbs the local
/// singular-quadrature defect so that the matrix reproduces the detailed
/// balance identity K M = nu M exactly on the Maxwellian.
pub struct KMatrix {
    n: usize,
    w: Vec<f64>,
}

impl KMatrix {
    pub fn build(vg: &VGrid) -> Self {
        let n = vg.len();
        let nodes: Vec<V3> = (0..n).map(|m| vg.node(m)).collect();
        let weights: Vec<f64> = (0..n).map(|m| vg.weight(m)).collect();
        let maxw: Vec<f64> = nodes.iter().map(|v| (-0.5 * v.norm_squared()).exp()).collect();
        let mut w = vec![0.0; n * n];
        w.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
            let vj = nodes[j];
            let mut balance = 0.0;
            for m in 0..n {
                if m == j {
                    continue;
                }
                let kw = crate::collision::kernel(&vj, &nodes[m]).unwrap_or(0.0) * weights[m];
                row[m] = kw;
                balance += kw * maxw[m];
            }
            row[j] = (nu(vj.norm()) * maxw[j] - balance) / maxw[j];
        });
        KMatrix { n, w }
    }

    /// H(x_i, .) = W f(x_i, .) for one spatial slice.
    pub fn apply_slice(&self, f_slice: &[f64], out: &mut [f64]) {
        for j in 0..self.n {
            let row = &self.w[j * self.n..(j + 1) * self.n];
            out[j] = row.iter().zip(f_slice).map(|(a, b)| a * b).sum();
        }
    }
}

/// One grid application of S K: H = K field (matrix per spatial node), then
/// line integrals of the interpolated H. Returns the new field and its L^1
/// grid norm.
pub fn iterate_term(
    dom: &ConvexDomain,
    field: &PhaseField,
    km: &KMatrix,
    lq: &LineQuadrature,
) -> (PhaseField, f64) {
    let h = apply_k_grid(field, km);
    let sh = apply_s_grid(dom, &h, lq);
    let norm = sh.lp_grid_norm(1.0, 0.0);
    (sh, norm)
}

fn apply_k_grid(field: &PhaseField, km: &KMatrix) -> PhaseField {
    let nv = field.vg.len();
    let mut h = field.clone();
    h.values
        .par_chunks_mut(nv)
        .enumerate()
        .for_each(|(ix, slice)| {
            if field.xg.active(ix) {
                km.apply_slice(&field.values[ix * nv..(ix + 1) * nv], slice);
            } else {
                slice.fill(0.0);
            }
        });
    h
}

fn apply_s_grid(dom: &ConvexDomain, h: &PhaseField, lq: &LineQuadrature) -> PhaseField {
    let nv = h.vg.len();
    let mut out = h.clone();
    let nodes_v: Vec<V3> = (0..nv).map(|m| h.vg.node(m)).collect();
    let nus: Vec<f64> = nodes_v.iter().map(|v| nu(v.norm())).collect();
    out.values
        .par_chunks_mut(nv)
        .enumerate()
        .for_each(|(ix, slice)| {
            if !h.xg.active(ix) {
                slice.fill(0.0);
                return;
            }
            let x = h.xg.node(ix);
            let mut scratch = Vec::with_capacity(10);
            for m in 0..nv {
                let v = nodes_v[m];
                let tau = match dom.exit_time(&x, &v) {
                    Ok(t) => t,
                    Err(_) => {
                        slice[m] = 0.0;
                        continue;
                    }
                };
                let nu_v = nus[m];
                let upper = tau.min(lq.truncate_nu / nu_v);
                let panel = lq.panel_len_nu / nu_v;
                let n_panels = (upper / panel).ceil().max(1.0) as usize;
                let hstep = upper / n_panels as f64;
                let mut total = 0.0;
                for jp in 0..n_panels {
                    let (ss, ws) = gl_on(lq.n_per_panel, jp as f64 * hstep, (jp + 1) as f64 * hstep);
                    for (sq, wq) in ss.iter().zip(&ws) {
                        let y = x - v * *sq;
                        total += wq * (-nu_v * sq).exp() * h.interp_x(&y, m, &mut scratch);
                    }
                }
                slice[m] = total;
            }
        });
    out
}

/// Picard iteration f_{n+1} = J g + S K f_n on the grid.
pub fn neumann_solve(
    dom: &ConvexDomain,
    data: &BoundaryData,
    params: &SolverParams,
) -> Result<Solution> {
    dom.validate()?;
    let lq = LineQuadrature::default();
    let g = |bp: &crate::geometry::BoundaryPoint, v: &V3| data.eval(dom, bp, v);
    let jg = PhaseField::from_fn(dom, &params.grid, |x, v| {
        crate::transport::apply_j(dom, &g, x, v).unwrap_or(0.0)
    });
    let jg_norm = jg.lp_grid_norm(1.0, 0.0);

    if !params.scattering {
        let mut h = jg.clone();
        h.values.fill(0.0);
        return Ok(Solution {
            f: jg.clone(),
            h,
            report: SolveReport {
                iterations: 1,
                increments: vec![],
                ratios: vec![],
                residual: 0.0,
                jg_norm,
                converged: true,
            },
            data: *data,
        });
    }

    let km = KMatrix::build(&jg.vg);
    let mut f = jg.clone();
    let mut increments = Vec::new();
    let mut ratios = Vec::new();
    let mut h_latest = apply_k_grid(&f, &km);
    let mut bad_streak = 0usize;
    let mut converged = false;

    for _ in 0..params.max_iter {
        let sh = apply_s_grid(dom, &h_latest, &lq);
        // new f = jg + S H; measure the increment against the previous f.
        let mut new_f = jg.clone();
        for (dst, s) in new_f.values.iter_mut().zip(&sh.values) {
            *dst += s;
        }
        let mut diff = new_f.clone();
        for (d, old) in diff.values.iter_mut().zip(&f.values) {
            *d -= old;
        }
        let inc = diff.lp_grid_norm(1.0, 0.0);
        if let Some(&prev) = increments.last() {
            let ratio = if prev > 0.0 { inc / prev } else { 0.0 };
            ratios.push(ratio);
            if ratio >= 1.0 {
                bad_streak += 1;
                if bad_streak >= 3 {
                    return Err(GkinError::NonContractive { ratios });
                }
            } else {
                bad_streak = 0;
            }
        }
        increments.push(inc);
        f = new_f;
        h_latest = apply_k_grid(&f, &km);
        if inc <= params.tol * jg_norm {
            converged = true;
            break;
        }
    }

    let residual = *increments.last().unwrap_or(&0.0);
    Ok(Solution {
        f,
        h: h_latest,
        report: SolveReport {
            iterations: increments.len(),
            increments,
            ratios,
            residual,
            jg_norm,
            converged,
        },
        data: *data,
    })
}

impl Solution {
    /// High-accuracy pointwise value: exact J g plus a fine line quadrature
    /// of the interpolated collision field (the grid enters only through the
    /// small correction term).
    pub fn probe(&self, x: &V3, v: &V3) -> Result<f64> {
        let dom = self.f.domain;
        let g = |bp: &crate::geometry::BoundaryPoint, vv: &V3| self.data.eval(&dom, bp, vv);
        let jg = crate::transport::apply_j(&dom, &g, x, v)?;
        if v.norm() == 0.0 {
            return Ok(jg);
        }
        let tau = dom.exit_time(x, v)?;
        let nu_v = nu(v.norm());
        let fine = LineQuadrature { n_per_panel: 12, panel_len_nu: 0.25, truncate_nu: 45.0 };
        let upper = tau.min(fine.truncate_nu / nu_v);
        let panel = fine.panel_len_nu / nu_v;
        let n_panels = (upper / panel).ceil().max(1.0) as usize;
        let h = upper / n_panels as f64;
        let mut corr = 0.0;
        for jp in 0..n_panels {
            let (ss, ws) = gl_on(fine.n_per_panel, jp as f64 * h, (jp + 1) as f64 * h);
            for (s, w) in ss.iter().zip(&ws) {
                corr += w * (-nu_v * s).exp() * self.h.interp(&(x - v * *s), v);
            }
        }
        Ok(jg + corr)
    }
}

/// Monte Carlo estimate of f(x, v) by backward paths. Each path adds the
/// deterministic boundary term e^{-nu tau} g(q, v), then with an
/// exponentially sampled backward flight t < tau scatters to a new velocity
/// drawn from |k(v, .)| / Z with weight (Z / nu) sign k. Depth 4 onward
/// survives Russian roulette with probability 1/2 (weight doubled); depth is
/// hard-capped at 12. Paths are grouped in blocks of 256 with one
/// counter-based RNG stream per block and reduced in block order, so the
/// result is a pure function of (seed, n_paths) regardless of thread count.
pub struct McParams {
    pub n_paths: usize,
    pub seed: u64,
    pub scattering: bool,
}

pub fn mc_solve_point(
    dom: &ConvexDomain,
    data: &BoundaryData,
    x: &V3,
    v: &V3,
    params: &McParams,
    zt: &ZTable,
) -> Result<(f64, f64)> {
    dom.validate()?;
    if !dom.contains(x) {
        return Err(GkinError::OutsideDomain { x: [x.x, x.y, x.z] });
    }
    const BLOCK: usize = 256;
    let n_blocks = params.n_paths.div_ceil(BLOCK);
    let sums: Vec<(f64, f64, usize)> = (0..n_blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(block as u64 + 1);
            let count = BLOCK.min(params.n_paths - block * BLOCK);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..count {
                let val = mc_one_path(dom, data, x, v, params.scattering, zt, &mut rng);
                s += val;
                s2 += val * val;
            }
            (s, s2, count)
        })
        .collect();
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for (bs, bs2, bn) in sums {
        s += bs;
        s2 += bs2;
        n += bn;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    Ok((mean, (var / n as f64).sqrt()))
}

fn mc_one_path(
    dom: &ConvexDomain,
    data: &BoundaryData,
    x0: &V3,
    v0: &V3,
    scattering: bool,
    zt: &ZTable,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut x = *x0;
    let mut v = *v0;
    let mut weight = 1.0;
    let mut score = 0.0;
    for depth in 0..12 {
        let speed = v.norm();
        if speed == 0.0 {
            break;
        }
        let fp = match dom.footpoint(&x, &v) {
            Ok(fp) => fp,
            Err(_) => break, // tangential sample: measure-zero, contributes 0
        };
        let nu_v = nu(speed);
        score += weight * (-nu_v * fp.tau).exp() * data.eval(dom, &fp.point, &v);
        if !scattering {
            break;
        }
        let t = -rng.gen::<f64>().max(1e-300).ln() / nu_v;
        if t >= fp.tau {
            break;
        }
        if depth >= 4 {
            if rng.gen::<f64>() < 0.5 {
                break;
            }
            weight *= 2.0;
        }
        x -= v * t;
        let sampler = KernelSampler::new(v);
        let (vstar, sign) = sampler.sample(rng);
        weight *= sign * zt.eval(speed) / nu_v;
        v = vstar;
    }
    score
}

/// ||S K M||_1 / ||M||_1 on a ball, via the closed form S K M =
/// (1 - e^{-nu tau}) M (detailed balance turns K M into nu M): reduces to a
/// 3-D integral over (radius, speed, flight-direction cosine).
pub fn first_iterate_l1_ratio(radius: f64) -> f64 {
    let dom = ConvexDomain::Ball { radius };
    let (rs, rw) = gl_on(24, 0.0, radius);
    let (ss, sw) = gl_on(24, 0.0, 12.0);
    let (ts, tw) = gl_on(24, -1.0, 1.0);
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, wr) in rs.iter().zip(&rw) {
        let x = V3::new(*r, 0.0, 0.0);
        for (s, ws) in ss.iter().zip(&sw) {
            let maxwell = (-0.5 * s * s).exp() * s * s;
            let nu_s = nu(*s);
            for (t, wt) in ts.iter().zip(&tw) {
                let sin = (1.0 - t * t).max(0.0).sqrt();
                let v = V3::new(s * t, s * sin, 0.0);
                let tau = dom.exit_time(&x, &v).unwrap();
                let w = wr * r * r * ws * wt * maxwell;
                num += w * (1.0 - (-nu_s * tau).exp());
                den += w;
            }
        }
    }
    num / den
}

/// sup over a structured (x, v) cloud of e^{alpha |v|^2} |K S K M| (x, v),
/// using the closed form for the inner S K M and a velocity quadrature for
/// the outer K. The Maxwellian input has weighted sup-norm 1, so this is the
/// second-iterate sup ratio directly.
pub fn second_iterate_sup(radius: f64, alpha: f64) -> f64 {
    let dom = ConvexDomain::Ball { radius };
    let q = VelocityQuadrature { n_r: 16, n_t: 16, n_phi: 8, r_max: 10.0, panel_w: 2.5 };
    let mut best: f64 = 0.0;
    for fx in [0.0, 0.45, 0.9] {
        let x = V3::new(fx * radius, 0.0, 0.0);
        for speed in [0.0, 0.5, 1.0, 2.0, 4.0] {
            for ang in 0..5 {
                let th = std::f64::consts::PI * ang as f64 / 4.0;
                let v = V3::new(speed * th.cos(), speed * th.sin(), 0.0);
                let val = crate::collision::apply_k(
                    &v,
                    |vstar| {
                        let sp = vstar.norm();
                        let tau = dom.exit_time(&x, &vstar).unwrap_or(0.0);
                        (1.0 - (-nu(sp) * tau).exp()) * (-0.5 * sp * sp).exp()
                    },
                    &q,
                );
                best = best.max(val.abs() * (alpha * speed * speed).exp());
                if speed == 0.0 {
                    break;
                }
            }
        }
    }
    best
}
