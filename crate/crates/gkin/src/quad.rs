//! Quadrature primitives shared by every module: Gauss-Legendre rules,
//! panel subdivision, and the shifted spherical velocity quadrature used
//! for integrals against the scattering kernel.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; the Chebyshev-like initial
/// guess cos(pi (i + 3/4)/(n + 1/2)) is within O(1/n^2) of the true root,
/// so three to four iterations reach machine precision for any n we use.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&n) {
        return hit.clone();
    }

    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Bonnet recurrence for P_n(x) and P_{n-1}(x).
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { p1 } else { p1 };
            let pm = if n == 1 { p0 } else { p0 };
            dp = (n as f64) * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        xs[i] = -x;
        xs[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        xs[n / 2] = 0.0;
    }
    cache.lock().unwrap().insert(n, (xs.clone(), ws.clone()));
    (xs, ws)
}

/// Nodes and weights of the n-point Gauss-Legendre rule mapped to [a, b].
pub fn gl_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let c = 0.5 * (b - a);
    let m = 0.5 * (a + b);
    (
        xs.iter().map(|x| c * x + m).collect(),
        ws.iter().map(|w| c * w).collect(),
    )
}

/// Integrate f over [a, b] with an n-point rule.
pub fn integrate_gl(n: usize, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (xs, ws) = gl_on(n, a, b);
    xs.iter().zip(&ws).map(|(x, w)| w * f(*x)).sum()
}

/// Integrate over [a, b] split at the interior breakpoints (sorted, clipped),
/// n points per panel. Used wherever the integrand has a kink (half-space
/// caps, min{...} switches) whose location is known analytically.
pub fn integrate_gl_panels(
    n: usize,
    a: f64,
    b: f64,
    breaks: &[f64],
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    let mut pts = vec![a];
    let mut sorted: Vec<f64> = breaks.iter().copied().filter(|t| *t > a && *t < b).collect();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.extend(sorted);
    pts.push(b);
    let mut total = 0.0;
    for pair in pts.windows(2) {
        if pair[1] > pair[0] {
            total += integrate_gl(n, pair[0], pair[1], &mut f);
        }
    }
    total
}

/// Product quadrature for velocity-space integrals centred at a point:
///
///   integral over R^3 of F(v*) dv*  with  v* = c + r omega(t, phi),
///
/// in spherical coordinates around the centre c, polar axis `axis`.
/// The radial direction gets Gauss-Legendre panels of width <= `panel_w`
/// up to `r_max`; the polar cosine t gets `n_t` Gauss points (optionally on
/// a sub-interval, for half-space integrals with an exact cap limit); the
/// azimuth gets an `n_phi`-point trapezoid rule, which is spectrally
/// accurate for periodic integrands.
///
/// Centring at the kernel's singular point turns the 1/|v - v*| factor into
/// r * (bounded) after the r^2 Jacobian, so plain Gauss panels converge fast.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VelocityQuadrature {
    pub n_r: usize,
    pub n_t: usize,
    pub n_phi: usize,
    /// Radial extent of the integration around the centre.
    pub r_max: f64,
    /// Maximum radial panel width.
    pub panel_w: f64,
}

impl Default for VelocityQuadrature {
    fn default() -> Self {
        VelocityQuadrature {
            n_r: 24,
            n_t: 24,
            n_phi: 16,
            r_max: 14.0,
            panel_w: 2.0,
        }
    }
}

impl VelocityQuadrature {
    /// A doubled-resolution copy, for error indicators by comparison.
    pub fn doubled(&self) -> Self {
        VelocityQuadrature {
            n_r: self.n_r * 2,
            n_t: self.n_t * 2,
            n_phi: self.n_phi * 2,
            r_max: self.r_max + 2.0,
            panel_w: self.panel_w,
        }
    }

    fn radial_panels(&self, extra_breaks: &[f64]) -> Vec<(f64, f64)> {
        let mut pts = vec![0.0];
        let mut brk: Vec<f64> = extra_breaks
            .iter()
            .copied()
            .filter(|r| *r > 1e-12 && *r < self.r_max)
            .collect();
        brk.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pts.extend(brk);
        pts.push(self.r_max);
        let mut panels = Vec::new();
        for pair in pts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b <= a {
                continue;
            }
            let k = ((b - a) / self.panel_w).ceil().max(1.0) as usize;
            let h = (b - a) / k as f64;
            for j in 0..k {
                panels.push((a + j as f64 * h, a + (j + 1) as f64 * h));
            }
        }
        panels
    }

    /// Full-space integral of F around `center`; polar axis is arbitrary
    /// (taken as the axis best conditioned for F's symmetry).
    pub fn integrate(&self, center: Vector3<f64>, axis: Vector3<f64>, f: impl Fn(Vector3<f64>) -> f64) -> f64 {
        self.integrate_capped(center, axis, 1.0, &[], f)
    }

    /// Integral restricted to the polar cap { t <= t_hi } around `axis`,
    /// t = cos(angle(v* - center, axis)). `t_hi = 1` recovers full space.
    /// `radial_breaks` adds exact panel boundaries in r.
    pub fn integrate_capped(
        &self,
        center: Vector3<f64>,
        axis: Vector3<f64>,
        t_hi: f64,
        radial_breaks: &[f64],
        f: impl Fn(Vector3<f64>) -> f64,
    ) -> f64 {
        let e3 = axis.normalize();
        // Any orthonormal completion works; the phi rule is exact for the
        // trig polynomials that arise, so the frame choice is immaterial.
        let helper = if e3.x.abs() < 0.9 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            Vector3::new(0.0, 1.0, 0.0)
        };
        let e1 = (helper - e3 * helper.dot(&e3)).normalize();
        let e2 = e3.cross(&e1);

        let (ts, tw) = gl_on(self.n_t, -1.0, t_hi.clamp(-1.0, 1.0));
        let dphi = 2.0 * std::f64::consts::PI / self.n_phi as f64;
        let mut total = 0.0;
        for (a, b) in self.radial_panels(radial_breaks) {
            let (rs, rw) = gl_on(self.n_r, a, b);
            for (r, wr) in rs.iter().zip(&rw) {
                for (t, wt) in ts.iter().zip(&tw) {
                    let s = (1.0 - t * t).max(0.0).sqrt();
                    let mut phi_sum = 0.0;
                    for ip in 0..self.n_phi {
                        let phi = dphi * ip as f64;
                        let omega = e1 * (s * phi.cos()) + e2 * (s * phi.sin()) + e3 * *t;
                        phi_sum += f(center + omega * *r);
                    }
                    total += wr * wt * dphi * phi_sum * r * r;
                }
            }
        }
        total
    }
}
