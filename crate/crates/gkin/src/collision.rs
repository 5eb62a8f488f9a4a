//! Hard-sphere collision frequency and scattering kernel, with the
//! integral operators K, grad_v K, half-space gain integrals, and an exact
//! rejection sampler for |k(v, .)| used by the Monte Carlo solver.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{GkinError, Result};
use crate::geometry::V3;
use crate::quad::{gl_on, VelocityQuadrature};

/// 2^{-3/2}.
pub const INV_SQRT8: f64 = 0.353_553_390_593_273_73;
/// Kernel prefactor 2^{-3/2} / pi.
const C1: f64 = INV_SQRT8 / std::f64::consts::PI;

/// Lower envelope constant: inf over speeds of nu(s) / (1 + s).
/// Attained near s = 1.2725; frozen from an independent high-precision scan
/// and re-derived by `nu_lower_envelope` (tested against this constant).
pub const NU0: f64 = 0.457_032_343_338_222_7;
/// Upper envelope constant: sup of nu(s) / (1 + s), attained at s = 0.
pub const NU1: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Collision frequency nu(|v|) for the hard-sphere kernel:
///
///   nu(s) = 2^{-3/2} [ e^{-s^2} + (2s + 1/s) * int_0^s e^{-eta^2} d eta ].
///
/// The 1/s factor is removable: expanding the error-function integral for
/// small s gives nu(s) = 2^{-3/2} (2 + (2/3) s^2 - (1/15) s^4 + O(s^6)),
/// which we use below the crossover to avoid the 0/0 cancellation.
pub fn nu(speed: f64) -> f64 {
    let s = speed.abs();
    if s < 1e-4 {
        INV_SQRT8 * (2.0 + (2.0 / 3.0) * s * s - (1.0 / 15.0) * s.powi(4))
    } else {
        let e = 0.5 * std::f64::consts::PI.sqrt() * erf(s);
        INV_SQRT8 * ((-s * s).exp() + (2.0 * s + 1.0 / s) * e)
    }
}

/// d nu / ds, closed form (the e^{-s^2} derivative cancels against part of
/// the product rule): nu'(s) = 2^{-3/2} [ (2 - 1/s^2) E(s) + e^{-s^2}/s ],
/// E(s) = int_0^s e^{-eta^2}.
pub fn nu_prime(speed: f64) -> f64 {
    let s = speed.abs();
    if s < 1e-4 {
        // From the even series above: nu' = 2^{-3/2} ((4/3) s - (4/15) s^3).
        INV_SQRT8 * ((4.0 / 3.0) * s - (4.0 / 15.0) * s.powi(3))
    } else {
        let e = 0.5 * std::f64::consts::PI.sqrt() * erf(s);
        INV_SQRT8 * ((2.0 - 1.0 / (s * s)) * e + (-s * s).exp() / s)
    }
}

/// Recompute inf nu(s)/(1+s) by scan plus golden-section refinement.
/// Exists so the frozen NU0 constant is audited by the test suite rather
/// than trusted.
pub fn nu_lower_envelope() -> f64 {
    let f = |s: f64| nu(s) / (1.0 + s);
    let mut best = (0.0, f(0.0));
    let mut s = 0.0;
    while s < 30.0 {
        let val = f(s);
        if val < best.1 {
            best = (s, val);
        }
        s += 0.01;
    }
    let (mut a, mut b) = (best.0 - 0.02, best.0 + 0.02);
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    f(0.5 * (a + b))
}

/// Hard-sphere scattering kernel
///
///   k(v, v*) = 2^{-3/2} pi^{-1} { 2 |v*-v|^{-1} exp( -1/4 (|v*|^2-|v|^2)^2/|v*-v|^2 - 1/4 |v*-v|^2 )
///                                 - |v*-v| exp( -1/2 (|v|^2 + |v*|^2) ) }.
///
/// Computed from |v|^2, |v*|^2 and |v*-v| only, through expressions that are
/// bit-for-bit symmetric under swapping the arguments (squares of exact
/// negations, commutative sums), so k(v, v*) == k(v*, v) exactly.
fn k_hs(v: &V3, vs: &V3) -> f64 {
    let d = vs - v;
    let r = d.norm();
    let s2v = v.norm_squared();
    let s2s = vs.norm_squared();
    let w = (s2s - s2v) / r;
    let gain = 2.0 / r * (-0.25 * w * w - 0.25 * r * r).exp();
    let loss = r * (-0.5 * (s2v + s2s)).exp();
    C1 * (gain - loss)
}

/// Checked kernel evaluation; v = v* is a genuine singularity.
pub fn kernel(v: &V3, vs: &V3) -> Result<f64> {
    if (vs - v).norm_squared() < 1e-28 {
        return Err(GkinError::CoincidentVelocities);
    }
    Ok(k_hs(v, vs))
}

/// Gaussian comparison envelope
///   E_rho(v, v*) = exp( -(1-rho)/4 [ |v-v*|^2 + ((|v|^2-|v*|^2)/|v-v*|)^2 ] ).
pub fn envelope_e(v: &V3, vs: &V3, rho: f64) -> f64 {
    let r = (vs - v).norm();
    let w = (v.norm_squared() - vs.norm_squared()) / r;
    (-(1.0 - rho) / 4.0 * (r * r + w * w)).exp()
}

/// Exponent-shift identity underpinning the weighted kernel estimates: with
/// u = |v - v*|, w = (|v*|^2 - |v|^2)/u,
///
///   a|v*|^2 - (1-rho)/4 (u^2 + w^2)
///     = a|v|^2 - alpha_1 u^2 - (1-rho)/4 ( w - 2a u/(1-rho) )^2,
///
///   alpha_1 = (1-rho+2a)(1-rho-2a) / (4(1-rho)).
///
/// (Completing the square in w; at a = 0 it degenerates to alpha_1 =
/// (1-rho)/4 and an untranslated square.) Returns the relative discrepancy
/// of the two sides, which should sit at rounding level for admissible
/// |a| < (1-rho)/2.
pub fn identity_check(v: &V3, vs: &V3, a: f64, rho: f64) -> f64 {
    let u = (vs - v).norm();
    let w = (vs.norm_squared() - v.norm_squared()) / u;
    let lhs = a * vs.norm_squared() - (1.0 - rho) / 4.0 * (u * u + w * w);
    let alpha1 = (1.0 - rho + 2.0 * a) * (1.0 - rho - 2.0 * a) / (4.0 * (1.0 - rho));
    let shift = w - 2.0 * a * u / (1.0 - rho);
    let rhs = a * v.norm_squared() - alpha1 * u * u - (1.0 - rho) / 4.0 * shift * shift;
    (lhs - rhs).abs() / (1.0 + lhs.abs().max(rhs.abs()))
}

/// The second coefficient of the identity in the form the weighted estimates
/// use: alpha_2 = (1-rho-2a)/(2(1-rho)); the translated square above equals
/// (w + (2 alpha_2 - 1) u)^2.
pub fn identity_alpha(a: f64, rho: f64) -> (f64, f64) {
    (
        (1.0 - rho + 2.0 * a) * (1.0 - rho - 2.0 * a) / (4.0 * (1.0 - rho)),
        (1.0 - rho - 2.0 * a) / (2.0 * (1.0 - rho)),
    )
}

/// Kernel model: the explicit hard-sphere kernel, or an abstract
/// envelope-only model carrying just the structural constants (collision
/// frequency envelope nu0 (1+|v|)^gamma <= nu <= nu1 (1+|v|)^gamma and the
/// Gaussian kernel envelope parameter rho).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelModel {
    HardSphere,
    BoundOnly { nu0: f64, nu1: f64, gamma: f64, rho: f64 },
}

impl Default for KernelModel {
    fn default() -> Self {
        KernelModel::HardSphere
    }
}

impl KernelModel {
    pub fn nu(&self, speed: f64) -> Result<f64> {
        match self {
            KernelModel::HardSphere => Ok(nu(speed)),
            KernelModel::BoundOnly { .. } => Err(GkinError::NotEvaluable("bound_only".into())),
        }
    }

    pub fn kernel(&self, v: &V3, vs: &V3) -> Result<f64> {
        match self {
            KernelModel::HardSphere => kernel(v, vs),
            KernelModel::BoundOnly { .. } => Err(GkinError::NotEvaluable("bound_only".into())),
        }
    }

    /// Envelope parameter rho; the hard-sphere kernel satisfies the Gaussian
    /// envelope with any rho in (0,1), certified here at the working value 1/2.
    pub fn rho(&self) -> f64 {
        match self {
            KernelModel::HardSphere => 0.5,
            KernelModel::BoundOnly { rho, .. } => *rho,
        }
    }

    pub fn nu_envelope(&self) -> (f64, f64, f64) {
        match self {
            KernelModel::HardSphere => (NU0, NU1, 1.0),
            KernelModel::BoundOnly { nu0, nu1, gamma, .. } => (*nu0, *nu1, *gamma),
        }
    }

    /// Velocity weights e^{alpha |v|^2} are admissible for alpha < (1-rho)/2.
    pub fn admissible_alpha(&self, alpha: f64) -> bool {
        alpha >= 0.0 && alpha < (1.0 - self.rho()) / 2.0
    }
}

/// K f (v) = int k(v, v*) f(v*) dv*, shifted spherical quadrature centred at
/// the kernel's singular point (the r^2 Jacobian flattens the 1/r factor).
pub fn apply_k(v: &V3, f: impl Fn(V3) -> f64, q: &VelocityQuadrature) -> f64 {
    let axis = if v.norm() > 1e-12 { *v } else { Vector3::z() };
    q.integrate_capped(*v, axis, 1.0, &[v.norm()], |vstar| {
        k_hs(v, &vstar) * f(vstar)
    })
}

/// grad_v K f: central differences with step h = 1e-5 (1 + |v|) plus one
/// Richardson extrapolation level (h and h/2), per component.
pub fn apply_k_grad(v: &V3, f: impl Fn(V3) -> f64 + Copy, q: &VelocityQuadrature) -> V3 {
    let h = 1e-5 * (1.0 + v.norm());
    let mut out = V3::zeros();
    for i in 0..3 {
        let mut dv = V3::zeros();
        dv[i] = h;
        let d1 = (apply_k(&(v + dv), f, q) - apply_k(&(v - dv), f, q)) / (2.0 * h);
        dv[i] = 0.5 * h;
        let d2 = (apply_k(&(v + dv), f, q) - apply_k(&(v - dv), f, q)) / h;
        out[i] = (4.0 * d2 - d1) / 3.0;
    }
    out
}

/// Full-space gain integral against the Maxwellian, closed form by detailed
/// balance: int k(v, v*) e^{-|v*|^2/2} dv* = nu(v) e^{-|v|^2/2}. Used as a
/// consistency oracle for the kernel/collision-frequency pair.
pub fn gain_full_closed(speed: f64) -> f64 {
    nu(speed) * (-0.5 * speed * speed).exp()
}

/// Quadrature resolution for the half-space gain and |k| integrals.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GainQuad {
    pub n_r: usize,
    pub n_t: usize,
    pub n_phi: usize,
    pub panel_w: f64,
    pub r_pad: f64,
}

impl Default for GainQuad {
    fn default() -> Self {
        GainQuad { n_r: 20, n_t: 24, n_phi: 16, panel_w: 2.0, r_pad: 12.0 }
    }
}

impl GainQuad {
    pub fn doubled(&self) -> Self {
        GainQuad {
            n_r: self.n_r * 2,
            n_t: self.n_t * 2,
            n_phi: self.n_phi * 2,
            panel_w: self.panel_w,
            r_pad: self.r_pad + 2.0,
        }
    }
}

/// Half-space gain integral over the incoming set at a wall with outward
/// normal n:
///
///   H(v; n) = int_{v* . n < 0} k(v, v*) e^{-|v*|^2 / 2} dv*.
///
/// Spherical coordinates centred at v with polar axis n make the half-space
/// constraint exact: v* . n = v . n + r t < 0 iff t < -(v.n)/r, so each
/// radial node integrates t over [-1, min(1, -(v.n)/r)] with a Gauss rule on
/// exactly that interval. A radial panel break at r = |v.n| keeps the cap
/// saturation kink on a panel boundary.
pub fn half_space_gain(v: &V3, n: &V3, q: &GainQuad) -> f64 {
    let nh = n.normalize();
    let vn = v.dot(&nh);
    let helper = if nh.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - nh * helper.dot(&nh)).normalize();
    let e2 = nh.cross(&e1);
    let r_max = v.norm() + q.r_pad;

    let mut panels = vec![0.0, r_max];
    if vn.abs() > 1e-12 && vn.abs() < r_max {
        panels.insert(1, vn.abs());
    }
    let dphi = 2.0 * std::f64::consts::PI / q.n_phi as f64;
    let mut total = 0.0;
    for seg in panels.windows(2) {
        let k_panels = ((seg[1] - seg[0]) / q.panel_w).ceil().max(1.0) as usize;
        let h = (seg[1] - seg[0]) / k_panels as f64;
        for j in 0..k_panels {
            let (rs, rw) = gl_on(q.n_r, seg[0] + j as f64 * h, seg[0] + (j + 1) as f64 * h);
            for (r, wr) in rs.iter().zip(&rw) {
                let t_hi = (-vn / r).clamp(-1.0, 1.0);
                if t_hi <= -1.0 + 1e-15 {
                    continue;
                }
                let (ts, tw) = gl_on(q.n_t, -1.0, t_hi);
                for (t, wt) in ts.iter().zip(&tw) {
                    let s = (1.0 - t * t).max(0.0).sqrt();
                    let mut phi_sum = 0.0;
                    for ip in 0..q.n_phi {
                        let phi = dphi * ip as f64;
                        let vstar = v + (e1 * (s * phi.cos()) + e2 * (s * phi.sin()) + nh * *t) * *r;
                        phi_sum += k_hs(v, &vstar) * (-0.5 * vstar.norm_squared()).exp();
                    }
                    total += wr * wt * dphi * phi_sum * r * r;
                }
            }
        }
    }
    total
}

/// Half-space gain with a doubling-based error bound: (value, |I_2h - I_h|).
pub fn half_space_gain_certified(v: &V3, n: &V3, q: &GainQuad) -> (f64, f64) {
    let coarse = half_space_gain(v, n, q);
    let fine = half_space_gain(v, n, &q.doubled());
    (fine, (fine - coarse).abs())
}

/// Z(|v|) = int |k(v, v*)| dv*: the total-variation mass used to normalise
/// the Monte Carlo importance weights. Rotation invariance reduces it to a
/// 2-D (r, t) integral with the azimuth exactly 2 pi.
pub fn z_abs(speed: f64, q: &GainQuad) -> f64 {
    let v = Vector3::new(0.0, 0.0, speed);
    let r_max = speed + q.r_pad;
    let mut total = 0.0;
    // Panel break where the gain-loss sign change can sit, around r ~ sqrt 2.
    let mut pts = vec![0.0, 2.0f64.sqrt().min(r_max), r_max];
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    for seg in pts.windows(2) {
        let k_panels = ((seg[1] - seg[0]) / q.panel_w).ceil().max(1.0) as usize;
        let h = (seg[1] - seg[0]) / k_panels as f64;
        for j in 0..k_panels {
            let (rs, rw) = gl_on(q.n_r, seg[0] + j as f64 * h, seg[0] + (j + 1) as f64 * h);
            for (r, wr) in rs.iter().zip(&rw) {
                let (ts, tw) = gl_on(q.n_t, -1.0, 1.0);
                let mut t_sum = 0.0;
                for (t, wt) in ts.iter().zip(&tw) {
                    let s = (1.0 - t * t).max(0.0).sqrt();
                    let vstar = Vector3::new(r * s, 0.0, speed + r * t);
                    t_sum += wt * k_hs(&v, &vstar).abs();
                }
                total += wr * t_sum * 2.0 * std::f64::consts::PI * r * r;
            }
        }
    }
    total
}

/// Tabulated Z(|v|) on a uniform speed grid with linear interpolation.
/// 2049 points over [0, s_max] keep the interpolation error ~1e-7 relative,
/// far below the Monte Carlo noise the weights feed into.
pub struct ZTable {
    s_max: f64,
    values: Vec<f64>,
}

impl ZTable {
    pub fn build(s_max: f64, q: &GainQuad) -> Self {
        let n = 2049;
        let values = (0..n)
            .map(|i| z_abs(s_max * i as f64 / (n - 1) as f64, q))
            .collect();
        ZTable { s_max, values }
    }

    pub fn eval(&self, speed: f64) -> f64 {
        let n = self.values.len();
        let x = (speed / self.s_max * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let i = (x as usize).min(n - 2);
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

/// Exact sampler for the normalised density |k(v, .)| / Z(|v|).
///
/// In spherical coordinates (r, t, phi) around v (polar axis v_hat), the
/// target |k| r^2 splits by the triangle inequality under the two-part
/// envelope G = f1_bound + f2_bound with
///
///   f1(r, t) = 2 c1 r e^{-r^2/4} e^{-(2|v|t + r)^2/4}   (gain part, exact)
///   f2(r, t) = c1 r^3 e^{-|v|^2} e^{-|v| r t} e^{-r^2/2} (loss part, exact)
///
///   f1_bound = 2 c1 r e^{-r^2/4}                  (drop the <=1 factor)
///   f2_bound = 2 c1 r^3 e^{-|v|^2/2} e^{-(r-|v|)^2/2} eta(t | r)
///
/// where eta(t|r) is the normalised density of e^{-|v| r t} on [-1, 1] and
/// the factor 2 majorises (1 - e^{-2z})/z <= 2, z = |v| r. Component 1
/// samples r as Rayleigh(sigma^2 = 2) and t uniformly; component 2 samples
/// r = |v| + xi by rejection of xi ~ N(0, sqrt 2) against r^3 e^{-xi^2/4}
/// (whose maximiser solves xi^2 + |v| xi - 6 = 0 in closed form) and t by the
/// exact inverse CDF of eta. A final acceptance against |k| r^2 / G makes the
/// output law exactly proportional to |k| r^2 restricted to r < r_cut; the
/// discarded tail mass beyond r_cut = |v| + 16 is below e^{-60} relative.
pub struct KernelSampler {
    v: V3,
    speed: f64,
    e1: V3,
    e2: V3,
    e3: V3,
    mass1: f64,
    mass2: f64,
    c_reject: f64,
    r_cut: f64,
}

impl KernelSampler {
    pub fn new(v: V3) -> Self {
        let speed = v.norm();
        let e3 = if speed > 1e-12 { v / speed } else { Vector3::z() };
        let helper = if e3.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (helper - e3 * helper.dot(&e3)).normalize();
        let e2 = e3.cross(&e1);

        let m = speed;
        // mass1 = int f1_bound dr dt dphi = 2 pi * 2 * 2 c1 * 2.
        let mass1 = 16.0 * std::f64::consts::PI * C1;
        // mass2 = 2 pi * 2 c1 e^{-m^2/2} * int_0^inf r^3 e^{-(r-m)^2/2} dr, and
        // the r-integral has the closed form
        //   (m^3 + 3m) sqrt(pi/2) (1 + erf(m / sqrt 2)) + (m^2 + 2) e^{-m^2/2}.
        let i_r = (m.powi(3) + 3.0 * m)
            * (std::f64::consts::PI / 2.0).sqrt()
            * (1.0 + erf(m / std::f64::consts::SQRT_2))
            + (m * m + 2.0) * (-0.5 * m * m).exp();
        let mass2 = 2.0 * std::f64::consts::PI * 2.0 * C1 * (-0.5 * m * m).exp() * i_r;
        // sup_{xi > -m} (m + xi)^3 e^{-xi^2/4}: stationary point of the log.
        let xi_star = 0.5 * (-m + (m * m + 24.0).sqrt());
        let c_reject = (m + xi_star).powi(3) * (-0.25 * xi_star * xi_star).exp();

        KernelSampler {
            v,
            speed,
            e1,
            e2,
            e3,
            mass1,
            mass2,
            c_reject,
            r_cut: speed + 16.0,
        }
    }

    /// Draw v* ~ |k(v, .)| / Z; returns (v*, sign of k(v, v*)).
    pub fn sample(&self, rng: &mut impl Rng) -> (V3, f64) {
        let m = self.speed;
        loop {
            let (r, t) = if rng.gen::<f64>() * (self.mass1 + self.mass2) < self.mass1 {
                // Component 1: Rayleigh radius, uniform cosine, then thin to
                // the exact gain shape.
                let r = 2.0 * (-rng.gen::<f64>().ln()).sqrt();
                let t = 2.0 * rng.gen::<f64>() - 1.0;
                let extra = (-(2.0 * m * t + r).powi(2) / 4.0).exp();
                if rng.gen::<f64>() >= extra {
                    continue;
                }
                (r, t)
            } else {
                // Component 2 radius: Gaussian proposal, cubic-tilt rejection.
                let r = loop {
                    let xi = std::f64::consts::SQRT_2 * gaussian(rng);
                    let r = m + xi;
                    if r <= 0.0 {
                        continue;
                    }
                    let acc = r.powi(3) * (-0.25 * xi * xi).exp() / self.c_reject;
                    if rng.gen::<f64>() < acc {
                        break r;
                    }
                };
                // t | r with density proportional to e^{-z t} on [-1, 1].
                let z = m * r;
                let t = if z < 1e-6 {
                    2.0 * rng.gen::<f64>() - 1.0
                } else {
                    let u = rng.gen::<f64>();
                    let a = z.exp();
                    let b = (-z).exp();
                    -((a - u * (a - b)).ln()) / z
                };
                (r, t.clamp(-1.0, 1.0))
            };
            if r >= self.r_cut || r < 1e-12 {
                continue;
            }

            // Final thinning against the true |k| under the summed envelope.
            // Branch 1 candidates were already thinned by the cross-term
            // factor, so the density actually proposed is gain * r^2, not the
            // plain Rayleigh bound; the envelope here has to match that.
            let f1b = 2.0 * C1 * r * (-0.25 * r * r).exp()
                * (-(2.0 * m * t + r).powi(2) / 4.0).exp();
            let z = m * r;
            let eta = if z < 1e-6 {
                0.5
            } else {
                z * (-z * t).exp() / (2.0 * z.sinh())
            };
            let f2b = 2.0 * C1 * r.powi(3) * (-0.5 * m * m).exp() * (-0.5 * (r - m).powi(2)).exp() * eta;
            let envelope = f1b + f2b;

            let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
            let s = (1.0 - t * t).max(0.0).sqrt();
            let vstar = self.v + (self.e1 * (s * phi.cos()) + self.e2 * (s * phi.sin()) + self.e3 * t) * r;
            let kv = k_hs(&self.v, &vstar);
            let target = kv.abs() * r * r;
            debug_assert!(target <= envelope * (1.0 + 1e-9), "envelope violated: {target} > {envelope}");
            if rng.gen::<f64>() * envelope < target {
                return (vstar, kv.signum());
            }
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one value per call keeps RNG stream consumption simple.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One row of the integrated-envelope sweep: the weighted kernel moment
///   L(s) = int |k(v, v*)|^mu e^{a |v*|^2} dv*
/// scaled by (1+s) e^{-a s^2}, which the Gaussian-envelope estimates bound by
/// a constant. The constant is fitted as the max over a coarse speed grid and
/// re-verified on a doubled grid.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub mu: f64,
    pub a: f64,
    pub fitted_c: f64,
    pub fine_max: f64,
    pub holds: bool,
}

fn weighted_moment(speed: f64, mu: f64, a: f64, q: &GainQuad) -> f64 {
    let v = Vector3::new(0.0, 0.0, speed);
    let r_max = speed + q.r_pad;
    let mut total = 0.0;
    // |k| has a kink where gain and loss cancel; at rest that locus is the
    // sphere r = sqrt 2, so keep a panel break there (same as z_abs).
    let mut pts = vec![0.0, 2.0f64.sqrt().min(r_max), r_max];
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    for seg in pts.windows(2) {
        let k_panels = ((seg[1] - seg[0]) / q.panel_w).ceil().max(1.0) as usize;
        let h = (seg[1] - seg[0]) / k_panels as f64;
        for j in 0..k_panels {
            let (rs, rw) = gl_on(q.n_r, seg[0] + j as f64 * h, seg[0] + (j + 1) as f64 * h);
            for (r, wr) in rs.iter().zip(&rw) {
                let (ts, tw) = gl_on(q.n_t, -1.0, 1.0);
                let mut t_sum = 0.0;
                for (t, wt) in ts.iter().zip(&tw) {
                    let s = (1.0 - t * t).max(0.0).sqrt();
                    let vstar = Vector3::new(r * s, 0.0, speed + r * t);
                    t_sum += wt * k_hs(&v, &vstar).abs().powf(mu) * (a * vstar.norm_squared()).exp();
                }
                total += wr * t_sum * 2.0 * std::f64::consts::PI * r * r;
            }
        }
    }
    total
}

/// Fit-then-verify protocol for the integrated envelope bound
///   L(s) (1 + s) e^{-a s^2} <= C  for all speeds.
/// The fitted C is the coarse-grid max (the bound's constant is not attained
/// at s = 0: the profile peaks at moderate speeds); verification allows the
/// finer grid a 5% peak-resolution headroom.
pub fn envelope_sweep(cases: &[(f64, f64)], s_max: f64, q: &GainQuad) -> Vec<SweepRow> {
    cases
        .iter()
        .map(|&(mu, a)| {
            let coarse: Vec<f64> = (0..=16)
                .map(|i| {
                    let s = s_max * i as f64 / 16.0;
                    weighted_moment(s, mu, a, q) * (1.0 + s) * (-a * s * s).exp()
                })
                .collect();
            let fitted_c = coarse.iter().cloned().fold(f64::MIN, f64::max);
            let fine_max = (0..=32)
                .map(|i| {
                    let s = s_max * i as f64 / 32.0;
                    weighted_moment(s, mu, a, q) * (1.0 + s) * (-a * s * s).exp()
                })
                .fold(f64::MIN, f64::max);
            SweepRow { mu, a, fitted_c, fine_max, holds: fine_max <= fitted_c * 1.05 }
        })
        .collect()
}

/// Pointwise envelope fit: sup over a sample cloud of |k| |v-v*| / E_rho
/// (gamma = 1 singular weight) — the constant in the pointwise kernel bound.
pub fn pointwise_envelope_constant(rho: f64, rng: &mut impl Rng, samples: usize) -> f64 {
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let v = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * 2.0;
        let vs = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * 2.0;
        let r = (vs - v).norm();
        if r < 1e-9 {
            continue;
        }
        let ratio = k_hs(&v, &vs).abs() * r / envelope_e(&v, &vs, rho);
        best = best.max(ratio);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Collision-frequency values frozen from an independent high-precision
    // evaluation (mpmath-grade quadrature of the defining integral).
    const NU_ORACLE: [(f64, f64); 4] = [
        (0.5, 0.764_610_048_952_153_23),
        (1.0, 0.922_191_636_753_867_17),
        (2.0, 1.409_858_455_404_774_6),
        (10.0, 6.297_903_540_010_389_1),
    ];

    #[test]
    fn nu_matches_frozen_oracle() {
        assert_relative_eq!(nu(0.0), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-14);
        for (s, want) in NU_ORACLE {
            // The erf in statrs is accurate to ~5e-11 relative near s = 0.5,
            // and that dominates the error budget here.
            assert_relative_eq!(nu(s), want, max_relative = 1e-9);
        }
    }

    #[test]
    fn nu_series_joins_closed_form() {
        for s in [5e-5_f64, 9e-5, 1.1e-4, 5e-4] {
            let series = INV_SQRT8 * (2.0 + (2.0 / 3.0) * s * s - (1.0 / 15.0) * s.powi(4));
            let e = 0.5 * std::f64::consts::PI.sqrt() * erf(s);
            let closed = INV_SQRT8 * ((-(s as f64) * s).exp() + (2.0 * s + 1.0 / s) * e);
            assert_relative_eq!(series, closed, max_relative = 1e-10);
        }
    }

    #[test]
    fn nu_prime_matches_finite_differences() {
        for s in [0.3, 1.0, 2.5, 6.0] {
            let h = 1e-6;
            let fd = (nu(s + h) - nu(s - h)) / (2.0 * h);
            assert_relative_eq!(nu_prime(s), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn nu_envelope_constants() {
        assert_relative_eq!(nu_lower_envelope(), NU0, epsilon = 1e-10);
        // Upper envelope attained at s = 0.
        let sup = (0..=3000)
            .map(|i| {
                let s = i as f64 * 0.01;
                nu(s) / (1.0 + s)
            })
            .fold(f64::MIN, f64::max);
        assert_relative_eq!(sup, NU1, epsilon = 1e-9);
    }

    #[test]
    fn kernel_symmetry_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let v = Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * 2.0;
            let vs = Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * 2.0;
            assert_eq!(kernel(&v, &vs).unwrap().to_bits(), kernel(&vs, &v).unwrap().to_bits());
        }
    }

    #[test]
    fn kernel_rejects_coincident_velocities() {
        let v = Vector3::new(0.3, -0.1, 0.9);
        assert!(matches!(kernel(&v, &v), Err(GkinError::CoincidentVelocities)));
    }

    #[test]
    fn kernel_at_origin_closed_form() {
        // k(0, v*) = 2^{-3/2} pi^{-1} (2/rho - rho) e^{-rho^2/2}; sign change
        // exactly at rho = sqrt 2.
        for rho in [0.3, 1.0, 1.4, 1.5, 3.0] {
            let vs = Vector3::new(0.0, rho, 0.0);
            let want = C1 * (2.0 / rho - rho) * (-0.5 * rho * rho).exp();
            assert_relative_eq!(kernel(&Vector3::zeros(), &vs).unwrap(), want, max_relative = 1e-13);
        }
        let just_below = Vector3::new(0.0, 0.0, 2.0f64.sqrt() - 1e-8);
        let just_above = Vector3::new(0.0, 0.0, 2.0f64.sqrt() + 1e-8);
        assert!(kernel(&Vector3::zeros(), &just_below).unwrap() > 0.0);
        assert!(kernel(&Vector3::zeros(), &just_above).unwrap() < 0.0);
    }

    #[test]
    fn detailed_balance_against_quadrature() {
        // int k(v, .) M = nu(v) M(v): ties kernel and collision frequency
        // together; any transcription slip in either breaks this.
        let q = GainQuad { n_r: 32, n_t: 32, n_phi: 1, panel_w: 1.0, r_pad: 12.0 };
        for speed in [0.0, 0.5, 1.3, 3.0] {
            let v = Vector3::new(0.0, 0.0, speed);
            // Full space = half space with the cap at t_hi = 1 twice; use the
            // z_abs machinery shape: direct 2-D reduction.
            let full = {
                let r_max = speed + q.r_pad;
                let mut total = 0.0;
                let k_panels = (r_max / q.panel_w).ceil() as usize;
                let h = r_max / k_panels as f64;
                for j in 0..k_panels {
                    let (rs, rw) = gl_on(q.n_r, j as f64 * h, (j + 1) as f64 * h);
                    for (r, wr) in rs.iter().zip(&rw) {
                        let (ts, tw) = gl_on(q.n_t, -1.0, 1.0);
                        let mut t_sum = 0.0;
                        for (t, wt) in ts.iter().zip(&tw) {
                            let s = (1.0 - t * t).max(0.0).sqrt();
                            let vstar = Vector3::new(r * s, 0.0, speed + r * t);
                            t_sum += wt * k_hs(&v, &vstar) * (-0.5 * vstar.norm_squared()).exp();
                        }
                        total += wr * t_sum * 2.0 * std::f64::consts::PI * r * r;
                    }
                }
                total
            };
            assert_relative_eq!(full, gain_full_closed(speed), max_relative = 1e-8);
        }
    }

    #[test]
    fn half_space_gain_limit_and_symmetry() {
        let q = GainQuad::default();
        // At v = 0 the half-space gain is exactly half the full gain:
        // 2^{-3/2}.
        let g0 = half_space_gain(&Vector3::zeros(), &Vector3::x(), &q);
        assert_relative_eq!(g0, INV_SQRT8, max_relative = 1e-6);
        // Tangential v: still exactly half the full integral by symmetry.
        let v = Vector3::new(0.0, 0.0, 0.5);
        let gt = half_space_gain(&v, &Vector3::x(), &q);
        assert_relative_eq!(gt, 0.5 * gain_full_closed(0.5), max_relative = 1e-6);
        // Complementary halves add to the full-space closed form.
        let vh = Vector3::new(0.35, 0.0, 0.0);
        let sum = half_space_gain(&vh, &Vector3::x(), &q) + half_space_gain(&vh, &(-Vector3::x()), &q);
        assert_relative_eq!(sum, gain_full_closed(0.35), max_relative = 1e-6);
    }

    #[test]
    fn half_space_gain_head_on_oracle() {
        // Frozen from two independent evaluation routes (shifted spherical
        // quadrature and an origin-centred adaptive double integral), which
        // agreed to 8 decimals: H(-0.5 n; n) = 0.605003167.
        let q = GainQuad::default().doubled();
        let got = half_space_gain(&Vector3::new(-0.5, 0.0, 0.0), &Vector3::x(), &q);
        assert_relative_eq!(got, 0.605_003_167, max_relative = 3e-6);
    }

    #[test]
    fn identity_holds_at_rounding_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let v = Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * 3.0;
            let vs = Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * 3.0;
            if (vs - v).norm() < 1e-6 {
                continue;
            }
            let rho = 0.5;
            let a = rng.gen::<f64>() * 0.24; // admissible: a < (1-rho)/2
            assert!(identity_check(&v, &vs, a, rho) < 1e-12);
        }
    }

    #[test]
    fn z_abs_at_origin_closed_form() {
        // int |k(0, .)| = 4 sqrt(2) / e: the radial profile (2 rho - rho^3)
        // e^{-rho^2/2} integrates to 2/e on each side of its sqrt-2 zero.
        let q = GainQuad { n_r: 40, n_t: 40, n_phi: 1, panel_w: 1.0, r_pad: 14.0 };
        let want = 4.0 * std::f64::consts::SQRT_2 / std::f64::consts::E;
        assert_relative_eq!(z_abs(0.0, &q), want, max_relative = 1e-9);
    }

    #[test]
    fn z_table_interpolates_accurately() {
        let q = GainQuad::default();
        let table = ZTable::build(8.0, &q);
        for speed in [0.013, 0.77, 2.345, 6.1] {
            assert_relative_eq!(table.eval(speed), z_abs(speed, &q), max_relative = 1e-5);
        }
    }

    #[test]
    fn apply_k_reproduces_detailed_balance() {
        let q = VelocityQuadrature { n_r: 24, n_t: 24, n_phi: 16, r_max: 13.0, panel_w: 2.0 };
        for speed in [0.4, 1.0, 2.2] {
            let v = Vector3::new(speed / 3.0f64.sqrt(), speed / 3.0f64.sqrt(), speed / 3.0f64.sqrt());
            let got = apply_k(&v, |u| (-0.5 * u.norm_squared()).exp(), &q);
            assert_relative_eq!(got, gain_full_closed(speed), max_relative = 1e-6);
        }
    }

    #[test]
    fn apply_k_grad_matches_closed_derivative() {
        // K M = nu M pointwise, so grad_v K M = v_hat (nu' - s nu) M.
        let q = VelocityQuadrature { n_r: 24, n_t: 24, n_phi: 16, r_max: 13.0, panel_w: 2.0 };
        let v = Vector3::new(0.0, 0.0, 1.2);
        let g = apply_k_grad(&v, |u| (-0.5 * u.norm_squared()).exp(), &q);
        let want = (nu_prime(1.2) - 1.2 * nu(1.2)) * (-0.5 * 1.2f64 * 1.2).exp();
        assert_relative_eq!(g.z, want, max_relative = 1e-5);
        assert!(g.x.abs() < 1e-7 && g.y.abs() < 1e-7);
    }

    #[test]
    fn sampler_moments_match_quadrature() {
        // E[ r ] and E[ t ] under |k(v,.)|/Z from the sampler vs the 2-D
        // quadrature; 3 sigma with 200k draws.
        let speed = 0.9;
        let v = Vector3::new(0.0, 0.0, speed);
        let q = GainQuad { n_r: 32, n_t: 32, n_phi: 1, panel_w: 1.0, r_pad: 14.0 };
        let z = z_abs(speed, &q);
        // Quadrature moments of r and t under |k| r^2.
        let (mut mr, mut mt) = (0.0, 0.0);
        {
            let r_max = speed + q.r_pad;
            let k_panels = (r_max / q.panel_w).ceil() as usize;
            let h = r_max / k_panels as f64;
            for j in 0..k_panels {
                let (rs, rw) = gl_on(q.n_r, j as f64 * h, (j + 1) as f64 * h);
                for (r, wr) in rs.iter().zip(&rw) {
                    let (ts, tw) = gl_on(q.n_t, -1.0, 1.0);
                    for (t, wt) in ts.iter().zip(&tw) {
                        let s = (1.0 - t * t).max(0.0).sqrt();
                        let vstar = Vector3::new(r * s, 0.0, speed + r * t);
                        let m = k_hs(&v, &vstar).abs() * 2.0 * std::f64::consts::PI * r * r;
                        mr += wr * wt * m * r;
                        mt += wr * wt * m * t;
                    }
                }
            }
        }
        mr /= z;
        mt /= z;

        let sampler = KernelSampler::new(v);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let (mut sr, mut sr2, mut st, mut st2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (vstar, _) = sampler.sample(&mut rng);
            let r = (vstar - v).norm();
            let t = (vstar - v).z / r;
            sr += r;
            sr2 += r * r;
            st += t;
            st2 += t * t;
        }
        let nf = n as f64;
        let (mean_r, mean_t) = (sr / nf, st / nf);
        let se_r = ((sr2 / nf - mean_r * mean_r) / nf).sqrt();
        let se_t = ((st2 / nf - mean_t * mean_t) / nf).sqrt();
        assert!((mean_r - mr).abs() < 3.0 * se_r, "r: {mean_r} vs {mr} (se {se_r})");
        assert!((mean_t - mt).abs() < 3.0 * se_t, "t: {mean_t} vs {mt} (se {se_t})");
    }

    #[test]
    fn envelope_sweep_bounds_hold() {
        let q = GainQuad { n_r: 16, n_t: 16, n_phi: 1, panel_w: 2.0, r_pad: 10.0 };
        let rows = envelope_sweep(&[(1.0, 0.0), (2.0, 0.0), (1.0, 0.125), (1.0, -0.125)], 8.0, &q);
        for row in &rows {
            assert!(row.holds, "sweep failed for mu={} a={}: C={} fine={}", row.mu, row.a, row.fitted_c, row.fine_max);
        }
        // Analytic anchor at s = 0, mu = 1, a = 0: the moment equals
        // 4 sqrt2 / e and the scale factor is 1.
        let l0 = weighted_moment(0.0, 1.0, 0.0, &GainQuad { n_r: 40, n_t: 40, n_phi: 1, panel_w: 1.0, r_pad: 14.0 });
        assert_relative_eq!(l0, 4.0 * std::f64::consts::SQRT_2 / std::f64::consts::E, max_relative = 1e-9);
    }

    #[test]
    fn pointwise_envelope_constant_is_order_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = pointwise_envelope_constant(0.5, &mut rng, 50_000);
        assert!(c > 0.1 && c < 1.0, "constant drifted: {c}");
    }
}
