//! Transport operators along backward characteristics: the boundary-data
//! propagator J, the interior Duhamel integral S, and the three auxiliary
//! operators (boundary term of grad_x, the s-weighted integral, boundary term
//! of grad_v) that appear when S is differentiated.

use serde::{Deserialize, Serialize};

use crate::collision::nu;
use crate::error::Result;
use crate::geometry::{BoundaryPoint, ConvexDomain, V3};
use crate::quad::gl_on;

/// C-infinity bump building block: theta(u) = exp(-1/u) for u > 0, else 0.
fn bump_theta(u: f64) -> f64 {
    if u > 0.0 {
        (-1.0 / u).exp()
    } else {
        0.0
    }
}

/// Smooth transition equal to 1 for u <= 0 and 0 for u >= 1, strictly
/// monotone in between: theta(1-u) / (theta(u) + theta(1-u)).
pub fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        1.0
    } else if u >= 1.0 {
        0.0
    } else {
        let a = bump_theta(1.0 - u);
        a / (bump_theta(u) + a)
    }
}

/// Incoming boundary data g(z, v) = phi(z) e^{-|v|^2/2} with a smooth spatial
/// cutoff phi.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "data", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryData {
    /// phi supported on the flat face of a FlatCap: 1 on the disc of radius
    /// r1/2 about the face centre, 0 outside radius r1 (and on the whole
    /// spherical part).
    FlatCutoff { r1: f64 },
    /// phi supported on a spherical cap of the ball around the pole +r e1:
    /// 1 for polar angle <= theta1, 0 beyond theta2.
    CapCutoff { theta1: f64, theta2: f64 },
    /// phi identically 1: pure Maxwellian inflow.
    Uniform,
}

impl Default for BoundaryData {
    fn default() -> Self {
        BoundaryData::CapCutoff {
            theta1: std::f64::consts::FRAC_PI_6,
            theta2: std::f64::consts::FRAC_PI_3,
        }
    }
}

impl BoundaryData {
    /// Spatial factor phi(z) at a boundary point.
    pub fn spatial(&self, dom: &ConvexDomain, bp: &BoundaryPoint) -> f64 {
        match *self {
            BoundaryData::Uniform => 1.0,
            BoundaryData::FlatCutoff { r1 } => {
                // Only the flat face carries data; its points have n = +e1.
                if bp.n.x < 0.999_999 {
                    return 0.0;
                }
                let rho = (bp.z.y * bp.z.y + bp.z.z * bp.z.z).sqrt();
                smooth_step(2.0 * rho / r1 - 1.0)
            }
            BoundaryData::CapCutoff { theta1, theta2 } => {
                let r = match *dom {
                    ConvexDomain::Ball { radius } => radius,
                    // On a FlatCap, measure the angle on the carrier sphere.
                    ConvexDomain::FlatCap { sphere_radius, .. } => sphere_radius,
                };
                let axis_coord = match *dom {
                    ConvexDomain::Ball { .. } => bp.z.x,
                    ConvexDomain::FlatCap { offset, .. } => bp.z.x + offset,
                };
                let theta = (axis_coord / r).clamp(-1.0, 1.0).acos();
                smooth_step((theta - theta1) / (theta2 - theta1))
            }
        }
    }

    /// Full data g(z, v) = phi(z) e^{-|v|^2/2}.
    pub fn eval(&self, dom: &ConvexDomain, bp: &BoundaryPoint, v: &V3) -> f64 {
        let phi = self.spatial(dom, bp);
        if phi == 0.0 {
            0.0
        } else {
            phi * (-0.5 * v.norm_squared()).exp()
        }
    }
}

/// J g (x, v) = e^{-nu(|v|) tau(x, v)} g(q(x, v), v), and J g (x, 0) = 0.
///
/// Grazing rays (incidence below resolution) get value 0 rather than an
/// error: the damping factor at such rays carries no mass, and integration
/// loops should not die on a tangential quadrature node.
pub fn apply_j(
    dom: &ConvexDomain,
    g: &dyn Fn(&BoundaryPoint, &V3) -> f64,
    x: &V3,
    v: &V3,
) -> Result<f64> {
    if v.norm() == 0.0 {
        return Ok(0.0);
    }
    let fp = match dom.footpoint(x, v) {
        Ok(fp) => fp,
        Err(crate::error::GkinError::GrazingRay { .. }) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    Ok((-nu(v.norm()) * fp.tau).exp() * g(&fp.point, v))
}

/// Quadrature for Duhamel integrals int_0^tau e^{-nu s} h(x - s v, v) ds:
/// Gauss-Legendre panels of length at most `panel_len_nu` / nu, truncated
/// once nu s exceeds `truncate_nu` (the tail mass is below e^{-truncate_nu}).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LineQuadrature {
    pub n_per_panel: usize,
    pub panel_len_nu: f64,
    pub truncate_nu: f64,
}

impl Default for LineQuadrature {
    fn default() -> Self {
        LineQuadrature { n_per_panel: 8, panel_len_nu: 0.5, truncate_nu: 40.0 }
    }
}

impl LineQuadrature {
    pub fn doubled(&self) -> Self {
        LineQuadrature {
            n_per_panel: self.n_per_panel * 2,
            panel_len_nu: self.panel_len_nu * 0.5,
            truncate_nu: self.truncate_nu + 5.0,
        }
    }

    /// Integrate w(s) h(x - s v) e^{-nu s} over s in [0, tau].
    fn integrate(
        &self,
        tau: f64,
        nu_v: f64,
        weight: impl Fn(f64) -> f64,
        mut h_along: impl FnMut(f64) -> f64,
    ) -> f64 {
        let upper = tau.min(self.truncate_nu / nu_v);
        if upper <= 0.0 {
            return 0.0;
        }
        let panel = self.panel_len_nu / nu_v;
        let n_panels = (upper / panel).ceil().max(1.0) as usize;
        let h = upper / n_panels as f64;
        let mut total = 0.0;
        for j in 0..n_panels {
            let (ss, ws) = gl_on(self.n_per_panel, j as f64 * h, (j + 1) as f64 * h);
            for (s, w) in ss.iter().zip(&ws) {
                total += w * weight(*s) * (-nu_v * s).exp() * h_along(*s);
            }
        }
        total
    }
}

/// S h (x, v) = int_0^{tau(x,v)} e^{-nu(|v|) s} h(x - s v, v) ds, with the
/// stationary-point convention S h (x, 0) = h(x, 0) / nu(0).
pub fn apply_s(
    dom: &ConvexDomain,
    h: &dyn Fn(&V3, &V3) -> f64,
    x: &V3,
    v: &V3,
    lq: &LineQuadrature,
) -> Result<f64> {
    if v.norm() == 0.0 {
        return Ok(h(x, v) / nu(0.0));
    }
    let tau = dom.exit_time(x, v)?;
    let nu_v = nu(v.norm());
    Ok(lq.integrate(tau, nu_v, |_| 1.0, |s| h(&(x - v * s), v)))
}

/// Boundary term of grad_x S:
///   S_x h (x, v) = (grad_x tau) e^{-nu tau} h(q(x, v), v).
pub fn apply_s_x(
    dom: &ConvexDomain,
    h: &dyn Fn(&V3, &V3) -> f64,
    x: &V3,
    v: &V3,
) -> Result<V3> {
    let fp = dom.footpoint(x, v)?;
    let grad_tau = fp.point.n / fp.point.n.dot(v);
    Ok(grad_tau * (-nu(v.norm()) * fp.tau).exp() * h(&fp.point.z, v))
}

/// s-weighted Duhamel integral:
///   S_s h (x, v) = int_0^tau s e^{-nu s} h(x - s v, v) ds.
pub fn apply_s_s(
    dom: &ConvexDomain,
    h: &dyn Fn(&V3, &V3) -> f64,
    x: &V3,
    v: &V3,
    lq: &LineQuadrature,
) -> Result<f64> {
    if v.norm() == 0.0 {
        // Limit of the defining integral with tau -> infinity: h(x,0)/nu^2.
        return Ok(h(x, v) / (nu(0.0) * nu(0.0)));
    }
    let tau = dom.exit_time(x, v)?;
    let nu_v = nu(v.norm());
    Ok(lq.integrate(tau, nu_v, |s| s, |s| h(&(x - v * s), v)))
}

/// Boundary term of grad_v S:
///   S_v h (x, v) = (grad_v tau) e^{-nu tau} h(q(x, v), v)
/// with grad_v tau = -tau grad_x tau.
pub fn apply_s_v(
    dom: &ConvexDomain,
    h: &dyn Fn(&V3, &V3) -> f64,
    x: &V3,
    v: &V3,
) -> Result<V3> {
    let fp = dom.footpoint(x, v)?;
    let grad_tau_v = -fp.point.n / fp.point.n.dot(v) * fp.tau;
    Ok(grad_tau_v * (-nu(v.norm()) * fp.tau).exp() * h(&fp.point.z, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::geometry::sample_unit_sphere;

    fn ball() -> ConvexDomain {
        ConvexDomain::Ball { radius: 0.8 }
    }

    #[test]
    fn smooth_step_endpoints_and_monotonicity() {
        assert_eq!(smooth_step(-0.3), 1.0);
        assert_eq!(smooth_step(0.0), 1.0);
        assert_eq!(smooth_step(1.0), 0.0);
        assert_eq!(smooth_step(1.7), 0.0);
        assert_relative_eq!(smooth_step(0.5), 0.5, epsilon = 1e-15);
        let mut prev = 1.0;
        for i in 1..=100 {
            let val = smooth_step(i as f64 / 100.0);
            assert!(val <= prev + 1e-15);
            prev = val;
        }
    }

    #[test]
    fn s_of_constant_matches_closed_form() {
        // h == 1: S 1 = (1 - e^{-nu tau}) / nu.
        let dom = ball();
        let lq = LineQuadrature::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let x = dom.sample_interior(&mut rng);
            let v = sample_unit_sphere(&mut rng) * (0.05 + 3.0 * rng.gen::<f64>());
            let tau = dom.exit_time(&x, &v).unwrap();
            let nu_v = crate::collision::nu(v.norm());
            let want = (1.0 - (-nu_v * tau).exp()) / nu_v;
            let got = apply_s(&dom, &|_, _| 1.0, &x, &v, &lq).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn s_s_of_constant_matches_closed_form() {
        // h == 1: S_s 1 = (1 - e^{-nu tau} (1 + nu tau)) / nu^2.
        let dom = ball();
        let lq = LineQuadrature::default();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let x = dom.sample_interior(&mut rng);
            let v = sample_unit_sphere(&mut rng) * (0.05 + 3.0 * rng.gen::<f64>());
            let tau = dom.exit_time(&x, &v).unwrap();
            let nu_v = crate::collision::nu(v.norm());
            let want = (1.0 - (-nu_v * tau).exp() * (1.0 + nu_v * tau)) / (nu_v * nu_v);
            let got = apply_s_s(&dom, &|_, _| 1.0, &x, &v, &lq).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn j_decays_along_the_characteristic() {
        // J g (x + s v, v) = e^{-nu s} J g (x, v) while the segment stays
        // inside: both points share the entry footpoint, and the downstream
        // one has accumulated s more travel time of damping.
        let dom = ball();
        let g = BoundaryData::Uniform;
        let gf = |bp: &BoundaryPoint, v: &V3| g.eval(&ball(), bp, v);
        let x = Vector3::new(0.1, -0.2, 0.05);
        let v = Vector3::new(0.6, 0.3, -0.2);
        let j0 = apply_j(&dom, &gf, &x, &v).unwrap();
        let s = 0.4;
        let j1 = apply_j(&dom, &gf, &(x + v * s), &v).unwrap();
        let nu_v = crate::collision::nu(v.norm());
        assert_relative_eq!(j1, j0 * (-nu_v * s).exp(), max_relative = 1e-11);
    }

    #[test]
    fn stationary_conventions() {
        let dom = ball();
        let zero = Vector3::zeros();
        let gf = |_: &BoundaryPoint, _: &V3| 1.0;
        assert_eq!(apply_j(&dom, &gf, &Vector3::new(0.1, 0.0, 0.0), &zero).unwrap(), 0.0);
        let h = |x: &V3, _: &V3| 1.0 + x.norm_squared();
        let lq = LineQuadrature::default();
        let x = Vector3::new(0.2, 0.1, 0.0);
        let got = apply_s(&dom, &h, &x, &zero, &lq).unwrap();
        assert_relative_eq!(got, h(&x, &zero) / crate::collision::nu(0.0), epsilon = 1e-14);
        let got_s = apply_s_s(&dom, &h, &x, &zero, &lq).unwrap();
        let nu0 = crate::collision::nu(0.0);
        assert_relative_eq!(got_s, h(&x, &zero) / (nu0 * nu0), epsilon = 1e-14);
    }

    #[test]
    fn s_satisfies_the_transport_equation() {
        // u = S h solves v . grad_x u + nu u = h in the interior; check the
        // directional derivative by central differences along v.
        let dom = ball();
        let lq = LineQuadrature { n_per_panel: 12, panel_len_nu: 0.25, truncate_nu: 45.0 };
        let h = |x: &V3, v: &V3| (-(x.norm_squared()) - 0.1 * v.norm_squared()).exp();
        let x = Vector3::new(0.15, -0.1, 0.2);
        let v = Vector3::new(0.5, 0.4, -0.3);
        let eps = 1e-6;
        let up = apply_s(&dom, &h, &(x + v * eps), &v, &lq).unwrap();
        let um = apply_s(&dom, &h, &(x - v * eps), &v, &lq).unwrap();
        let u0 = apply_s(&dom, &h, &x, &v, &lq).unwrap();
        let transport = (up - um) / (2.0 * eps) + crate::collision::nu(v.norm()) * u0;
        assert_relative_eq!(transport, h(&x, &v), max_relative = 1e-7);
    }

    #[test]
    fn grad_x_of_s_splits_into_boundary_and_interior_terms() {
        // grad_x S h = S_x h + S (grad_x h) for h smooth in x.
        let dom = ball();
        let lq = LineQuadrature { n_per_panel: 12, panel_len_nu: 0.25, truncate_nu: 45.0 };
        let h = |x: &V3, _: &V3| (-x.norm_squared()).exp();
        let grad_h = |x: &V3| x * (-2.0 * (-x.norm_squared()).exp());
        let x = Vector3::new(0.2, 0.1, -0.15);
        let v = Vector3::new(0.7, -0.2, 0.4);

        let boundary = apply_s_x(&dom, &h, &x, &v).unwrap();
        let mut interior = V3::zeros();
        for i in 0..3 {
            let hi = move |y: &V3, vv: &V3| {
                let _ = vv;
                grad_h(y)[i]
            };
            interior[i] = apply_s(&dom, &hi, &x, &v, &lq).unwrap();
        }
        let total = boundary + interior;

        let eps = 2e-6;
        for i in 0..3 {
            let mut dx = V3::zeros();
            dx[i] = eps;
            let fp = apply_s(&dom, &h, &(x + dx), &v, &lq).unwrap();
            let fm = apply_s(&dom, &h, &(x - dx), &v, &lq).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert_relative_eq!(fd, total[i], max_relative = 2e-5);
        }
    }

    #[test]
    fn grad_v_of_s_splits_into_all_four_terms() {
        // grad_v S h = S_v h - v_hat nu'(|v|) S_s h - S_s(grad_x h) + S(grad_v h).
        let dom = ball();
        let lq = LineQuadrature { n_per_panel: 12, panel_len_nu: 0.25, truncate_nu: 45.0 };
        let h = |x: &V3, v: &V3| (-x.norm_squared() - 0.2 * v.norm_squared()).exp();
        let grad_x_h = |x: &V3, v: &V3| x * (-2.0 * h(x, v));
        let grad_v_h = |x: &V3, v: &V3| v * (-0.4 * h(x, v));
        let x = Vector3::new(0.1, 0.2, -0.1);
        let v = Vector3::new(0.6, -0.3, 0.5);

        let sv = apply_s_v(&dom, &h, &x, &v).unwrap();
        let ss_h = apply_s_s(&dom, &h, &x, &v, &lq).unwrap();
        let vhat = v / v.norm();
        let mut total = sv - vhat * crate::collision::nu_prime(v.norm()) * ss_h;
        for i in 0..3 {
            let gx = move |y: &V3, vv: &V3| grad_x_h(y, vv)[i];
            let gv = move |y: &V3, vv: &V3| grad_v_h(y, vv)[i];
            total[i] += -apply_s_s(&dom, &gx, &x, &v, &lq).unwrap()
                + apply_s(&dom, &gv, &x, &v, &lq).unwrap();
        }

        let eps = 2e-6;
        for i in 0..3 {
            let mut dv = V3::zeros();
            dv[i] = eps;
            let fp = apply_s(&dom, &h, &x, &(v + dv), &lq).unwrap();
            let fm = apply_s(&dom, &h, &x, &(v - dv), &lq).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert_relative_eq!(fd, total[i], max_relative = 5e-5);
        }
    }

    #[test]
    fn boundary_data_cutoffs_localise() {
        let dom = ConvexDomain::FlatCap { sphere_radius: 1.0, offset: 0.25 };
        let data = BoundaryData::FlatCutoff { r1: 0.4 };
        // Centre of the flat face: full strength.
        let centre = BoundaryPoint { z: V3::zeros(), n: Vector3::x() };
        assert_eq!(data.spatial(&dom, &centre), 1.0);
        // Beyond r1: zero. On the spherical part: zero.
        let far = BoundaryPoint { z: Vector3::new(0.0, 0.45, 0.0), n: Vector3::x() };
        assert_eq!(data.spatial(&dom, &far), 0.0);
        let sph = BoundaryPoint {
            z: Vector3::new(-1.25, 0.0, 0.0),
            n: -Vector3::x(),
        };
        assert_eq!(data.spatial(&dom, &sph), 0.0);

        let ball = ConvexDomain::Ball { radius: 0.5 };
        let cap = BoundaryData::default();
        let pole = BoundaryPoint { z: Vector3::new(0.5, 0.0, 0.0), n: Vector3::x() };
        assert_eq!(cap.spatial(&ball, &pole), 1.0);
        let back = BoundaryPoint { z: Vector3::new(-0.5, 0.0, 0.0), n: -Vector3::x() };
        assert_eq!(cap.spatial(&ball, &back), 0.0);
    }

    #[test]
    fn flat_cutoff_smoothness_across_the_edge() {
        // The transition is C-infinity; sample a fine transect and verify the
        // first differences themselves vanish smoothly at both ends.
        let dom = ConvexDomain::FlatCap { sphere_radius: 1.0, offset: 0.25 };
        let data = BoundaryData::FlatCutoff { r1: 0.4 };
        let eval = |rho: f64| {
            data.spatial(
                &dom,
                &BoundaryPoint { z: Vector3::new(0.0, rho, 0.0), n: Vector3::x() },
            )
        };
        let h = 1e-4;
        for rho in [0.2 + 2.0 * h, 0.4 - 2.0 * h] {
            let d1 = (eval(rho + h) - eval(rho - h)) / (2.0 * h);
            assert!(d1.abs() < 1e-2, "derivative should be tiny near the flats: {d1}");
        }
        let mid = (eval(0.301) - eval(0.299)) / 0.002;
        assert!(mid < -1.0, "mid-transition slope should be order -1/width: {mid}");
    }
}
