//! Convex domains with explicit exit-time (backward ray) geometry.
//!
//! Throughout, `tau(x, v)` is the *backward* exit time: the largest s such
//! that x - s v stays inside the domain, i.e. the time since the ray carrying
//! (x, v) entered through the boundary. Its footpoint q(x, v) = x - tau v is
//! the entry point, and N(z, v) = -v_hat . n(z) is the incidence factor
//! (positive for rays entering at z, ~0 for grazing rays).

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GkinError, Result};

pub type V3 = Vector3<f64>;

/// Incidence factors below this are treated as tangential rays: footpoint
/// normals and exit-time gradients are returned as errors rather than
/// catastrophically ill-conditioned numbers.
pub const GRAZING_TOL: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryPoint {
    pub z: V3,
    /// Outward unit normal.
    pub n: V3,
}

/// Footpoint data of a backward ray.
#[derive(Clone, Copy, Debug)]
pub struct Footpoint {
    pub point: BoundaryPoint,
    pub tau: f64,
    /// N(q, v) = -v_hat . n(q) > 0.
    pub incidence: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvexDomain {
    /// Ball of radius `radius` centred at the origin.
    Ball { radius: f64 },
    /// Ball of radius `sphere_radius` centred at (-offset, 0, 0), cut by the
    /// plane x_1 = 0 and keeping the side x_1 < 0. The boundary has a flat
    /// disc of radius sqrt(sphere_radius^2 - offset^2) in the plane x_1 = 0
    /// and a spherical remainder.
    FlatCap { sphere_radius: f64, offset: f64 },
}

impl ConvexDomain {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConvexDomain::Ball { radius } => {
                if !(radius > 0.0) {
                    return Err(GkinError::InvalidDomain(format!("ball radius {radius} must be positive")));
                }
            }
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                if !(sphere_radius > 0.0) {
                    return Err(GkinError::InvalidDomain(format!(
                        "sphere radius {sphere_radius} must be positive"
                    )));
                }
                if !(0.0 <= offset && offset < sphere_radius) {
                    return Err(GkinError::InvalidDomain(format!(
                        "offset {offset} must lie in [0, sphere_radius)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Radius of the flat face (FlatCap only).
    pub fn flat_radius(&self) -> Option<f64> {
        match *self {
            ConvexDomain::Ball { .. } => None,
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                Some((sphere_radius * sphere_radius - offset * offset).sqrt())
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            ConvexDomain::Ball { radius } => 2.0 * radius,
            // The equatorial antipodal pair of the carrier sphere survives the
            // cut for any offset >= 0, so the cap keeps the full diameter.
            ConvexDomain::FlatCap { sphere_radius, .. } => 2.0 * sphere_radius,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            ConvexDomain::Ball { radius } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                // Sphere volume minus the cap above the cutting plane. The cap
                // of height h = R - a has volume pi h^2 (3R - h)/3.
                let h = sphere_radius - offset;
                let full = 4.0 / 3.0 * std::f64::consts::PI * sphere_radius.powi(3);
                full - std::f64::consts::PI * h * h * (3.0 * sphere_radius - h) / 3.0
            }
        }
    }

    pub fn contains(&self, x: &V3) -> bool {
        match *self {
            ConvexDomain::Ball { radius } => x.norm_squared() < radius * radius,
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                let y = x + V3::new(offset, 0.0, 0.0);
                x.x < 0.0 && y.norm_squared() < sphere_radius * sphere_radius
            }
        }
    }

    /// Backward exit time of a ball centred at `c` with radius `r`, from an
    /// interior point.
    ///
    /// The positive root of |x - s v - c|^2 = r^2 is
    ///   s = ( y.v_hat + sqrt(r^2 - |y|^2 + (y.v_hat)^2) ) / |v|,  y = x - c.
    /// When y.v_hat < 0 the two terms nearly cancel for x close to the
    /// boundary, so we switch to the algebraically identical form
    ///   s = (r^2 - |y|^2) / ( |v| (sqrt(...) - y.v_hat) ),
    /// whose numerator is computed from exactly representable inputs.
    fn ball_exit(y: &V3, v: &V3, r: f64) -> f64 {
        let speed = v.norm();
        let vh = v / speed;
        let b = y.dot(&vh);
        let disc = (r * r - y.norm_squared() + b * b).max(0.0);
        let root = disc.sqrt();
        if b >= 0.0 {
            (b + root) / speed
        } else {
            (r * r - y.norm_squared()) / (speed * (root - b))
        }
    }

    /// Backward exit time tau(x, v) from an interior point, v != 0.
    pub fn exit_time(&self, x: &V3, v: &V3) -> Result<f64> {
        if !self.contains(x) {
            return Err(GkinError::OutsideDomain { x: [x.x, x.y, x.z] });
        }
        match *self {
            ConvexDomain::Ball { radius } => Ok(Self::ball_exit(x, v, radius)),
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                let y = x + V3::new(offset, 0.0, 0.0);
                let t_sphere = Self::ball_exit(&y, v, sphere_radius);
                // The intersection of convex sets exits when the first of the
                // two constituents does; backward ray hits x_1 = 0 only if
                // v_1 < 0 (moving backward means +x_1 direction).
                if v.x < 0.0 {
                    Ok(t_sphere.min(x.x / v.x))
                } else {
                    Ok(t_sphere)
                }
            }
        }
    }

    /// Outward unit normal at a boundary point. The caller tells which piece
    /// the point is on implicitly: points with x_1 within tolerance of 0 on a
    /// FlatCap are assigned to the flat face.
    pub fn normal_at(&self, z: &V3) -> V3 {
        match *self {
            ConvexDomain::Ball { .. } => z.normalize(),
            ConvexDomain::FlatCap { offset, .. } => {
                if z.x.abs() < 1e-12 {
                    V3::new(1.0, 0.0, 0.0)
                } else {
                    (z + V3::new(offset, 0.0, 0.0)).normalize()
                }
            }
        }
    }

    /// Entry point, normal, exit time and incidence of the backward ray.
    pub fn footpoint(&self, x: &V3, v: &V3) -> Result<Footpoint> {
        let tau = self.exit_time(x, v)?;
        let z = x - v * tau;
        // Snap the root-finder's O(eps) drift back onto the boundary piece:
        // downstream identities (circle lemma, chord formulas) are tested at
        // 1e-10 and need a clean normal.
        let (n, z_on) = match *self {
            ConvexDomain::Ball { radius } => {
                let n = z.normalize();
                (n, n * radius)
            }
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                // Decide the piece by which exit constraint is active.
                let y = z + V3::new(offset, 0.0, 0.0);
                let sphere_gap = (y.norm() - sphere_radius).abs();
                if z.x.abs() <= sphere_gap {
                    (V3::new(1.0, 0.0, 0.0), V3::new(0.0, z.y, z.z))
                } else {
                    (y.normalize(), z)
                }
            }
        };
        let incidence = -v.normalize().dot(&n);
        if incidence < GRAZING_TOL {
            return Err(GkinError::GrazingRay { n: incidence, z: [z.x, z.y, z.z] });
        }
        Ok(Footpoint {
            point: BoundaryPoint { z: z_on, n },
            tau,
            incidence,
        })
    }

    /// Incidence factor N(z, v) = -v_hat . n(z) at a boundary point.
    pub fn grazing_factor(&self, z: &BoundaryPoint, v: &V3) -> f64 {
        -v.normalize().dot(&z.n)
    }

    /// Forward traversal time from a boundary point z along v until exit
    /// (the chord time tau(z, -v) in backward notation). For the ball this is
    /// the circle lemma 2 r N(z, v) / |v| in closed form.
    pub fn chord_time(&self, z: &BoundaryPoint, v: &V3) -> f64 {
        let speed = v.norm();
        match *self {
            ConvexDomain::Ball { radius } => 2.0 * radius * self.grazing_factor(z, v) / speed,
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                let y = z.z + V3::new(offset, 0.0, 0.0);
                let vh = v / speed;
                let b = y.dot(&vh);
                let disc = (sphere_radius * sphere_radius - y.norm_squared() + b * b).max(0.0);
                let t_sphere = (disc.sqrt() - b) / speed;
                if v.x > 0.0 {
                    t_sphere.min(-z.z.x / v.x)
                } else {
                    t_sphere
                }
            }
        }
    }

    /// grad_x tau(x, v) = n(q) / (n(q) . v): constant along the chord, with
    /// magnitude 1 / (N |v|). Errors on grazing rays.
    pub fn grad_x_tau(&self, x: &V3, v: &V3) -> Result<V3> {
        let fp = self.footpoint(x, v)?;
        Ok(fp.point.n / fp.point.n.dot(v))
    }

    /// grad_v tau(x, v) = -tau grad_x tau (exact for these domains: q stays
    /// on a fixed smooth boundary piece as v varies).
    pub fn grad_v_tau(&self, x: &V3, v: &V3) -> Result<V3> {
        let fp = self.footpoint(x, v)?;
        Ok(-fp.point.n / fp.point.n.dot(v) * fp.tau)
    }

    /// Upper bound |grad_v tau| <= tau |grad_x tau| (met with equality here).
    pub fn grad_v_tau_bound(&self, x: &V3, v: &V3) -> Result<f64> {
        let fp = self.footpoint(x, v)?;
        Ok(fp.tau / (fp.incidence * v.norm()))
    }

    /// Chord proportionality constant: for the ball, chord length = 2 r N
    /// exactly, so the constant is 2 r. A flat face admits no such bound
    /// (chords stay order-one while N -> 0), hence None.
    pub fn chord_bound(&self) -> Option<f64> {
        match *self {
            ConvexDomain::Ball { radius } => Some(2.0 * radius),
            ConvexDomain::FlatCap { .. } => None,
        }
    }

    /// Reference bisection oracle for exit_time: 60 halvings of the inside /
    /// outside indicator bracket, independent of any closed form.
    pub fn exit_time_bisection(&self, x: &V3, v: &V3) -> Result<f64> {
        if !self.contains(x) {
            return Err(GkinError::OutsideDomain { x: [x.x, x.y, x.z] });
        }
        let mut lo = 0.0;
        let mut hi = self.diameter() / v.norm() * 1.0001 + 1e-12;
        debug_assert!(!self.contains(&(x - v * hi)));
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.contains(&(x - v * mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Total boundary area.
    pub fn boundary_area(&self) -> f64 {
        match *self {
            ConvexDomain::Ball { radius } => 4.0 * std::f64::consts::PI * radius * radius,
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                let disc = std::f64::consts::PI * (sphere_radius * sphere_radius - offset * offset);
                // Spherical zone y_1 < offset has height R + offset, area 2 pi R h.
                let zone = 2.0 * std::f64::consts::PI * sphere_radius * (sphere_radius + offset);
                disc + zone
            }
        }
    }

    /// Uniform sample on the boundary.
    pub fn sample_boundary(&self, rng: &mut impl Rng) -> BoundaryPoint {
        match *self {
            ConvexDomain::Ball { radius } => {
                let n = sample_unit_sphere(rng);
                BoundaryPoint { z: n * radius, n }
            }
            ConvexDomain::FlatCap { sphere_radius, offset } => {
                let disc_area = std::f64::consts::PI * (sphere_radius * sphere_radius - offset * offset);
                let zone_area = 2.0 * std::f64::consts::PI * sphere_radius * (sphere_radius + offset);
                if rng.gen::<f64>() * (disc_area + zone_area) < disc_area {
                    let r = (sphere_radius * sphere_radius - offset * offset).sqrt()
                        * rng.gen::<f64>().sqrt();
                    let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                    BoundaryPoint {
                        z: V3::new(0.0, r * phi.cos(), r * phi.sin()),
                        n: V3::new(1.0, 0.0, 0.0),
                    }
                } else {
                    // Archimedes: the axial coordinate is uniform on the zone.
                    let y1 = -sphere_radius + rng.gen::<f64>() * (sphere_radius + offset);
                    let rho = (sphere_radius * sphere_radius - y1 * y1).max(0.0).sqrt();
                    let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                    let y = V3::new(y1, rho * phi.cos(), rho * phi.sin());
                    BoundaryPoint {
                        z: y - V3::new(offset, 0.0, 0.0),
                        n: y / sphere_radius,
                    }
                }
            }
        }
    }

    /// Uniform sample in the interior.
    pub fn sample_interior(&self, rng: &mut impl Rng) -> V3 {
        match *self {
            ConvexDomain::Ball { radius } => sample_unit_sphere(rng) * radius * rng.gen::<f64>().cbrt(),
            ConvexDomain::FlatCap { sphere_radius, offset } => loop {
                let y = sample_unit_sphere(rng) * sphere_radius * rng.gen::<f64>().cbrt();
                let x = y - V3::new(offset, 0.0, 0.0);
                if x.x < 0.0 {
                    return x;
                }
            },
        }
    }
}

/// Uniform direction on the unit sphere.
pub fn sample_unit_sphere(rng: &mut impl Rng) -> V3 {
    // Inverse-CDF in the polar cosine; avoids rejection loops so the RNG
    // stream consumption per sample is fixed (useful for reproducibility).
    let t = 2.0 * rng.gen::<f64>() - 1.0;
    let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
    let s = (1.0 - t * t).max(0.0).sqrt();
    V3::new(s * phi.cos(), s * phi.sin(), t)
}

/// Uniform incoming direction at a boundary point (half sphere v . n < 0).
pub fn sample_incoming_dir(n: &V3, rng: &mut impl Rng) -> V3 {
    let d = sample_unit_sphere(rng);
    if d.dot(n) < 0.0 {
        d
    } else {
        d - 2.0 * d.dot(n) * n
    }
}
