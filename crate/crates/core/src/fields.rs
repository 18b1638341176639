//! Analytic ground-truth flow fields.
//!
//! Two oracles are provided:
//!
//! * [`potential_flow_sphere`]: inviscid flow around a sphere of radius `a`
//!   in a free stream `v·û` with `û = (cos α, 0, sin α)`:
//!
//!   ```text
//!   u(x)  = v [ û + a³/(2r³) (û − 3 (û·r̂) r̂) ]
//!   p_v   = ½ρ (v² − |u|²)
//!   p_s   = ½ρv² (1 − 9/4 sin²θ),   cos θ = r̂·û
//!   τ_w   = k ρ v² t̂,   t̂ = tangential direction of u at r = a(1 + 10⁻³)
//!   ```
//!
//! * [`family_fields`]: a smooth closed-form family for any shape. With
//!   `s = −n·û` (1 at the windward stagnation point), `L` the characteristic
//!   length and regime constants `(a0, a1, a2, k, g)`:
//!
//!   ```text
//!   C_p  = (a0 s + a1 s² − a2 (1 − s²)) (1 + 0.1 tanh((x − c)·û / L))
//!   p_s  = ½ρv² C_p
//!   τ_w  = k ρ v² (û − (û·n) n)
//!   u    = v [ û + g λ/2 (û − 3 (û·r̂) r̂) ],   λ = min(R³/r³, 1)
//!   p_v  = ½ρ (v² − |u|²)
//!   ```
//!
//!   where `c` is the bounding-box centre, `r = |x − c|` and `R` the
//!   geometric mean of the bounding-box half extents. All pressures are
//!   relative to `p_∞` and bounded by `ρv²` in magnitude.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{ShapeParams, SurfacePointSet, VolumePointSet};
use crate::math::{self, Vec3};
use crate::postprocess::flow_directions;

/// Shear proxy coefficient for the inviscid sphere oracle.
pub const SPHERE_SHEAR_COEFFICIENT: f64 = 0.005;

pub const MAX_ALPHA_DEG: f64 = 4.0;

/// Categorical flow regime; selects field-family constants only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Analogue of the Mach 0.5 cases.
    Subsonic,
    /// Analogue of the Mach 0.85 cases.
    Transonic,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Subsonic => "subsonic",
            Regime::Transonic => "transonic",
        }
    }

    fn constants(&self) -> FamilyConstants {
        match self {
            Regime::Subsonic => FamilyConstants { a0: 0.30, a1: 0.70, a2: 0.90, k: 0.005, g: 1.0 },
            Regime::Transonic => {
                FamilyConstants { a0: 0.55, a1: 0.60, a2: 1.20, k: 0.004, g: 1.15 }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct FamilyConstants {
    a0: f64,
    a1: f64,
    a2: f64,
    k: f64,
    g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConditions {
    /// kg/m³
    pub density: f64,
    /// Free-stream speed magnitude, m/s.
    pub speed: f64,
    /// Free-stream pressure, Pa.
    pub pressure_inf: f64,
    /// Angle of attack in radians.
    pub alpha: f64,
    /// m²
    pub reference_area: f64,
    pub regime: Regime,
}

impl FlowConditions {
    pub fn new(alpha_deg: f64, reference_area: f64, regime: Regime) -> Self {
        Self {
            density: 1.2,
            speed: 50.0,
            pressure_inf: 101_325.0,
            alpha: alpha_deg.to_radians(),
            reference_area,
            regime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.speed > 0.0 && self.reference_area > 0.0) {
            return Err(invalid("density, speed and reference area must be positive"));
        }
        let max = MAX_ALPHA_DEG.to_radians() * (1.0 + 1e-12);
        if !(0.0..=max).contains(&self.alpha) {
            return Err(invalid(format!(
                "angle of attack {}° outside [0°, {MAX_ALPHA_DEG}°]",
                self.alpha.to_degrees()
            )));
        }
        Ok(())
    }

    /// ½ρv²
    pub fn dynamic_pressure(&self) -> f64 {
        0.5 * self.density * self.speed * self.speed
    }
}

/// Surface and volume fields aligned with their point sets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldSample {
    /// Pa, relative to the free-stream pressure.
    pub surface_pressure: Vec<f64>,
    pub wall_shear: Vec<Vec3>,
    pub volume_pressure: Vec<f64>,
    pub velocity: Vec<Vec3>,
}

impl FieldSample {
    pub fn is_finite(&self) -> bool {
        self.surface_pressure.iter().chain(&self.volume_pressure).all(|v| v.is_finite())
            && self.wall_shear.iter().chain(&self.velocity).flatten().all(|v| v.is_finite())
    }
}

fn sphere_velocity(x: Vec3, radius: f64, u_inf: Vec3, speed: f64, gain: f64, clamp: bool) -> Vec3 {
    let r = math::norm(x);
    let rhat = math::scale(x, 1.0 / r);
    let mut lambda = (radius / r).powi(3);
    if clamp {
        lambda = lambda.min(1.0);
    }
    let pert = math::sub(u_inf, math::scale(rhat, 3.0 * math::dot(u_inf, rhat)));
    math::scale(math::add(u_inf, math::scale(pert, 0.5 * gain * lambda)), speed)
}

fn shear_direction(u: Vec3, n: Vec3, speed: f64) -> Vec3 {
    let mut t = math::tangential(u, n);
    t = math::tangential(t, n);
    if math::norm(t) <= 1e-12 * speed {
        [0.0; 3]
    } else {
        let t = math::normalize(t);
        math::tangential(t, n)
    }
}

/// Inviscid potential flow around a sphere centred at the origin.
pub fn potential_flow_sphere(
    shape: &ShapeParams,
    surface: &SurfacePointSet,
    volume: &VolumePointSet,
    cond: &FlowConditions,
) -> Result<FieldSample> {
    let ShapeParams::Sphere { radius } = *shape else {
        return Err(invalid("potential-flow oracle requires a sphere"));
    };
    shape.validate()?;
    let dirs = flow_directions(cond.alpha);
    let u_inf = dirs.u_inf;
    let q = cond.dynamic_pressure();
    let rho_v2 = cond.density * cond.speed * cond.speed;

    let mut out = FieldSample::default();
    for (p, n) in surface.positions.iter().zip(&surface.normals) {
        let c = math::dot(math::normalize(*p), u_inf);
        let sin2 = (1.0 - c * c).max(0.0);
        out.surface_pressure.push(q * (1.0 - 2.25 * sin2));
        let lifted = math::scale(math::normalize(*p), radius * (1.0 + 1e-3));
        let u = sphere_velocity(lifted, radius, u_inf, cond.speed, 1.0, false);
        let t = shear_direction(u, *n, cond.speed);
        out.wall_shear.push(math::scale(t, SPHERE_SHEAR_COEFFICIENT * rho_v2));
    }
    for p in &volume.positions {
        let u = sphere_velocity(*p, radius, u_inf, cond.speed, 1.0, false);
        out.volume_pressure.push(0.5 * cond.density * (cond.speed.powi(2) - math::dot(u, u)));
        out.velocity.push(u);
    }
    Ok(out)
}

/// Characteristic length used by the field family.
fn characteristic_length(shape: &ShapeParams) -> f64 {
    match shape {
        ShapeParams::Sphere { radius } => *radius,
        ShapeParams::Ellipsoid { semi_axes } => semi_axes.iter().cloned().fold(0.0, f64::max),
        ShapeParams::Wing(w) => w.chord,
    }
}

/// Smooth parametric field family valid for every shape kind.
pub fn family_fields(
    shape: &ShapeParams,
    cond: &FlowConditions,
    surface: &SurfacePointSet,
    volume: &VolumePointSet,
) -> Result<FieldSample> {
    shape.validate()?;
    let k = cond.regime.constants();
    let u_inf = flow_directions(cond.alpha).u_inf;
    let q = cond.dynamic_pressure();
    let rho_v2 = cond.density * cond.speed * cond.speed;
    let bbox = shape.bounding_box();
    let center = math::scale(math::add(bbox.min, bbox.max), 0.5);
    let half = math::scale(bbox.extent(), 0.5);
    let r_eq = (half[0] * half[1] * half[2]).cbrt();
    let length = characteristic_length(shape);

    let mut out = FieldSample::default();
    for (p, n) in surface.positions.iter().zip(&surface.normals) {
        let s = -math::dot(*n, u_inf);
        let base = k.a0 * s + k.a1 * s * s - k.a2 * (1.0 - s * s);
        let along = math::dot(math::sub(*p, center), u_inf) / length;
        out.surface_pressure.push(q * base * (1.0 + 0.1 * along.tanh()));
        let t = math::tangential(math::tangential(u_inf, *n), *n);
        out.wall_shear.push(math::scale(t, k.k * rho_v2));
    }
    for p in &volume.positions {
        let rel = math::sub(*p, center);
        let u = sphere_velocity(rel, r_eq, u_inf, cond.speed, k.g, true);
        out.volume_pressure.push(0.5 * cond.density * (cond.speed.powi(2) - math::dot(u, u)));
        out.velocity.push(u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_surface, make_volume_points, Aabb, Tessellation, VolumeSampling};

    fn cond(alpha_deg: f64) -> FlowConditions {
        FlowConditions::new(alpha_deg, std::f64::consts::PI, Regime::Subsonic)
    }

    fn single_point(p: Vec3) -> SurfacePointSet {
        SurfacePointSet {
            positions: vec![p],
            normals: vec![math::normalize(p)],
            areas: vec![1.0],
        }
    }

    #[test]
    fn stagnation_and_equator_pressure_coefficients() {
        let c = cond(0.0);
        let sphere = ShapeParams::Sphere { radius: 1.0 };
        let empty = VolumePointSet::default();
        let f = potential_flow_sphere(&sphere, &single_point([-1.0, 0.0, 0.0]), &empty, &c).unwrap();
        assert!((f.surface_pressure[0] / c.dynamic_pressure() - 1.0).abs() < 1e-15);
        let f = potential_flow_sphere(&sphere, &single_point([0.0, 0.0, 1.0]), &empty, &c).unwrap();
        assert!((f.surface_pressure[0] / c.dynamic_pressure() + 1.25).abs() < 1e-12);
    }

    #[test]
    fn far_field_recovers_free_stream() {
        let c = cond(3.0);
        let sphere = ShapeParams::Sphere { radius: 1.0 };
        let dir = math::normalize([0.3, -0.7, 0.2]);
        let vol = VolumePointSet { positions: vec![math::scale(dir, 100.0)] };
        let f = potential_flow_sphere(&sphere, &SurfacePointSet::default(), &vol, &c).unwrap();
        let expected = math::scale(flow_directions(c.alpha).u_inf, c.speed);
        assert!(math::norm(math::sub(f.velocity[0], expected)) <= 1e-4 * c.speed);
    }

    #[test]
    fn non_sphere_is_rejected() {
        let e = ShapeParams::Ellipsoid { semi_axes: [1.0, 0.5, 0.5] };
        let r = potential_flow_sphere(&e, &SurfacePointSet::default(), &VolumePointSet::default(), &cond(0.0));
        assert!(matches!(r, Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn shear_is_tangential() {
        let sphere = ShapeParams::Sphere { radius: 1.0 };
        let s = make_surface(&sphere, 2048, Tessellation::Anisotropic, 0).unwrap();
        let f = potential_flow_sphere(&sphere, &s, &VolumePointSet::default(), &cond(2.5)).unwrap();
        for (t, n) in f.wall_shear.iter().zip(&s.normals) {
            assert!(math::dot(*t, *n).abs() <= 1e-9 * math::norm(*t) + 1e-300);
        }
        let e = ShapeParams::Ellipsoid { semi_axes: [1.3, 0.7, 0.9] };
        let s = make_surface(&e, 2048, Tessellation::Isotropic, 0).unwrap();
        let f = family_fields(&e, &cond(2.5), &s, &VolumePointSet::default()).unwrap();
        for (t, n) in f.wall_shear.iter().zip(&s.normals) {
            assert!(math::dot(*t, *n).abs() <= 1e-9 * math::norm(*t) + 1e-300);
        }
    }

    #[test]
    fn rotated_free_stream_equals_rotated_solution() {
        let sphere = ShapeParams::Sphere { radius: 1.0 };
        let alpha_deg: f64 = 3.7;
        let alpha = alpha_deg.to_radians();
        let pts: Vec<Vec3> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.37;
                math::scale(math::normalize([t.cos(), (1.3 * t).sin(), (0.7 * t).cos()]), 1.5 + 0.1 * i as f64)
            })
            .collect();
        let surf: Vec<Vec3> = pts.iter().map(|p| math::normalize(*p)).collect();
        let surface0 = SurfacePointSet {
            positions: surf.clone(),
            normals: surf.clone(),
            areas: vec![1.0; surf.len()],
        };
        let rotated: Vec<Vec3> = surf.iter().map(|p| math::rotate_y(*p, alpha)).collect();
        let surface_a = SurfacePointSet {
            positions: rotated.clone(),
            normals: rotated,
            areas: vec![1.0; surf.len()],
        };
        let vol0 = VolumePointSet { positions: pts.clone() };
        let vol_a = VolumePointSet { positions: pts.iter().map(|p| math::rotate_y(*p, alpha)).collect() };

        let f0 = potential_flow_sphere(&sphere, &surface0, &vol0, &cond(0.0)).unwrap();
        let fa = potential_flow_sphere(&sphere, &surface_a, &vol_a, &cond(alpha_deg)).unwrap();
        for i in 0..pts.len() {
            assert!((f0.surface_pressure[i] - fa.surface_pressure[i]).abs() <= 1e-9 * 1500.0);
            assert!((f0.volume_pressure[i] - fa.volume_pressure[i]).abs() <= 1e-9 * 1500.0);
            let ru = math::rotate_y(f0.velocity[i], alpha);
            assert!(math::norm(math::sub(ru, fa.velocity[i])) <= 1e-9 * 50.0);
            let rt = math::rotate_y(f0.wall_shear[i], alpha);
            assert!(math::norm(math::sub(rt, fa.wall_shear[i])) <= 1e-9 * 15.0);
        }
    }

    #[test]
    fn family_is_deterministic_bounded_and_alpha_sensitive() {
        let shapes = [
            ShapeParams::Sphere { radius: 0.8 },
            ShapeParams::Ellipsoid { semi_axes: [1.4, 0.5, 0.7] },
            ShapeParams::Wing(crate::geometry::WingParams::new(6.0, 20.0, 2.0)),
        ];
        for shape in shapes {
            let s = make_surface(&shape, 1024, Tessellation::Isotropic, 1).unwrap();
            let bb = shape.bounding_box();
            let bbox = Aabb::new(math::sub(bb.min, [1.0; 3]), math::add(bb.max, [1.0; 3]));
            let v = make_volume_points(&shape, &bbox, 512, VolumeSampling::Random, 1).unwrap();
            for regime in [Regime::Subsonic, Regime::Transonic] {
                let c0 = FlowConditions::new(0.0, 1.0, regime);
                let a = family_fields(&shape, &c0, &s, &v).unwrap();
                let b = family_fields(&shape, &c0, &s, &v).unwrap();
                assert_eq!(a, b);
                let rho_v2 = c0.density * c0.speed * c0.speed;
                assert!(a.surface_pressure.iter().all(|p| p.abs() <= rho_v2));
                assert!(a.volume_pressure.iter().all(|p| p.abs() <= rho_v2));
                assert!(a.is_finite());

                let c4 = FlowConditions::new(4.0, 1.0, regime);
                let d = family_fields(&shape, &c4, &s, &v).unwrap();
                let diff: f64 = a
                    .surface_pressure
                    .iter()
                    .zip(&d.surface_pressure)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(diff > 0.0);
            }
        }
    }

    #[test]
    fn conditions_validate_alpha_range() {
        assert!(cond(4.0).validate().is_ok());
        assert!(cond(4.5).validate().is_err());
        assert!(cond(-0.1).validate().is_err());
    }
}
