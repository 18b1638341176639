//! Aerodynamic forces, error metrics, pressure slices and case ranking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::fields::FlowConditions;
use crate::geometry::SurfacePointSet;
use crate::math::{self, Vec3};

/// Free-stream, drag and lift unit vectors for an angle of attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowDirections {
    pub u_inf: Vec3,
    pub drag: Vec3,
    pub lift: Vec3,
}

/// `u∞ = (cos α, 0, sin α)`, `e_drag = u∞/|u∞|`, `e_lift = e_drag × ŷ`.
pub fn flow_directions(alpha: f64) -> FlowDirections {
    let u_inf = [alpha.cos(), 0.0, alpha.sin()];
    let drag = math::scale(u_inf, 1.0 / math::norm(u_inf));
    let lift = math::cross(drag, [0.0, 1.0, 0.0]);
    FlowDirections { u_inf, drag, lift }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceReport {
    /// Total force, N.
    pub force: Vec3,
    pub drag: f64,
    pub lift: f64,
    pub drag_coefficient: f64,
    pub lift_coefficient: f64,
}

/// How surface pressure values are referenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureConvention {
    /// Values are already `p_s − p_∞`.
    #[default]
    Relative,
    /// Values are absolute; `p_∞` is subtracted.
    Absolute,
}

/// `F = Σ_i (−(p_i − p_∞) n_i + τ_i) A_i` projected on the flow directions.
pub fn integrate_forces(
    surface: &SurfacePointSet,
    pressure: &[f64],
    shear: &[Vec3],
    cond: &FlowConditions,
    convention: PressureConvention,
) -> Result<ForceReport> {
    let n = surface.count();
    if pressure.len() != n || shear.len() != n || surface.normals.len() != n || surface.areas.len() != n {
        return Err(shape(format!(
            "force integration needs {n} aligned values, got p={} τ={}",
            pressure.len(),
            shear.len()
        )));
    }
    let offset = match convention {
        PressureConvention::Relative => 0.0,
        PressureConvention::Absolute => cond.pressure_inf,
    };
    let mut force = [0.0; 3];
    for i in 0..n {
        let traction = math::add(math::scale(surface.normals[i], -(pressure[i] - offset)), shear[i]);
        force = math::add(force, math::scale(traction, surface.areas[i]));
    }
    let dirs = flow_directions(cond.alpha);
    let drag = math::dot(force, dirs.drag);
    let lift = math::dot(force, dirs.lift);
    let denom = cond.dynamic_pressure() * cond.reference_area;
    Ok(ForceReport {
        force,
        drag,
        lift,
        drag_coefficient: drag / denom,
        lift_coefficient: lift / denom,
    })
}

/// `(Σ|y − ŷ| / Σ|y|, ‖y − ŷ‖₂ / ‖y‖₂)`.
pub fn relative_errors(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() {
        return Err(shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    let (mut e1, mut t1, mut e2, mut t2) = (0.0, 0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let d = t - p;
        e1 += d.abs();
        t1 += t.abs();
        e2 += d * d;
        t2 += t * t;
    }
    if t1 == 0.0 || t2 == 0.0 {
        return Err(Error::UndefinedRatio("target has zero norm".into()));
    }
    Ok((e1 / t1, (e2 / t2).sqrt()))
}

pub fn mean_absolute_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(invalid("mean absolute error of an empty field"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Coefficient of determination `1 − Σ(y−ŷ)² / Σ(y−ȳ)²`.
pub fn r2_score(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if target.len() < 2 {
        return Err(invalid("R² needs at least two points"));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedRatio("target variance is zero".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn flatten3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldErrors {
    pub mae: f64,
    pub rel_l1: f64,
    pub rel_l2: f64,
    /// Number of evaluated points.
    pub points: usize,
}

impl FieldErrors {
    pub fn compute(pred: &[f64], target: &[f64], points: usize) -> Result<Self> {
        let (rel_l1, rel_l2) = relative_errors(pred, target)?;
        Ok(Self { mae: mean_absolute_error(pred, target)?, rel_l1, rel_l2, points })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Keyed by field name (`surface_pressure`, `wall_shear`, ...).
    pub fields: BTreeMap<String, FieldErrors>,
    pub r2_drag: Option<f64>,
    pub r2_lift: Option<f64>,
}

/// Points of one chordwise slice, split by the sign of the normal's z.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PressureProfile {
    /// Absolute span position of the slice.
    pub y: f64,
    /// (chord-normalised x, pressure), sorted by x.
    pub upper: Vec<(f64, f64)>,
    pub lower: Vec<(f64, f64)>,
}

/// Chordwise pressure slice at `span_fraction` of the surface's y-extent.
pub fn pressure_profile(
    surface: &SurfacePointSet,
    pressure: &[f64],
    span_fraction: f64,
    band: f64,
) -> Result<PressureProfile> {
    if pressure.len() != surface.count() {
        return Err(shape("pressure not aligned with surface"));
    }
    if !(0.0..=1.0).contains(&span_fraction) {
        return Err(invalid(format!("span fraction {span_fraction} outside [0, 1]")));
    }
    if !(band > 0.0) {
        return Err(invalid("slice band must be positive"));
    }
    let (ymin, ymax) = surface
        .positions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let y = ymin + span_fraction * (ymax - ymin);
    let picked: Vec<usize> =
        (0..surface.count()).filter(|&i| (surface.positions[i][1] - y).abs() <= band).collect();
    if picked.is_empty() {
        return Err(Error::EmptySlice(format!("no points within {band} of y = {y}")));
    }
    let (xmin, xmax) = picked.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        let x = surface.positions[i][0];
        (lo.min(x), hi.max(x))
    });
    let chord = if xmax > xmin { xmax - xmin } else { 1.0 };
    let mut out = PressureProfile { y, ..Default::default() };
    for i in picked {
        let x = (surface.positions[i][0] - xmin) / chord;
        if surface.normals[i][2] >= 0.0 {
            out.upper.push((x, pressure[i]));
        } else {
            out.lower.push((x, pressure[i]));
        }
    }
    out.upper.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.lower.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRanking {
    pub best: u64,
    pub median: u64,
    pub worst: u64,
}

/// Orders cases by error (ties by id) and picks best, median
/// (index ⌊(k−1)/2⌋) and worst.
pub fn rank_cases(errors: &[(u64, f64)]) -> Result<CaseRanking> {
    if errors.is_empty() {
        return Err(invalid("cannot rank an empty case list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(CaseRanking {
        best: sorted[0].0,
        median: sorted[(sorted.len() - 1) / 2].0,
        worst: sorted[sorted.len() - 1].0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{potential_flow_sphere, Regime};
    use crate::geometry::{make_surface, ShapeParams, Tessellation, VolumePointSet, WingParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cond(alpha_deg: f64) -> FlowConditions {
        FlowConditions::new(alpha_deg, std::f64::consts::PI, Regime::Subsonic)
    }

    #[test]
    fn zero_alpha_directions() {
        let d = flow_directions(0.0);
        assert_eq!(d.drag, [1.0, 0.0, 0.0]);
        assert_eq!(d.lift, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn four_degree_lift_direction() {
        let a = 4f64.to_radians();
        let d = flow_directions(a);
        let expected = [-a.sin(), 0.0, a.cos()];
        for k in 0..3 {
            assert!((d.lift[k] - expected[k]).abs() < 1e-15);
        }
        assert!(math::dot(d.drag, d.lift).abs() < 1e-15);
    }

    #[test]
    fn constant_pressure_on_closed_surface() {
        let s = make_surface(&ShapeParams::Sphere { radius: 1.0 }, 4096, Tessellation::Anisotropic, 0)
            .unwrap();
        let c = 250.0;
        let f = integrate_forces(&s, &vec![c; s.count()], &vec![[0.0; 3]; s.count()], &cond(2.0), PressureConvention::Relative)
            .unwrap();
        assert!(math::norm(f.force) <= 1e-2 * c * s.total_area());
    }

    #[test]
    fn sphere_potential_flow_has_no_drag() {
        let shape = ShapeParams::Sphere { radius: 1.0 };
        for alpha in [0.0, 3.0] {
            let c = cond(alpha);
            let s = make_surface(&shape, 16384, Tessellation::Isotropic, 1).unwrap();
            let f = potential_flow_sphere(&shape, &s, &VolumePointSet::default(), &c).unwrap();
            let r = integrate_forces(&s, &f.surface_pressure, &vec![[0.0; 3]; s.count()], &c, PressureConvention::Relative)
                .unwrap();
            let scale = c.dynamic_pressure() * std::f64::consts::PI;
            assert!(r.drag.abs() <= 0.01 * scale, "drag {} at alpha {alpha}", r.drag);
            assert!(r.lift.abs() <= 0.01 * scale, "lift {} at alpha {alpha}", r.lift);
        }
    }

    #[test]
    fn constant_shear_integrates_to_area() {
        let s = make_surface(&ShapeParams::Wing(WingParams::new(6.0, 10.0, 1.0)), 1024, Tessellation::Isotropic, 0)
            .unwrap();
        let t = [1.5, -0.25, 0.5];
        let f = integrate_forces(&s, &vec![0.0; s.count()], &vec![t; s.count()], &cond(0.0), PressureConvention::Relative)
            .unwrap();
        let area = s.total_area();
        for k in 0..3 {
            assert!((f.force[k] - t[k] * area).abs() <= 1e-12 * area);
        }
    }

    #[test]
    fn absolute_convention_subtracts_free_stream() {
        let s = make_surface(&ShapeParams::Sphere { radius: 1.0 }, 512, Tessellation::Isotropic, 0).unwrap();
        let c = cond(1.0);
        let rel: Vec<f64> = s.positions.iter().map(|p| 100.0 * p[0]).collect();
        let abs: Vec<f64> = rel.iter().map(|p| p + c.pressure_inf).collect();
        let tau = vec![[0.0; 3]; s.count()];
        let a = integrate_forces(&s, &rel, &tau, &c, PressureConvention::Relative).unwrap();
        let b = integrate_forces(&s, &abs, &tau, &c, PressureConvention::Absolute).unwrap();
        assert!((a.drag - b.drag).abs() < 1e-6 * a.drag.abs());
    }

    #[test]
    fn force_is_linear_in_fields() {
        let s = make_surface(&ShapeParams::Ellipsoid { semi_axes: [1.2, 0.6, 0.8] }, 1024, Tessellation::Anisotropic, 1)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = s.count();
        let mut field = || -> (Vec<f64>, Vec<Vec3>) {
            (
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
            )
        };
        let (p1, t1) = field();
        let (p2, t2) = field();
        let (a, b) = (0.7, -1.9);
        let p: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| a * x + b * y).collect();
        let t: Vec<Vec3> = t1.iter().zip(&t2).map(|(x, y)| math::add(math::scale(*x, a), math::scale(*y, b))).collect();
        let c = cond(3.0);
        let f1 = integrate_forces(&s, &p1, &t1, &c, PressureConvention::Relative).unwrap();
        let f2 = integrate_forces(&s, &p2, &t2, &c, PressureConvention::Relative).unwrap();
        let f = integrate_forces(&s, &p, &t, &c, PressureConvention::Relative).unwrap();
        let expect = math::add(math::scale(f1.force, a), math::scale(f2.force, b));
        let scale = math::norm(math::scale(f1.force, a)) + math::norm(math::scale(f2.force, b));
        assert!(math::norm(math::sub(f.force, expect)) <= 1e-12 * scale);
    }

    #[test]
    fn coefficients_consistent_with_forces() {
        let sphere = ShapeParams::Sphere { radius: 1.0 };
        let s = make_surface(&sphere, 2048, Tessellation::Isotropic, 0).unwrap();
        let c = cond(4.0);
        let f = potential_flow_sphere(&sphere, &s, &VolumePointSet::default(), &c).unwrap();
        let r = integrate_forces(&s, &f.surface_pressure, &f.wall_shear, &c, PressureConvention::Relative).unwrap();
        let q = c.dynamic_pressure() * c.reference_area;
        assert!((r.drag_coefficient * q - r.drag).abs() <= 1e-15 * r.drag.abs().max(1.0));
        assert!((r.lift_coefficient * q - r.lift).abs() <= 1e-15 * r.lift.abs().max(1.0));
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let s = make_surface(&ShapeParams::Sphere { radius: 1.0 }, 64, Tessellation::Isotropic, 0).unwrap();
        let r = integrate_forces(&s, &[0.0; 3], &[[0.0; 3]; 64], &cond(0.0), PressureConvention::Relative);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn relative_error_identities() {
        let y = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(relative_errors(&y, &y).unwrap(), (0.0, 0.0));
        assert_eq!(relative_errors(&[0.0; 4], &y).unwrap(), (1.0, 1.0));
        assert!(matches!(relative_errors(&[1.0], &[0.0]), Err(Error::UndefinedRatio(_))));
        let pred = [1.1, -1.8, 3.0, 0.5];
        let (l1, l2) = relative_errors(&pred, &y).unwrap();
        let k = 7.25;
        let sp: Vec<f64> = pred.iter().map(|v| v * k).collect();
        let sy: Vec<f64> = y.iter().map(|v| v * k).collect();
        let (m1, m2) = relative_errors(&sp, &sy).unwrap();
        assert!((l1 - m1).abs() < 1e-12 && (l2 - m2).abs() < 1e-12);
    }

    #[test]
    fn r2_identities() {
        let y = [3.0, 1.0, 4.0, 1.5, 9.0];
        assert_eq!(r2_score(&y, &y).unwrap(), 1.0);
        let mean = y.iter().sum::<f64>() / 5.0;
        assert!(r2_score(&[mean; 5], &y).unwrap().abs() < 1e-12);
        let delta = 0.3;
        let shifted: Vec<f64> = y.iter().map(|v| v + delta).collect();
        let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let expected = 1.0 - 5.0 * delta * delta / ss;
        assert!((r2_score(&shifted, &y).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(r2_score(&[1.0, 2.0], &[2.0, 2.0]), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn ranking_rules() {
        let one = rank_cases(&[(7, 0.5)]).unwrap();
        assert_eq!((one.best, one.median, one.worst), (7, 7, 7));
        let r = rank_cases(&[(10, 3.0), (11, 1.0), (12, 2.0)]).unwrap();
        assert_eq!((r.best, r.median, r.worst), (11, 12, 10));
        let ties = rank_cases(&[(5, 1.0), (2, 1.0), (9, 1.0), (1, 1.0)]).unwrap();
        assert_eq!((ties.best, ties.median, ties.worst), (1, 2, 9));
        assert!(rank_cases(&[]).is_err());
    }

    fn desk_wing() -> (ShapeParams, SurfacePointSet) {
        let w = ShapeParams::Wing(WingParams::new(6.0, 20.0, 0.0));
        let s = make_surface(&w, 8192, Tessellation::Isotropic, 4).unwrap();
        (w, s)
    }

    #[test]
    fn full_band_returns_every_point() {
        let (_, s) = desk_wing();
        let p: Vec<f64> = s.positions.iter().map(|x| x[0]).collect();
        let prof = pressure_profile(&s, &p, 0.5, 1e3).unwrap();
        assert_eq!(prof.upper.len() + prof.lower.len(), s.count());
        assert!(prof.upper.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn profile_slices_exist_at_reference_stations() {
        let (_, s) = desk_wing();
        let p = vec![0.0; s.count()];
        for frac in [0.15, 0.50, 0.95] {
            let prof = pressure_profile(&s, &p, frac, 0.05).unwrap();
            assert!(!prof.upper.is_empty() && !prof.lower.is_empty(), "slice at {frac}");
        }
        assert!(matches!(pressure_profile(&s, &p, 0.5, 1e-9), Err(Error::EmptySlice(_))));
    }

    #[test]
    fn symmetric_field_gives_symmetric_profiles() {
        // Untwisted symmetric section: upper and lower surfaces mirror in z, so
        // a field depending on chordwise position only must give matching curves.
        let (_, s) = desk_wing();
        let field = |x: f64| (1.0 - 2.0 * x).powi(2);
        let ymid = {
            let (lo, hi) = s.positions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
            0.5 * (lo + hi)
        };
        let in_band: Vec<usize> = (0..s.count()).filter(|&i| (s.positions[i][1] - ymid).abs() <= 0.05).collect();
        let (xmin, xmax) = in_band.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| (a.min(s.positions[i][0]), b.max(s.positions[i][0])));
        let p: Vec<f64> = s.positions.iter().map(|q| field((q[0] - xmin) / (xmax - xmin))).collect();
        let prof = pressure_profile(&s, &p, 0.5, 0.05).unwrap();
        // Compare binned means of both curves.
        let bins = 10;
        let binned = |pts: &[(f64, f64)]| -> Vec<f64> {
            (0..bins)
                .map(|b| {
                    let lo = b as f64 / bins as f64;
                    let hi = lo + 1.0 / bins as f64;
                    let v: Vec<f64> = pts.iter().filter(|(x, _)| *x >= lo && *x < hi).map(|(_, p)| *p).collect();
                    v.iter().sum::<f64>() / v.len().max(1) as f64
                })
                .collect()
        };
        let (u, l) = (binned(&prof.upper), binned(&prof.lower));
        for b in 0..bins {
            assert!((u[b] - l[b]).abs() < 0.1, "bin {b}: {} vs {}", u[b], l[b]);
        }
    }
}
