//! Parametric closed bodies and the point sets sampled from them.
//!
//! Surfaces are sampled in two flavours over the *same* analytic geometry:
//!
//! * isotropic: a jittered Fibonacci lattice (spheres, ellipsoids) or a
//!   jittered 2D golden-ratio lattice warped to equal-area density (wing),
//!   giving near-uniform per-point area;
//! * anisotropic: the same lattices warped through a density that
//!   concentrates points inside a declared feature band, mimicking a
//!   solution-adapted CFD mesh.
//!
//! Per-point area is always `local area element / (n * sampling pdf)`, so the
//! areas are a quadrature rule for the surface integral regardless of the
//! point distribution.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{self, Vec3};

const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;

/// Jitter magnitude as a fraction of the local lattice spacing.
const JITTER_STRENGTH: f64 = 0.5;

/// Half-width of the equatorial feature band on spheres and ellipsoids,
/// measured in the polar angle of the sphere parameterization.
pub const SPHERE_BAND_HALF_WIDTH: f64 = PI / 8.0;

/// Anisotropic z-density on the sphere parameterization: `1 + β (1 - z²)^m`.
const SPHERE_ANISO_WEIGHT: f64 = 8.0;
const SPHERE_ANISO_POWER: i32 = 8;

/// Anisotropic chordwise weight on the wing (leading edge + upper-surface
/// shock band).
const WING_ANISO_WEIGHT: f64 = 14.0;

pub const WING_SWEEP_RANGE_DEG: (f64, f64) = (0.0, 35.0);
pub const WING_TWIST_RANGE_DEG: (f64, f64) = (-4.0, 4.0);
pub const WING_ASPECT_RATIO_RANGE: (f64, f64) = (2.0, 12.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tessellation {
    Isotropic,
    Anisotropic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeSampling {
    RegularGrid,
    Random,
}

/// Reduced swept/twisted half-wing: a symmetric 4-digit section lofted along
/// the span with linear washout, closed by planar root and tip caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WingParams {
    pub aspect_ratio: f64,
    pub sweep_deg: f64,
    /// Twist at the root; decreases linearly to zero at the tip.
    pub twist_deg: f64,
    #[serde(default = "default_chord")]
    pub chord: f64,
    /// Maximum thickness as a fraction of chord.
    #[serde(default = "default_thickness")]
    pub thickness: f64,
}

fn default_chord() -> f64 {
    1.0
}

fn default_thickness() -> f64 {
    0.12
}

impl WingParams {
    pub fn new(aspect_ratio: f64, sweep_deg: f64, twist_deg: f64) -> Self {
        Self {
            aspect_ratio,
            sweep_deg,
            twist_deg,
            chord: default_chord(),
            thickness: default_thickness(),
        }
    }

    /// Semi-span of the half wing (`AR = (2b)^2 / (2 b c)`).
    pub fn semi_span(&self) -> f64 {
        0.5 * self.aspect_ratio * self.chord
    }

    /// Half thickness of the section in metres at chord fraction `xi`.
    fn half_thickness(&self, xi: f64) -> f64 {
        let xi = xi.clamp(0.0, 1.0);
        5.0 * self.thickness
            * self.chord
            * (0.2969 * xi.sqrt() - 0.1260 * xi - 0.3516 * xi * xi + 0.2843 * xi.powi(3)
                - 0.1036 * xi.powi(4))
    }

    fn twist_at(&self, eta: f64) -> f64 {
        self.twist_deg.to_radians() * (1.0 - eta)
    }

    fn leading_edge_x(&self, y: f64) -> f64 {
        y * self.sweep_deg.to_radians().tan()
    }

    /// Maps section-local coordinates (chord fraction, local z) at span
    /// fraction `eta` to the body frame.
    fn section_to_body(&self, xi: f64, z_local: f64, eta: f64) -> Vec3 {
        let y = eta * self.semi_span();
        let tau = self.twist_at(eta);
        let (s, c) = tau.sin_cos();
        let xc = xi * self.chord - 0.25 * self.chord;
        let xr = xc * c + z_local * s;
        let zr = -xc * s + z_local * c;
        [self.leading_edge_x(y) + 0.25 * self.chord + xr, y, zr]
    }

    /// Inverse of [`Self::section_to_body`]: returns (chord fraction, local z, eta).
    fn body_to_section(&self, p: Vec3) -> (f64, f64, f64) {
        let eta = p[1] / self.semi_span();
        let tau = self.twist_at(eta.clamp(0.0, 1.0));
        let (s, c) = tau.sin_cos();
        let xr = p[0] - self.leading_edge_x(p[1]) - 0.25 * self.chord;
        let zr = p[2];
        let xc = xr * c - zr * s;
        let z_local = xr * s + zr * c;
        ((xc + 0.25 * self.chord) / self.chord, z_local, eta)
    }

    /// Side-surface parameterization. `u` in [0, 1) runs from the trailing
    /// edge over the upper surface to the leading edge and back along the
    /// lower surface; `eta` in [0, 1] runs root to tip.
    fn side_point(&self, u: f64, eta: f64) -> Vec3 {
        let (xi, upper) = side_chord_fraction(u);
        let zt = self.half_thickness(xi);
        self.section_to_body(xi, if upper { zt } else { -zt }, eta)
    }

    fn side_tangents(&self, u: f64, eta: f64) -> (Vec3, Vec3) {
        let h = 1e-6;
        let du = math::scale(
            math::sub(self.side_point(u + h, eta), self.side_point(u - h, eta)),
            0.5 / h,
        );
        let de = math::scale(
            math::sub(self.side_point(u, eta + h), self.side_point(u, eta - h)),
            0.5 / h,
        );
        (du, de)
    }

    fn cap_area(&self) -> f64 {
        // Twist rotates the section within its own plane, so both caps have
        // the section area.
        let cells = 20_000;
        let mut acc = 0.0;
        for i in 0..cells {
            let xi = (i as f64 + 0.5) / cells as f64;
            acc += 2.0 * self.half_thickness(xi);
        }
        acc * self.chord / cells as f64
    }

    fn side_area(&self) -> f64 {
        let (nu, ne) = (4000, 64);
        let mut acc = 0.0;
        for j in 0..ne {
            let eta = (j as f64 + 0.5) / ne as f64;
            for i in 0..nu {
                let u = (i as f64 + 0.5) / nu as f64;
                let (a, b) = self.side_tangents(u, eta);
                acc += math::norm(math::cross(a, b));
            }
        }
        acc / (nu * ne) as f64
    }
}

/// Chord fraction and upper/lower flag for the side parameter `u`.
fn side_chord_fraction(u: f64) -> (f64, bool) {
    let u = u.rem_euclid(1.0);
    let xi = 0.5 * (1.0 + (2.0 * PI * u).cos());
    (xi, u < 0.5)
}

/// Shape family of the bodies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeParams {
    Sphere { radius: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
    Wing(WingParams),
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new([-half; 3], [half; 3])
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(self.max, self.min)
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// True when `inner` lies in the open interior of `self`.
    pub fn strictly_contains(&self, inner: &Aabb) -> bool {
        (0..3).all(|k| inner.min[k] > self.min[k] && inner.max[k] < self.max[k])
    }

    /// Maps `p` into the unit cube spanned by the box.
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let e = self.extent();
        [
            (p[0] - self.min[0]) / e[0],
            (p[1] - self.min[1]) / e[1],
            (p[2] - self.min[2]) / e[2],
        ]
    }
}

impl ShapeParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{what} must be positive, got {v}")))
            }
        };
        match self {
            ShapeParams::Sphere { radius } => positive(*radius, "radius"),
            ShapeParams::Ellipsoid { semi_axes } => {
                for a in semi_axes {
                    positive(*a, "semi-axis")?;
                }
                Ok(())
            }
            ShapeParams::Wing(w) => {
                positive(w.chord, "chord")?;
                positive(w.thickness, "thickness")?;
                positive(w.aspect_ratio, "aspect ratio")?;
                let within = |v: f64, (lo, hi): (f64, f64), what: &str| {
                    if (lo..=hi).contains(&v) {
                        Ok(())
                    } else {
                        Err(invalid(format!("{what} {v} outside [{lo}, {hi}]")))
                    }
                };
                within(w.aspect_ratio, WING_ASPECT_RATIO_RANGE, "aspect ratio")?;
                within(w.sweep_deg, WING_SWEEP_RANGE_DEG, "sweep")?;
                within(w.twist_deg, WING_TWIST_RANGE_DEG, "twist")
            }
        }
    }

    /// Surface area: closed form for the sphere, dense quadrature otherwise.
    pub fn surface_area(&self) -> f64 {
        match self {
            ShapeParams::Sphere { radius } => 4.0 * PI * radius * radius,
            ShapeParams::Ellipsoid { semi_axes } => {
                let (nz, nphi) = (1024, 1024);
                let mut acc = 0.0;
                for i in 0..nz {
                    let z = -1.0 + (2.0 * i as f64 + 1.0) / nz as f64;
                    let r = (1.0 - z * z).sqrt();
                    for j in 0..nphi {
                        let phi = 2.0 * PI * (j as f64 + 0.5) / nphi as f64;
                        let s = [r * phi.cos(), r * phi.sin(), z];
                        acc += ellipsoid_area_element(semi_axes, s);
                    }
                }
                acc * 4.0 * PI / (nz * nphi) as f64
            }
            ShapeParams::Wing(w) => w.side_area() + 2.0 * w.cap_area(),
        }
    }

    /// Strict interior test.
    pub fn contains(&self, p: Vec3) -> bool {
        match self {
            ShapeParams::Sphere { radius } => math::norm(p) < *radius,
            ShapeParams::Ellipsoid { semi_axes: [a, b, c] } => {
                (p[0] / a).powi(2) + (p[1] / b).powi(2) + (p[2] / c).powi(2) < 1.0
            }
            ShapeParams::Wing(w) => {
                if p[1] <= 0.0 || p[1] >= w.semi_span() {
                    return false;
                }
                let (xi, z, _) = w.body_to_section(p);
                xi > 0.0 && xi < 1.0 && z.abs() < w.half_thickness(xi)
            }
        }
    }

    /// Signed residual of the analytic implicit surface (zero on the surface).
    /// Only defined for the quadric shapes.
    pub fn implicit_residual(&self, p: Vec3) -> Option<f64> {
        match self {
            ShapeParams::Sphere { radius } => Some(math::norm(p) - radius),
            ShapeParams::Ellipsoid { semi_axes: [a, b, c] } => {
                Some((p[0] / a).powi(2) + (p[1] / b).powi(2) + (p[2] / c).powi(2) - 1.0)
            }
            ShapeParams::Wing(_) => None,
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match self {
            ShapeParams::Sphere { radius } => Aabb::cube(*radius),
            ShapeParams::Ellipsoid { semi_axes } => {
                Aabb::new(math::scale(*semi_axes, -1.0), *semi_axes)
            }
            ShapeParams::Wing(w) => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for j in 0..=64 {
                    let eta = j as f64 / 64.0;
                    for i in 0..512 {
                        let p = w.side_point(i as f64 / 512.0, eta);
                        for k in 0..3 {
                            lo[k] = lo[k].min(p[k]);
                            hi[k] = hi[k].max(p[k]);
                        }
                    }
                }
                let pad = 1e-3 * w.chord;
                Aabb::new(
                    [lo[0] - pad, 0.0, lo[2] - pad],
                    [hi[0] + pad, w.semi_span(), hi[2] + pad],
                )
            }
        }
    }

    /// Declared feature band used by the anisotropic tessellation.
    ///
    /// Spheres and ellipsoids: the equatorial band `|θ - π/2| < π/8` of the
    /// sphere parameterization. Wing: the leading-edge region (`ξ < 0.1`) and
    /// the upper-surface shock band (`|ξ - 0.5| < 0.15`).
    pub fn in_feature_band(&self, p: Vec3) -> bool {
        match self {
            ShapeParams::Sphere { .. } => {
                (math::normalize(p)[2]).abs() < SPHERE_BAND_HALF_WIDTH.sin()
            }
            ShapeParams::Ellipsoid { semi_axes } => {
                let s = math::normalize([
                    p[0] / semi_axes[0],
                    p[1] / semi_axes[1],
                    p[2] / semi_axes[2],
                ]);
                s[2].abs() < SPHERE_BAND_HALF_WIDTH.sin()
            }
            ShapeParams::Wing(w) => {
                let (xi, z, eta) = w.body_to_section(p);
                if !(0.0..=1.0).contains(&eta) {
                    return false;
                }
                xi < 0.1 || (z > 0.0 && (xi - 0.5).abs() < 0.15)
            }
        }
    }
}

fn ellipsoid_area_element(semi_axes: &[f64; 3], s: Vec3) -> f64 {
    let [a, b, c] = *semi_axes;
    ((b * c * s[0]).powi(2) + (a * c * s[1]).powi(2) + (a * b * s[2]).powi(2)).sqrt()
}

/// Surface samples with outward unit normals and per-point quadrature areas.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SurfacePointSet {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub areas: Vec<f64>,
}

impl SurfacePointSet {
    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// `|Σ A_i n_i| / Σ A_i`; zero for an exactly closed discretization.
    pub fn closure_defect(&self) -> f64 {
        let mut acc = [0.0; 3];
        for (n, a) in self.normals.iter().zip(&self.areas) {
            acc = math::add(acc, math::scale(*n, *a));
        }
        math::norm(acc) / self.total_area()
    }

    pub fn subset(&self, idx: &[usize]) -> SurfacePointSet {
        SurfacePointSet {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            normals: idx.iter().map(|&i| self.normals[i]).collect(),
            areas: idx.iter().map(|&i| self.areas[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VolumePointSet {
    pub positions: Vec<Vec3>,
}

impl VolumePointSet {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Piecewise-linear inverse CDF of a non-negative function on `[lo, hi]`.
struct TabulatedCdf {
    lo: f64,
    hi: f64,
    cdf: Vec<f64>,
}

impl TabulatedCdf {
    fn new(lo: f64, hi: f64, cells: usize, f: impl Fn(f64) -> f64) -> Self {
        let w = (hi - lo) / cells as f64;
        let mut cdf = Vec::with_capacity(cells + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 0..cells {
            acc += f(lo + (i as f64 + 0.5) * w) * w;
            cdf.push(acc);
        }
        Self { lo, hi, cdf }
    }

    fn total(&self) -> f64 {
        *self.cdf.last().unwrap()
    }

    fn inverse(&self, u: f64) -> f64 {
        let target = u.clamp(0.0, 1.0) * self.total();
        let i = match self.cdf.binary_search_by(|c| c.total_cmp(&target)) {
            Ok(i) => i.min(self.cdf.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.cdf.len() - 2),
        };
        let (c0, c1) = (self.cdf[i], self.cdf[i + 1]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.5 };
        let w = (self.hi - self.lo) / (self.cdf.len() - 1) as f64;
        self.lo + (i as f64 + frac) * w
    }

    /// Density of the tabulated distribution (piecewise constant).
    fn pdf(&self, x: f64) -> f64 {
        let cells = self.cdf.len() - 1;
        let w = (self.hi - self.lo) / cells as f64;
        let i = (((x - self.lo) / w).floor() as isize).clamp(0, cells as isize - 1) as usize;
        (self.cdf[i + 1] - self.cdf[i]) / w / self.total()
    }
}

fn sphere_z_density(tess: Tessellation) -> impl Fn(f64) -> f64 {
    move |z: f64| match tess {
        Tessellation::Isotropic => 1.0,
        Tessellation::Anisotropic => {
            1.0 + SPHERE_ANISO_WEIGHT * (1.0 - z * z).max(0.0).powi(SPHERE_ANISO_POWER)
        }
    }
}

/// Unit-sphere directions from a jittered Fibonacci lattice whose `z`
/// coordinate follows `density`. Returns the directions and the per-point
/// pdf with respect to solid angle.
fn fibonacci_directions(n: usize, tess: Tessellation, rng: &mut ChaCha8Rng) -> Vec<(Vec3, f64)> {
    let density = sphere_z_density(tess);
    let norm = match tess {
        Tessellation::Isotropic => 2.0,
        Tessellation::Anisotropic => {
            let cells = 200_000;
            (0..cells)
                .map(|i| density(-1.0 + (2.0 * i as f64 + 1.0) / cells as f64))
                .sum::<f64>()
                * 2.0
                / cells as f64
        }
    };
    let table = match tess {
        Tessellation::Isotropic => None,
        Tessellation::Anisotropic => Some(TabulatedCdf::new(-1.0, 1.0, 8192, &density)),
    };
    let azimuth_offset = rng.random_range(0.0..2.0 * PI);

    (0..n)
        .map(|i| {
            // Descending z from the north pole, matching the canonical lattice.
            let q = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let z = match &table {
                None => q,
                Some(t) => t.inverse(0.5 * (q + 1.0)),
            };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = 2.0 * PI * i as f64 / GOLDEN_RATIO + azimuth_offset;
            let base = [r * theta.cos(), r * theta.sin(), z];

            // z-pdf per unit z is density/norm; solid angle pdf divides by 2π.
            let local_pdf = density(z) / norm / (2.0 * PI);
            let spacing = (1.0 / (n as f64 * local_pdf)).sqrt();

            let jitter_angle: f64 = rng.random_range(0.0..2.0 * PI);
            let jitter_mag = spacing * JITTER_STRENGTH * rng.random::<f64>().sqrt();
            let up = if base[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let t1 = math::normalize(math::cross(base, up));
            let t2 = math::cross(base, t1);
            let jittered = math::add(
                base,
                math::add(
                    math::scale(t1, jitter_mag * jitter_angle.cos()),
                    math::scale(t2, jitter_mag * jitter_angle.sin()),
                ),
            );
            let s = math::normalize(jittered);
            (s, density(s[2]) / norm / (2.0 * PI))
        })
        .collect()
}

fn quadric_surface(params: &ShapeParams, n: usize, tess: Tessellation, seed: u64) -> SurfacePointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = fibonacci_directions(n, tess, &mut rng);
    let mut out = SurfacePointSet {
        positions: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        areas: Vec::with_capacity(n),
    };
    for (s, pdf) in dirs {
        let (p, normal, element) = match params {
            ShapeParams::Sphere { radius } => (math::scale(s, *radius), s, radius * radius),
            ShapeParams::Ellipsoid { semi_axes } => {
                let [a, b, c] = *semi_axes;
                let p = [a * s[0], b * s[1], c * s[2]];
                let normal = math::normalize([s[0] / a, s[1] / b, s[2] / c]);
                (p, normal, ellipsoid_area_element(semi_axes, s))
            }
            ShapeParams::Wing(_) => unreachable!("quadric sampler called with a wing"),
        };
        out.positions.push(p);
        out.normals.push(normal);
        out.areas.push(element / (n as f64 * pdf));
    }
    out
}

/// Chordwise sampling weight on the side surface for the anisotropic mode.
fn wing_band_weight(u: f64) -> f64 {
    let (xi, upper) = side_chord_fraction(u);
    let leading = (-(xi / 0.05).powi(2)).exp();
    let shock = if upper { (-((xi - 0.5) / 0.08).powi(2)).exp() } else { 0.0 };
    1.0 + WING_ANISO_WEIGHT * (leading + shock)
}

fn wing_surface(w: &WingParams, n: usize, tess: Tessellation, seed: u64) -> SurfacePointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side_area = w.side_area();
    let cap_area = w.cap_area();
    let total = side_area + 2.0 * cap_area;
    let n_cap = ((n as f64 * cap_area / total).round() as usize).max(4);
    let n_side = n - 2 * n_cap;

    // Chordwise arc-length speed at mid-span approximates the area element;
    // the exact element is used for the areas below.
    let speed = |u: f64| {
        let (a, b) = w.side_tangents(u, 0.5);
        math::norm(math::cross(a, b))
    };
    let chordwise = TabulatedCdf::new(0.0, 1.0, 4096, |u| match tess {
        Tessellation::Isotropic => speed(u),
        Tessellation::Anisotropic => speed(u) * wing_band_weight(u),
    });

    let mut out = SurfacePointSet::default();
    let cell = 1.0 / (n_side as f64).sqrt();
    for i in 0..n_side {
        let mut a = (i as f64 / GOLDEN_RATIO).fract() + cell * (rng.random::<f64>() - 0.5);
        let mut b = (i as f64 + 0.5) / n_side as f64 + cell * (rng.random::<f64>() - 0.5);
        a = a.rem_euclid(1.0);
        b = reflect_unit(b);
        let u = chordwise.inverse(a);
        let eta = b;
        let p = w.side_point(u, eta);
        let (tu, te) = w.side_tangents(u, eta);
        let c = math::cross(tu, te);
        let element = math::norm(c);
        // u runs TE -> upper -> LE -> lower, eta root -> tip: tu x te points inward.
        let normal = math::scale(c, -1.0 / element);
        out.positions.push(p);
        out.normals.push(normal);
        out.areas.push(element / (n_side as f64 * chordwise.pdf(u)));
    }

    let thickness_cdf = TabulatedCdf::new(0.0, 1.0, 4096, |xi| w.half_thickness(xi));
    for (cap, eta, ny) in [(0usize, 0.0, -1.0), (1, 1.0, 1.0)] {
        for i in 0..n_cap {
            let k = i + cap * n_cap;
            let cell = 1.0 / (n_cap as f64).sqrt();
            let a = reflect_unit((i as f64 + 0.5) / n_cap as f64 + cell * (rng.random::<f64>() - 0.5));
            let b = ((k as f64 / GOLDEN_RATIO).fract() + cell * (rng.random::<f64>() - 0.5))
                .rem_euclid(1.0);
            let xi = thickness_cdf.inverse(a);
            let zt = w.half_thickness(xi);
            let p = w.section_to_body(xi, zt * (2.0 * b - 1.0), eta);
            out.positions.push(p);
            out.normals.push([0.0, ny, 0.0]);
            out.areas.push(cap_area / n_cap as f64);
        }
    }
    out
}

fn reflect_unit(x: f64) -> f64 {
    let x = if x < 0.0 { -x } else { x };
    let x = if x > 1.0 { 2.0 - x } else { x };
    x.clamp(1e-9, 1.0 - 1e-9)
}

/// Samples `n` surface points of the body.
pub fn make_surface(
    params: &ShapeParams,
    n: usize,
    tessellation: Tessellation,
    seed: u64,
) -> Result<SurfacePointSet> {
    if n < 16 {
        return Err(invalid(format!("surface needs at least 16 points, got {n}")));
    }
    params.validate()?;
    Ok(match params {
        ShapeParams::Wing(w) => wing_surface(w, n, tessellation, seed),
        _ => quadric_surface(params, n, tessellation, seed),
    })
}

/// Samples exterior volume points inside `bbox`.
///
/// `RegularGrid` takes the densest cubic lattice (cell centres) with at most
/// `n` nodes in the box and keeps the exterior nodes. `Random` rejection
/// samples exactly `n` exterior points.
pub fn make_volume_points(
    params: &ShapeParams,
    bbox: &Aabb,
    n: usize,
    mode: VolumeSampling,
    seed: u64,
) -> Result<VolumePointSet> {
    params.validate()?;
    if !bbox.strictly_contains(&params.bounding_box()) {
        return Err(invalid("bounding box does not strictly contain the body"));
    }
    if n == 0 {
        return Ok(VolumePointSet::default());
    }
    let positions = match mode {
        VolumeSampling::RegularGrid => {
            let (h, counts) = densest_lattice(bbox, n);
            let ext = bbox.extent();
            let offset = [
                bbox.min[0] + 0.5 * (ext[0] - counts[0] as f64 * h),
                bbox.min[1] + 0.5 * (ext[1] - counts[1] as f64 * h),
                bbox.min[2] + 0.5 * (ext[2] - counts[2] as f64 * h),
            ];
            let mut pts = Vec::new();
            for i in 0..counts[0] {
                for j in 0..counts[1] {
                    for k in 0..counts[2] {
                        let p = [
                            offset[0] + (i as f64 + 0.5) * h,
                            offset[1] + (j as f64 + 0.5) * h,
                            offset[2] + (k as f64 + 0.5) * h,
                        ];
                        if !params.contains(p) && !on_surface(params, p) {
                            pts.push(p);
                        }
                    }
                }
            }
            pts
        }
        VolumeSampling::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Vec::with_capacity(n);
            while pts.len() < n {
                let p = [
                    rng.random_range(bbox.min[0]..bbox.max[0]),
                    rng.random_range(bbox.min[1]..bbox.max[1]),
                    rng.random_range(bbox.min[2]..bbox.max[2]),
                ];
                if !params.contains(p) && !on_surface(params, p) {
                    pts.push(p);
                }
            }
            pts
        }
    };
    Ok(VolumePointSet { positions })
}

fn on_surface(params: &ShapeParams, p: Vec3) -> bool {
    params.implicit_residual(p).is_some_and(|r| r == 0.0)
}

/// Smallest cubic spacing whose cell-centred lattice has at most `n` nodes.
fn densest_lattice(bbox: &Aabb, n: usize) -> (f64, [usize; 3]) {
    let ext = bbox.extent();
    let count_at = |h: f64| -> [usize; 3] {
        [0, 1, 2].map(|k| ((ext[k] / h) * (1.0 + 1e-12)).floor() as usize)
    };
    let mut best: Option<(f64, [usize; 3], usize)> = None;
    for e in ext {
        for k in 1..=n {
            let h = e / k as f64;
            let c = count_at(h);
            let total = c[0].saturating_mul(c[1]).saturating_mul(c[2]);
            if total > n {
                break;
            }
            let better = match best {
                None => true,
                Some((bh, _, bt)) => total > bt || (total == bt && h < bh),
            };
            if better {
                best = Some((h, c, total));
            }
        }
    }
    let (h, c, _) = best.expect("lattice with one node always fits");
    (h, c)
}

/// Kernel estimate of per-point surface area for a point cloud of unknown
/// sampling density: `A_i = 1 / ρ_i` with a 2D Gaussian kernel of bandwidth
/// twice the mean nearest-neighbour distance.
pub fn estimate_areas_kde(positions: &[Vec3]) -> Vec<f64> {
    let n = positions.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut nn_sum = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i != j {
                best = best.min(math::norm(math::sub(positions[i], positions[j])));
            }
        }
        nn_sum += best;
    }
    let h = 2.0 * nn_sum / n as f64;
    let cutoff2 = (4.0 * h) * (4.0 * h);
    let inv = 1.0 / (2.0 * PI * h * h);
    (0..n)
        .map(|i| {
            let mut rho = 0.0;
            for j in 0..n {
                let d = math::sub(positions[i], positions[j]);
                let r2 = math::dot(d, d);
                if r2 < cutoff2 {
                    rho += (-0.5 * r2 / (h * h)).exp();
                }
            }
            1.0 / (rho * inv)
        })
        .collect()
}
