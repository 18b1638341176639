//! Synthetic case families: random shapes and angles of attack, both
//! tessellations, both volume samplings, and fields from the parametric
//! family.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaseRecord, CaseView, Split};
use crate::error::{invalid, Result};
use crate::fields::{family_fields, FlowConditions, Regime, MAX_ALPHA_DEG};
use crate::geometry::{
    make_surface, make_volume_points, Aabb, ShapeParams, Tessellation, VolumeSampling, WingParams, WING_ASPECT_RATIO_RANGE,
    WING_SWEEP_RANGE_DEG, WING_TWIST_RANGE_DEG,
};
use crate::trainer::split_dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// One sphere in four, ellipsoids otherwise.
    SphereEllipsoid,
    Wing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_cases: usize,
    pub seed: u64,
    pub family: ShapeFamily,
    pub regime: Regime,
    /// Inclusive angle-of-attack range in degrees.
    pub alpha_deg: [f64; 2],
    /// Points per surface tessellation.
    pub n_surface: usize,
    /// Random volume points of the solution view.
    pub n_volume: usize,
    /// Upper bound on regular-grid nodes of the CAD view.
    pub n_grid: usize,
    /// Volume domain; must strictly contain every body of the family.
    pub domain: Aabb,
}

impl GenConfig {
    pub fn desk() -> Self {
        Self {
            n_cases: 64,
            seed: 0,
            family: ShapeFamily::SphereEllipsoid,
            regime: Regime::Subsonic,
            alpha_deg: [0.0, MAX_ALPHA_DEG],
            n_surface: 2048,
            n_volume: 4096,
            n_grid: 1000,
            domain: Aabb::cube(2.0),
        }
    }

    pub fn wing_desk() -> Self {
        let max_span = 0.5 * WING_ASPECT_RATIO_RANGE.1;
        let max_x = 1.0 + max_span * WING_SWEEP_RANGE_DEG.1.to_radians().tan();
        Self {
            family: ShapeFamily::Wing,
            domain: Aabb::new([-1.0, -0.5, -1.5], [max_x + 1.0, max_span + 1.0, 1.5]),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(invalid("n_cases must be positive"));
        }
        let [lo, hi] = self.alpha_deg;
        if !(0.0 <= lo && lo <= hi && hi <= MAX_ALPHA_DEG) {
            return Err(invalid(format!("alpha range [{lo}, {hi}] outside [0, {MAX_ALPHA_DEG}]")));
        }
        if self.n_surface < 16 || self.n_volume == 0 || self.n_grid == 0 {
            return Err(invalid("point counts too small"));
        }
        Ok(())
    }
}

/// Shape and angle drawn for one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: u64,
    pub shape: ShapeParams,
    pub alpha_deg: f64,
}

fn case_rng(seed: u64, id: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id.wrapping_mul(4).wrapping_add(stream));
    r
}

impl CaseSpec {
    pub fn draw(cfg: &GenConfig, id: u64) -> Self {
        let mut r = case_rng(cfg.seed, id, 0);
        let shape = match cfg.family {
            ShapeFamily::SphereEllipsoid => {
                if r.random_range(0.0..1.0) < 0.25 {
                    ShapeParams::Sphere { radius: r.random_range(0.5..1.0) }
                } else {
                    ShapeParams::Ellipsoid {
                        semi_axes: [r.random_range(0.6..1.3), r.random_range(0.4..1.0), r.random_range(0.4..1.0)],
                    }
                }
            }
            ShapeFamily::Wing => {
                let (a0, a1) = WING_ASPECT_RATIO_RANGE;
                let (s0, s1) = WING_SWEEP_RANGE_DEG;
                let (t0, t1) = WING_TWIST_RANGE_DEG;
                ShapeParams::Wing(WingParams::new(r.random_range(a0..a1), r.random_range(s0..s1), r.random_range(t0..t1)))
            }
        };
        let [lo, hi] = cfg.alpha_deg;
        let alpha_deg = if hi > lo { r.random_range(lo..=hi) } else { lo };
        Self { id, shape, alpha_deg }
    }
}

/// Frontal projected area for bluff bodies, planform area for wings.
pub fn reference_area(shape: &ShapeParams) -> f64 {
    match shape {
        ShapeParams::Sphere { radius } => PI * radius * radius,
        ShapeParams::Ellipsoid { semi_axes } => PI * semi_axes[1] * semi_axes[2],
        ShapeParams::Wing(w) => w.chord * w.semi_span(),
    }
}

/// Builds both views of one case; arrays are quantized to f32 precision.
pub fn generate_case(cfg: &GenConfig, spec: &CaseSpec, split: Split) -> Result<CaseRecord> {
    let cond = FlowConditions::new(spec.alpha_deg, reference_area(&spec.shape), cfg.regime);
    cond.validate()?;
    let seed = |stream: u64| case_rng(cfg.seed, spec.id, stream).random::<u64>();
    let surface = make_surface(&spec.shape, cfg.n_surface, Tessellation::Anisotropic, seed(1))?;
    let volume = make_volume_points(&spec.shape, &cfg.domain, cfg.n_volume, VolumeSampling::Random, seed(2))?;
    let fields = family_fields(&spec.shape, &cond, &surface, &volume)?;
    let solution = CaseView { surface, volume, fields };
    let surface = make_surface(&spec.shape, cfg.n_surface, Tessellation::Isotropic, seed(3))?;
    let volume = make_volume_points(&spec.shape, &cfg.domain, cfg.n_grid, VolumeSampling::RegularGrid, 0)?;
    let fields = family_fields(&spec.shape, &cond, &surface, &volume)?;
    let cad = CaseView { surface, volume, fields };
    let mut rec = CaseRecord { id: spec.id, shape: spec.shape, conditions: cond, split, solution, cad };
    rec.quantize();
    Ok(rec)
}

/// Generates `cfg.n_cases` cases with ids `0..n`, split 80/10/10 (all train
/// below ten cases). Cases are built on worker threads; output order and
/// content do not depend on the thread count.
pub fn generate_cases(cfg: &GenConfig) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    let ids: Vec<u64> = (0..cfg.n_cases as u64).collect();
    let mut split_of = vec![Split::Train; ids.len()];
    if ids.len() >= 10 {
        let s = split_dataset(&ids, cfg.seed)?;
        for (list, tag) in [(&s.val, Split::Val), (&s.test, Split::Test)] {
            list.iter().for_each(|&id| split_of[id as usize] = tag);
        }
    }
    let specs: Vec<CaseSpec> = ids.iter().map(|&id| CaseSpec::draw(cfg, id)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len());
    let chunk = specs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| {
                let split_of = &split_of;
                s.spawn(move || {
                    part.iter().map(|sp| generate_case(cfg, sp, split_of[sp.id as usize])).collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(specs.len());
        for h in handles {
            out.extend(h.join().expect("generation worker panicked")?);
        }
        Ok(out)
    })
}
