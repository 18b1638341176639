use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_indices, VARIABLES};
use crate::dataio::{CaseRecord, NormStats};
use crate::error::{invalid, Result};
use crate::fields::FieldSample;
use crate::math::Vec3;
use crate::model::{Model, TokenBatch};
use crate::postprocess::{flatten3, integrate_forces, r2_score, ErrorReport, FieldErrors, ForceReport, PressureConvention};

/// Which point sets feed the anchors at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputView {
    /// Anisotropic surface and random volume points.
    Solution,
    /// Isotropic tessellation and regular grid.
    Cad,
}

/// Predicts physical fields at every solution point of `case`, with anchors
/// drawn from `input` using a seed derived from `(seed, case id)`.
pub fn predict_case(model: &Model, stats: &NormStats, case: &CaseRecord, input: InputView, seed: u64) -> Result<FieldSample> {
    let view = match input {
        InputView::Solution => &case.solution,
        InputView::Cad => &case.cad,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case.id);
    let cfg = &model.config;
    let si = sample_indices(&mut rng, view.surface.count(), cfg.n_surface_anchors)?;
    let vi = sample_indices(&mut rng, view.volume.count(), cfg.n_volume_anchors)?;
    let batch = TokenBatch {
        surface_anchors: si.iter().map(|&i| view.surface.positions[i]).collect(),
        volume_anchors: vi.iter().map(|&i| view.volume.positions[i]).collect(),
        surface_queries: case.solution.surface.positions.clone(),
        volume_queries: case.solution.volume.positions.clone(),
        alpha: case.conditions.alpha,
    };
    let p = model.predict(&batch)?;
    let mut out = FieldSample::default();
    let vec3 = |r: &[f64], base: usize| -> Vec3 {
        [
            stats.destandardize(base, r[1]),
            stats.destandardize(base + 1, r[2]),
            stats.destandardize(base + 2, r[3]),
        ]
    };
    for r in p.surface_queries.data.chunks(4) {
        out.surface_pressure.push(stats.destandardize(0, r[0]));
        out.wall_shear.push(vec3(r, 1));
    }
    for r in p.volume_queries.data.chunks(4) {
        out.volume_pressure.push(stats.destandardize(4, r[0]));
        out.velocity.push(vec3(r, 5));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEval {
    pub id: u64,
    pub fields: BTreeMap<String, FieldErrors>,
    pub target_force: ForceReport,
    pub predicted_force: ForceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cases: Vec<CaseEval>,
    /// Errors pooled over every point of every case, plus force R².
    pub report: ErrorReport,
}

fn variable_arrays(f: &FieldSample) -> [Vec<f64>; 4] {
    [f.surface_pressure.clone(), flatten3(&f.wall_shear), f.volume_pressure.clone(), flatten3(&f.velocity)]
}

/// Scores predicted fields at the solution points of each case.
pub fn evaluate_predictions(cases: &[CaseRecord], predictions: &[FieldSample]) -> Result<EvalResult> {
    if cases.len() != predictions.len() || cases.is_empty() {
        return Err(invalid(format!("{} cases vs {} predictions", cases.len(), predictions.len())));
    }
    let mut pooled_p: [Vec<f64>; 4] = Default::default();
    let mut pooled_t: [Vec<f64>; 4] = Default::default();
    let mut out = Vec::with_capacity(cases.len());
    for (case, pred) in cases.iter().zip(predictions) {
        let truth = &case.solution.fields;
        let (pa, ta) = (variable_arrays(pred), variable_arrays(truth));
        let counts = [truth.surface_pressure.len(), truth.wall_shear.len(), truth.volume_pressure.len(), truth.velocity.len()];
        let mut fields = BTreeMap::new();
        for k in 0..4 {
            fields.insert(VARIABLES[k].to_string(), FieldErrors::compute(&pa[k], &ta[k], counts[k])?);
            pooled_p[k].extend_from_slice(&pa[k]);
            pooled_t[k].extend_from_slice(&ta[k]);
        }
        let surf = &case.solution.surface;
        let cond = &case.conditions;
        out.push(CaseEval {
            id: case.id,
            fields,
            target_force: integrate_forces(surf, &truth.surface_pressure, &truth.wall_shear, cond, PressureConvention::Relative)?,
            predicted_force: integrate_forces(surf, &pred.surface_pressure, &pred.wall_shear, cond, PressureConvention::Relative)?,
        });
    }
    let mut report = ErrorReport::default();
    for k in 0..4 {
        let points = if k % 2 == 0 { pooled_t[k].len() } else { pooled_t[k].len() / 3 };
        report.fields.insert(VARIABLES[k].to_string(), FieldErrors::compute(&pooled_p[k], &pooled_t[k], points)?);
    }
    let col = |f: fn(&CaseEval) -> f64| out.iter().map(f).collect::<Vec<_>>();
    report.r2_drag = r2_score(&col(|c| c.predicted_force.drag), &col(|c| c.target_force.drag)).ok();
    report.r2_lift = r2_score(&col(|c| c.predicted_force.lift), &col(|c| c.target_force.lift)).ok();
    Ok(EvalResult { cases: out, report })
}

/// Predicts and scores every case.
pub fn evaluate_cases(model: &Model, stats: &NormStats, cases: &[CaseRecord], input: InputView, seed: u64) -> Result<EvalResult> {
    let preds = cases.iter().map(|c| predict_case(model, stats, c, input, seed)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(cases, &preds)
}
