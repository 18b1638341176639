use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use surrogate_core::dataio::{generate_cases, write_atomic, write_dataset, CaseRecord, Dataset, GenConfig};
use surrogate_core::fields::FieldSample;
use surrogate_core::math::Vec3;
use surrogate_core::model::{Model, TokenBatch};
use surrogate_core::postprocess::{integrate_forces, pressure_profile, r2_score, rank_cases, CaseRanking, ErrorReport, ForceReport, PressureConvention};
use surrogate_core::trainer::{evaluate_predictions, predict_case, run_training, CaseEval, Checkpoint, RunOutcome};
use surrogate_core::{Error, Result};

use crate::config::{BenchRun, EvalRun, GenRun, SliceRun, TrainRun, Weights};
use crate::svg::{plot, Series};
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const FORCES_CSV: &str = "forces.csv";
pub const PROFILE_CSV: &str = "profile.csv";
pub const BENCH_CSV: &str = "bench.csv";

pub(crate) fn save_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| Ok(std::io::Write::write_all(w, text.as_bytes())?))
}

fn require(path: &Path, what: &str) -> std::result::Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Config(format!("`{what}` is required")));
    }
    Ok(())
}

/// Writes `dataset.abpt`, or one `dataset_<regime>.abpt` per listed regime.
pub fn cmd_gen(cfg: &GenRun, out: &Path) -> std::result::Result<Vec<PathBuf>, CliError> {
    let jobs: Vec<(GenConfig, String)> = match &cfg.regimes {
        None => vec![(cfg.gen.clone(), "dataset.abpt".into())],
        Some(rs) if rs.is_empty() => return Err(CliError::Config("`regimes` must not be empty".into())),
        Some(rs) => rs.iter().map(|&r| (GenConfig { regime: r, ..cfg.gen.clone() }, format!("dataset_{}.abpt", r.name()))).collect(),
    };
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let mut paths = Vec::new();
    for (g, name) in jobs {
        let cases = generate_cases(&g)?;
        let path = out.join(name);
        write_dataset(&path, &cases, serde_json::to_value(&g).map_err(Error::from)?)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_train(cfg: &TrainRun, out: &Path) -> std::result::Result<RunOutcome, CliError> {
    require(&cfg.dataset, "dataset")?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    Ok(run_training(out, &ds, &cfg.model, &cfg.train, cfg.resume, cfg.stop_at)?)
}

/// Target cases plus, when a checkpoint is given, predictions at their
/// solution points.
fn predictions(cfg: &EvalRun) -> std::result::Result<(Vec<CaseRecord>, Option<Vec<FieldSample>>), CliError> {
    require(&cfg.dataset, "dataset")?;
    let cases = Dataset::open(&cfg.dataset)?.read_split(cfg.split)?;
    if cases.is_empty() {
        return Err(Error::NotFound(format!("no {:?} cases in {}", cfg.split, cfg.dataset.display())).into());
    }
    let Some(ck) = &cfg.checkpoint else { return Ok((cases, None)) };
    let ck = Checkpoint::read(ck)?;
    let model = match cfg.weights {
        Weights::Ema => ck.ema_model()?,
        Weights::Raw => ck.model()?,
    };
    let preds = cases.iter().map(|c| predict_case(&model, &ck.stats, c, cfg.input, cfg.seed)).collect::<Result<Vec<_>>>()?;
    Ok((cases, Some(preds)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: ErrorReport,
    /// Ranked by surface-pressure relative L2 error.
    pub ranking: CaseRanking,
    pub cases: Vec<CaseEval>,
}

/// Writes `report.json`, `scatter.csv` and drag/lift scatter SVGs.
pub fn cmd_eval(cfg: &EvalRun, out: &Path) -> std::result::Result<EvalSummary, CliError> {
    if cfg.checkpoint.is_none() {
        return Err(CliError::Config("`checkpoint` is required for eval".into()));
    }
    let (cases, preds) = predictions(cfg)?;
    let res = evaluate_predictions(&cases, &preds.expect("checkpoint given"))?;
    let errs: Vec<(u64, f64)> = res.cases.iter().map(|c| (c.id, c.fields["surface_pressure"].rel_l2)).collect();
    let summary = EvalSummary { report: res.report, ranking: rank_cases(&errs)?, cases: res.cases };
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let json = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    save_text(&out.join(REPORT_FILE), &format!("{json}\n"))?;
    let mut csv = String::from("case_id,target_drag,predicted_drag,target_lift,predicted_lift\n");
    for c in &summary.cases {
        let (t, p) = (&c.target_force, &c.predicted_force);
        writeln!(csv, "{},{},{},{},{}", c.id, t.drag, p.drag, t.lift, p.lift).unwrap();
    }
    save_text(&out.join(SCATTER_CSV), &csv)?;
    type Pick = fn(&ForceReport) -> f64;
    let panels: [(&str, Pick, Option<f64>); 2] =
        [("drag", |f| f.drag, summary.report.r2_drag), ("lift", |f| f.lift, summary.report.r2_lift)];
    for (name, pick, r2) in panels {
        let pts: Vec<(f64, f64)> = summary.cases.iter().map(|c| (pick(&c.target_force), pick(&c.predicted_force))).collect();
        let title = match r2 {
            Some(r) => format!("{name} force, R² = {r:.3}"),
            None => format!("{name} force"),
        };
        let svg = plot(&title, "target [N]", "predicted [N]", &[Series { label: "cases", color: "#1f77b4", points: &pts, line: false }], true);
        save_text(&out.join(format!("scatter_{name}.svg")), &svg)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceRow {
    pub case_id: u64,
    pub alpha_deg: f64,
    pub target: ForceReport,
    pub predicted: Option<ForceReport>,
}

/// Writes `forces.csv`: target forces and coefficients per case, with
/// predicted columns when a checkpoint is given.
pub fn cmd_forces(cfg: &EvalRun, out: &Path) -> std::result::Result<Vec<ForceRow>, CliError> {
    let (cases, preds) = predictions(cfg)?;
    let force = |c: &CaseRecord, f: &FieldSample| {
        integrate_forces(&c.solution.surface, &f.surface_pressure, &f.wall_shear, &c.conditions, PressureConvention::Relative)
    };
    let mut rows = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        rows.push(ForceRow {
            case_id: c.id,
            alpha_deg: c.conditions.alpha.to_degrees(),
            target: force(c, &c.solution.fields)?,
            predicted: preds.as_ref().map(|p| force(c, &p[i])).transpose()?,
        });
    }
    let mut csv = String::from("case_id,alpha_deg,target_drag,target_lift,target_cd,target_cl");
    if preds.is_some() {
        csv.push_str(",predicted_drag,predicted_lift,predicted_cd,predicted_cl");
    }
    csv.push('\n');
    for r in &rows {
        let t = &r.target;
        write!(csv, "{},{},{},{},{},{}", r.case_id, r.alpha_deg, t.drag, t.lift, t.drag_coefficient, t.lift_coefficient).unwrap();
        if let Some(p) = &r.predicted {
            write!(csv, ",{},{},{},{}", p.drag, p.lift, p.drag_coefficient, p.lift_coefficient).unwrap();
        }
        csv.push('\n');
    }
    std::fs::create_dir_all(out).map_err(Error::from)?;
    save_text(&out.join(FORCES_CSV), &csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub upper: bool,
    pub x: f64,
    pub target: f64,
    pub predicted: Option<f64>,
}

/// Writes `profile.csv` and `profile.svg` for one chordwise slice.
pub fn cmd_slice(cfg: &SliceRun, out: &Path) -> std::result::Result<Vec<ProfileRow>, CliError> {
    require(&cfg.dataset, "dataset")?;
    let case = Dataset::open(&cfg.dataset)?.read_case(cfg.case_id)?;
    let surf = &case.solution.surface;
    let target = pressure_profile(surf, &case.solution.fields.surface_pressure, cfg.span_fraction, cfg.band)?;
    let predicted = match &cfg.checkpoint {
        None => None,
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let model = match cfg.weights {
                Weights::Ema => ck.ema_model()?,
                Weights::Raw => ck.model()?,
            };
            let p = predict_case(&model, &ck.stats, &case, cfg.input, cfg.seed)?;
            Some(pressure_profile(surf, &p.surface_pressure, cfg.span_fraction, cfg.band)?)
        }
    };
    let mut rows = Vec::new();
    for (upper, t, p) in [
        (true, &target.upper, predicted.as_ref().map(|p| &p.upper)),
        (false, &target.lower, predicted.as_ref().map(|p| &p.lower)),
    ] {
        for (k, &(x, v)) in t.iter().enumerate() {
            rows.push(ProfileRow { upper, x, target: v, predicted: p.map(|p| p[k].1) });
        }
    }
    let mut csv = String::from("side,x,target_pressure,predicted_pressure\n");
    for r in &rows {
        let side = if r.upper { "upper" } else { "lower" };
        let pred = r.predicted.map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{side},{},{},{pred}", r.x, r.target).unwrap();
    }
    std::fs::create_dir_all(out).map_err(Error::from)?;
    save_text(&out.join(PROFILE_CSV), &csv)?;
    let pts = |upper: bool, pred: bool| -> Vec<(f64, f64)> {
        rows.iter().filter(|r| r.upper == upper).filter_map(|r| if pred { r.predicted.map(|p| (r.x, p)) } else { Some((r.x, r.target)) }).collect()
    };
    let (tu, tl, pu, pl) = (pts(true, false), pts(false, false), pts(true, true), pts(false, true));
    let mut series = vec![
        Series { label: "target upper", color: "#1f77b4", points: &tu, line: true },
        Series { label: "target lower", color: "#ff7f0e", points: &tl, line: true },
    ];
    if predicted.is_some() {
        series.push(Series { label: "predicted upper", color: "#1f77b4", points: &pu, line: false });
        series.push(Series { label: "predicted lower", color: "#ff7f0e", points: &pl, line: false });
    }
    let title = format!("case {} slice at y = {:.3}", case.id, target.y);
    save_text(&out.join("profile.svg"), &plot(&title, "x / chord", "p - p∞ [Pa]", &series, false))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_queries: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(x, y)`.
pub fn affine_fit(points: &[(f64, f64)]) -> Result<AffineFit> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::UndefinedRatio("affine fit needs two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let fitted: Vec<f64> = points.iter().map(|p| intercept + slope * p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(AffineFit { slope, intercept, r2: r2_score(&fitted, &ys)? })
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, model: &Model) -> Vec<Vec3> {
    let b = &model.config.bounds;
    (0..n).map(|_| std::array::from_fn(|k| rng.random_range(b.min[k]..b.max[k]))).collect()
}

/// Times a full forward pass (anchors plus `n` queries per domain) at fixed
/// anchor counts, keeping the fastest of `repeats` runs. Writes `bench.csv`
/// and the affine fit to `bench.json`.
pub fn cmd_bench(cfg: &BenchRun, out: &Path) -> std::result::Result<Vec<BenchRow>, CliError> {
    if cfg.n_queries.is_empty() || cfg.repeats == 0 {
        return Err(CliError::Config("`n_queries` and `repeats` must be non-empty".into()));
    }
    let model = match &cfg.checkpoint {
        Some(p) => Checkpoint::read(p)?.ema_model()?,
        None => Model::new(cfg.model.clone())?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ns, nv) = (model.config.n_surface_anchors, model.config.n_volume_anchors);
    let surface_anchors = random_points(&mut rng, ns, &model);
    let volume_anchors = random_points(&mut rng, nv, &model);
    let max_q = *cfg.n_queries.iter().max().unwrap();
    let sq = random_points(&mut rng, max_q, &model);
    let vq = random_points(&mut rng, max_q, &model);
    let mut rows = Vec::new();
    for &n in &cfg.n_queries {
        let batch = TokenBatch {
            surface_anchors: surface_anchors.clone(),
            volume_anchors: volume_anchors.clone(),
            surface_queries: sq[..n].to_vec(),
            volume_queries: vq[..n].to_vec(),
            alpha: 0.0,
        };
        let mut best = f64::INFINITY;
        for _ in 0..cfg.repeats {
            let t = Instant::now();
            std::hint::black_box(model.predict(&batch)?);
            best = best.min(t.elapsed().as_secs_f64());
        }
        rows.push(BenchRow { n_queries: n, seconds: best });
    }
    let mut csv = String::from("n_queries,seconds\n");
    rows.iter().for_each(|r| writeln!(csv, "{},{}", r.n_queries, r.seconds).unwrap());
    std::fs::create_dir_all(out).map_err(Error::from)?;
    save_text(&out.join(BENCH_CSV), &csv)?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n_queries as f64, r.seconds)).collect();
    if let Ok(fit) = affine_fit(&pts) {
        save_text(&out.join("bench.json"), &format!("{}\n", serde_json::to_string_pretty(&fit).map_err(Error::from)?))?;
    }
    Ok(rows)
}
