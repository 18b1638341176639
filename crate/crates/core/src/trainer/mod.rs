//! Training recipe: batch size one, per-step anchor resampling, per-variable
//! MAE on standardized fields, Lion updates, warmup + cosine schedule and an
//! EMA copy of the weights used for evaluation.

mod checkpoint;
mod eval;
mod run;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate_cases, evaluate_predictions, predict_case, CaseEval, EvalResult, InputView};
pub use run::{run_training, RunOutcome, LOSS_LOG, VAL_LOG};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{CaseRecord, CaseView, NormStats};
use crate::error::{invalid, shape, Error, Result};
use crate::math::Vec3;
use crate::model::{Branch, Model, ModelConfig, ParamSet, SURFACE_CHANNELS, VOLUME_CHANNELS};
use crate::tensor::{Graph, Tensor, Var};

/// Loss weight per output column: scalar variables weigh 1, each component of
/// a 3-vector weighs 1/3, so every variable contributes equally.
pub const COLUMN_WEIGHTS: [f64; 4] = [1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
pub const VARIABLES: [&str; 4] = ["surface_pressure", "wall_shear", "volume_pressure", "velocity"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Anchors and loss on the solution-adapted point sets.
    SolutionMesh,
    /// Anchors from the isotropic tessellation and regular grid; loss only on
    /// queries drawn from the solution point sets.
    CadInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_updates: u64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub ema_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Fraction of each case's solution volume points kept, fixed per case.
    pub volume_subsample_fraction: f64,
    pub mode: TrainMode,
    /// Loss-bearing query points per domain in cad-input mode.
    pub n_surface_queries: usize,
    pub n_volume_queries: usize,
    pub seed: u64,
    /// Validation every this many epochs over the train split; 0 disables.
    pub val_every_epochs: u64,
    /// Checkpoint every this many updates; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn reference() -> Self {
        Self {
            total_updates: 400_000,
            peak_lr: 5e-5,
            final_lr: 1e-6,
            warmup_fraction: 0.05,
            ema_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            volume_subsample_fraction: 0.10,
            mode: TrainMode::SolutionMesh,
            n_surface_queries: 16384,
            n_volume_queries: 16384,
            seed: 0,
            val_every_epochs: 1,
            checkpoint_every: 0,
        }
    }

    /// Short single-core runs need a larger step size and a faster EMA than
    /// the reference recipe to move the weights at all in 2000 updates.
    pub fn desk() -> Self {
        Self {
            total_updates: 2000,
            peak_lr: 1e-3,
            ema_rate: 1e-2,
            n_surface_queries: 256,
            n_volume_queries: 256,
            val_every_epochs: 10,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_updates == 0 {
            return bad("total_updates must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.peak_lr) {
            return bad("need 0 <= final_lr <= peak_lr");
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return bad("ema_rate must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return bad("betas must lie in [0, 1) and weight_decay be non-negative");
        }
        if !(self.volume_subsample_fraction > 0.0 && self.volume_subsample_fraction <= 1.0) {
            return bad("volume_subsample_fraction must lie in (0, 1]");
        }
        if self.mode == TrainMode::CadInput && (self.n_surface_queries == 0 || self.n_volume_queries == 0) {
            return bad("cad-input mode needs query points");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_updates as f64).ceil() as u64
    }
}

/// Learning rate after `step` updates: linear ramp from 0 to `peak_lr` over
/// the warmup, then cosine to `final_lr` at `total_updates`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_updates {
        return Err(invalid(format!("step {step} beyond {} updates", cfg.total_updates)));
    }
    let warm = cfg.warmup_steps();
    if step <= warm {
        return Ok(cfg.peak_lr * step as f64 / warm as f64);
    }
    let t = (step - warm) as f64 / (cfg.total_updates - warm) as f64;
    Ok(cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Lion momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self { m: params.zeros_like(), beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `p ← p − lr·(sign(β1·m + (1−β1)·g) + wd·p)`, then `m ← β2·m + (1−β2)·g`.
pub fn lion_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut OptimizerState, lr: f64) -> Result<()> {
    let ms = state.m.tensors_mut();
    if params.len() != grads.len() || params.len() != ms.len() {
        return Err(shape(format!("{} params, {} grads, {} momenta", params.len(), grads.len(), ms.len())));
    }
    let (b1, b2, wd) = (state.beta1, state.beta2, state.weight_decay);
    for ((p, g), m) in params.iter_mut().zip(grads).zip(ms.iter_mut()) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(shape(format!("tensor of {} entries vs gradient {} / momentum {}", p.len(), g.len(), m.len())));
        }
        for ((pi, gi), mi) in p.data.iter_mut().zip(g).zip(m.data.iter_mut()) {
            let d = sign(b1 * *mi + (1.0 - b1) * gi);
            *pi -= lr * (d + wd * *pi);
            *mi = b2 * *mi + (1.0 - b2) * gi;
        }
    }
    Ok(())
}

/// `ema ← (1−rate)·ema + rate·params`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(invalid(format!("ema rate {rate} outside (0, 1]")));
    }
    if ema.len() != params.len() || ema.iter().zip(params).any(|(a, b)| a.shape != b.shape) {
        return Err(shape("ema and parameter shapes differ"));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        for (ei, pi) in e.data.iter_mut().zip(&p.data) {
            *ei = (1.0 - rate) * *ei + rate * pi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded shuffle, then `⌊0.8n⌋` train, `⌊0.1n⌋` val, the rest test. Each
/// list is returned sorted.
pub fn split_dataset(ids: &[u64], seed: u64) -> Result<SplitIds> {
    if ids.len() < 10 {
        return Err(invalid(format!("splitting needs at least 10 cases, got {}", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let (nt, nv) = (n * 8 / 10, n / 10);
    let sorted = |s: &[u64]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitIds {
        train: sorted(&shuffled[..nt]),
        val: sorted(&shuffled[nt..nt + nv]),
        test: sorted(&shuffled[nt + nv..]),
    })
}

/// Standardized `[n × 4]` targets of one view: `(p, τ)` on the surface and
/// `(p, u)` in the volume.
pub fn standardized_targets(view: &CaseView, stats: &NormStats) -> (Tensor, Tensor) {
    let f = &view.fields;
    let mut s = Vec::with_capacity(f.surface_pressure.len() * 4);
    for (p, t) in f.surface_pressure.iter().zip(&f.wall_shear) {
        s.push(stats.standardize(0, *p));
        (0..3).for_each(|k| s.push(stats.standardize(1 + k, t[k])));
    }
    let mut v = Vec::with_capacity(f.volume_pressure.len() * 4);
    for (p, u) in f.volume_pressure.iter().zip(&f.velocity) {
        v.push(stats.standardize(4, *p));
        (0..3).for_each(|k| v.push(stats.standardize(5 + k, u[k])));
    }
    let ns = f.surface_pressure.len();
    let nv = f.volume_pressure.len();
    (
        Tensor { shape: vec![ns, SURFACE_CHANNELS], data: s },
        Tensor { shape: vec![nv, VOLUME_CHANNELS], data: v },
    )
}

/// A training case with standardized targets and its fixed volume subsample.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub record: CaseRecord,
    /// Indices into the solution volume set kept for training.
    pub volume_subset: Vec<usize>,
    solution_targets: (Tensor, Tensor),
    cad_targets: (Tensor, Tensor),
}

impl PreparedCase {
    pub fn new(record: CaseRecord, stats: &NormStats, cfg: &TrainConfig) -> Result<Self> {
        record.validate()?;
        let nv = record.solution.volume.count();
        let keep = ((cfg.volume_subsample_fraction * nv as f64).round() as usize).clamp(1, nv);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(record.id);
        let mut volume_subset = index::sample(&mut rng, nv, keep).into_vec();
        volume_subset.sort_unstable();
        let solution_targets = standardized_targets(&record.solution, stats);
        let cad_targets = standardized_targets(&record.cad, stats);
        Ok(Self { record, volume_subset, solution_targets, cad_targets })
    }
}

/// `k` indices from `0..n`: without replacement when `k ≤ n`, with otherwise.
pub fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(invalid("cannot sample from an empty point set"));
    }
    if k <= n {
        Ok(index::sample(rng, n, k).into_vec())
    } else {
        Ok((0..k).map(|_| rng.random_range(0..n)).collect())
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    idx.iter().for_each(|&i| data.extend_from_slice(t.row_slice(i)));
    Tensor { shape: vec![idx.len(), c], data }
}

fn gather_points(p: &[Vec3], idx: &[usize]) -> Vec<Vec3> {
    idx.iter().map(|&i| p[i]).collect()
}

/// Token positions and standardized targets of one training step.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub alpha: f64,
    pub surface_anchors: Vec<Vec3>,
    pub volume_anchors: Vec<Vec3>,
    pub surface_anchor_targets: Tensor,
    pub volume_anchor_targets: Tensor,
    pub surface_queries: Vec<Vec3>,
    pub volume_queries: Vec<Vec3>,
    pub surface_query_targets: Tensor,
    pub volume_query_targets: Tensor,
}

/// Draws anchors (and, in cad-input mode, queries) for one step.
pub fn draw_sample(case: &PreparedCase, model: &ModelConfig, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<StepSample> {
    let rec = &case.record;
    let (ns, nv) = (model.n_surface_anchors, model.n_volume_anchors);
    let sol_s = sample_indices(rng, rec.solution.surface.count(), match cfg.mode {
        TrainMode::SolutionMesh => ns,
        TrainMode::CadInput => cfg.n_surface_queries,
    })?;
    let sol_v: Vec<usize> = sample_indices(rng, case.volume_subset.len(), match cfg.mode {
        TrainMode::SolutionMesh => nv,
        TrainMode::CadInput => cfg.n_volume_queries,
    })?
    .into_iter()
    .map(|i| case.volume_subset[i])
    .collect();
    let (sol_st, sol_vt) = &case.solution_targets;
    let picked_s = (gather_points(&rec.solution.surface.positions, &sol_s), gather_rows(sol_st, &sol_s));
    let picked_v = (gather_points(&rec.solution.volume.positions, &sol_v), gather_rows(sol_vt, &sol_v));
    Ok(match cfg.mode {
        TrainMode::SolutionMesh => StepSample {
            alpha: rec.conditions.alpha,
            surface_anchors: picked_s.0,
            surface_anchor_targets: picked_s.1,
            volume_anchors: picked_v.0,
            volume_anchor_targets: picked_v.1,
            surface_queries: Vec::new(),
            volume_queries: Vec::new(),
            surface_query_targets: Tensor::zeros(&[0, SURFACE_CHANNELS]),
            volume_query_targets: Tensor::zeros(&[0, VOLUME_CHANNELS]),
        },
        TrainMode::CadInput => {
            let cad_s = sample_indices(rng, rec.cad.surface.count(), ns)?;
            let cad_v = sample_indices(rng, rec.cad.volume.count(), nv)?;
            let (cad_st, cad_vt) = &case.cad_targets;
            StepSample {
                alpha: rec.conditions.alpha,
                surface_anchors: gather_points(&rec.cad.surface.positions, &cad_s),
                surface_anchor_targets: gather_rows(cad_st, &cad_s),
                volume_anchors: gather_points(&rec.cad.volume.positions, &cad_v),
                volume_anchor_targets: gather_rows(cad_vt, &cad_v),
                surface_queries: picked_s.0,
                surface_query_targets: picked_s.1,
                volume_queries: picked_v.0,
                volume_query_targets: picked_v.1,
            }
        }
    })
}

/// Graph nodes holding the targets of a [`StepSample`].
#[derive(Debug, Clone, Copy)]
pub struct TargetVars {
    pub surface_anchors: Var,
    pub volume_anchors: Var,
    pub surface_queries: Var,
    pub volume_queries: Var,
}

impl TargetVars {
    /// Places targets on `g`; as gradient leaves when `track` is set, which
    /// only tests need.
    pub fn place(g: &mut Graph, s: &StepSample, track: bool) -> Result<Self> {
        let mut put = |t: &Tensor| if track { g.param(t.clone()) } else { g.constant(t.clone()) };
        Ok(Self {
            surface_anchors: put(&s.surface_anchor_targets)?,
            volume_anchors: put(&s.volume_anchor_targets)?,
            surface_queries: put(&s.surface_query_targets)?,
            volume_queries: put(&s.volume_query_targets)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub loss: Var,
    /// Standardized MAE per entry of [`VARIABLES`] on the loss-bearing tokens.
    pub per_variable: [f64; 4],
}

fn column_mae(g: &Graph, pred: Var, target: Var) -> [f64; 2] {
    let (p, t) = (g.value(pred), g.value(target));
    let n = p.rows().max(1) as f64;
    let mut out = [0.0; 2];
    for (pr, tr) in p.data.chunks(4).zip(t.data.chunks(4)) {
        out[0] += (pr[0] - tr[0]).abs();
        out[1] += (1..4).map(|j| (pr[j] - tr[j]).abs()).sum::<f64>() / 3.0;
    }
    [out[0] / n, out[1] / n]
}

/// Forward pass and loss. Solution-mesh mode scores anchors; cad-input mode
/// scores queries only and never reads the anchor targets.
pub fn step_loss(model: &Model, g: &mut Graph, vars: &[Var], s: &StepSample, t: &TargetVars, mode: TrainMode) -> Result<StepLoss> {
    let ctx = model.encode(g, vars, &s.surface_anchors, &s.volume_anchors, s.alpha)?;
    let (ps, pv, ts, tv) = match mode {
        TrainMode::SolutionMesh => (ctx.surface, ctx.volume, t.surface_anchors, t.volume_anchors),
        TrainMode::CadInput => {
            let qs = model.decode(g, vars, &ctx, Branch::Surface, &s.surface_queries)?;
            let qv = model.decode(g, vars, &ctx, Branch::Volume, &s.volume_queries)?;
            (qs, qv, t.surface_queries, t.volume_queries)
        }
    };
    let ls = g.mae_loss(ps, ts, &COLUMN_WEIGHTS)?;
    let lv = g.mae_loss(pv, tv, &COLUMN_WEIGHTS)?;
    let loss = g.add(ls, lv)?;
    let [a, b] = column_mae(g, ps, ts);
    let [c, d] = column_mae(g, pv, tv);
    Ok(StepLoss { loss, per_variable: [a, b, c, d] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Number of updates applied after this step.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub case_id: u64,
    pub per_variable: [f64; 4],
}

/// Training state: live weights, EMA weights, Lion momenta and step count.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub ema: ParamSet,
    pub opt: OptimizerState,
    pub step: u64,
    pub cfg: TrainConfig,
    pub stats: NormStats,
    cases: Vec<PreparedCase>,
}

impl Trainer {
    /// Fresh run: EMA starts at the initial weights.
    pub fn new(model: Model, cfg: TrainConfig, train_cases: Vec<CaseRecord>, stats: NormStats) -> Result<Self> {
        cfg.validate()?;
        let ema = model.params.clone();
        let opt = OptimizerState::new(&model.params, &cfg);
        Self::from_parts(model, ema, opt, 0, cfg, train_cases, stats)
    }

    pub fn from_parts(
        model: Model,
        ema: ParamSet,
        opt: OptimizerState,
        step: u64,
        cfg: TrainConfig,
        train_cases: Vec<CaseRecord>,
        stats: NormStats,
    ) -> Result<Self> {
        cfg.validate()?;
        if train_cases.is_empty() {
            return Err(invalid("training needs at least one case"));
        }
        if !ema.same_layout(&model.params) || !opt.m.same_layout(&model.params) {
            return Err(shape("ema or optimizer state does not match the model"));
        }
        let cases = train_cases.into_iter().map(|c| PreparedCase::new(c, &stats, &cfg)).collect::<Result<_>>()?;
        Ok(Self { model, ema, opt, step, cfg, stats, cases })
    }

    pub fn epoch_len(&self) -> u64 {
        self.cases.len() as u64
    }

    /// Case visited at update `step`: a seeded permutation per epoch.
    fn case_index(&self, step: u64) -> usize {
        let n = self.cases.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x6f72_6465_7273_6565);
        rng.set_stream(step / n as u64);
        order.shuffle(&mut rng);
        order[(step % n as u64) as usize]
    }

    /// One update. All randomness derives from `(seed, step)`, so a resumed
    /// run replays the same sequence.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.step >= self.cfg.total_updates {
            return Err(invalid("training already finished"));
        }
        let case = &self.cases[self.case_index(self.step)];
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        let sample = draw_sample(case, &self.model.config, &self.cfg, &mut rng)?;
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true)?;
        let targets = TargetVars::place(&mut g, &sample, false)?;
        let out = step_loss(&self.model, &mut g, &vars, &sample, &targets, self.cfg.mode)?;
        let loss = g.value(out.loss).data[0];
        let grads = g.backward(out.loss)?;
        let grads: Vec<Vec<f64>> =
            vars.iter().zip(self.model.params.tensors()).map(|(v, t)| grads.get_or_zeros(*v, t.len())).collect();
        let lr = lr_at(self.step + 1, &self.cfg)?;
        lion_step(self.model.params.tensors_mut(), &grads, &mut self.opt, lr)?;
        ema_update(self.ema.tensors_mut(), self.model.params.tensors(), self.cfg.ema_rate)?;
        self.step += 1;
        Ok(StepReport { step: self.step, lr, loss, case_id: case.record.id, per_variable: out.per_variable })
    }

    /// Model carrying the EMA weights.
    pub fn ema_model(&self) -> Model {
        Model::with_params(self.model.config.clone(), self.ema.clone()).expect("ema layout checked at construction")
    }
}
