//! Anchored two-branch transformer.
//!
//! Surface and volume anchors each run through `depth` pre-norm blocks.
//! Even-indexed blocks (0-based) self-attend within a branch; odd-indexed
//! blocks cross-attend to the other branch's anchors. Query tokens reuse the
//! same blocks but only ever read anchor keys/values, so anchors never see
//! queries and queries never see each other.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::fields::MAX_ALPHA_DEG;
use crate::geometry::Aabb;
use crate::math::Vec3;
use crate::tensor::{AttentionParams, Graph, Tensor, Var};

pub const SURFACE_CHANNELS: usize = 4;
pub const VOLUME_CHANNELS: usize = 4;
pub const POSITION_FREQUENCIES: usize = 16;
pub const POSITION_FEATURES: usize = 3 * 2 * POSITION_FREQUENCIES;
pub const CONDITION_FREQUENCIES: usize = 8;
pub const CONDITION_FEATURES: usize = 2 * CONDITION_FREQUENCIES;
pub const LN_EPS: f64 = 1e-6;
/// Query rows decoded per graph chunk during inference.
pub const QUERY_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_surface_anchors: usize,
    pub n_volume_anchors: usize,
    pub cond_dim: usize,
    pub share_branch_weights: bool,
    /// Angle-of-attack modulation; when false every block is a plain
    /// pre-norm residual block.
    pub conditioning: bool,
    /// Box mapped to the unit cube before position featurization.
    pub bounds: Aabb,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn reference() -> Self {
        Self {
            depth: 12,
            dim: 192,
            heads: 3,
            mlp_ratio: 4,
            n_surface_anchors: 16384,
            n_volume_anchors: 16384,
            cond_dim: 192,
            share_branch_weights: false,
            conditioning: true,
            bounds: Aabb::cube(2.0),
            init_seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            depth: 4,
            dim: 32,
            heads: 2,
            n_surface_anchors: 256,
            n_volume_anchors: 256,
            cond_dim: 32,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return cfg(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return cfg(format!("depth {} must be even and positive", self.depth));
        }
        if self.mlp_ratio == 0 || self.cond_dim == 0 {
            return cfg("mlp_ratio and cond_dim must be positive".into());
        }
        if self.n_surface_anchors == 0 || self.n_volume_anchors == 0 {
            return cfg("anchor counts must be positive".into());
        }
        let e = self.bounds.extent();
        if !e.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return cfg("bounds must have positive finite extent".into());
        }
        Ok(())
    }
}

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(t);
        i
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::default();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            out.push(n.clone(), Tensor::zeros(&t.shape));
        }
        out
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Surface = 0,
    Volume = 1,
}

impl Branch {
    pub fn channels(self) -> usize {
        match self {
            Branch::Surface => SURFACE_CHANNELS,
            Branch::Volume => VOLUME_CHANNELS,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Branch::Surface => "surface",
            Branch::Volume => "volume",
        }
    }
}

#[derive(Debug, Clone)]
struct BlockIdx {
    norm1: Option<(usize, usize)>,
    norm2: Option<(usize, usize)>,
    modulation: Option<(usize, usize)>,
    attn: [usize; 8],
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct BranchIdx {
    embed: (usize, usize),
    blocks: Vec<BlockIdx>,
    final_norm: (usize, usize),
    head: (usize, usize),
}

#[derive(Debug, Clone)]
struct Layout {
    cond: Option<[usize; 4]>,
    branches: [BranchIdx; 2],
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl Init {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::randn(&[fan_in, fan_out], std, &mut self.rng);
        self.params.push(name, t)
    }

    fn fill(&mut self, name: String, n: usize, v: f64) -> usize {
        self.params.push(name, Tensor::row(vec![v; n]))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (self.xavier(format!("{name}.w"), fan_in, fan_out), self.fill(format!("{name}.b"), fan_out, 0.0))
    }

    fn norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        (self.fill(format!("{name}.gamma"), d, 1.0), self.fill(format!("{name}.beta"), d, 0.0))
    }

    fn block(&mut self, name: &str, cfg: &ModelConfig) -> BlockIdx {
        let d = cfg.dim;
        let (norm1, norm2, modulation) = if cfg.conditioning {
            let w = self.xavier(format!("{name}.modulation.w"), cfg.cond_dim, 6 * d);
            // Gate columns are [2d, 3d) and [5d, 6d); zero so the block starts as identity.
            let t = &mut self.params.tensors[w];
            for row in t.data.chunks_mut(6 * d) {
                row[2 * d..3 * d].fill(0.0);
                row[5 * d..6 * d].fill(0.0);
            }
            let b = self.fill(format!("{name}.modulation.b"), 6 * d, 0.0);
            (None, None, Some((w, b)))
        } else {
            (Some(self.norm(&format!("{name}.norm1"), d)), Some(self.norm(&format!("{name}.norm2"), d)), None)
        };
        let mut attn = [0; 8];
        for (j, p) in ["q", "k", "v", "o"].iter().enumerate() {
            let (w, b) = self.linear(&format!("{name}.attn.{p}"), d, d);
            attn[2 * j] = w;
            attn[2 * j + 1] = b;
        }
        let hidden = d * cfg.mlp_ratio;
        let fc1 = self.linear(&format!("{name}.mlp.fc1"), d, hidden);
        let fc2 = self.linear(&format!("{name}.mlp.fc2"), hidden, d);
        BlockIdx { norm1, norm2, modulation, attn, fc1, fc2 }
    }
}

/// Per-block adaptive modulation rows, `scale` already offset by one.
#[derive(Debug, Clone, Copy)]
struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

#[derive(Debug, Clone, Default)]
struct BranchContext {
    kv: Vec<(Var, Var)>,
    mods: Vec<Option<Modulation>>,
}

/// Anchor pass result: anchor predictions plus the per-block keys/values
/// that query decoding attends to.
#[derive(Debug, Clone)]
pub struct AnchorContext {
    pub surface: Var,
    pub volume: Var,
    branches: [BranchContext; 2],
}

/// Point sets of one forward pass; `alpha` in radians.
#[derive(Debug, Clone, Default)]
pub struct TokenBatch {
    pub surface_anchors: Vec<Vec3>,
    pub volume_anchors: Vec<Vec3>,
    pub surface_queries: Vec<Vec3>,
    pub volume_queries: Vec<Vec3>,
    pub alpha: f64,
}

/// Standardized predictions, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub surface_anchors: Tensor,
    pub volume_anchors: Tensor,
    pub surface_queries: Tensor,
    pub volume_queries: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

/// Sinusoidal features of box-normalized positions, `[n × 96]`.
pub fn position_features(positions: &[Vec3], bounds: &Aabb) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * POSITION_FEATURES);
    for p in positions {
        let u = bounds.normalize(*p);
        for axis in u {
            for f in 0..POSITION_FREQUENCIES {
                let w = PI * 2f64.powf(5.0 * f as f64 / (POSITION_FREQUENCIES - 1) as f64);
                data.push((w * axis).sin());
                data.push((w * axis).cos());
            }
        }
    }
    Tensor { shape: vec![positions.len(), POSITION_FEATURES], data }
}

/// Sinusoidal features of the angle of attack, `[16]`.
pub fn condition_features(alpha: f64) -> Tensor {
    let a = alpha.to_degrees() / MAX_ALPHA_DEG;
    let mut data = Vec::with_capacity(CONDITION_FEATURES);
    for f in 0..CONDITION_FREQUENCIES {
        let w = 0.5 * PI * (f + 1) as f64;
        data.push((w * a).sin());
        data.push((w * a).cos());
    }
    Tensor::row(data)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.init_seed), params: ParamSet::default() };
        let cond = config.conditioning.then(|| {
            let (w1, b1) = init.linear("cond.fc1", CONDITION_FEATURES, config.cond_dim);
            let (w2, b2) = init.linear("cond.fc2", config.cond_dim, config.cond_dim);
            [w1, b1, w2, b2]
        });
        let shared: Option<Vec<BlockIdx>> = config
            .share_branch_weights
            .then(|| (0..config.depth).map(|i| init.block(&format!("shared.block{i}"), &config)).collect());
        let mut branch = |b: Branch| {
            let p = b.prefix();
            let embed = init.linear(&format!("{p}.embed"), POSITION_FEATURES, config.dim);
            let blocks = match &shared {
                Some(s) => s.clone(),
                None => (0..config.depth).map(|i| init.block(&format!("{p}.block{i}"), &config)).collect(),
            };
            let final_norm = init.norm(&format!("{p}.final_norm"), config.dim);
            let head = init.linear(&format!("{p}.head"), config.dim, b.channels());
            BranchIdx { embed, blocks, final_norm, head }
        };
        let branches = [branch(Branch::Surface), branch(Branch::Volume)];
        Ok(Self { config, params: init.params, layout: Layout { cond, branches } })
    }

    /// Model with externally supplied parameters, e.g. from a checkpoint.
    pub fn with_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut m = Self::new(config)?;
        if !m.params.same_layout(&params) {
            return Err(shape("parameter names or shapes do not match the configuration"));
        }
        m.params = params;
        Ok(m)
    }

    /// Exact number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    /// Learnable scalars inside the transformer blocks only.
    pub fn count_block_parameters(&self) -> usize {
        self.params
            .names()
            .iter()
            .zip(self.params.tensors())
            .filter(|(n, _)| n.contains(".block"))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Places every parameter on `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn attn_params(v: &[Var], b: &BlockIdx) -> AttentionParams {
        let a = b.attn;
        AttentionParams {
            wq: v[a[0]],
            bq: v[a[1]],
            wk: v[a[2]],
            bk: v[a[3]],
            wv: v[a[4]],
            bv: v[a[5]],
            wo: v[a[6]],
            bo: v[a[7]],
        }
    }

    fn modulation(&self, g: &mut Graph, v: &[Var], cond: Option<Var>, b: &BlockIdx) -> Result<Option<Modulation>> {
        let (Some(c), Some((w, bias))) = (cond, b.modulation) else { return Ok(None) };
        let d = self.config.dim;
        let m = g.linear(c, v[w], Some(v[bias]))?;
        let mut part = |i: usize| g.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1, shift2, scale2, gate2) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?, part(5)?);
        Ok(Some(Modulation {
            shift1,
            scale1: g.add_scalar(scale1, 1.0)?,
            gate1,
            shift2,
            scale2: g.add_scalar(scale2, 1.0)?,
            gate2,
        }))
    }

    fn pre_norm(g: &mut Graph, v: &[Var], h: Var, affine: Option<(usize, usize)>, m: Option<(Var, Var)>) -> Result<Var> {
        match (m, affine) {
            (Some((scale, shift)), _) => {
                let n = g.normalize(h, LN_EPS)?;
                let n = g.mul_row(n, scale)?;
                g.add_row(n, shift)
            }
            (None, Some((gamma, beta))) => g.layer_norm(h, v[gamma], v[beta], LN_EPS),
            (None, None) => g.normalize(h, LN_EPS),
        }
    }

    fn residual(g: &mut Graph, h: Var, out: Var, gate: Option<Var>) -> Result<Var> {
        let out = match gate {
            Some(gt) => g.mul_row(out, gt)?,
            None => out,
        };
        g.add(h, out)
    }

    fn norm1(g: &mut Graph, v: &[Var], h: Var, b: &BlockIdx, m: Option<Modulation>) -> Result<Var> {
        Self::pre_norm(g, v, h, b.norm1, m.map(|m| (m.scale1, m.shift1)))
    }

    fn mlp_sublayer(&self, g: &mut Graph, v: &[Var], h: Var, b: &BlockIdx, m: Option<Modulation>) -> Result<Var> {
        let n = Self::pre_norm(g, v, h, b.norm2, m.map(|m| (m.scale2, m.shift2)))?;
        let x = g.linear(n, v[b.fc1.0], Some(v[b.fc1.1]))?;
        let x = g.gelu(x)?;
        let x = g.linear(x, v[b.fc2.0], Some(v[b.fc2.1]))?;
        Self::residual(g, h, x, m.map(|m| m.gate2))
    }

    fn embed(&self, g: &mut Graph, v: &[Var], br: &BranchIdx, pos: &[Vec3]) -> Result<Var> {
        let f = g.constant(position_features(pos, &self.config.bounds))?;
        g.linear(f, v[br.embed.0], Some(v[br.embed.1]))
    }

    fn head(&self, g: &mut Graph, v: &[Var], br: &BranchIdx, h: Var) -> Result<Var> {
        let n = g.layer_norm(h, v[br.final_norm.0], v[br.final_norm.1], LN_EPS)?;
        g.linear(n, v[br.head.0], Some(v[br.head.1]))
    }

    /// Runs both anchor sets through every block.
    pub fn encode(&self, g: &mut Graph, v: &[Var], surface: &[Vec3], volume: &[Vec3], alpha: f64) -> Result<AnchorContext> {
        if surface.is_empty() || volume.is_empty() {
            return Err(invalid("both branches need at least one anchor"));
        }
        if !alpha.is_finite() {
            return Err(invalid("angle of attack must be finite"));
        }
        let cond = match self.layout.cond {
            Some([w1, b1, w2, b2]) => {
                let f = g.constant(condition_features(alpha))?;
                let c = g.linear(f, v[w1], Some(v[b1]))?;
                let c = g.gelu(c)?;
                let c = g.linear(c, v[w2], Some(v[b2]))?;
                Some(g.gelu(c)?)
            }
            None => None,
        };
        let [bs, bv] = &self.layout.branches;
        let mut h = [self.embed(g, v, bs, surface)?, self.embed(g, v, bv, volume)?];
        let mut ctx: [BranchContext; 2] = Default::default();
        for i in 0..self.config.depth {
            let blocks = [&bs.blocks[i], &bv.blocks[i]];
            let mut mods = [None; 2];
            let mut normed = [h[0]; 2];
            for s in 0..2 {
                mods[s] = self.modulation(g, v, cond, blocks[s])?;
                normed[s] = Self::norm1(g, v, h[s], blocks[s], mods[s])?;
            }
            for s in 0..2 {
                let p = Self::attn_params(v, blocks[s]);
                let src = if i % 2 == 0 { normed[s] } else { normed[1 - s] };
                let (kk, vv) = g.project_kv(src, &p)?;
                let a = g.attend(normed[s], kk, vv, &p, self.config.heads)?;
                h[s] = Self::residual(g, h[s], a, mods[s].map(|m| m.gate1))?;
                h[s] = self.mlp_sublayer(g, v, h[s], blocks[s], mods[s])?;
                ctx[s].kv.push((kk, vv));
                ctx[s].mods.push(mods[s]);
            }
        }
        Ok(AnchorContext { surface: self.head(g, v, bs, h[0])?, volume: self.head(g, v, bv, h[1])?, branches: ctx })
    }

    /// Decodes query points of one branch against an encoded anchor context.
    pub fn decode(&self, g: &mut Graph, v: &[Var], ctx: &AnchorContext, branch: Branch, pos: &[Vec3]) -> Result<Var> {
        let br = &self.layout.branches[branch as usize];
        let bc = &ctx.branches[branch as usize];
        let mut h = self.embed(g, v, br, pos)?;
        for (i, b) in br.blocks.iter().enumerate() {
            let m = bc.mods[i];
            let n = Self::norm1(g, v, h, b, m)?;
            let (kk, vv) = bc.kv[i];
            let a = g.attend(n, kk, vv, &Self::attn_params(v, b), self.config.heads)?;
            h = Self::residual(g, h, a, m.map(|m| m.gate1))?;
            h = self.mlp_sublayer(g, v, h, b, m)?;
        }
        self.head(g, v, br, h)
    }

    /// Inference forward pass. Queries are decoded in chunks of
    /// [`QUERY_CHUNK`] rows.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Prediction> {
        let mut g = Graph::no_grad();
        let v = self.bind(&mut g, false)?;
        let ctx = self.encode(&mut g, &v, &batch.surface_anchors, &batch.volume_anchors, batch.alpha)?;
        let surface_anchors = g.value(ctx.surface).clone();
        let volume_anchors = g.value(ctx.volume).clone();
        let surface_queries = self.decode_chunked(&mut g, &v, &ctx, Branch::Surface, &batch.surface_queries)?;
        let volume_queries = self.decode_chunked(&mut g, &v, &ctx, Branch::Volume, &batch.volume_queries)?;
        Ok(Prediction { surface_anchors, volume_anchors, surface_queries, volume_queries })
    }

    /// Decodes `pos` chunk by chunk, releasing each chunk's nodes afterwards.
    pub fn decode_chunked(&self, g: &mut Graph, v: &[Var], ctx: &AnchorContext, branch: Branch, pos: &[Vec3]) -> Result<Tensor> {
        let c = branch.channels();
        let mut data = Vec::with_capacity(pos.len() * c);
        for chunk in pos.chunks(QUERY_CHUNK) {
            let mark = g.len();
            let out = self.decode(g, v, ctx, branch, chunk)?;
            data.extend_from_slice(&g.value(out).data);
            g.truncate(mark);
        }
        Tensor::matrix(pos.len(), c, data)
    }
}
