//! Per-image decomposition of observed views into semantics, artifact and
//! residual terms.
//!
//! For a sampled patch `p` of view `t`:
//!
//! ```text
//! y'_p  = F(coords_t(p)) + G(p)
//! d_p   = h(y_p)
//! y^_p  = y'_p + sg(d_p)
//! L_distance = mean_p [ 1 - cos(y_p, y^_p) + |y_p - y^_p|_2 ]
//! L_residual = mean_p | sg(y_p - y'_p) - d_p |_2
//! L_sparsity = mean_p | d_p |_1
//! ```
//!
//! Phase one trains `F` and `G` on `L_distance` alone with `y^ = y'`; phase
//! two freezes `G` and trains `F` and `h` on
//! `L_distance + alpha L_residual + beta L_sparsity`.

use rand::Rng as _;

use crate::autodiff::{
    bilinear_taps, lr_schedule, Adam, AdamConfig, GridAlign, Gradients, Schedule, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::field_models::{FieldModels, HashGridConfig};
use crate::interchange::{FeatureMap, ViewSet, ViewTransform};
use crate::par::{self, ExecMode};
use crate::rng::{self, domain};
use crate::view_sampler::{coords, CoordGrid};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub total_iters: usize,
    pub pixels_per_iter: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub phase_split: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub hash: HashGridConfig,
    /// Grid on which the clean map is rendered; `None` uses the first view's grid.
    pub clean_grid: Option<(usize, usize)>,
    /// Pixels per gradient chunk. Chunks are reduced in order.
    pub chunk: usize,
    pub mode: ExecMode,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            total_iters: 20_000,
            pixels_per_iter: 2048,
            lr: 0.01,
            alpha: 0.1,
            beta: 0.02,
            phase_split: 0.5,
            seed: 0,
            adam: AdamConfig::default(),
            hash: HashGridConfig::default(),
            clean_grid: None,
            chunk: 256,
            mode: ExecMode::default(),
        }
    }
}

impl Stage1Config {
    /// Small-map profile: 2000 iterations over the reduced hash grid.
    /// The cosine term's gradient is very large while the fields are near
    /// zero at init; a short second-moment memory lets Adam forget that
    /// spike within the run instead of damping every later step.
    pub fn desk() -> Self {
        Stage1Config {
            total_iters: 2000,
            adam: AdamConfig {
                beta2: 0.95,
                ..AdamConfig::default()
            },
            hash: HashGridConfig::desk(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract("stage1_config", m));
        if !(self.phase_split > 0.0 && self.phase_split < 1.0) {
            return bad(format!("phase_split {} must lie in (0, 1)", self.phase_split));
        }
        if self.pixels_per_iter == 0 || self.total_iters == 0 || self.chunk == 0 {
            return bad("iterations, pixels per iteration and chunk must be positive".into());
        }
        if !(self.lr > 0.0) || self.alpha < 0.0 || self.beta < 0.0 {
            return bad(format!(
                "need lr > 0, alpha >= 0, beta >= 0 (got {}, {}, {})",
                self.lr, self.alpha, self.beta
            ));
        }
        self.hash.validate()
    }

    /// First iteration of phase two.
    pub fn phase_boundary(&self) -> usize {
        (self.phase_split * self.total_iters as f64).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_distance: f64,
    pub l_residual: f64,
    pub l_sparsity: f64,
    pub l_total: f64,
}

impl LossBundle {
    fn is_finite(&self) -> bool {
        [self.l_distance, self.l_residual, self.l_sparsity, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn weighted_add(&mut self, other: &LossBundle, w: f64) {
        self.l_distance += w * other.l_distance;
        self.l_residual += w * other.l_residual;
        self.l_sparsity += w * other.l_sparsity;
        self.l_total += w * other.l_total;
    }
}

/// Loss nodes on a tape; `total` is the one optimized in the given phase.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub distance: Var,
    pub residual: Var,
    pub sparsity: Var,
    pub total: Var,
}

impl LossVars {
    pub fn bundle(&self, tape: &Tape<'_>) -> LossBundle {
        LossBundle {
            l_distance: tape.value(self.distance).item(),
            l_residual: tape.value(self.residual).item(),
            l_sparsity: tape.value(self.sparsity).item(),
            l_total: tape.value(self.total).item(),
        }
    }
}

/// Sampled patches: observed features, field coordinates and artifact taps.
#[derive(Debug, Clone, Default)]
pub struct PixelBatch {
    pub channels: usize,
    pub y: Vec<f64>,
    pub coords: Vec<(f64, f64)>,
    pub taps: Vec<[(usize, f64); 4]>,
}

impl PixelBatch {
    pub fn new(channels: usize) -> Self {
        PixelBatch {
            channels,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn push(&mut self, y: &[f32], coord: (f64, f64), taps: [(usize, f64); 4]) {
        debug_assert_eq!(y.len(), self.channels);
        self.y.extend(y.iter().map(|&v| v as f64));
        self.coords.push(coord);
        self.taps.push(taps);
    }

    fn slice(&self, start: usize, end: usize) -> PixelBatch {
        let c = self.channels;
        PixelBatch {
            channels: c,
            y: self.y[start * c..end * c].to_vec(),
            coords: self.coords[start..end].to_vec(),
            taps: self.taps[start..end].to_vec(),
        }
    }
}

/// Taps reading `G` (a `k x k` grid) at patch `(i, j)` of a `grid` view.
/// Views on the native grid read `G` exactly; other grids use the
/// align-corners resize.
pub fn artifact_taps(grid: (usize, usize), k: usize, i: usize, j: usize) -> [(usize, f64); 4] {
    if grid == (k, k) {
        let p = i * k + j;
        return [(p, 1.0), (p, 0.0), (p, 0.0), (p, 0.0)];
    }
    let norm = |a: usize, n: usize| if n > 1 { a as f64 / (n - 1) as f64 } else { 0.0 };
    bilinear_taps(k, k, norm(j, grid.1), norm(i, grid.0), GridAlign::AlignCorners)
}

/// Builds the stage-one losses for `batch` on `tape`.
pub fn compute_losses(
    tape: &mut Tape<'_>,
    models: &FieldModels,
    batch: &PixelBatch,
    phase: Phase,
    alpha: f64,
    beta: f64,
) -> Result<LossVars> {
    let n = batch.len();
    let c = models.channels();
    if n == 0 {
        return Err(Error::contract("compute_losses", "empty pixel batch"));
    }
    if batch.channels != c {
        return Err(Error::contract(
            "compute_losses",
            format!("batch has {} channels, models expect {c}", batch.channels),
        ));
    }
    let y = tape.constant(Tensor::matrix(n, c, batch.y.clone())?);
    let f = models.semantics.forward(tape, &batch.coords)?;
    let (idx, w): (Vec<usize>, Vec<f64>) = batch.taps.iter().flatten().copied().unzip();
    let g_all = tape.param(models.artifact.grid);
    let g = tape.weighted_gather(g_all, idx, w, 4)?;
    let y_prime = tape.add(f, g)?;

    let delta = models.residual.forward(tape, y)?;
    let y_hat = match phase {
        Phase::One => y_prime,
        Phase::Two => {
            let d = tape.stop_gradient(delta);
            tape.add(y_prime, d)?
        }
    };

    let cos = tape.cosine_similarity_last_axis(y, y_hat)?;
    let cos_mean = tape.reduce_mean(cos);
    let diff = tape.sub(y, y_hat)?;
    let dist = tape.l2_norm_last_axis(diff);
    let dist_mean = tape.reduce_mean(dist);
    let one = tape.constant(Tensor::scalar(1.0));
    let one_minus = tape.sub(one, cos_mean)?;
    let distance = tape.add(one_minus, dist_mean)?;

    let gap = tape.sub(y, y_prime)?;
    let target = tape.stop_gradient(gap);
    let r = tape.sub(target, delta)?;
    let r = tape.l2_norm_last_axis(r);
    let residual = tape.reduce_mean(r);

    let a = tape.abs(delta);
    let a = tape.reduce_mean(a);
    let sparsity = tape.scale(a, c as f64);

    let total = match phase {
        Phase::One => distance,
        Phase::Two => {
            let ra = tape.scale(residual, alpha);
            let sb = tape.scale(sparsity, beta);
            let t = tape.add(distance, ra)?;
            tape.add(t, sb)?
        }
    };
    Ok(LossVars {
        distance,
        residual,
        sparsity,
        total,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub l_distance: f64,
    pub l_residual: f64,
    pub l_sparsity: f64,
}

pub const METRICS_HEADER: &str = "iteration,lr,l_distance,l_residual,l_sparsity";

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:.6e},{:.9},{:.9},{:.9}\n",
            r.iteration, r.lr, r.l_distance, r.l_residual, r.l_sparsity
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormStats {
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub clean: FeatureMap,
    /// `G` at its native `K x K` grid.
    pub artifact: FeatureMap,
    /// Per-patch L2 norm of `h(y)` over every observed patch.
    pub residual_norm_stats: NormStats,
    pub final_losses: LossBundle,
    pub iterations: usize,
    pub metrics: Vec<MetricsRow>,
    pub models: FieldModels,
}

struct Prepared<'a> {
    views: &'a ViewSet,
    grids: Vec<CoordGrid>,
    k: usize,
}

impl<'a> Prepared<'a> {
    fn new(views: &'a ViewSet) -> Result<Self> {
        views
            .validate()
            .map_err(|e| Error::contract("run_stage1", e.to_string()))?;
        let c = views.channels();
        if c % 4 != 0 {
            return Err(Error::contract(
                "run_stage1",
                format!("channel count {c} is not divisible by 4"),
            ));
        }
        let first = views.views[0].0.out_grid;
        if first.0 != first.1 {
            return Err(Error::contract(
                "run_stage1",
                format!("artifact grid must be square, first view is {first:?}"),
            ));
        }
        let grids = views
            .views
            .iter()
            .map(|(t, _)| coords(t, t.out_grid))
            .collect();
        Ok(Prepared {
            views,
            grids,
            k: first.0,
        })
    }

    fn sample(&self, rng: &mut rng::Rng, n: usize) -> PixelBatch {
        let mut b = PixelBatch::new(self.views.channels());
        let nv = self.views.views.len();
        for _ in 0..n {
            let v = rng.random_range(0..nv);
            let (t, map) = &self.views.views[v];
            let p = rng.random_range(0..map.n_patches());
            let (i, j) = (p / map.grid_w, p % map.grid_w);
            b.push(
                map.row(p),
                self.grids[v].coords[p],
                artifact_taps(t.out_grid, self.k, i, j),
            );
        }
        b
    }
}

/// Loss and gradient of `batch`, computed chunk by chunk and reduced in
/// chunk order so every execution mode gives the same bits.
pub fn batch_gradients(
    models: &FieldModels,
    batch: &PixelBatch,
    phase: Phase,
    cfg: &Stage1Config,
) -> Result<(LossBundle, Gradients)> {
    let n = batch.len();
    let n_chunks = n.div_ceil(cfg.chunk);
    let parts = par::map_range(cfg.mode, n_chunks, |ci| -> Result<(LossBundle, Gradients, usize)> {
        let (s, e) = (ci * cfg.chunk, ((ci + 1) * cfg.chunk).min(n));
        let sub = batch.slice(s, e);
        let mut tape = Tape::with_params(&models.store);
        let vars = compute_losses(&mut tape, models, &sub, phase, cfg.alpha, cfg.beta)?;
        let grads = tape.backward(vars.total)?;
        Ok((vars.bundle(&tape), grads, e - s))
    });
    let mut loss = LossBundle::default();
    let mut grads = Gradients::empty(models.store.len());
    for part in parts {
        let (l, mut g, m) = part?;
        let w = m as f64 / n as f64;
        loss.weighted_add(&l, w);
        g.scale(w);
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}

pub fn run_stage1(views: &ViewSet, config: &Stage1Config) -> Result<DecompositionResult> {
    run_stage1_observed(views, config, |_, _| {})
}

/// As [`run_stage1`], calling `observe(iteration, models)` after every step.
pub fn run_stage1_observed<O>(views: &ViewSet, config: &Stage1Config, mut observe: O) -> Result<DecompositionResult>
where
    O: FnMut(usize, &FieldModels),
{
    config.validate()?;
    let prep = Prepared::new(views)?;
    let mut models = FieldModels::init(views.channels(), prep.k, config.hash, config.seed)?;
    let mut adam = Adam::new(config.adam);
    let mut rng = rng::stream(config.seed, domain::STAGE1, 0);
    let boundary = config.phase_boundary();
    let theta_xi: Vec<_> = models.theta().into_iter().chain(models.xi()).collect();
    let theta_psi: Vec<_> = models.theta().into_iter().chain(models.psi()).collect();
    let mut metrics = Vec::with_capacity(config.total_iters);
    let mut last = LossBundle::default();

    for it in 0..config.total_iters {
        let phase = if it < boundary { Phase::One } else { Phase::Two };
        if it == boundary {
            adam.reset(&models.psi());
        }
        let batch = prep.sample(&mut rng, config.pixels_per_iter);
        let (loss, grads) = batch_gradients(&models, &batch, phase, config)?;
        if !loss.is_finite() || loss.l_total > DIVERGENCE_LIMIT {
            return Err(Error::Numeric(format!(
                "stage-1 loss diverged at iteration {it}: {loss:?}"
            )));
        }
        let lr = lr_schedule(Schedule::Linear, it, config.total_iters, config.lr)?;
        let ids = if phase == Phase::One { &theta_xi } else { &theta_psi };
        adam.step(&mut models.store, &grads, ids, lr)
            .map_err(|e| Error::Numeric(format!("iteration {it}: {e}")))?;
        metrics.push(MetricsRow {
            iteration: it,
            lr,
            l_distance: loss.l_distance,
            l_residual: loss.l_residual,
            l_sparsity: loss.l_sparsity,
        });
        last = loss;
        observe(it, &models);
    }

    let clean_grid = config.clean_grid.unwrap_or(views.views[0].0.out_grid);
    let clean = render_clean(&models, clean_grid)?;
    let artifact = models.artifact_lookup((prep.k, prep.k))?;
    let residual_norm_stats = residual_norms(&models, views, config.mode)?;
    Ok(DecompositionResult {
        clean,
        artifact,
        residual_norm_stats,
        final_losses: last,
        iterations: config.total_iters,
        metrics,
        models,
    })
}

/// `F` evaluated at the identity-view patch centers of `grid`.
pub fn render_clean(models: &FieldModels, grid: (usize, usize)) -> Result<FeatureMap> {
    models.field_eval(&coords(&ViewTransform::identity(grid), grid))
}

fn residual_norms(models: &FieldModels, views: &ViewSet, mode: ExecMode) -> Result<NormStats> {
    let per_view = par::map_slice(mode, &views.views, |(_, y)| -> Result<Vec<f64>> {
        let d = models.residual_forward(y)?;
        Ok((0..d.n_patches())
            .map(|p| d.row(p).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect())
    });
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for v in per_view {
        for x in v? {
            sum += x;
            max = max.max(x);
            n += 1;
        }
    }
    Ok(NormStats {
        mean: sum / n.max(1) as f64,
        max,
    })
}

/// Full reconstruction `F + G + h(y)` of one observed view.
pub fn reconstruct_view(models: &FieldModels, t: &ViewTransform, y: &FeatureMap) -> Result<FeatureMap> {
    let (f, g) = field_plus_artifact(models, t)?;
    let d = models.residual_forward(y)?;
    let data: Vec<f32> = f
        .data
        .iter()
        .zip(&g)
        .zip(&d.data)
        .map(|((a, b), c)| a + b + c)
        .collect();
    FeatureMap::new(f.grid_h, f.grid_w, f.channels, data)
}

/// `F(coords(t))` and the artifact map resampled to the view grid.
pub fn field_plus_artifact(models: &FieldModels, t: &ViewTransform) -> Result<(FeatureMap, Vec<f32>)> {
    let f = models.field_eval(&coords(t, t.out_grid))?;
    let g = models.artifact_lookup(t.out_grid)?;
    Ok((f, g.data))
}
