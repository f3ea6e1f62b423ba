//! Generalizable denoiser: learnable positional embeddings added to raw
//! features, followed by one pre-norm transformer block.
//!
//! ```text
//! z   = y + resize(pe)
//! z'  = MSA(LN1(z)) + z
//! out = MLP(LN2(z')) + z'
//! ```
//!
//! The output and second MLP projections start at zero and `pe` starts at
//! zero, so a fresh model is the identity map.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{cosine, lr_schedule, Adam, AdamConfig, Gradients, ParamId, ParamStore, Schedule, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::interchange::{Checkpoint, FeatureMap};
use crate::par::{self, ExecMode};
use crate::rng::{self, domain};
use crate::stage1::artifact_taps;

/// Standard deviation of the query/key/value and first MLP weights at init.
pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;
/// Channels per attention head when the head count is not given.
pub const HEAD_DIM: usize = 64;

pub fn default_heads(channels: usize) -> usize {
    (channels / HEAD_DIM).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// `None` means `max(1, C / 64)`.
    pub num_heads: Option<usize>,
    /// Side of the stored `pe` grid; `None` takes the first training grid.
    pub k_ref: Option<usize>,
    pub seed: u64,
    pub mode: ExecMode,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 10,
            batch: 64,
            lr: 2e-4,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            num_heads: None,
            k_ref: None,
            seed: 0,
            mode: ExecMode::default(),
        }
    }
}

impl Stage2Config {
    /// Small-dataset profile. A few hundred images give far fewer optimizer
    /// steps than a full dataset, so steps are smaller batches at a higher rate.
    pub fn desk() -> Self {
        Stage2Config {
            epochs: 30,
            batch: 8,
            lr: 3e-3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::contract("stage2_config", "batch and epochs must be positive"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::contract(
                "stage2_config",
                format!("need lr > 0 and weight_decay >= 0 (got {}, {})", self.lr, self.weight_decay),
            ));
        }
        if self.num_heads == Some(0) || self.k_ref == Some(0) {
            return Err(Error::contract("stage2_config", "num_heads and k_ref must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.w);
        let b = tape.param(self.b);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub store: ParamStore,
    pub channels: usize,
    pub k_ref: usize,
    pub num_heads: usize,
    pub pe: ParamId,
    pub ln1: Affine,
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub o: Affine,
    pub ln2: Affine,
    pub mlp0: Affine,
    pub mlp1: Affine,
}

enum Init {
    Zero,
    One,
    Normal,
}

impl DenoiserModel {
    /// Training init: `pe`, biases, `o` and `mlp.1` zero, layer-norm gains
    /// one, other weights `N(0, 0.02)`.
    pub fn init(channels: usize, k_ref: usize, num_heads: usize, seed: u64) -> Result<Self> {
        Self::build(channels, k_ref, num_heads, Some(seed))
    }

    /// Every tensor zero, layer-norm gains included.
    pub fn zeros(channels: usize, k_ref: usize, num_heads: usize) -> Result<Self> {
        Self::build(channels, k_ref, num_heads, None)
    }

    fn build(c: usize, k_ref: usize, heads: usize, seed: Option<u64>) -> Result<Self> {
        if c == 0 || k_ref == 0 || heads == 0 || c % heads != 0 {
            return Err(Error::contract(
                "denoiser_init",
                format!("channels {c} must be a positive multiple of num_heads {heads}; k_ref {k_ref} > 0"),
            ));
        }
        let mut store = ParamStore::new();
        let add = |store: &mut ParamStore, name: &str, shape: Vec<usize>, init: Init| {
            let n: usize = shape.iter().product();
            let data = match (init, seed) {
                (_, None) | (Init::Zero, _) => vec![0.0; n],
                (Init::One, _) => vec![1.0; n],
                (Init::Normal, Some(s)) => {
                    let mut r = rng::stream(s, domain::STAGE2, store.len() as u64);
                    let d = Normal::new(0.0, INIT_STD).expect("valid std");
                    (0..n).map(|_| d.sample(&mut r)).collect()
                }
            };
            store.add(format!("D.{name}"), Tensor::new(shape, data).expect("shape"))
        };
        let affine = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, w: Init| Affine {
            w: add(store, &format!("{name}.w"), vec![fan_in, fan_out], w),
            b: add(store, &format!("{name}.b"), vec![fan_out], Init::Zero),
        };
        let pe = add(&mut store, "pe", vec![k_ref, k_ref, c], Init::Zero);
        let ln1 = Affine {
            w: add(&mut store, "ln1.g", vec![c], Init::One),
            b: add(&mut store, "ln1.b", vec![c], Init::Zero),
        };
        let q = affine(&mut store, "msa.q", c, c, Init::Normal);
        let k = affine(&mut store, "msa.k", c, c, Init::Normal);
        let v = affine(&mut store, "msa.v", c, c, Init::Normal);
        let o = affine(&mut store, "msa.o", c, c, Init::Zero);
        let ln2 = Affine {
            w: add(&mut store, "ln2.g", vec![c], Init::One),
            b: add(&mut store, "ln2.b", vec![c], Init::Zero),
        };
        let mlp0 = affine(&mut store, "mlp.0", c, MLP_RATIO * c, Init::Normal);
        let mlp1 = affine(&mut store, "mlp.1", MLP_RATIO * c, c, Init::Zero);
        Ok(DenoiserModel {
            store,
            channels: c,
            k_ref,
            num_heads: heads,
            pe,
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            mlp0,
            mlp1,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Parameters of the transformer block alone, without `pe`.
    pub fn block_param_count(&self) -> usize {
        self.param_count() - self.store.get(self.pe).numel()
    }

    /// Checkpoint with the head count stored as `D.heads`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.store.to_checkpoint();
        ck.push("D.heads", vec![1], vec![self.num_heads as f32]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pe = ck
            .get("D.pe")
            .ok_or_else(|| Error::Validation("checkpoint lacks tensor D.pe".into()))?;
        if pe.shape.len() != 3 || pe.shape[0] != pe.shape[1] {
            return Err(Error::Validation(format!("D.pe has shape {:?}, expected (K, K, C)", pe.shape)));
        }
        let (k_ref, c) = (pe.shape[0], pe.shape[2]);
        let heads = match ck.get("D.heads") {
            Some(t) if t.data.len() == 1 && t.data[0] >= 1.0 && t.data[0].fract() == 0.0 => t.data[0] as usize,
            Some(t) => return Err(Error::Validation(format!("D.heads holds {:?}", t.data))),
            None => default_heads(c),
        };
        let mut model = Self::zeros(c, k_ref, heads).map_err(|e| Error::Validation(e.to_string()))?;
        model.store.load_checkpoint(ck)?;
        model.store.check_finite()?;
        Ok(model)
    }
}

/// Nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub out: Var,
    /// Row-stochastic attention matrix of each head, `(N, N)`.
    pub attention: Vec<Var>,
}

/// `pe` resampled to `grid`: exact on the reference grid, align-corners
/// bilinear otherwise.
fn pe_on_grid(tape: &mut Tape<'_>, model: &DenoiserModel, grid: (usize, usize)) -> Result<Var> {
    let pe = tape.param(model.pe);
    if grid == (model.k_ref, model.k_ref) {
        return Ok(pe);
    }
    let mut idx = Vec::with_capacity(grid.0 * grid.1 * 4);
    let mut w = Vec::with_capacity(grid.0 * grid.1 * 4);
    for i in 0..grid.0 {
        for j in 0..grid.1 {
            for (r, wt) in artifact_taps(grid, model.k_ref, i, j) {
                idx.push(r);
                w.push(wt);
            }
        }
    }
    tape.weighted_gather(pe, idx, w, 4)
}

/// Builds the forward pass on `tape` for `y` given as an `(N, C)` node on a
/// `grid`, patches in row-major order.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    model: &DenoiserModel,
    y: Var,
    grid: (usize, usize),
) -> Result<ForwardVars> {
    let t = tape.value(y);
    let c = model.channels;
    if t.cols() != c || t.rows() != grid.0 * grid.1 {
        return Err(Error::contract(
            "denoiser_forward",
            format!("input {:?} does not match grid {grid:?} with {c} channels", t.shape()),
        ));
    }
    let pe = pe_on_grid(tape, model, grid)?;
    let z = tape.add(y, pe)?;

    let h = model.ln1.layer_norm(tape, z)?;
    let q = model.q.forward(tape, h)?;
    let k = model.k.forward(tape, h)?;
    let v = model.v.forward(tape, h)?;
    let dh = c / model.num_heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(model.num_heads);
    let mut attention = Vec::with_capacity(model.num_heads);
    for hd in 0..model.num_heads {
        let qh = tape.slice_last_axis(q, hd * dh, dh)?;
        let kh = tape.slice_last_axis(k, hd * dh, dh)?;
        let vh = tape.slice_last_axis(v, hd * dh, dh)?;
        let kt = tape.transpose(kh);
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, inv);
        let a = tape.softmax(s);
        attention.push(a);
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_last_axis(&heads)? };
    let msa = model.o.forward(tape, cat)?;
    let z1 = tape.add(msa, z)?;

    let h2 = model.ln2.layer_norm(tape, z1)?;
    let m = model.mlp0.forward(tape, h2)?;
    let m = tape.relu(m);
    let m = model.mlp1.forward(tape, m)?;
    let out = tape.add(m, z1)?;
    Ok(ForwardVars { out, attention })
}

fn input(y: &FeatureMap) -> Result<Tensor> {
    Tensor::matrix(y.n_patches(), y.channels, y.to_f64())
}

pub fn denoiser_forward(model: &DenoiserModel, y: &FeatureMap) -> Result<FeatureMap> {
    if y.channels != model.channels {
        return Err(Error::contract(
            "denoiser_forward",
            format!("input has {} channels, model expects {}", y.channels, model.channels),
        ));
    }
    let mut tape = Tape::with_params(&model.store);
    let yv = tape.constant(input(y)?);
    let f = forward_on_tape(&mut tape, model, yv, (y.grid_h, y.grid_w))?;
    Ok(FeatureMap::from_f64(y.grid_h, y.grid_w, y.channels, tape.value(f.out).data()))
}

/// Inference on a frozen model.
pub fn apply_denoiser(model: &DenoiserModel, y: &FeatureMap) -> Result<FeatureMap> {
    denoiser_forward(model, y)
}

/// Mean over patches of `1 - cos(pred, target) + |pred - target|_2`.
pub fn pair_loss(tape: &mut Tape<'_>, model: &DenoiserModel, y: &FeatureMap, target: &FeatureMap) -> Result<Var> {
    if (y.grid_h, y.grid_w, y.channels) != (target.grid_h, target.grid_w, target.channels) {
        return Err(Error::contract(
            "train_denoiser",
            format!(
                "pair shapes differ: {}x{}x{} vs {}x{}x{}",
                y.grid_h, y.grid_w, y.channels, target.grid_h, target.grid_w, target.channels
            ),
        ));
    }
    let yv = tape.constant(input(y)?);
    let tv = tape.constant(input(target)?);
    let pred = forward_on_tape(tape, model, yv, (y.grid_h, y.grid_w))?.out;
    let cos = tape.cosine_similarity_last_axis(pred, tv)?;
    let diff = tape.sub(pred, tv)?;
    let norm = tape.l2_norm_last_axis(diff);
    let per = tape.sub(norm, cos)?;
    let mean = tape.reduce_mean(per);
    let one = tape.constant(Tensor::scalar(1.0));
    tape.add(mean, one)
}

/// Mean per-patch cosine similarity between two maps of equal shape.
pub fn mean_patch_cosine(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if (a.grid_h, a.grid_w, a.channels) != (b.grid_h, b.grid_w, b.channels) || a.n_patches() == 0 {
        return Err(Error::contract("mean_patch_cosine", "maps must share a nonempty shape"));
    }
    let (da, db) = (a.to_f64(), b.to_f64());
    let c = a.channels;
    let total: f64 = (0..a.n_patches())
        .map(|p| cosine(&da[p * c..(p + 1) * c], &db[p * c..(p + 1) * c]).0)
        .sum();
    Ok(total / a.n_patches() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: DenoiserModel,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains on `(y, clean)` pairs with AdamW and a per-step schedule. Image
/// gradients inside a batch are computed independently and summed in batch
/// order.
pub fn train_denoiser(pairs: &[(FeatureMap, FeatureMap)], config: &Stage2Config) -> Result<TrainedDenoiser> {
    config.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::contract("train_denoiser", "no training pairs"))?;
    let c = first.0.channels;
    if let Some(i) = pairs.iter().position(|(y, t)| y.channels != c || t.channels != c) {
        return Err(Error::contract(
            "train_denoiser",
            format!("pair {i} does not have {c} channels"),
        ));
    }
    let k_ref = match config.k_ref {
        Some(k) => k,
        None if first.0.grid_h == first.0.grid_w => first.0.grid_h,
        None => {
            return Err(Error::contract(
                "train_denoiser",
                "first grid is not square; set k_ref explicitly",
            ))
        }
    };
    let heads = config.num_heads.unwrap_or_else(|| default_heads(c));
    let mut model = DenoiserModel::init(c, k_ref, heads, config.seed)?;
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut adam = Adam::new(AdamConfig::adamw(config.weight_decay));
    let steps_per_epoch = pairs.len().div_ceil(config.batch);
    let total = config.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut r = rng::stream(config.seed, domain::STAGE2, (1u64 << 32) + epoch as u64);
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(config.batch).enumerate() {
            let parts = par::map_slice(config.mode, batch, |&i| -> Result<(f64, Gradients)> {
                let mut tape = Tape::with_params(&model.store);
                let loss = pair_loss(&mut tape, &model, &pairs[i].0, &pairs[i].1)?;
                Ok((tape.value(loss).item(), tape.backward(loss)?))
            });
            let w = 1.0 / batch.len() as f64;
            let mut grads = Gradients::empty(model.store.len());
            let mut loss = 0.0;
            for part in parts {
                let (l, mut g) = part?;
                loss += w * l;
                g.scale(w);
                grads.accumulate(&g);
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite stage-2 loss at epoch {epoch}, step {bi}"
                )));
            }
            let lr = lr_schedule(config.schedule, step, total, config.lr)?;
            adam.step(&mut model.store, &grads, &ids, lr)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {bi}: {e}")))?;
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        epoch_losses.push(epoch_loss / pairs.len() as f64);
    }
    Ok(TrainedDenoiser { model, epoch_losses })
}

/// Parameter count of a plain ViT with `layers` pre-norm blocks of width `c`,
/// MLP ratio 4, a class token, learned positions over `grid * grid + 1`
/// tokens, a `patch x patch` RGB patch embedding and a final layer norm.
pub fn reference_vit_param_count(c: usize, layers: usize, patch: usize, grid: usize) -> usize {
    let block = 4 * c + (3 * c * c + 3 * c) + (c * c + c) + (4 * c * c + 4 * c) + (4 * c * c + c);
    let embed = 3 * patch * patch * c + c;
    embed + c + (grid * grid + 1) * c + layers * block + 2 * c
}
