//! Learnable stage-one components.
//!
//! * [`SemanticsField`]: multi-resolution hash-grid encoding followed by a
//!   `Linear-ReLU-Linear` head with hidden width `C/2`.
//! * [`ArtifactField`]: one learnable `K x K x C` map shared by every view.
//! * [`ResidualPredictor`]: per-patch MLP `C -> C/4 -> C/4 -> C`.
//!
//! Linear weights are stored `(in, out)` so a layer computes `x W + b`.

use rand::Rng as _;

use crate::autodiff::{GridAlign, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::interchange::{Checkpoint, FeatureMap};
use crate::rng::{self, domain};
use crate::view_sampler::CoordGrid;

/// Multiplier applied to the y vertex index by the spatial hash.
pub const HASH_PRIME_Y: u64 = 2_654_435_761;
pub const TABLE_INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_res: usize,
    pub max_res: usize,
    pub channels_per_level: usize,
    pub max_entries_per_level: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            base_res: 16,
            max_res: 1024,
            channels_per_level: 8,
            max_entries_per_level: 1 << 20,
        }
    }
}

impl HashGridConfig {
    /// Scaled-down grid for small synthetic maps: same level count and width,
    /// resolutions 2..64 and at most 2^12 entries per level.
    pub fn desk() -> Self {
        HashGridConfig {
            levels: 16,
            base_res: 2,
            max_res: 64,
            channels_per_level: 8,
            max_entries_per_level: 1 << 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract("hash_grid_config", m));
        if self.levels < 2 {
            return bad(format!("need at least 2 levels, got {}", self.levels));
        }
        if self.base_res == 0 || self.base_res > self.max_res {
            return bad(format!(
                "resolutions must satisfy 0 < base ({}) <= max ({})",
                self.base_res, self.max_res
            ));
        }
        if !self.max_entries_per_level.is_power_of_two() {
            return bad(format!(
                "max entries {} is not a power of two",
                self.max_entries_per_level
            ));
        }
        if self.channels_per_level == 0 {
            return bad("channels per level must be positive".into());
        }
        Ok(())
    }

    pub fn encoding_width(&self) -> usize {
        self.levels * self.channels_per_level
    }

    pub fn table_rows(&self, res: usize) -> usize {
        ((res + 1) * (res + 1)).min(self.max_entries_per_level)
    }
}

/// `floor(base * b^l)` with `b = exp(ln(max/base) / (levels - 1))`.
pub fn level_resolutions(cfg: &HashGridConfig) -> Vec<usize> {
    let ln_ratio = (cfg.max_res as f64 / cfg.base_res as f64).ln();
    (0..cfg.levels)
        .map(|l| {
            let r = cfg.base_res as f64 * (l as f64 * ln_ratio / (cfg.levels - 1) as f64).exp();
            // guard against exp/ln round-off landing just below an integer
            (r + 1e-9 * r.max(1.0)).floor() as usize
        })
        .collect()
}

/// Table row of vertex `(ix, iy)` on a level of resolution `res`.
pub fn hash_index(res: usize, ix: usize, iy: usize, max_entries: usize) -> Result<usize> {
    if ix > res || iy > res {
        return Err(Error::contract(
            "hash_index",
            format!("vertex ({ix}, {iy}) outside level resolution {res}"),
        ));
    }
    let side = res + 1;
    if side * side <= max_entries {
        Ok(iy * side + ix)
    } else {
        let h = (ix as u64) ^ (iy as u64).wrapping_mul(HASH_PRIME_Y);
        Ok((h % max_entries as u64) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn create(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Self {
        let stream = store.len() as u64;
        let mut rng = rng::stream(seed, domain::INIT, stream);
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w = store.add(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).expect("shape"));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct SemanticsField {
    pub config: HashGridConfig,
    pub resolutions: Vec<usize>,
    pub tables: Vec<ParamId>,
    pub head: [Linear; 2],
    pub channels: usize,
}

impl SemanticsField {
    /// Hash-grid encoding of normalized coordinates, shape `(n, levels * cpl)`.
    pub fn encode(&self, tape: &mut Tape<'_>, coords: &[(f64, f64)]) -> Result<Var> {
        if let Some(&(u, v)) = coords
            .iter()
            .find(|(u, v)| !(0.0..=1.0).contains(u) || !(0.0..=1.0).contains(v))
        {
            return Err(Error::contract(
                "field_eval",
                format!("coordinate ({u}, {v}) outside the unit square"),
            ));
        }
        let mut parts = Vec::with_capacity(self.tables.len());
        for (&res, &table) in self.resolutions.iter().zip(&self.tables) {
            let mut idx = Vec::with_capacity(coords.len() * 4);
            let mut wts = Vec::with_capacity(coords.len() * 4);
            for &(u, v) in coords {
                let (x, y) = (u * res as f64, v * res as f64);
                let ix = (x.floor() as usize).min(res - 1);
                let iy = (y.floor() as usize).min(res - 1);
                let (fx, fy) = (x - ix as f64, y - iy as f64);
                for (dx, dy, w) in [
                    (0, 0, (1.0 - fx) * (1.0 - fy)),
                    (1, 0, fx * (1.0 - fy)),
                    (0, 1, (1.0 - fx) * fy),
                    (1, 1, fx * fy),
                ] {
                    idx.push(hash_index(res, ix + dx, iy + dy, self.config.max_entries_per_level)?);
                    wts.push(w);
                }
            }
            let t = tape.param(table);
            parts.push(tape.weighted_gather(t, idx, wts, 4)?);
        }
        tape.concat_last_axis(&parts)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, coords: &[(f64, f64)]) -> Result<Var> {
        let enc = self.encode(tape, coords)?;
        let h = self.head[0].forward(tape, enc)?;
        let h = tape.relu(h);
        self.head[1].forward(tape, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.tables.clone();
        p.extend(self.head.iter().flat_map(|l| l.params()));
        p
    }
}

/// Learnable `K x K x C` artifact map, stored as `(K*K, C)` rows.
#[derive(Debug, Clone, Copy)]
pub struct ArtifactField {
    pub grid: ParamId,
    pub k: usize,
    pub channels: usize,
}

impl ArtifactField {
    /// Artifact rows for flat patch indices of a native `K x K` view.
    pub fn rows(&self, tape: &mut Tape<'_>, patches: &[usize]) -> Result<Var> {
        let g = tape.param(self.grid);
        tape.gather_rows(g, patches)
    }

    /// Map at `out_grid`, flattened row-major to `(gh*gw, C)`. Native size is
    /// an exact copy; other sizes are bilinear with aligned corners.
    pub fn lookup(&self, tape: &mut Tape<'_>, out_grid: (usize, usize)) -> Result<Var> {
        let (gh, gw) = out_grid;
        let g = tape.param(self.grid);
        if out_grid == (self.k, self.k) {
            let all: Vec<usize> = (0..self.k * self.k).collect();
            return tape.gather_rows(g, &all);
        }
        let pts = align_corner_points(gh, gw);
        tape.bilinear_sample_2d(g, self.k, self.k, &pts, GridAlign::AlignCorners)
    }
}

/// Normalized positions `(j/(w-1), i/(h-1))` of an align-corners resize target.
pub fn align_corner_points(gh: usize, gw: usize) -> Vec<(f64, f64)> {
    let norm = |k: usize, n: usize| if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
    let mut pts = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            pts.push((norm(j, gw), norm(i, gh)));
        }
    }
    pts
}

#[derive(Debug, Clone)]
pub struct ResidualPredictor {
    pub layers: [Linear; 3],
    pub channels: usize,
}

impl ResidualPredictor {
    pub fn forward(&self, tape: &mut Tape<'_>, y: Var) -> Result<Var> {
        let c = tape.value(y).cols();
        if c != self.channels {
            return Err(Error::contract(
                "residual_forward",
                format!("input has {c} channels, predictor expects {}", self.channels),
            ));
        }
        let h = self.layers[0].forward(tape, y)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, h)?;
        let h = tape.relu(h);
        self.layers[2].forward(tape, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// All stage-one parameters in one store.
#[derive(Debug, Clone)]
pub struct FieldModels {
    pub store: ParamStore,
    pub semantics: SemanticsField,
    pub artifact: ArtifactField,
    pub residual: ResidualPredictor,
}

/// `(H - P) / S + 1`, requiring exact division.
pub fn artifact_grid_size(image_size: usize, patch: usize, stride: usize) -> Result<usize> {
    if stride == 0 || patch > image_size || (image_size - patch) % stride != 0 {
        return Err(Error::contract(
            "artifact_grid_size",
            format!("({image_size} - {patch}) / {stride} is not a whole number of patches"),
        ));
    }
    Ok((image_size - patch) / stride + 1)
}

impl FieldModels {
    pub fn init(channels: usize, k: usize, config: HashGridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::contract(
                "init_models",
                format!("channel count {channels} must be a positive multiple of 4"),
            ));
        }
        if k == 0 {
            return Err(Error::contract("init_models", "artifact grid size must be >= 1"));
        }
        let mut store = ParamStore::new();
        let resolutions = level_resolutions(&config);
        let mut tables = Vec::with_capacity(config.levels);
        for (l, &res) in resolutions.iter().enumerate() {
            let rows = config.table_rows(res);
            let mut rng = rng::stream(seed, domain::INIT, store.len() as u64);
            let data: Vec<f64> = (0..rows * config.channels_per_level)
                .map(|_| rng.random_range(-TABLE_INIT_RANGE..=TABLE_INIT_RANGE))
                .collect();
            tables.push(store.add(
                format!("F.table.{l}"),
                Tensor::matrix(rows, config.channels_per_level, data)?,
            ));
        }
        let width = config.encoding_width();
        let head = [
            Linear::create(&mut store, "F.mlp.0", width, channels / 2, seed),
            Linear::create(&mut store, "F.mlp.1", channels / 2, channels, seed),
        ];
        let grid = store.add("G", Tensor::zeros(vec![k * k, channels]));
        let q = channels / 4;
        let layers = [
            Linear::create(&mut store, "h.0", channels, q, seed),
            Linear::create(&mut store, "h.1", q, q, seed),
            Linear::create(&mut store, "h.2", q, channels, seed),
        ];
        Ok(FieldModels {
            store,
            semantics: SemanticsField {
                config,
                resolutions,
                tables,
                head,
                channels,
            },
            artifact: ArtifactField {
                grid,
                k,
                channels,
            },
            residual: ResidualPredictor { layers, channels },
        })
    }

    pub fn channels(&self) -> usize {
        self.semantics.channels
    }

    pub fn theta(&self) -> Vec<ParamId> {
        self.semantics.params()
    }

    pub fn xi(&self) -> Vec<ParamId> {
        vec![self.artifact.grid]
    }

    pub fn psi(&self) -> Vec<ParamId> {
        self.residual.params()
    }

    /// Semantics field evaluated at every coordinate of a grid.
    pub fn field_eval(&self, grid: &CoordGrid) -> Result<FeatureMap> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.semantics.forward(&mut tape, &grid.coords)?;
        Ok(FeatureMap::from_f64(
            grid.grid_h,
            grid.grid_w,
            self.channels(),
            tape.value(out).data(),
        ))
    }

    pub fn artifact_lookup(&self, out_grid: (usize, usize)) -> Result<FeatureMap> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.artifact.lookup(&mut tape, out_grid)?;
        Ok(FeatureMap::from_f64(
            out_grid.0,
            out_grid.1,
            self.channels(),
            tape.value(out).data(),
        ))
    }

    pub fn residual_forward(&self, y: &FeatureMap) -> Result<FeatureMap> {
        let mut tape = Tape::with_params(&self.store);
        let yv = tape.constant(Tensor::from_f32(vec![y.n_patches(), y.channels], &y.data)?);
        let out = self.residual.forward(&mut tape, yv)?;
        Ok(FeatureMap::from_f64(
            y.grid_h,
            y.grid_w,
            self.channels(),
            tape.value(out).data(),
        ))
    }

    /// Checkpoint with canonical names. `G` is written channel-first as
    /// `(C, K, K)`; `F.config` records the hash-grid configuration.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let cfg = self.semantics.config;
        ck.push(
            "F.config",
            vec![5],
            vec![
                cfg.levels as f32,
                cfg.base_res as f32,
                cfg.max_res as f32,
                cfg.channels_per_level as f32,
                cfg.max_entries_per_level as f32,
            ],
        );
        let (k, c) = (self.artifact.k, self.channels());
        for (id, p) in self.store.iter() {
            if id == self.artifact.grid {
                let d = p.value.data();
                let mut chw = vec![0f32; c * k * k];
                for pix in 0..k * k {
                    for ch in 0..c {
                        chw[ch * k * k + pix] = d[pix * c + ch] as f32;
                    }
                }
                ck.push("G", vec![c, k, k], chw);
            } else {
                ck.push(p.name.clone(), p.value.shape().to_vec(), p.value.to_f32());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg_t = ck.expect("F.config", &[5])?;
        let v = |i: usize| cfg_t.data[i] as usize;
        let config = HashGridConfig {
            levels: v(0),
            base_res: v(1),
            max_res: v(2),
            channels_per_level: v(3),
            max_entries_per_level: v(4),
        };
        let g = ck
            .get("G")
            .ok_or_else(|| Error::Validation("checkpoint lacks tensor G".into()))?;
        if g.shape.len() != 3 || g.shape[1] != g.shape[2] {
            return Err(Error::Validation(format!("G has shape {:?}, expected (C, K, K)", g.shape)));
        }
        let (c, k) = (g.shape[0], g.shape[1]);
        let mut models = FieldModels::init(c, k, config, 0)?;
        let gid = models.artifact.grid;
        for id in models.store.ids().collect::<Vec<_>>() {
            if id == gid {
                let dst = models.store.get_mut(id).data_mut();
                for pix in 0..k * k {
                    for ch in 0..c {
                        dst[pix * c + ch] = g.data[ch * k * k + pix] as f64;
                    }
                }
            } else {
                let name = models.store.name(id).to_string();
                let shape = models.store.get(id).shape().to_vec();
                let t = ck.expect(&name, &shape)?;
                for (d, &s) in models.store.get_mut(id).data_mut().iter_mut().zip(&t.data) {
                    *d = s as f64;
                }
            }
        }
        Ok(models)
    }
}
