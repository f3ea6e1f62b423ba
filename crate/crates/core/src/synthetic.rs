//! Feature maps with a known decomposition `y = t(F*) + G* + eps + noise`.
//!
//! `F*` mixes `C/4` latent fields through a random `C x C/4` matrix; each
//! latent field is a sum of low-frequency cosine modes over the original
//! image (at most [`MAX_SEMANTIC_FREQ`] cycles). The rank limit keeps `F*`
//! within reach of a semantics head whose hidden width is `C/2`. `G*` is a mixture of
//! checkerboards and stripes on the patch-index grid with at least `K/4`
//! cycles, identical in every view. `eps = gamma * tanh(W t(F*))` couples the
//! two, and i.i.d. Gaussian noise of scale `sigma` sits on top.
//!
//! `G*` and `W` belong to the simulated backbone and are drawn from
//! `model_seed`; everything image-specific comes from `seed`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::field_models::FieldModels;
use crate::interchange::{FeatureMap, LabelMap, ViewSet, ViewTransform};
use crate::rng::{self, domain};
use crate::stage1::{reconstruct_view, DecompositionResult};
use crate::view_sampler::{resample_grid, sample_plan, SamplerParams};

pub const MAX_SEMANTIC_FREQ: i64 = 3;

/// Pixel size of one synthetic patch, used only to fill `orig_size`.
pub const SYNTH_PATCH_PX: usize = 14;

const STREAM_SEMANTICS: u64 = 0;
const STREAM_ARTIFACT: u64 = 1;
const STREAM_COUPLING: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_LABELS: u64 = 4;
const STREAM_PROTOTYPES: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub k: usize,
    pub orig_grid: (usize, usize),
    pub n_views: usize,
    /// Cosine modes per channel of `F*`.
    pub modes: usize,
    pub semantics_amp: f64,
    pub artifact_amp: f64,
    pub gamma: f64,
    pub sigma: f64,
    /// Include the identity crop as view 0.
    pub identity_first: bool,
    pub seed: u64,
    pub model_seed: u64,
    pub sampler: SamplerParams,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            channels: 32,
            k: 16,
            orig_grid: (16, 16),
            n_views: 64,
            modes: 4,
            semantics_amp: 1.0,
            artifact_amp: 1.0,
            gamma: 0.05,
            sigma: 0.01,
            identity_first: false,
            seed: 0,
            model_seed: 0,
            sampler: SamplerParams::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract("synthetic_spec", m));
        if self.channels == 0 || self.k < 4 || self.n_views == 0 {
            return bad(format!(
                "need channels >= 1, K >= 4, views >= 1 (got {}, {}, {})",
                self.channels, self.k, self.n_views
            ));
        }
        if self.orig_grid.0 == 0 || self.orig_grid.1 == 0 {
            return bad(format!("original grid {:?} is empty", self.orig_grid));
        }
        if !(self.gamma >= 0.0 && self.sigma >= 0.0) {
            return bad(format!("gamma {} and sigma {} must be >= 0", self.gamma, self.sigma));
        }
        // the artifact band starts at K/4 cycles per view; the largest
        // semantic frequency seen by a view is MAX_SEMANTIC_FREQ cycles
        if (self.k as f64 / 4.0).ceil() <= MAX_SEMANTIC_FREQ as f64 {
            return bad(format!("K = {} leaves no gap between frequency bands", self.k));
        }
        Ok(())
    }

    fn sampler(&self) -> SamplerParams {
        SamplerParams {
            n_views: self.n_views,
            out_grid: (self.k, self.k),
            seed: self.seed,
            ..self.sampler.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `F*` on the original patch grid.
    pub semantics: FeatureMap,
    /// `G*` on the `K x K` grid.
    pub artifact: FeatureMap,
    /// Coupling matrix `W`, row-major `C x C`.
    pub coupling: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Mode {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn semantic_modes(rng: &mut rng::Rng, n: usize, amp: f64) -> Vec<Mode> {
    (0..n)
        .map(|_| {
            let (fx, fy) = loop {
                let fx = rng.random_range(-MAX_SEMANTIC_FREQ..=MAX_SEMANTIC_FREQ);
                let fy = rng.random_range(0..=MAX_SEMANTIC_FREQ);
                if fx != 0 || fy != 0 {
                    break (fx, fy);
                }
            };
            let a: f64 = StandardNormal.sample(rng);
            Mode {
                fx: fx as f64,
                fy: fy as f64,
                phase: rng.random_range(0.0..2.0 * PI),
                amp: amp * a / (n as f64).sqrt(),
            }
        })
        .collect()
}

fn eval_modes(modes: &[Mode], u: f64, v: f64) -> f64 {
    modes
        .iter()
        .map(|m| m.amp * (2.0 * PI * (m.fx * u + m.fy * v) + m.phase).cos())
        .sum()
}

pub fn latent_rank(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// `F*` sampled at the original grid's patch centres.
fn semantics_map(spec: &SyntheticSpec) -> FeatureMap {
    let mut rng = rng::stream(spec.seed, domain::SYNTH, STREAM_SEMANTICS);
    let (gh, gw) = spec.orig_grid;
    let c = spec.channels;
    let r = latent_rank(c);
    let modes: Vec<Vec<Mode>> = (0..r)
        .map(|_| semantic_modes(&mut rng, spec.modes, 1.0))
        .collect();
    let mix = Normal::new(0.0, spec.semantics_amp / (r as f64).sqrt()).expect("valid normal");
    let m: Vec<f64> = (0..c * r).map(|_| mix.sample(&mut rng)).collect();
    let mut map = FeatureMap::zeros(gh, gw, c);
    for i in 0..gh {
        for j in 0..gw {
            let (u, v) = ((j as f64 + 0.5) / gw as f64, (i as f64 + 0.5) / gh as f64);
            let z: Vec<f64> = modes.iter().map(|md| eval_modes(md, u, v)).collect();
            for ch in 0..c {
                let val: f64 = (0..r).map(|k| m[ch * r + k] * z[k]).sum();
                map.patch_mut(i, j)[ch] = val as f32;
            }
        }
    }
    map
}

/// `G*`: per channel two terms, each a checkerboard or a stripe with at least
/// `K/4` cycles across the grid.
pub fn artifact_map(k: usize, channels: usize, amp: f64, model_seed: u64) -> FeatureMap {
    let mut rng = rng::stream(model_seed, domain::SYNTH, STREAM_ARTIFACT);
    let lo = k.div_ceil(4) as i64;
    let hi = (k / 2) as i64;
    let mut map = FeatureMap::zeros(k, k, channels);
    for ch in 0..channels {
        let terms: Vec<Mode> = (0..2)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let amp = amp * a / 2f64.sqrt();
                if rng.random_bool(0.3) {
                    Mode {
                        fx: hi as f64,
                        fy: hi as f64,
                        phase: 0.0,
                        amp,
                    }
                } else {
                    let major = rng.random_range(lo..=hi);
                    let minor = rng.random_range(0..=hi);
                    let (fx, fy) = if rng.random_bool(0.5) { (major, minor) } else { (minor, major) };
                    Mode {
                        fx: fx as f64,
                        fy: fy as f64,
                        phase: rng.random_range(0.0..2.0 * PI),
                        amp,
                    }
                }
            })
            .collect();
        for i in 0..k {
            for j in 0..k {
                let v = eval_modes(&terms, j as f64 / k as f64, i as f64 / k as f64);
                map.patch_mut(i, j)[ch] = v as f32;
            }
        }
    }
    map
}

fn coupling_matrix(c: usize, model_seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(model_seed, domain::SYNTH, STREAM_COUPLING);
    let n = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("valid normal");
    (0..c * c).map(|_| n.sample(&mut rng)).collect()
}

/// One observed view of `semantics` under `t`.
pub fn observe(
    semantics: &FeatureMap,
    truth: &GroundTruth,
    t: &ViewTransform,
    gamma: f64,
    sigma: f64,
    noise_rng: &mut rng::Rng,
) -> Result<FeatureMap> {
    let sem = resample_grid(semantics, t);
    if (sem.grid_h, sem.grid_w) != (truth.artifact.grid_h, truth.artifact.grid_w) {
        return Err(Error::contract(
            "synthetic_observe",
            format!("view grid {:?} differs from the artifact grid", t.out_grid),
        ));
    }
    let c = sem.channels;
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("valid normal");
    let mut out = FeatureMap::zeros(sem.grid_h, sem.grid_w, c);
    for p in 0..sem.n_patches() {
        let s = sem.row(p);
        let g = truth.artifact.row(p);
        for ch in 0..c {
            let wy: f64 = (0..c)
                .map(|k| truth.coupling[ch * c + k] * s[k] as f64)
                .sum();
            let eps = gamma * wy.tanh();
            let n = if sigma > 0.0 { noise.sample(noise_rng) } else { 0.0 };
            out.data[p * c + ch] = (s[ch] as f64 + g[ch] as f64 + eps + n) as f32;
        }
    }
    Ok(out)
}

fn build(spec: &SyntheticSpec, semantics: FeatureMap, image_id: String) -> Result<(ViewSet, GroundTruth)> {
    let truth = GroundTruth {
        semantics,
        artifact: artifact_map(spec.k, spec.channels, spec.artifact_amp, spec.model_seed),
        coupling: coupling_matrix(spec.channels, spec.model_seed),
    };
    let mut transforms = sample_plan(&spec.sampler())?;
    if spec.identity_first {
        transforms[0] = ViewTransform::identity((spec.k, spec.k));
    }
    let mut noise_rng = rng::stream(spec.seed, domain::SYNTH, STREAM_NOISE);
    let mut views = Vec::with_capacity(transforms.len());
    for t in transforms {
        let y = observe(&truth.semantics, &truth, &t, spec.gamma, spec.sigma, &mut noise_rng)?;
        views.push((t, y));
    }
    let (gh, gw) = spec.orig_grid;
    let vs = ViewSet {
        image_id,
        orig_size: ((gh * SYNTH_PATCH_PX) as u32, (gw * SYNTH_PATCH_PX) as u32),
        views,
    };
    Ok((vs, truth))
}

pub fn generate(spec: &SyntheticSpec) -> Result<(ViewSet, GroundTruth)> {
    spec.validate()?;
    build(spec, semantics_map(spec), format!("synth-{}", spec.seed))
}

/// A scene of `n_classes` regions with per-class prototype features.
///
/// Regions come from the argmax of smooth random fields. `F*` is the region's
/// prototype (shared across images through `model_seed`) plus a weaker smooth
/// image-specific variation.
pub fn generate_labeled(spec: &SyntheticSpec, n_classes: usize) -> Result<(ViewSet, GroundTruth, LabelMap)> {
    spec.validate()?;
    if n_classes < 2 || n_classes > u16::MAX as usize - 1 {
        return Err(Error::contract("generate_labeled", format!("{n_classes} classes")));
    }
    let (gh, gw) = spec.orig_grid;
    let c = spec.channels;
    let mut prng = rng::stream(spec.model_seed, domain::SYNTH, STREAM_PROTOTYPES);
    let protos: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            (0..c)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut prng);
                    spec.semantics_amp * z
                })
                .collect()
        })
        .collect();
    let mut rng = rng::stream(spec.seed, domain::SYNTH, STREAM_LABELS);
    let fields: Vec<Vec<Mode>> = (0..n_classes)
        .map(|_| semantic_modes(&mut rng, 3, 1.0))
        .collect();
    let variation: Vec<Vec<Mode>> = (0..c)
        .map(|_| semantic_modes(&mut rng, spec.modes, 0.3 * spec.semantics_amp))
        .collect();
    let mut labels = Vec::with_capacity(gh * gw);
    let mut sem = FeatureMap::zeros(gh, gw, c);
    for i in 0..gh {
        for j in 0..gw {
            let (u, v) = ((j as f64 + 0.5) / gw as f64, (i as f64 + 0.5) / gh as f64);
            let cls = (0..n_classes)
                .map(|k| (k, eval_modes(&fields[k], u, v)))
                .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best })
                .0;
            labels.push(cls as u16);
            for ch in 0..c {
                sem.patch_mut(i, j)[ch] = (protos[cls][ch] + eval_modes(&variation[ch], u, v)) as f32;
            }
        }
    }
    let (vs, truth) = build(spec, sem, format!("synth-labeled-{}", spec.seed))?;
    Ok((vs, truth, LabelMap::new(gh, gw, labels)?))
}

/// Identity-view observation `F* + G* + eps + noise` paired with `F*`.
pub fn identity_pair(spec: &SyntheticSpec) -> Result<(FeatureMap, FeatureMap)> {
    spec.validate()?;
    if spec.orig_grid != (spec.k, spec.k) {
        return Err(Error::contract(
            "identity_pair",
            "pairs need the original grid to equal the artifact grid",
        ));
    }
    let truth = GroundTruth {
        semantics: semantics_map(spec),
        artifact: artifact_map(spec.k, spec.channels, spec.artifact_amp, spec.model_seed),
        coupling: coupling_matrix(spec.channels, spec.model_seed),
    };
    let mut noise_rng = rng::stream(spec.seed, domain::SYNTH, STREAM_NOISE);
    let t = ViewTransform::identity((spec.k, spec.k));
    let y = observe(&truth.semantics, &truth, &t, spec.gamma, spec.sigma, &mut noise_rng)?;
    Ok((y, truth.semantics))
}

/// Cosine similarity of two maps after removing each channel's mean over
/// the grid, computed over the flattened maps. Zero when either side is
/// constant.
pub fn centered_cosine(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if (a.grid_h, a.grid_w, a.channels) != (b.grid_h, b.grid_w, b.channels) {
        return Err(Error::contract(
            "centered_cosine",
            format!(
                "shapes differ: {:?} vs {:?}",
                (a.grid_h, a.grid_w, a.channels),
                (b.grid_h, b.grid_w, b.channels)
            ),
        ));
    }
    let ca = centered(a);
    let cb = centered(b);
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let na: f64 = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = cb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

fn centered(m: &FeatureMap) -> Vec<f64> {
    let c = m.channels;
    let n = m.n_patches() as f64;
    let mut mean = vec![0.0; c];
    for p in 0..m.n_patches() {
        for (acc, &v) in mean.iter_mut().zip(m.row(p)) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    m.data
        .iter()
        .enumerate()
        .map(|(k, &v)| v as f64 - mean[k % c])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryScores {
    pub semantics: f64,
    pub artifact: f64,
    /// RMSE of `F + G + h(y)` against held-out observations.
    pub rmse: Option<f64>,
}

pub fn recovery_score(result: &DecompositionResult, truth: &GroundTruth) -> Result<RecoveryScores> {
    Ok(RecoveryScores {
        semantics: centered_cosine(&result.clean, &truth.semantics)?,
        artifact: centered_cosine(&result.artifact, &truth.artifact)?,
        rmse: None,
    })
}

/// Root-mean-square reconstruction error over every value of `held_out`.
pub fn heldout_rmse(models: &FieldModels, held_out: &ViewSet) -> Result<f64> {
    let (mut se, mut n) = (0.0, 0usize);
    for (t, y) in &held_out.views {
        let r = reconstruct_view(models, t, y)?;
        for (a, b) in r.data.iter().zip(&y.data) {
            se += (*a as f64 - *b as f64).powi(2);
            n += 1;
        }
    }
    Ok((se / n.max(1) as f64).sqrt())
}
