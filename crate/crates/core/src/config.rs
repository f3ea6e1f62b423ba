//! Flat `key = value` run configuration.
//!
//! One line per key, `#` starts a comment, blank lines are ignored. Every key
//! has a default (the full-scale profile); unknown keys and repeated keys are
//! rejected. Later sources override earlier ones: defaults, then a config
//! file, then command-line overrides.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Schedule;
use crate::error::{Error, Result};
use crate::evaluation::{Metric, MicConfig};
use crate::par::ExecMode;
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;
use crate::synthetic::SyntheticSpec;
use crate::view_sampler::SamplerParams;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub metric: Metric,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    pub n_classes: usize,
    /// Integer upscale factor for rendered images.
    pub viz_scale: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            knn_k: 20,
            metric: Metric::Cosine,
            kmeans_k: 6,
            kmeans_iters: 100,
            n_classes: 4,
            viz_scale: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub sampler: SamplerParams,
    pub synth: SyntheticSpec,
    pub mic: MicConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            sampler: SamplerParams::default(),
            synth: SyntheticSpec::default(),
            mic: MicConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

/// Zero stands for "derive from the data".
fn parse_auto(v: &str) -> std::result::Result<Option<usize>, String> {
    Ok(match parse::<usize>(v)? {
        0 => None,
        n => Some(n),
    })
}

fn show_auto(v: Option<usize>) -> String {
    v.unwrap_or(0).to_string()
}

fn parse_log2(v: &str) -> std::result::Result<usize, String> {
    let e: u32 = parse(v)?;
    if e >= usize::BITS - 1 {
        return Err(format!("2^{e} entries is too large"));
    }
    Ok(1usize << e)
}

struct Key {
    name: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! key {
    ($name:literal, $doc:literal, |$c:ident| $field:expr) => {
        Key {
            name: $name,
            doc: $doc,
            get: |$c| $field.to_string(),
            set: |$c, v| {
                $field = parse(v)?;
                Ok(())
            },
        }
    };
    ($name:literal, $doc:literal, |$c:ident| $field:expr, $p:expr, $show:expr) => {
        Key {
            name: $name,
            doc: $doc,
            get: |$c| $show(&$field),
            set: |$c, v| {
                $field = $p(v)?;
                Ok(())
            },
        }
    };
}

const KEYS: &[Key] = &[
    key!("stage1.total_iters", "optimizer steps per image", |c| c.stage1.total_iters),
    key!("stage1.pixels_per_iter", "patches sampled per step", |c| c.stage1.pixels_per_iter),
    key!("stage1.lr", "Adam learning rate, decayed linearly", |c| c.stage1.lr),
    key!("stage1.alpha", "weight of the residual term in phase two", |c| c.stage1.alpha),
    key!("stage1.beta", "weight of the sparsity term in phase two", |c| c.stage1.beta),
    key!("stage1.phase_split", "fraction of steps in phase one", |c| c.stage1.phase_split),
    key!("stage1.adam_beta1", "Adam first-moment decay", |c| c.stage1.adam.beta1),
    key!("stage1.adam_beta2", "Adam second-moment decay", |c| c.stage1.adam.beta2),
    key!("stage1.adam_eps", "Adam denominator epsilon", |c| c.stage1.adam.eps),
    key!("stage1.chunk", "patches per gradient chunk", |c| c.stage1.chunk),
    key!("hash.levels", "hash-grid levels", |c| c.stage1.hash.levels),
    key!("hash.base_res", "coarsest grid resolution", |c| c.stage1.hash.base_res),
    key!("hash.max_res", "finest grid resolution", |c| c.stage1.hash.max_res),
    key!("hash.channels_per_level", "features per level", |c| c.stage1.hash.channels_per_level),
    key!(
        "hash.log2_entries",
        "log2 of the table size per level",
        |c| c.stage1.hash.max_entries_per_level,
        parse_log2,
        |v: &usize| v.trailing_zeros().to_string()
    ),
    key!("stage2.epochs", "denoiser training epochs", |c| c.stage2.epochs),
    key!("stage2.batch", "images per denoiser step", |c| c.stage2.batch),
    key!("stage2.lr", "AdamW peak learning rate", |c| c.stage2.lr),
    key!("stage2.weight_decay", "AdamW decoupled weight decay", |c| c.stage2.weight_decay),
    key!(
        "stage2.schedule",
        "cosine or linear",
        |c| c.stage2.schedule,
        |v: &str| match v {
            "cosine" => Ok(Schedule::Cosine),
            "linear" => Ok(Schedule::Linear),
            _ => Err(format!("unknown schedule {v:?}")),
        },
        |s: &Schedule| match s {
            Schedule::Cosine => "cosine".to_string(),
            Schedule::Linear => "linear".to_string(),
        }
    ),
    key!("stage2.num_heads", "attention heads, 0 for C/64", |c| c.stage2.num_heads, parse_auto, |v: &Option<usize>| show_auto(*v)),
    key!("stage2.k_ref", "side of the stored embedding grid, 0 for the first training grid", |c| c.stage2.k_ref, parse_auto, |v: &Option<usize>| show_auto(*v)),
    key!("sampler.n_views", "views per image", |c| c.sampler.n_views),
    key!("sampler.flip_prob", "horizontal flip probability", |c| c.sampler.flip_prob),
    key!("sampler.area_min", "smallest crop area fraction", |c| c.sampler.area_range.0),
    key!("sampler.area_max", "largest crop area fraction", |c| c.sampler.area_range.1),
    key!("sampler.aspect_min", "smallest crop aspect ratio", |c| c.sampler.aspect_range.0),
    key!("sampler.aspect_max", "largest crop aspect ratio", |c| c.sampler.aspect_range.1),
    key!("sampler.grid_h", "patch rows of each view", |c| c.sampler.out_grid.0),
    key!("sampler.grid_w", "patch columns of each view", |c| c.sampler.out_grid.1),
    key!("synth.channels", "feature channels", |c| c.synth.channels),
    key!("synth.k", "artifact grid side", |c| c.synth.k),
    key!("synth.grid_h", "patch rows of the full image", |c| c.synth.orig_grid.0),
    key!("synth.grid_w", "patch columns of the full image", |c| c.synth.orig_grid.1),
    key!("synth.n_views", "views per synthetic image", |c| c.synth.n_views),
    key!("synth.modes", "cosine modes per latent field", |c| c.synth.modes),
    key!("synth.semantics_amp", "semantic field amplitude", |c| c.synth.semantics_amp),
    key!("synth.artifact_amp", "artifact amplitude", |c| c.synth.artifact_amp),
    key!("synth.gamma", "scale of the coupled residual", |c| c.synth.gamma),
    key!("synth.sigma", "observation noise", |c| c.synth.sigma),
    key!("synth.model_seed", "seed of the artifact and coupling shared by all images", |c| c.synth.model_seed),
    key!("synth.identity_first", "make view 0 the identity crop", |c| c.synth.identity_first, parse_bool, |v: &bool| v.to_string()),
    key!("mic.b_exponent", "grid budget exponent", |c| c.mic.b_exponent),
    key!("mic.max_grid_per_axis", "bin cap per axis", |c| c.mic.max_grid_per_axis),
    key!("eval.knn_k", "neighbours per vote", |c| c.eval.knn_k),
    key!(
        "eval.metric",
        "cosine or l2",
        |c| c.eval.metric,
        |v: &str| match v {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            _ => Err(format!("unknown metric {v:?}")),
        },
        |m: &Metric| match m {
            Metric::Cosine => "cosine".to_string(),
            Metric::L2 => "l2".to_string(),
        }
    ),
    key!("eval.kmeans_k", "clusters in cluster maps", |c| c.eval.kmeans_k),
    key!("eval.kmeans_iters", "Lloyd iteration cap", |c| c.eval.kmeans_iters),
    key!("eval.n_classes", "classes of the labeled synthetic scenes", |c| c.eval.n_classes),
    key!("eval.viz_scale", "pixel upscale of rendered images", |c| c.eval.viz_scale),
    key!(
        "parallel",
        "spread inner loops over threads",
        |c| c.stage1.mode,
        |v: &str| parse_bool(v).map(|p| if p { ExecMode::Parallel } else { ExecMode::Sequential }),
        |m: &ExecMode| (*m == ExecMode::Parallel).to_string()
    ),
];

impl RunConfig {
    /// Small synthetic maps: the reduced stage-one profile and the small
    /// dataset stage-two profile.
    pub fn desk() -> Self {
        RunConfig {
            stage1: Stage1Config::desk(),
            stage2: Stage2Config::desk(),
            sampler: SamplerParams {
                n_views: 64,
                out_grid: (16, 16),
                ..SamplerParams::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
        KEYS.iter().map(|k| (k.name, k.doc))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| Error::contract("config", format!("unknown key {key:?}")))?;
        (k.set)(self, value).map_err(|m| Error::contract("config", format!("{key}: {m}")))?;
        if key == "parallel" {
            self.stage2.mode = self.stage1.mode;
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("key {k:?} repeated"),
                });
            }
            self.set(k, v).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Sets every seed from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.sampler.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.sampler.validate()?;
        self.synth.validate()?;
        self.mic.validate()?;
        if self.eval.knn_k == 0 || self.eval.kmeans_k == 0 || self.eval.viz_scale == 0 {
            return Err(Error::contract("config", "eval.knn_k, eval.kmeans_k and eval.viz_scale must be positive"));
        }
        Ok(())
    }

    /// Every key with its current value and description, in file syntax.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "# {}\n{} = {}", k.doc, k.name, (k.get)(self));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        for base in [RunConfig::default(), RunConfig::desk()] {
            let mut c = RunConfig::default();
            c.apply_text(&base.render()).unwrap();
            assert_eq!(c, base);
        }
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("stage1.lrr = 0.1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            c.apply_text("stage1.lr = 0.1\n# note\nstage1.lr = 0.2"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(c.apply_text("stage1.lr").is_err());
        assert!(c.apply_text("stage1.lr = fast").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nstage1.total_iters = 12 # inline\nhash.log2_entries = 10\nparallel = false\n")
            .unwrap();
        assert_eq!(c.stage1.total_iters, 12);
        assert_eq!(c.stage1.hash.max_entries_per_level, 1024);
        assert_eq!(c.stage2.mode, ExecMode::Sequential);
        assert_eq!(c.get("hash.log2_entries").unwrap(), "10");
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("stage1.phase_split = 1.5").is_err());
    }
}
