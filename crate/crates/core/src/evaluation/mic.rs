//! Equipartition approximation of the maximal information coefficient.
//!
//! For every grid `a x b` with `a, b >= 2`, `a * b <= n^b_exponent` and both
//! at most the axis cap, each axis is cut into `a` (or `b`) equal-frequency
//! bins and the empirical mutual information is normalized by
//! `log2(min(a, b))`. The score is the maximum over grids.
//!
//! A value's bin is `floor(#{values strictly below it} * a / n)`, so ties
//! never straddle a cut. Each axis is binned in both ascending and
//! descending order and the best of the four pairings is kept; together
//! these make the score exactly invariant under strictly monotone maps of
//! either input.

use crate::error::{Error, Result};
use crate::interchange::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicConfig {
    pub b_exponent: f64,
    pub max_grid_per_axis: usize,
}

impl Default for MicConfig {
    fn default() -> Self {
        MicConfig {
            b_exponent: 0.6,
            max_grid_per_axis: 16,
        }
    }
}

impl MicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_exponent > 0.0 && self.b_exponent < 1.0) || self.max_grid_per_axis < 2 {
            return Err(Error::contract(
                "mic_config",
                format!(
                    "need 0 < b_exponent < 1 and axis cap >= 2, got {} and {}",
                    self.b_exponent, self.max_grid_per_axis
                ),
            ));
        }
        Ok(())
    }
}

pub const MIC_MIN_LEN: usize = 10;

/// Number of values strictly below each value, ascending and descending.
struct Ranks {
    below: Vec<usize>,
    above: Vec<usize>,
}

fn ranks(v: &[f64]) -> Ranks {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut below = vec![0; n];
    let mut above = vec![0; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && v[order[end + 1]] == v[order[start]] {
            end += 1;
        }
        for &i in &order[start..=end] {
            below[i] = start;
            above[i] = n - 1 - end;
        }
        start = end + 1;
    }
    Ranks { below, above }
}

fn bins(rank: &[usize], parts: usize) -> Vec<usize> {
    let n = rank.len();
    rank.iter().map(|&r| r * parts / n).collect()
}

fn mutual_information_bits(bx: &[usize], a: usize, by: &[usize], b: usize) -> f64 {
    let n = bx.len() as f64;
    let mut joint = vec![0usize; a * b];
    let mut mx = vec![0usize; a];
    let mut my = vec![0usize; b];
    for (&i, &j) in bx.iter().zip(by) {
        joint[i * b + j] += 1;
        mx[i] += 1;
        my[j] += 1;
    }
    let mut mi = 0.0;
    for i in 0..a {
        for j in 0..b {
            let c = joint[i * b + j];
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            mi += pij * (c as f64 * n / (mx[i] as f64 * my[j] as f64)).log2();
        }
    }
    mi.max(0.0)
}

pub fn mic_scalar(x: &[f64], y: &[f64], cfg: &MicConfig) -> Result<f64> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::contract(
            "mic_scalar",
            format!("lengths differ: {} vs {}", x.len(), y.len()),
        ));
    }
    let n = x.len();
    if n < MIC_MIN_LEN {
        return Err(Error::contract(
            "mic_scalar",
            format!("need at least {MIC_MIN_LEN} samples, got {n}"),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::contract("mic_scalar", "non-finite sample"));
    }
    let budget = (n as f64).powf(cfg.b_exponent);
    let (rx, ry) = (ranks(x), ranks(y));
    let cap = cfg.max_grid_per_axis;
    let mut best = 0.0f64;
    for a in 2..=cap {
        if (a * 2) as f64 > budget {
            break;
        }
        let xs = [bins(&rx.below, a), bins(&rx.above, a)];
        for b in 2..=cap {
            if (a * b) as f64 > budget {
                break;
            }
            let ys = [bins(&ry.below, b), bins(&ry.above, b)];
            let norm = (a.min(b) as f64).log2();
            for bx in &xs {
                for by in &ys {
                    let s = mutual_information_bits(bx, a, by, b) / norm;
                    best = best.max(s);
                }
            }
        }
    }
    Ok(best.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionMic {
    pub score: f64,
    pub max_x: f64,
    pub max_y: f64,
}

/// Mean of the best channel-vs-column and best channel-vs-row MIC.
pub fn feature_position_mic(features: &FeatureMap, cfg: &MicConfig) -> Result<PositionMic> {
    let (gh, gw, c) = (features.grid_h, features.grid_w, features.channels);
    if gh < 4 || gw < 4 {
        return Err(Error::contract(
            "feature_position_mic",
            format!("grid {gh}x{gw} is smaller than 4x4"),
        ));
    }
    let n = gh * gw;
    let xs: Vec<f64> = (0..n).map(|p| (p % gw) as f64).collect();
    let ys: Vec<f64> = (0..n).map(|p| (p / gw) as f64).collect();
    let (mut max_x, mut max_y) = (0.0f64, 0.0f64);
    for ch in 0..c {
        let v: Vec<f64> = (0..n).map(|p| features.data[p * c + ch] as f64).collect();
        max_x = max_x.max(mic_scalar(&v, &xs, cfg)?);
        max_y = max_y.max(mic_scalar(&v, &ys, cfg)?);
    }
    Ok(PositionMic {
        score: 0.5 * (max_x + max_y),
        max_x,
        max_y,
    })
}
