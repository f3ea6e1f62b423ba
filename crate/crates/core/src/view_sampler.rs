//! Random resized crops with flips, and the mapping from view patches back to
//! original-image coordinates.

use rand::Rng as _;

use crate::autodiff::{bilinear_taps, GridAlign};
use crate::error::{Error, Result};
use crate::interchange::{FeatureMap, ViewTransform};
use crate::rng::{self, domain};

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    pub n_views: usize,
    pub flip_prob: f64,
    /// Crop area as a fraction of the image, sampled uniformly.
    pub area_range: (f64, f64),
    /// Crop width/height ratio, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    pub out_grid: (usize, usize),
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            n_views: 768,
            flip_prob: 0.5,
            area_range: (0.1, 0.5),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            out_grid: (37, 37),
            seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area_range;
        let (r0, r1) = self.aspect_range;
        let bad = |m: String| Err(Error::contract("sampler_params", m));
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return bad(format!("area range {:?} must satisfy 0 < min <= max <= 1", self.area_range));
        }
        if !(0.0 < r0 && r0 <= r1) {
            return bad(format!("aspect range {:?} invalid", self.aspect_range));
        }
        if self.n_views == 0 {
            return bad("n_views must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        if self.out_grid.0 == 0 || self.out_grid.1 == 0 {
            return bad(format!("output grid {:?} must be at least 1x1", self.out_grid));
        }
        Ok(())
    }
}

/// Draws view `index` of the plan for `params.seed`.
pub fn sample_transform(params: &SamplerParams, index: u64) -> ViewTransform {
    let mut rng = rng::stream(params.seed, domain::VIEWS, index);
    let (a0, a1) = params.area_range;
    let (lr0, lr1) = (params.aspect_range.0.ln(), params.aspect_range.1.ln());
    let mut last_aspect = 1.0;
    let mut crop = None;
    for _ in 0..MAX_ATTEMPTS {
        let area = if a1 > a0 { rng.random_range(a0..=a1) } else { a0 };
        let aspect = if lr1 > lr0 { rng.random_range(lr0..=lr1).exp() } else { lr0.exp() };
        last_aspect = aspect;
        let w = (area * aspect).sqrt();
        let h = (area / aspect).sqrt();
        if w <= 1.0 && h <= 1.0 {
            let x0 = if w < 1.0 { rng.random_range(0.0..=1.0 - w) } else { 0.0 };
            let y0 = if h < 1.0 { rng.random_range(0.0..=1.0 - h) } else { 0.0 };
            crop = Some([x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)]);
            break;
        }
    }
    let crop = crop.unwrap_or_else(|| {
        // largest centred crop with the last sampled aspect
        let (w, h) = if last_aspect >= 1.0 {
            (1.0, 1.0 / last_aspect)
        } else {
            (last_aspect, 1.0)
        };
        let (x0, y0) = ((1.0 - w) / 2.0, (1.0 - h) / 2.0);
        [x0, y0, x0 + w, y0 + h]
    });
    let flip_h = rng.random_bool(params.flip_prob);
    ViewTransform {
        flip_h,
        crop: to_f32_crop(crop),
        out_grid: params.out_grid,
    }
}

/// Rounds a crop to storage precision while keeping `lo < hi` on both axes.
fn to_f32_crop(c: [f64; 4]) -> [f32; 4] {
    let mut out = c.map(|v| v.clamp(0.0, 1.0) as f32);
    for (lo, hi) in [(0, 2), (1, 3)] {
        if out[hi] <= out[lo] {
            out[hi] = f32::from_bits(out[lo].to_bits() + 1).min(1.0);
            if out[hi] <= out[lo] {
                out[lo] = f32::from_bits(out[hi].to_bits() - 1);
            }
        }
    }
    out
}

/// The full plan of `params.n_views` transforms.
pub fn sample_plan(params: &SamplerParams) -> Result<Vec<ViewTransform>> {
    params.validate()?;
    Ok((0..params.n_views as u64)
        .map(|i| sample_transform(params, i))
        .collect())
}

/// Normalized original-image coordinates of each patch centre of a view.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major `(u, v)` pairs; `u` is horizontal.
    pub coords: Vec<(f64, f64)>,
}

impl CoordGrid {
    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        self.coords[i * self.grid_w + j]
    }
}

pub fn coords(t: &ViewTransform, out_grid: (usize, usize)) -> CoordGrid {
    let (gh, gw) = out_grid;
    let [x0, y0, x1, y1] = t.crop.map(|v| v as f64);
    let mut coords = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let mut x = (j as f64 + 0.5) / gw as f64;
            let y = (i as f64 + 0.5) / gh as f64;
            if t.flip_h {
                x = 1.0 - x;
            }
            let u = (x0 + x * (x1 - x0)).clamp(0.0, 1.0);
            let v = (y0 + y * (y1 - y0)).clamp(0.0, 1.0);
            coords.push((u, v));
        }
    }
    CoordGrid {
        grid_h: gh,
        grid_w: gw,
        coords,
    }
}

/// Applies a view transform to a feature grid by bilinear sampling at the
/// view's patch centres (patch-centre convention on the source grid).
pub fn resample_grid(map: &FeatureMap, t: &ViewTransform) -> FeatureMap {
    let cg = coords(t, t.out_grid);
    let c = map.channels;
    let mut out = FeatureMap::zeros(cg.grid_h, cg.grid_w, c);
    for (p, &(u, v)) in cg.coords.iter().enumerate() {
        let dst = &mut out.data[p * c..(p + 1) * c];
        let mut acc = vec![0.0f64; c];
        for (idx, w) in bilinear_taps(map.grid_h, map.grid_w, u, v, GridAlign::PatchCenter) {
            if w == 0.0 {
                continue;
            }
            for (a, &s) in acc.iter_mut().zip(map.row(idx)) {
                *a += w * s as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12
    }

    #[test]
    fn degenerate_params_give_identity() {
        let p = SamplerParams {
            area_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            flip_prob: 0.0,
            ..Default::default()
        };
        let t = sample_transform(&p, 3);
        assert_eq!(t.crop, [0.0, 0.0, 1.0, 1.0]);
        assert!(!t.flip_h);
    }

    #[test]
    fn identity_coords_2x2() {
        let cg = coords(&ViewTransform::identity((2, 2)), (2, 2));
        let want = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        for (a, b) in cg.coords.iter().zip(want) {
            assert!(close(*a, b));
        }
    }

    #[test]
    fn single_patch_lands_on_crop_midpoint() {
        let t = ViewTransform {
            flip_h: false,
            crop: [0.25, 0.25, 0.75, 0.75],
            out_grid: (1, 1),
        };
        assert!(close(coords(&t, (1, 1)).coords[0], (0.5, 0.5)));
    }

    #[test]
    fn flip_reverses_columns() {
        let plain = coords(&ViewTransform::identity((1, 2)), (1, 2));
        let mut t = ViewTransform::identity((1, 2));
        t.flip_h = true;
        let flipped = coords(&t, (1, 2));
        assert!(close(plain.coords[0], flipped.coords[1]));
        assert!(close(plain.coords[1], flipped.coords[0]));
    }

    #[test]
    fn identity_resample_reproduces_input() {
        let data: Vec<f32> = (0..5 * 4 * 3).map(|i| (i as f32).sin()).collect();
        let m = FeatureMap::new(5, 4, 3, data).unwrap();
        let out = resample_grid(&m, &ViewTransform::identity((5, 4)));
        assert_eq!(out, m);
    }

    #[test]
    fn double_flip_is_identity() {
        let data: Vec<f32> = (0..6 * 6 * 2).map(|i| (i as f32 * 0.37).cos()).collect();
        let m = FeatureMap::new(6, 6, 2, data).unwrap();
        let mut t = ViewTransform::identity((6, 6));
        t.flip_h = true;
        let twice = resample_grid(&resample_grid(&m, &t), &t);
        assert_eq!(twice, m);
    }

    #[test]
    fn ramp_crop_matches_closed_form() {
        // f(u, v) = 2u - 3v + 0.5 sampled at patch centres of a 16x16 grid
        let (h, w) = (16usize, 16usize);
        let f = |u: f64, v: f64| 2.0 * u - 3.0 * v + 0.5;
        let mut m = FeatureMap::zeros(h, w, 1);
        for i in 0..h {
            for j in 0..w {
                m.patch_mut(i, j)[0] = f((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64) as f32;
            }
        }
        for flip_h in [false, true] {
            let t = ViewTransform {
                flip_h,
                crop: [0.2, 0.3, 0.7, 0.9],
                out_grid: (7, 5),
            };
            let out = resample_grid(&m, &t);
            let cg = coords(&t, t.out_grid);
            let err = cg
                .coords
                .iter()
                .zip(&out.data)
                .map(|(&(u, v), &y)| (f(u, v) - y as f64).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "ramp error {err}");
        }
    }

    #[test]
    fn draws_depend_only_on_seed_and_index() {
        let p = SamplerParams {
            seed: 11,
            ..Default::default()
        };
        let plan = sample_plan(&SamplerParams { n_views: 20, ..p.clone() }).unwrap();
        assert_eq!(plan[13], sample_transform(&p, 13));
        assert_ne!(plan[13], sample_transform(&SamplerParams { seed: 12, ..p }, 13));
    }

    #[test]
    fn coords_stay_in_unit_square() {
        let p = SamplerParams {
            n_views: 200,
            out_grid: (9, 13),
            seed: 5,
            ..Default::default()
        };
        for t in sample_plan(&p).unwrap() {
            t.validate().unwrap();
            for &(u, v) in &coords(&t, t.out_grid).coords {
                assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn resample_commutes_with_channel_permutation() {
        let data: Vec<f32> = (0..8 * 8 * 3).map(|i| (i as f32 * 0.11).sin()).collect();
        let m = FeatureMap::new(8, 8, 3, data).unwrap();
        let perm = [2usize, 0, 1];
        let permute = |x: &FeatureMap| {
            let mut y = x.clone();
            for p in 0..x.n_patches() {
                for (k, &src) in perm.iter().enumerate() {
                    y.data[p * 3 + k] = x.data[p * 3 + src];
                }
            }
            y
        };
        let t = ViewTransform {
            flip_h: true,
            crop: [0.1, 0.15, 0.8, 0.6],
            out_grid: (5, 6),
        };
        assert_eq!(resample_grid(&permute(&m), &t), permute(&resample_grid(&m, &t)));
    }
}
