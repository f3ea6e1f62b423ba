//! Renders feature maps to 8-bit RGB images and binary PPM files.
//!
//! PPM layout: ASCII `P6`, newline, width, space, height, newline, `255`,
//! newline, then `h * w * 3` bytes of RGB in row-major order.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::interchange::{FeatureMap, LabelMap, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::contract("rgb_image", format!("zero-size image {h}x{w}")));
        }
        if data.len() != h * w * 3 {
            return Err(Error::contract(
                "rgb_image",
                format!("{} bytes for a {h}x{w} image", data.len()),
            ));
        }
        Ok(RgbImage { h, w, data })
    }

    pub fn pixel(&self, i: usize, j: usize) -> [u8; 3] {
        let o = (i * self.w + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Result<RgbImage> {
        if factor == 0 {
            return Err(Error::contract("upscale", "factor must be positive"));
        }
        let (h, w) = (self.h * factor, self.w * factor);
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                data.extend_from_slice(&self.pixel(i / factor, j / factor));
            }
        }
        RgbImage::new(h, w, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    Gray,
    Viridis,
}

/// Viridis sampled at nine evenly spaced points; the 256-entry table
/// interpolates linearly between them.
pub const VIRIDIS_ANCHORS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Distinct colours for cluster maps, cycled for larger label ids.
pub const LABEL_PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub const MID_GRAY: [u8; 3] = [128, 128, 128];

pub fn lookup_table(map: Colormap) -> Vec<[u8; 3]> {
    (0..256)
        .map(|i| match map {
            Colormap::Gray => [i as u8; 3],
            Colormap::Viridis => {
                let x = i as f64 / 255.0 * (VIRIDIS_ANCHORS.len() - 1) as f64;
                let k = (x.floor() as usize).min(VIRIDIS_ANCHORS.len() - 2);
                let t = x - k as f64;
                let (a, b) = (VIRIDIS_ANCHORS[k], VIRIDIS_ANCHORS[k + 1]);
                [0, 1, 2].map(|c| (a[c] as f64 * (1.0 - t) + b[c] as f64 * t).round() as u8)
            }
        })
        .collect()
}

fn quantize(t: f64) -> u8 {
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min-max normalizes a one-channel map through a lookup table. A constant
/// map renders mid-gray.
pub fn render_scalar_map(map: &FeatureMap, colormap: Colormap, scale: usize) -> Result<RgbImage> {
    if map.channels != 1 {
        return Err(Error::contract(
            "render_scalar_map",
            format!("expected one channel, got {}", map.channels),
        ));
    }
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("render_scalar_map", "map holds non-finite values"));
    }
    let lo = map.data.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = map.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lut = lookup_table(colormap);
    let data = map
        .data
        .iter()
        .flat_map(|&v| {
            if hi > lo {
                lut[quantize((v as f64 - lo) / (hi - lo)) as usize]
            } else {
                MID_GRAY
            }
        })
        .collect();
    RgbImage::new(map.grid_h, map.grid_w, data)?.upscale(scale)
}

/// Colours each label from [`LABEL_PALETTE`]; the ignore label is black.
pub fn render_labels(labels: &LabelMap, scale: usize) -> Result<RgbImage> {
    let data = labels
        .labels
        .iter()
        .flat_map(|&l| {
            if l == IGNORE_LABEL {
                [0, 0, 0]
            } else {
                LABEL_PALETTE[l as usize % LABEL_PALETTE.len()]
            }
        })
        .collect();
    RgbImage::new(labels.grid_h, labels.grid_w, data)?.upscale(scale)
}

/// Top principal directions of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Unit directions; a zero vector marks a component beyond the rank.
    pub directions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// Eigendecomposition of the channel covariance. Each direction's sign is
/// fixed so its largest-magnitude entry is positive; ties among equal
/// eigenvalues leave the directions within that eigenspace unspecified.
pub fn pca_basis(features: &FeatureMap, n_components: usize) -> Result<PcaBasis> {
    let (n, c) = (features.n_patches(), features.channels);
    if n < 3 || c < 3 {
        return Err(Error::contract(
            "pca_rgb",
            format!("need at least 3 patches and 3 channels, got {n} and {c}"),
        ));
    }
    let x = DMatrix::from_row_slice(n, c, &features.to_f64());
    let mean: Vec<f64> = x.row_mean().iter().copied().collect();
    let centered = DMatrix::from_fn(n, c, |p, ch| x[(p, ch)] - mean[ch]);
    let cov = centered.transpose() * &centered / n as f64;
    let trace = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut directions = Vec::with_capacity(n_components);
    let mut eigenvalues = Vec::with_capacity(n_components);
    for comp in 0..n_components {
        match order.get(comp) {
            Some(&idx) if eig.eigenvalues[idx] > floor => {
                let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
                let big = v
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
                if v[big] < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                directions.push(v);
                eigenvalues.push(eig.eigenvalues[idx]);
            }
            _ => {
                directions.push(vec![0.0; c]);
                eigenvalues.push(0.0);
            }
        }
    }
    Ok(PcaBasis {
        mean,
        directions,
        eigenvalues,
    })
}

/// Projects onto the top three principal directions and min-max scales each
/// to one colour channel. Components beyond the rank stay zero.
pub fn pca_rgb(features: &FeatureMap, scale: usize) -> Result<RgbImage> {
    let basis = pca_basis(features, 3)?;
    let (n, c) = (features.n_patches(), features.channels);
    let x = features.to_f64();
    let mut data = vec![0u8; n * 3];
    for (k, dir) in basis.directions.iter().enumerate() {
        if basis.eigenvalues[k] == 0.0 {
            continue;
        }
        let proj: Vec<f64> = (0..n)
            .map(|p| (0..c).map(|ch| (x[p * c + ch] - basis.mean[ch]) * dir[ch]).sum())
            .collect();
        let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for p in 0..n {
                data[p * 3 + k] = quantize((proj[p] - lo) / (hi - lo));
            }
        }
    }
    RgbImage::new(features.grid_h, features.grid_w, data)?.upscale(scale)
}

pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    if img.h == 0 || img.w == 0 {
        return Err(Error::contract("write_image", "zero-size image"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

/// Reads the layout written by [`encode_ppm`]; comments are not accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PPM header".into()))?);
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PPM header {fields:?}")));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM dimension {s:?}")));
    let (w, h) = (dim(fields[1])?, dim(fields[2])?);
    let need = h.checked_mul(w).and_then(|v| v.checked_mul(3)).ok_or_else(|| Error::Format("PPM too large".into()))?;
    if pos > bytes.len() || bytes.len() - pos != need {
        return Err(Error::Corrupt(format!(
            "PPM payload holds {} bytes, expected {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    RgbImage::new(h, w, bytes[pos..].to_vec()).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
