//! Single-channel maps and reconstruction variants.

use crate::autodiff::cosine;
use crate::error::{Error, Result};
use crate::field_models::FieldModels;
use crate::interchange::FeatureMap;
use crate::stage1::render_clean;

/// Cosine similarity of every patch to the patch at `anchor = (i, j)`.
/// A zero anchor gives an all-zero map.
pub fn similarity_map(features: &FeatureMap, anchor: (usize, usize)) -> Result<FeatureMap> {
    let (i, j) = anchor;
    if i >= features.grid_h || j >= features.grid_w {
        return Err(Error::contract(
            "similarity_map",
            format!("anchor {anchor:?} outside {}x{}", features.grid_h, features.grid_w),
        ));
    }
    let a: Vec<f64> = features.patch(i, j).iter().map(|&v| v as f64).collect();
    let zero = a.iter().all(|&v| v == 0.0);
    let data: Vec<f32> = (0..features.n_patches())
        .map(|p| {
            if zero {
                return 0.0;
            }
            let b: Vec<f64> = features.row(p).iter().map(|&v| v as f64).collect();
            cosine(&a, &b).0.clamp(-1.0, 1.0) as f32
        })
        .collect();
    FeatureMap::new(features.grid_h, features.grid_w, 1, data)
}

/// Per-patch L2 norm.
pub fn norm_prominence(features: &FeatureMap) -> FeatureMap {
    let data: Vec<f32> = (0..features.n_patches())
        .map(|p| {
            features
                .row(p)
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt() as f32
        })
        .collect();
    FeatureMap {
        grid_h: features.grid_h,
        grid_w: features.grid_w,
        channels: 1,
        data,
    }
}

/// The three reconstructions compared in the ablation: `F`, `F + G` and
/// `F + G + h(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariants {
    pub f: FeatureMap,
    pub f_g: FeatureMap,
    pub f_g_residual: FeatureMap,
}

/// Variants on the grid of `raw`, the identity-view observation of the image.
pub fn ablation_variants(models: &FieldModels, raw: &FeatureMap) -> Result<AblationVariants> {
    let grid = (raw.grid_h, raw.grid_w);
    let f = render_clean(models, grid)?;
    let g = models.artifact_lookup(grid)?;
    let d = models.residual_forward(raw)?;
    let f_g_data: Vec<f32> = f.data.iter().zip(&g.data).map(|(a, b)| a + b).collect();
    let f_g_res: Vec<f32> = f_g_data.iter().zip(&d.data).map(|(a, b)| a + b).collect();
    Ok(AblationVariants {
        f_g: FeatureMap::new(grid.0, grid.1, f.channels, f_g_data)?,
        f_g_residual: FeatureMap::new(grid.0, grid.1, f.channels, f_g_res)?,
        f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_basics() {
        let f = FeatureMap::new(1, 3, 2, vec![1.0, 0.0, 0.0, 2.0, 3.0, 0.0]).unwrap();
        let s = similarity_map(&f, (0, 0)).unwrap();
        assert_eq!(s.data, vec![1.0, 0.0, 1.0]);
        let z = FeatureMap::zeros(2, 2, 3);
        assert!(similarity_map(&z, (1, 1)).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(similarity_map(&z, (2, 0)).is_err());
    }

    #[test]
    fn norms() {
        let f = FeatureMap::new(1, 2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(norm_prominence(&f).data, vec![5.0, 0.0]);
    }
}
