//! Denoiser training on synthetic pairs whose clean target is known.
//!
//! Checks are plain `pub fn`s registered as tests at the bottom; the
//! acceptance runner in the CLI crate includes this file and calls them.

use dvt_core::interchange::FeatureMap;
use dvt_core::par::ExecMode;
use dvt_core::stage2::{apply_denoiser, mean_patch_cosine, train_denoiser, DenoiserModel, Stage2Config};
use dvt_core::synthetic::{identity_pair, SyntheticSpec};

fn pairs(seeds: std::ops::Range<u64>, channels: usize) -> Vec<(FeatureMap, FeatureMap)> {
    seeds
        .map(|seed| {
            identity_pair(&SyntheticSpec {
                seed,
                channels,
                ..Default::default()
            })
            .unwrap()
        })
        .collect()
}

fn mean_cosine(model: &DenoiserModel, pairs: &[(FeatureMap, FeatureMap)]) -> f64 {
    pairs
        .iter()
        .map(|(y, c)| mean_patch_cosine(&apply_denoiser(model, y).unwrap(), c).unwrap())
        .sum::<f64>()
        / pairs.len() as f64
}

pub fn ten_pairs_overfit() {
    let train = pairs(0..10, 32);
    let cfg = Stage2Config {
        epochs: 200,
        batch: 2,
        lr: 1e-2,
        ..Stage2Config::desk()
    };
    let r = train_denoiser(&train, &cfg).unwrap();
    let cos = mean_cosine(&r.model, &train);
    assert!(cos >= 0.999, "train cosine {cos}");
    let raw: f64 = train.iter().map(|(y, c)| mean_patch_cosine(y, c).unwrap()).sum::<f64>() / 10.0;
    assert!(cos > raw);
}

/// Full batches leave the schedule as the only source of epoch-to-epoch
/// noise. Two-pair minibatches at the rate above spike by more than 5%.
pub fn full_batch_overfit_loss_never_climbs() {
    let train = pairs(0..10, 32);
    let cfg = Stage2Config {
        epochs: 100,
        batch: 10,
        lr: 1e-2,
        ..Stage2Config::desk()
    };
    let r = train_denoiser(&train, &cfg).unwrap();
    for (e, w) in r.epoch_losses.windows(2).enumerate() {
        assert!(w[1] <= 1.05 * w[0], "epoch {}: {} after {}", e + 1, w[1], w[0]);
    }
    assert!(r.epoch_losses.last().unwrap() < &r.epoch_losses[0]);
}

pub fn same_seed_same_model_in_both_modes() {
    let train = pairs(0..6, 8);
    let cfg = Stage2Config {
        epochs: 3,
        batch: 4,
        ..Stage2Config::desk()
    };
    let a = train_denoiser(&train, &cfg).unwrap();
    let b = train_denoiser(&train, &cfg).unwrap();
    let s = train_denoiser(
        &train,
        &Stage2Config {
            mode: ExecMode::Sequential,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.model.to_checkpoint(), b.model.to_checkpoint());
    assert_eq!(a.model.to_checkpoint(), s.model.to_checkpoint());
    let c = train_denoiser(&train, &Stage2Config { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.model.to_checkpoint(), c.model.to_checkpoint());
}

pub fn trained_model_applies_at_other_grid_sizes() {
    let train = pairs(0..4, 8);
    let r = train_denoiser(
        &train,
        &Stage2Config {
            epochs: 2,
            ..Stage2Config::desk()
        },
    )
    .unwrap();
    let y = FeatureMap::new(9, 7, 8, (0..9 * 7 * 8).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let out = apply_denoiser(&r.model, &y).unwrap();
    assert_eq!((out.grid_h, out.grid_w, out.channels), (9, 7, 8));
    assert!(out.data.iter().all(|v| v.is_finite()));
}

pub fn mismatched_pairs_rejected() {
    let mut train = pairs(0..2, 8);
    train[1].1 = FeatureMap::zeros(4, 4, 8);
    assert!(train_denoiser(&train, &Stage2Config::desk()).is_err());
    assert!(train_denoiser(&[], &Stage2Config::desk()).is_err());
}

/// Held-out images share the artifact law of the training set but not
/// their semantics.
pub fn two_hundred_pairs_generalize() {
    let train = pairs(0..200, 32);
    let held = pairs(10_000..10_050, 32);
    let r = train_denoiser(&train, &Stage2Config::desk()).unwrap();
    let cos = mean_cosine(&r.model, &held);
    let raw: f64 = held.iter().map(|(y, c)| mean_patch_cosine(y, c).unwrap()).sum::<f64>() / held.len() as f64;
    assert!(cos >= 0.9, "held-out cosine {cos} (raw {raw})");
    assert!(cos > raw, "held-out cosine {cos} vs raw {raw}");
}

#[cfg(test)]
mod tests {
    #[test]
    fn ten_pairs_overfit() {
        super::ten_pairs_overfit()
    }
    #[test]
    fn full_batch_overfit_loss_never_climbs() {
        super::full_batch_overfit_loss_never_climbs()
    }
    #[test]
    fn same_seed_same_model_in_both_modes() {
        super::same_seed_same_model_in_both_modes()
    }
    #[test]
    fn trained_model_applies_at_other_grid_sizes() {
        super::trained_model_applies_at_other_grid_sizes()
    }
    #[test]
    fn mismatched_pairs_rejected() {
        super::mismatched_pairs_rejected()
    }
    #[test]
    fn two_hundred_pairs_generalize() {
        super::two_hundred_pairs_generalize()
    }
}
