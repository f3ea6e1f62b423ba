//! Backward pass against central differences for every primitive and model.
//!
//! Checks are plain `pub fn`s registered as tests at the bottom; the
//! acceptance runner in the CLI crate includes this file and calls them.

mod common;

use common::{fd_check, project, random_tensor, rng};
use dvt_core::autodiff::{GridAlign, ParamStore, Tape, Tensor};
use dvt_core::field_models::{FieldModels, HashGridConfig};
use dvt_core::stage1::{artifact_taps, compute_losses, Phase, PixelBatch};
use dvt_core::stage2::{forward_on_tape, pair_loss, DenoiserModel};
use dvt_core::interchange::FeatureMap;
use rand::Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-3;

fn check_unary<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Tape<'_>, dvt_core::autodiff::Var) -> dvt_core::Result<dvt_core::autodiff::Var>,
{
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut r, shape, 1.0));
        let err = fd_check(&store, &[x], 64, seed, |t| {
            let xv = t.param(x);
            let y = f(t, xv)?;
            project(t, y, seed)
        });
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

fn check_binary<F>(name: &str, sa: &[usize], sb: &[usize], f: F)
where
    F: Fn(
        &mut Tape<'_>,
        dvt_core::autodiff::Var,
        dvt_core::autodiff::Var,
    ) -> dvt_core::Result<dvt_core::autodiff::Var>,
{
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut r, sa, 1.0));
        let b = store.add("b", random_tensor(&mut r, sb, 1.0));
        let err = fd_check(&store, &[a, b], 64, seed, |t| {
            let (av, bv) = (t.param(a), t.param(b));
            let y = f(t, av, bv)?;
            project(t, y, seed)
        });
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

pub fn grad_add_sub_mul_with_broadcasts() {
    for (sa, sb) in [
        (vec![3, 4], vec![3, 4]),
        (vec![3, 4], vec![4]),
        (vec![3, 4], vec![3, 1]),
        (vec![3, 4], vec![1]),
    ] {
        check_binary("add", &sa, &sb, |t, a, b| t.add(a, b));
        check_binary("sub", &sa, &sb, |t, a, b| t.sub(a, b));
        check_binary("mul", &sa, &sb, |t, a, b| t.mul(a, b));
    }
}

pub fn grad_scale_transpose_matmul() {
    check_unary("scale", &[2, 5], |t, x| Ok(t.scale(x, -1.7)));
    check_unary("transpose", &[3, 5], |t, x| Ok(t.transpose(x)));
    check_binary("matmul", &[4, 3], &[3, 5], |t, a, b| t.matmul(a, b));
}

pub fn grad_relu_abs() {
    check_unary("relu", &[6, 7], |t, x| Ok(t.relu(x)));
    check_unary("abs", &[6, 7], |t, x| Ok(t.abs(x)));
}

pub fn grad_layer_norm() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut r, &[5, 8], 2.0));
        let g = store.add("g", random_tensor(&mut r, &[8], 1.0));
        let b = store.add("b", random_tensor(&mut r, &[8], 1.0));
        let err = fd_check(&store, &[x, g, b], 64, seed, |t| {
            let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
            let y = t.layer_norm(xv, gv, bv)?;
            project(t, y, seed)
        });
        assert!(err < TOL, "layer_norm seed {seed}: {err:e}");
    }
}

pub fn grad_softmax() {
    check_unary("softmax", &[4, 9], |t, x| Ok(t.softmax(x)));
}

pub fn grad_gathers() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let idx: Vec<usize> = (0..12).map(|_| r.random_range(0..6)).collect();
        let w: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let pts: Vec<(f64, f64)> = (0..7).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
        let mut store = ParamStore::new();
        let src = store.add("src", random_tensor(&mut r, &[6, 3], 1.0));
        let err = fd_check(&store, &[src], 64, seed, |t| {
            let s = t.param(src);
            let a = t.gather_rows(s, &idx)?;
            let b = t.weighted_gather(s, idx.clone(), w.clone(), 4)?;
            let c = t.bilinear_sample_2d(s, 2, 3, &pts, GridAlign::PatchCenter)?;
            let d = t.bilinear_sample_2d(s, 3, 2, &pts, GridAlign::AlignCorners)?;
            let l = [project(t, a, seed)?, project(t, b, seed + 1)?, project(t, c, seed + 2)?, project(t, d, seed + 3)?];
            let ab = t.add(l[0], l[1])?;
            let cd = t.add(l[2], l[3])?;
            t.add(ab, cd)
        });
        assert!(err < TOL, "gathers seed {seed}: {err:e}");
    }
}

pub fn grad_concat_slice() {
    check_binary("concat", &[3, 2], &[3, 4], |t, a, b| t.concat_last_axis(&[a, b, a]));
    check_unary("slice", &[3, 6], |t, x| t.slice_last_axis(x, 1, 3));
}

pub fn grad_reductions_and_norms() {
    check_unary("mean", &[3, 4], |t, x| Ok(t.reduce_mean(x)));
    check_unary("l2", &[5, 4], |t, x| Ok(t.l2_norm_last_axis(x)));
    check_binary("cosine", &[5, 4], &[5, 4], |t, a, b| t.cosine_similarity_last_axis(a, b));
}

pub fn stop_gradient_blocks_everything() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::full(vec![2, 2], 1.5));
    let mut tape = Tape::with_params(&store);
    let xv = tape.param(x);
    let s = tape.stop_gradient(xv);
    let y = tape.mul(s, xv).unwrap();
    let l = tape.reduce_mean(y);
    let g = tape.backward(l).unwrap();
    // only the unstopped factor contributes: d/dx mean(sg(x) * x) = sg(x) / 4
    assert_eq!(g.dense(x, 4), vec![0.375; 4]);
}

fn small_hash() -> HashGridConfig {
    HashGridConfig {
        levels: 3,
        base_res: 2,
        max_res: 40,
        channels_per_level: 2,
        // level 40 (41^2 > 256) exercises the hashed path
        max_entries_per_level: 256,
    }
}

fn random_models(seed: u64) -> FieldModels {
    let mut m = FieldModels::init(8, 4, small_hash(), seed).unwrap();
    let mut r = rng(seed ^ 0x1234);
    // move every parameter away from its structured init
    for id in m.store.ids().collect::<Vec<_>>() {
        for v in m.store.get_mut(id).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    m
}

fn random_coords(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let mut r = rng(seed ^ 0x55);
    (0..n).map(|_| (r.random::<f64>(), r.random::<f64>())).collect()
}

pub fn grad_semantics_field() {
    for seed in 0..SEEDS {
        let m = random_models(seed);
        let coords = random_coords(seed, 10);
        let err = fd_check(&m.store, &m.theta(), 40, seed, |t| {
            let f = m.semantics.forward(t, &coords)?;
            project(t, f, seed)
        });
        assert!(err < TOL, "semantics seed {seed}: {err:e}");
    }
}

pub fn grad_residual_predictor() {
    for seed in 0..SEEDS {
        let m = random_models(seed);
        let mut r = rng(seed);
        let y = random_tensor(&mut r, &[6, 8], 1.0);
        let err = fd_check(&m.store, &m.psi(), 40, seed, |t| {
            let yv = t.constant(y.clone());
            let d = m.residual.forward(t, yv)?;
            project(t, d, seed)
        });
        assert!(err < TOL, "residual seed {seed}: {err:e}");
    }
}

fn random_batch(seed: u64, n: usize) -> PixelBatch {
    let mut r = rng(seed ^ 0x99);
    let mut b = PixelBatch::new(8);
    for (k, c) in random_coords(seed, n).into_iter().enumerate() {
        let y: Vec<f32> = (0..8).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let grid = if k % 2 == 0 { (4, 4) } else { (5, 3) };
        let (i, j) = (r.random_range(0..grid.0), r.random_range(0..grid.1));
        b.push(&y, c, artifact_taps(grid, 4, i, j));
    }
    b
}

/// The phase-two loss with every stopped quantity frozen at its value under
/// the unperturbed parameters. Its plain derivative is what backward must
/// produce for the stop-gradient version.
fn frozen_phase_two(
    t: &mut Tape<'_>,
    m: &FieldModels,
    batch: &PixelBatch,
    delta0: &Tensor,
    gap0: &Tensor,
) -> dvt_core::Result<dvt_core::autodiff::Var> {
    let n = batch.len();
    let y = t.constant(Tensor::matrix(n, 8, batch.y.clone())?);
    let f = m.semantics.forward(t, &batch.coords)?;
    let (idx, w): (Vec<usize>, Vec<f64>) = batch.taps.iter().flatten().copied().unzip();
    let g_all = t.param(m.artifact.grid);
    let g = t.weighted_gather(g_all, idx, w, 4)?;
    let yp = t.add(f, g)?;
    let d0 = t.constant(delta0.clone());
    let y_hat = t.add(yp, d0)?;
    let cos = t.cosine_similarity_last_axis(y, y_hat)?;
    let cos = t.reduce_mean(cos);
    let diff = t.sub(y, y_hat)?;
    let nrm = t.l2_norm_last_axis(diff);
    let nrm = t.reduce_mean(nrm);
    let one = t.constant(Tensor::scalar(1.0));
    let dist = t.sub(one, cos)?;
    let dist = t.add(dist, nrm)?;
    let delta = m.residual.forward(t, y)?;
    let gap = t.constant(gap0.clone());
    let r = t.sub(gap, delta)?;
    let r = t.l2_norm_last_axis(r);
    let r = t.reduce_mean(r);
    let a = t.abs(delta);
    let a = t.reduce_mean(a);
    let sp = t.scale(a, 8.0);
    let r = t.scale(r, 0.1);
    let sp = t.scale(sp, 0.02);
    let total = t.add(dist, r)?;
    t.add(total, sp)
}

pub fn grad_full_stage1_loss() {
    for seed in 0..SEEDS {
        let m = random_models(seed);
        let batch = random_batch(seed, 12);
        let all: Vec<_> = m.store.ids().collect();
        let err = fd_check(&m.store, &all, 24, seed, |t| {
            Ok(compute_losses(t, &m, &batch, Phase::One, 0.1, 0.02)?.total)
        });
        assert!(err < TOL, "stage-1 phase one seed {seed}: {err:e}");

        // stopped values under the unperturbed parameters
        let (delta0, gap0) = {
            let mut t = Tape::with_params(&m.store);
            let y = t.constant(Tensor::matrix(batch.len(), 8, batch.y.clone()).unwrap());
            let d = m.residual.forward(&mut t, y).unwrap();
            let f = m.semantics.forward(&mut t, &batch.coords).unwrap();
            let (idx, w): (Vec<usize>, Vec<f64>) = batch.taps.iter().flatten().copied().unzip();
            let g_all = t.param(m.artifact.grid);
            let g = t.weighted_gather(g_all, idx, w, 4).unwrap();
            let yp = t.add(f, g).unwrap();
            let gap = t.sub(y, yp).unwrap();
            (t.value(d).clone(), t.value(gap).clone())
        };
        let analytic = {
            let mut t = Tape::with_params(&m.store);
            let v = compute_losses(&mut t, &m, &batch, Phase::Two, 0.1, 0.02).unwrap();
            let frozen = {
                let mut t2 = Tape::with_params(&m.store);
                let l = frozen_phase_two(&mut t2, &m, &batch, &delta0, &gap0).unwrap();
                t2.value(l).item()
            };
            assert!((t.value(v.total).item() - frozen).abs() < 1e-12);
            t.backward(v.total).unwrap()
        };
        let err = common::fd_check_against(&m.store, &all, 24, seed, &analytic, |t| {
            frozen_phase_two(t, &m, &batch, &delta0, &gap0)
        });
        assert!(err < TOL, "stage-1 phase two seed {seed}: {err:e}");
    }
}

fn random_denoiser(seed: u64) -> DenoiserModel {
    let mut m = DenoiserModel::init(8, 4, 2, seed).unwrap();
    let mut r = rng(seed ^ 0x4321);
    // zero-initialized projections would hide the attention path
    for id in m.store.ids().collect::<Vec<_>>() {
        for v in m.store.get_mut(id).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    m
}

pub fn grad_denoiser_block() {
    for seed in 0..SEEDS {
        let m = random_denoiser(seed);
        let all: Vec<_> = m.store.ids().collect();
        // native grid, then a resized embedding grid
        for grid in [(4, 4), (3, 5)] {
            let mut r = rng(seed ^ 0x61);
            let y = random_tensor(&mut r, &[grid.0 * grid.1, 8], 1.0);
            let err = fd_check(&m.store, &all, 16, seed, |t| {
                let yv = t.constant(y.clone());
                let out = forward_on_tape(t, &m, yv, grid)?.out;
                project(t, out, seed)
            });
            assert!(err < TOL, "denoiser {grid:?} seed {seed}: {err:e}");
        }
    }
}

pub fn grad_denoiser_loss() {
    for seed in 0..SEEDS {
        let m = random_denoiser(seed);
        let all: Vec<_> = m.store.ids().collect();
        let mut r = rng(seed ^ 0x62);
        let mut fm = || {
            // a small grid keeps the count of relu kinks near each step low
            let d: Vec<f32> = (0..2 * 3 * 8).map(|_| r.random_range(-1.0f32..1.0)).collect();
            FeatureMap::new(2, 3, 8, d).unwrap()
        };
        let (y, target) = (fm(), fm());
        let err = fd_check(&m.store, &all, 16, seed, |t| pair_loss(t, &m, &y, &target));
        assert!(err < TOL, "denoiser loss seed {seed}: {err:e}");
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn grad_add_sub_mul_with_broadcasts() {
        super::grad_add_sub_mul_with_broadcasts()
    }
    #[test]
    fn grad_scale_transpose_matmul() {
        super::grad_scale_transpose_matmul()
    }
    #[test]
    fn grad_relu_abs() {
        super::grad_relu_abs()
    }
    #[test]
    fn grad_layer_norm() {
        super::grad_layer_norm()
    }
    #[test]
    fn grad_softmax() {
        super::grad_softmax()
    }
    #[test]
    fn grad_gathers() {
        super::grad_gathers()
    }
    #[test]
    fn grad_concat_slice() {
        super::grad_concat_slice()
    }
    #[test]
    fn grad_reductions_and_norms() {
        super::grad_reductions_and_norms()
    }
    #[test]
    fn stop_gradient_blocks_everything() {
        super::stop_gradient_blocks_everything()
    }
    #[test]
    fn grad_semantics_field() {
        super::grad_semantics_field()
    }
    #[test]
    fn grad_residual_predictor() {
        super::grad_residual_predictor()
    }
    #[test]
    fn grad_full_stage1_loss() {
        super::grad_full_stage1_loss()
    }
    #[test]
    fn grad_denoiser_block() {
        super::grad_denoiser_block()
    }
    #[test]
    fn grad_denoiser_loss() {
        super::grad_denoiser_loss()
    }
}
