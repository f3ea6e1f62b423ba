#![allow(dead_code)]

use dvt_core::autodiff::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use dvt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step, applied in double precision.
pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Scalar `mean(v * w)` for a fixed random `w`, giving every output element
/// its own upstream gradient.
pub fn project(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed ^ 0xabcdef);
    let w = tape.constant(random_tensor(&mut r, &shape, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.reduce_mean(p))
}

/// Largest relative error between backward and central differences over up
/// to `per_param` sampled entries of every parameter in `ids`.
pub fn fd_check<F>(store: &ParamStore, ids: &[ParamId], per_param: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape).unwrap();
        tape.backward(loss).unwrap()
    };
    fd_check_against(store, ids, per_param, seed, &grads, f)
}

/// As [`fd_check`] with the analytic gradient supplied, so `f` may be a
/// surrogate whose plain derivative equals it.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// entries whose true derivative is zero from dividing by round-off. An
/// entry whose perturbation flips a `relu` or `abs` input is skipped: the
/// function is not differentiable across that kink. At most half of the
/// sampled entries may be skipped.
pub fn fd_check_against<F>(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    seed: u64,
    grads: &Gradients,
    f: F,
) -> f64
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> (f64, Vec<bool>) {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape).unwrap();
        (tape.value(loss).item(), tape.activation_pattern())
    };
    let base = eval(store).1;
    let mut r = rng(seed ^ 0x77);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    let mut work = store.clone();
    for &id in ids {
        let n = store.get(id).numel();
        let analytic = grads.dense(id, n);
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..n)).collect()
        };
        for k in picks {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let (up, pu) = eval(&work);
            work.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let (down, pd) = eval(&work);
            work.get_mut(id).data_mut()[k] = orig;
            if pu != base || pd != base {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    assert!(skipped <= checked, "{skipped} of {} entries sit on kinks", skipped + checked);
    worst
}
