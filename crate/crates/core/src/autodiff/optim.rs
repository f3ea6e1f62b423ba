//! Adam / AdamW and learning-rate schedules.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tape::{Grad, Gradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero gives plain Adam.
    pub weight_decay: f64,
    /// Update only the rows present in a row-sparse gradient, leaving the
    /// moments of untouched rows alone. Off means standard dense Adam.
    pub lazy_sparse: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lazy_sparse: false,
        }
    }
}

impl AdamConfig {
    pub fn adamw(weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..Default::default()
        }
    }
}

/// Moments and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    #[inline]
    fn update(&mut self, w: &mut f64, g: f64, k: usize, lr: f64, cfg: &AdamConfig, bc1: f64, bc2: f64) {
        if cfg.weight_decay != 0.0 {
            *w -= lr * cfg.weight_decay * *w;
        }
        let m = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
        self.m[k] = m;
        self.v[k] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }

    /// One step over a dense gradient.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
        check_step(param.len(), grad.len(), self.m.len(), lr)?;
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at element {k}; step aborted"
            )));
        }
        self.t += 1;
        let (bc1, bc2) = bias_corrections(cfg, self.t);
        for (k, (w, &g)) in param.iter_mut().zip(grad).enumerate() {
            self.update(w, g, k, lr, cfg, bc1, bc2);
        }
        Ok(())
    }

    fn step_grad(&mut self, param: &mut [f64], grad: &Grad, lr: f64, cfg: &AdamConfig) -> Result<()> {
        match grad {
            Grad::Rows(rows) if cfg.lazy_sparse => {
                check_step(param.len(), param.len(), self.m.len(), lr)?;
                if !grad.is_finite() {
                    return Err(Error::Numeric("non-finite sparse gradient; step aborted".into()));
                }
                self.t += 1;
                let (bc1, bc2) = bias_corrections(cfg, self.t);
                let w = rows.width();
                for (r, vals) in rows.iter() {
                    for (c, &g) in vals.iter().enumerate() {
                        let k = r * w + c;
                        self.update(&mut param[k], g, k, lr, cfg, bc1, bc2);
                    }
                }
                Ok(())
            }
            _ => {
                let dense = grad.to_dense(param.len());
                self.step(param, &dense, lr, cfg)
            }
        }
    }
}

fn bias_corrections(cfg: &AdamConfig, t: u64) -> (f64, f64) {
    let t = t.min(i32::MAX as u64) as i32;
    (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
}

fn check_step(np: usize, ng: usize, ns: usize, lr: f64) -> Result<()> {
    if np != ng || np != ns {
        return Err(Error::contract(
            "adam_step",
            format!("parameter/gradient/state sizes differ: {np}/{ng}/{ns}"),
        ));
    }
    if !(lr > 0.0) {
        return Err(Error::contract("adam_step", format!("learning rate {lr} must be positive")));
    }
    Ok(())
}

/// Adam over a subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: Vec::new(),
        }
    }

    /// Forgets the moments of `ids` so their next step starts fresh.
    pub fn reset(&mut self, ids: &[ParamId]) {
        for id in ids {
            if let Some(s) = self.states.get_mut(id.0) {
                *s = None;
            }
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(id.0).and_then(|s| s.as_ref())
    }

    /// Steps every parameter in `ids`. A parameter without a gradient is
    /// stepped with zeros (its moments still decay), matching dense Adam.
    /// All gradients are checked before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for {}; step aborted",
                        store.name(id)
                    )));
                }
            }
        }
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        for &id in ids {
            let n = store.get(id).numel();
            let state = self.states[id.0].get_or_insert_with(|| AdamState::new(n));
            let param = store.get_mut(id).data_mut();
            match grads.get(id) {
                Some(g) => state.step_grad(param, g, lr, &self.config)?,
                None if self.config.lazy_sparse => {}
                None => state.step(param, &vec![0.0; n], lr, &self.config)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Linear decay towards a floor of 1% of the base rate.
    Linear,
    /// Half-cosine from the base rate to zero.
    Cosine,
}

pub const LINEAR_FLOOR: f64 = 0.01;

pub fn lr_schedule(kind: Schedule, step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("lr_schedule", "total steps must be positive"));
    }
    if step > total {
        return Err(Error::contract(
            "lr_schedule",
            format!("step {step} beyond total {total}"),
        ));
    }
    let frac = step as f64 / total as f64;
    Ok(match kind {
        Schedule::Linear => (lr0 * (1.0 - frac)).max(lr0 * LINEAR_FLOOR),
        Schedule::Cosine => lr0 * 0.5 * (1.0 + (PI * frac).cos()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_by_hand() {
        let mut w = [1.0];
        let mut s = AdamState::new(1);
        s.step(&mut w, &[0.5], 0.01, &AdamConfig::default()).unwrap();
        // m_hat = 0.5, v_hat = 0.25 -> w = 1 - 0.01 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((w[0] - 0.99).abs() < 1e-7);
        assert!((s.m[0] / (1.0 - 0.9) - 0.5).abs() < 1e-12);
        assert!((s.v[0] / (1.0 - 0.999) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_param_and_counts_step() {
        let mut w = [2.5, -1.0];
        let mut s = AdamState::new(2);
        s.step(&mut w, &[0.0, 0.0], 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(w, [2.5, -1.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adamw_pure_decay() {
        let mut w = [1.0];
        let mut s = AdamState::new(1);
        s.step(&mut w, &[0.0], 0.1, &AdamConfig::adamw(0.1)).unwrap();
        assert!((w[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adamw_without_decay_equals_adam() {
        let grads = [0.3, -1.2, 4.0];
        let mut a = [0.1, 0.2, 0.3];
        let mut b = a;
        let (mut sa, mut sb) = (AdamState::new(3), AdamState::new(3));
        for _ in 0..5 {
            sa.step(&mut a, &grads, 0.05, &AdamConfig::default()).unwrap();
            sb.step(&mut b, &grads, 0.05, &AdamConfig::adamw(0.0)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut w = [0.7, -0.4];
            let mut s = AdamState::new(2);
            for k in 0..10 {
                let g = [(k as f64).sin(), (k as f64).cos()];
                s.step(&mut w, &g, 0.01, &AdamConfig::adamw(0.05)).unwrap();
            }
            (w, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut w = [1.0, 2.0];
        let mut s = AdamState::new(2);
        let err = s.step(&mut w, &[0.1, f64::NAN], 0.01, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(w, [1.0, 2.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn schedules() {
        let lr0 = 0.01;
        assert_eq!(lr_schedule(Schedule::Cosine, 0, 100, lr0).unwrap(), lr0);
        assert!(lr_schedule(Schedule::Cosine, 100, 100, lr0).unwrap().abs() < 1e-18);
        assert!((lr_schedule(Schedule::Cosine, 50, 100, lr0).unwrap() - lr0 / 2.0).abs() < 1e-15);
        assert!((lr_schedule(Schedule::Linear, 50, 100, lr0).unwrap() - lr0 / 2.0).abs() < 1e-15);
        assert!((lr_schedule(Schedule::Linear, 100, 100, lr0).unwrap() - lr0 * 0.01).abs() < 1e-15);
        assert!(lr_schedule(Schedule::Linear, 0, 0, lr0).is_err());
    }
}
