//! AdamW with decoupled weight decay and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip threshold; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Moments are kept in `f64` regardless of the parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One parameter array and its gradient, addressed by name for diagnostics.
pub struct Param<'a, T> {
    pub name: &'a str,
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [Param<'_, T>]) -> Result<StepStats> {
        adamw_step(self, params)
    }
}

pub fn adamw_step<T: Real>(state: &mut OptimizerState, params: &mut [Param<'_, T>]) -> Result<StepStats> {
    if state.m.is_empty() && state.step == 0 {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::config(format!(
            "optimizer tracks {} arrays, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let mut sq = 0.0;
    for (k, p) in params.iter().enumerate() {
        if p.grad.len() != p.value.len() || state.m[k].len() != p.value.len() {
            return Err(Error::config(format!(
                "{}: value {}, gradient {}, moments {}",
                p.name,
                p.value.len(),
                p.grad.len(),
                state.m[k].len()
            )));
        }
        for &g in p.grad {
            let g = g.as_f64();
            if !g.is_finite() {
                return Err(Error::Numeric {
                    what: format!("gradient of {}", p.name),
                });
            }
            sq += g * g;
        }
    }
    let c = state.config;
    let grad_norm = sq.sqrt();
    let clipped = c.clip_norm > 0.0 && grad_norm > c.clip_norm;
    let gscale = if clipped { c.clip_norm / grad_norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.value.len() {
            let g = p.grad[i].as_f64() * gscale;
            let mut theta = p.value[i].as_f64();
            theta -= c.lr * c.weight_decay * theta;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            theta -= c.lr * mhat / (vhat.sqrt() + c.eps);
            p.value[i] = T::lit(theta);
        }
    }
    Ok(StepStats { grad_norm, clipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one<'a>(name: &'a str, value: &'a mut [f64], grad: &'a [f64]) -> Vec<Param<'a, f64>> {
        vec![Param { name, value, grad }]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(cfg);
        let mut x = vec![0.3, -1.2];
        for _ in 0..5 {
            st.step(&mut one("x", &mut x, &[0.0, 0.0])).unwrap();
        }
        assert_eq!(x, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(cfg);
        let mut x = vec![0.0];
        st.step(&mut one("x", &mut x, &[1.0])).unwrap();
        assert!((x[0] + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, clip_norm: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(cfg);
        let target = [1.5, -0.5, 0.25];
        let mut x = vec![0.0; 3];
        for _ in 0..100 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * (x[i] - target[i])).collect();
            st.step(&mut one("x", &mut x, &g)).unwrap();
        }
        let gap: f64 = (0..3).map(|i| (x[i] - target[i]).powi(2)).sum();
        assert!(gap < 1e-3, "{x:?}");
    }

    #[test]
    fn matches_plain_adam_without_decay() {
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, clip_norm: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(cfg);
        let mut x: Vec<f64> = vec![0.7, -0.4];
        let (mut rx, mut m, mut v) = (x.clone(), [0.0; 2], [0.0; 2]);
        for t in 1..=50 {
            let g: Vec<f64> = x.iter().map(|a| a.sin() + 0.1 * t as f64).collect();
            let rg: Vec<f64> = rx.iter().map(|a: &f64| a.sin() + 0.1 * t as f64).collect();
            st.step(&mut one("x", &mut x, &g)).unwrap();
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * rg[i];
                v[i] = 0.999 * v[i] + 0.001 * rg[i] * rg[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                rx[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((x[i] - rx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_is_decoupled_and_clipping_is_global() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, clip_norm: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(cfg);
        let mut x = vec![2.0];
        st.step(&mut one("x", &mut x, &[0.0])).unwrap();
        assert!((x[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);

        let mut st = OptimizerState::new(AdamWConfig::default());
        let (mut a, mut b) = (vec![0.0], vec![0.0]);
        let mut ps = vec![
            Param { name: "a", value: &mut a, grad: &[3.0] },
            Param { name: "b", value: &mut b, grad: &[4.0] },
        ];
        let s = st.step(&mut ps).unwrap();
        assert_eq!(s.grad_norm, 5.0);
        assert!(s.clipped);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut st = OptimizerState::new(AdamWConfig::default());
        let mut x = vec![0.0];
        match st.step(&mut one("head.bias", &mut x, &[f64::NAN])) {
            Err(Error::Numeric { what }) => assert!(what.contains("head.bias")),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
    }
}
