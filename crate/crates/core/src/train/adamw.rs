//! AdamW with decoupled weight decay and two parameter groups.

use serde::{Deserialize, Serialize};

use crate::model::params::{ParamGroup, ParamStore};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay applied to the main group.
    pub weight_decay: f64,
    /// Decay applied to the LIF group.
    pub weight_decay_lif: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, weight_decay_lif: 0.0 }
    }
}

/// Learning rate of each group for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLr {
    pub main: f64,
    pub lif: f64,
}

impl GroupLr {
    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.main,
            ParamGroup::Lif => self.lif,
        }
    }
}

/// Moments in parameter order, plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| p.value.map(|_| T::zero())).collect::<Vec<_>>();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update. A `None` gradient counts as zero.
///
/// Per element, with `t` the new step count:
/// `theta -= lr * wd * theta`, then the usual bias-corrected Adam step.
/// Arithmetic runs in `f64` and is rounded once into `T`.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Option<&Tensor<T>>],
    state: &mut OptimState<T>,
    lr: GroupLr,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::Invalid {
            op: "adamw",
            msg: format!("{} parameters, {} gradients, {} moments", store.len(), grads.len(), state.m.len()),
        });
    }
    for (p, g) in store.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch { op: "adamw", lhs: p.value.shape(), rhs: g.shape() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let lr_p = lr.of(p.group);
        let wd = match p.group {
            ParamGroup::Main => cfg.weight_decay,
            ParamGroup::Lif => cfg.weight_decay_lif,
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].map(Tensor::data);
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j].as_f64());
            let mut th = theta.as_f64();
            th -= lr_p * wd * th;
            let mj = cfg.beta1 * m[j].as_f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].as_f64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            th -= lr_p * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *theta = T::lit(th);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, group: ParamGroup) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v), group);
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(1.0, ParamGroup::Main);
        let mut st = OptimState::new(&s);
        let g = Tensor::scalar(1.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, &[Some(&g)], &mut st, GroupLr { main: 0.1, lif: 0.0 }, &cfg).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(crate::model::params::ParamId(0)).item().unwrap() - expect).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_and_pure_decay() {
        let mut s = store(2.0, ParamGroup::Main);
        let mut st = OptimState::new(&s);
        let lr = GroupLr { main: 0.1, lif: 0.1 };
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut s, &[None], &mut st, lr, &cfg).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.item().unwrap(), 2.0);

        let cfg = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut expect = 2.0;
        for _ in 0..5 {
            adamw_step(&mut s, &[None], &mut st, lr, &cfg).unwrap();
            expect *= 1.0 - 0.001;
            assert!((s.iter().next().unwrap().value.item().unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lif_group_is_not_decayed() {
        let mut s = store(0.25, ParamGroup::Lif);
        let mut st = OptimState::new(&s);
        adamw_step(&mut s, &[None], &mut st, GroupLr { main: 0.1, lif: 0.1 }, &AdamWConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item().unwrap(), 0.25);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store(1.0, ParamGroup::Main);
        let mut st = OptimState::new(&s);
        let g = Tensor::zeros([1, 2, 1, 1]).unwrap();
        assert!(adamw_step(&mut s, &[Some(&g)], &mut st, GroupLr { main: 0.1, lif: 0.1 }, &AdamWConfig::default()).is_err());
        assert!(adamw_step(&mut s, &[], &mut st, GroupLr { main: 0.1, lif: 0.1 }, &AdamWConfig::default()).is_err());
    }
}
