//! AdamW with decoupled weight decay and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EndxError, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    LinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    /// Only read by the linear-decay schedule. Zero lets the trainer fill it in.
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            schedule: ScheduleKind::Constant,
            total_steps: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EndxError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate after `step` of `total_steps` optimizer steps.
pub fn schedule_value(kind: ScheduleKind, step: u64, total_steps: u64, base: f64) -> Result<f64> {
    match kind {
        ScheduleKind::Constant => Ok(base),
        ScheduleKind::LinearDecay => {
            if total_steps == 0 {
                return Err(EndxError::Config("linear-decay schedule needs total_steps > 0".into()));
            }
            let frac = (step.min(total_steps)) as f64 / total_steps as f64;
            Ok(base * (1.0 - frac))
        }
    }
}

/// One AdamW update at zero-based `step`. Returns the learning rate used.
///
/// Weight decay is applied to the weights directly, scaled by the current
/// learning rate, and never enters the moment estimates. Parameters without
/// an entry in `grads` are left untouched, decay included.
pub fn optimizer_step<F: Real>(
    params: &mut ParameterStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    cfg: &OptimizerConfig,
    step: u64,
) -> Result<f64> {
    if let Some(unknown) = grads.keys().find(|k| !params.contains(k)) {
        return Err(EndxError::Invalid(format!("gradient for unknown parameter {unknown}")));
    }
    let lr = schedule_value(cfg.schedule, step, cfg.total_steps, cfg.learning_rate)?;
    let t = (step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (one, eps) = (F::one(), F::lit(cfg.epsilon));
    let (lr_f, decay) = (F::lit(lr), F::lit(lr * cfg.weight_decay));
    let (bc1, bc2) = (F::lit(bc1), F::lit(bc2));

    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.value.shape() {
            return Err(EndxError::Shape(format!("gradient {:?} for parameter {name} {:?}", g.shape(), p.value.shape())));
        }
        let n = p.value.len();
        for i in 0..n {
            let gi = g.data()[i];
            let m = b1 * p.first_moment.data()[i] + (one - b1) * gi;
            let v = b2 * p.second_moment.data()[i] + (one - b2) * gi * gi;
            p.first_moment.data_mut()[i] = m;
            p.second_moment.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let w = p.value.data()[i];
            p.value.data_mut()[i] = w - decay * w - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.step = step + 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::from_f64(&[2], &[v, -v]).unwrap()).unwrap();
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::from_f64(&[2], &[g, g]).unwrap())])
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut s = store(1.5);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        for step in 0..5 {
            optimizer_step(&mut s, &grads(0.0), &cfg, step).unwrap();
        }
        assert_eq!(s.get("p").unwrap().data(), &[1.5, -1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected first step: m̂ = g, v̂ = g², so Δ = -lr·g/(|g|+ε).
        let mut s = store(1.0);
        let cfg = OptimizerConfig { learning_rate: 0.1, weight_decay: 0.0, ..Default::default() };
        optimizer_step(&mut s, &grads(1.0), &cfg, 0).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((s.get("p").unwrap().data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut s = store(2.0);
        let cfg = OptimizerConfig { learning_rate: 0.1, weight_decay: 0.01, ..Default::default() };
        for step in 0..10 {
            optimizer_step(&mut s, &grads(0.0), &cfg, step).unwrap();
            let want = 2.0 * (1.0f64 - 0.001).powi(step as i32 + 1);
            assert!((s.get("p").unwrap().data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_gradient_is_rejected() {
        let mut s = store(1.0);
        let g = BTreeMap::from([("q".to_string(), Tensor::zeros(&[2]))]);
        assert!(optimizer_step(&mut s, &g, &OptimizerConfig::default(), 0).is_err());
    }

    #[test]
    fn schedules() {
        use ScheduleKind::*;
        assert_eq!(schedule_value(Constant, 7, 0, 0.3).unwrap(), 0.3);
        assert_eq!(schedule_value(LinearDecay, 0, 100, 2e-5).unwrap(), 2e-5);
        assert_eq!(schedule_value(LinearDecay, 100, 100, 2e-5).unwrap(), 0.0);
        assert!((schedule_value(LinearDecay, 25, 100, 2e-5).unwrap() - 1.5e-5).abs() < 1e-20);
        assert!(schedule_value(LinearDecay, 0, 0, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
    }
}
