use serde::{Deserialize, Serialize};

use super::{Gradient, ParamVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, batch_size: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            batch_size,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64, batch_size: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::sgd(learning_rate, batch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        // a zero rate is allowed: it freezes the dynamics, which is a useful control
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidInput(format!("weight decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Small-step, decay-free SGD: the setting the diffusion picture is about.
    pub fn in_theory_regime(&self) -> bool {
        self.kind == OptimizerKind::Sgd && self.learning_rate <= 0.01 && self.weight_decay == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    /// AdamW first and second moments; empty for SGD.
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

/// Apply one update in place. SGD folds weight decay into the gradient;
/// AdamW decays the weights directly.
pub fn optimizer_step(
    params: &mut ParamVector,
    grad: &Gradient,
    opt: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<()> {
    if grad.values.len() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "gradient of length {} for {} parameters",
            grad.values.len(),
            params.dim()
        )));
    }
    if grad.values.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalOverflow("non-finite gradient".into()));
    }
    let lr = opt.learning_rate;
    state.step += 1;
    match opt.kind {
        OptimizerKind::Sgd => {
            let wd = opt.weight_decay;
            for (w, g) in params.values.iter_mut().zip(&grad.values) {
                *w -= lr * (g + wd * *w);
            }
        }
        OptimizerKind::Adamw => {
            let n = params.dim();
            if state.first_moment.len() != n {
                state.first_moment = vec![0.0; n];
                state.second_moment = vec![0.0; n];
            }
            let t = state.step as i32;
            let c1 = 1.0 - opt.beta1.powi(t);
            let c2 = 1.0 - opt.beta2.powi(t);
            for i in 0..n {
                let g = grad.values[i];
                let w = &mut params.values[i];
                *w -= lr * opt.weight_decay * *w;
                let m = &mut state.first_moment[i];
                let v = &mut state.second_moment[i];
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + opt.epsilon);
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::NumericalOverflow("parameters became non-finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn pv(values: Vec<f64>) -> ParamVector {
        let arch = Architecture::new(vec![1, 1]).unwrap();
        ParamVector::from_values(&arch, values).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = pv(vec![0.3, -1.2]);
        let before = p.clone();
        let mut st = OptimizerState::default();
        optimizer_step(&mut p, &Gradient { values: vec![0.0, 0.0] }, &OptimizerConfig::sgd(0.5, 1), &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = pv(vec![1.0, 1.0]);
        let mut st = OptimizerState::default();
        optimizer_step(&mut p, &Gradient { values: vec![2.0, -4.0] }, &OptimizerConfig::sgd(0.1, 1), &mut st).unwrap();
        assert!((p.values[0] - 0.8).abs() < 1e-15);
        assert!((p.values[1] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let (lr, wd, eps) = (0.01, 0.1, 1e-8);
        let w0 = [0.5, -2.0];
        let g = [0.3, -0.004];
        let mut p = pv(w0.to_vec());
        let mut st = OptimizerState::default();
        let cfg = OptimizerConfig {
            epsilon: eps,
            ..OptimizerConfig::adamw(lr, wd, 1)
        };
        optimizer_step(&mut p, &Gradient { values: g.to_vec() }, &cfg, &mut st).unwrap();
        // after bias correction m_hat = g and v_hat = g^2 on the first step
        for i in 0..2 {
            let expected = w0[i] * (1.0 - lr * wd) - lr * g[i] / (g[i].abs() + eps);
            assert!((p.values[i] - expected).abs() < 1e-15, "{} vs {expected}", p.values[i]);
        }
    }

    #[test]
    fn theory_regime_flag() {
        assert!(OptimizerConfig::sgd(0.001, 256).in_theory_regime());
        assert!(!OptimizerConfig::sgd(0.1, 256).in_theory_regime());
        assert!(!OptimizerConfig::adamw(0.001, 0.0, 256).in_theory_regime());
    }
}
