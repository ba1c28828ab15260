use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerRule {
    Adadelta,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub rule: OptimizerRule,
    pub learning_rate: f64,
    /// Adadelta decay.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adadelta(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adadelta(learning_rate: f64) -> Self {
        Self {
            rule: OptimizerRule::Adadelta,
            learning_rate,
            rho: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            rule: OptimizerRule::Adam,
            learning_rate,
            rho: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.rho)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-coordinate accumulators for one parameter set.
///
/// Adadelta keeps `E[g²]` in `second` and `E[Δ²]` in `delta_sq`; Adam keeps
/// its first and second moments in `first` and `second`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub delta_sq: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
            delta_sq: Vec::new(),
        }
    }

    fn ensure_shapes(&mut self, grads: &[&[f64]]) -> Result<()> {
        let shapes_match =
            |acc: &Vec<Vec<f64>>| acc.len() == grads.len() && acc.iter().zip(grads).all(|(a, g)| a.len() == g.len());
        if self.second.is_empty() {
            let zeros = || grads.iter().map(|g| vec![0.0; g.len()]).collect::<Vec<_>>();
            self.second = zeros();
            match self.config.rule {
                OptimizerRule::Adadelta => self.delta_sq = zeros(),
                OptimizerRule::Adam => self.first = zeros(),
            }
        } else if !shapes_match(&self.second) {
            return Err(Error::input("gradient shapes changed between optimizer steps"));
        }
        Ok(())
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::input("parameter and gradient shapes differ"));
        }
        self.ensure_shapes(grads)?;
        self.step_count += 1;
        let c = self.config;
        match c.rule {
            OptimizerRule::Adadelta => {
                for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let eg = &mut self.second[t];
                    let ed = &mut self.delta_sq[t];
                    for i in 0..p.len() {
                        let gi = g[i];
                        eg[i] = c.rho * eg[i] + (1.0 - c.rho) * gi * gi;
                        let delta = -c.learning_rate * ((ed[i] + c.epsilon).sqrt() / (eg[i] + c.epsilon).sqrt()) * gi;
                        ed[i] = c.rho * ed[i] + (1.0 - c.rho) * delta * delta;
                        p[i] += delta;
                    }
                }
            }
            OptimizerRule::Adam => {
                let t_pow = self.step_count as i32;
                let bc1 = 1.0 - c.beta1.powi(t_pow);
                let bc2 = 1.0 - c.beta2.powi(t_pow);
                for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[t];
                    let v = &mut self.second[t];
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(state: &mut OptimizerState, p: &mut f64, g: f64) {
        let mut buf = [*p];
        state.step(&mut [&mut buf[..]], &[&[g][..]]).unwrap();
        *p = buf[0];
    }

    #[test]
    fn adadelta_zero_gradient_only_decays() {
        let mut st = OptimizerState::new(OptimizerConfig::adadelta(1e-3));
        let mut p = 0.7;
        step_scalar(&mut st, &mut p, 1.0);
        let (eg, ed) = (st.second[0][0], st.delta_sq[0][0]);
        let before = p;
        step_scalar(&mut st, &mut p, 0.0);
        assert_eq!(p, before);
        assert_eq!(st.second[0][0], 0.95 * eg);
        assert_eq!(st.delta_sq[0][0], 0.95 * ed);
    }

    #[test]
    fn adadelta_first_step_value() {
        let mut st = OptimizerState::new(OptimizerConfig::adadelta(1e-3));
        let mut p = 0.0;
        step_scalar(&mut st, &mut p, 1.0);
        let expected = -1e-3 * (1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((p - expected).abs() < 1e-18);
        assert!((p + 4.472e-6).abs() < 1e-9);
    }

    #[test]
    fn adadelta_two_step_recurrence() {
        let (rho, eps, lr) = (0.95, 1e-6, 1e-3);
        let gs = [0.8, -0.3];
        let (mut eg, mut ed, mut x) = (0.0f64, 0.0f64, 1.5f64);
        for g in gs {
            eg = rho * eg + (1.0 - rho) * g * g;
            let d = -lr * ((ed + eps).sqrt() / (eg + eps).sqrt()) * g;
            ed = rho * ed + (1.0 - rho) * d * d;
            x += d;
        }
        let mut st = OptimizerState::new(OptimizerConfig::adadelta(lr));
        let mut p = 1.5;
        for g in gs {
            step_scalar(&mut st, &mut p, g);
        }
        assert!((p - x).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_first_step_is_noop() {
        let mut st = OptimizerState::new(OptimizerConfig::adam(1e-3));
        let mut p = 2.0;
        step_scalar(&mut st, &mut p, 0.0);
        assert_eq!(p, 2.0);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut st = OptimizerState::new(OptimizerConfig::adam(1e-3));
        let mut p = 0.0;
        step_scalar(&mut st, &mut p, 1.0);
        assert!((p + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        for g in [2.5, -0.1] {
            let mut st = OptimizerState::new(OptimizerConfig::adam(1e-2));
            let mut p = 0.0;
            for _ in 0..10 {
                let before = p;
                step_scalar(&mut st, &mut p, g);
                assert!((p - before) * g < 0.0);
            }
        }
    }

    #[test]
    fn shape_changes_are_rejected() {
        let mut st = OptimizerState::new(OptimizerConfig::adam(1e-3));
        let mut a = [0.0, 0.0];
        st.step(&mut [&mut a[..]], &[&[1.0, 1.0][..]]).unwrap();
        let mut b = [0.0];
        assert!(st.step(&mut [&mut b[..]], &[&[1.0][..]]).is_err());
    }
}
