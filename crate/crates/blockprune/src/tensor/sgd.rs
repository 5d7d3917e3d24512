//! SGD with momentum and (coupled) weight decay.

use crate::error::{Error, Result};

/// Per-parameter velocity state plus the update rule
///
/// ```text
/// v <- momentum * v + grad + weight_decay * p
/// p <- p - lr * v
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, param_sizes: &[usize]) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArg(format!("sgd lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArg(format!(
                "sgd momentum must be in [0,1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArg(format!(
                "sgd weight_decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Update one parameter in place. `keep`, when given, freezes every
    /// element whose entry is 0: neither the value nor its velocity moves,
    /// so pruned blocks receive no updates at all.
    pub fn step_param(
        &mut self,
        idx: usize,
        name: &str,
        param: &mut [f64],
        grad: &[f64],
        keep: Option<&[f64]>,
    ) -> Result<()> {
        let vel = &mut self.velocity[idx];
        if param.len() != grad.len() || param.len() != vel.len() {
            return Err(Error::InvalidArg(format!(
                "sgd step on {name}: param {} / grad {} / velocity {}",
                param.len(),
                grad.len(),
                vel.len()
            )));
        }
        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name} at element {bad}: {}",
                grad[bad]
            )));
        }
        for e in 0..param.len() {
            if let Some(k) = keep {
                if k[e] == 0.0 {
                    continue;
                }
            }
            let v = self.momentum * vel[e] + grad[e] + self.weight_decay * param[e];
            vel[e] = v;
            param[e] -= self.lr * v;
        }
        Ok(())
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, idx: usize, v: Vec<f64>) -> Result<()> {
        if self.velocity[idx].len() != v.len() {
            return Err(Error::InvalidArg(format!(
                "velocity restore: expected {} elements, got {}",
                self.velocity[idx].len(),
                v.len()
            )));
        }
        self.velocity[idx] = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut opt = Sgd::new(0.1, 0.0, 0.0, &[1]).unwrap();
        let mut p = [1.0];
        opt.step_param(0, "p", &mut p, &[1.0], None).unwrap();
        assert_eq!(p[0], 0.9);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut opt = Sgd::new(0.1, 0.9, 0.0, &[1]).unwrap();
        let mut p = [0.0];
        opt.step_param(0, "p", &mut p, &[1.0], None).unwrap();
        assert!((p[0] - (-0.1)).abs() < 1e-15);
        opt.step_param(0, "p", &mut p, &[1.0], None).unwrap();
        assert!((p[0] - (-0.29)).abs() < 1e-15, "p = {}", p[0]);
    }

    #[test]
    fn weight_decay_only() {
        let mut opt = Sgd::new(0.1, 0.0, 0.5, &[1]).unwrap();
        let mut p = [2.0];
        opt.step_param(0, "p", &mut p, &[0.0], None).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = Sgd::new(0.1, 0.0, 0.0, &[2]).unwrap();
        let mut p = [1.0, 1.0];
        let err = opt.step_param(0, "w", &mut p, &[0.0, f64::NAN], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("w") && msg.contains("element 1"), "{msg}");
    }

    #[test]
    fn frozen_elements_keep_value_and_velocity() {
        let mut opt = Sgd::new(0.1, 0.9, 0.1, &[2]).unwrap();
        let mut p = [1.0, 1.0];
        opt.step_param(0, "p", &mut p, &[1.0, 1.0], Some(&[1.0, 0.0])).unwrap();
        assert_ne!(p[0], 1.0);
        assert_eq!(p[1], 1.0);
        assert_eq!(opt.velocities()[0][1], 0.0);
    }
}
