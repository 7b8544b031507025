use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Learning rate after stepwise decay: `base · factor^⌊epoch / interval⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            factor: 0.95,
            interval: 10,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let steps = epoch / self.interval.max(1);
        self.base * self.factor.powi(steps.min(i32::MAX as usize) as i32)
    }
}

/// Default decay (5% every 10 epochs) applied to `base`.
pub fn schedule_lr(epoch: usize, base: f64) -> f64 {
    LrSchedule {
        base,
        ..LrSchedule::default()
    }
    .at(epoch)
}

/// Adam over a single flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Result<Self> {
        let mut opt = Self {
            lr: 1.0,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        };
        opt.set_lr(lr)?;
        Ok(opt)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::domain("Adam", format!("learning rate {lr} must be positive")));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                op: "Adam::step",
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_values() {
        assert_eq!(schedule_lr(0, 0.001), 0.001);
        assert_eq!(schedule_lr(9, 0.001), 0.001);
        assert!((schedule_lr(10, 0.001) - 0.00095).abs() < 1e-18);
        assert!((schedule_lr(100, 0.001) - 5.987369392383789e-4).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::new(3, 0.01).unwrap();
        let mut p = vec![1.0, -2.0, 3.0];
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut opt = Adam::new(2, 0.01).unwrap();
        let mut p = vec![0.0; 2];
        assert!(matches!(opt.step(&mut p, &[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(Adam::new(2, 0.0).is_err());
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x, y) = 3(x − 1)² + 0.5(y + 2)²
        let grad = |p: &[f64]| vec![6.0 * (p[0] - 1.0), p[1] + 2.0];
        let dist = |p: &[f64]| ((p[0] - 1.0).powi(2) + (p[1] + 2.0).powi(2)).sqrt();
        let mut p = vec![4.0, 3.0];
        let start = dist(&p);
        let mut opt = Adam::new(2, 0.05).unwrap();
        for _ in 0..100 {
            let g = grad(&p);
            opt.step(&mut p, &g).unwrap();
        }
        assert!(dist(&p) < start);
    }

    proptest! {
        #[test]
        fn first_step_moves_by_lr_against_sign(g in prop::collection::vec(-1e6f64..1e6, 1..8), lr in 1e-5f64..1.0) {
            let mut opt = Adam::new(g.len(), lr).unwrap();
            let mut p = vec![0.0; g.len()];
            opt.step(&mut p, &g).unwrap();
            for (delta, gi) in p.iter().zip(&g) {
                prop_assert!(delta.abs() <= lr * (1.0 + 1e-6));
                if gi.abs() > 1e-3 {
                    prop_assert!((delta + lr * gi.signum()).abs() <= lr * 1e-4);
                }
            }
        }
    }
}
