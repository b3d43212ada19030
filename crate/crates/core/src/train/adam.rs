//! Adam with bias correction and a linearly decaying learning rate.

use serde::{Deserialize, Serialize};

/// Learning rate moving linearly from `base` at iteration 0 to `last` at
/// iteration `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base: f64,
    pub last: f64,
    pub total: usize,
}

impl LinearSchedule {
    pub fn lr(&self, iter: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let f = iter.min(self.total) as f64 / self.total as f64;
        self.base * (1.0 - f) + self.last * f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moment buffers shaped like `groups`.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. Returns `false` and leaves everything untouched
    /// when a gradient is non-finite or shapes disagree.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> bool {
        let shapes_ok = params.len() == self.m.len()
            && grads.len() == self.m.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.len() == m.len() && g.len() == m.len());
        if !shapes_ok || !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
            return false;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_square() {
        let mut w = vec![1.0];
        let mut opt = Adam::new(&[1]);
        for _ in 0..500 {
            let g = vec![2.0 * w[0]];
            assert!(opt.step(&mut [&mut w], &[&g], 0.1));
        }
        assert!(w[0].abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        let mut w = vec![0.5, -2.0];
        let mut opt = Adam::new(&[2]);
        opt.m[0] = vec![0.0, 0.0];
        assert!(opt.step(&mut [&mut w], &[&[0.0, 0.0]], 0.1));
        assert_eq!(w, vec![0.5, -2.0]);

        opt.m[0] = vec![1.0, 1.0];
        opt.v[0] = vec![1.0, 1.0];
        let mut frozen = vec![0.0; 2];
        let mut o2 = opt.clone();
        o2.step(&mut [&mut frozen], &[&[0.0, 0.0]], 0.0);
        assert_eq!(o2.m[0], vec![0.9, 0.9]);
        assert_eq!(o2.v[0], vec![0.999, 0.999]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut w = vec![1.0];
        let mut opt = Adam::new(&[1]);
        assert!(!opt.step(&mut [&mut w], &[&[f64::NAN]], 0.1));
        assert_eq!((w[0], opt.t), (1.0, 0));
        assert!(!opt.step(&mut [&mut w], &[&[1.0, 2.0]], 0.1));
    }

    #[test]
    fn schedule_is_linear() {
        let s = LinearSchedule {
            base: 5e-4,
            last: 5e-5,
            total: 20_000,
        };
        assert_eq!(s.lr(0), 5e-4);
        assert_eq!(s.lr(20_000), 5e-5);
        assert!((s.lr(10_000) - 0.5 * (5e-4 + 5e-5)).abs() < 1e-18);
        let d1 = s.lr(101) - s.lr(100);
        let d2 = s.lr(7001) - s.lr(7000);
        assert!((d1 - d2).abs() < 1e-18);
    }
}
