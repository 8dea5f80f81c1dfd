//! Stochastic gradient descent with classical momentum.

use crate::tensor::Tensor;

/// `v ← m·v + g; p ← p − lr·v`. Gradients are zeroed after each step.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Update every parameter in place. The parameter list must keep the
    /// same order and shapes across steps; buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(
            self.velocity.len(),
            params.len(),
            "parameter list changed between steps"
        );
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            assert_eq!(p.numel(), v.len(), "parameter shape changed between steps");
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for ((vel, g), x) in v.iter_mut().zip(&grad).zip(p.data_mut()) {
                *vel = self.momentum * *vel + g;
                *x -= self.lr * *vel;
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update_hand_case() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().with_grad();
        p.accumulate_grad(&[0.5]);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        {
            let mut params = [&mut p];
            opt.step(&mut params);
        }
        // v = 0.5, p = 1 − 0.1·0.5 = 0.95; grad zeroed.
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);

        p.accumulate_grad(&[0.5]);
        {
            let mut params = [&mut p];
            opt.step(&mut params);
        }
        // v = 0.9·0.5 + 0.5 = 0.95, p = 0.95 − 0.095 = 0.855.
        assert!((p.data()[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Tensor::new(vec![2], vec![2.0, -1.0]).unwrap().with_grad();
        p.accumulate_grad(&[1.0, -2.0]);
        let mut opt = SgdMomentum::new(0.5, 0.0);
        let mut params = [&mut p];
        opt.step(&mut params);
        assert_eq!(p.data(), &[1.5, 0.0]);
    }
}
