use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Adam with bias correction. Moments are allocated lazily on the first step
/// and must keep matching the parameter list afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter and zeroes the gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(i));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.len()) {
            return Err(TensorError::Invalid {
                op: "adam",
                message: "parameter list changed between steps".into(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.as_mut().expect("checked above");
            let data = &mut p.data;
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            grad.fill(0.0);
        }
        Ok(())
    }
}

pub fn global_grad_norm<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    params
        .into_iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients when their global L2 norm exceeds `max_norm`;
/// returns the factor applied (1.0 when untouched).
pub fn clip_grad_norm<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    let norm = global_grad_norm(params.iter().map(|p| &**p));
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.grad.as_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(vec![data.len()], data.to_vec()).unwrap().param();
        t.grad = Some(grad.to_vec());
        t
    }

    #[test]
    fn zero_grad_no_move() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(0.1);
        adam.step([&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps)
        let mut p = param(&[0.0], &[1.0]);
        let mut adam = Adam::new(0.1);
        adam.step([&mut p]).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(p.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn counter_increments() {
        let mut p = param(&[0.0], &[0.5]);
        let mut adam = Adam::new(0.01);
        for k in 1..=3 {
            p.grad = Some(vec![0.5]);
            adam.step([&mut p]).unwrap();
            assert_eq!(adam.t, k);
        }
    }

    #[test]
    fn missing_grad_is_error() {
        let mut p = Tensor::zeros(&[2]);
        assert_eq!(Adam::new(0.1).step([&mut p]), Err(TensorError::MissingGrad(0)));
    }

    #[test]
    fn clipping() {
        let mut p = param(&[0.0, 0.0], &[0.3, 0.4]);
        assert_eq!(clip_grad_norm([&mut p], 1.0), 1.0);
        assert_eq!(p.grad.as_deref(), Some(&[0.3, 0.4][..]));
        let mut p = param(&[0.0, 0.0], &[3.0, 4.0]);
        let s = clip_grad_norm([&mut p], 1.0);
        assert!((s - 0.2).abs() < 1e-15);
        let g = p.grad.as_deref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
