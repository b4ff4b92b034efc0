use crate::numerics::Tensor;

/// Adam with bias correction, one moment pair per trainable tensor.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, tensor_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: tensor_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: tensor_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One update over the census-ordered tensors and their gradients.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, param) in params.iter_mut().enumerate() {
            let g = grads[idx].data();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
