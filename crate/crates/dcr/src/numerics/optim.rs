use super::params::ParamSet;
use super::tensor::Tensor;

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every non-frozen parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = (0..params.len())
                .map(|i| vec![0.0; params.get(super::params::ParamId(i)).len()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let id = super::params::ParamId(i);
            let Some(grad) = grad else { continue };
            if params.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(id).data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Sum of squared entries over all present gradients.
pub fn grad_sq_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::sq_norm).sum()
}
