use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th stored parameter;
    /// `None` entries leave that parameter (and its moments) untouched.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[1.0, -2.0])).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(&store, 0.0);
        adam.step(&mut store, &[Some(Tensor::vector(&[0.3, 0.1]))]);
        assert_eq!(store.iter().next().unwrap().1, before.iter().next().unwrap().1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[0.0, 0.0])).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Some(Tensor::vector(&[2.0, -5.0]))]);
        let w = store.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[0.0])).unwrap();
        let mut adam = Adam::new(&store, 0.1).with_clip_norm(Some(1.0));
        let n = adam.step(&mut store, &[Some(Tensor::vector(&[10.0]))]);
        assert_eq!(n, 10.0);
    }
}
