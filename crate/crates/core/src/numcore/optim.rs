use super::params::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update with learning rate `lr`; `grads` follow store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((t, g), m), v) in store
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(&[1.0, -1.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store, &[vec![2.0, -3.0]], 0.1);
        let x = store.by_name("x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 0.9).abs() < 1e-6);
    }
}
