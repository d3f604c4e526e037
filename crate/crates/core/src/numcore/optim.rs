use super::params::{GradStore, ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_encoder: 1e-3,
            lr_head: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are created lazily, so
/// parameters appended to the store after construction are picked up.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.config.lr_encoder,
            ParamGroup::Head => self.config.lr_head,
        }
    }

    /// Apply one update. `lr_scale` multiplies both group learning rates
    /// (used by the optional warmup/cosine schedule). Parameters without a
    /// gradient, or whose group learning rate is zero, are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr_scale: f64) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::InvalidArgument("optimizer step without gradients".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config.clone();
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.group)).collect();
        for (id, group) in ids {
            let Some(g) = grads.get(id) else { continue };
            let lr = self.lr_for(group) * lr_scale;
            if lr == 0.0 {
                continue;
            }
            let p = store.value_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w -= lr * c.weight_decay * *w;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero, as a multiplier on the base rate.
pub fn warmup_cosine(step: u64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return 1.0;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::params::ParamId;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Encoder, Tensor::scalar(w)).unwrap();
        (s, id)
    }

    fn cfg(lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr_encoder: lr,
            lr_head: lr,
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn one_step_descends_quadratic() {
        let (mut s, id) = scalar_store(1.0);
        let mut grads = GradStore::new();
        grads.accumulate(id, &Tensor::scalar(2.0)); // d/dw w^2 at 1
        let mut opt = AdamW::new(cfg(0.1));
        opt.step(&mut s, &grads, 1.0).unwrap();
        assert!(s.value(id).item().abs() < 1.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, id) = scalar_store(0.37);
        let mut grads = GradStore::new();
        grads.accumulate(id, &Tensor::scalar(0.0));
        let mut opt = AdamW::new(cfg(0.1));
        for _ in 0..5 {
            opt.step(&mut s, &grads, 1.0).unwrap();
        }
        assert_eq!(s.value(id).item(), 0.37);
    }

    #[test]
    fn missing_gradients_rejected() {
        let (mut s, _) = scalar_store(1.0);
        let mut opt = AdamW::new(cfg(0.1));
        assert!(opt.step(&mut s, &GradStore::new(), 1.0).is_err());
    }

    #[test]
    fn converges_on_shifted_quadratic_like_scalar_recurrence() {
        // Independent scalar recurrence of the same update rule.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((w - 3.0).abs() < 1e-2, "recurrence ended at {w}");

        let (mut s, id) = scalar_store(0.0);
        let mut opt = AdamW::new(cfg(lr));
        for _ in 0..200 {
            let mut grads = GradStore::new();
            grads.accumulate(id, &Tensor::scalar(2.0 * (s.value(id).item() - 3.0)));
            opt.step(&mut s, &grads, 1.0).unwrap();
        }
        let got = s.value(id).item();
        assert!((got - 3.0).abs() < 1e-2);
        assert!((got - w).abs() < 1e-12);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient_signal() {
        let (mut s, id) = scalar_store(2.0);
        let mut grads = GradStore::new();
        grads.accumulate(id, &Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..cfg(0.1)
        });
        opt.step(&mut s, &grads, 1.0).unwrap();
        assert!((s.value(id).item() - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        assert!((warmup_cosine(0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((warmup_cosine(10, 10, 100) - 1.0).abs() < 1e-12);
        assert!(warmup_cosine(100, 10, 100).abs() < 1e-12);
    }
}
