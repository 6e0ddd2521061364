//! AdamW, the linear learning-rate decay and EMA weight averaging.

use crate::error::Result;
use crate::model::params::{named, named_mut, same_structure, zeros_like, Params};
use crate::tensor::Real;

/// `target ← decay · target + (1 − decay) · online`, every tensor.
pub fn ema_update<T: Real, P: Params<T>>(target: &mut P, online: &P, decay: f64) -> Result<()> {
    same_structure(target, online)?;
    let d = T::lit(decay);
    let e = T::lit(1.0 - decay);
    let src = named(online);
    for ((_, t), (_, o)) in named_mut(target).into_iter().zip(src) {
        t.data_mut()
            .iter_mut()
            .zip(o.data())
            .for_each(|(a, &b)| *a = d * *a + e * b);
    }
    Ok(())
}

/// Decay used for fine-tuning EMA at update `t`: ramps up to `theta` so
/// early averages are not dominated by the random initialization.
pub fn ema_decay_at(theta: f64, t: u64) -> f64 {
    theta.min((1.0 + t as f64) / (10.0 + t as f64))
}

/// Learning rate falling linearly from `base` to 0 over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub base: f64,
    pub total_steps: u64,
}

impl LinearDecay {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        self.base * (1.0 - step.min(self.total_steps) as f64 / self.total_steps as f64)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<P> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: P,
    v: P,
    t: u64,
}

impl<P: Clone> AdamW<P> {
    pub fn new<T: Real>(params: &P, weight_decay: f64) -> Self
    where
        P: Params<T>,
    {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros_like(params),
            v: zeros_like(params),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()>
    where
        P: Params<T>,
    {
        same_structure(params, grads)?;
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let g = named(grads);
        let ms = named_mut(&mut self.m);
        let vs = named_mut(&mut self.v);
        for ((((_, p), (_, g)), (_, m)), (_, v)) in named_mut(params).into_iter().zip(g).zip(ms).zip(vs) {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k].to_f64_lossless();
                let mk = b1 * md[k].to_f64_lossless() + (1.0 - b1) * gk;
                let vk = b2 * vd[k].to_f64_lossless() + (1.0 - b2) * gk * gk;
                md[k] = T::lit(mk);
                vd[k] = T::lit(vk);
                let mut x = pd[k].to_f64_lossless();
                x -= lr * self.weight_decay * x;
                x -= lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                pd[k] = T::lit(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::RammError;
    use crate::tensor::Tensor;

    #[test]
    fn ema_edge_cases_and_closed_form() {
        let t0 = Tensor::vector(vec![1.0f64, -2.0, 3.0]);
        let o = Tensor::vector(vec![0.5f64, 0.5, -1.0]);
        let mut t = t0.clone();
        ema_update(&mut t, &o, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &o, 0.0).unwrap();
        assert_eq!(t, o);

        let d: f64 = 0.9;
        let mut t = t0.clone();
        for _ in 0..3 {
            ema_update(&mut t, &o, d).unwrap();
        }
        for k in 0..3 {
            let want = d.powi(3) * t0.data()[k] + (1.0 - d.powi(3)) * o.data()[k];
            assert!((t.data()[k] - want).abs() < 1e-12);
        }
        let mut wrong = Tensor::vector(vec![1.0f64, 2.0]);
        assert!(matches!(ema_update(&mut wrong, &o, 0.5), Err(RammError::Structure(_))));
    }

    #[test]
    fn ema_contracts_toward_online() {
        let mut t = Tensor::vector(vec![4.0f64, -1.0]);
        let o = Tensor::vector(vec![1.0f64, 1.0]);
        let before = t.sub(&o).unwrap();
        ema_update(&mut t, &o, 0.7).unwrap();
        let after = t.sub(&o).unwrap();
        for k in 0..2 {
            assert!((after.data()[k] - 0.7 * before.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_schedule() {
        let s = LinearDecay { base: 1e-3, total_steps: 10 };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(5) - 5e-4).abs() < 1e-15);
        assert_eq!(s.lr(10), 0.0);
        assert_eq!(s.lr(20), 0.0);
        assert!((ema_decay_at(0.999, 0) - 0.1).abs() < 1e-12);
        assert_eq!(ema_decay_at(0.999, 1_000_000), 0.999);
    }

    #[test]
    fn adamw_first_step_and_descent() {
        // First step moves every coordinate by ≈ lr·sign(g) (bias-corrected).
        let mut p = Tensor::vector(vec![1.0f64, -1.0]);
        let g = Tensor::vector(vec![0.3f64, -2.0]);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);

        // Minimizes a quadratic.
        let mut x = Tensor::vector(vec![3.0f64, -4.0]);
        let mut opt = AdamW::new(&x, 0.01);
        for _ in 0..2000 {
            let g = x.scale(2.0);
            opt.step(&mut x, &g, 0.01).unwrap();
        }
        assert!(x.norm() < 1e-2);
    }
}
