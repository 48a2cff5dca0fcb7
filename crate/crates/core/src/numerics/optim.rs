use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{GradSet, ParamSet, Scalar, Tensor};

/// Learning-rate schedule, evaluated at 1-based step numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to `min_lr`.
    WarmupCosine {
        warmup_steps: u64,
        total_steps: u64,
        min_lr: f64,
    },
}

impl Schedule {
    /// Warmup covering `warmup_frac` of `total_steps`.
    pub fn warmup_cosine(total_steps: u64, warmup_frac: f64) -> Self {
        Schedule::WarmupCosine {
            warmup_steps: ((total_steps as f64) * warmup_frac).round() as u64,
            total_steps,
            min_lr: 0.0,
        }
    }

    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine {
                warmup_steps,
                total_steps,
                min_lr,
            } => {
                if step <= warmup_steps && warmup_steps > 0 {
                    base * step as f64 / warmup_steps as f64
                } else {
                    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
                    let progress = ((step - warmup_steps.min(step)) as f64 / span).min(1.0);
                    min_lr + (base - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            schedule: Schedule::Constant,
        }
    }
}

/// Adaptive-moment state with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct OptimState<T: Scalar = f32> {
    pub config: AdamWConfig,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
    step: u64,
}

/// Biases, norms, tokens and positional tables are not decayed.
fn decays(name: &str, t: &Tensor<impl Scalar>) -> bool {
    t.ndim() >= 2 && t.shape()[0] > 1 && !name.contains("token") && !name.contains("pos_embed")
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr_at(self.config.lr, self.step.max(1))
    }

    /// Applies one update to every non-frozen parameter of `params`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let t = self.step + 1;
        let c = self.config;
        let lr = c.schedule.lr_at(c.lr, t);
        let bc1 = 1.0 - c.beta1.powi(t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(t.min(i32::MAX as u64) as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let eps = T::from_f64(c.eps);
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());

        let frozen: Vec<bool> = params.iter().map(|(n, _)| params.is_frozen(n)).collect();
        for ((name, p), frozen) in params.iter_mut().zip(frozen) {
            if frozen {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Shape(format!("no gradient supplied for `{name}`")))?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let decay = if c.weight_decay != 0.0 && decays(name, p) {
                Some(T::from_f64(1.0 - lr * c.weight_decay))
            } else {
                None
            };
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * *gv;
                *vv = b2 * *vv + one_b2 * *gv * *gv;
                if let Some(d) = decay {
                    *pv = *pv * d;
                }
                let denom = vv.sqrt() * inv_sqrt_bc2 + eps;
                *pv = *pv - step_size * *mv / denom;
            }
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    fn grad(v: f64) -> GradSet<f64> {
        let mut g = GradSet::new();
        g.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a.w", Tensor::from_fn(vec![3, 4], |i| i as f32 * 0.37 - 1.0)).unwrap();
        p.insert("a.b", Tensor::from_fn(vec![4], |i| -(i as f32))).unwrap();
        let before = p.clone();
        let mut g = GradSet::new();
        for (n, t) in p.iter() {
            g.insert(n.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        let mut opt = OptimState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        for ((_, a), (_, b)) in p.iter().zip(before.iter()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // Scalar AdamW at step 1 with bias correction:
        //   m = (1-b1) g, v = (1-b2) g^2, mhat = g, vhat = g^2
        //   p1 = p0 (1 - lr wd) - lr * g / (|g| + eps)
        // p0 = 0.5, g = 0.2, lr = 0.1, wd = 0.0 (1-D params are not decayed),
        // eps = 1e-8: p1 = 0.5 - 0.1 * 0.2 / (0.2 + 1e-8) = 0.400000005
        let mut p = one_param(0.5);
        let mut opt = OptimState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.3,
            ..Default::default()
        });
        opt.step(&mut p, &grad(0.2)).unwrap();
        let got = p.get("w").unwrap().data()[0];
        let expect = 0.5 - 0.1 * 0.2 / (0.2 + 1e-8);
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");

        // Matrix parameters are decayed: p1 = p0 (1 - lr wd) - lr g/(|g| + eps).
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::new(vec![2, 1], vec![0.5, -1.0]).unwrap()).unwrap();
        let mut g = GradSet::new();
        g.insert("w", Tensor::new(vec![2, 1], vec![0.2, -0.4]).unwrap());
        let mut opt = OptimState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.3,
            ..Default::default()
        });
        opt.step(&mut p, &g).unwrap();
        let d = p.get("w").unwrap().data();
        let e0 = 0.5 * (1.0 - 0.03) - 0.1 * 0.2 / (0.2 + 1e-8);
        let e1 = -1.0 * (1.0 - 0.03) + 0.1 * 0.4 / (0.4 + 1e-8);
        assert!((d[0] - e0).abs() < 1e-15 && (d[1] - e1).abs() < 1e-15);
    }

    #[test]
    fn frozen_subtree_is_bitwise_unchanged() {
        let mut p = ParamSet::<f32>::new();
        p.insert("enc.w", Tensor::full(vec![2, 2], 0.25)).unwrap();
        p.insert("head.w", Tensor::full(vec![2, 2], 0.25)).unwrap();
        p.freeze("enc");
        let mut g = GradSet::new();
        g.insert("enc.w", Tensor::full(vec![2, 2], 1.0));
        g.insert("head.w", Tensor::full(vec![2, 2], 1.0));
        let mut opt = OptimState::new(AdamWConfig::default());
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get("enc.w").unwrap().data(), &[0.25; 4]);
        assert!(p.get("head.w").unwrap().data()[0] < 0.25);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = one_param(1.0);
        let mut g = GradSet::new();
        g.insert("w", Tensor::<f64>::zeros(vec![2]));
        let mut opt = OptimState::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Shape(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn warmup_then_cosine() {
        let s = Schedule::warmup_cosine(100, 0.05);
        assert_eq!(s.lr_at(1.0, 1), 0.2);
        assert_eq!(s.lr_at(1.0, 5), 1.0);
        assert!((s.lr_at(1.0, 100)).abs() < 1e-12);
        let mid = s.lr_at(1.0, 52);
        assert!((mid - 0.5).abs() < 0.02);
    }
}
