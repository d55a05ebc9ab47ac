//! Optimizers, learning-rate schedule, and the critic weight clip.

use crate::checkpoint::{OptimKind, OptimSection, TensorRecord};
use crate::error::Error;
use crate::tensor::{Elem, ParamBank};

/// Adam or RMSProp over one parameter bank. Moment buffers are allocated
/// lazily on the first step and stay aligned with the bank's parameter
/// order.
#[derive(Clone, Debug)]
pub struct Optimizer<E: Elem> {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSProp mean-square decay.
    pub decay: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> Optimizer<E> {
    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer { kind: OptimKind::Adam, lr, beta1, beta2, decay: 0.99, eps, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn rmsprop(lr: f64, decay: f64, eps: f64) -> Self {
        Optimizer { kind: OptimKind::RmsProp, lr, beta1: 0.0, beta2: 0.0, decay, eps, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn ensure_buffers(&mut self, bank: &ParamBank<E>) -> Result<(), Error> {
        if self.m.is_empty() {
            self.m = bank.iter().map(|(_, t)| vec![E::ZERO; t.numel()]).collect();
            if self.kind == OptimKind::Adam {
                self.v = bank.iter().map(|(_, t)| vec![E::ZERO; t.numel()]).collect();
            }
            return Ok(());
        }
        if self.m.len() != bank.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, bank has {}",
                self.m.len(),
                bank.len()
            )));
        }
        Ok(())
    }

    /// One in-place update from the bank's accumulated gradients. Missing
    /// (never-touched) gradients count as zero. Gradients are not cleared.
    pub fn step(&mut self, bank: &mut ParamBank<E>) -> Result<(), Error> {
        self.ensure_buffers(bank)?;
        self.step_count += 1;
        let t = self.step_count;
        match self.kind {
            OptimKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(t as i32);
                let bc2 = 1.0 - self.beta2.powi(t as i32);
                for (i, id) in bank.ids().enumerate().collect::<Vec<_>>() {
                    let tensor = bank.get_mut(id);
                    if tensor.m_step_shape_mismatch(self.m[i].len()) {
                        return Err(Error::Contract(format!(
                            "parameter {i} changed shape between optimizer steps"
                        )));
                    }
                    let Some(grad) = tensor.grad.as_ref() else { continue };
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for j in 0..grad.len() {
                        let g = grad[j].to_f64();
                        let mj = self.beta1 * m[j].to_f64() + (1.0 - self.beta1) * g;
                        let vj = self.beta2 * v[j].to_f64() + (1.0 - self.beta2) * g * g;
                        m[j] = E::from_f64(mj);
                        v[j] = E::from_f64(vj);
                        let update = self.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                        tensor.data[j] = E::from_f64(tensor.data[j].to_f64() - update);
                    }
                }
            }
            OptimKind::RmsProp => {
                for (i, id) in bank.ids().enumerate().collect::<Vec<_>>() {
                    let tensor = bank.get_mut(id);
                    if tensor.m_step_shape_mismatch(self.m[i].len()) {
                        return Err(Error::Contract(format!(
                            "parameter {i} changed shape between optimizer steps"
                        )));
                    }
                    let Some(grad) = tensor.grad.as_ref() else { continue };
                    let ms = &mut self.m[i];
                    for j in 0..grad.len() {
                        let g = grad[j].to_f64();
                        let msj = self.decay * ms[j].to_f64() + (1.0 - self.decay) * g * g;
                        ms[j] = E::from_f64(msj);
                        let update = self.lr * g / (msj.sqrt() + self.eps);
                        tensor.data[j] = E::from_f64(tensor.data[j].to_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }

    /// Serialize moments for a checkpoint, buffer names derived from the
    /// bank's parameter names.
    pub fn snapshot(&self, bank: &ParamBank<E>) -> OptimSection {
        let mut buffers = Vec::new();
        for (i, (name, t)) in bank.iter().enumerate() {
            if let Some(m) = self.m.get(i) {
                buffers.push(TensorRecord {
                    name: format!("m.{name}"),
                    shape: t.shape.clone(),
                    data: m.iter().map(|v| v.to_f64() as f32).collect(),
                });
            }
            if let Some(v) = self.v.get(i) {
                buffers.push(TensorRecord {
                    name: format!("v.{name}"),
                    shape: t.shape.clone(),
                    data: v.iter().map(|x| x.to_f64() as f32).collect(),
                });
            }
        }
        OptimSection { kind: self.kind, step: self.step_count, buffers }
    }
}

trait ShapeGuard {
    fn m_step_shape_mismatch(&self, expected: usize) -> bool;
}

impl<E: Elem> ShapeGuard for crate::tensor::Tensor<E> {
    fn m_step_shape_mismatch(&self, expected: usize) -> bool {
        self.numel() != expected
    }
}

/// Cosine annealing: `lr_min + 0.5*(lr0-lr_min)*(1+cos(pi*t/T))`, clamped
/// to `lr_min` past the horizon.
pub fn cosine_lr(lr0: f64, t: usize, horizon: usize, lr_min: f64) -> f64 {
    if horizon == 0 || t >= horizon {
        return lr_min;
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / horizon as f64).cos())
}

/// Clamp every parameter of the bank to `[-c, c]`.
pub fn weight_clip<E: Elem>(bank: &mut ParamBank<E>, c: f64) {
    let lo = E::from_f64(-c);
    let hi = E::from_f64(c);
    for id in bank.ids().collect::<Vec<_>>() {
        for v in &mut bank.get_mut(id).data {
            *v = E::min(E::max(*v, lo), hi);
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn grad_norm_clip<E: Elem>(bank: &mut ParamBank<E>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, t) in bank.iter() {
        if let Some(g) = &t.grad {
            for v in g {
                sq += v.to_f64() * v.to_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for id in bank.ids().collect::<Vec<_>>() {
            if let Some(g) = &mut bank.get_mut(id).grad {
                for v in g {
                    *v = E::mul(*v, scale);
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_bank(v: f32) -> ParamBank<f32> {
        let mut b = ParamBank::new();
        b.add("p", Tensor::new(vec![v], &[1]));
        b
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // bias-corrected first step normalizes any nonzero gradient to ~lr
        for &g in &[0.001f32, 1.0, 250.0] {
            let mut bank = scalar_bank(1.0);
            bank.get_mut(crate::tensor::ParamId(0)).accumulate_grad(&[g]);
            let mut opt = Optimizer::adam(2e-4, 0.5, 0.999, 1e-8);
            opt.step(&mut bank).unwrap();
            let delta = (1.0 - bank.get(crate::tensor::ParamId(0)).data[0]) as f64;
            assert!((delta - 2e-4).abs() < 2e-4 * 1e-3, "g={g} delta={delta}");
        }
    }

    #[test]
    fn zero_grads_are_a_noop_for_both_kinds() {
        for mut opt in [Optimizer::adam(1e-3, 0.5, 0.999, 1e-8), Optimizer::rmsprop(1e-3, 0.99, 1e-8)] {
            let mut bank = scalar_bank(0.7);
            bank.get_mut(crate::tensor::ParamId(0)).accumulate_grad(&[0.0]);
            for _ in 0..3 {
                opt.step(&mut bank).unwrap();
            }
            assert_eq!(bank.get(crate::tensor::ParamId(0)).data[0], 0.7);
        }
    }

    #[test]
    fn rmsprop_matches_hand_recurrence() {
        // scalar problem in oracle (f64) mode, constant gradient 0.5
        let (lr, decay, eps) = (0.01f64, 0.99f64, 1e-8f64);
        let g = 0.5f64;
        let mut ms = 0.0f64;
        let mut p_ref = 1.0f64;
        let mut bank = ParamBank::<f64>::new();
        bank.add("p", Tensor::new(vec![1.0f64], &[1]));
        let mut opt = Optimizer::rmsprop(lr, decay, eps);
        for _ in 0..3 {
            ms = decay * ms + (1.0 - decay) * g * g;
            p_ref -= lr * g / (ms.sqrt() + eps);
            bank.get_mut(crate::tensor::ParamId(0)).zero_grad();
            bank.get_mut(crate::tensor::ParamId(0)).accumulate_grad(&[g]);
            opt.step(&mut bank).unwrap();
            let got = bank.get(crate::tensor::ParamId(0)).data[0];
            assert!((got - p_ref).abs() < 1e-10, "got {got} want {p_ref}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(2e-4, 0, 10, 0.0), 2e-4);
        assert!((cosine_lr(2e-4, 10, 10, 0.0) - 0.0).abs() < 1e-18);
        assert!((cosine_lr(2e-4, 5, 10, 0.0) - 1e-4).abs() < 1e-12);
        assert_eq!(cosine_lr(2e-4, 15, 10, 1e-6), 1e-6); // clamp past horizon
    }

    #[test]
    fn cosine_schedule_non_increasing() {
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let lr = cosine_lr(3e-4, t, 50, 1e-6);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn weight_clip_clamps_everything() {
        let mut bank = ParamBank::new();
        bank.add("a", Tensor::new(vec![0.5f32, -0.003, -0.5], &[3]));
        weight_clip(&mut bank, 0.01);
        let t = bank.get(crate::tensor::ParamId(0));
        assert_eq!(t.data, vec![0.01, -0.003, -0.01]);
        assert!(bank.max_abs() <= 0.01);
    }
}
