//! Adam with per-group state. Moments are allocated lazily on the first
//! step so a group can stay untouched (frozen) without carrying state.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Serialized view (first moments, second moments, step count).
    pub fn parts(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn from_parts(m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Self {
        Self { m, v, t }
    }

    /// One Adam update over a parameter group. A `None` gradient is an
    /// all-zero gradient (the parameter did not reach the objective this
    /// step). Parameter order must be stable across calls.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam step",
                format!("group size changed: {} vs {}", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if let Some(g) = &grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "adam step",
                        format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                    ));
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pd[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_step_matches_hand_computation() {
        let mut p = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let mut adam = AdamState::new();
        adam.step(0.1, &mut [&mut p], &[Some(g)]).unwrap();
        // m_hat = 0.5, v_hat = 0.25; update = 0.1 * 0.5 / (0.5 + 1e-8).
        let want = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + ADAM_EPS);
        assert_relative_eq!(p.data()[0], want, max_relative = 1e-12);
    }

    #[test]
    fn zero_lr_and_missing_grads_leave_params_unchanged() {
        let mut p = Tensor::from_vec(vec![2], vec![3.0, -4.0]).unwrap();
        let orig = p.clone();
        let mut adam = AdamState::new();
        let g = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        for _ in 0..10 {
            adam.step(0.0, &mut [&mut p], &[Some(g.clone())]).unwrap();
        }
        assert_eq!(p, orig);

        // Fresh state with absent gradients: moments stay zero, no movement.
        let mut adam2 = AdamState::new();
        for _ in 0..5 {
            adam2.step(0.1, &mut [&mut p], &[None]).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn bias_correction_keeps_early_steps_at_lr_scale() {
        // With a constant gradient g the first update is exactly
        // -lr * g / (|g| + eps): bias correction cancels the moment decay.
        let grad = 1e-3;
        let mut p = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(vec![1], vec![grad]).unwrap();
        let mut adam = AdamState::new();
        adam.step(0.01, &mut [&mut p], &[Some(g)]).unwrap();
        assert_relative_eq!(
            p.data()[0],
            -0.01 * grad / (grad + ADAM_EPS),
            max_relative = 1e-12
        );
    }
}
