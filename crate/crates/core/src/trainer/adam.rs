use super::TrainError;
use crate::network::{Checkpoint, NamedParam};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(params: &[NamedParam]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Stores the moments as `optim.m.<name>` / `optim.v.<name>`.
    pub fn save_into(&self, params: &[NamedParam], ckpt: &mut Checkpoint) {
        for (i, p) in params.iter().enumerate() {
            ckpt.push_optimizer_tensor(&format!("m.{}", p.name), self.m[i].clone());
            ckpt.push_optimizer_tensor(&format!("v.{}", p.name), self.v[i].clone());
        }
        ckpt.set_meta("adam_step", self.step);
    }

    pub fn load_from(params: &[NamedParam], ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let mut state = Self::new(params);
        let find = |key: String, like: &Tensor<f32>| -> Result<Tensor<f32>, TrainError> {
            let t = ckpt
                .optimizer_tensors()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| TrainError::StateMismatch(key.clone()))?;
            if t.shape() != like.shape() {
                return Err(TrainError::StateMismatch(key));
            }
            Ok(t)
        };
        for (i, p) in params.iter().enumerate() {
            state.m[i] = find(format!("m.{}", p.name), &p.tensor)?;
            state.v[i] = find(format!("v.{}", p.name), &p.tensor)?;
        }
        state.step = ckpt
            .meta("adam_step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::StateMismatch("adam_step".into()))?;
        Ok(state)
    }
}

/// Bias-corrected Adam update of every parameter, then clears gradients.
pub fn adam_step(
    params: &mut [NamedParam],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if state.m.len() != params.len() {
        return Err(TrainError::StateMismatch(format!("{} buffers for {} parameters", state.m.len(), params.len())));
    }
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(TrainError::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if state.m[i].shape() != p.tensor.shape() {
            return Err(TrainError::StateMismatch(p.name.clone()));
        }
        let grad = p.tensor.grad().expect("checked").to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.tensor.data_mut();
        for j in 0..w.len() {
            let g = f64::from(grad[j]);
            let mj = cfg.beta1 * f64::from(m[j]) + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * f64::from(v[j]) + (1.0 - cfg.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon);
            w[j] = (f64::from(w[j]) - update) as f32;
        }
        p.tensor.clear_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32, g: f32) -> Vec<NamedParam> {
        let mut t = Tensor::scalar(w).with_grad();
        t.set_grad(vec![g]).unwrap();
        vec![NamedParam { name: "w".into(), tensor: t }]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.7, 0.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].tensor.data(), &[0.7]);
        assert!(p[0].tensor.grad().is_none());
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0f32, -0.02] {
            let mut p = scalar_param(1.0, g);
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &mut s, 1e-3, &AdamConfig::default()).unwrap();
            let moved = f64::from(p[0].tensor.data()[0]) - 1.0;
            assert!((moved + 1e-3 * f64::from(g.signum())).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = vec![NamedParam {
            name: "w".into(),
            tensor: Tensor::scalar(1.0).with_grad(),
        }];
        let mut s = OptimizerState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &mut s, 1e-3, &AdamConfig::default()),
            Err(TrainError::MissingGradient(_))
        ));
        assert_eq!(s.step, 0);
    }
}
