use crate::error::{Error, Result};
use crate::numerics::Parameter;

/// Adam optimizer state: per-parameter first/second moment buffers plus the
/// step counter used for bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Defaults follow the standard Adam settings; only the learning rate is
    /// caller-chosen.
    pub fn new(learning_rate: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update over all parameters. Requires a
    /// gradient on every parameter (i.e. backward has run) and clears the
    /// gradients afterwards.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "adam_step: {} parameters given, optimizer built for {}",
                params.len(),
                self.first_moment.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                None => {
                    return Err(Error::Contract(format!(
                        "adam_step: parameter {i} has no gradient; run backward first"
                    )))
                }
                Some(g) if g.len() != p.tensor.data.len() => {
                    return Err(Error::Contract(format!(
                        "adam_step: parameter {i} gradient length {} != value length {}",
                        g.len(),
                        p.tensor.data.len()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for ((w, g), (mi, vi)) in p
                .tensor
                .data
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn single_step_closed_form() {
        let mut p = Parameter::new(Tensor::scalar(0.0));
        p.grad = Some(vec![1.0]);
        let mut adam = AdamState::new(0.001, &[1]);
        adam.step(&mut [&mut p]).unwrap();
        // bias-corrected m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert!((p.tensor.data[0] + 0.001).abs() < 1e-9);
        assert!(p.grad.is_none(), "gradients cleared after step");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Parameter::new(Tensor::scalar(1.5));
        p.grad = Some(vec![0.0]);
        let mut adam = AdamState::new(0.01, &[1]);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.tensor.data[0], 1.5);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Parameter::new(Tensor::scalar(0.0));
        let mut adam = AdamState::new(0.01, &[1]);
        assert!(matches!(
            adam.step(&mut [&mut p]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2 from w = 0 with lr 0.1
        let mut p = Parameter::new(Tensor::scalar(0.0));
        let mut adam = AdamState::new(0.1, &[1]);
        for _ in 0..100 {
            let mut g = Graph::new();
            let w = g.leaf(p.tensor.clone(), true);
            let c = g.scalar_constant(3.0);
            let d = g.sub(w, c).unwrap();
            let loss = g.mul(d, d).unwrap();
            g.backward(loss).unwrap();
            p.grad = g.take_grad(w);
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!((p.tensor.data[0] - 3.0).abs() < 0.1);
    }
}
