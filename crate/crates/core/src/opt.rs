//! Adam optimizer with per-tensor state.

use ndarray::{Array, Dimension, Ix1, Ix2};

use crate::models::{Encoder, EncoderGrads};

/// Adam state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<D: Dimension> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Array<f64, D>,
    v: Array<f64, D>,
}

impl<D: Dimension> Adam<D> {
    pub fn new(lr: f64, shape: D) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Array::zeros(shape.clone()),
            v: Array::zeros(shape),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update step with bias-corrected moments.
    pub fn step(&mut self, param: &mut Array<f64, D>, grad: &Array<f64, D>) {
        assert_eq!(param.raw_dim(), grad.raw_dim(), "parameter/gradient shape mismatch");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / b1t;
                let v_hat = *v / b2t;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
    }
}

/// Adam for a single scalar parameter (head biases).
#[derive(Debug, Clone)]
pub struct ScalarAdam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: f64,
    v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t as i32));
        *param -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// Adam states for every encoder parameter tensor.
pub struct EncoderOpt {
    weights: Vec<Adam<Ix2>>,
    biases: Vec<Adam<Ix1>>,
}

impl EncoderOpt {
    pub fn new(encoder: &Encoder, lr: f64) -> Self {
        Self {
            weights: encoder
                .stages
                .iter()
                .map(|s| Adam::new(lr, s.weight.raw_dim()))
                .collect(),
            biases: encoder
                .stages
                .iter()
                .map(|s| Adam::new(lr, s.bias.raw_dim()))
                .collect(),
        }
    }

    pub fn step(&mut self, encoder: &mut Encoder, grads: &EncoderGrads) {
        for (idx, stage) in encoder.stages.iter_mut().enumerate() {
            self.weights[idx].step(&mut stage.weight, &grads.d_weight[idx]);
            self.biases[idx].step(&mut stage.bias, &grads.d_bias[idx]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, step one moves each coordinate by exactly
        // lr * sign(grad) up to eps.
        let mut p: Array1<f64> = array![1.0, -2.0];
        let g = array![0.3, -0.7];
        let mut adam = Adam::<Ix1>::new(0.1, p.raw_dim());
        adam.step(&mut p, &g);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p: Array1<f64> = array![5.0, -3.0];
        let mut adam = Adam::<Ix1>::new(0.05, p.raw_dim());
        for _ in 0..3000 {
            let g = p.mapv(|x| 2.0 * x);
            let g2 = g.clone();
            adam.step(&mut p, &g2);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p: Array1<f64> = array![1.5];
        let g = array![0.0];
        let mut adam = Adam::<Ix1>::new(0.1, p.raw_dim());
        for _ in 0..10 {
            adam.step(&mut p, &g);
        }
        assert_eq!(p[0], 1.5);
    }

    #[test]
    fn scalar_adam_tracks_array_adam() {
        let mut arr: Array1<f64> = array![2.0];
        let mut scalar = 2.0f64;
        let mut a = Adam::<Ix1>::new(0.05, arr.raw_dim());
        let mut s = ScalarAdam::new(0.05);
        for i in 0..50 {
            let g = 0.3 + (i as f64) * 0.01;
            a.step(&mut arr, &array![g]);
            s.step(&mut scalar, g);
        }
        assert!((arr[0] - scalar).abs() < 1e-12);
    }

    #[test]
    fn encoder_opt_updates_all_stages() {
        let cfg = crate::models::EncoderConfig {
            input_size: 16,
            widths: vec![4, 6],
            seed: 3,
        };
        let mut enc = Encoder::new(&cfg).unwrap();
        let before = crate::models::encoder_checksum(&enc);
        let mut grads = EncoderGrads::zeros_like(&enc);
        for g in grads.d_weight.iter_mut() {
            g.fill(0.5);
        }
        for g in grads.d_bias.iter_mut() {
            g.fill(-0.5);
        }
        let mut opt = EncoderOpt::new(&enc, 0.01);
        opt.step(&mut enc, &grads);
        assert_ne!(before, crate::models::encoder_checksum(&enc));
        for stage in &enc.stages {
            assert!(stage.bias.iter().all(|&b| b > 0.0));
        }
    }
}
