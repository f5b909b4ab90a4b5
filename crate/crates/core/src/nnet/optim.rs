use serde::{Deserialize, Serialize};

use super::{Mode, Network, Param, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr0: f64,
    /// Per-epoch exponential decay of the learning rate.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            gamma: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    epoch: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            epoch: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `lr₀ · γ^epoch`.
    pub fn lr(&self) -> f64 {
        self.config.lr0 * self.config.gamma.powi(self.epoch as i32)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn epoch_decay(&mut self) {
        self.epoch += 1;
    }

    /// Bias-corrected Adam update of every parameter from its gradient.
    pub fn step_params<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        let params: Vec<&mut Param> = params.into_iter().collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.value.len() || p.grad.len() != m.len())
        {
            return Err(Error::DimensionMismatch("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let lr = self.lr();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        self.step_params(net.params_mut())
    }
}

/// Running mean of parameter snapshots.
#[derive(Debug, Clone, Default)]
pub struct SwaState {
    average: Vec<f64>,
    snapshots: usize,
}

impl SwaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshots(&self) -> usize {
        self.snapshots
    }

    pub fn average(&self) -> &[f64] {
        &self.average
    }

    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if self.snapshots == 0 {
            self.average = params.to_vec();
        } else {
            if params.len() != self.average.len() {
                return Err(Error::DimensionMismatch("snapshot size changed".into()));
            }
            let k = (self.snapshots + 1) as f64;
            for (a, p) in self.average.iter_mut().zip(params) {
                *a += (p - *a) / k;
            }
        }
        self.snapshots += 1;
        Ok(())
    }

    /// Installs the average into `net` and recomputes batch-norm statistics
    /// as a cumulative mean over one pass of `batches`.
    pub fn finalize(&self, net: &mut Network, batches: impl IntoIterator<Item = Tensor>) -> Result<()> {
        if self.snapshots == 0 {
            return Err(Error::Empty("weight averaging has no snapshots".into()));
        }
        net.set_flat_params(&self.average)?;
        if net.has_batchnorm() {
            net.begin_recalibration();
            let mut seen = 0;
            for b in batches {
                net.forward(b, Mode::Recalibrate, None)?;
                seen += 1;
            }
            if seen == 0 {
                return Err(Error::Empty("no batches to recompute batch-norm statistics".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::LayerSpec;

    #[test]
    fn learning_rate_after_ten_epochs() {
        let mut a = AdamState::new(AdamConfig::default());
        for _ in 0..10 {
            a.epoch_decay();
        }
        assert!((a.lr() - 0.001 * 0.99f64.powi(10)).abs() < 1e-18);
        assert!((a.lr() - 9.044e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = AdamState::new(AdamConfig::default());
        let mut p = Param {
            value: vec![1.0, -2.0],
            grad: vec![0.0, 0.0],
        };
        for _ in 0..5 {
            a.step_params([&mut p]).unwrap();
        }
        assert_eq!(p.value, vec![1.0, -2.0]);
    }

    #[test]
    fn quadratic_converges() {
        let mut a = AdamState::new(AdamConfig {
            lr0: 0.01,
            ..Default::default()
        });
        let mut p = Param {
            value: vec![0.0],
            grad: vec![0.0],
        };
        for _ in 0..2000 {
            p.grad[0] = 2.0 * (p.value[0] - 3.0);
            a.step_params([&mut p]).unwrap();
        }
        assert!((p.value[0] - 3.0).abs() < 1e-3, "{}", p.value[0]);
    }

    #[test]
    fn swa_means() {
        let mut s = SwaState::new();
        s.update(&[1.0, 2.0]).unwrap();
        assert_eq!(s.average(), &[1.0, 2.0]);
        s.update(&[-1.0, -2.0]).unwrap();
        assert_eq!(s.average(), &[0.0, 0.0]);
        let mut t = SwaState::new();
        for v in [[1.0, 4.0], [2.0, 5.0], [6.0, 0.0]] {
            t.update(&v).unwrap();
        }
        assert!((t.average()[0] - 3.0).abs() < 1e-15 && (t.average()[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn finalize_needs_snapshots_and_recomputes_stats() {
        let mut net = Network::new(
            vec![LayerSpec::Dense { inputs: 1, outputs: 1 }, LayerSpec::BatchNorm { features: 1 }],
            0,
        )
        .unwrap();
        assert!(SwaState::new().finalize(&mut net, Vec::new()).is_err());
        let mut s = SwaState::new();
        s.update(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let batches = vec![
            Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap(),
            Tensor::new(vec![2, 1], vec![4.0, 6.0]).unwrap(),
        ];
        s.finalize(&mut net, batches).unwrap();
        // Cumulative mean of batch means 1 and 5; unbiased variances 2 and 2.
        let y = net.predict(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        assert!(y.data()[0].abs() < 1e-12);
        let y = net.predict(Tensor::new(vec![1, 1], vec![3.0 + 2f64.sqrt()]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
    }
}
