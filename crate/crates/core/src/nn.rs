//! Layer primitives and the Adam optimizer.
//!
//! Layers own their parameter tensors and bind them into a fresh
//! [`Graph`] on every forward call. Parameter node ids are appended to a
//! caller-supplied list in a fixed order so gradients can be matched back
//! to the tensors they belong to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer dimensions must be at least 1 (got {in_dim} -> {out_dim})")]
    ZeroDim { in_dim: usize, out_dim: usize },
    #[error("batch-norm in train mode needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {actual:?}, parameter has {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("optimizer got {got} parameters, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Whether batch-norm uses batch statistics (and updates running ones) or
/// running statistics only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A mutable view of one named parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Glorot-uniform weights from the given seed, zero bias.
pub fn init_params(in_dim: usize, out_dim: usize, rng_seed: u64) -> Result<DenseLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    DenseLayer::init(in_dim, out_dim, &mut rng)
}

impl DenseLayer {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(NnError::ZeroDim { in_dim, out_dim });
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Ok(Self {
            weights: Tensor::matrix(in_dim, out_dim, data)?,
            bias: Tensor::zeros(&[out_dim]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `x W + b`; pushes the weight and bias node ids onto `params`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, params: &mut Vec<NodeId>) -> Result<NodeId> {
        let w = g.param(self.weights.clone());
        let b = g.param(self.bias.clone());
        params.extend([w, b]);
        let xw = g.matmul(x, w)?;
        Ok(g.add(xw, b)?)
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: format!("{prefix}.weight"),
                value: &mut self.weights,
            },
            ParamRef {
                name: format!("{prefix}.bias"),
                value: &mut self.bias,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Weight of the old running value in the moving average.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::filled(&[dim], 1.0),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Normalizes `x` and applies `gamma`/`beta`. Train mode uses batch
    /// statistics and updates the running ones; eval mode reads only the
    /// running statistics, so each row is transformed independently.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        params: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let gamma = g.param(self.gamma.clone());
        let beta = g.param(self.beta.clone());
        params.extend([gamma, beta]);

        let normalized = match mode {
            Mode::Train => {
                let rows = g.value(x).rows();
                if rows < 2 {
                    return Err(NnError::BatchTooSmall(rows));
                }
                self.update_running_stats(g.value(x));
                g.standardize(x, self.eps)?
            }
            Mode::Eval => self.normalize_running(g, x)?,
        };
        let scaled = g.mul(normalized, gamma)?;
        Ok(g.add(scaled, beta)?)
    }

    /// Eval-mode forward; never touches the running statistics.
    pub fn forward_eval(&self, g: &mut Graph, x: NodeId, params: &mut Vec<NodeId>) -> Result<NodeId> {
        let gamma = g.param(self.gamma.clone());
        let beta = g.param(self.beta.clone());
        params.extend([gamma, beta]);
        let normalized = self.normalize_running(g, x)?;
        let scaled = g.mul(normalized, gamma)?;
        Ok(g.add(scaled, beta)?)
    }

    fn normalize_running(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let inv: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let shift: Vec<f64> = self
            .running_mean
            .data()
            .iter()
            .zip(&inv)
            .map(|(m, s)| -m * s)
            .collect();
        let inv = g.constant(Tensor::vector(inv));
        let shift = g.constant(Tensor::vector(shift));
        let scaled = g.mul(x, inv)?;
        Ok(g.add(scaled, shift)?)
    }

    fn update_running_stats(&mut self, batch: &Tensor) {
        let (n, d) = (batch.rows(), batch.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(batch.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(batch.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // unbiased estimate for the running variance
        var.iter_mut().for_each(|s| *s /= (n - 1) as f64);

        let mom = self.momentum;
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = mom * *r + (1.0 - mom) * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = mom * *r + (1.0 - mom) * v;
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: format!("{prefix}.gamma"),
                value: &mut self.gamma,
            },
            ParamRef {
                name: format!("{prefix}.beta"),
                value: &mut self.beta,
            },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and are matched to parameters by position.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update. Every gradient is validated before any parameter
    /// is touched, so a rejected step leaves the parameters unchanged.
    pub fn step(&mut self, params: &mut [ParamRef<'_>], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::ParamCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if !self.m.is_empty() && self.m.len() != params.len() {
            return Err(NnError::ParamCount {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(NnError::GradientShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(NnError::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }

        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(40, 40, 7).unwrap();
        let b = init_params(40, 40, 7).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 80.0).sqrt();
        assert!((bound - 0.273_861).abs() < 1e-6);
        assert!(a.weights.data().iter().all(|w| w.abs() <= bound));
        assert!(a.bias.data().iter().all(|&b| b == 0.0));
        assert_ne!(a, init_params(40, 40, 8).unwrap());
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert_eq!(
            init_params(0, 3, 1).unwrap_err(),
            NnError::ZeroDim { in_dim: 0, out_dim: 3 }
        );
        assert!(init_params(3, 0, 1).is_err());
    }

    fn run_bn(layer: &mut BatchNormLayer, rows: &[Vec<f64>], mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(rows).unwrap());
        let mut params = Vec::new();
        let y = layer.forward(&mut g, x, mode, &mut params)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn batchnorm_train_two_rows() {
        let mut bn = BatchNormLayer::new(1);
        let out = run_bn(&mut bn, &[vec![0.0], vec![2.0]], Mode::Train).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.data()[0] + expect).abs() < 1e-12);
        assert!((out.data()[1] - expect).abs() < 1e-12);
        // running stats moved toward mean 1, unbiased var 2
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let mut bn = BatchNormLayer::new(2);
        bn.gamma = Tensor::zeros(&[2]);
        bn.beta = Tensor::vector(vec![0.5, -3.0]);
        let out = run_bn(&mut bn, &[vec![1.0, 4.0], vec![2.0, 9.0], vec![0.0, 1.0]], Mode::Train)
            .unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[0.5, -3.0]);
        }
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut bn = BatchNormLayer::new(2);
        let rows = vec![vec![1.5, -2.0]];
        let out = run_bn(&mut bn, &rows, Mode::Eval).unwrap();
        for (o, x) in out.data().iter().zip(&rows[0]) {
            assert!((o - x).abs() < 1e-5);
        }
        assert_eq!(bn, BatchNormLayer::new(2));
    }

    #[test]
    fn batchnorm_rejects_single_row_in_train() {
        let mut bn = BatchNormLayer::new(1);
        assert_eq!(
            run_bn(&mut bn, &[vec![1.0]], Mode::Train).unwrap_err(),
            NnError::BatchTooSmall(1)
        );
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut bn = BatchNormLayer::new(3);
        let rows: Vec<Vec<f64>> = (0..17)
            .map(|i| {
                let t = i as f64;
                vec![t * 3.0 - 1.0, (t * 1.7).sin() * 50.0, t * t]
            })
            .collect();
        let out = run_bn(&mut bn, &rows, Mode::Train).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..17).map(|i| out.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 17.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    fn one_param_step(adam: &mut AdamState, w: &mut Tensor, g: f64) -> Result<()> {
        let grad = Tensor::vector(vec![g]);
        let mut params = vec![ParamRef {
            name: "w".into(),
            value: w,
        }];
        adam.step(&mut params, &[&grad])
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut w = Tensor::vector(vec![0.0]);
        one_param_step(&mut adam, &mut w, 1.0).unwrap();
        let expect = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((w.data()[0] - expect).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut w = Tensor::vector(vec![0.25]);
        for _ in 0..5 {
            one_param_step(&mut adam, &mut w, 0.0).unwrap();
        }
        assert_eq!(w.data(), &[0.25]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn adam_update_approaches_lr_for_constant_gradient() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut w = Tensor::vector(vec![0.0]);
        let mut prev = 0.0;
        for _ in 0..100 {
            prev = w.data()[0];
            one_param_step(&mut adam, &mut w, 0.37).unwrap();
        }
        let update = (w.data()[0] - prev).abs();
        assert!((update - 1e-3).abs() / 1e-3 < 0.01);
    }

    #[test]
    fn adam_rejects_nan_by_name() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut w = Tensor::vector(vec![1.0]);
        let err = one_param_step(&mut adam, &mut w, f64::NAN).unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient("w".into()));
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = AdamState::new(AdamConfig::default());
            let mut w = init_params(3, 2, 11).unwrap().weights;
            for k in 0..10 {
                let g = Tensor::matrix(3, 2, (0..6).map(|i| ((i + k) as f64).cos()).collect()).unwrap();
                let mut params = vec![ParamRef {
                    name: "w".into(),
                    value: &mut w,
                }];
                adam.step(&mut params, &[&g]).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }
}
