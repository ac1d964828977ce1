//! The GRAD network: a shared trunk, a target branch, and one attribute
//! branch per protected attribute. Each attribute branch reads the trunk
//! output through a gradient-reversal node, so the branch itself learns to
//! predict its attribute while the trunk is pushed away from encoding it.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::nn::{AdamConfig, AdamState, BatchNormLayer, DenseLayer, Mode, NnError, ParamRef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("{what} label at row {row} is {value}, expected -1 or +1")]
    Label {
        what: String,
        row: usize,
        value: f64,
    },
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("operation requires the {expected:?} variant, network is {actual:?}")]
    WrongVariant { expected: Variant, actual: Variant },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Logistic target head used directly as the classifier.
    Pred,
    /// Reconstruction target branch; classification by a logistic head on
    /// trunk representations.
    Auto,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pred => "pred",
            Variant::Auto => "auto",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pred" => Ok(Variant::Pred),
            "auto" => Ok(Variant::Auto),
            other => Err(format!("unknown variant `{other}` (expected pred or auto)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub hidden_width: usize,
    pub layers_per_branch: usize,
    pub lambda: f64,
    pub n_protected: usize,
}

impl NetworkConfig {
    pub const DEFAULT_HIDDEN_WIDTH: usize = 40;
    pub const DEFAULT_LAYERS_PER_BRANCH: usize = 2;
    pub const DEFAULT_LAMBDA: f64 = 100.0;

    pub fn new(variant: Variant, input_dim: usize, n_protected: usize) -> Self {
        Self {
            variant,
            input_dim,
            hidden_width: Self::DEFAULT_HIDDEN_WIDTH,
            layers_per_branch: Self::DEFAULT_LAYERS_PER_BRANCH,
            lambda: Self::DEFAULT_LAMBDA,
            n_protected,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidConfig("input_dim must be at least 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(ModelError::InvalidConfig("hidden_width must be at least 1".into()));
        }
        if self.layers_per_branch == 0 {
            return Err(ModelError::InvalidConfig(
                "layers_per_branch must be at least 1".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn target_outputs(&self) -> usize {
        match self.variant {
            Variant::Pred => 1,
            Variant::Auto => self.input_dim,
        }
    }
}

/// Dense layer, optionally followed by batch-norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dense: DenseLayer,
    pub norm: Option<BatchNormLayer>,
}

impl Block {
    fn forward(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        params: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let h = self.dense.forward(g, x, params)?;
        match &mut self.norm {
            Some(bn) => {
                let h = bn.forward(g, h, mode, params)?;
                Ok(g.relu(h))
            }
            None => Ok(h),
        }
    }

    fn forward_eval(&self, g: &mut Graph, x: NodeId, params: &mut Vec<NodeId>) -> Result<NodeId> {
        let h = self.dense.forward(g, x, params)?;
        match &self.norm {
            Some(bn) => {
                let h = bn.forward_eval(g, h, params)?;
                Ok(g.relu(h))
            }
            None => Ok(h),
        }
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.dense.params_mut(&format!("{prefix}.dense"));
        if let Some(bn) = &mut self.norm {
            out.extend(bn.params_mut(&format!("{prefix}.bn")));
        }
        out
    }
}

/// A sequence of blocks. Hidden blocks carry batch-norm + ReLU; a stack
/// built with an output layer ends in a plain affine block.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
}

impl Stack {
    fn build(
        dims: &[usize],
        affine_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = dims.len() - 1;
        let blocks = (0..n)
            .map(|i| {
                let dense = DenseLayer::init(dims[i], dims[i + 1], rng)?;
                let norm = if affine_last && i == n - 1 {
                    None
                } else {
                    Some(BatchNormLayer::new(dims[i + 1]))
                };
                Ok(Block { dense, norm })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    fn forward(
        &mut self,
        g: &mut Graph,
        mut x: NodeId,
        mode: Mode,
        params: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        for block in &mut self.blocks {
            x = block.forward(g, x, mode, params)?;
        }
        Ok(x)
    }

    fn forward_eval(&self, g: &mut Graph, mut x: NodeId, params: &mut Vec<NodeId>) -> Result<NodeId> {
        for block in &self.blocks {
            x = block.forward_eval(g, x, params)?;
        }
        Ok(x)
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| b.params_mut(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn dense_parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.dense.parameter_count()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.dense.parameter_count() + b.norm.as_ref().map_or(0, BatchNormLayer::parameter_count))
            .sum()
    }
}

/// How attribute branches are connected to the trunk. `Identity` exists as
/// a control for checking what the reversal changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchCoupling {
    Reversed,
    Identity,
}

/// Node handles produced by one [`GradNetwork::forward_loss`] call.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: NodeId,
    pub target_loss: NodeId,
    /// Unweighted mean logistic loss of each attribute branch.
    pub attribute_losses: Vec<NodeId>,
    /// `lambda * sum(attribute_losses)`, absent without attribute branches.
    pub attribute_term: Option<NodeId>,
    pub target_output: NodeId,
    pub attribute_outputs: Vec<NodeId>,
    /// Parameter nodes in the order of [`GradNetwork::params_mut`].
    pub params: Vec<NodeId>,
}

impl LossGraph {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).item(),
            target: g.value(self.target_loss).item(),
            attributes: self.attribute_losses.iter().map(|&n| g.value(n).item()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub target: f64,
    pub attributes: Vec<f64>,
}

/// Probabilities and thresholded labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Predictions {
    fn from_logits(logits: &[f64]) -> Self {
        let probabilities: Vec<f64> = logits.iter().map(|&h| sigmoid(h)).collect();
        let labels = probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect();
        Self {
            probabilities,
            labels,
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Maps {0,1} labels to the {-1,+1} encoding used by the logistic losses.
pub fn to_signed(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&v| if v == 0 { -1.0 } else { 1.0 }).collect()
}

fn check_signed(what: &str, labels: &[f64]) -> Result<()> {
    match labels.iter().position(|&v| v != 1.0 && v != -1.0) {
        Some(row) => Err(ModelError::Label {
            what: what.to_string(),
            row,
            value: labels[row],
        }),
        None => Ok(()),
    }
}

/// mean(softplus(-label * logit)) for an n×1 logit node.
fn logistic_loss(g: &mut Graph, logits: NodeId, signed: &[f64]) -> Result<NodeId> {
    let y = g.constant(Tensor::matrix(signed.len(), 1, signed.to_vec())?);
    let margin = g.mul(logits, y)?;
    let neg = g.scale(margin, -1.0);
    let sp = g.softplus(neg);
    Ok(g.mean(sp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradNetwork {
    pub config: NetworkConfig,
    pub trunk: Stack,
    pub target_branch: Stack,
    pub attribute_branches: Vec<Stack>,
}

impl GradNetwork {
    /// Builds the network. The trunk, the target branch and each attribute
    /// branch draw from separate streams of the seeded generator, so the
    /// trunk and target initialization do not depend on `n_protected`.
    pub fn build(config: NetworkConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let w = config.hidden_width;
        let mut trunk_dims = vec![config.input_dim];
        trunk_dims.extend(std::iter::repeat_n(w, config.layers_per_branch));
        let mut branch_dims = vec![w; config.layers_per_branch];

        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(k);
            rng
        };
        let trunk = Stack::build(&trunk_dims, false, &mut stream(0))?;

        branch_dims.push(config.target_outputs());
        let target_branch = Stack::build(&branch_dims, true, &mut stream(1))?;

        *branch_dims.last_mut().unwrap() = 1;
        let attribute_branches = (0..config.n_protected)
            .map(|j| Stack::build(&branch_dims, true, &mut stream(2 + j as u64)))
            .collect::<Result<_>>()?;

        Ok(Self {
            config,
            trunk,
            target_branch,
            attribute_branches,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Trainable parameters in a fixed order: trunk, target branch, then
    /// attribute branches.
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = self.trunk.params_mut("trunk");
        out.extend(self.target_branch.params_mut("target"));
        for (j, branch) in self.attribute_branches.iter_mut().enumerate() {
            out.extend(branch.params_mut(&format!("attribute{j}")));
        }
        out
    }

    /// Parameters of the dense layers only.
    pub fn dense_parameter_count(&self) -> usize {
        self.trunk.dense_parameter_count()
            + self.target_branch.dense_parameter_count()
            + self
                .attribute_branches
                .iter()
                .map(Stack::dense_parameter_count)
                .sum::<usize>()
    }

    /// All trainable parameters, batch-norm scale and shift included.
    pub fn parameter_count(&self) -> usize {
        self.trunk.parameter_count()
            + self.target_branch.parameter_count()
            + self
                .attribute_branches
                .iter()
                .map(Stack::parameter_count)
                .sum::<usize>()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(ModelError::Dimension {
                what: "input feature columns",
                expected: self.config.input_dim,
                actual: x.cols(),
            });
        }
        Ok(())
    }

    /// Records the joint loss for one batch:
    /// `target + lambda * sum_j attribute_j`.
    ///
    /// `targets` and each column of `attributes` must be in {-1, +1}.
    /// In train mode batch-norm running statistics are updated.
    pub fn forward_loss(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        targets: &[f64],
        attributes: &[Vec<f64>],
        mode: Mode,
        coupling: BranchCoupling,
    ) -> Result<LossGraph> {
        self.check_input(x)?;
        let n = x.rows();
        if self.config.variant == Variant::Pred {
            if targets.len() != n {
                return Err(ModelError::Dimension {
                    what: "target labels",
                    expected: n,
                    actual: targets.len(),
                });
            }
            check_signed("target", targets)?;
        }
        if attributes.len() != self.attribute_branches.len() {
            return Err(ModelError::Dimension {
                what: "protected attribute columns",
                expected: self.attribute_branches.len(),
                actual: attributes.len(),
            });
        }
        for (j, col) in attributes.iter().enumerate() {
            if col.len() != n {
                return Err(ModelError::Dimension {
                    what: "protected attribute labels",
                    expected: n,
                    actual: col.len(),
                });
            }
            check_signed(&format!("protected attribute {j}"), col)?;
        }

        let mut params = Vec::new();
        let input = g.constant(x.clone());
        let h = self.trunk.forward(g, input, mode, &mut params)?;
        let target_output = self.target_branch.forward(g, h, mode, &mut params)?;
        let target_loss = match self.config.variant {
            Variant::Pred => logistic_loss(g, target_output, targets)?,
            Variant::Auto => {
                let diff = g.sub(target_output, input)?;
                let sq = g.square(diff);
                let total = g.sum(sq);
                g.scale(total, 1.0 / n as f64)
            }
        };

        let mut attribute_losses = Vec::new();
        let mut attribute_outputs = Vec::new();
        for (branch, col) in self.attribute_branches.iter_mut().zip(attributes) {
            let shared = match coupling {
                BranchCoupling::Reversed => g.gradient_reversal(h),
                BranchCoupling::Identity => h,
            };
            let out = branch.forward(g, shared, mode, &mut params)?;
            attribute_losses.push(logistic_loss(g, out, col)?);
            attribute_outputs.push(out);
        }

        let (total, attribute_term) = match attribute_losses.split_first() {
            None => (target_loss, None),
            Some((&first, rest)) => {
                let mut acc = first;
                for &l in rest {
                    acc = g.add(acc, l)?;
                }
                let term = g.scale(acc, self.config.lambda);
                (g.add(target_loss, term)?, Some(term))
            }
        };

        Ok(LossGraph {
            total,
            target_loss,
            attribute_losses,
            attribute_term,
            target_output,
            attribute_outputs,
            params,
        })
    }

    fn trunk_eval(&self, g: &mut Graph, x: &Tensor) -> Result<NodeId> {
        self.check_input(x)?;
        let input = g.constant(x.clone());
        let mut params = Vec::new();
        self.trunk.forward_eval(g, input, &mut params)
    }

    /// Target-branch logits in eval mode.
    pub fn target_logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.trunk_eval(&mut g, x)?;
        let mut params = Vec::new();
        let out = self.target_branch.forward_eval(&mut g, h, &mut params)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Classifies with the target branch (Pred variant only).
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        if self.config.variant != Variant::Pred {
            return Err(ModelError::WrongVariant {
                expected: Variant::Pred,
                actual: self.config.variant,
            });
        }
        Ok(Predictions::from_logits(&self.target_logits(x)?))
    }

    /// Trunk representation in eval mode, `rows × hidden_width`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.trunk_eval(&mut g, x)?;
        Ok(g.value(h).clone())
    }
}

/// Logistic regression on fixed representations.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticHead {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LogisticHead {
    pub const BATCH_SIZE: usize = 64;

    pub fn logits(&self, reps: &Tensor) -> Result<Vec<f64>> {
        if reps.cols() != self.weights.rows() {
            return Err(ModelError::Dimension {
                what: "representation width",
                expected: self.weights.rows(),
                actual: reps.cols(),
            });
        }
        let w = self.weights.data();
        let b = self.bias.data()[0];
        Ok((0..reps.rows())
            .map(|i| reps.row(i).iter().zip(w).map(|(r, w)| r * w).sum::<f64>() + b)
            .collect())
    }

    pub fn predict(&self, reps: &Tensor) -> Result<Predictions> {
        Ok(Predictions::from_logits(&self.logits(reps)?))
    }
}

/// Fits `sigmoid(w·r + b)` by minimizing mean `softplus(-y (w·r + b))` with
/// Adam at its default settings, in shuffled mini-batches of
/// [`LogisticHead::BATCH_SIZE`]. Labels are in {-1, +1}.
pub fn fit_logistic_head(
    reps: &Tensor,
    labels: &[f64],
    rng_seed: u64,
    epochs: usize,
) -> Result<LogisticHead> {
    let n = reps.rows();
    if labels.len() != n {
        return Err(ModelError::Dimension {
            what: "logistic head labels",
            expected: n,
            actual: labels.len(),
        });
    }
    check_signed("target", labels)?;
    if n > 0 && labels.iter().all(|&v| v == labels[0]) {
        warn!("logistic head trained on a single class ({} rows all {})", n, labels[0]);
    }

    // zero start; the seed only drives batch order
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut head = LogisticHead {
        weights: Tensor::zeros(&[reps.cols(), 1]),
        bias: Tensor::zeros(&[1]),
    };
    let mut adam = AdamState::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(LogisticHead::BATCH_SIZE) {
            let xb = reps.select_rows(batch);
            let yb: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(xb);
            let w = g.param(head.weights.clone());
            let b = g.param(head.bias.clone());
            let xw = g.matmul(x, w)?;
            let logits = g.add(xw, b)?;
            let loss = logistic_loss(&mut g, logits, &yb)?;
            let grads = g.backward(loss)?;
            let gw = grads.get(w).expect("weight gradient").clone();
            let gb = grads.get(b).expect("bias gradient").clone();
            let mut params = vec![
                ParamRef {
                    name: "head.weight".into(),
                    value: &mut head.weights,
                },
                ParamRef {
                    name: "head.bias".into(),
                    value: &mut head.bias,
                },
            ];
            adam.step(&mut params, &[&gw, &gb])?;
        }
    }
    Ok(head)
}
