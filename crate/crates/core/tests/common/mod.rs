//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use gradfair::autodiff::{Graph, NodeId, Tensor};
use gradfair::grad_model::{BranchCoupling, GradNetwork, NetworkConfig, Variant};
use gradfair::nn::{AdamConfig, AdamState, BatchNormLayer, DenseLayer, Mode, ParamRef};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_signs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// A small random network with a batch to differentiate on.
pub struct GradCase {
    pub net: GradNetwork,
    pub x: Tensor,
    pub y: Vec<f64>,
    pub attrs: Vec<Vec<f64>>,
}

pub fn grad_case(seed: u64, variant: Variant, max_dim: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(1..=max_dim);
    let n_protected = rng.random_range(1..=2);
    let config = NetworkConfig {
        variant,
        input_dim,
        hidden_width: rng.random_range(2..=max_dim),
        layers_per_branch: rng.random_range(1..=2),
        lambda: [0.5, 1.0, 10.0, 100.0][rng.random_range(0..4)],
        n_protected,
    };
    let rows = rng.random_range(3..=8);
    let mut net = GradNetwork::build(config, seed).unwrap();
    // move batch-norm affine parameters off their identity start
    for p in net.params_mut() {
        if p.name.ends_with(".gamma") || p.name.ends_with(".beta") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    GradCase {
        net,
        x: random_tensor(&mut rng, rows, input_dim),
        y: random_signs(&mut rng, rows),
        attrs: (0..n_protected).map(|_| random_signs(&mut rng, rows)).collect(),
    }
}

/// (target loss, lambda-weighted attribute term) for one forward pass.
fn loss_parts(net: &GradNetwork, case: &GradCase) -> (f64, f64) {
    let mut net = net.clone();
    let mut g = Graph::new();
    let lg = net
        .forward_loss(&mut g, &case.x, &case.y, &case.attrs, Mode::Train, BranchCoupling::Reversed)
        .unwrap();
    let term = lg.attribute_term.map_or(0.0, |t| g.value(t).item());
    (g.value(lg.target_loss).item(), term)
}

/// Compares backpropagated gradients with central differences, reported
/// as the worst violation of `|analytic - numeric| <= max(rel * scale, abs)`
/// as (parameter name, analytic, numeric). `None` when all pass.
///
/// Under `Identity` the oracle differentiates the total loss. Under
/// `Reversed` the attribute term enters trunk parameters with a minus sign,
/// which is the objective the reversal layer descends.
pub fn gradient_check(
    case: &GradCase,
    coupling: BranchCoupling,
    rel: f64,
    abs: f64,
) -> Option<(String, f64, f64)> {
    let mut net = case.net.clone();
    let mut g = Graph::new();
    let lg = net
        .forward_loss(&mut g, &case.x, &case.y, &case.attrs, Mode::Train, coupling)
        .unwrap();
    let grads = g.backward(lg.total).unwrap();
    let analytic: Vec<Tensor> = lg.params.iter().map(|&id| grads.get(id).unwrap().clone()).collect();

    // Batch-norm over a handful of rows curves sharply; 1e-5 steps leave
    // truncation error above 1e-4 relative on small gradients.
    let h = 1e-6;
    let names: Vec<String> = case.net.clone().params_mut().into_iter().map(|p| p.name).collect();
    let mut worst: Option<(String, f64, f64, f64)> = None;
    for (p, name) in names.iter().enumerate() {
        let sign = if coupling == BranchCoupling::Reversed && name.starts_with("trunk") { -1.0 } else { 1.0 };
        for k in 0..analytic[p].len() {
            let mut plus = case.net.clone();
            plus.params_mut()[p].value.data_mut()[k] += h;
            let mut minus = case.net.clone();
            minus.params_mut()[p].value.data_mut()[k] -= h;
            let (tp, ap) = loss_parts(&plus, case);
            let (tm, am) = loss_parts(&minus, case);
            let numeric = ((tp - tm) + sign * (ap - am)) / (2.0 * h);
            let a = analytic[p].data()[k];
            let err = (a - numeric).abs();
            let allowed = (rel * a.abs().max(numeric.abs())).max(abs);
            if err > allowed {
                let excess = err / allowed;
                if worst.as_ref().is_none_or(|w| excess > w.3) {
                    worst = Some((format!("{name}[{k}]"), a, numeric, excess));
                }
            }
        }
    }
    worst.map(|(n, a, b, _)| (n, a, b))
}

/// Exhaustive k-NN: sort every other row by (squared distance, index).
pub fn brute_force_knn(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows();
    (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// A plain MLP classifier trained with the harness's batching protocol,
/// built directly from layer primitives. Used as the reference for the
/// unprotected network.
pub struct PlainMlp {
    pub layers: Vec<(DenseLayer, Option<BatchNormLayer>)>,
}

impl PlainMlp {
    /// Same initialization streams as the network builder: stream 0 for the
    /// hidden stack, stream 1 for the output stack.
    pub fn new(input_dim: usize, width: usize, depth: usize, seed: u64) -> Self {
        let stream = |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        let mut layers = Vec::new();
        let mut rng = stream(0);
        let mut d = input_dim;
        for _ in 0..depth {
            layers.push((DenseLayer::init(d, width, &mut rng).unwrap(), Some(BatchNormLayer::new(width))));
            d = width;
        }
        let mut rng = stream(1);
        for i in 0..depth {
            let out = if i + 1 == depth { 1 } else { width };
            let bn = (i + 1 != depth).then(|| BatchNormLayer::new(out));
            layers.push((DenseLayer::init(width, out, &mut rng).unwrap(), bn));
        }
        Self { layers }
    }

    fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, (dense, bn)) in self.layers.iter_mut().enumerate() {
            out.extend(dense.params_mut(&format!("l{i}")));
            if let Some(bn) = bn {
                out.extend(bn.params_mut(&format!("l{i}")));
            }
        }
        out
    }

    /// Mean `softplus(-y * logit)` over the batch.
    fn loss(&mut self, g: &mut Graph, x: &Tensor, y: &[f64], params: &mut Vec<NodeId>) -> NodeId {
        let mut h = g.constant(x.clone());
        for (dense, bn) in &mut self.layers {
            h = dense.forward(g, h, params).unwrap();
            if let Some(bn) = bn {
                h = bn.forward(g, h, Mode::Train, params).unwrap();
                h = g.relu(h);
            }
        }
        let neg_y = g.constant(Tensor::matrix(y.len(), 1, y.iter().map(|v| -v).collect()).unwrap());
        let margin = g.mul(h, neg_y).unwrap();
        let sp = g.softplus(margin);
        g.mean(sp)
    }

    /// Trains like the harness does and returns the mean loss per epoch.
    pub fn train(&mut self, x: &Tensor, y: &[f64], epochs: usize, batch: usize, seed: u64) -> Vec<f64> {
        let mut adam = AdamState::new(AdamConfig::default());
        let n = x.rows();
        let mut losses = Vec::new();
        for epoch in 1..=epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + epoch as u64));
            let mut chunks: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
            if chunks.len() > 1 && chunks.last().unwrap().len() == 1 {
                let last = chunks.pop().unwrap();
                chunks.last_mut().unwrap().extend(last);
            }
            let mut sum = 0.0;
            for idx in &chunks {
                let xb = x.select_rows(idx);
                let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                let mut g = Graph::new();
                let mut params = Vec::new();
                let loss = self.loss(&mut g, &xb, &yb, &mut params);
                sum += g.value(loss).item() * idx.len() as f64;
                let grads = g.backward(loss).unwrap();
                let refs: Vec<&Tensor> = params.iter().map(|&p| grads.get(p).unwrap()).collect();
                adam.step(&mut self.params_mut(), &refs).unwrap();
            }
            losses.push(sum / n as f64);
        }
        losses
    }

    /// Every parameter and running statistic, flattened in layer order.
    pub fn state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (d, bn) in &self.layers {
            out.extend_from_slice(d.weights.data());
            out.extend_from_slice(d.bias.data());
            if let Some(bn) = bn {
                for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    out.extend_from_slice(t.data());
                }
            }
        }
        out
    }
}

/// Same flattening for the trunk and target branch of a network.
pub fn network_state(net: &GradNetwork) -> Vec<f64> {
    let mut out = Vec::new();
    for b in net.trunk.blocks.iter().chain(&net.target_branch.blocks) {
        out.extend_from_slice(b.dense.weights.data());
        out.extend_from_slice(b.dense.bias.data());
        if let Some(bn) = &b.norm {
            for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                out.extend_from_slice(t.data());
            }
        }
    }
    out
}
