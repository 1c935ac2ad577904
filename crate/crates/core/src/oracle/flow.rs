//! Affine-coupling normalizing flows, one per class.
//!
//! Each layer maps `x ↦ z` by keeping the coordinates where `mask = 1` and
//! transforming the others as `z = x ⊙ exp(s) + t`, with `s`, `t` computed
//! from the kept coordinates. The log-determinant of a layer is `Σ s`.
//! Log-scales are clamped softly: `s = s_max · tanh(raw / s_max)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::ClassPrior;
use crate::error::{contract, Error, Result};
use crate::numcore::{Adam, AdamConfig, Graph, NodeId, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
}

fn default_layers() -> usize {
    6
}
fn default_hidden() -> usize {
    64
}
fn default_s_max() -> f64 {
    5.0
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            hidden: default_hidden(),
            s_max: default_s_max(),
        }
    }
}

/// `tanh` conditioner: `W2 · tanh(W1 · u + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TwoLayerNet {
    /// Random first layer, zero output layer: the net starts out as the zero map.
    fn init(dim: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        let scale = (1.0 / dim as f64).sqrt();
        let w1: Vec<f64> = rng.normal_vec(dim * hidden).into_iter().map(|v| v * scale).collect();
        Ok(Self {
            w1: Tensor::matrix(dim, hidden, w1)?,
            b1: Tensor::zeros(vec![1, hidden]),
            w2: Tensor::zeros(vec![hidden, dim]),
            b2: Tensor::zeros(vec![1, dim]),
        })
    }

    fn forward(&self, u: &Tensor) -> Result<Tensor> {
        let ones_h = Tensor::full(self.b1.shape().to_vec(), 1.0)?;
        let ones_d = Tensor::full(self.b2.shape().to_vec(), 1.0)?;
        let h = u
            .matmul(&self.w1)?
            .affine_broadcast(&ones_h, &self.b1)?
            .map(f64::tanh, "conditioner")?;
        h.matmul(&self.w2)?.affine_broadcast(&ones_d, &self.b2)
    }

    fn record(&self, g: &mut Graph, u: NodeId, ids: &mut Vec<NodeId>) -> Result<NodeId> {
        let w1 = g.leaf(self.w1.clone());
        let b1 = g.leaf(self.b1.clone());
        let w2 = g.leaf(self.w2.clone());
        let b2 = g.leaf(self.b2.clone());
        ids.extend([w1, b1, w2, b2]);
        let ones_h = g.leaf(Tensor::full(self.b1.shape().to_vec(), 1.0)?);
        let ones_d = g.leaf(Tensor::full(self.b2.shape().to_vec(), 1.0)?);
        let a = g.matmul(u, w1)?;
        let a = g.affine_broadcast(a, ones_h, b1)?;
        let a = g.tanh(a)?;
        let r = g.matmul(a, w2)?;
        g.affine_broadcast(r, ones_d, b2)
    }

    fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// 1 = passed through and conditioned on, 0 = transformed.
    pub mask: Vec<f64>,
    pub scale_net: TwoLayerNet,
    pub shift_net: TwoLayerNet,
    pub s_max: f64,
}

impl CouplingLayer {
    /// Alternating mask `(d + parity) mod 2`. In one dimension there is
    /// nothing to condition on, so the single coordinate is always
    /// transformed by a learned constant affine map.
    pub fn alternating_mask(dim: usize, parity: usize) -> Vec<f64> {
        if dim == 1 {
            return vec![0.0];
        }
        (0..dim).map(|d| ((d + parity) % 2) as f64).collect()
    }

    fn inv_mask(&self) -> Vec<f64> {
        self.mask.iter().map(|m| 1.0 - m).collect()
    }

    /// Clamped log-scale and shift for a batch, both zero on kept coordinates.
    fn scale_shift(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.mask.len();
        let zero = Tensor::zeros(vec![1, d]);
        let mask = Tensor::row(self.mask.clone())?;
        let inv = Tensor::row(self.inv_mask())?;
        let xm = x.affine_broadcast(&mask, &zero)?;
        let s_max = self.s_max;
        let s = self
            .scale_net
            .forward(&xm)?
            .map(|r| s_max * (r / s_max).tanh(), "log-scale clamp")?
            .affine_broadcast(&inv, &zero)?;
        let t = self.shift_net.forward(&xm)?.affine_broadcast(&inv, &zero)?;
        Ok((s, t))
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (s, t) = self.scale_shift(x)?;
        let z = x.mul(&s.map(f64::exp, "exp")?)?.add(&t)?;
        Ok((z, s))
    }

    fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        // kept coordinates are identical in x and z, so s and t are recomputable
        let (s, t) = self.scale_shift(z)?;
        z.sub(&t)?.mul(&s.map(|v| (-v).exp(), "exp")?)
    }

    fn record(&self, g: &mut Graph, h: NodeId, ids: &mut Vec<NodeId>) -> Result<(NodeId, NodeId)> {
        let d = self.mask.len();
        let zero = g.leaf(Tensor::zeros(vec![1, d]));
        let mask = g.leaf(Tensor::row(self.mask.clone())?);
        let xm = g.affine_broadcast(h, mask, zero)?;

        let raw_s = self.scale_net.record(g, xm, ids)?;
        let inv_smax = g.leaf(Tensor::full(vec![1, d], 1.0 / self.s_max)?);
        let s = g.affine_broadcast(raw_s, inv_smax, zero)?;
        let s = g.tanh(s)?;
        let smax_inv = g.leaf(Tensor::row(self.inv_mask().iter().map(|m| m * self.s_max).collect())?);
        let s = g.affine_broadcast(s, smax_inv, zero)?;

        let raw_t = self.shift_net.record(g, xm, ids)?;
        let inv = g.leaf(Tensor::row(self.inv_mask())?);
        let t = g.affine_broadcast(raw_t, inv, zero)?;

        let es = g.exp(s)?;
        let z = g.mul(h, es)?;
        let z = g.add(z, t)?;
        Ok((z, s))
    }
}

/// Flow for a single class: `x ↦ z` through the layers in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFlow {
    pub layers: Vec<CouplingLayer>,
}

fn std_normal_logpdf_rows(z: &Tensor) -> Vec<f64> {
    let d = z.cols() as f64;
    (0..z.rows())
        .map(|r| {
            let sq: f64 = z.row_slice(r).iter().map(|v| v * v).sum();
            -0.5 * sq - 0.5 * d * (2.0 * PI).ln()
        })
        .collect()
}

impl ClassFlow {
    pub fn new(dim: usize, cfg: &FlowConfig, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 || cfg.layers == 0 || cfg.hidden == 0 {
            return contract("flow needs positive dimension, depth and width");
        }
        if !(cfg.s_max > 0.0) || !cfg.s_max.is_finite() {
            return contract("flow scale clamp s_max must be positive");
        }
        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(CouplingLayer {
                    mask: CouplingLayer::alternating_mask(dim, l),
                    scale_net: TwoLayerNet::init(dim, cfg.hidden, rng)?,
                    shift_net: TwoLayerNet::init(dim, cfg.hidden, rng)?,
                    s_max: cfg.s_max,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].mask.len()
    }

    /// `z = f(x)` and the per-row log-determinant of the Jacobian.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut h = x.clone();
        let mut logdet = vec![0.0; x.rows()];
        for layer in &self.layers {
            let (z, s) = layer.forward(&h)?;
            for (r, ld) in logdet.iter_mut().enumerate() {
                *ld += s.row_slice(r).iter().sum::<f64>();
            }
            h = z;
        }
        Ok((h, logdet))
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for layer in self.layers.iter().rev() {
            h = layer.inverse(&h)?;
        }
        Ok(h)
    }

    /// `log p(x) = log N(f(x); 0, I) + log |det J_f(x)|` per row.
    pub fn log_likelihood_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.dim() {
            return contract("flow input dimension mismatch");
        }
        let (z, logdet) = self.forward(x)?;
        Ok(std_normal_logpdf_rows(&z)
            .into_iter()
            .zip(logdet)
            .map(|(a, b)| a + b)
            .collect())
    }

    pub fn mean_nll(&self, x: &Tensor) -> Result<f64> {
        let ll = self.log_likelihood_batch(x)?;
        Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.scale_net.params().into_iter().chain(l.shift_net.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.scale_net.params_mut().into_iter().chain(l.shift_net.params_mut()))
            .collect()
    }

    /// Mean NLL of a batch as a graph, returning the loss node and the
    /// parameter leaves in [`ClassFlow::params`] order. The constant
    /// `D/2 · ln 2π` is left out.
    pub fn record_nll(&self, g: &mut Graph, x: &Tensor) -> Result<(NodeId, Vec<NodeId>)> {
        let n = x.rows() as f64;
        let mut ids = Vec::new();
        let mut h = g.leaf(x.clone());
        let mut logdets = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (z, s) = layer.record(g, h, &mut ids)?;
            logdets.push(g.sum(s)?);
            h = z;
        }
        let sq = g.mul(h, h)?;
        let sq = g.sum(sq)?;
        let mut loss = g.scale(sq, 0.5)?;
        for ld in logdets {
            loss = g.sub(loss, ld)?;
        }
        let loss = g.scale(loss, 1.0 / n)?;
        Ok((loss, ids))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    #[serde(default)]
    pub adam: AdamConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Reshuffle the data every epoch.
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_batch() -> usize {
    128
}
fn default_true() -> bool {
    true
}

/// Mean per-sample negative log-likelihood, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllTrace {
    pub initial: f64,
    /// Full-data NLL after each epoch.
    pub checkpoints: Vec<f64>,
    /// Mean minibatch loss within each epoch.
    pub epoch_batch_mean: Vec<f64>,
}

impl NllTrace {
    pub fn final_nll(&self) -> f64 {
        self.checkpoints.last().copied().unwrap_or(self.initial)
    }
}

/// Maximum-likelihood fit of one class flow with Adam on minibatches.
pub fn train_mle(flow: &mut ClassFlow, data: &[Vec<f64>], cfg: &FlowTrainConfig) -> Result<NllTrace> {
    if data.is_empty() {
        return contract("train_mle: empty training set");
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return contract("train_mle: epochs and batch size must be positive");
    }
    let dim = flow.dim();
    if data.iter().any(|x| x.len() != dim) {
        return contract("train_mle: sample dimension mismatch");
    }
    let all = Tensor::from_rows(data)?;
    let constant = 0.5 * dim as f64 * (2.0 * PI).ln();
    let s_max = flow.layers[0].s_max;
    let lr = cfg.adam.learning_rate;
    let diverged = |step: usize, detail: String| Error::Diverged {
        step,
        learning_rate: lr,
        detail: format!("s_max {s_max}; {detail}"),
    };
    let initial = flow.mean_nll(&all)?;

    let mut rng = RngStream::new(cfg.seed, 0x666c_6f77);
    let mut adam = Adam::new(cfg.adam, &flow.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = NllTrace {
        initial,
        checkpoints: Vec::with_capacity(cfg.epochs),
        epoch_batch_mean: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0;
    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut batch_losses = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = all.select_rows(chunk)?;
            let mut g = Graph::new();
            let (loss, ids) = flow
                .record_nll(&mut g, &batch)
                .map_err(|e| diverged(step, e.to_string()))?;
            let value = g.value(loss).item() + constant;
            let adj = g.backward(loss)?;
            let grads: Vec<Tensor> = ids
                .iter()
                .zip(flow.params())
                .map(|(&id, p)| adj.get_or_zeros(id, p))
                .collect();
            adam.step(&mut flow.params_mut(), &grads)
                .map_err(|e| diverged(step, e.to_string()))?;
            batch_losses += value;
            batches += 1;
        }
        trace.epoch_batch_mean.push(batch_losses / batches as f64);
        let nll = flow.mean_nll(&all).map_err(|e| diverged(step, e.to_string()))?;
        trace.checkpoints.push(nll);
    }
    Ok(trace)
}

/// One flow per class plus the class prior.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOracle {
    prior: ClassPrior,
    flows: Vec<ClassFlow>,
    config: FlowConfig,
    frozen: bool,
}

impl FlowOracle {
    /// Untrained oracle whose flows all start at the identity map.
    pub fn new(prior: ClassPrior, dim: usize, config: FlowConfig, rng: &mut RngStream) -> Result<Self> {
        let flows = (0..prior.len())
            .map(|_| ClassFlow::new(dim, &config, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            prior,
            flows,
            config,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(
        prior: ClassPrior,
        flows: Vec<ClassFlow>,
        config: FlowConfig,
        frozen: bool,
    ) -> Result<Self> {
        if flows.len() != prior.len() {
            return contract("flow count differs from class count");
        }
        let dim = flows.first().map(ClassFlow::dim).unwrap_or(0);
        if flows.iter().any(|f| f.dim() != dim || f.layers.is_empty()) {
            return contract("all class flows must share one dimension");
        }
        Ok(Self {
            prior,
            flows,
            config,
            frozen,
        })
    }

    pub fn prior(&self) -> &ClassPrior {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.flows[0].dim()
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn flows(&self) -> &[ClassFlow] {
        &self.flows
    }

    pub fn with_prior(&self, prior: ClassPrior) -> Self {
        Self { prior, ..self.clone() }
    }

    /// Mutable access to a class flow; refused once frozen.
    pub fn class_flow_mut(&mut self, k: usize) -> Result<&mut ClassFlow> {
        if self.frozen {
            return contract("flow oracle is frozen; parameters are immutable");
        }
        let n = self.flows.len();
        self.flows
            .get_mut(k)
            .ok_or_else(|| Error::Contract(format!("class {k} out of range for K={n}")))
    }

    /// Fit class `k` to `data` by maximum likelihood.
    pub fn train_class(&mut self, k: usize, data: &[Vec<f64>], cfg: &FlowTrainConfig) -> Result<NllTrace> {
        train_mle(self.class_flow_mut(k)?, data, cfg)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub(crate) fn log_likelihood(&self, x: &[f64], k: usize) -> Result<f64> {
        let t = Tensor::row(x.to_vec())?;
        Ok(self.flows[k].log_likelihood_batch(&t)?[0])
    }

    pub(crate) fn log_likelihood_batch(&self, x: &Tensor, k: usize) -> Result<Vec<f64>> {
        self.flows[k].log_likelihood_batch(x)
    }

    pub(crate) fn sample(&self, k: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.sample_batch(k, 1, rng)?.remove(0))
    }

    pub(crate) fn sample_batch(&self, k: usize, n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        if !self.frozen {
            return contract("sampling requires a frozen flow oracle");
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let d = self.dim();
        let z = Tensor::matrix(n, d, rng.normal_vec(n * d))?;
        let x = self.flows[k].inverse(&z)?;
        Ok((0..n).map(|r| x.row_slice(r).to_vec()).collect())
    }
}
