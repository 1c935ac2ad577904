//! Small softmax MLP classifiers `q(y|x)` trained by minibatch cross-entropy,
//! plus accuracy and expected calibration error.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::inference::{PosteriorVector, Predictor};
use crate::numcore::{softmax, Adam, AdamConfig, Graph, NodeId, RngStream, Tensor};
use crate::oracle::LabeledSample;
use crate::persist::{Envelope, TensorDoc, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// Where training targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// One-hot of the class the sample was drawn from.
    Sampled,
    /// One-hot of the oracle posterior's argmax (lowest index on ties).
    Hard,
    /// The full oracle posterior.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub label_mode: LabelMode,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            label_mode: LabelMode::Sampled,
            learning_rate: default_lr(),
            epochs: 50,
            batch_size: default_batch(),
            seed: 0,
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Tensor,
    b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Per-epoch mean training cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
}

impl SoftmaxClassifier {
    /// Glorot-normal weights, zero biases.
    pub fn new(dim: usize, k: usize, hidden: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        Self::build(dim, k, hidden, activation, |fan_in, fan_out| {
            let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
            rng.normal_vec(fan_in * fan_out).into_iter().map(|v| v * sd).collect()
        })
    }

    /// All parameters zero; predicts the uniform distribution everywhere.
    pub fn zeros(dim: usize, k: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        Self::build(dim, k, hidden, activation, |fan_in, fan_out| {
            vec![0.0; fan_in * fan_out]
        })
    }

    fn build(
        dim: usize,
        k: usize,
        hidden: &[usize],
        activation: Activation,
        mut weights: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || k < 2 || hidden.contains(&0) {
            return contract("classifier needs D >= 1, K >= 2 and positive hidden widths");
        }
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(k);
        let layers = widths
            .windows(2)
            .map(|w| {
                Ok(Dense {
                    w: Tensor::matrix(w[0], w[1], weights(w[0], w[1]))?,
                    b: Tensor::zeros(vec![1, w[1]]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.w.cols())
            .collect()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    /// Logits `[n, K]` for a batch `[n, D]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.dim() {
            return contract(format!("classifier expects D={}, got {}", self.dim(), x.cols()));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let ones = Tensor::full(l.b.shape().to_vec(), 1.0)?;
            h = h.matmul(&l.w)?.affine_broadcast(&ones, &l.b)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => h.map(f64::tanh, "tanh")?,
                    Activation::Relu => h.map(|v| v.max(0.0), "relu")?,
                };
            }
        }
        Ok(h)
    }

    /// Mean cross-entropy `-Σ target · log_softmax(logits)` over a batch.
    fn record_loss(&self, g: &mut Graph, x: &Tensor, targets: &Tensor) -> Result<(NodeId, Vec<NodeId>)> {
        let mut ids = Vec::new();
        let mut h = g.leaf(x.clone());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let w = g.leaf(l.w.clone());
            let b = g.leaf(l.b.clone());
            ids.extend([w, b]);
            let ones = g.leaf(Tensor::full(l.b.shape().to_vec(), 1.0)?);
            let z = g.matmul(h, w)?;
            h = g.affine_broadcast(z, ones, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        let logp = g.log_softmax(h)?;
        let t = g.leaf(targets.clone());
        let prod = g.mul(t, logp)?;
        let s = g.sum(prod)?;
        let loss = g.scale(s, -1.0 / x.rows() as f64)?;
        Ok((loss, ids))
    }

    /// Gradient of the mean cross-entropy with respect to each parameter
    /// tensor, plus the loss value.
    pub fn loss_and_gradients(&self, x: &Tensor, targets: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (loss, ids) = self.record_loss(&mut g, x, targets)?;
        let adj = g.backward(loss)?;
        let grads = ids
            .iter()
            .zip(self.params())
            .map(|(&id, p)| adj.get_or_zeros(id, p))
            .collect();
        Ok((g.value(loss).item(), grads))
    }

    /// Flat copy of all parameters, in layer order.
    pub fn parameter_vector(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().to_vec()).collect()
    }

    pub fn set_parameter_vector(&mut self, v: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|p| p.numel()).sum();
        if v.len() != total {
            return contract("parameter vector length mismatch");
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.assign(&v[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    /// Minibatch Adam on the mean cross-entropy against targets chosen by
    /// `spec.label_mode`. Deterministic given `spec.seed`.
    pub fn train(&mut self, data: &[LabeledSample], spec: &TrainSpec) -> Result<TrainTrace> {
        if data.is_empty() {
            return contract("train: empty training set");
        }
        if spec.epochs == 0 || spec.batch_size == 0 {
            return contract("train: epochs and batch size must be at least 1");
        }
        let k = self.num_classes();
        let xs: Vec<Vec<f64>> = data.iter().map(|s| s.x.clone()).collect();
        let x_all = Tensor::from_rows(&xs)?;
        let t_all = Tensor::from_rows(&targets(data, spec.label_mode, k)?)?;

        let mut rng = RngStream::new(spec.seed, 2);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: spec.learning_rate,
                ..Default::default()
            },
            &self.params(),
        );
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut trace = TrainTrace {
            epoch_loss: Vec::with_capacity(spec.epochs),
        };
        let mut step = 0;
        for _ in 0..spec.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(spec.batch_size) {
                step += 1;
                let diverged = |e: Error| Error::Diverged {
                    step,
                    learning_rate: spec.learning_rate,
                    detail: e.to_string(),
                };
                let x = x_all.select_rows(chunk)?;
                let t = t_all.select_rows(chunk)?;
                let (loss, grads) = self.loss_and_gradients(&x, &t).map_err(diverged)?;
                adam.step(&mut self.params_mut(), &grads).map_err(diverged)?;
                total += loss * chunk.len() as f64;
            }
            trace.epoch_loss.push(total / data.len() as f64);
        }
        Ok(trace)
    }

    pub fn to_json(&self) -> Result<String> {
        let params = ClassifierParams {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    w: (&l.w).into(),
                    b: (&l.b).into(),
                })
                .collect(),
        };
        let env = Envelope {
            format_version: FORMAT_VERSION,
            kind: "classifier".into(),
            k: self.num_classes(),
            d: self.dim(),
            prior: Vec::new(),
            parameters: serde_json::to_value(params)?,
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let env = Envelope::parse(s, &["classifier"])?;
        let p: ClassifierParams = serde_json::from_value(env.parameters)?;
        let layers: Vec<Dense> = p
            .layers
            .into_iter()
            .map(|l| {
                Ok(Dense {
                    w: l.w.try_into()?,
                    b: l.b.try_into()?,
                })
            })
            .collect::<Result<_>>()?;
        if layers.is_empty() {
            return contract("classifier document has no layers");
        }
        let mut width = env.d;
        for l in &layers {
            if l.w.rows() != width || l.b.numel() != l.w.cols() {
                return contract("classifier layer shapes are inconsistent");
            }
            width = l.w.cols();
        }
        if width != env.k {
            return contract("classifier output width differs from K");
        }
        Ok(Self {
            layers,
            activation: p.activation,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    w: TensorDoc,
    b: TensorDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierParams {
    activation: Activation,
    layers: Vec<LayerDoc>,
}

impl Predictor for SoftmaxClassifier {
    fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.w.cols()).unwrap_or(0)
    }

    fn predict_proba(&self, x: &[f64]) -> Result<PosteriorVector> {
        Ok(self.predict_batch(&[x.to_vec()])?.remove(0))
    }

    fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<PosteriorVector>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits(&Tensor::from_rows(xs)?)?;
        (0..logits.rows())
            .map(|r| PosteriorVector::new(softmax(logits.row_slice(r))?))
            .collect()
    }
}

/// Train a fresh classifier initialized from `spec.seed`.
pub fn fit(dim: usize, k: usize, data: &[LabeledSample], spec: &TrainSpec) -> Result<(SoftmaxClassifier, TrainTrace)> {
    let mut rng = RngStream::new(spec.seed, 1);
    let mut c = SoftmaxClassifier::new(dim, k, &spec.hidden, spec.activation, &mut rng)?;
    let trace = c.train(data, spec)?;
    Ok((c, trace))
}

/// Training targets for each sample.
pub fn targets(data: &[LabeledSample], mode: LabelMode, k: usize) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            if s.y >= k {
                return contract(format!("sample {i}: label {} out of range", s.y));
            }
            let post = || {
                s.posterior
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("sample {i}: {mode:?} labels need an oracle posterior")))
            };
            Ok(match mode {
                LabelMode::Sampled => PosteriorVector::one_hot(k, s.y).probs().to_vec(),
                LabelMode::Hard => PosteriorVector::one_hot(k, post()?.argmax()).probs().to_vec(),
                LabelMode::Soft => {
                    let p = post()?;
                    if p.len() != k {
                        return contract(format!("sample {i}: posterior has wrong length"));
                    }
                    p.probs().to_vec()
                }
            })
        })
        .collect()
}

/// Fraction of samples whose predicted argmax equals the drawn class.
pub fn accuracy(model: &dyn Predictor, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return contract("accuracy of an empty set");
    }
    let xs: Vec<Vec<f64>> = data.iter().map(|s| s.x.clone()).collect();
    let hits = model
        .predict_batch(&xs)?
        .iter()
        .zip(data)
        .filter(|(q, s)| q.argmax() == s.y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Binned ECE over `(prediction, label)` pairs with equal-width confidence
/// bins on `[0, 1]`; confidence 1 falls in the top bin.
pub fn ece_from_predictions(preds: &[(PosteriorVector, usize)], bins: usize) -> Result<f64> {
    if bins == 0 {
        return contract("ece needs at least one bin");
    }
    if preds.is_empty() {
        return contract("ece of an empty set");
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0.0; bins];
    for (q, y) in preds {
        let c = q.max_prob();
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        correct[b] += f64::from(u8::from(q.argmax() == *y));
    }
    let n = preds.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

/// ECE of `model` against the drawn class labels of `data`.
pub fn ece(model: &dyn Predictor, data: &[LabeledSample], bins: usize) -> Result<f64> {
    let xs: Vec<Vec<f64>> = data.iter().map(|s| s.x.clone()).collect();
    let preds: Vec<_> = model
        .predict_batch(&xs)?
        .into_iter()
        .zip(data.iter().map(|s| s.y))
        .collect();
    ece_from_predictions(&preds, bins)
}

pub const DEFAULT_ECE_BINS: usize = 15;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_is_uniform() {
        let c = SoftmaxClassifier::zeros(3, 4, &[5], Activation::Relu).unwrap();
        let q = c.predict_proba(&[1.0, -2.0, 0.5]).unwrap();
        assert!(q.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_output_ignores_logit_offset() {
        let mut rng = RngStream::new(1, 1);
        let mut c = SoftmaxClassifier::new(2, 3, &[], Activation::Tanh, &mut rng).unwrap();
        let x = [0.4, -0.9];
        let before = c.predict_proba(&x).unwrap();
        // adding a constant to every output bias shifts all logits equally
        let last = c.layers.last_mut().unwrap();
        let shifted: Vec<f64> = last.b.data().iter().map(|v| v + 7.5).collect();
        last.b.assign(&shifted).unwrap();
        let after = c.predict_proba(&x).unwrap();
        for (a, b) in before.probs().iter().zip(after.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_gradient_wrt_logits_is_q_minus_target() {
        // A linear model with identity weights and no hidden layer makes the
        // logits equal to the inputs, so d loss / d x = (q - t) / n.
        let mut c = SoftmaxClassifier::zeros(3, 3, &[], Activation::Tanh).unwrap();
        c.layers[0].w.assign(&[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let logits = [0.2, -1.0, 0.7];
        let target = [0.1, 0.6, 0.3];
        let x = Tensor::row(logits.to_vec()).unwrap();
        let t = Tensor::row(target.to_vec()).unwrap();
        let q = softmax(&logits).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut up = logits;
            up[j] += h;
            let mut dn = logits;
            dn[j] -= h;
            let f = |v: [f64; 3]| c.loss_and_gradients(&Tensor::row(v.to_vec()).unwrap(), &t).unwrap().0;
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - (q[j] - target[j])).abs() < 1e-8);
        }
        // bias gradient of the output layer is the same quantity
        let (_, grads) = c.loss_and_gradients(&x, &t).unwrap();
        for j in 0..3 {
            assert!((grads[1].data()[j] - (q[j] - target[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_by_mode() {
        let mut s = LabeledSample::new(vec![0.0], 2);
        assert!(targets(&[s.clone()], LabelMode::Soft, 3).is_err());
        assert_eq!(
            targets(&[s.clone()], LabelMode::Sampled, 3).unwrap()[0],
            vec![0., 0., 1.]
        );
        s.posterior = Some(PosteriorVector::new(vec![0.4, 0.4, 0.2]).unwrap());
        assert_eq!(targets(&[s.clone()], LabelMode::Hard, 3).unwrap()[0], vec![1., 0., 0.]);
        assert_eq!(targets(&[s], LabelMode::Soft, 3).unwrap()[0], vec![0.4, 0.4, 0.2]);
    }

    #[test]
    fn ece_fixtures() {
        let p = |c: f64| PosteriorVector::new(vec![c, 1.0 - c]).unwrap();
        let preds = vec![(p(0.9), 0), (p(0.9), 0), (p(0.6), 0), (p(0.6), 1)];
        assert!((ece_from_predictions(&preds, 15).unwrap() - 0.1).abs() < 1e-12);

        let always0: Vec<_> = (0..1000).map(|i| (PosteriorVector::one_hot(2, 0), i % 2)).collect();
        assert!((ece_from_predictions(&always0, 15).unwrap() - 0.5).abs() < 1e-12);

        let mut rev = preds.clone();
        rev.reverse();
        assert_eq!(
            ece_from_predictions(&rev, 15).unwrap(),
            ece_from_predictions(&preds, 15).unwrap()
        );
    }

    #[test]
    fn json_round_trip() {
        let mut rng = RngStream::new(3, 3);
        let c = SoftmaxClassifier::new(4, 3, &[7, 5], Activation::Relu, &mut rng).unwrap();
        let back = SoftmaxClassifier::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hidden(), vec![7, 5]);
    }
}
