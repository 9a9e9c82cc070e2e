//! Dense ReLU network with a softmax cross-entropy head, mini-batch
//! training and validation-loss early stopping.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::optim::{OptState, Optimizer, StepCtx};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("input has {got} features, network expects {expected}")]
    Features { expected: usize, got: usize },
    #[error("{labels} labels for {rows} rows")]
    Labels { rows: usize, labels: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("network needs at least an input and an output width")]
    Dims,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(in, out)`
    pub w: Tensor,
    /// `(out)`
    pub b: Tensor,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
    pub seed: u64,
}

/// Activations saved by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct Cache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    pub inputs: Vec<Tensor>,
    pub logits: Tensor,
}

impl Network {
    /// He-uniform weights, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Network, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::Dims);
        }
        let mut rng = Rng::new(seed).child_named("init");
        let layers = dims
            .windows(2)
            .map(|p| {
                let limit = (6.0 / p[0] as f64).sqrt();
                let w: Vec<f64> = (0..p[0] * p[1]).map(|_| rng.random_range(-limit..limit)).collect();
                Dense {
                    w: Tensor::new(vec![p[0], p[1]], w).expect("sized"),
                    b: Tensor::zeros(&[p[1]]),
                }
            })
            .collect();
        Ok(Network { layers, seed })
    }

    pub fn zeros(dims: &[usize]) -> Result<Network, NnError> {
        let mut n = Network::new(dims, 0)?;
        for l in &mut n.layers {
            l.w.data_mut().fill(0.0);
        }
        Ok(n)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters in order `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.all_finite())
    }

    /// Logits for a `(batch, in)` matrix.
    pub fn forward(&self, x: &Tensor) -> Result<Cache, NnError> {
        let got = x.shape().get(1).copied().unwrap_or(0);
        if x.shape().len() != 2 || got != self.input_dim() {
            return Err(NnError::Features {
                expected: self.input_dim(),
                got,
            });
        }
        let rows = x.shape()[0];
        let mut inputs = vec![x.clone()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.fan_out();
            let mut z = Vec::with_capacity(rows * out);
            for _ in 0..rows {
                z.extend_from_slice(layer.b.data());
            }
            let a = inputs.last().expect("non-empty");
            gemm(a.data(), (rows, layer.fan_in()), false, layer.w.data(), (layer.fan_in(), out), false, &mut z, 1.0);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(Tensor::new(vec![rows, out], z).expect("sized"));
        }
        let logits = inputs.pop().expect("output");
        Ok(Cache { inputs, logits })
    }

    /// Mean cross-entropy over the batch and its gradient, one tensor per
    /// parameter in [`Network::params`] order.
    pub fn backward(&self, cache: &Cache, labels: &[usize]) -> Result<(f64, Vec<Tensor>), NnError> {
        let rows = cache.logits.shape()[0];
        if labels.len() != rows {
            return Err(NnError::Labels {
                rows,
                labels: labels.len(),
            });
        }
        let (loss, mut delta) = softmax_xent(&cache.logits, labels);
        let mut grads = vec![Tensor::scalar(0.0); 2 * self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (fi, fo) = (layer.fan_in(), layer.fan_out());
            let a = &cache.inputs[i];
            let mut dw = vec![0.0; fi * fo];
            gemm(a.data(), (rows, fi), true, &delta, (rows, fo), false, &mut dw, 0.0);
            let mut db = vec![0.0; fo];
            for r in 0..rows {
                for (d, v) in db.iter_mut().zip(&delta[r * fo..(r + 1) * fo]) {
                    *d += v;
                }
            }
            grads[2 * i] = Tensor::new(vec![fi, fo], dw).expect("sized");
            grads[2 * i + 1] = Tensor::new(vec![fo], db).expect("sized");
            if i > 0 {
                let mut prev = vec![0.0; rows * fi];
                gemm(&delta, (rows, fo), false, layer.w.data(), (fi, fo), true, &mut prev, 0.0);
                for (p, &act) in prev.iter_mut().zip(a.data()) {
                    if act <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok((loss, grads))
    }

    /// Mean loss and gradients for a batch.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>), NnError> {
        let cache = self.forward(x)?;
        self.backward(&cache, labels)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
        let cache = self.forward(x)?;
        Ok(softmax_xent(&cache.logits, labels).0)
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn softmax_xent(logits: &Tensor, labels: &[usize]) -> (f64, Vec<f64>) {
    let (rows, k) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = vec![0.0; rows * k];
    let mut loss = 0.0;
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        let z = logits.row(r);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_sum = sum.ln() + m;
        loss += log_sum - z[labels[r]];
        let g = &mut grad[r * k..(r + 1) * k];
        for (gi, zi) in g.iter_mut().zip(z) {
            *gi = (zi - log_sum).exp() * inv;
        }
        g[labels[r]] -= inv;
    }
    (loss * inv, grad)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1000;

/// `(mean loss, accuracy)` over a dataset.
pub fn evaluate_full(net: &Network, data: &Dataset) -> Result<(f64, f64), NnError> {
    if data.is_empty() {
        return Err(NnError::Empty);
    }
    let (n, f) = (data.len(), data.features());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let x = Tensor::new(vec![end - start, f], data.x.data()[start * f..end * f].to_vec()).expect("sized");
        let cache = net.forward(&x)?;
        let labels = &data.labels[start..end];
        loss += softmax_xent(&cache.logits, labels).0 * (end - start) as f64;
        correct += (0..end - start).filter(|&r| argmax(cache.logits.row(r)) == labels[r]).count();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Fraction of examples whose arg-max logit matches the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64, NnError> {
    evaluate_full(net, data).map(|(_, acc)| acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub enabled: bool,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop: EarlyStop,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            max_epochs: 100,
            early_stop: EarlyStop {
                enabled: true,
                patience: 5,
            },
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.early_stop.enabled && self.early_stop.patience == 0 {
            return Err("patience must be at least 1 when early stopping is enabled".into());
        }
        Ok(())
    }
}

/// Stops once the monitored loss has failed to strictly improve on its best
/// value for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    /// Record `loss` for `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.waited = 0;
        } else {
            self.waited += 1;
        }
        self.waited >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Per-epoch learning rate; empty for unscheduled optimizers.
    pub lr: Vec<f64>,
    pub stopped_early: bool,
    pub epochs_run: usize,
    /// A weight or the loss became NaN or infinite.
    pub failed: bool,
}

impl TrainHistory {
    pub fn final_val_acc(&self) -> f64 {
        self.val_acc.last().copied().unwrap_or(0.0)
    }
}

/// Mini-batch training. Failure (non-finite weights) ends the run and is
/// reported in the history, not as an error.
pub fn train(net: &mut Network, opt: &Optimizer, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory, NnError> {
    if train.is_empty() || val.is_empty() {
        return Err(NnError::Empty);
    }
    for d in [train, val] {
        if d.features() != net.input_dim() {
            return Err(NnError::Features {
                expected: net.input_dim(),
                got: d.features(),
            });
        }
    }
    let mut states: Vec<OptState> = net.params().iter().map(|p| opt.new_state(p.shape())).collect();
    let mut hist = TrainHistory::default();
    let mut stopper = EarlyStopper::new(cfg.early_stop.patience.max(1));
    let shuffle = Rng::new(cfg.shuffle_seed).child_named("shuffle");
    let (n, f) = (train.len(), train.features());
    let bs = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let scheduled = opt.epoch_lr(0, opt.initial_lr()).is_some();
    let mut lr = opt.initial_lr();
    let mut t = 0u64;
    let mut xb = Vec::with_capacity(bs * f);
    let mut yb = Vec::with_capacity(bs);

    for epoch in 0..cfg.max_epochs {
        if let Some(next) = opt.epoch_lr(epoch, lr) {
            lr = next;
        }
        order.shuffle(&mut shuffle.child(epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(train.x.row(i));
                yb.push(train.labels[i]);
            }
            let x = Tensor::new(vec![chunk.len(), f], std::mem::take(&mut xb)).expect("sized");
            let (loss, grads) = net.loss_and_grads(&x, &yb)?;
            xb = x.into_data();
            epoch_loss += loss * chunk.len() as f64;
            t += 1;
            let ctx = StepCtx { t, lr };
            let mut finite = loss.is_finite();
            for ((p, g), s) in net.params_mut().into_iter().zip(&grads).zip(&mut states) {
                // Shapes are fixed by construction, so the interpreter cannot fail here.
                finite &= opt.step_in_place(s, p, g, ctx).unwrap_or(false);
            }
            if !finite {
                hist.failed = true;
                return Ok(hist);
            }
        }
        let (vl, va) = evaluate_full(net, val)?;
        hist.train_loss.push(epoch_loss / n as f64);
        hist.val_loss.push(vl);
        hist.val_acc.push(va);
        if scheduled {
            hist.lr.push(lr);
        }
        hist.epochs_run = epoch + 1;
        if !vl.is_finite() {
            hist.failed = true;
            return Ok(hist);
        }
        if cfg.early_stop.enabled && stopper.observe(epoch, vl) {
            hist.stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticKind};
    use crate::optim::{builtin, builtin_default, HyperParams};

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_net_uniform() {
        let net = Network::zeros(&[3, 4, 5]).unwrap();
        let c = net.forward(&rand_matrix(2, 3, 1)).unwrap();
        assert!(c.logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = softmax_xent(&c.logits, &[0, 1]);
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_row_matches_batch_row() {
        let net = Network::new(&[3, 8, 4], 2).unwrap();
        let x = rand_matrix(5, 3, 3);
        let all = net.forward(&x).unwrap().logits;
        let one = net.forward(&Tensor::new(vec![1, 3], x.row(2).to_vec()).unwrap()).unwrap().logits;
        for (a, b) in one.data().iter().zip(all.row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_deterministic() {
        let x = rand_matrix(4, 6, 0);
        let a = Network::new(&[6, 5, 3], 9).unwrap().forward(&x).unwrap().logits;
        let b = Network::new(&[6, 5, 3], 9).unwrap().forward(&x).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_features_rejected() {
        let net = Network::new(&[3, 2], 0).unwrap();
        assert!(matches!(net.forward(&rand_matrix(2, 4, 0)), Err(NnError::Features { .. })));
    }

    #[test]
    fn duplicated_rows_same_gradient() {
        let net = Network::new(&[2, 16, 3], 5).unwrap();
        let x1 = rand_matrix(1, 2, 7);
        let mut d = x1.data().to_vec();
        d.extend_from_slice(x1.data());
        let x2 = Tensor::new(vec![2, 2], d).unwrap();
        let (_, g1) = net.loss_and_grads(&x1, &[1]).unwrap();
        let (_, g2) = net.loss_and_grads(&x2, &[1, 1]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_finite() {
        let net = Network::new(&[5, 7, 3], 1).unwrap();
        let (_, g) = net.loss_and_grads(&rand_matrix(8, 5, 2), &[0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        assert!(g.iter().all(Tensor::all_finite));
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn constant_logits_predict_class_zero() {
        let d = synthetic(SyntheticKind::TwoGaussians, 101, 0.1, 0);
        let net = Network::zeros(&[2, 2]).unwrap();
        let frac0 = d.class_counts()[0] as f64 / d.len() as f64;
        assert_eq!(evaluate(&net, &d).unwrap(), frac0);
    }

    #[test]
    fn evaluate_empty_errors() {
        let d = synthetic(SyntheticKind::TwoGaussians, 10, 0.1, 0);
        let empty = d.subset(&[], "empty");
        let net = Network::new(&[2, 2], 0).unwrap();
        assert_eq!(evaluate(&net, &empty), Err(NnError::Empty));
    }

    #[test]
    fn evaluate_order_invariant() {
        let d = synthetic(SyntheticKind::XorBlobs, 60, 0.3, 1);
        let net = Network::new(&[2, 6, 2], 4).unwrap();
        let rev: Vec<usize> = (0..d.len()).rev().collect();
        assert_eq!(evaluate(&net, &d).unwrap(), evaluate(&net, &d.subset(&rev, "rev")).unwrap());
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let d = synthetic(SyntheticKind::TwoGaussians, 100, 0.1, 0);
        let mut net = Network::new(&[2, 4, 2], 3).unwrap();
        let before = net.clone();
        let opt = builtin("sgd", &HyperParams::new().with("lr", 0.0)).unwrap();
        let cfg = TrainConfig {
            batch_size: 10,
            max_epochs: 3,
            early_stop: EarlyStop {
                enabled: false,
                patience: 5,
            },
            shuffle_seed: 0,
        };
        let h = train(&mut net, &opt, &d, &d, &cfg).unwrap();
        assert_eq!(net, before);
        assert_eq!(h.val_acc[2], evaluate(&before, &d).unwrap());
    }

    #[test]
    fn stopper_worsening_from_epoch_three() {
        let mut s = EarlyStopper::new(5);
        let losses = [1.0, 0.9, 0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.2];
        let stopped = losses.iter().enumerate().position(|(e, &l)| s.observe(e, l));
        assert_eq!(stopped.map(|e| e + 1), Some(8));
        assert_eq!(s.best_epoch(), 2);
    }

    #[test]
    fn stopper_equal_loss_is_not_improvement() {
        let mut s = EarlyStopper::new(2);
        assert!(!s.observe(0, 1.0));
        assert!(!s.observe(1, 1.0));
        assert!(s.observe(2, 1.0));
    }

    #[test]
    fn divergence_marks_failure() {
        let d = synthetic(SyntheticKind::TwoGaussians, 100, 0.1, 0);
        let mut net = Network::new(&[2, 8, 2], 3).unwrap();
        let opt = builtin("sgd", &HyperParams::new().with("lr", 1e300)).unwrap();
        let cfg = TrainConfig {
            batch_size: 10,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let h = train(&mut net, &opt, &d, &d, &cfg).unwrap();
        assert!(h.failed);
    }

    #[test]
    fn training_deterministic() {
        let d = synthetic(SyntheticKind::XorBlobs, 200, 0.2, 0);
        let opt = builtin_default("adam").unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = Network::new(&[2, 8, 2], 1).unwrap();
            train(&mut net, &opt, &d, &d, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }
}
