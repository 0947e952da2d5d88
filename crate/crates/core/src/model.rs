//! Softmax classifier (linear or one tanh hidden layer), analytic
//! weighted-cross-entropy gradients, and the deterministic minibatch SGD loop.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use crate::clock::Stopwatch;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkers::WeightProvider;
use crate::corpus::{Dataset, Example, SparseVec};
use crate::error::{Error, Result};
use crate::losses::{clamped_ln, LossKind};
use crate::seeding::{rng_for, STREAM_EPOCH, STREAM_INIT};

pub const INIT_SCALE: f64 = 0.05;
pub const CHECKPOINT_FORMAT: &str = "dimp-classifier";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Linear,
    OneHidden { hidden: usize },
}

impl Architecture {
    pub fn from_hidden(hidden: Option<usize>) -> Self {
        match hidden {
            Some(h) => Architecture::OneHidden { hidden: h },
            None => Architecture::Linear,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear => write!(f, "linear"),
            Architecture::OneHidden { hidden } => write!(f, "one_hidden({hidden})"),
        }
    }
}

/// Fully connected layer; `weights` is row-major `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.outputs + j]
    }
}

/// Model parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    architecture: Architecture,
    layers: Vec<Dense>,
}

pub type Gradient = ClassifierParams;

impl ClassifierParams {
    pub fn zeros(architecture: Architecture, d: usize, c: usize) -> Self {
        let layers = match architecture {
            Architecture::Linear => vec![Dense::zeros(d, c)],
            Architecture::OneHidden { hidden } => vec![Dense::zeros(d, hidden), Dense::zeros(hidden, c)],
        };
        ClassifierParams { architecture, layers }
    }

    pub fn from_layers(architecture: Architecture, layers: Vec<Dense>) -> Result<Self> {
        let shape_ok = match (architecture, layers.as_slice()) {
            (Architecture::Linear, [l]) => l.inputs > 0 && l.outputs > 0,
            (Architecture::OneHidden { hidden }, [a, b]) => a.outputs == hidden && b.inputs == hidden && a.inputs > 0 && b.outputs > 0,
            _ => false,
        };
        let sizes_ok = layers
            .iter()
            .all(|l| l.weights.len() == l.inputs * l.outputs && l.bias.len() == l.outputs);
        if !shape_ok || !sizes_ok {
            return Err(Error::validation(format!("layer shapes inconsistent with {architecture}")));
        }
        let p = ClassifierParams { architecture, layers };
        p.check_finite()?;
        Ok(p)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All entries, layer by layer, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &ClassifierParams) -> bool {
        self.architecture == other.architecture
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values().all(f64::is_finite) {
            Ok(())
        } else {
            Err(Error::numeric("non-finite parameter"))
        }
    }

    fn fill_zero(&mut self) {
        self.values_mut().for_each(|v| *v = 0.0);
    }

    /// Error unless this model's input dimension and class count match `dataset`.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        if self.feature_dim() != dataset.feature_dim() || self.num_classes() != dataset.num_classes() {
            return Err(Error::validation(format!(
                "model expects (d={}, C={}) but dataset has (d={}, C={})",
                self.feature_dim(),
                self.num_classes(),
                dataset.feature_dim(),
                dataset.num_classes()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &SparseVec) -> Result<ForwardPass> {
        let mut out = ForwardPass::default();
        self.forward_into(x, &mut out)?;
        Ok(out)
    }

    /// Forward pass reusing `out`'s buffers.
    pub fn forward_into(&self, x: &SparseVec, out: &mut ForwardPass) -> Result<()> {
        if let Some(max) = x.max_index() {
            if max >= self.feature_dim() {
                return Err(Error::validation(format!(
                    "feature index {max} out of range for model dimension {}",
                    self.feature_dim()
                )));
            }
        }
        let first = &self.layers[0];
        out.hidden.clear();
        let pre = match self.architecture {
            Architecture::Linear => &mut out.logits,
            Architecture::OneHidden { .. } => &mut out.hidden,
        };
        pre.clear();
        pre.extend_from_slice(&first.bias);
        for (i, v) in x.iter() {
            let row = &first.weights[i * first.outputs..(i + 1) * first.outputs];
            for (acc, w) in pre.iter_mut().zip(row) {
                *acc += v * w;
            }
        }
        if let Architecture::OneHidden { .. } = self.architecture {
            out.hidden.iter_mut().for_each(|h| *h = h.tanh());
            let second = &self.layers[1];
            out.logits.clear();
            out.logits.extend_from_slice(&second.bias);
            for (j, h) in out.hidden.iter().enumerate() {
                let row = &second.weights[j * second.outputs..(j + 1) * second.outputs];
                for (acc, w) in out.logits.iter_mut().zip(row) {
                    *acc += h * w;
                }
            }
        }
        log_softmax_into(&out.logits, &mut out.log_probs, &mut out.probs)
    }

    pub fn predict_proba(&self, x: &SparseVec) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.probs)
    }

    /// Argmax class, ties to the lowest index.
    pub fn predict_class(&self, x: &SparseVec) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.probs))
    }

    /// Adds `coeff * d(-log p_y)/d(params)` at this example into `grad`.
    fn accumulate_gradient(&self, x: &SparseVec, label: usize, fwd: &ForwardPass, coeff: f64, grad: &mut Gradient, delta: &mut Vec<f64>) {
        delta.clear();
        delta.extend(fwd.probs.iter().enumerate().map(|(c, p)| coeff * (p - if c == label { 1.0 } else { 0.0 })));
        match self.architecture {
            Architecture::Linear => {
                let g = &mut grad.layers[0];
                add_sparse_outer(g, x, delta);
            }
            Architecture::OneHidden { hidden } => {
                let out_layer = &self.layers[1];
                {
                    let g2 = &mut grad.layers[1];
                    for (j, h) in fwd.hidden.iter().enumerate() {
                        let row = &mut g2.weights[j * g2.outputs..(j + 1) * g2.outputs];
                        for (acc, d) in row.iter_mut().zip(delta.iter()) {
                            *acc += h * d;
                        }
                    }
                    for (acc, d) in g2.bias.iter_mut().zip(delta.iter()) {
                        *acc += d;
                    }
                }
                let mut dz = vec![0.0; hidden];
                for (j, dzj) in dz.iter_mut().enumerate() {
                    let row = &out_layer.weights[j * out_layer.outputs..(j + 1) * out_layer.outputs];
                    let dh: f64 = row.iter().zip(delta.iter()).map(|(w, d)| w * d).sum();
                    let h = fwd.hidden[j];
                    *dzj = dh * (1.0 - h * h);
                }
                add_sparse_outer(&mut grad.layers[0], x, &dz);
            }
        }
    }
}

fn add_sparse_outer(g: &mut Dense, x: &SparseVec, delta: &[f64]) {
    for (i, v) in x.iter() {
        let row = &mut g.weights[i * g.outputs..(i + 1) * g.outputs];
        for (acc, d) in row.iter_mut().zip(delta) {
            *acc += v * d;
        }
    }
    for (acc, d) in g.bias.iter_mut().zip(delta) {
        *acc += d;
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardPass {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Max-shifted log-softmax.
pub fn log_softmax_into(logits: &[f64], log_probs: &mut Vec<f64>, probs: &mut Vec<f64>) -> Result<()> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::numeric("non-finite logit"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    log_probs.clear();
    log_probs.extend(logits.iter().map(|z| z - log_norm));
    probs.clear();
    probs.extend(log_probs.iter().map(|l| l.exp()));
    Ok(())
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniform weights on `[-INIT_SCALE, INIT_SCALE]`, zero biases.
pub fn init_params(d: usize, c: usize, hidden: Option<usize>, seed: u64) -> ClassifierParams {
    assert!(d >= 1 && c >= 1, "init_params needs d, C >= 1");
    let mut params = ClassifierParams::zeros(Architecture::from_hidden(hidden), d, c);
    let mut rng = rng_for(seed, STREAM_INIT);
    for layer in &mut params.layers {
        for w in &mut layer.weights {
            *w = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
    }
    params
}

pub fn predict_proba(params: &ClassifierParams, x: &SparseVec) -> Result<Vec<f64>> {
    params.predict_proba(x)
}

/// Gradient of `-(1/|B|) sum_i w_i log p(y_i|x_i)`, weights held constant.
pub fn grad_weighted_ce(params: &ClassifierParams, batch: &[Example], weights: &[f64]) -> Result<Gradient> {
    if batch.len() != weights.len() {
        return Err(Error::validation(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::validation(format!("weight {w} is negative or non-finite")));
    }
    let mut grad = ClassifierParams::zeros(params.architecture, params.feature_dim(), params.num_classes());
    if batch.is_empty() {
        return Ok(grad);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut fwd = ForwardPass::default();
    let mut delta = Vec::new();
    for (ex, w) in batch.iter().zip(weights) {
        params.forward_into(&ex.features, &mut fwd)?;
        params.accumulate_gradient(&ex.features, ex.label, &fwd, w * scale, &mut grad, &mut delta);
    }
    Ok(grad)
}

pub fn sgd_step(params: &ClassifierParams, gradient: &Gradient, learning_rate: f64) -> Result<ClassifierParams> {
    let mut next = params.clone();
    apply_sgd(&mut next, gradient, learning_rate)?;
    Ok(next)
}

fn apply_sgd(params: &mut ClassifierParams, gradient: &Gradient, learning_rate: f64) -> Result<()> {
    if !params.same_shape(gradient) {
        return Err(Error::validation("gradient shape does not match parameters"));
    }
    for (p, g) in params.values_mut().zip(gradient.values()) {
        *p -= learning_rate * g;
    }
    params.check_finite()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub weight_floor: f64,
    pub weight_cap: f64,
    pub normalize_batch_weights: bool,
    pub hidden_units: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            loss: LossKind::Ce,
            weight_floor: crate::losses::DEFAULT_WEIGHT_FLOOR,
            weight_cap: crate::losses::DEFAULT_WEIGHT_CAP,
            normalize_batch_weights: false,
            hidden_units: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for a one-hidden-layer model (smaller step size).
    pub fn one_hidden(hidden: usize) -> Self {
        TrainConfig {
            learning_rate: 0.1,
            hidden_units: Some(hidden),
            ..Default::default()
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        // A zero floor is accepted: the lower-bound audit trains unclamped.
        if !(self.weight_floor >= 0.0) {
            return fail("weight_floor must be non-negative");
        }
        if !(self.weight_floor < self.weight_cap) {
            return fail("weight_floor must be below weight_cap");
        }
        if self.hidden_units == Some(0) {
            return fail("hidden_units must be positive");
        }
        if let LossKind::Focal { gamma } = self.loss {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return fail("focal gamma must be a finite value >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// Loss and accuracy columns only; wall-clock time is not reproducible.
    pub fn metrics(&self) -> Vec<(f64, Option<f64>)> {
        self.epochs.iter().map(|e| (e.loss, e.accuracy)).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "accuracy", "seconds"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                e.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                e.seconds.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

type Observer<'a> = Box<dyn FnMut(&BatchRecord<'_>) + 'a>;

/// What the trainer saw for one minibatch, at the pre-update parameters.
#[derive(Debug)]
pub struct BatchRecord<'a> {
    pub step: usize,
    pub epoch: usize,
    /// Dataset indices of the batch, in batch order.
    pub indices: &'a [usize],
    /// Model probability of each example's own label.
    pub p_true: &'a [f64],
    /// Loss weights actually applied (after any batch normalization).
    pub weights: &'a [f64],
}

/// Minibatch SGD over a dataset with per-example weights from a provider.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    provider: &'a WeightProvider,
    held_out: Option<&'a Dataset>,
    init: Option<ClassifierParams>,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: &'a TrainConfig, provider: &'a WeightProvider) -> Self {
        Trainer {
            dataset,
            config,
            provider,
            held_out: None,
            init: None,
            observer: None,
        }
    }

    /// Evaluate accuracy on `held_out` after every epoch.
    pub fn held_out(mut self, held_out: &'a Dataset) -> Self {
        self.held_out = Some(held_out);
        self
    }

    /// Start from these parameters instead of `init_params`.
    pub fn init(mut self, params: ClassifierParams) -> Self {
        self.init = Some(params);
        self
    }

    pub fn observe(mut self, observer: impl FnMut(&BatchRecord<'_>) + 'a) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    pub fn run(mut self) -> Result<(ClassifierParams, TrainHistory)> {
        let cfg = self.config;
        let ds = self.dataset;
        cfg.validate()?;
        self.provider.check(ds, cfg.loss)?;
        if let Some(h) = self.held_out {
            if h.num_classes() != ds.num_classes() || h.feature_dim() != ds.feature_dim() {
                return Err(Error::validation("held-out set dimensions differ from training set"));
            }
        }

        let mut params = match self.init.take() {
            Some(p) => {
                p.check_compatible(ds)?;
                p
            }
            None => init_params(ds.feature_dim(), ds.num_classes(), cfg.hidden_units, cfg.seed),
        };
        let mut grad = ClassifierParams::zeros(params.architecture(), ds.feature_dim(), ds.num_classes());
        let n = ds.len();
        let mut order: Vec<usize> = Vec::with_capacity(n);
        let mut fwds: Vec<ForwardPass> = vec![ForwardPass::default(); cfg.batch_size.min(n)];
        let mut p_true = Vec::with_capacity(cfg.batch_size);
        let mut weights = Vec::with_capacity(cfg.batch_size);
        let mut delta = Vec::new();
        let mut history = TrainHistory::default();
        let mut step = 0usize;

        for epoch in 0..cfg.epochs {
            let started = Stopwatch::start();
            order.clear();
            order.extend(0..n);
            order.shuffle(&mut rng_for(cfg.seed, STREAM_EPOCH + epoch as u64));
            let mut loss_sum = 0.0;

            for batch in order.chunks(cfg.batch_size) {
                p_true.clear();
                for (k, &i) in batch.iter().enumerate() {
                    let ex = ds.get(i);
                    params.forward_into(&ex.features, &mut fwds[k]).map_err(|e| e.at_step(step))?;
                    p_true.push(fwds[k].probs[ex.label]);
                }
                self.provider
                    .batch_weights(batch, &p_true, &mut weights)
                    .map_err(|e| e.at_step(step))?;
                if cfg.normalize_batch_weights {
                    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
                    if mean > 0.0 {
                        weights.iter_mut().for_each(|w| *w /= mean);
                    }
                }
                if let Some(obs) = self.observer.as_mut() {
                    obs(&BatchRecord {
                        step,
                        epoch,
                        indices: batch,
                        p_true: &p_true,
                        weights: &weights,
                    });
                }

                grad.fill_zero();
                let scale = 1.0 / batch.len() as f64;
                for (k, &i) in batch.iter().enumerate() {
                    let ex = ds.get(i);
                    let w = weights[k];
                    loss_sum += w * -clamped_ln(p_true[k]);
                    params.accumulate_gradient(&ex.features, ex.label, &fwds[k], w * scale, &mut grad, &mut delta);
                }
                apply_sgd(&mut params, &grad, cfg.learning_rate).map_err(|e| e.at_step(step))?;
                step += 1;
            }

            // Spot check that the softmax still normalizes.
            let probe = params.forward(&ds.get(0).features).map_err(|e| e.at_step(step))?;
            let total: f64 = probe.probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric {
                    step: Some(step),
                    message: format!("softmax sums to {total}"),
                });
            }

            let accuracy = match self.held_out {
                Some(h) => Some(accuracy(&params, h)?),
                None => None,
            };
            history.epochs.push(EpochRecord {
                epoch,
                loss: loss_sum / n as f64,
                accuracy,
                seconds: started.seconds(),
            });
        }
        Ok((params, history))
    }
}

pub fn train(dataset: &Dataset, config: &TrainConfig, provider: &WeightProvider) -> Result<(ClassifierParams, TrainHistory)> {
    Trainer::new(dataset, config, provider).run()
}

pub fn accuracy(params: &ClassifierParams, dataset: &Dataset) -> Result<f64> {
    params.check_compatible(dataset)?;
    let mut correct = 0usize;
    for ex in dataset.examples() {
        if params.predict_class(&ex.features)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    architecture: Architecture,
    feature_dim: usize,
    num_classes: usize,
    layers: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    layer: usize,
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// jsonl checkpoint: a shape header line, then one line per layer.
pub fn write_checkpoint(params: &ClassifierParams, w: impl Write) -> Result<()> {
    let mut w = BufWriter::new(w);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        architecture: params.architecture,
        feature_dim: params.feature_dim(),
        num_classes: params.num_classes(),
        layers: params.layers.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (k, l) in params.layers.iter().enumerate() {
        let rec = CheckpointLayer {
            layer: k,
            inputs: l.inputs,
            outputs: l.outputs,
            weights: l.weights.clone(),
            bias: l.bias.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(r: impl BufRead) -> Result<ClassifierParams> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let (k, first) = lines.next().ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
    let header: CheckpointHeader = serde_json::from_str(&first?).map_err(|e| parse_err(k + 1, e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(parse_err(
            k + 1,
            format!("unsupported checkpoint {} v{}", header.format, header.version),
        ));
    }
    let mut layers = Vec::with_capacity(header.layers);
    for (k, line) in lines {
        let rec: CheckpointLayer = serde_json::from_str(&line?).map_err(|e| parse_err(k + 1, e.to_string()))?;
        if rec.layer != layers.len() {
            return Err(parse_err(k + 1, format!("expected layer {}, found {}", layers.len(), rec.layer)));
        }
        layers.push(Dense {
            inputs: rec.inputs,
            outputs: rec.outputs,
            weights: rec.weights,
            bias: rec.bias,
        });
    }
    if layers.len() != header.layers {
        return Err(Error::validation(format!(
            "checkpoint header declares {} layers, found {}",
            header.layers,
            layers.len()
        )));
    }
    let params = ClassifierParams::from_layers(header.architecture, layers)?;
    if params.feature_dim() != header.feature_dim || params.num_classes() != header.num_classes {
        return Err(Error::validation("checkpoint layers disagree with header shape"));
    }
    Ok(params)
}
