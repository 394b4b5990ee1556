//! Small probabilistic classifiers trained with mini-batch SGD on
//! categorical cross-entropy: softmax regression and ReLU MLPs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    /// Wraps `probs`, checking range and normalization.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Format("probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Format(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(probs))
    }

    /// Renormalizes nonnegative weights into a distribution.
    pub fn normalized(mut weights: Vec<f64>) -> Self {
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            weights.iter_mut().for_each(|w| *w /= sum);
        } else {
            let k = weights.len() as f64;
            weights.iter_mut().for_each(|w| *w = 1.0 / k);
        }
        ProbVector(weights)
    }

    pub fn uniform(k: usize) -> Self {
        ProbVector(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Probabilities sorted from largest to smallest.
    pub fn sorted_desc(&self) -> Vec<f64> {
        let mut v = self.0.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Softmax,
    Mlp { hidden: Vec<usize> },
}

impl Architecture {
    pub fn mlp(hidden: &[usize]) -> Self {
        Architecture::Mlp {
            hidden: hidden.to_vec(),
        }
    }

    fn hidden(&self) -> &[usize] {
        match self {
            Architecture::Softmax => &[],
            Architecture::Mlp { hidden } => hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub l2: f64,
    /// Fit a per-feature z-score on the training inputs and keep it in the model.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            l2: 0.0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::InvalidConfig("l2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + dot(row, x);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Per-feature affine input map `(x - mean) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let dim = xs.first().map_or(0, Vec::len);
        let n = xs.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect()
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A trained (or freshly initialized) classifier over flat real features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    architecture: Architecture,
    num_classes: usize,
    input_dim: usize,
    #[serde(default)]
    standardizer: Option<Standardizer>,
    layers: Vec<Dense>,
}

/// Scales pixels to `[0, 1]` in storage order.
pub fn flatten(s: &Sample) -> Vec<f64> {
    s.pixels.iter().map(|&p| p as f64 / 255.0).collect()
}

impl Classifier {
    /// Random initialization, uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn new(architecture: Architecture, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Self::check_dims(&architecture, input_dim, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::layer_dims(&architecture, input_dim, num_classes)
            .into_iter()
            .map(|(i, o)| Dense::init(i, o, &mut rng))
            .collect();
        Ok(Classifier {
            architecture,
            num_classes,
            input_dim,
            standardizer: None,
            layers,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(architecture: Architecture, input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::check_dims(&architecture, input_dim, num_classes)?;
        let layers = Self::layer_dims(&architecture, input_dim, num_classes)
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(Classifier {
            architecture,
            num_classes,
            input_dim,
            standardizer: None,
            layers,
        })
    }

    fn check_dims(arch: &Architecture, input_dim: usize, num_classes: usize) -> Result<()> {
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidConfig(
                "classifier needs a nonempty input and at least 2 classes".into(),
            ));
        }
        if arch.hidden().contains(&0) {
            return Err(Error::InvalidConfig("hidden layers must be nonempty".into()));
        }
        Ok(())
    }

    fn layer_dims(arch: &Architecture, input_dim: usize, num_classes: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = input_dim;
        for &h in arch.hidden() {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, num_classes));
        dims
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Class probabilities for a raw feature vector.
    pub fn predict_proba_features(&self, x: &[f64]) -> Result<ProbVector> {
        self.check_input(x)?;
        let mut current = match &self.standardizer {
            Some(st) => st.apply(x),
            None => x.to_vec(),
        };
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.forward(&current, &mut next);
            if li < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = next;
        }
        softmax_in_place(&mut current);
        Ok(ProbVector(current))
    }

    pub fn predict_label_features(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba_features(x)?.argmax())
    }

    /// Class probabilities for an image (pixels scaled to `[0, 1]`).
    pub fn predict_proba(&self, s: &Sample) -> Result<ProbVector> {
        self.predict_proba_features(&flatten(s))
    }

    /// Arg-max class; ties go to the lowest class index.
    pub fn predict_label(&self, s: &Sample) -> Result<usize> {
        Ok(self.predict_proba(s)?.argmax())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter vector: per layer, weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::ShapeMismatch {
                expected: self.num_parameters(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch plus `l2/2 · ‖W‖²` (weights only),
    /// and its gradient in [`parameters`](Self::parameters) order. Inputs are
    /// taken as already standardized.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[usize], l2: f64) -> Result<(f64, Vec<f64>)> {
        let mut ws = Workspace::new(self);
        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            self.check_input(x)?;
            loss += self.accumulate(x, y, &mut ws, &mut grads);
        }
        let n = xs.len().max(1) as f64;
        loss /= n;
        for (g, l) in grads.iter_mut().zip(&self.layers) {
            for (gw, w) in g.weights.iter_mut().zip(&l.weights) {
                *gw = *gw / n + l2 * w;
            }
            g.bias.iter_mut().for_each(|b| *b /= n);
        }
        loss += 0.5 * l2 * self.layers.iter().map(|l| dot(&l.weights, &l.weights)).sum::<f64>();
        let mut flat = Vec::with_capacity(self.num_parameters());
        for g in grads {
            flat.extend(g.weights);
            flat.extend(g.bias);
        }
        Ok((loss, flat))
    }

    fn zero_grads(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect()
    }

    // Forward + backward for one example; adds into `grads`, returns its loss.
    fn accumulate(&self, x: &[f64], y: usize, ws: &mut Workspace, grads: &mut [Dense]) -> f64 {
        let last = self.layers.len() - 1;
        ws.activations[0].copy_from_slice(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.activations.split_at_mut(li + 1);
            let out = &mut after[0];
            layer.forward(&before[li], out);
            if li < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let probs = &mut ws.activations[last + 1];
        softmax_in_place(probs);
        let loss = -probs[y].max(f64::MIN_POSITIVE).ln();

        // delta at the logits: p - onehot(y)
        ws.delta.clear();
        ws.delta.extend_from_slice(probs);
        ws.delta[y] -= 1.0;
        for li in (0..=last).rev() {
            let layer = &self.layers[li];
            let input = &ws.activations[li];
            let g = &mut grads[li];
            for (o, &d) in ws.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            if li > 0 {
                ws.next_delta.clear();
                ws.next_delta.resize(layer.inputs, 0.0);
                for (o, &d) in ws.delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (nd, &w) in ws.next_delta.iter_mut().zip(row) {
                        *nd += d * w;
                    }
                }
                // ReLU derivative of the layer below
                for (nd, &a) in ws.next_delta.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *nd = 0.0;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.next_delta);
            }
        }
        loss
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&ClassifierFile {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            classifier: self.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ClassifierFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported classifier file {} v{}",
                file.format, file.version
            )));
        }
        file.classifier.validate()?;
        Ok(file.classifier)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        Self::check_dims(&self.architecture, self.input_dim, self.num_classes)?;
        let dims = Self::layer_dims(&self.architecture, self.input_dim, self.num_classes);
        let ok = dims.len() == self.layers.len()
            && dims.iter().zip(&self.layers).all(|(&(i, o), l)| {
                l.inputs == i && l.outputs == o && l.weights.len() == i * o && l.bias.len() == o
            });
        if !ok {
            return Err(Error::Format("layer sizes disagree with architecture".into()));
        }
        if let Some(st) = &self.standardizer {
            if st.dim() != self.input_dim || st.scale.len() != self.input_dim {
                return Err(Error::Format("standardizer size disagrees with input".into()));
            }
        }
        if self.parameters().iter().any(|w| !w.is_finite()) {
            return Err(Error::Format("non-finite weight".into()));
        }
        Ok(())
    }
}

const FORMAT_TAG: &str = "classifier";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    format: String,
    version: u32,
    classifier: Classifier,
}

struct Workspace {
    activations: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Workspace {
    fn new(c: &Classifier) -> Self {
        let mut activations = vec![vec![0.0; c.input_dim]];
        activations.extend(c.layers.iter().map(|l| vec![0.0; l.outputs]));
        Workspace {
            activations,
            delta: Vec::new(),
            next_delta: Vec::new(),
        }
    }
}

/// Training outcome with per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub classifier: Classifier,
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD over explicit feature vectors.
pub fn train_on_features(
    xs: &[Vec<f64>],
    ys: &[usize],
    num_classes: usize,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Training("feature and label counts differ".into()));
    }
    if let Some(&bad) = ys.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Training(format!("label {bad} out of range for {num_classes} classes")));
    }
    let input_dim = xs[0].len();
    let mut model = Classifier::new(arch.clone(), input_dim, num_classes, cfg.seed)?;
    for x in xs {
        model.check_input(x)?;
    }
    let scaled;
    let xs = if cfg.standardize {
        let st = Standardizer::fit(xs);
        scaled = xs.iter().map(|x| st.apply(x)).collect::<Vec<_>>();
        model.standardizer = Some(st);
        &scaled[..]
    } else {
        xs
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut ws = Workspace::new(&model);
    let mut grads = model.zero_grads();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in grads.iter_mut() {
                g.weights.iter_mut().for_each(|v| *v = 0.0);
                g.bias.iter_mut().for_each(|v| *v = 0.0);
            }
            for &i in batch {
                total += model.accumulate(&xs[i], ys[i], &mut ws, &mut grads);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            let decay = cfg.learning_rate * cfg.l2;
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                    *w -= step * gw + decay * *w;
                }
                for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                    *b -= step * gb;
                }
            }
        }
        let mean = total / xs.len() as f64;
        if !mean.is_finite() || model.layers.iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
            return Err(Error::Divergence { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainedModel {
        classifier: model,
        epoch_losses,
    })
}

/// Trains on a dataset's images (optionally with extra samples, such as
/// augmented copies, appended).
pub fn train_classifier(d: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<Classifier> {
    train_on_samples(d.samples(), d.num_classes(), arch, cfg).map(|t| t.classifier)
}

pub fn train_on_samples(
    samples: &[Sample],
    num_classes: usize,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    if samples.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let xs: Vec<Vec<f64>> = samples.iter().map(flatten).collect();
    let ys: Vec<usize> = samples.iter().map(|s| s.label).collect();
    train_on_features(&xs, &ys, num_classes, arch, cfg)
}

/// Fraction of samples whose predicted label matches.
pub fn accuracy(c: &Classifier, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = crate::par::try_map(samples, |s| c.predict_label(s).map(|l| (l == s.label) as usize))?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Shape};

    fn toy_features(n: usize, dim: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys = (0..n).map(|i| i % k).collect();
        (xs, ys)
    }

    fn central_difference_check(arch: Architecture, l2: f64) {
        let (xs, ys) = toy_features(5, 6, 3, 1);
        let model = Classifier::new(arch, 6, 3, 9).unwrap();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, grad) = model.loss_and_gradient(&refs, &ys, l2).unwrap();
        let params = model.parameters();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut probe = model.clone();
            let mut p = params.clone();
            p[i] += h;
            probe.set_parameters(&p).unwrap();
            let up = probe.loss_and_gradient(&refs, &ys, l2).unwrap().0;
            p[i] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let down = probe.loss_and_gradient(&refs, &ys, l2).unwrap().0;
            let numeric = (up - down) / (2.0 * h);
            let denom = numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (numeric - grad[i]).abs() / denom < 1e-4 || (numeric - grad[i]).abs() < 1e-9,
                "param {i}: analytic {} vs numeric {numeric}",
                grad[i]
            );
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        central_difference_check(Architecture::Softmax, 0.0);
        central_difference_check(Architecture::Softmax, 0.01);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        central_difference_check(Architecture::mlp(&[7]), 0.0);
        central_difference_check(Architecture::mlp(&[5, 4]), 0.02);
    }

    #[test]
    fn zero_softmax_is_uniform_and_picks_class_zero() {
        let c = Classifier::zeros(Architecture::Softmax, 4, 5).unwrap();
        let p = c.predict_proba_features(&[0.3, 0.1, 0.9, 0.2]).unwrap();
        for &v in p.as_slice() {
            assert!((v - 0.2).abs() < 1e-12);
        }
        assert_eq!(c.predict_label_features(&[0.3, 0.1, 0.9, 0.2]).unwrap(), 0);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(ProbVector::new(vec![0.1, 0.7, 0.2]).unwrap().argmax(), 1);
        assert_eq!(ProbVector::uniform(4).argmax(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let k = rng.random_range(2..12);
            // coarse values so ties actually occur
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(0..4) as f64).collect();
            let p = ProbVector::normalized(v.clone());
            let mut best = 0;
            let mut best_value = f64::MIN;
            for (i, &x) in p.as_slice().iter().enumerate() {
                if x > best_value {
                    best_value = x;
                    best = i;
                }
            }
            assert_eq!(p.argmax(), best);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let c = Classifier::new(Architecture::mlp(&[8]), 10, 6, 3).unwrap();
        let (xs, _) = toy_features(50, 10, 6, 4);
        for x in &xs {
            let p = c.predict_proba_features(&x.iter().map(|v| v * 50.0).collect::<Vec<_>>()).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let c = Classifier::zeros(Architecture::Softmax, 4, 2).unwrap();
        assert!(matches!(
            c.predict_proba_features(&[1.0]),
            Err(Error::ShapeMismatch { expected: 4, got: 1 })
        ));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let (xs, ys) = toy_features(4, 2, 2, 0);
        assert!(train_on_features(&xs, &ys, 2, &Architecture::Softmax, &cfg).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (xs, ys) = toy_features(20, 4, 2, 0);
        let xs: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * 1e200).collect()).collect();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e200,
            standardize: false,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_on_features(&xs, &ys, 2, &Architecture::Softmax, &cfg),
            Err(Error::Divergence { epoch: 0 })
        ));
    }

    #[test]
    fn separable_two_class_reaches_full_training_accuracy() {
        let shape = Shape::new(6, 6, 1).unwrap();
        let d = generate_synthetic(2, 100, shape, 4.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let t = train_on_samples(d.samples(), 2, &Architecture::Softmax, &cfg).unwrap();
        assert!(accuracy(&t.classifier, d.samples()).unwrap() >= 0.99);
        assert!(t.epoch_losses.last().unwrap() <= t.epoch_losses.first().unwrap());
    }

    #[test]
    fn seeded_training_is_bitwise_reproducible() {
        let shape = Shape::new(5, 5, 3).unwrap();
        let d = generate_synthetic(4, 30, shape, 1.0, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let arch = Architecture::mlp(&[16]);
        let a = train_classifier(&d, &arch, &cfg).unwrap();
        let b = train_classifier(&d, &arch, &cfg).unwrap();
        let bits = |c: &Classifier| c.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let c = Classifier::new(Architecture::mlp(&[3]), 4, 3, 12).unwrap();
        let back = Classifier::from_json(&c.to_json().unwrap()).unwrap();
        let bits = |c: &Classifier| c.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&c), bits(&back));
        assert_eq!(c, back);
    }
}
