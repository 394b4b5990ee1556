//! The defended prediction path: consult an exclusion oracle, drop at most
//! one model, aggregate the rest by majority vote.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::learner::{Classifier, ProbVector};
use crate::oracle::{DecisionSource, Oracle};

/// What a prediction endpoint reveals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    LabelOnly,
    #[default]
    LabelAndProbs,
}

impl std::str::FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_only" => Ok(OutputMode::LabelOnly),
            "label_and_probs" => Ok(OutputMode::LabelAndProbs),
            other => Err(Error::InvalidConfig(format!("unknown output mode `{other}`"))),
        }
    }
}

/// One answer of a prediction endpoint. In label-only mode `probs` is
/// absent from the serialized form, not zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<ProbVector>,
    pub excluded: Option<usize>,
    pub participating: usize,
}

/// A black-box prediction interface, as seen by an adversary.
pub trait Target: Sync {
    fn name(&self) -> &str;

    fn output_mode(&self) -> OutputMode;

    fn respond(&self, x: &Sample) -> Result<PredictionResponse>;

    fn predict_label(&self, x: &Sample) -> Result<usize> {
        self.respond(x).map(|r| r.label)
    }

    fn predict_proba(&self, x: &Sample) -> Result<ProbVector> {
        self.respond(x)?
            .probs
            .ok_or_else(|| Error::AttackInapplicable(format!("target `{}` returns labels only", self.name())))
    }
}

/// Most frequent vote; ties go to the highest summed confidence for the
/// tied class, then to the lowest class index.
pub fn majority_vote(votes: &[usize], probs: &[ProbVector]) -> Result<usize> {
    if votes.is_empty() || probs.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if votes.len() != probs.len() {
        return Err(Error::InvalidConfig("vote and probability counts differ".into()));
    }
    let k = probs.iter().map(ProbVector::len).max().unwrap_or(0).max(votes.iter().max().map_or(0, |v| v + 1));
    let mut counts = vec![0usize; k];
    for &v in votes {
        counts[v] += 1;
    }
    let top = *counts.iter().max().expect("k >= 1");
    let mut best: Option<(usize, f64)> = None;
    for class in (0..k).filter(|&c| counts[c] == top) {
        let conf: f64 = probs.iter().map(|p| p.as_slice().get(class).copied().unwrap_or(0.0)).sum();
        if best.is_none_or(|(_, b)| conf > b) {
            best = Some((class, conf));
        }
    }
    Ok(best.expect("some class has the top count").0)
}

/// Vote and mean probabilities over `models`, skipping `excluded`.
pub fn aggregate(
    models: &[Classifier],
    excluded: Option<usize>,
    x: &Sample,
    mode: OutputMode,
) -> Result<PredictionResponse> {
    let mut probs = Vec::with_capacity(models.len());
    for (i, m) in models.iter().enumerate() {
        if Some(i) != excluded {
            probs.push(m.predict_proba(x)?);
        }
    }
    let votes: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
    let label = majority_vote(&votes, &probs)?;
    let participating = probs.len();
    let probs = match mode {
        OutputMode::LabelOnly => None,
        OutputMode::LabelAndProbs => {
            let mut mean = vec![0.0; probs[0].len()];
            for p in &probs {
                for (m, v) in mean.iter_mut().zip(p.as_slice()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= participating as f64);
            Some(ProbVector::normalized(mean))
        }
    };
    Ok(PredictionResponse {
        label,
        probs,
        excluded,
        participating,
    })
}

/// Subset models behind an exclusion oracle.
#[derive(Debug, Clone)]
pub struct DefendedEnsemble {
    name: String,
    models: Vec<Classifier>,
    subset_ids: Vec<Vec<u64>>,
    oracle: Oracle,
    output_mode: OutputMode,
}

impl DefendedEnsemble {
    /// `subset_ids[i]` lists the sample ids model `i` was trained on.
    pub fn new(
        name: impl Into<String>,
        models: Vec<Classifier>,
        subset_ids: Vec<Vec<u64>>,
        oracle: Oracle,
        output_mode: OutputMode,
    ) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::EmptyEnsemble);
        }
        if subset_ids.len() != models.len() {
            return Err(Error::InvalidConfig("one id list per model is required".into()));
        }
        let (k, d) = (models[0].num_classes(), models[0].input_dim());
        if models.iter().any(|m| m.num_classes() != k || m.input_dim() != d) {
            return Err(Error::InvalidConfig("ensemble models disagree on shape".into()));
        }
        Ok(DefendedEnsemble {
            name: name.into(),
            models,
            subset_ids,
            oracle,
            output_mode,
        })
    }

    pub fn models(&self) -> &[Classifier] {
        &self.models
    }

    pub fn subset_ids(&self) -> &[Vec<u64>] {
        &self.subset_ids
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Same models, different oracle.
    pub fn with_oracle(&self, name: impl Into<String>, oracle: Oracle) -> Self {
        DefendedEnsemble {
            name: name.into(),
            oracle,
            ..self.clone()
        }
    }

    pub fn with_output_mode(mut self, mode: OutputMode) -> Self {
        self.output_mode = mode;
        self
    }

    /// Oracle decision followed by aggregation over the remaining models.
    pub fn defended_predict(&self, x: &Sample) -> Result<PredictionResponse> {
        let decision = self.oracle.decide(x, &self.models)?;
        aggregate(&self.models, decision.excluded, x, self.output_mode)
    }

    /// Decision source for `x`, for diagnostics.
    pub fn decision_source(&self, x: &Sample) -> Result<DecisionSource> {
        Ok(self.oracle.decide(x, &self.models)?.source)
    }
}

impl Target for DefendedEnsemble {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    fn respond(&self, x: &Sample) -> Result<PredictionResponse> {
        self.defended_predict(x)
    }
}

/// A single model trained on all members; no oracle, no partition.
#[derive(Debug, Clone)]
pub struct Undefended {
    name: String,
    model: Classifier,
    output_mode: OutputMode,
}

impl Undefended {
    pub fn new(name: impl Into<String>, model: Classifier, output_mode: OutputMode) -> Self {
        Undefended {
            name: name.into(),
            model,
            output_mode,
        }
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }
}

/// Wraps a single model's prediction as a response.
pub fn undefended_predict(full_model: &Classifier, x: &Sample, mode: OutputMode) -> Result<PredictionResponse> {
    let probs = full_model.predict_proba(x)?;
    Ok(PredictionResponse {
        label: probs.argmax(),
        probs: (mode == OutputMode::LabelAndProbs).then_some(probs),
        excluded: None,
        participating: 1,
    })
}

impl Target for Undefended {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    fn respond(&self, x: &Sample) -> Result<PredictionResponse> {
        undefended_predict(&self.model, x, self.output_mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Shape;
    use crate::learner::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(p: &[f64]) -> ProbVector {
        ProbVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn plain_majority() {
        let probs = [pv(&[0.1, 0.2, 0.7]), pv(&[0.1, 0.2, 0.7]), pv(&[0.1, 0.8, 0.1])];
        assert_eq!(majority_vote(&[2, 2, 1], &probs).unwrap(), 2);
    }

    #[test]
    fn tie_goes_to_summed_confidence_then_lowest_index() {
        let probs = [pv(&[0.0, 0.6, 0.4]), pv(&[0.0, 0.7, 0.3])];
        assert_eq!(majority_vote(&[1, 2], &probs).unwrap(), 1);
        let even = [pv(&[0.5, 0.5]), pv(&[0.5, 0.5])];
        assert_eq!(majority_vote(&[1, 0], &even).unwrap(), 0);
        assert!(matches!(majority_vote(&[], &[]), Err(Error::EmptyEnsemble)));
    }

    fn brute_tally(votes: &[usize], probs: &[ProbVector]) -> usize {
        let k = probs[0].len();
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for c in 0..k {
            let n = votes.iter().filter(|&&v| v == c).count();
            let s: f64 = probs.iter().map(|p| p.as_slice()[c]).sum();
            if n > best.1 || (n == best.1 && s > best.2) {
                best = (c, n, s);
            }
        }
        best.0
    }

    #[test]
    fn agrees_with_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let k = rng.random_range(2..6);
            let n = rng.random_range(1..8);
            let probs: Vec<ProbVector> = (0..n)
                .map(|_| ProbVector::normalized((0..k).map(|_| rng.random_range(0..4) as f64 + 0.5).collect()))
                .collect();
            let votes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            assert_eq!(majority_vote(&votes, &probs).unwrap(), brute_tally(&votes, &probs));
        }
    }

    fn models(n: usize) -> Vec<Classifier> {
        (0..n)
            .map(|i| Classifier::new(Architecture::mlp(&[6]), 12, 3, i as u64).unwrap())
            .collect()
    }

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sample::new(seed, 0, Shape::new(2, 2, 3).unwrap(), (0..12).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn null_oracle_is_plain_majority_vote() {
        let e = DefendedEnsemble::new("e", models(5), vec![vec![]; 5], Oracle::Null, OutputMode::LabelAndProbs).unwrap();
        for seed in 0..50 {
            let x = sample(seed);
            let probs: Vec<ProbVector> = e.models().iter().map(|m| m.predict_proba(&x).unwrap()).collect();
            let votes: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
            let r = e.defended_predict(&x).unwrap();
            assert_eq!(r.label, majority_vote(&votes, &probs).unwrap());
            assert_eq!(r.participating, 5);
            let p = r.probs.unwrap();
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn label_only_omits_probs_key() {
        let e = DefendedEnsemble::new("e", models(2), vec![vec![]; 2], Oracle::Mce, OutputMode::LabelOnly).unwrap();
        let r = e.defended_predict(&sample(1)).unwrap();
        assert_eq!(r.participating, 1);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("probs"), "{json}");
        assert!(matches!(e.predict_proba(&sample(1)), Err(Error::AttackInapplicable(_))));
    }

    #[test]
    fn construction_needs_two_models() {
        assert!(matches!(
            DefendedEnsemble::new("e", models(1), vec![vec![]], Oracle::Null, OutputMode::LabelOnly),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn undefended_delegates_to_model() {
        let m = models(1).remove(0);
        let t = Undefended::new("full", m.clone(), OutputMode::LabelAndProbs);
        for seed in 0..20 {
            let x = sample(seed);
            let r = t.respond(&x).unwrap();
            assert_eq!(r.label, m.predict_label(&x).unwrap());
            assert_eq!(r.probs.unwrap(), m.predict_proba(&x).unwrap());
            assert_eq!((r.excluded, r.participating), (None, 1));
        }
    }
}
