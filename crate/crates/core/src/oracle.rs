//! Exclusion oracles: per query, decide which ensemble model (if any) was
//! trained on the input and must sit out the vote.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Partition, Sample};
use crate::ensemble::majority_vote;
use crate::error::{Error, Result};
use crate::learner::{flatten, train_on_features, Architecture, Classifier, ProbVector, TrainConfig};
use crate::par;
use crate::signature::{exact_digest, perceptual_hash, LookupMode, SignatureIndex};

/// Which stage produced a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Null,
    Mce,
    Ese,
    Ase,
    Cbe,
    /// Every stage of the chain declined.
    Coe,
}

/// Outcome of an oracle query; `None` means every model participates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionDecision {
    pub excluded: Option<usize>,
    pub source: DecisionSource,
}

impl ExclusionDecision {
    fn new(excluded: Option<usize>, source: DecisionSource) -> Self {
        ExclusionDecision { excluded, source }
    }
}

/// Oracle taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Null,
    Mce,
    Ese,
    Ase,
    Cbe,
    Coe,
}

impl OracleKind {
    pub const ALL: [OracleKind; 5] = [OracleKind::Mce, OracleKind::Ese, OracleKind::Ase, OracleKind::Cbe, OracleKind::Coe];

    pub fn needs_index(self) -> bool {
        matches!(self, OracleKind::Ese | OracleKind::Ase | OracleKind::Coe)
    }

    pub fn needs_cbe(self) -> bool {
        matches!(self, OracleKind::Cbe | OracleKind::Coe)
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleKind::Null => "NoOracle",
            OracleKind::Mce => "MCE",
            OracleKind::Ese => "ESE",
            OracleKind::Ase => "ASE",
            OracleKind::Cbe => "CBE",
            OracleKind::Coe => "COE",
        })
    }
}

impl std::str::FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "null" | "none" | "nooracle" => Ok(OracleKind::Null),
            "mce" => Ok(OracleKind::Mce),
            "ese" => Ok(OracleKind::Ese),
            "ase" => Ok(OracleKind::Ase),
            "cbe" => Ok(OracleKind::Cbe),
            "coe" => Ok(OracleKind::Coe),
            other => Err(Error::InvalidConfig(format!("unknown oracle `{other}`"))),
        }
    }
}

/// Source of the confidence vector and label in CBE features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceModel {
    /// One classifier trained on the full member set.
    #[default]
    Full,
    /// Mean of the subset models' probabilities.
    EnsembleAverage,
}

/// CBE training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbeConfig {
    /// Retained principal components; `None` picks `round(0.09 * d)`.
    pub components: Option<usize>,
    /// Fraction of each subset used as member features.
    pub member_fraction: f64,
    /// Fraction of the non-member pool used for calibration.
    pub nonmember_fraction: f64,
    pub reference: ReferenceModel,
    pub architecture: Architecture,
    pub train: TrainConfig,
}

impl Default for CbeConfig {
    fn default() -> Self {
        CbeConfig {
            components: None,
            member_fraction: 0.25,
            nonmember_fraction: 0.5,
            reference: ReferenceModel::Full,
            architecture: Architecture::mlp(&[64]),
            train: TrainConfig {
                epochs: 200,
                batch_size: 32,
                learning_rate: 0.05,
                seed: 0,
                l2: 0.0,
                standardize: true,
            },
        }
    }
}

impl CbeConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("member_fraction", self.member_fraction), ("nonmember_fraction", self.nonmember_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("cbe.{key} must lie in (0, 1], got {v}")));
            }
        }
        if self.components == Some(0) {
            return Err(Error::InvalidConfig("cbe.components must be at least 1".into()));
        }
        self.train.validate()
    }

    pub fn components_for(&self, input_dim: usize) -> usize {
        self.components
            .unwrap_or_else(|| ((0.09 * input_dim as f64).round() as usize).max(1))
            .min(input_dim)
    }
}

/// Oracle selection and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub tau_h: f64,
    pub lookup_mode: LookupMode,
    pub cbe: CbeConfig,
}

pub const DEFAULT_TAU_H: f64 = 10.0 / 64.0;

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            kind: OracleKind::Coe,
            tau_h: DEFAULT_TAU_H,
            lookup_mode: LookupMode::HashTable,
            cbe: CbeConfig::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_h) {
            return Err(Error::InvalidConfig(format!("tau_h must lie in [0, 1], got {}", self.tau_h)));
        }
        self.cbe.validate()
    }
}

/// Principal-component projection fitted with the `1/N` covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    mean: Vec<f64>,
    /// `m` orthonormal rows of length `d`.
    components: Vec<Vec<f64>>,
    /// All `d` covariance eigenvalues, descending.
    eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn fit(xs: &[Vec<f64>], m: usize) -> Result<Self> {
        let n = xs.len();
        let d = xs.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::Training("PCA needs at least one nonempty sample".into()));
        }
        if m == 0 || m > d {
            return Err(Error::InvalidConfig(format!("cannot keep {m} of {d} components")));
        }
        let mut mean = vec![0.0; d];
        for x in xs {
            if x.len() != d {
                return Err(Error::ShapeMismatch { expected: d, got: x.len() });
            }
            for (a, v) in mean.iter_mut().zip(x) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| xs[i][j] - mean[j]);
        let cov = (centered.transpose() * &centered) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let components = order[..m]
            .iter()
            .map(|&i| {
                let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                // sign convention: largest-magnitude entry positive
                let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
                if pivot < 0.0 {
                    v.iter_mut().for_each(|c| *c = -*c);
                }
                v
            })
            .collect();
        Ok(Pca {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(w, (v, m))| w * (v - m)).sum())
            .collect())
    }

    /// Maps a projection back to input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &zi) in self.components.iter().zip(z) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += zi * w;
            }
        }
        out
    }
}

/// Classifier-based exclusion: predicts the subset a query came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbeOracle {
    pca: Pca,
    feature_model: Classifier,
    reference_models: Vec<Classifier>,
    tau_eo: f64,
}

const CBE_FORMAT: &str = "cbe_oracle";
const CBE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CbeFile {
    format: String,
    version: u32,
    oracle: CbeOracle,
}

impl CbeOracle {
    pub fn new(pca: Pca, feature_model: Classifier, reference_models: Vec<Classifier>, tau_eo: f64) -> Result<Self> {
        let oracle = CbeOracle {
            pca,
            feature_model,
            reference_models,
            tau_eo,
        };
        oracle.validate()?;
        Ok(oracle)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_eo) {
            return Err(Error::InvalidConfig(format!("tau_eo must lie in [0, 1], got {}", self.tau_eo)));
        }
        let first = self
            .reference_models
            .first()
            .ok_or_else(|| Error::InvalidConfig("CBE needs a reference model".into()))?;
        let k = first.num_classes();
        if self.reference_models.iter().any(|r| r.num_classes() != k || r.input_dim() != self.pca.input_dim()) {
            return Err(Error::InvalidConfig("reference models disagree with the PCA input".into()));
        }
        if self.feature_model.input_dim() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.feature_dim(),
                got: self.feature_model.input_dim(),
            });
        }
        self.feature_model.validate()?;
        for r in &self.reference_models {
            r.validate()?;
        }
        Ok(())
    }

    pub fn pca(&self) -> &Pca {
        &self.pca
    }

    pub fn feature_model(&self) -> &Classifier {
        &self.feature_model
    }

    pub fn tau_eo(&self) -> f64 {
        self.tau_eo
    }

    pub fn num_subsets(&self) -> usize {
        self.feature_model.num_classes()
    }

    /// `m + k + 1`.
    pub fn feature_dim(&self) -> usize {
        self.pca.num_components() + self.reference_models[0].num_classes() + 1
    }

    /// Same oracle with another threshold.
    pub fn with_tau_eo(&self, tau_eo: f64) -> Result<Self> {
        let mut o = self.clone();
        o.tau_eo = tau_eo;
        o.validate()?;
        Ok(o)
    }

    /// `[PCA projection, reference probabilities, reference label]`.
    pub fn features(&self, x: &Sample) -> Result<Vec<f64>> {
        features_with(&self.pca, &self.reference_models, x)
    }

    /// Subset posterior for `x`.
    pub fn posterior(&self, x: &Sample) -> Result<ProbVector> {
        self.feature_model.predict_proba_features(&self.features(x)?)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&CbeFile {
            format: CBE_FORMAT.into(),
            version: CBE_VERSION,
            oracle: self.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CbeFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format != CBE_FORMAT || file.version != CBE_VERSION {
            return Err(Error::Format(format!("unsupported CBE file {} v{}", file.format, file.version)));
        }
        file.oracle.validate()?;
        Ok(file.oracle)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn features_with(pca: &Pca, reference_models: &[Classifier], x: &Sample) -> Result<Vec<f64>> {
    let pixels = flatten(x);
    let mut f = pca.project(&pixels)?;
    let probs = if reference_models.len() == 1 {
        reference_models[0].predict_proba(x)?
    } else {
        let mut mean = vec![0.0; reference_models[0].num_classes()];
        for r in reference_models {
            for (m, p) in mean.iter_mut().zip(r.predict_proba(x)?.as_slice()) {
                *m += p;
            }
        }
        ProbVector::normalized(mean)
    };
    let label = probs.argmax();
    f.extend_from_slice(probs.as_slice());
    f.push(label as f64);
    Ok(f)
}

/// Number of points on the calibration grid `j / 20`, `j = 0..=20`.
pub const THRESHOLD_STEPS: usize = 20;

pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (0..=THRESHOLD_STEPS).map(|j| j as f64 / THRESHOLD_STEPS as f64)
}

/// Excludes the argmax subset iff its posterior reaches `tau_eo`.
pub fn decide_posterior(posterior: &ProbVector, tau_eo: f64) -> Option<usize> {
    (posterior.max() >= tau_eo).then(|| posterior.argmax())
}

/// Grid threshold maximizing exclusion accuracy over labeled member
/// posteriors and non-member posteriors; ties go to the smallest threshold.
/// Returns `(threshold, accuracy)`.
pub fn calibrate_threshold(members: &[(ProbVector, usize)], nonmembers: &[ProbVector]) -> Result<(f64, f64)> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::UndefinedMetric("calibration needs members and non-members".into()));
    }
    let total = (members.len() + nonmembers.len()) as f64;
    let mut best = (0.0, f64::NEG_INFINITY);
    for t in threshold_grid() {
        let hits = members
            .iter()
            .filter(|(p, i)| decide_posterior(p, t) == Some(*i))
            .count()
            + nonmembers.iter().filter(|p| decide_posterior(p, t).is_none()).count();
        let acc = hits as f64 / total;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

/// Calibrates a CBE oracle's threshold on labeled members and non-members.
pub fn calibrate_tau_eo(cbe: &CbeOracle, members: &[(&Sample, usize)], nonmembers: &[&Sample]) -> Result<f64> {
    let m = par::try_map(members, |(s, i)| cbe.posterior(s).map(|p| (p, *i)))?;
    let n = par::try_map(nonmembers, |s| cbe.posterior(s))?;
    Ok(calibrate_threshold(&m, &n)?.0)
}

/// Fits PCA and the subset classifier on `members`, then calibrates the
/// threshold on the same members plus `nonmembers`.
pub fn train_cbe(
    members: &Partition,
    nonmembers: &[Sample],
    reference_models: Vec<Classifier>,
    cfg: &CbeConfig,
) -> Result<CbeOracle> {
    cfg.validate()?;
    if let Some(i) = members.subsets().iter().position(|d| d.is_empty()) {
        return Err(Error::Training(format!("subset {i} contributes no CBE training sample")));
    }
    if reference_models.is_empty() {
        return Err(Error::Training("CBE needs a reference model".into()));
    }
    if let Some(s) = nonmembers.iter().find(|s| members.origin(s.id).is_some()) {
        return Err(Error::Hygiene(format!("sample {} is both member and non-member", s.id)));
    }
    let labeled: Vec<(&Sample, usize)> = members.members().collect();
    let pixels: Vec<Vec<f64>> = par::map(&labeled, |(s, _)| flatten(s));
    let d = pixels[0].len();
    let pca = Pca::fit(&pixels, cfg.components_for(d))?;
    let xs = par::try_map(&labeled, |(s, _)| features_with(&pca, &reference_models, s))?;
    let ys: Vec<usize> = labeled.iter().map(|(_, i)| *i).collect();
    let feature_model = train_on_features(&xs, &ys, members.num_subsets(), &cfg.architecture, &cfg.train)?.classifier;
    let mut oracle = CbeOracle::new(pca, feature_model, reference_models, 0.0)?;
    let non: Vec<&Sample> = nonmembers.iter().collect();
    oracle.tau_eo = calibrate_tau_eo(&oracle, &labeled, &non)?;
    Ok(oracle)
}

/// Excludes the model most confident in the most-voted label.
pub fn mce_decide(models: &[Classifier], x: &Sample) -> Result<ExclusionDecision> {
    if models.len() < 2 {
        return Err(Error::EmptyEnsemble);
    }
    let probs: Vec<ProbVector> = models.iter().map(|m| m.predict_proba(x)).collect::<Result<_>>()?;
    let votes: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
    let label = majority_vote(&votes, &probs)?;
    let mut best = 0;
    for (i, p) in probs.iter().enumerate().skip(1) {
        if p.as_slice()[label] > probs[best].as_slice()[label] {
            best = i;
        }
    }
    Ok(ExclusionDecision::new(Some(best), DecisionSource::Mce))
}

pub fn ese_decide(idx: &SignatureIndex, x: &Sample) -> ExclusionDecision {
    ExclusionDecision::new(idx.lookup_exact(&exact_digest(x)), DecisionSource::Ese)
}

pub fn ase_decide(idx: &SignatureIndex, x: &Sample, tau_h: f64) -> ExclusionDecision {
    ExclusionDecision::new(idx.lookup_approx(perceptual_hash(x), tau_h), DecisionSource::Ase)
}

pub fn cbe_decide(cbe: &CbeOracle, x: &Sample) -> Result<ExclusionDecision> {
    Ok(ExclusionDecision::new(
        decide_posterior(&cbe.posterior(x)?, cbe.tau_eo),
        DecisionSource::Cbe,
    ))
}

/// ESE, then ASE, then CBE; the first stage that excludes wins.
pub fn coe_decide(idx: &SignatureIndex, cbe: &CbeOracle, x: &Sample, tau_h: f64) -> Result<ExclusionDecision> {
    let ese = ese_decide(idx, x);
    if ese.excluded.is_some() {
        return Ok(ese);
    }
    let ase = ase_decide(idx, x, tau_h);
    if ase.excluded.is_some() {
        return Ok(ase);
    }
    let cbe = cbe_decide(cbe, x)?;
    if cbe.excluded.is_some() {
        return Ok(cbe);
    }
    Ok(ExclusionDecision::new(None, DecisionSource::Coe))
}

/// A ready-to-query oracle with its trained state.
#[derive(Debug, Clone)]
pub enum Oracle {
    /// Never excludes.
    Null,
    Mce,
    Ese(Arc<SignatureIndex>),
    Ase {
        index: Arc<SignatureIndex>,
        tau_h: f64,
    },
    Cbe(Arc<CbeOracle>),
    Coe {
        index: Arc<SignatureIndex>,
        cbe: Arc<CbeOracle>,
        tau_h: f64,
    },
}

impl Oracle {
    pub fn kind(&self) -> OracleKind {
        match self {
            Oracle::Null => OracleKind::Null,
            Oracle::Mce => OracleKind::Mce,
            Oracle::Ese(_) => OracleKind::Ese,
            Oracle::Ase { .. } => OracleKind::Ase,
            Oracle::Cbe(_) => OracleKind::Cbe,
            Oracle::Coe { .. } => OracleKind::Coe,
        }
    }

    /// Assembles an oracle of `kind` from the shared trained parts.
    pub fn assemble(
        kind: OracleKind,
        index: Option<&Arc<SignatureIndex>>,
        cbe: Option<&Arc<CbeOracle>>,
        tau_h: f64,
    ) -> Result<Oracle> {
        let need_index = || index.cloned().ok_or_else(|| Error::InvalidConfig(format!("{kind} needs a signature index")));
        let need_cbe = || cbe.cloned().ok_or_else(|| Error::InvalidConfig(format!("{kind} needs a trained CBE oracle")));
        Ok(match kind {
            OracleKind::Null => Oracle::Null,
            OracleKind::Mce => Oracle::Mce,
            OracleKind::Ese => Oracle::Ese(need_index()?),
            OracleKind::Ase => Oracle::Ase {
                index: need_index()?,
                tau_h,
            },
            OracleKind::Cbe => Oracle::Cbe(need_cbe()?),
            OracleKind::Coe => Oracle::Coe {
                index: need_index()?,
                cbe: need_cbe()?,
                tau_h,
            },
        })
    }

    pub fn decide(&self, x: &Sample, models: &[Classifier]) -> Result<ExclusionDecision> {
        match self {
            Oracle::Null => Ok(ExclusionDecision::new(None, DecisionSource::Null)),
            Oracle::Mce => mce_decide(models, x),
            Oracle::Ese(idx) => Ok(ese_decide(idx, x)),
            Oracle::Ase { index, tau_h } => Ok(ase_decide(index, x, *tau_h)),
            Oracle::Cbe(cbe) => cbe_decide(cbe, x),
            Oracle::Coe { index, cbe, tau_h } => coe_decide(index, cbe, x, *tau_h),
        }
    }
}
