//! Membership-inference attacks. Each produces one score per evaluation
//! sample; higher means more member-like.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{rotate, translate, Sample};
use crate::ensemble::{OutputMode, Target};
use crate::error::{Error, Result};
use crate::learner::{train_on_features, Architecture, Classifier, TrainConfig};
use crate::metrics::{attack_advantage, roc_auc};
use crate::par;

/// Adversary-known split for fitting attack models plus a balanced,
/// disjoint evaluation split.
#[derive(Debug, Clone)]
pub struct AttackDataset {
    adversary: Vec<(Sample, bool)>,
    eval: Vec<(Sample, bool)>,
}

impl AttackDataset {
    /// Checks that the splits share no id and that evaluation is balanced.
    pub fn new(adversary: Vec<(Sample, bool)>, eval: Vec<(Sample, bool)>) -> Result<Self> {
        let members = eval.iter().filter(|(_, m)| *m).count();
        if members * 2 != eval.len() || eval.is_empty() {
            return Err(Error::Hygiene(format!(
                "evaluation split must be balanced, got {members} members of {}",
                eval.len()
            )));
        }
        let ad = AttackDataset { adversary, eval };
        ad.audit()?;
        Ok(ad)
    }

    /// Draws `adversary_per_side` and `eval_per_side` samples from each
    /// pool without overlap.
    pub fn from_pools(
        members: &[Sample],
        nonmembers: &[Sample],
        adversary_per_side: usize,
        eval_per_side: usize,
        seed: u64,
    ) -> Result<Self> {
        let need = adversary_per_side + eval_per_side;
        if members.len() < need || nonmembers.len() < need {
            return Err(Error::InvalidConfig(format!(
                "attack split needs {need} samples per side, pools hold {} members and {} non-members",
                members.len(),
                nonmembers.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |pool: &[Sample]| {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(need);
            idx
        };
        let m = pick(members);
        let n = pick(nonmembers);
        let take = |pool: &[Sample], idx: &[usize], member: bool| -> Vec<(Sample, bool)> {
            idx.iter().map(|&i| (pool[i].clone(), member)).collect()
        };
        let mut adversary = take(members, &m[..adversary_per_side], true);
        adversary.extend(take(nonmembers, &n[..adversary_per_side], false));
        let mut eval = take(members, &m[adversary_per_side..], true);
        eval.extend(take(nonmembers, &n[adversary_per_side..], false));
        AttackDataset::new(adversary, eval)
    }

    pub fn adversary(&self) -> &[(Sample, bool)] {
        &self.adversary
    }

    pub fn eval(&self) -> &[(Sample, bool)] {
        &self.eval
    }

    pub fn eval_membership(&self) -> Vec<bool> {
        self.eval.iter().map(|(_, m)| *m).collect()
    }

    pub fn adversary_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.adversary.iter().map(|(s, _)| s.id)
    }

    pub fn eval_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.eval.iter().map(|(s, _)| s.id)
    }

    /// No evaluation id may appear in the adversary split.
    pub fn audit(&self) -> Result<()> {
        let adv: HashSet<u64> = self.adversary_ids().collect();
        if let Some(id) = self.eval_ids().find(|id| adv.contains(id)) {
            return Err(Error::Hygiene(format!("sample {id} is in both the adversary and evaluation splits")));
        }
        Ok(())
    }
}

/// Attack selection with per-attack parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    Threshold,
    Lr,
    Mlp,
    Gap,
    Rotation { r_deg: f64 },
    Translation { d_px: u32 },
    Boundary {
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default = "default_queries")]
        n_queries: usize,
    },
}

fn default_queries() -> usize {
    250
}

impl AttackSpec {
    /// Short name used in report rows.
    pub fn short_name(&self) -> &'static str {
        match self {
            AttackSpec::Threshold => "Th",
            AttackSpec::Lr => "LR",
            AttackSpec::Mlp => "MLP",
            AttackSpec::Gap => "GAP",
            AttackSpec::Rotation { .. } => "RA",
            AttackSpec::Translation { .. } => "TA",
            AttackSpec::Boundary { .. } => "BA",
        }
    }

    pub fn needs_probabilities(&self) -> bool {
        matches!(self, AttackSpec::Threshold | AttackSpec::Lr | AttackSpec::Mlp)
    }

    /// Manipulation magnitude as shown in reports: `r=5`, `d=3`, or `0`.
    pub fn manipulation(&self) -> String {
        match self {
            AttackSpec::Rotation { r_deg } => format!("r={r_deg}"),
            AttackSpec::Translation { d_px } => format!("d={d_px}"),
            _ => "0".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Rotation { r_deg } if !(*r_deg > 0.0 && *r_deg <= 180.0) => {
                Err(Error::InvalidConfig(format!("rotation r_deg must lie in (0, 180], got {r_deg}")))
            }
            AttackSpec::Translation { d_px: 0 } => Err(Error::InvalidConfig("translation d_px must be at least 1".into())),
            AttackSpec::Boundary { n_queries: 0, .. } => {
                Err(Error::InvalidConfig("boundary n_queries must be at least 1".into()))
            }
            AttackSpec::Boundary { sigma: Some(s), .. } if !(*s > 0.0 && s.is_finite()) => {
                Err(Error::InvalidConfig(format!("boundary sigma must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Attack-model and query settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Training for the LR and MLP attack models.
    pub prob_train: TrainConfig,
    pub mlp_hidden: Vec<usize>,
    /// Keep only the top entries of the sorted posterior; `None` keeps all.
    pub prob_top_k: Option<usize>,
    /// Shallow network for the augmentation attacks.
    pub aug_hidden: Vec<usize>,
    pub aug_train: TrainConfig,
    /// Candidate noise scales, in `[0, 1]` intensity units.
    pub sigma_grid: Vec<f64>,
    /// Noisy queries per sample while choosing sigma.
    pub calibration_queries: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            prob_train: TrainConfig {
                epochs: 100,
                batch_size: 32,
                learning_rate: 0.05,
                seed: 0,
                l2: 0.0,
                standardize: true,
            },
            mlp_hidden: vec![64],
            prob_top_k: None,
            aug_hidden: vec![10, 10],
            aug_train: TrainConfig {
                epochs: 60,
                batch_size: 32,
                learning_rate: 0.05,
                seed: 0,
                l2: 0.0,
                standardize: true,
            },
            sigma_grid: vec![0.01, 0.02, 0.05, 0.1],
            calibration_queries: 50,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.prob_train.validate()?;
        self.aug_train.validate()?;
        if self.sigma_grid.is_empty() || self.sigma_grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("sigma_grid must hold positive values".into()));
        }
        if self.calibration_queries == 0 {
            return Err(Error::InvalidConfig("calibration_queries must be at least 1".into()));
        }
        if self.prob_top_k == Some(0) {
            return Err(Error::InvalidConfig("prob_top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-sample scores of one attack against one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub target: String,
    pub ids: Vec<u64>,
    pub membership: Vec<bool>,
    pub scores: Vec<f64>,
    /// Noise scale used by the boundary attack.
    pub sigma: Option<f64>,
}

impl AttackOutcome {
    pub fn auc(&self) -> Result<f64> {
        roc_auc(&self.scores, &self.membership)
    }

    pub fn advantage(&self) -> Result<f64> {
        attack_advantage(&self.scores, &self.membership)
    }

    pub const CSV_HEADER: &'static str = "sample_id,true_membership,score,attack_name,target_name";

    /// Rows of `sample_id,true_membership,score,attack_name,target_name`.
    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for ((id, m), s) in self.ids.iter().zip(&self.membership).zip(&self.scores) {
            w.write_record([
                id.to_string(),
                (*m as u8).to_string(),
                s.to_string(),
                self.attack.clone(),
                self.target.clone(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }
}

/// Writes outcomes as one CSV with a header row.
pub fn write_attack_csv<W: Write>(outcomes: &[AttackOutcome], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer
        .write_record(AttackOutcome::CSV_HEADER.split(','))
        .map_err(|e| Error::Format(e.to_string()))?;
    for o in outcomes {
        o.write_csv_rows(&mut writer)?;
    }
    writer.flush()?;
    Ok(())
}

fn require_probs(target: &dyn Target) -> Result<()> {
    match target.output_mode() {
        OutputMode::LabelAndProbs => Ok(()),
        OutputMode::LabelOnly => Err(Error::AttackInapplicable(format!(
            "target `{}` returns labels only",
            target.name()
        ))),
    }
}

fn samples(split: &[(Sample, bool)]) -> Vec<&Sample> {
    split.iter().map(|(s, _)| s).collect()
}

/// Maximum posterior per evaluation sample.
pub fn attack_threshold(target: &dyn Target, ad: &AttackDataset) -> Result<Vec<f64>> {
    require_probs(target)?;
    par::try_map(&samples(ad.eval()), |s| target.predict_proba(s).map(|p| p.max()))
}

/// Descending-sorted posterior, optionally truncated to its top entries.
pub fn posterior_features(target: &dyn Target, x: &Sample, top_k: Option<usize>) -> Result<Vec<f64>> {
    let mut v = target.predict_proba(x)?.sorted_desc();
    if let Some(k) = top_k {
        v.truncate(k);
    }
    Ok(v)
}

/// Binary member/non-member classifier over attack features.
pub fn train_attack_model(
    features: &[Vec<f64>],
    membership: &[bool],
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    let members = membership.iter().filter(|&&m| m).count();
    if members == 0 || members == membership.len() {
        return Err(Error::Training("attack training needs both members and non-members".into()));
    }
    let ys: Vec<usize> = membership.iter().map(|&m| m as usize).collect();
    Ok(train_on_features(features, &ys, 2, arch, cfg)?.classifier)
}

/// Member-class posterior of an attack model.
pub fn attack_model_scores(model: &Classifier, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    par::try_map(features, |f| model.predict_proba_features(f).map(|p| p.as_slice()[1]))
}

fn feature_attack<F>(ad: &AttackDataset, arch: &Architecture, train: &TrainConfig, features: F) -> Result<Vec<f64>>
where
    F: Fn(&Sample) -> Result<Vec<f64>> + Sync + Send,
{
    let adv = samples(ad.adversary());
    let adv_features = par::try_map(&adv, |s| features(s))?;
    let adv_bits: Vec<bool> = ad.adversary().iter().map(|(_, m)| *m).collect();
    let model = train_attack_model(&adv_features, &adv_bits, arch, train)?;
    let eval_features = par::try_map(&samples(ad.eval()), |s| features(s))?;
    attack_model_scores(&model, &eval_features)
}

/// Logistic regression on the sorted posterior.
pub fn attack_lr(target: &dyn Target, ad: &AttackDataset, cfg: &AttackConfig) -> Result<Vec<f64>> {
    require_probs(target)?;
    let train = cfg.prob_train.with_seed(cfg.seed);
    feature_attack(ad, &Architecture::Softmax, &train, |s| posterior_features(target, s, cfg.prob_top_k))
}

/// MLP on the sorted posterior.
pub fn attack_mlp(target: &dyn Target, ad: &AttackDataset, cfg: &AttackConfig) -> Result<Vec<f64>> {
    require_probs(target)?;
    let train = cfg.prob_train.with_seed(cfg.seed.wrapping_add(1));
    let arch = Architecture::mlp(&cfg.mlp_hidden);
    feature_attack(ad, &arch, &train, |s| posterior_features(target, s, cfg.prob_top_k))
}

/// 1 when the predicted label is correct, else 0.
pub fn attack_gap(target: &dyn Target, ad: &AttackDataset) -> Result<Vec<f64>> {
    par::try_map(&samples(ad.eval()), |s| {
        target.predict_label(s).map(|l| (l == s.label) as u8 as f64)
    })
}

/// The original plus rotations by `+r` and `-r` degrees.
pub fn rotation_queries(x: &Sample, r_deg: f64) -> Vec<Sample> {
    vec![x.clone(), rotate(x, r_deg), rotate(x, -r_deg)]
}

/// Every integer shift `(i, j)` with `|i| + |j| = d`, in a fixed order.
pub fn translation_offsets(d: u32) -> Vec<(i64, i64)> {
    let d = d as i64;
    let mut out = Vec::with_capacity(4 * d as usize);
    for i in -d..=d {
        let j = d - i.abs();
        out.push((i, j));
        if j != 0 {
            out.push((i, -j));
        }
    }
    out
}

/// The original plus the `4d` shifted copies.
pub fn translation_queries(x: &Sample, d: u32) -> Vec<Sample> {
    let mut q = vec![x.clone()];
    q.extend(translation_offsets(d).into_iter().map(|(dx, dy)| translate(x, dx, dy)));
    q
}

fn correctness(target: &dyn Target, queries: &[Sample], label: usize) -> Result<Vec<f64>> {
    queries
        .iter()
        .map(|q| target.predict_label(q).map(|l| (l == label) as u8 as f64))
        .collect()
}

fn augmentation_attack<Q>(target: &dyn Target, ad: &AttackDataset, cfg: &AttackConfig, queries: Q) -> Result<Vec<f64>>
where
    Q: Fn(&Sample) -> Vec<Sample> + Sync + Send,
{
    let arch = Architecture::mlp(&cfg.aug_hidden);
    let train = cfg.aug_train.with_seed(cfg.seed.wrapping_add(2));
    feature_attack(ad, &arch, &train, |s| correctness(target, &queries(s), s.label))
}

/// Correctness on `{0, +r, -r}` rotations fed to a shallow attack network.
pub fn attack_rotation(target: &dyn Target, ad: &AttackDataset, r_deg: f64, cfg: &AttackConfig) -> Result<Vec<f64>> {
    AttackSpec::Rotation { r_deg }.validate()?;
    augmentation_attack(target, ad, cfg, |s| rotation_queries(s, r_deg))
}

/// Correctness on the `4d + 1` translations fed to a shallow attack network.
pub fn attack_translation(target: &dyn Target, ad: &AttackDataset, d_px: u32, cfg: &AttackConfig) -> Result<Vec<f64>> {
    AttackSpec::Translation { d_px }.validate()?;
    augmentation_attack(target, ad, cfg, |s| translation_queries(s, d_px))
}

/// `x` plus isotropic Gaussian noise of scale `sigma` in `[0, 1]` units,
/// clamped and rounded back to intensities.
pub fn noisy_copy(x: &Sample, sigma: f64, rng: &mut ChaCha8Rng) -> Sample {
    let pixels = x
        .pixels
        .iter()
        .map(|&p| {
            let z: f64 = rng.sample(StandardNormal);
            ((p as f64 / 255.0 + sigma * z).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    x.with_pixels(pixels)
}

/// Fraction of `n_queries` noisy copies classified as the true label.
pub fn noise_robustness(target: &dyn Target, x: &Sample, sigma: f64, n_queries: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ x.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut hits = 0usize;
    for _ in 0..n_queries {
        hits += (target.predict_label(&noisy_copy(x, sigma, &mut rng))? == x.label) as usize;
    }
    Ok(hits as f64 / n_queries as f64)
}

/// Grid sigma maximizing attack AUC on the adversary split; ties go to
/// the smaller sigma.
pub fn calibrate_sigma(target: &dyn Target, ad: &AttackDataset, cfg: &AttackConfig) -> Result<f64> {
    let adv = samples(ad.adversary());
    let bits: Vec<bool> = ad.adversary().iter().map(|(_, m)| *m).collect();
    let mut grid = cfg.sigma_grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &sigma in &grid {
        let scores = par::try_map(&adv, |s| {
            noise_robustness(target, s, sigma, cfg.calibration_queries, cfg.seed.wrapping_add(3))
        })?;
        let auc = roc_auc(&scores, &bits)?;
        if auc > best.1 {
            best = (sigma, auc);
        }
    }
    Ok(best.0)
}

/// Noise-robustness scores; `sigma` of `None` calibrates on the adversary
/// split first. Returns the scores and the sigma used.
pub fn attack_boundary(
    target: &dyn Target,
    ad: &AttackDataset,
    sigma: Option<f64>,
    n_queries: usize,
    cfg: &AttackConfig,
) -> Result<(Vec<f64>, f64)> {
    AttackSpec::Boundary { sigma, n_queries }.validate()?;
    let sigma = match sigma {
        Some(s) => s,
        None => calibrate_sigma(target, ad, cfg)?,
    };
    let scores = par::try_map(&samples(ad.eval()), |s| {
        noise_robustness(target, s, sigma, n_queries, cfg.seed.wrapping_add(4))
    })?;
    Ok((scores, sigma))
}

/// Runs `spec` against `target`.
pub fn run_attack(target: &dyn Target, ad: &AttackDataset, spec: &AttackSpec, cfg: &AttackConfig) -> Result<AttackOutcome> {
    spec.validate()?;
    let mut sigma_used = None;
    let scores = match spec {
        AttackSpec::Threshold => attack_threshold(target, ad)?,
        AttackSpec::Lr => attack_lr(target, ad, cfg)?,
        AttackSpec::Mlp => attack_mlp(target, ad, cfg)?,
        AttackSpec::Gap => attack_gap(target, ad)?,
        AttackSpec::Rotation { r_deg } => attack_rotation(target, ad, *r_deg, cfg)?,
        AttackSpec::Translation { d_px } => attack_translation(target, ad, *d_px, cfg)?,
        AttackSpec::Boundary { sigma, n_queries } => {
            let (scores, s) = attack_boundary(target, ad, *sigma, *n_queries, cfg)?;
            sigma_used = Some(s);
            scores
        }
    };
    Ok(AttackOutcome {
        attack: spec.short_name().into(),
        target: target.name().into(),
        ids: ad.eval_ids().collect(),
        membership: ad.eval_membership(),
        scores,
        sigma: sigma_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Shape;
    use crate::ensemble::PredictionResponse;
    use crate::learner::ProbVector;

    /// Target answering through a closure.
    struct Scripted<F: Fn(&Sample) -> (usize, Vec<f64>) + Sync> {
        mode: OutputMode,
        f: F,
    }

    impl<F: Fn(&Sample) -> (usize, Vec<f64>) + Sync> Target for Scripted<F> {
        fn name(&self) -> &str {
            "scripted"
        }

        fn output_mode(&self) -> OutputMode {
            self.mode
        }

        fn respond(&self, x: &Sample) -> Result<PredictionResponse> {
            let (label, probs) = (self.f)(x);
            Ok(PredictionResponse {
                label,
                probs: (self.mode == OutputMode::LabelAndProbs).then(|| ProbVector::normalized(probs)),
                excluded: None,
                participating: 1,
            })
        }
    }

    fn image(id: u64, label: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(6, 6, 1).unwrap();
        Sample::new(id, label, shape, (0..shape.len()).map(|_| rng.random()).collect()).unwrap()
    }

    /// Members have even ids.
    fn dataset(per_side: usize) -> AttackDataset {
        let members: Vec<Sample> = (0..2 * per_side as u64).map(|i| image(2 * i, (i % 3) as usize, i)).collect();
        let non: Vec<Sample> = (0..2 * per_side as u64).map(|i| image(2 * i + 1, (i % 3) as usize, 1000 + i)).collect();
        AttackDataset::from_pools(&members, &non, per_side, per_side, 5).unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let ad = dataset(30);
        assert_eq!(ad.eval().len(), 60);
        assert_eq!(ad.adversary().len(), 60);
        ad.audit().unwrap();
        let mut eval = ad.eval().to_vec();
        eval.push(ad.adversary()[0].clone());
        eval.push(ad.adversary()[40].clone());
        assert!(matches!(AttackDataset::new(ad.adversary().to_vec(), eval), Err(Error::Hygiene(_))));
    }

    #[test]
    fn uniform_output_gives_chance_auc() {
        let ad = dataset(40);
        let t = Scripted {
            mode: OutputMode::LabelAndProbs,
            f: |_: &Sample| (0, vec![1.0; 4]),
        };
        let scores = attack_threshold(&t, &ad).unwrap();
        assert!(scores.iter().all(|&s| (s - 0.25).abs() < 1e-12));
        assert_eq!(roc_auc(&scores, &ad.eval_membership()).unwrap(), 0.5);
    }

    #[test]
    fn label_only_target_rejects_probability_attacks() {
        let ad = dataset(10);
        let t = Scripted {
            mode: OutputMode::LabelOnly,
            f: |_: &Sample| (0, vec![1.0, 1.0]),
        };
        let cfg = AttackConfig::default();
        for spec in [AttackSpec::Threshold, AttackSpec::Lr, AttackSpec::Mlp] {
            assert!(matches!(run_attack(&t, &ad, &spec, &cfg), Err(Error::AttackInapplicable(_))));
        }
        assert!(run_attack(&t, &ad, &AttackSpec::Gap, &cfg).is_ok());
    }

    #[test]
    fn perfect_model_gap_has_no_advantage() {
        let ad = dataset(20);
        let t = Scripted {
            mode: OutputMode::LabelOnly,
            f: |s: &Sample| (s.label, vec![1.0; 3]),
        };
        let out = run_attack(&t, &ad, &AttackSpec::Gap, &AttackConfig::default()).unwrap();
        assert!(out.scores.iter().all(|&s| s == 1.0));
        assert_eq!(out.advantage().unwrap(), 0.0);
    }

    #[test]
    fn memorizing_model_gap_advantage_is_accuracy_gap() {
        let ad = dataset(200);
        // right on members, right on a third of non-members
        let t = Scripted {
            mode: OutputMode::LabelOnly,
            f: |s: &Sample| {
                let right = s.id.is_multiple_of(2) || (s.id / 2).is_multiple_of(3);
                (if right { s.label } else { (s.label + 1) % 3 }, vec![1.0; 3])
            },
        };
        let out = run_attack(&t, &ad, &AttackSpec::Gap, &AttackConfig::default()).unwrap();
        let non_acc = ad.eval().iter().filter(|(s, m)| !m && (s.id / 2) % 3 == 0).count() as f64 / 200.0;
        assert!((out.advantage().unwrap() - (1.0 - non_acc)).abs() < 1e-12);
    }

    #[test]
    fn attack_model_training_needs_both_classes() {
        let xs = vec![vec![0.1], vec![0.2]];
        let cfg = AttackConfig::default().prob_train;
        assert!(matches!(
            train_attack_model(&xs, &[true, true], &Architecture::Softmax, &cfg),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn separable_features_train_to_full_accuracy() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.3]).collect();
        let bits: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let cfg = AttackConfig::default().prob_train;
        let m = train_attack_model(&xs, &bits, &Architecture::Softmax, &cfg).unwrap();
        let scores = attack_model_scores(&m, &xs).unwrap();
        assert!(scores.iter().zip(&bits).all(|(s, b)| (*s > 0.5) == *b));
    }

    #[test]
    fn identical_features_give_chance_auc() {
        let ad = dataset(100);
        let t = Scripted {
            mode: OutputMode::LabelAndProbs,
            f: |_: &Sample| (0, vec![3.0, 1.0]),
        };
        for spec in [AttackSpec::Lr, AttackSpec::Mlp] {
            let out = run_attack(&t, &ad, &spec, &AttackConfig::default()).unwrap();
            assert!((out.auc().unwrap() - 0.5).abs() <= 0.05);
        }
    }

    #[test]
    fn lr_on_max_posterior_keeps_threshold_ordering() {
        let ad = dataset(100);
        // members more confident on average, with overlap
        let t = Scripted {
            mode: OutputMode::LabelAndProbs,
            f: |s: &Sample| {
                let base = (s.pixels[0] as f64) / 255.0;
                let top = if s.id.is_multiple_of(2) { 0.5 + 0.5 * base } else { 0.3 + 0.5 * base };
                (0, vec![top, 1.0 - top])
            },
        };
        let cfg = AttackConfig {
            prob_top_k: Some(1),
            ..AttackConfig::default()
        };
        let th = attack_threshold(&t, &ad).unwrap();
        let lr = attack_lr(&t, &ad, &cfg).unwrap();
        let bits = ad.eval_membership();
        assert_eq!(roc_auc(&th, &bits).unwrap(), roc_auc(&lr, &bits).unwrap());
        for i in 0..th.len() {
            for j in 0..th.len() {
                if th[i] < th[j] {
                    assert!(lr[i] <= lr[j]);
                }
            }
        }
    }

    #[test]
    fn query_sets() {
        assert_eq!(translation_offsets(1), vec![(-1, 0), (0, 1), (0, -1), (1, 0)]);
        assert_eq!(translation_offsets(2).len(), 8);
        let x = image(0, 0, 1);
        assert_eq!(translation_queries(&x, 2).len(), 9);
        assert_eq!(translation_queries(&x, 1)[0], x);
        let r = rotation_queries(&x, 4.0);
        assert_eq!(r.len(), 3);
        assert_eq!(r[0], x);
    }

    #[test]
    fn robust_members_fragile_nonmembers_separate() {
        let ad = dataset(50);
        // members are right on every query, non-members only on the original
        let t = Scripted {
            mode: OutputMode::LabelOnly,
            f: |s: &Sample| {
                let original = image(s.id, s.label, if s.id.is_multiple_of(2) { s.id / 2 } else { 1000 + s.id / 2 });
                let right = s.id.is_multiple_of(2) || *s == original;
                (if right { s.label } else { (s.label + 1) % 3 }, vec![1.0; 3])
            },
        };
        let cfg = AttackConfig::default();
        let out = run_attack(&t, &ad, &AttackSpec::Rotation { r_deg: 4.0 }, &cfg).unwrap();
        assert!(out.auc().unwrap() > 0.99);
        let out = run_attack(&t, &ad, &AttackSpec::Translation { d_px: 1 }, &cfg).unwrap();
        assert!(out.auc().unwrap() > 0.99);
    }

    #[test]
    fn invariant_target_gives_chance_rotation_auc() {
        let ad = dataset(50);
        let t = Scripted {
            mode: OutputMode::LabelOnly,
            f: |s: &Sample| (s.label, vec![1.0; 3]),
        };
        let out = run_attack(&t, &ad, &AttackSpec::Rotation { r_deg: 5.0 }, &AttackConfig::default()).unwrap();
        assert!((out.auc().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tiny_sigma_reduces_to_gap() {
        let ad = dataset(30);
        let t = Scripted {
            mode: OutputMode::LabelOnly,
            f: |s: &Sample| (if s.pixels.iter().map(|&p| p as u32).sum::<u32>() % 2 == 0 { s.label } else { 0 }, vec![1.0; 3]),
        };
        let cfg = AttackConfig::default();
        let gap = attack_gap(&t, &ad).unwrap();
        let (ba, sigma) = attack_boundary(&t, &ad, Some(1e-6), 20, &cfg).unwrap();
        assert_eq!(sigma, 1e-6);
        assert_eq!(gap, ba);
    }

    #[test]
    fn huge_sigma_gives_chance() {
        let ad = dataset(150);
        // a "model" that reads the label off the first pixel's bucket
        let t = Scripted {
            mode: OutputMode::LabelOnly,
            f: |s: &Sample| ((s.pixels[0] as usize * 3) / 256, vec![1.0; 3]),
        };
        let (scores, _) = attack_boundary(&t, &ad, Some(1e6), 40, &AttackConfig::default()).unwrap();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.05, "{mean}");
        let auc = roc_auc(&scores, &ad.eval_membership()).unwrap();
        assert!((auc - 0.5).abs() < 0.1, "{auc}");
    }

    #[test]
    fn csv_rows() {
        let out = AttackOutcome {
            attack: "Th".into(),
            target: "ESE".into(),
            ids: vec![4, 7],
            membership: vec![true, false],
            scores: vec![0.75, 0.5],
            sigma: None,
        };
        let mut buf = Vec::new();
        write_attack_csv(&[out], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample_id,true_membership,score,attack_name,target_name\n4,1,0.75,Th,ESE\n7,0,0.5,Th,ESE\n"
        );
    }
}
