//! Config-driven experiments: data → partition → training → oracles →
//! attacks → metrics, plus reports, model bundles and a line-delimited
//! prediction service.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{rotation_queries, run_attack, translation_queries, AttackConfig, AttackDataset, AttackOutcome, AttackSpec};
use crate::dataset::{
    audit_disjoint, augment, load_dataset, partition_disjoint, AugmentParams, DataFormat, Dataset, DatasetSchema,
    Partition, Sample, Shape, SyntheticSpec,
};
use crate::ensemble::{DefendedEnsemble, OutputMode, Target, Undefended};
use crate::error::{Error, Result, Stage, StageExt};
use crate::learner::{train_on_samples, Architecture, Classifier, TrainConfig};
use crate::metrics::{eo_accuracy_of, target_accuracy, MetricsReport};
use crate::oracle::{train_cbe, CbeOracle, Oracle, OracleConfig, OracleKind, ReferenceModel};
use crate::par;
use crate::signature::{build_signature_index, SignatureIndex};

/// Where samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Synthetic,
    Csv,
    CifarBinary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Data file for `csv` and `cifar-binary`; its shape comes from the
    /// `<path>.schema.toml` sidecar.
    pub path: Option<PathBuf>,
    /// Dataset label in reports.
    pub name: String,
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub separation: f64,
    pub label_noise: f64,
    pub class_amplitude: f64,
    pub nuisance_amplitude: f64,
    pub pixel_noise: f64,
    pub texture_waves: usize,
    pub texture_max_freq: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            path: None,
            name: "Synthetic".into(),
            num_classes: 10,
            per_class: 500,
            height: 8,
            width: 8,
            channels: 3,
            separation: 1.0,
            label_noise: 0.0,
            class_amplitude: 6.0,
            nuisance_amplitude: 40.0,
            pixel_noise: 16.0,
            texture_waves: 6,
            texture_max_freq: 2.0,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let shape = Shape::new(self.height, self.width, self.channels)?;
        Ok(SyntheticSpec {
            label_noise: self.label_noise,
            class_amplitude: self.class_amplitude,
            nuisance_amplitude: self.nuisance_amplitude,
            pixel_noise: self.pixel_noise,
            texture_waves: self.texture_waves,
            texture_max_freq: self.texture_max_freq,
            ..SyntheticSpec::new(self.num_classes, self.per_class, shape, self.separation, self.seed)
        })
    }

    pub fn load(&self) -> Result<Dataset> {
        match self.kind {
            DataKind::Synthetic => self.synthetic_spec()?.generate(),
            DataKind::Csv | DataKind::CifarBinary => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("data.path is required for file data".into()))?;
                let schema = DatasetSchema::read(&DatasetSchema::sidecar_path(path))?;
                let format = if self.kind == DataKind::Csv {
                    DataFormat::Csv
                } else {
                    DataFormat::CifarBinary
                };
                load_dataset(path, format, &schema)
            }
        }
    }
}

/// Member / non-member split and attack split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of the data used as the member (training) set.
    pub member_fraction: f64,
    /// Members and non-members each given to the adversary.
    pub adversary_per_side: usize,
    /// Members and non-members each in the evaluation split.
    pub eval_per_side: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            member_fraction: 0.4,
            adversary_per_side: 300,
            eval_per_side: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub n: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { n: 4 }
    }
}

/// Augmented copies added to each subset model's training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub copies: usize,
    pub horizontal_flip: bool,
    pub width_shift: f64,
    pub height_shift: f64,
    pub rotation_deg: f64,
    pub zoom: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            copies: 6,
            horizontal_flip: true,
            width_shift: 0.1,
            height_shift: 0.1,
            rotation_deg: 10.0,
            zoom: 0.002,
        }
    }
}

impl AugmentConfig {
    pub fn params(&self) -> AugmentParams {
        AugmentParams {
            horizontal_flip: self.horizontal_flip,
            width_shift: self.width_shift,
            height_shift: self.height_shift,
            rotation_deg: self.rotation_deg,
            zoom: self.zoom,
        }
    }
}

/// Architecture and SGD settings shared by the subset and full models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub standardize: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            architecture: Architecture::mlp(&[128]),
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.02,
            l2: 0.0,
            standardize: true,
        }
    }
}

impl LearnerConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            l2: self.l2,
            standardize: self.standardize,
        }
    }
}

/// A prediction path under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arm {
    /// The single model trained on all members.
    Undefended,
    /// The subset ensemble behind an oracle (`Null` = no oracle).
    Defended(OracleKind),
}

impl Arm {
    pub fn oracle_kind(self) -> Option<OracleKind> {
        match self {
            Arm::Undefended => None,
            Arm::Defended(k) => Some(k),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Undefended => f.write_str("Undefended"),
            Arm::Defended(k) => k.fmt(f),
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("undefended") {
            Ok(Arm::Undefended)
        } else {
            s.parse().map(Arm::Defended)
        }
    }
}

impl TryFrom<String> for Arm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Arm> for String {
    fn from(a: Arm) -> String {
        match a {
            Arm::Undefended => "undefended".into(),
            Arm::Defended(k) => match k {
                OracleKind::Null => "null".into(),
                other => other.to_string().to_ascii_lowercase(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rotation: Vec<f64>,
    pub translation: Vec<u32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rotation: vec![1.0, 5.0, 10.0, 15.0],
            translation: vec![1, 3, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for reports, attack scores and bundles.
    pub dir: Option<PathBuf>,
    /// Store elapsed seconds in the report (breaks byte-identical reruns).
    pub record_wall_time: bool,
}

/// Everything one experiment needs, read from a sectioned TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_mode: OutputMode,
    pub arms: Vec<Arm>,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub partition: PartitionConfig,
    pub augment: AugmentConfig,
    pub learner: LearnerConfig,
    pub oracle: OracleConfig,
    pub attack: AttackConfig,
    pub attacks: Vec<AttackSpec>,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            seed: 7,
            output_mode: OutputMode::LabelAndProbs,
            arms: vec![
                Arm::Undefended,
                Arm::Defended(OracleKind::Ese),
                Arm::Defended(OracleKind::Ase),
                Arm::Defended(OracleKind::Coe),
            ],
            data: DataConfig::default(),
            split: SplitConfig::default(),
            partition: PartitionConfig::default(),
            augment: AugmentConfig::default(),
            learner: LearnerConfig::default(),
            oracle: OracleConfig::default(),
            attack: AttackConfig::default(),
            attacks: vec![
                AttackSpec::Threshold,
                AttackSpec::Lr,
                AttackSpec::Mlp,
                AttackSpec::Gap,
                AttackSpec::Rotation { r_deg: 4.0 },
                AttackSpec::Translation { d_px: 1 },
                AttackSpec::Boundary {
                    sigma: None,
                    n_queries: 250,
                },
            ],
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::InvalidConfig(format!("bad override key `{key}`")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `key=value` overrides such as
    /// `partition.n=5` or `learner.architecture.hidden=[64]`.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::with_overrides(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.partition.n < 2 {
            return Err(Error::InvalidConfig(format!("partition.n must be at least 2, got {}", self.partition.n))
                .at(Stage::Partition, "partition.n"));
        }
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig("no arms requested".into()).at(Stage::Report, "arms"));
        }
        if !(self.split.member_fraction > 0.0 && self.split.member_fraction < 1.0) {
            return Err(Error::InvalidConfig("split.member_fraction must lie in (0, 1)".into())
                .at(Stage::Split, "split.member_fraction"));
        }
        if self.split.eval_per_side == 0 {
            return Err(Error::InvalidConfig("split.eval_per_side must be at least 1".into())
                .at(Stage::Split, "split.eval_per_side"));
        }
        self.augment.params().validate().stage(Stage::Augment, "augment")?;
        self.learner.train_config(0).validate().stage(Stage::Train, "learner")?;
        self.oracle.validate().stage(Stage::Oracle, "oracle")?;
        self.attack.validate().stage(Stage::Attack, "attack")?;
        for spec in &self.attacks {
            spec.validate().stage(Stage::Attack, "attacks")?;
            if spec.needs_probabilities() && self.output_mode == OutputMode::LabelOnly {
                return Err(Error::InvalidConfig(format!(
                    "attack `{spec}` needs probabilities but output_mode is label_only"
                ))
                .at(Stage::Attack, "attacks"));
            }
        }
        Ok(())
    }

    fn needs_cbe(&self) -> bool {
        self.oracle.kind.needs_cbe() || self.arms.iter().any(|a| a.oracle_kind().is_some_and(OracleKind::needs_cbe))
    }
}

/// Stream-separated seeds from one experiment seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every data split of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset_name: String,
    pub members: Dataset,
    pub nonmembers: Dataset,
    pub partition: Partition,
    /// Member features for the CBE oracle (a fraction of each subset).
    pub cbe_members: Partition,
    /// Non-members set aside for CBE calibration.
    pub cbe_nonmembers: Dataset,
    pub attack_data: AttackDataset,
}

impl Prepared {
    /// Adversary split, CBE split and evaluation split must share no id.
    pub fn audit(&self) -> Result<()> {
        let cbe: Vec<u64> = self
            .cbe_members
            .members()
            .map(|(s, _)| s.id)
            .chain(self.cbe_nonmembers.ids())
            .collect();
        audit_disjoint([
            ("adversary", self.attack_data.adversary_ids().collect()),
            ("oracle-training", cbe),
            ("evaluation", self.attack_data.eval_ids().collect()),
        ])?;
        self.attack_data.audit()
    }
}

/// Loads data and derives every split.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = cfg.data.load().stage(Stage::Data, "data")?;
    let (members, nonmembers) = data.split_stratified(cfg.split.member_fraction, derive_seed(cfg.seed, 1));
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::InvalidConfig("member/non-member split left a side empty".into()).at(Stage::Split, "split.member_fraction"));
    }
    let partition = partition_disjoint(&members, cfg.partition.n, derive_seed(cfg.seed, 2))
        .stage(Stage::Partition, "partition.n")?;
    let cbe_members = partition.sample_fraction(cfg.oracle.cbe.member_fraction, derive_seed(cfg.seed, 3));
    let (cbe_nonmembers, attack_nonmembers) =
        nonmembers.split_stratified(cfg.oracle.cbe.nonmember_fraction, derive_seed(cfg.seed, 4));
    let taken: HashSet<u64> = cbe_members.members().map(|(s, _)| s.id).collect();
    let attack_members: Vec<Sample> = members.iter().filter(|s| !taken.contains(&s.id)).cloned().collect();
    let attack_data = AttackDataset::from_pools(
        &attack_members,
        attack_nonmembers.samples(),
        cfg.split.adversary_per_side,
        cfg.split.eval_per_side,
        derive_seed(cfg.seed, 5),
    )
    .stage(Stage::Split, "split")?;
    let prepared = Prepared {
        dataset_name: cfg.data.name.clone(),
        members,
        nonmembers,
        partition,
        cbe_members,
        cbe_nonmembers,
        attack_data,
    };
    prepared.audit().stage(Stage::Split, "split")?;
    Ok(prepared)
}

/// Trained models and oracle state.
#[derive(Debug, Clone)]
pub struct Trained {
    pub full_model: Classifier,
    pub models: Vec<Classifier>,
    pub index: Arc<SignatureIndex>,
    pub cbe: Option<Arc<CbeOracle>>,
}

/// A subset's samples followed by `copies` augmented versions of each.
pub fn augmented_training_set(subset: &Dataset, cfg: &AugmentConfig, seed: u64) -> Vec<Sample> {
    let params = cfg.params();
    let mut out = subset.samples().to_vec();
    for copy in 0..cfg.copies as u64 {
        out.extend(
            subset
                .iter()
                .map(|s| augment(s, &params, derive_seed(seed, s.id.wrapping_mul(1 << 8) ^ copy))),
        );
    }
    out
}

pub fn train(cfg: &ExperimentConfig, p: &Prepared) -> Result<Trained> {
    let k = p.members.num_classes();
    let arch = &cfg.learner.architecture;
    let full_model = train_on_samples(p.members.samples(), k, arch, &cfg.learner.train_config(derive_seed(cfg.seed, 10)))
        .stage(Stage::Train, "learner")?
        .classifier;
    let models = par::map_range(p.partition.num_subsets(), |i| {
        let subset = &p.partition.subsets()[i];
        let samples = augmented_training_set(subset, &cfg.augment, derive_seed(cfg.seed, 20 + i as u64));
        train_on_samples(&samples, k, arch, &cfg.learner.train_config(derive_seed(cfg.seed, 30 + i as u64)))
            .map(|t| t.classifier)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .stage(Stage::Train, "learner")?;
    let index = Arc::new(build_signature_index(&p.partition, cfg.oracle.lookup_mode));
    let cbe = if cfg.needs_cbe() {
        let reference = match cfg.oracle.cbe.reference {
            ReferenceModel::Full => vec![full_model.clone()],
            ReferenceModel::EnsembleAverage => models.clone(),
        };
        let mut cbe_cfg = cfg.oracle.cbe.clone();
        cbe_cfg.train.seed = derive_seed(cfg.seed, 40);
        let cbe = train_cbe(&p.cbe_members, p.cbe_nonmembers.samples(), reference, &cbe_cfg)
            .stage(Stage::Oracle, "oracle.cbe")?;
        Some(Arc::new(cbe))
    } else {
        None
    };
    Ok(Trained {
        full_model,
        models,
        index,
        cbe,
    })
}

/// One metrics row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub eo_type: String,
    pub dataset: String,
    pub manipulation: String,
    pub attack_type: String,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl ReportRow {
    pub fn csv_fields(&self) -> [String; 9] {
        let [eo, test, train, auc, adv] = self.metrics.csv_fields();
        [
            self.eo_type.clone(),
            self.dataset.clone(),
            self.manipulation.clone(),
            eo,
            test,
            train,
            self.attack_type.clone(),
            auc,
            adv,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub name: String,
    pub seed: u64,
    pub data_seed: u64,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Metrics rows plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: RunMeta,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "eo_type",
    "dataset",
    "manipulation",
    "eo_acc",
    "test_acc",
    "train_acc",
    "attack_type",
    "attack_auc",
    "attack_adv",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidConfig(format!("unknown report format `{other}`"))),
        }
    }
}

impl Report {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Report {
            meta: RunMeta {
                name: cfg.name.clone(),
                seed: cfg.seed,
                data_seed: cfg.data.seed,
                version: env!("CARGO_PKG_VERSION").into(),
                wall_time_s: None,
            },
            rows: Vec::new(),
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(REPORT_COLUMNS).map_err(fmt)?;
        for row in &self.rows {
            w.write_record(row.csv_fields()).map_err(fmt)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn row(&self, eo_type: &str, attack_type: &str, manipulation: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.eo_type == eo_type && r.attack_type == attack_type && r.manipulation == manipulation)
    }
}

/// Writes `r` to `path` as CSV (table columns) or JSON (full report).
pub fn emit_report(r: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => r.to_csv_string()?,
        ReportFormat::Json => r.to_json_string()?,
    };
    std::fs::write(path, text).map_err(|e| Error::Io(e).at(Stage::Report, "output.dir"))
}

/// A parsed report CSV line; numbers as printed (percentages for the
/// accuracies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub eo_type: String,
    pub dataset: String,
    pub manipulation: String,
    pub eo_acc: Option<f64>,
    pub test_acc: f64,
    pub train_acc: f64,
    pub attack_type: String,
    pub attack_auc: f64,
    pub attack_adv: f64,
}

impl TableRow {
    pub fn csv_fields(&self) -> [String; 9] {
        let two = |v: f64| crate::metrics::format_percent(v / 100.0);
        [
            self.eo_type.clone(),
            self.dataset.clone(),
            self.manipulation.clone(),
            self.eo_acc.map(two).unwrap_or_default(),
            two(self.test_acc),
            two(self.train_acc),
            self.attack_type.clone(),
            crate::metrics::format_ratio(self.attack_auc),
            crate::metrics::format_ratio(self.attack_adv),
        ]
    }
}

/// Reads a report CSV, checking the header.
pub fn load_report_csv<R: std::io::Read>(reader: R) -> Result<Vec<TableRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Format(e.to_string()))?;
    if header.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Format(format!("unexpected report header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().map_err(|e| Error::Parse {
                row,
                message: format!("column {}: {e}", REPORT_COLUMNS[j]),
            })
        };
        rows.push(TableRow {
            eo_type: rec[0].to_string(),
            dataset: rec[1].to_string(),
            manipulation: rec[2].to_string(),
            eo_acc: if rec[3].is_empty() { None } else { Some(num(3)?) },
            test_acc: num(4)?,
            train_acc: num(5)?,
            attack_type: rec[6].to_string(),
            attack_auc: num(7)?,
            attack_adv: num(8)?,
        });
    }
    Ok(rows)
}

/// Renders parsed report rows back to report CSV.
pub fn render_table_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(REPORT_COLUMNS).map_err(fmt)?;
    for row in rows {
        w.write_record(row.csv_fields()).map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn render_table_json(rows: &[TableRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| Error::Format(e.to_string()))
}

/// Manipulation families for adaptive sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Rotation,
    Translation,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(SweepKind::Rotation),
            "translation" => Ok(SweepKind::Translation),
            other => Err(Error::InvalidConfig(format!("unknown sweep kind `{other}`"))),
        }
    }
}

/// Report plus the per-sample attack scores behind it.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: Report,
    pub outcomes: Vec<AttackOutcome>,
}

/// Prepared data plus trained state; arms are assembled on demand.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub prepared: Prepared,
    pub trained: Trained,
}

struct ArmUtility {
    test_acc: f64,
    train_acc: f64,
}

impl Lab {
    pub fn build(cfg: ExperimentConfig) -> Result<Lab> {
        cfg.validate()?;
        let prepared = prepare(&cfg)?;
        let trained = train(&cfg, &prepared)?;
        Ok(Lab { cfg, prepared, trained })
    }

    pub fn subset_ids(&self) -> Vec<Vec<u64>> {
        self.prepared.partition.subsets().iter().map(|d| d.ids().collect()).collect()
    }

    pub fn oracle(&self, kind: OracleKind) -> Result<Oracle> {
        Oracle::assemble(kind, Some(&self.trained.index), self.trained.cbe.as_ref(), self.cfg.oracle.tau_h)
            .stage(Stage::Oracle, "oracle.kind")
    }

    pub fn ensemble(&self, kind: OracleKind) -> Result<DefendedEnsemble> {
        DefendedEnsemble::new(
            kind.to_string(),
            self.trained.models.clone(),
            self.subset_ids(),
            self.oracle(kind)?,
            self.cfg.output_mode,
        )
    }

    pub fn target(&self, arm: Arm) -> Result<Box<dyn Target>> {
        Ok(match arm {
            Arm::Undefended => Box::new(Undefended::new(
                "Undefended",
                self.trained.full_model.clone(),
                self.cfg.output_mode,
            )),
            Arm::Defended(kind) => Box::new(self.ensemble(kind)?),
        })
    }

    fn utility(&self, target: &dyn Target) -> Result<ArmUtility> {
        Ok(ArmUtility {
            test_acc: target_accuracy(target, self.prepared.nonmembers.samples()).stage(Stage::Metrics, "arms")?,
            train_acc: target_accuracy(target, self.prepared.members.samples()).stage(Stage::Metrics, "arms")?,
        })
    }

    /// Exclusion accuracy of an oracle on (possibly manipulated) evaluation
    /// queries.
    fn eo_accuracy_on(&self, oracle: &Oracle, variant: impl Fn(&Sample) -> Sample + Sync + Send) -> Result<f64> {
        let partition = &self.prepared.partition;
        let models = &self.trained.models;
        let pairs = par::try_map(self.prepared.attack_data.eval(), |(s, member)| {
            let truth = if *member { partition.origin(s.id) } else { None };
            oracle.decide(&variant(s), models).map(|d| (d.excluded, truth))
        })
        .stage(Stage::Oracle, "oracle")?;
        eo_accuracy_of(pairs).stage(Stage::Metrics, "oracle")
    }

    /// Runs every configured attack against every configured arm.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let start = Instant::now();
        let mut report = Report::new(&self.cfg);
        let mut outcomes = Vec::new();
        for &arm in &self.cfg.arms {
            let target = self.target(arm)?;
            let utility = self.utility(target.as_ref())?;
            let eo = match arm.oracle_kind() {
                Some(kind) => Some(self.eo_accuracy_on(&self.oracle(kind)?, Sample::clone)?),
                None => None,
            };
            for spec in &self.cfg.attacks {
                let outcome = run_attack(target.as_ref(), &self.prepared.attack_data, spec, &self.cfg.attack)
                    .stage(Stage::Attack, "attacks")?;
                report.rows.push(self.row(arm, spec, &outcome, &utility, eo)?);
                outcomes.push(outcome);
            }
        }
        if self.cfg.output.record_wall_time {
            report.meta.wall_time_s = Some(start.elapsed().as_secs_f64());
        }
        Ok(Evaluation { report, outcomes })
    }

    fn row(
        &self,
        arm: Arm,
        spec: &AttackSpec,
        outcome: &AttackOutcome,
        utility: &ArmUtility,
        eo: Option<f64>,
    ) -> Result<ReportRow> {
        let auc = outcome.auc().stage(Stage::Metrics, "attacks")?;
        let adv = outcome.advantage().stage(Stage::Metrics, "attacks")?;
        Ok(ReportRow {
            eo_type: arm.to_string(),
            dataset: self.prepared.dataset_name.clone(),
            manipulation: spec.manipulation(),
            attack_type: spec.short_name().into(),
            metrics: MetricsReport::new(auc, adv, utility.test_acc, utility.train_acc, eo),
            sigma: outcome.sigma,
        })
    }

    /// Rotation or translation attacks over `grid`, one row per point per
    /// arm. EO accuracy is averaged over the manipulated query variants.
    pub fn sweep(&self, kind: SweepKind, grid: &[f64]) -> Result<Evaluation> {
        let start = Instant::now();
        let mut report = Report::new(&self.cfg);
        let mut outcomes = Vec::new();
        for &arm in &self.cfg.arms {
            let target = self.target(arm)?;
            let utility = self.utility(target.as_ref())?;
            for &g in grid {
                let spec = match kind {
                    SweepKind::Rotation => AttackSpec::Rotation { r_deg: g },
                    SweepKind::Translation => {
                        if g < 1.0 || g.fract() != 0.0 {
                            return Err(Error::InvalidConfig(format!("translation bound {g} is not a positive integer"))
                                .at(Stage::Attack, "sweep.translation"));
                        }
                        AttackSpec::Translation { d_px: g as u32 }
                    }
                };
                let eo = match arm.oracle_kind() {
                    Some(k) => Some(self.manipulated_eo_accuracy(&self.oracle(k)?, &spec)?),
                    None => None,
                };
                let outcome = run_attack(target.as_ref(), &self.prepared.attack_data, &spec, &self.cfg.attack)
                    .stage(Stage::Attack, "sweep")?;
                report.rows.push(self.row(arm, &spec, &outcome, &utility, eo)?);
                outcomes.push(outcome);
            }
        }
        if self.cfg.output.record_wall_time {
            report.meta.wall_time_s = Some(start.elapsed().as_secs_f64());
        }
        Ok(Evaluation { report, outcomes })
    }

    fn manipulated_eo_accuracy(&self, oracle: &Oracle, spec: &AttackSpec) -> Result<f64> {
        let variants = match spec {
            AttackSpec::Rotation { .. } => 2,
            AttackSpec::Translation { d_px } => 4 * *d_px as usize,
            _ => 0,
        };
        let queries = |s: &Sample| -> Vec<Sample> {
            match spec {
                AttackSpec::Rotation { r_deg } => rotation_queries(s, *r_deg),
                AttackSpec::Translation { d_px } => translation_queries(s, *d_px),
                _ => vec![s.clone()],
            }
        };
        let mut accs = Vec::with_capacity(variants);
        for v in 1..=variants {
            accs.push(self.eo_accuracy_on(oracle, |s| queries(s).swap_remove(v))?);
        }
        if accs.is_empty() {
            return self.eo_accuracy_on(oracle, Sample::clone);
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Per-sample exclusion correctness for custom audits.
    pub fn eo_pairs(&self, kind: OracleKind, samples: &[(Sample, Option<usize>)]) -> Result<f64> {
        let oracle = self.oracle(kind)?;
        let models = &self.trained.models;
        let decisions = par::try_map(samples, |(s, truth)| oracle.decide(s, models).map(|d| (d.excluded, *truth)))?;
        eo_accuracy_of(decisions)
    }

    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        Bundle::from_lab(self).save(dir)
    }
}

/// `run_experiment` in one call: prepare, train, evaluate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let start = Instant::now();
    let lab = Lab::build(cfg.clone())?;
    let mut report = lab.evaluate()?.report;
    if cfg.output.record_wall_time {
        report.meta.wall_time_s = Some(start.elapsed().as_secs_f64());
    }
    Ok(report)
}

/// Sweep over a fresh lab.
pub fn sweep_manipulation(cfg: &ExperimentConfig, kind: SweepKind, grid: &[f64]) -> Result<Report> {
    Ok(Lab::build(cfg.clone())?.sweep(kind, grid)?.report)
}

const BUNDLE_FORMAT: &str = "exclusion_bundle";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    shape: Shape,
    num_classes: usize,
    subset_ids: Vec<Vec<u64>>,
    has_cbe: bool,
}

/// Trained state on disk: `manifest.json`, `config.toml`,
/// `full_model.json`, `model_<i>.json`, `index.sigx` and optionally
/// `cbe.json`.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub cfg: ExperimentConfig,
    pub shape: Shape,
    pub num_classes: usize,
    pub subset_ids: Vec<Vec<u64>>,
    pub trained: Trained,
}

impl Bundle {
    pub fn from_lab(lab: &Lab) -> Bundle {
        Bundle {
            cfg: lab.cfg.clone(),
            shape: lab.prepared.members.shape(),
            num_classes: lab.prepared.members.num_classes(),
            subset_ids: lab.subset_ids(),
            trained: lab.trained.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            shape: self.shape,
            num_classes: self.num_classes,
            subset_ids: self.subset_ids.clone(),
            has_cbe: self.trained.cbe.is_some(),
        };
        let json = serde_json::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml_string()?)?;
        self.trained.full_model.save(&dir.join("full_model.json"))?;
        for (i, m) in self.trained.models.iter().enumerate() {
            m.save(&dir.join(format!("model_{i}.json")))?;
        }
        self.trained.index.save(&dir.join("index.sigx"))?;
        if let Some(cbe) = &self.trained.cbe {
            cbe.save(&dir.join("cbe.json"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Bundle> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported bundle {} v{}", manifest.format, manifest.version)));
        }
        let cfg = ExperimentConfig::load(&dir.join("config.toml"), &[])?;
        let full_model = Classifier::load(&dir.join("full_model.json"))?;
        let models = (0..manifest.subset_ids.len())
            .map(|i| Classifier::load(&dir.join(format!("model_{i}.json"))))
            .collect::<Result<Vec<_>>>()?;
        let index = Arc::new(SignatureIndex::load(&dir.join("index.sigx"))?);
        let cbe = if manifest.has_cbe {
            Some(Arc::new(CbeOracle::load(&dir.join("cbe.json"))?))
        } else {
            None
        };
        Ok(Bundle {
            cfg,
            shape: manifest.shape,
            num_classes: manifest.num_classes,
            subset_ids: manifest.subset_ids,
            trained: Trained {
                full_model,
                models,
                index,
                cbe,
            },
        })
    }

    /// Rebuilds the data splits from the stored config and pairs them with
    /// the stored models.
    pub fn into_lab(self) -> Result<Lab> {
        let prepared = prepare(&self.cfg)?;
        let ids: Vec<Vec<u64>> = prepared.partition.subsets().iter().map(|d| d.ids().collect()).collect();
        if ids != self.subset_ids {
            return Err(Error::Format("bundle partition does not match its config".into()));
        }
        Ok(Lab {
            cfg: self.cfg,
            prepared,
            trained: self.trained,
        })
    }

    /// The prediction path for `arm` without rebuilding any data.
    pub fn target(&self, arm: Arm, output_mode: OutputMode) -> Result<Box<dyn Target>> {
        Ok(match arm {
            Arm::Undefended => Box::new(Undefended::new("Undefended", self.trained.full_model.clone(), output_mode)),
            Arm::Defended(kind) => {
                let oracle = Oracle::assemble(kind, Some(&self.trained.index), self.trained.cbe.as_ref(), self.cfg.oracle.tau_h)?;
                Box::new(DefendedEnsemble::new(
                    kind.to_string(),
                    self.trained.models.clone(),
                    self.subset_ids.clone(),
                    oracle,
                    output_mode,
                )?)
            }
        })
    }
}

#[derive(Serialize)]
struct ServeError {
    error: String,
}

/// Answers one request per line: base64 pixel bytes in (row-major,
/// channels interleaved), one JSON `PredictionResponse` out. Malformed
/// lines get a JSON `{"error": ...}` line. Returns the number of requests.
pub fn serve_lines<R: BufRead, W: Write>(target: &dyn Target, shape: Shape, input: R, mut output: W) -> Result<usize> {
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        served += 1;
        let reply = base64::engine::general_purpose::STANDARD
            .decode(line)
            .map_err(|e| Error::Format(format!("bad base64: {e}")))
            .and_then(|pixels| Sample::new(0, 0, shape, pixels))
            .and_then(|x| target.respond(&x));
        let text = match reply {
            Ok(r) => serde_json::to_string(&r),
            Err(e) => serde_json::to_string(&ServeError { error: e.to_string() }),
        }
        .map_err(|e| Error::Format(e.to_string()))?;
        writeln!(output, "{text}")?;
        output.flush()?;
    }
    Ok(served)
}

/// Encodes a sample's pixels as a request line.
pub fn encode_request(x: &Sample) -> String {
    base64::engine::general_purpose::STANDARD.encode(&x.pixels)
}

/// Serves connections one at a time on `addr`.
pub fn serve_tcp(target: &dyn Target, shape: Shape, addr: &str, max_connections: Option<usize>) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    for (handled, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let reader = std::io::BufReader::new(stream.try_clone()?);
        serve_lines(target, shape, reader, stream)?;
        if max_connections.is_some_and(|m| handled + 1 >= m) {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_set_nested_keys() {
        let cfg = ExperimentConfig::with_overrides(
            "",
            &[
                "partition.n=5".into(),
                "learner.architecture={kind=\"mlp\", hidden=[32, 16]}".into(),
                "data.name=CIFAR-10".into(),
                "arms=[\"undefended\", \"mce\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.partition.n, 5);
        assert_eq!(cfg.learner.architecture, Architecture::mlp(&[32, 16]));
        assert_eq!(cfg.data.name, "CIFAR-10");
        assert_eq!(cfg.arms, vec![Arm::Undefended, Arm::Defended(OracleKind::Mce)]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::with_overrides("", &["partition.n=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let label_only = ExperimentConfig::with_overrides("", &["output_mode=label_only".into()]);
        assert!(label_only.is_err());
        let ok = ExperimentConfig::with_overrides(
            "",
            &["output_mode=label_only".into(), "attacks=[{kind=\"gap\"}]".into()],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn table_five_row_renders() {
        let cfg = ExperimentConfig::default();
        let mut r = Report::new(&cfg);
        r.rows.push(ReportRow {
            eo_type: "Undefended".into(),
            dataset: "CIFAR-10".into(),
            manipulation: "0".into(),
            attack_type: "Th".into(),
            metrics: MetricsReport::new(0.69, 0.36, 0.6966, 0.9887, None),
            sigma: None,
        });
        let csv = r.to_csv_string().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("eo_type,dataset,manipulation,eo_acc,test_acc,train_acc,attack_type,attack_auc,attack_adv"));
        assert_eq!(lines.next(), Some("Undefended,CIFAR-10,0,,69.66,98.87,Th,.69,.36"));
        let rows = load_report_csv(csv.as_bytes()).unwrap();
        assert_eq!(rows[0].csv_fields().join(","), "Undefended,CIFAR-10,0,,69.66,98.87,Th,.69,.36");
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = Report::new(&ExperimentConfig::default());
        assert_eq!(r.to_csv_string().unwrap(), format!("{}\n", REPORT_COLUMNS.join(",")));
        assert!(load_report_csv(r.to_csv_string().unwrap().as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn seeds_are_stream_separated() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(9, 3), derive_seed(9, 3));
    }
}
