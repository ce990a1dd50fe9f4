//! Experiment configuration, read from TOML (key-value pairs grouped into
//! dotted sections).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_domains, ingest_dataset, BatchLayout, DomainDatasets, IngestConfig, SplitCounts,
    StructureKind, SyntheticSpec, SyntheticStyle,
};
use crate::losses::SegLossWeights;
use crate::model::Architecture;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaselineSource,
    BaselineTarget,
    JointTraining,
    FinetuneLast,
    FinetuneAll,
    DsbnOnly,
    SemtOnly,
    SsCada,
    CsCada,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    /// Last decoder block plus the output convolution.
    LastBlock,
    All,
}

impl FromStr for FinetuneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_block" | "last" => Ok(Self::LastBlock),
            "all" => Ok(Self::All),
            other => Err(Error::Parameter(format!(
                "unknown fine-tuning scope {other:?} (expected last_block or all)"
            ))),
        }
    }
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::BaselineSource,
        Method::BaselineTarget,
        Method::JointTraining,
        Method::FinetuneLast,
        Method::FinetuneAll,
        Method::DsbnOnly,
        Method::SemtOnly,
        Method::SsCada,
        Method::CsCada,
    ];

    /// Rows of the ablation table, in order.
    pub const ABLATION: [Method; 5] = [
        Method::BaselineTarget,
        Method::SemtOnly,
        Method::DsbnOnly,
        Method::SsCada,
        Method::CsCada,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BaselineSource => "baseline_source",
            Method::BaselineTarget => "baseline_target",
            Method::JointTraining => "joint_training",
            Method::FinetuneLast => "finetune_last",
            Method::FinetuneAll => "finetune_all",
            Method::DsbnOnly => "dsbn_only",
            Method::SemtOnly => "semt_only",
            Method::SsCada => "ss_cada",
            Method::CsCada => "cs_cada",
        }
    }

    /// Reads labeled source images during its own optimization.
    pub fn uses_source(self) -> bool {
        matches!(
            self,
            Method::BaselineSource
                | Method::JointTraining
                | Method::DsbnOnly
                | Method::SsCada
                | Method::CsCada
                | Method::FinetuneLast
                | Method::FinetuneAll
        )
    }

    pub fn uses_target_labeled(self) -> bool {
        self != Method::BaselineSource
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, Method::SemtOnly | Method::SsCada | Method::CsCada)
    }

    /// Routes each domain through its own normalization parameters; all
    /// other methods send every image through the target set.
    pub fn domain_specific_norm(self) -> bool {
        matches!(self, Method::DsbnOnly | Method::SsCada | Method::CsCada)
    }

    pub fn consistency(self) -> bool {
        self.uses_unlabeled()
    }

    pub fn contrastive(self) -> bool {
        self == Method::CsCada
    }

    pub fn finetune_scope(self) -> Option<FinetuneScope> {
        match self {
            Method::FinetuneLast => Some(FinetuneScope::LastBlock),
            Method::FinetuneAll => Some(FinetuneScope::All),
            _ => None,
        }
    }

    /// Batch quotas with the pools this method does not read set to zero.
    pub fn effective_layout(self, layout: BatchLayout) -> BatchLayout {
        BatchLayout {
            n_source_labeled: if self.uses_source() { layout.n_source_labeled } else { 0 },
            n_target_labeled: if self.uses_target_labeled() && self.finetune_scope().is_none() {
                layout.n_target_labeled
            } else {
                0
            },
            n_target_unlabeled: if self.uses_unlabeled() { layout.n_target_unlabeled } else { 0 },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

fn d_k_max() -> usize {
    500
}
fn d_lr0() -> f64 {
    5e-4
}
fn d_lr_decay() -> f64 {
    0.95
}
fn d_lr_step() -> usize {
    1000
}
fn d_lambda1() -> f64 {
    1.0
}
fn d_lambda2() -> f64 {
    0.1
}
fn d_tau() -> f64 {
    0.1
}
fn d_ema() -> f64 {
    crate::mean_teacher::DEFAULT_EMA_DECAY
}
fn d_noise() -> f64 {
    crate::mean_teacher::DEFAULT_NOISE_SIGMA
}
fn d_validate() -> usize {
    100
}
fn d_true() -> bool {
    true
}
fn d_finetune_iters() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_k_max")]
    pub k_max: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_lr_step")]
    pub lr_step: usize,
    #[serde(default = "d_lambda1")]
    pub lambda1: f64,
    #[serde(default = "d_lambda2")]
    pub lambda2: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    /// Validation cadence in iterations; 0 disables model selection.
    #[serde(default = "d_validate")]
    pub validate_every: usize,
    /// Random flips on training images.
    #[serde(default = "d_true")]
    pub augment: bool,
    #[serde(default)]
    pub seg_loss: SegLossWeights,
    /// Iterations of the fine-tuning phase.
    #[serde(default = "d_finetune_iters")]
    pub finetune_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

fn d_kind() -> StructureKind {
    StructureKind::Circular
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_kind")]
    pub kind: StructureKind,
    /// Generator seed, independent of the training seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub counts: Option<SplitCounts>,
    #[serde(default)]
    pub source_style: Option<SyntheticStyle>,
    #[serde(default)]
    pub target_style: Option<SyntheticStyle>,
    /// Fraction of the target training pool that keeps its labels.
    #[serde(default)]
    pub annotation_ratio: Option<f64>,
    /// Read a dataset directory instead of generating one.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub ingest: Option<IngestConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = match self.kind {
            StructureKind::Circular => SyntheticSpec::desk_circular(self.seed),
            StructureKind::Tubular => SyntheticSpec::desk_tubular(self.seed),
        };
        if let Some(s) = self.size {
            spec.size = s;
        }
        if let Some(c) = &self.counts {
            spec.counts = *c;
        }
        if let Some(s) = &self.source_style {
            spec.source = s.clone();
        }
        if let Some(s) = &self.target_style {
            spec.target = s.clone();
        }
        spec
    }

    /// Generates or ingests the datasets, then applies the annotation ratio.
    pub fn load(&self) -> Result<DomainDatasets> {
        let ds = match &self.path {
            Some(p) => {
                let cfg = self.ingest.clone().unwrap_or(IngestConfig {
                    classes: self.kind.classes(),
                    green_channel: false,
                    clahe: false,
                    gamma: 1.0,
                    size: self.size,
                    spacing: 1.0,
                });
                ingest_dataset(p, &cfg)?
            }
            None => generate_synthetic_domains(&self.synthetic_spec())?,
        };
        match self.annotation_ratio {
            Some(r) => ds.with_annotation_ratio(r, self.seed),
            None => Ok(ds),
        }
    }
}

fn d_arch() -> Architecture {
    Architecture::new(vec![4, 8, 16, 32], 3)
}

fn d_method() -> Method {
    Method::CsCada
}

fn d_layout() -> BatchLayout {
    BatchLayout::new(4, 2, 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_method")]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "d_layout")]
    pub batch: BatchLayout,
    #[serde(default = "d_arch")]
    pub model: Architecture,
    #[serde(default)]
    pub data: DataConfig,
}

pub const DESK_LR0: f64 = 2e-3;
pub const DESK_LAMBDA1: f64 = 30.0;

impl ExperimentConfig {
    /// Desk-scale defaults for `method`.
    /// Small CPU setup: 64x64 circular task, depth-3 net, faster learning
    /// rate and a stronger consistency weight than the defaults.
    pub fn desk(method: Method) -> Self {
        Self {
            method,
            seed: 0,
            train: TrainConfig {
                lr0: DESK_LR0,
                lambda1: DESK_LAMBDA1,
                ..TrainConfig::default()
            },
            batch: d_layout(),
            model: d_arch(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigFile {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Semantic checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if !(t.lr0 > 0.0) {
            return bad(format!("train.lr0 must be > 0, got {}", t.lr0));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return bad(format!("train.lr_decay must lie in (0, 1], got {}", t.lr_decay));
        }
        if t.lr_step == 0 {
            return bad("train.lr_step must be positive".into());
        }
        if !(t.lambda1 >= 0.0) || !(t.lambda2 >= 0.0) {
            return bad("train.lambda1 and train.lambda2 must be >= 0".into());
        }
        if !(t.tau > 0.0) {
            return bad(format!("train.tau must be > 0, got {}", t.tau));
        }
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return bad(format!("train.ema_decay must lie in [0, 1], got {}", t.ema_decay));
        }
        if !(t.noise_sigma >= 0.0) {
            return bad("train.noise_sigma must be >= 0".into());
        }
        if !(t.seg_loss.ce >= 0.0 && t.seg_loss.dice >= 0.0 && t.seg_loss.smooth > 0.0) {
            return bad("train.seg_loss weights must be >= 0 and smooth > 0".into());
        }
        if let Some(r) = self.data.annotation_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("data.annotation_ratio must lie in (0, 1], got {r}"));
            }
        }
        self.model.validate()?;
        self.check_layout()
    }

    /// Every normalization batch needs at least two images.
    fn check_layout(&self) -> Result<()> {
        let m = self.method;
        let l = m.effective_layout(self.batch);
        let need = |n: usize, what: &str| -> Result<()> {
            if n < 2 {
                Err(Error::Config(format!(
                    "method {m} needs at least 2 {what} images per batch, layout gives {n}"
                )))
            } else {
                Ok(())
            }
        };
        if m.domain_specific_norm() {
            need(l.n_source_labeled, "labeled source")?;
            need(l.n_target_labeled + l.n_target_unlabeled, "target")?;
        } else if m.finetune_scope().is_none() {
            need(l.total(), "training")?;
        } else {
            need(self.batch.n_source_labeled, "labeled source")?;
            need(self.batch.n_target_labeled, "labeled target")?;
        }
        if m.uses_target_labeled() && m.finetune_scope().is_none() && l.n_target_labeled == 0 {
            return Err(Error::Config(format!("method {m} needs labeled target images per batch")));
        }
        if m.uses_source() && m.finetune_scope().is_none() && l.n_source_labeled == 0 {
            return Err(Error::Config(format!("method {m} needs labeled source images per batch")));
        }
        if m.consistency() {
            need(l.n_target_unlabeled, "unlabeled target")?;
        }
        if m.contrastive() {
            need(l.n_source_labeled.min(l.n_target_labeled), "paired source/target")?;
        }
        Ok(())
    }

    /// Checks that the datasets can feed this method.
    pub fn check_datasets(&self, ds: &DomainDatasets) -> Result<()> {
        let m = self.method;
        if ds.classes != self.model.classes {
            return Err(Error::Config(format!(
                "model has {} classes but the data has {}",
                self.model.classes, ds.classes
            )));
        }
        let empty = |what: &str| Err(Error::Config(format!("method {m} needs a non-empty {what} pool")));
        if m.uses_source() && ds.source_labeled.is_empty() {
            return empty("labeled source");
        }
        if m.uses_target_labeled() && ds.target_labeled.is_empty() {
            return empty("labeled target");
        }
        if m.uses_unlabeled() && ds.target_unlabeled.is_empty() {
            return empty("unlabeled target");
        }
        let f = 1usize << self.model.depth();
        for s in ds.source_labeled.iter().chain(&ds.target_labeled).chain(&ds.validation).chain(&ds.test) {
            let (h, w) = s.image.dim();
            if h % f != 0 || w % f != 0 {
                return Err(Error::Config(format!(
                    "image {} is {h}x{w}, not divisible by {f} for a depth-{} model",
                    s.id,
                    self.model.depth()
                )));
            }
        }
        Ok(())
    }
}
