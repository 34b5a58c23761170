//! Experiment engine: training loop, grid search, multi-seed comparison,
//! fixed-weight replay and result persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregators::{
    cagrad, cdtt, edm, graddrop, imtl_g, mgda_ub, nash_mtl, pcgrad, AggregationResult,
    CdttState, Diagnostics, GradDropParams,
};
use crate::error::{Error, Result};
use crate::metrics::{
    delta_mtm, extract_fixed_weights, mean_rank, InterferenceMeter, Metric, TaskMetric,
    TaskMetrics, WeightTrace, EMA_BETA,
};
use crate::model::{
    adam_step, assemble_update, backward_per_task, backward_weighted, forward_with, predict,
    Activation, AdamState, Batch, HeadSpec, Layer, LossKind, Masks, NetworkSpec, Params, Targets,
};
use crate::numerics::{all_finite, Mat, Rng};
use crate::problems::{
    conflict_regression, load_multimnist, mixed_norm_two_task, symmetric_two_task, ConflictSpec,
    DatasetSplits, MixedNormSpec, MnistTask, SymmetricSpec,
};
use crate::rotation::{rotation_target, shared_feature_grads, RotationSet};
use crate::weighters::{
    auto_lambda_update, famo_update, famo_weights, rlw, si, unit_scal, uw_loss, Convention,
    FamoState, RlwDistribution, UwState, WeightVector, AUTO_LAMBDA_INIT,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    SymmetricTwoTask {
        size: usize,
        #[serde(default)]
        spec: SymmetricSpec,
    },
    MixedNormTwoTask {
        size: usize,
        #[serde(default)]
        spec: MixedNormSpec,
    },
    ConflictRegression {
        size: usize,
        #[serde(default)]
        spec: ConflictSpec,
    },
    MultiMnist {
        images: PathBuf,
        labels: PathBuf,
        tasks: Vec<MnistTask>,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl ProblemConfig {
    pub fn id(&self) -> &'static str {
        match self {
            ProblemConfig::SymmetricTwoTask { .. } => "symmetric_two_task",
            ProblemConfig::MixedNormTwoTask { .. } => "mixed_norm_two_task",
            ProblemConfig::ConflictRegression { .. } => "conflict_regression",
            ProblemConfig::MultiMnist { .. } => "multi_mnist",
        }
    }

    /// Default configuration for a problem id.
    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "symmetric_two_task" => ProblemConfig::SymmetricTwoTask {
                size: 1200,
                spec: SymmetricSpec::default(),
            },
            "mixed_norm_two_task" => ProblemConfig::MixedNormTwoTask {
                size: 1200,
                spec: MixedNormSpec::default(),
            },
            "conflict_regression" => ProblemConfig::ConflictRegression {
                size: 1200,
                spec: ConflictSpec::default(),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown problem `{other}` (multi_mnist needs a config file with IDX paths)"
                )))
            }
        })
    }

    pub fn build(&self, seed: u64) -> Result<DatasetSplits> {
        let mut rng = Rng::with_stream(seed, DATA_STREAM);
        match self {
            ProblemConfig::SymmetricTwoTask { size, spec } => symmetric_two_task(&mut rng, *size, *spec),
            ProblemConfig::MixedNormTwoTask { size, spec } => mixed_norm_two_task(&mut rng, *size, *spec),
            ProblemConfig::ConflictRegression { size, spec } => conflict_regression(*spec, &mut rng, *size),
            ProblemConfig::MultiMnist {
                images,
                labels,
                tasks,
                limit,
            } => load_multimnist(images, labels, &mut rng, tasks, *limit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmtoConfig {
    UnitScal,
    Si,
    RlwNormal,
    RlwDirichlet,
    Uw,
    Famo {
        #[serde(default = "defaults::famo_gamma")]
        gamma: f64,
        #[serde(default = "defaults::famo_beta")]
        beta: f64,
    },
    AutoLambda {
        #[serde(default = "defaults::aux_scale")]
        aux_lr_scale: f64,
        #[serde(default = "defaults::auto_lambda_init")]
        initial_weight: f64,
    },
    Fixed {
        weights: Vec<f64>,
    },
    MgdaUb,
    Pcgrad,
    Graddrop {
        #[serde(default = "defaults::one")]
        k: f64,
        #[serde(default = "defaults::half")]
        leak: f64,
    },
    Edm,
    ImtlG,
    Cagrad {
        #[serde(default = "defaults::cagrad_c")]
        c: f64,
    },
    NashMtl {
        #[serde(default = "defaults::nash_iters")]
        iters: usize,
    },
    Cdtt {
        #[serde(default = "defaults::cdtt_alpha")]
        alpha: f64,
        #[serde(default = "defaults::cdtt_window")]
        window: usize,
    },
    Rotograd {
        #[serde(default = "defaults::aux_scale")]
        lr_scale: f64,
    },
}

mod defaults {
    pub fn famo_gamma() -> f64 {
        0.001
    }
    pub fn famo_beta() -> f64 {
        crate::weighters::FamoState::DEFAULT_BETA
    }
    pub fn aux_scale() -> f64 {
        0.1
    }
    pub fn auto_lambda_init() -> f64 {
        crate::weighters::AUTO_LAMBDA_INIT
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn half() -> f64 {
        0.5
    }
    pub fn cagrad_c() -> f64 {
        0.2
    }
    pub fn nash_iters() -> usize {
        crate::numerics::FIXED_POINT_ITERS
    }
    pub fn cdtt_alpha() -> f64 {
        0.6
    }
    pub fn cdtt_window() -> usize {
        crate::aggregators::CdttState::DEFAULT_WINDOW
    }
    pub fn lr() -> f64 {
        0.0025
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn hidden() -> Vec<usize> {
        vec![32]
    }
    pub fn features() -> usize {
        16
    }
    pub fn activation() -> crate::model::Activation {
        crate::model::Activation::Tanh
    }
    pub fn yes() -> bool {
        true
    }
}

impl SmtoConfig {
    pub fn id(&self) -> &'static str {
        match self {
            SmtoConfig::UnitScal => "unit_scal",
            SmtoConfig::Si => "si",
            SmtoConfig::RlwNormal => "rlw_normal",
            SmtoConfig::RlwDirichlet => "rlw_dirichlet",
            SmtoConfig::Uw => "uw",
            SmtoConfig::Famo { .. } => "famo",
            SmtoConfig::AutoLambda { .. } => "auto_lambda",
            SmtoConfig::Fixed { .. } => "fixed",
            SmtoConfig::MgdaUb => "mgda_ub",
            SmtoConfig::Pcgrad => "pcgrad",
            SmtoConfig::Graddrop { .. } => "graddrop",
            SmtoConfig::Edm => "edm",
            SmtoConfig::ImtlG => "imtl_g",
            SmtoConfig::Cagrad { .. } => "cagrad",
            SmtoConfig::NashMtl { .. } => "nash_mtl",
            SmtoConfig::Cdtt { .. } => "cdtt",
            SmtoConfig::Rotograd { .. } => "rotograd",
        }
    }

    /// Default configuration for a method id (`fixed` is not constructible
    /// without weights).
    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "unit_scal" => SmtoConfig::UnitScal,
            "si" => SmtoConfig::Si,
            "rlw_normal" => SmtoConfig::RlwNormal,
            "rlw_dirichlet" => SmtoConfig::RlwDirichlet,
            "uw" => SmtoConfig::Uw,
            "famo" => SmtoConfig::Famo {
                gamma: defaults::famo_gamma(),
                beta: defaults::famo_beta(),
            },
            "auto_lambda" => SmtoConfig::AutoLambda {
                aux_lr_scale: defaults::aux_scale(),
                initial_weight: AUTO_LAMBDA_INIT,
            },
            "mgda_ub" => SmtoConfig::MgdaUb,
            "pcgrad" => SmtoConfig::Pcgrad,
            "graddrop" => SmtoConfig::Graddrop { k: 1.0, leak: 0.5 },
            "edm" => SmtoConfig::Edm,
            "imtl_g" => SmtoConfig::ImtlG,
            "cagrad" => SmtoConfig::Cagrad {
                c: defaults::cagrad_c(),
            },
            "nash_mtl" => SmtoConfig::NashMtl {
                iters: defaults::nash_iters(),
            },
            "cdtt" => SmtoConfig::Cdtt {
                alpha: defaults::cdtt_alpha(),
                window: defaults::cdtt_window(),
            },
            "rotograd" => SmtoConfig::Rotograd {
                lr_scale: defaults::aux_scale(),
            },
            other => return Err(Error::Config(format!("unknown SMTO `{other}`"))),
        })
    }

    /// Every method with its default parameters, `fixed` excluded.
    pub fn all() -> Vec<SmtoConfig> {
        [
            "unit_scal", "si", "rlw_normal", "rlw_dirichlet", "uw", "famo", "auto_lambda",
            "mgda_ub", "pcgrad", "graddrop", "edm", "imtl_g", "cagrad", "nash_mtl", "cdtt",
            "rotograd",
        ]
        .iter()
        .map(|id| Self::from_id(id).expect("known id"))
        .collect()
    }

    pub fn is_gradient_based(&self) -> bool {
        matches!(
            self,
            SmtoConfig::MgdaUb
                | SmtoConfig::Pcgrad
                | SmtoConfig::Graddrop { .. }
                | SmtoConfig::Edm
                | SmtoConfig::ImtlG
                | SmtoConfig::Cagrad { .. }
                | SmtoConfig::NashMtl { .. }
                | SmtoConfig::Cdtt { .. }
                | SmtoConfig::Rotograd { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    /// Width of the shared feature layer fed to every head.
    #[serde(default = "defaults::features")]
    pub features: usize,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: defaults::hidden(),
            features: defaults::features(),
            activation: defaults::activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub problem: ProblemConfig,
    pub smto: SmtoConfig,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the generated dataset, kept apart from the training seed so
    /// that seeds vary the run, not the data.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub network: NetworkConfig,
    /// Compute per-task gradients for the interference diagnostic on every
    /// step of loss-based methods as well.
    #[serde(default = "defaults::yes")]
    pub log_interference: bool,
}

impl TrialConfig {
    pub fn new(problem: ProblemConfig, smto: SmtoConfig) -> Self {
        TrialConfig {
            problem,
            smto,
            lr: defaults::lr(),
            dropout_p: 0.0,
            weight_decay: 0.0,
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed: 0,
            data_seed: 0,
            network: NetworkConfig::default(),
            log_interference: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrialConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.network.features == 0 || self.network.hidden.contains(&0) {
            return bad("network widths must be positive".into());
        }
        Ok(())
    }

    pub fn network_spec(&self, data: &DatasetSplits) -> NetworkSpec {
        let act = self.network.activation;
        let mut encoder: Vec<Layer> = self.network.hidden.iter().map(|&w| Layer::new(w, act)).collect();
        encoder.push(Layer::new(self.network.features, act));
        NetworkSpec {
            input_dim: data.input_dim(),
            encoder,
            heads: data
                .tasks
                .iter()
                .map(|t| HeadSpec {
                    hidden: vec![],
                    output_dim: t.output_dim,
                    loss: t.loss,
                })
                .collect(),
            dropout_p: self.dropout_p,
        }
    }
}

const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;
const SMTO_STREAM: u64 = 4;
const AUX_STREAM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: Vec<f64>,
    /// Effective task weights rescaled to sum one.
    pub weights: Vec<f64>,
    pub interference: Option<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Vec<f64>,
    pub val: TaskMetrics,
    pub test: TaskMetrics,
    pub val_score: f64,
    pub interference: Option<f64>,
    pub rotation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crash {
    pub step: usize,
    pub epoch: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub schema_version: u32,
    pub config: TrialConfig,
    pub smto: String,
    pub task_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub weight_trace: WeightTrace,
    pub best_epoch: Option<usize>,
    pub crash: Option<Crash>,
    pub wall_time_s: f64,
}

impl TrialResult {
    pub fn empty(config: &TrialConfig, task_names: Vec<String>) -> Self {
        TrialResult {
            schema_version: SCHEMA_VERSION,
            smto: config.smto.id().to_string(),
            weight_trace: WeightTrace::new(config.smto.id(), config.seed),
            config: config.clone(),
            task_names,
            steps: Vec::new(),
            epochs: Vec::new(),
            best_epoch: None,
            crash: None,
            wall_time_s: 0.0,
        }
    }

    pub fn crashed(&self) -> bool {
        self.crash.is_some()
    }

    /// Recomputes the best-validation epoch (first one on ties).
    pub fn select_best_epoch(&mut self) {
        self.best_epoch = self
            .epochs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.val_score.is_finite())
            .fold(None, |best: Option<(usize, f64)>, (i, e)| match best {
                Some((_, s)) if s >= e.val_score => best,
                _ => Some((i, e.val_score)),
            })
            .map(|(i, _)| i);
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|i| &self.epochs[i])
    }

    pub fn best_val_score(&self) -> Option<f64> {
        self.best().map(|e| e.val_score)
    }

    pub fn best_test(&self) -> Option<&TaskMetrics> {
        self.best().map(|e| &e.test)
    }

    pub fn loss_trace(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.losses.clone()).collect()
    }

    /// `mean_i |mean over steps of w_i − 1/N|`
    pub fn mean_weight_error(&self) -> Option<f64> {
        let mean = self.weight_trace.mean()?;
        let n = mean.len() as f64;
        Some(mean.iter().map(|w| (w - 1.0 / n).abs()).sum::<f64>() / n)
    }

    pub fn mean_interference(&self) -> Option<f64> {
        let v: Vec<f64> = self.epochs.iter().filter_map(|e| e.interference).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Column names of the per-trial CSV.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "epoch".to_string()];
        h.extend(self.task_names.iter().map(|t| format!("loss_{t}")));
        h.extend(self.task_names.iter().map(|t| format!("weight_{t}")));
        h.push("interference".into());
        if let Some(e) = self.epochs.first() {
            for (split, m) in [("val", &e.val), ("test", &e.test)] {
                for t in &m.tasks {
                    for metric in &t.metrics {
                        h.push(format!("{split}_{}_{}", t.task, metric.name));
                    }
                }
            }
        }
        h
    }

    /// One row per step; validation and test metrics fill the last step of
    /// each epoch and are empty elsewhere.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(self.csv_header()).map_err(csv_error)?;
        let n_metric_cols = self.csv_header().len() - 3 - 2 * self.task_names.len();
        for (i, s) in self.steps.iter().enumerate() {
            let mut row = vec![s.step.to_string(), s.epoch.to_string()];
            row.extend(s.losses.iter().map(f64::to_string));
            row.extend(s.weights.iter().map(f64::to_string));
            row.push(s.interference.map(|v| v.to_string()).unwrap_or_default());
            let epoch_end = self.steps.get(i + 1).is_none_or(|n| n.epoch != s.epoch);
            match self.epochs.get(s.epoch).filter(|_| epoch_end) {
                Some(e) => {
                    for m in [&e.val, &e.test] {
                        row.extend(
                            m.tasks.iter().flat_map(|t| t.metrics.iter().map(|x| x.value.to_string())),
                        );
                    }
                }
                None => row.extend(std::iter::repeat_n(String::new(), n_metric_cols)),
            }
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Per-method state carried across steps.
enum MethodState {
    Stateless,
    Uw { state: UwState, opt: AdamState },
    Famo(FamoState),
    AutoLambda(WeightVector),
    Cdtt(CdttState),
    Rotograd(RotationSet),
}

struct Trainer<'a> {
    cfg: &'a TrialConfig,
    data: &'a DatasetSplits,
    spec: NetworkSpec,
    params: Params,
    adam: AdamState,
    state: MethodState,
    dropout_rng: Rng,
    smto_rng: Rng,
    aux_rng: Rng,
}

struct StepOutcome {
    losses: Vec<f64>,
    weights: Vec<f64>,
    interference: Option<f64>,
    diagnostics: Diagnostics,
    rotation_loss: Option<f64>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrialConfig, data: &'a DatasetSplits) -> Result<Self> {
        let spec = cfg.network_spec(data);
        let n = spec.n_tasks();
        let params = Params::init(&spec, &mut Rng::with_stream(cfg.seed, INIT_STREAM))?;
        let adam = AdamState::new(params.len(), cfg.lr, cfg.weight_decay);
        let state = match &cfg.smto {
            SmtoConfig::Uw => MethodState::Uw {
                state: UwState::new(n),
                opt: AdamState::new(n, cfg.lr, 0.0),
            },
            SmtoConfig::Famo { gamma, beta } => {
                let mut s = FamoState::new(n, *gamma);
                s.beta = *beta;
                MethodState::Famo(s)
            }
            SmtoConfig::AutoLambda { initial_weight, .. } => {
                MethodState::AutoLambda(WeightVector::new(vec![*initial_weight; n], Convention::Free)?)
            }
            SmtoConfig::Fixed { weights } => {
                if weights.len() != n {
                    return Err(Error::Config(format!("{} fixed weights for {n} tasks", weights.len())));
                }
                MethodState::Stateless
            }
            SmtoConfig::Cdtt { alpha, window } => MethodState::Cdtt(CdttState::new(n, *alpha, *window)?),
            SmtoConfig::Rotograd { lr_scale } => {
                MethodState::Rotograd(RotationSet::new(n, spec.feature_dim(), cfg.lr, *lr_scale))
            }
            _ => MethodState::Stateless,
        };
        Ok(Trainer {
            cfg,
            data,
            spec,
            params,
            adam,
            state,
            dropout_rng: Rng::with_stream(cfg.seed, DROPOUT_STREAM),
            smto_rng: Rng::with_stream(cfg.seed, SMTO_STREAM),
            aux_rng: Rng::with_stream(cfg.seed, AUX_STREAM),
        })
    }

    fn rotations(&self) -> Option<Vec<Mat>> {
        match &self.state {
            MethodState::Rotograd(r) => Some(r.rotations().to_vec()),
            _ => None,
        }
    }

    fn step(&mut self, batch: &Batch, meter: &mut InterferenceMeter) -> Result<StepOutcome> {
        let masks = (self.spec.dropout_p > 0.0)
            .then(|| Masks::sample(&self.spec, batch.len(), &mut self.dropout_rng));
        let out = if self.cfg.smto.is_gradient_based() {
            self.gradient_step(batch, masks.as_ref(), meter)?
        } else {
            self.loss_step(batch, masks.as_ref(), meter)?
        };
        if !all_finite(&self.params.values) {
            return Err(Error::NonFinite("model parameters after the update".into()));
        }
        Ok(out)
    }

    fn gradient_step(
        &mut self,
        batch: &Batch,
        masks: Option<&Masks>,
        meter: &mut InterferenceMeter,
    ) -> Result<StepOutcome> {
        let rotations = self.rotations();
        let tg = backward_per_task(&self.spec, &self.params, batch, masks, rotations.as_deref())?;
        check_losses(&tg.losses)?;
        let interference = meter.push(&tg.shared);
        let g = &tg.shared;
        let mut rotation_loss = None;
        let agg: AggregationResult = match (&self.cfg.smto, &mut self.state) {
            (SmtoConfig::MgdaUb, _) => mgda_ub(g)?,
            (SmtoConfig::Pcgrad, _) => pcgrad(g, &mut self.smto_rng)?,
            (SmtoConfig::Graddrop { k, leak }, _) => {
                graddrop(g, &mut self.smto_rng, GradDropParams { k: *k, leak: *leak })?
            }
            (SmtoConfig::Edm, _) => edm(g)?,
            (SmtoConfig::ImtlG, _) => imtl_g(g)?,
            (SmtoConfig::Cagrad { c }, _) => cagrad(g, *c)?,
            (SmtoConfig::NashMtl { iters }, _) => nash_mtl(g, *iters)?,
            (SmtoConfig::Cdtt { .. }, MethodState::Cdtt(st)) => cdtt(g, &tg.losses, st)?,
            (SmtoConfig::Rotograd { .. }, MethodState::Rotograd(rot)) => {
                let target = rotation_target(&shared_feature_grads(rot, &tg.features))?;
                let mut diag = Diagnostics::default();
                if target.degenerate {
                    diag.raise("degenerate_target");
                }
                let loss = rot.step(&tg.features, &target.v)?;
                diag.set("rotation_loss", loss);
                rotation_loss = Some(loss);
                let ones = vec![1.0; g.n_tasks()];
                AggregationResult {
                    direction: g.combine(&ones),
                    weights: WeightVector::new(ones, Convention::SumToN)?,
                    diagnostics: diag,
                }
            }
            (other, _) => return Err(Error::Config(format!("{} is not gradient-based", other.id()))),
        };
        let ones = vec![1.0; self.spec.n_tasks()];
        let update = assemble_update(&self.params, &agg.direction, &tg.heads, &ones)?;
        adam_step(&mut self.adam, &mut self.params.values, &update)?;
        Ok(StepOutcome {
            weights: agg.weights.normalized(),
            losses: tg.losses,
            interference,
            diagnostics: agg.diagnostics,
            rotation_loss,
        })
    }

    fn loss_step(
        &mut self,
        batch: &Batch,
        masks: Option<&Masks>,
        meter: &mut InterferenceMeter,
    ) -> Result<StepOutcome> {
        let n = self.spec.n_tasks();
        let losses = forward_with(&self.spec, &self.params, batch, masks, None)?.losses;
        check_losses(&losses)?;
        let mut diag = Diagnostics::default();
        let weights = match (&self.cfg.smto, &mut self.state) {
            (SmtoConfig::UnitScal, _) => unit_scal(n)?,
            (SmtoConfig::Si, _) => si(&losses)?,
            (SmtoConfig::RlwNormal, _) => rlw(&mut self.smto_rng, RlwDistribution::Normal, n)?,
            (SmtoConfig::RlwDirichlet, _) => rlw(&mut self.smto_rng, RlwDistribution::Dirichlet, n)?,
            (SmtoConfig::Uw, MethodState::Uw { state, opt }) => {
                let out = uw_loss(&losses, state)?;
                adam_step(opt, &mut state.log_vars, &out.grad_log_vars)?;
                out.weights
            }
            (SmtoConfig::Famo { .. }, MethodState::Famo(st)) => famo_weights(st, &losses)?,
            (SmtoConfig::AutoLambda { .. }, MethodState::AutoLambda(l)) => l.clone(),
            (SmtoConfig::Fixed { weights }, _) => WeightVector::new(weights.clone(), Convention::Free)?,
            (other, _) => return Err(Error::Config(format!("{} is not loss-based", other.id()))),
        };
        let interference = if self.cfg.log_interference && n > 1 {
            let tg = backward_per_task(&self.spec, &self.params, batch, masks, None)?;
            meter.push(&tg.shared)
        } else {
            None
        };
        let wg = backward_weighted(&self.spec, &self.params, batch, masks, None, weights.as_slice())?;

        if let (SmtoConfig::AutoLambda { aux_lr_scale, .. }, MethodState::AutoLambda(l)) =
            (&self.cfg.smto, &mut self.state)
        {
            let val = sample_batch(&self.data.val, self.cfg.batch_size, &mut self.aux_rng);
            let step = auto_lambda_update(
                l,
                &self.spec,
                &self.params,
                batch,
                &val,
                self.cfg.lr,
                self.cfg.lr * aux_lr_scale,
            )?;
            if step.skipped {
                diag.raise("meta_update_skipped");
            }
            *l = step.lambda;
        }

        adam_step(&mut self.adam, &mut self.params.values, &wg.grad)?;

        if let MethodState::Famo(st) = &mut self.state {
            let next = forward_with(&self.spec, &self.params, batch, masks, None)?.losses;
            famo_update(st, &losses, &next)?;
        }
        Ok(StepOutcome {
            weights: weights.normalized(),
            losses,
            interference,
            diagnostics: diag,
            rotation_loss: None,
        })
    }

    fn evaluate(&self, split: &Batch) -> Result<Vec<(String, Metric)>> {
        let rotations = self.rotations();
        let outputs = predict(&self.spec, &self.params, &split.inputs, rotations.as_deref())?;
        Ok(self
            .data
            .tasks
            .iter()
            .zip(outputs.iter().zip(&split.targets))
            .map(|(info, (out, target))| (info.name.clone(), task_metric(info.loss, out, target)))
            .collect())
    }
}

fn check_losses(losses: &[f64]) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(task) => Err(Error::NonFiniteLoss { task }),
        None => Ok(()),
    }
}

fn sample_batch(split: &Batch, size: usize, rng: &mut Rng) -> Batch {
    let n = split.len();
    let idx: Vec<usize> = (0..size.min(n)).map(|_| rng.below(n)).collect();
    split.select(&idx)
}

/// Accuracy for classification, mean squared error for regression.
pub fn task_metric(kind: LossKind, output: &Mat, target: &Targets) -> Metric {
    match (kind, target) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|(r, &y)| {
                    let row = output.row(*r);
                    let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    best == y
                })
                .count();
            Metric::new("acc", hits as f64 / labels.len().max(1) as f64, false)
        }
        (_, Targets::Values(y)) => {
            let n = y.as_slice().len().max(1) as f64;
            let mse = output
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / n;
            Metric::new("mse", mse, true)
        }
        (LossKind::MeanSquaredError, Targets::Classes(_)) => Metric::new("mse", f64::NAN, true),
    }
}

fn to_task_metrics(entries: Vec<(String, Metric)>) -> TaskMetrics {
    TaskMetrics {
        tasks: entries
            .into_iter()
            .map(|(task, m)| TaskMetric {
                task,
                metrics: vec![m],
            })
            .collect(),
    }
}

/// Mean over tasks of accuracy, or of `−mse/mse₀` with `mse₀` the validation
/// error of the untrained network.
fn validation_score(val: &TaskMetrics, reference: &TaskMetrics) -> f64 {
    let n = val.tasks.len() as f64;
    val.tasks
        .iter()
        .zip(&reference.tasks)
        .map(|(t, r)| {
            let m = &t.metrics[0];
            if m.lower_is_better {
                let m0 = r.metrics[0].value;
                if m0 > 0.0 {
                    -m.value / m0
                } else {
                    -m.value
                }
            } else {
                m.value
            }
        })
        .sum::<f64>()
        / n
}

/// Builds the configured problem and trains on it.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialResult> {
    cfg.validate()?;
    let data = cfg.problem.build(cfg.data_seed)?;
    train(cfg, &data)
}

/// Trains on prebuilt data. Failures of the balancing method or numerical
/// blow-ups end the run and are recorded in `crash`; configuration errors
/// are returned.
pub fn train(cfg: &TrialConfig, data: &DatasetSplits) -> Result<TrialResult> {
    cfg.validate()?;
    let start = Instant::now();
    let names: Vec<String> = data.tasks.iter().map(|t| t.name.clone()).collect();
    let mut result = TrialResult::empty(cfg, names);
    let mut trainer = Trainer::new(cfg, data)?;
    let reference = to_task_metrics(trainer.evaluate(&data.val)?);
    let mut shuffle_rng = Rng::with_stream(cfg.seed, SHUFFLE_STREAM);
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        result.weight_trace.start_epoch();
        let mut meter = InterferenceMeter::new();
        let mut loss_sum = vec![0.0; data.n_tasks()];
        let mut rot_sum = 0.0;
        let mut rot_count = 0usize;
        let order = shuffle_rng.permutation(data.train.len());
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.select(chunk);
            match trainer.step(&batch, &mut meter) {
                Ok(out) => {
                    loss_sum.iter_mut().zip(&out.losses).for_each(|(a, b)| *a += b);
                    if let Some(r) = out.rotation_loss {
                        rot_sum += r;
                        rot_count += 1;
                    }
                    result.weight_trace.record(out.weights.clone())?;
                    result.steps.push(StepRecord {
                        step,
                        epoch,
                        losses: out.losses,
                        weights: out.weights,
                        interference: out.interference,
                        diagnostics: out.diagnostics,
                    });
                }
                Err(e) => {
                    result.crash = Some(Crash {
                        step,
                        epoch,
                        message: e.to_string(),
                    });
                    break 'epochs;
                }
            }
            step += 1;
            n_batches += 1;
        }
        let val = to_task_metrics(trainer.evaluate(&data.val)?);
        let test = to_task_metrics(trainer.evaluate(&data.test)?);
        let val_score = validation_score(&val, &reference);
        result.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum.iter().map(|s| s / n_batches.max(1) as f64).collect(),
            val_score,
            val,
            test,
            interference: meter.mean(),
            rotation_loss: (rot_count > 0).then(|| rot_sum / rot_count as f64),
        });
    }
    result.select_best_epoch();
    result.wall_time_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs independent trials on a worker pool; output order follows input order.
pub fn run_trials(cfgs: &[TrialConfig], data: Option<&DatasetSplits>) -> Vec<Result<TrialResult>> {
    cfgs.par_iter()
        .map(|c| match data {
            Some(d) => train(c, d),
            None => run_trial(c),
        })
        .collect()
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub dropout_p: Vec<f64>,
    #[serde(default = "zero_grid")]
    pub weight_decay: Vec<f64>,
}

fn zero_grid() -> Vec<f64> {
    vec![0.0]
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lr: vec![0.01, 0.075, 0.005, 0.0025, 0.001, 0.00075, 0.0005],
            dropout_p: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            weight_decay: zero_grid(),
        }
    }
}

impl Grid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &dropout_p in &self.dropout_p {
                for &weight_decay in &self.weight_decay {
                    out.push(GridPoint {
                        lr,
                        dropout_p,
                        weight_decay,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub dropout_p: f64,
    pub weight_decay: f64,
}

impl GridPoint {
    pub fn apply(&self, base: &TrialConfig) -> TrialConfig {
        TrialConfig {
            lr: self.lr,
            dropout_p: self.dropout_p,
            weight_decay: self.weight_decay,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointReport {
    pub point: GridPoint,
    /// Mean best-validation score over non-crashed runs.
    pub mean_val: Option<f64>,
    pub runs: usize,
    pub crashed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub schema_version: u32,
    pub smto: String,
    pub points: Vec<GridPointReport>,
    /// Points whose every run crashed.
    pub excluded: Vec<GridPoint>,
    pub best: GridPoint,
    pub final_runs: Vec<TrialResult>,
    /// Test metrics at the best-validation epoch, one per non-crashed final run.
    pub final_test: Vec<TaskMetrics>,
}

/// Arg-best of mean validation score; ties go to smaller lr, then smaller
/// dropout, then smaller weight decay.
pub fn select_grid_point(reports: &[GridPointReport]) -> Option<GridPoint> {
    reports
        .iter()
        .filter_map(|r| r.mean_val.map(|v| (v, r.point)))
        .min_by(|(va, a), (vb, b)| {
            vb.total_cmp(va)
                .then(a.lr.total_cmp(&b.lr))
                .then(a.dropout_p.total_cmp(&b.dropout_p))
                .then(a.weight_decay.total_cmp(&b.weight_decay))
        })
        .map(|(_, p)| p)
}

/// Runs every grid point with seeds `base.seed .. base.seed + seeds_per_config`,
/// picks the best, then reruns it on `seeds_final` further seeds.
pub fn grid_search<F>(
    base: &TrialConfig,
    grid: &Grid,
    seeds_per_config: usize,
    seeds_final: usize,
    trainer: F,
) -> Result<GridSummary>
where
    F: Fn(&TrialConfig) -> Result<TrialResult> + Sync,
{
    let points = grid.points();
    if points.is_empty() || seeds_per_config == 0 {
        return Err(Error::Config("grid search needs at least one point and one seed".into()));
    }
    let jobs: Vec<TrialConfig> = points
        .iter()
        .flat_map(|p| {
            (0..seeds_per_config as u64).map(move |s| TrialConfig {
                seed: base.seed + s,
                ..p.apply(base)
            })
        })
        .collect();
    let results: Vec<Result<TrialResult>> = jobs.par_iter().map(&trainer).collect();
    let mut reports = Vec::with_capacity(points.len());
    let mut excluded = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let chunk = &results[i * seeds_per_config..(i + 1) * seeds_per_config];
        let mut scores = Vec::new();
        for t in chunk.iter().flatten() {
            if !t.crashed() {
                if let Some(s) = t.best_val_score() {
                    scores.push(s);
                }
            }
        }
        let crashed = seeds_per_config - scores.len();
        if scores.is_empty() {
            excluded.push(*p);
        }
        reports.push(GridPointReport {
            point: *p,
            mean_val: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
            runs: seeds_per_config,
            crashed,
        });
    }
    let best = select_grid_point(&reports)
        .ok_or_else(|| Error::Degenerate("every grid point crashed".into()))?;
    let finals: Vec<TrialConfig> = (0..seeds_final as u64)
        .map(|s| TrialConfig {
            seed: base.seed + seeds_per_config as u64 + s,
            ..best.apply(base)
        })
        .collect();
    let final_runs: Vec<TrialResult> = finals.par_iter().map(&trainer).collect::<Result<_>>()?;
    let final_test = final_runs
        .iter()
        .filter(|r| !r.crashed())
        .filter_map(|r| r.best_test().cloned())
        .collect();
    Ok(GridSummary {
        schema_version: SCHEMA_VERSION,
        smto: base.smto.id().to_string(),
        points: reports,
        excluded,
        best,
        final_runs,
        final_test,
    })
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Quantiles {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmtoReport {
    pub smto: String,
    /// Δ per non-crashed seed, in percent.
    pub delta_mtm: Vec<f64>,
    pub delta_quantiles: Option<Quantiles>,
    pub delta_mean: Option<f64>,
    pub delta_std: Option<f64>,
    pub mean_rank: Option<f64>,
    pub mean_test: Option<TaskMetrics>,
    pub crashed: usize,
    pub runs: usize,
    pub mean_weight_error: Option<f64>,
    pub interference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub problem: String,
    pub baseline: TaskMetrics,
    pub smtos: Vec<SmtoReport>,
}

impl MetricReport {
    /// Aggregates finished trials against single-task baseline metrics.
    pub fn from_results(problem: &str, baseline: TaskMetrics, entries: Vec<(String, Vec<TrialResult>)>) -> Result<Self> {
        let mut smtos = Vec::with_capacity(entries.len());
        for (name, runs) in &entries {
            let ok: Vec<&TrialResult> = runs.iter().filter(|r| !r.crashed() && r.best_epoch.is_some()).collect();
            let tests: Vec<TaskMetrics> = ok.iter().filter_map(|r| r.best_test().cloned()).collect();
            let delta = tests.iter().map(|t| delta_mtm(t, &baseline)).collect::<Result<Vec<f64>>>()?;
            let werr: Vec<f64> = ok.iter().filter_map(|r| r.mean_weight_error()).collect();
            let interf: Vec<f64> = ok.iter().filter_map(|r| r.mean_interference()).collect();
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            smtos.push(SmtoReport {
                smto: name.clone(),
                delta_quantiles: Quantiles::of(&delta),
                delta_mean: mean(&delta),
                delta_std: (!delta.is_empty()).then(|| sample_std(&delta)),
                delta_mtm: delta,
                mean_rank: None,
                mean_test: (!tests.is_empty()).then(|| TaskMetrics::mean(&tests)).transpose()?,
                crashed: runs.len() - ok.len(),
                runs: runs.len(),
                mean_weight_error: mean(&werr),
                interference: mean(&interf),
            });
        }
        let ranked: Vec<usize> = (0..smtos.len()).filter(|&i| smtos[i].mean_test.is_some()).collect();
        if !ranked.is_empty() {
            let tables: Vec<TaskMetrics> = ranked.iter().map(|&i| smtos[i].mean_test.clone().expect("filtered")).collect();
            for (&i, r) in ranked.iter().zip(mean_rank(&tables)?) {
                smtos[i].mean_rank = Some(r);
            }
        }
        Ok(MetricReport {
            schema_version: SCHEMA_VERSION,
            problem: problem.to_string(),
            baseline,
            smtos,
        })
    }

    pub fn get(&self, smto: &str) -> Option<&SmtoReport> {
        self.smtos.iter().find(|s| s.smto == smto)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Single-task reference metrics: each task trained alone with the same
/// hyperparameters, test metrics at the best-validation epoch averaged over
/// seeds.
pub fn single_task_baselines(base: &TrialConfig, data: &DatasetSplits, seeds: &[u64]) -> Result<TaskMetrics> {
    let jobs: Vec<(usize, TrialConfig)> = (0..data.n_tasks())
        .flat_map(|t| {
            seeds.iter().map(move |&s| {
                (
                    t,
                    TrialConfig {
                        seed: s,
                        smto: SmtoConfig::UnitScal,
                        log_interference: false,
                        ..base.clone()
                    },
                )
            })
        })
        .collect();
    let singles: Vec<DatasetSplits> = (0..data.n_tasks()).map(|t| data.single_task(t)).collect();
    let results: Vec<TrialResult> = jobs
        .par_iter()
        .map(|(t, c)| train(c, &singles[*t]))
        .collect::<Result<_>>()?;
    let mut tasks = Vec::with_capacity(data.n_tasks());
    for t in 0..data.n_tasks() {
        let per_seed: Vec<TaskMetrics> = jobs
            .iter()
            .zip(&results)
            .filter(|((jt, _), r)| *jt == t && !r.crashed())
            .filter_map(|(_, r)| r.best_test().cloned())
            .collect();
        if per_seed.is_empty() {
            return Err(Error::Degenerate(format!("every single-task run of `{}` crashed", data.tasks[t].name)));
        }
        tasks.extend(TaskMetrics::mean(&per_seed)?.tasks);
    }
    TaskMetrics::new(tasks)
}

/// Trains the baselines and every listed method on the same data and seeds.
pub fn compare_smtos(base: &TrialConfig, smtos: &[SmtoConfig], seeds: &[u64]) -> Result<MetricReport> {
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let data = base.problem.build(base.data_seed)?;
    let baseline = single_task_baselines(base, &data, seeds)?;
    let jobs: Vec<TrialConfig> = smtos
        .iter()
        .flat_map(|m| {
            seeds.iter().map(move |&s| TrialConfig {
                smto: m.clone(),
                seed: s,
                ..base.clone()
            })
        })
        .collect();
    let results: Vec<TrialResult> = run_trials(&jobs, Some(&data)).into_iter().collect::<Result<_>>()?;
    let mut it = results.into_iter();
    let entries = smtos
        .iter()
        .map(|m| (m.id().to_string(), it.by_ref().take(seeds.len()).collect()))
        .collect();
    MetricReport::from_results(base.problem.id(), baseline, entries)
}

/// An SMTO run and its rerun with weights extracted from its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayPair {
    pub original: TrialResult,
    pub fixed_weights: Vec<f64>,
    pub replay: TrialResult,
}

/// Extracts fixed weights from a finished trial and retrains with them.
pub fn replay_from(original: TrialResult, data: &DatasetSplits) -> Result<ReplayPair> {
    if let Some(c) = &original.crash {
        return Err(Error::Degenerate(format!(
            "cannot extract weights from a trial that crashed at step {}: {}",
            c.step, c.message
        )));
    }
    let w = extract_fixed_weights(&original.weight_trace, EMA_BETA)?.into_vec();
    let cfg = TrialConfig {
        smto: SmtoConfig::Fixed { weights: w.clone() },
        ..original.config.clone()
    };
    let replay = train(&cfg, data)?;
    Ok(ReplayPair {
        original,
        fixed_weights: w,
        replay,
    })
}

pub fn extract_and_replay(cfg: &TrialConfig) -> Result<ReplayPair> {
    let data = cfg.problem.build(cfg.data_seed)?;
    replay_from(train(cfg, &data)?, &data)
}

/// Writes a trial as `<dir>/<smto>_seed<k>.json` and `.csv`.
pub fn persist_trial(result: &TrialResult, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_seed{}", result.smto, result.config.seed);
    let json = dir.join(format!("{stem}.json"));
    result.save_json(&json)?;
    result.write_csv(&dir.join(format!("{stem}.csv")))?;
    Ok(json)
}

/// Count of crashed trials per method.
pub fn crash_counts(results: &[TrialResult]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in results {
        *out.entry(r.smto.clone()).or_insert(0) += usize::from(r.crashed());
    }
    out
}
