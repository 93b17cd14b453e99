//! Orchestrates the full protocol: train on domain A, adapt to domain B under
//! each strategy, evaluate both domains, repeat, and emit reports.
//!
//! Everything derives from the master seed: the benchmark seed, the per-
//! repetition seeds (`master + r`), model initialization and shuffling. The
//! test split depends only on the benchmark seed, so it is fixed across
//! repetitions while validation groups are resampled.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, BenchmarkConfig, Dataset, Domain, SplitSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{backward_transfer, forward_transfer, AucTable, TransferReport};
use crate::nn::{LabelMask, MlpModel};
use crate::optim::{train_loop, ExtraLoss, PlateauConfig, SgdConfig, TrainRecord};
use crate::param::ParameterVector;
use crate::report;
use crate::rng::sub_seed;
use crate::strategies::{
    fisher_diagonal, jt_mix, record_soft_targets, FisherWeighting, GaussianPrior, JtMixture,
    LwfPenalty, SoftTargets, ThresholdRule,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Optimizer and schedule for one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub sgd: SgdConfig,
    pub plateau: PlateauConfig,
    pub epochs: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            sgd: SgdConfig::default(),
            plateau: PlateauConfig::default(),
            epochs: 30,
        }
    }
}

/// One continual-learning strategy with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    /// Joint training with a fraction of the source groups replayed.
    Jt { fraction: f64 },
    /// EWC with the Fisher diagonal binarized by the threshold rule.
    Ewc {
        lambda: f64,
        #[serde(flatten)]
        rule: ThresholdRule,
        #[serde(default = "default_weighting")]
        weighting: FisherWeighting,
    },
    /// LWF with soft targets on the labels absent from the target domain.
    Lwf { lambda: f64 },
}

fn default_weighting() -> FisherWeighting {
    FisherWeighting::Binarized
}

impl StrategySpec {
    pub fn name(&self) -> String {
        match self {
            StrategySpec::Jt { fraction } => format!("jt-{}", (fraction * 100.0).round() as u32),
            StrategySpec::Ewc { .. } => "ewc".to_string(),
            StrategySpec::Lwf { .. } => "lwf".to_string(),
        }
    }
}

/// Full experiment configuration (JSON file with flag overrides).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub benchmark: BenchmarkConfig,
    pub split: SplitSpec,
    pub hidden_dims: Vec<usize>,
    /// Stage 1 (source domain) optimizer; weight decay on.
    pub stage1: StageConfig,
    /// Stage 2 (adaptation) optimizer; weight decay off.
    pub stage2: StageConfig,
    pub strategies: Vec<StrategySpec>,
    pub repetitions: u32,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            benchmark: BenchmarkConfig::default(),
            split: SplitSpec::default(),
            hidden_dims: vec![64, 32],
            stage1: StageConfig {
                sgd: SgdConfig {
                    weight_decay: 1e-4,
                    ..SgdConfig::default()
                },
                ..StageConfig::default()
            },
            stage2: StageConfig::default(),
            strategies: default_strategies(),
            repetitions: 5,
            master_seed: 2024,
        }
    }
}

/// The full strategy grid: JT fractions 0..100%, binarized EWC, LWF.
///
/// EWC defaults are calibrated to this benchmark: the regularized share of
/// parameters (quantile rule) is what controls retention here, and the
/// penalty saturates in lambda once the selected parameters are pinned.
pub fn default_strategies() -> Vec<StrategySpec> {
    let mut v: Vec<StrategySpec> = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        .iter()
        .map(|&fraction| StrategySpec::Jt { fraction })
        .collect();
    v.push(StrategySpec::Ewc {
        lambda: 1.0,
        rule: ThresholdRule::Quantile { q: 0.5 },
        weighting: FisherWeighting::Binarized,
    });
    v.push(StrategySpec::Lwf { lambda: 2.0 });
    v
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        self.benchmark.validate()?;
        self.split.validate()?;
        self.stage1.sgd.validate()?;
        self.stage1.plateau.validate()?;
        self.stage2.sgd.validate()?;
        self.stage2.plateau.validate()?;
        if self.stage1.epochs == 0 || self.stage2.epochs == 0 {
            return Err(Error::config("stage epochs must be at least 1"));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("hidden dims must be positive"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        let mut names: Vec<String> = self.strategies.iter().map(StrategySpec::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.strategies.len() {
            return Err(Error::config("strategy names must be unique"));
        }
        Ok(())
    }

    /// Benchmark config actually used: its seed derives from the master seed.
    pub fn resolved_benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            seed: sub_seed(self.master_seed, "benchmark"),
            ..self.benchmark.clone()
        }
    }

    pub fn model_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.benchmark.feature_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(data::NUM_LABELS);
        dims
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn strategy_names(&self) -> Vec<String> {
        self.strategies.iter().map(StrategySpec::name).collect()
    }
}

/// Loads a JSON config; a missing or unreadable file is a configuration
/// error so the CLI exits with code 2.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&raw)
        .map_err(|e| Error::config(format!("cannot parse config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Group splits of both domains for one repetition.
#[derive(Debug, Clone)]
pub struct RepetitionData {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub target_test: Dataset,
}

pub fn split_repetition(
    cfg: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    repetition_seed: u64,
) -> Result<RepetitionData> {
    let (source_train, source_val, source_test) = data::split(source, &cfg.split, repetition_seed)?;
    let (target_train, target_val, target_test) = data::split(target, &cfg.split, repetition_seed)?;
    Ok(RepetitionData {
        source_train,
        source_val,
        source_test,
        target_train,
        target_val,
        target_test,
    })
}

/// Stage 1: trains a fresh union-head model on domain A with A's 14-label
/// mask, weight decay per the stage-1 config and best-validation selection.
pub fn run_stage1(
    cfg: &ExperimentConfig,
    rep: &RepetitionData,
    repetition_seed: u64,
) -> Result<(MlpModel, TrainRecord)> {
    let mut model = MlpModel::new(&cfg.model_dims(), sub_seed(repetition_seed, "model-init"))?;
    let train = rep.source_train.to_train_set()?;
    let val = rep.source_val.to_train_set()?;
    let record = train_loop(
        &mut model,
        &train,
        &val,
        &cfg.stage1.sgd,
        &cfg.stage1.plateau,
        cfg.stage1.epochs,
        sub_seed(repetition_seed, "stage1-shuffle"),
        None,
    )?;
    Ok((model, record))
}

/// Strategy-specific byproducts, persisted for inspection and reuse.
#[derive(Debug, Clone, Default)]
pub struct AdaptArtifacts {
    pub prior: Option<GaussianPrior>,
    pub soft_targets: Option<SoftTargets>,
    pub mixture: Option<JtMixture>,
}

/// Stage 2: adapts the source model to domain B under one strategy, using
/// the stage-2 optimizer (no weight decay). Validation is always the plain
/// data loss on B's validation split with B's 14 labels.
pub fn run_adaptation(
    source_model: &MlpModel,
    strategy: &StrategySpec,
    cfg: &ExperimentConfig,
    rep: &RepetitionData,
    repetition_seed: u64,
) -> Result<(MlpModel, TrainRecord, AdaptArtifacts)> {
    let mut model = source_model.clone();
    let val = rep.target_val.to_train_set()?;
    let shuffle_seed = sub_seed(repetition_seed, "stage2-shuffle");
    let mut artifacts = AdaptArtifacts::default();

    let (train, hook): (crate::optim::TrainSet, Option<Box<dyn ExtraLoss>>) = match strategy {
        StrategySpec::Jt { fraction } => {
            let (combined, mixture) = jt_mix(
                &rep.source_train,
                &rep.target_train,
                *fraction,
                sub_seed(repetition_seed, "jt-mix"),
            )?;
            artifacts.mixture = Some(mixture);
            (combined.to_train_set()?, None)
        }
        StrategySpec::Ewc {
            lambda,
            rule,
            weighting,
        } => {
            let source_set = rep.source_train.to_train_set()?;
            let fisher = fisher_diagonal(source_model, &source_set, &Domain::A.mask())?;
            let mean = source_model.get_parameters();
            let prior = match weighting {
                FisherWeighting::Binarized => GaussianPrior::binarized(mean, &fisher, *rule, *lambda)?,
                FisherWeighting::Classic => GaussianPrior::classic(mean, &fisher, *lambda)?,
            };
            artifacts.prior = Some(prior.clone());
            (rep.target_train.to_train_set()?, Some(Box::new(prior)))
        }
        StrategySpec::Lwf { lambda } => {
            let adaptation_set = rep.target_train.to_train_set()?;
            let soft = record_soft_targets(source_model, &adaptation_set, &source_unique_mask())?;
            artifacts.soft_targets = Some(soft.clone());
            let penalty = LwfPenalty::new(soft, *lambda)?;
            (adaptation_set, Some(Box::new(penalty)))
        }
    };

    let record = train_loop(
        &mut model,
        &train,
        &val,
        &cfg.stage2.sgd,
        &cfg.stage2.plateau,
        cfg.stage2.epochs,
        shuffle_seed,
        hook.as_deref(),
    )?;
    Ok((model, record, artifacts))
}

/// The 7 labels present only in the source domain (LWF's regularized set).
pub fn source_unique_mask() -> LabelMask {
    let a = Domain::A.mask();
    let shared = data::shared_label_mask();
    LabelMask::new(
        (0..data::NUM_LABELS)
            .map(|l| a.is_active(l) && !shared.is_active(l))
            .collect(),
    )
}

/// Scores a model on a test set; AUC is computed for `defined` labels only.
pub fn evaluate_model(
    model: &MlpModel,
    test: &Dataset,
    defined: &LabelMask,
) -> Result<(AucTable, Matrix)> {
    let (inputs, labels) = test.eval_matrices()?;
    let scores = model.forward(&inputs)?;
    let table = AucTable::from_scores(&scores, &labels, defined)?;
    Ok((table, scores))
}

/// Everything measured for one strategy in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub name: String,
    pub after_on_source: AucTable,
    pub after_on_target: AucTable,
    pub transfer: TransferReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: u32,
    pub initial_on_source: AucTable,
    pub initial_on_target: AucTable,
    pub outcomes: Vec<StrategyOutcome>,
}

impl RepetitionResult {
    pub fn outcome(&self, strategy: &str) -> Option<&StrategyOutcome> {
        self.outcomes.iter().find(|o| o.name == strategy)
    }
}

/// Collected results of a full run; raw score files persisted alongside
/// regenerate every table in here exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub config_hash: String,
    pub master_seed: u64,
    pub label_names: Vec<String>,
    pub strategy_order: Vec<String>,
    pub repetitions: Vec<RepetitionResult>,
}

impl RunResult {
    /// Mean across repetitions of the per-repetition mean BWT (across the
    /// source-domain labels).
    pub fn mean_bwt(&self, strategy: &str) -> Result<f64> {
        let mut values = Vec::new();
        for rep in &self.repetitions {
            let outcome = rep
                .outcome(strategy)
                .ok_or_else(|| Error::config(format!("unknown strategy {strategy}")))?;
            values.push(outcome.transfer.bwt_aggregate.mean);
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Mean across repetitions of the target-domain average AUC.
    pub fn mean_target_auc(&self, strategy: &str) -> Result<f64> {
        let mut values = Vec::new();
        for rep in &self.repetitions {
            let outcome = rep
                .outcome(strategy)
                .ok_or_else(|| Error::config(format!("unknown strategy {strategy}")))?;
            let avg = outcome
                .after_on_target
                .average()
                .ok_or_else(|| Error::config("no defined target-domain AUC"))?;
            values.push(avg);
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Mean across repetitions of the source-domain average AUC of the
    /// stage-1 model.
    pub fn mean_initial_source_auc(&self) -> Result<f64> {
        let mut values = Vec::new();
        for rep in &self.repetitions {
            values.push(
                rep.initial_on_source
                    .average()
                    .ok_or_else(|| Error::config("no defined source-domain AUC"))?,
            );
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Mean across repetitions of the mean forward transfer (shared labels).
    pub fn mean_fwt(&self) -> Result<f64> {
        let mut values = Vec::new();
        for rep in &self.repetitions {
            let fwt = forward_transfer(&rep.initial_on_target);
            values.push(crate::metrics::aggregate(&fwt)?.mean);
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn run_repetition(
    cfg: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    rep_index: u32,
    out_dir: Option<&Path>,
) -> Result<RepetitionResult> {
    let repetition_seed = cfg.master_seed.wrapping_add(rep_index as u64);
    let rep = split_repetition(cfg, source, target, repetition_seed)?;

    let (stage1_model, stage1_record) = run_stage1(cfg, &rep, repetition_seed)?;
    let (initial_on_source, initial_source_scores) =
        evaluate_model(&stage1_model, &rep.source_test, &Domain::A.mask())?;
    let (initial_on_target, initial_target_scores) =
        evaluate_model(&stage1_model, &rep.target_test, &data::shared_label_mask())?;
    let fwt = forward_transfer(&initial_on_target);

    if let Some(dir) = out_dir {
        report::persist_repetition_base(
            dir,
            rep_index,
            &stage1_model,
            &stage1_record,
            (&initial_source_scores, &rep.source_test),
            (&initial_target_scores, &rep.target_test),
        )?;
    }

    let mut outcomes = Vec::new();
    for strategy in &cfg.strategies {
        let (adapted, record, artifacts) =
            run_adaptation(&stage1_model, strategy, cfg, &rep, repetition_seed)?;
        let (after_on_source, source_scores) =
            evaluate_model(&adapted, &rep.source_test, &Domain::A.mask())?;
        let (after_on_target, target_scores) =
            evaluate_model(&adapted, &rep.target_test, &Domain::B.mask())?;
        let bwt = backward_transfer(&initial_on_source, &after_on_source)?;
        let transfer = TransferReport::new(bwt, fwt.clone())?;
        let name = strategy.name();

        if let Some(dir) = out_dir {
            report::persist_strategy(
                dir,
                rep_index,
                &name,
                &adapted,
                &record,
                &artifacts,
                (&source_scores, &rep.source_test),
                (&target_scores, &rep.target_test),
            )?;
        }

        outcomes.push(StrategyOutcome {
            name,
            after_on_source,
            after_on_target,
            transfer,
        });
    }

    Ok(RepetitionResult {
        repetition: rep_index,
        initial_on_source,
        initial_on_target,
        outcomes,
    })
}

/// Runs the full pipeline: generate, 5x (train, adapt, evaluate), report.
/// With an output directory it persists data, checkpoints, raw scores,
/// train records and the report files.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let bench = cfg.resolved_benchmark();
    let (source, target) = data::generate(&bench)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("data"))?;
        data::save_csv(&source, &dir.join("data/domain_a.csv"))?;
        data::save_csv(&target, &dir.join("data/domain_b.csv"))?;
    }

    // repetitions are independent; the merge is keyed by index, so
    // sequential and concurrent execution produce identical results
    let reps: Result<Vec<RepetitionResult>> = (1..=cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(cfg, &source, &target, r, out_dir))
        .collect();
    let mut repetitions = reps?;
    repetitions.sort_by_key(|r| r.repetition);

    let run = RunResult {
        schema_version: CONFIG_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        label_names: data::label_names(),
        strategy_order: cfg.strategy_names(),
        repetitions,
    };

    if let Some(dir) = out_dir {
        report::write_manifest(dir, &run)?;
        let bundle = report::evaluate_and_report(&run)?;
        report::write_report(dir, &bundle)?;
    }
    Ok(run)
}

/// Saves the stage-1 model of a repetition (used by the `train` subcommand).
pub fn persist_stage1(
    dir: &Path,
    rep_index: u32,
    model: &MlpModel,
    record: &TrainRecord,
) -> Result<()> {
    let rep_dir = dir.join(format!("reps/rep{rep_index}"));
    std::fs::create_dir_all(rep_dir.join("checkpoints"))?;
    checkpoint::save_model(model, &rep_dir.join("checkpoints/stage1.json"))?;
    std::fs::write(rep_dir.join("stage1_record.csv"), record.to_csv())?;
    Ok(())
}

/// Parameter movement between two checkpoints, split by a coordinate mask.
/// Returns (max |delta| over masked, max |delta| over unmasked).
pub fn movement_by_mask(
    before: &ParameterVector,
    after: &ParameterVector,
    mask: &[bool],
) -> Result<(f64, f64)> {
    if before.len() != after.len() || before.len() != mask.len() {
        return Err(Error::shape("movement inputs disagree in length"));
    }
    let mut masked = 0.0f64;
    let mut unmasked = 0.0f64;
    for ((&b, &a), &m) in before.values().iter().zip(after.values()).zip(mask) {
        let d = (a - b).abs();
        if m {
            masked = masked.max(d);
        } else {
            unmasked = unmasked.max(d);
        }
    }
    Ok((masked, unmasked))
}
