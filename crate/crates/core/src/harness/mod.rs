//! Experiment driver: public pretraining, private fine-tuning under a target
//! (epsilon, delta), strategy-by-epsilon sweeps and report emission.

pub mod config;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::{DataSource, ExperimentConfig, PretrainConfig, StepBudget};
pub use report::{
    parse_report, report_emit, trace_csv, CellRecord, CellStatus, EmittedFiles, PretrainSummary, ReferenceRow,
    ReferenceValues, RunReport, TracePoint, REFERENCE_LABEL, SCHEMA_VERSION,
};

use crate::accountant::{self, AccountantError, BudgetTracker, PrivacySpec};
use crate::data::{self, augment_views, DataError, TransferTask};
use crate::finetune::{self, effective_dimension, select_trainable, FineTuneStrategy, FinetuneError};
use crate::nn::arch::{reference_cnn, CnnSpec};
use crate::nn::{checkpoint, Model, NnError};
use crate::optim::{dp_sgd_step, ClipConfig, EmaState, NoiseStream, OptimError, PrivateBatch, StepConfig};
use crate::seed::{self, tag};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("accounting infeasible: {0}")]
    Infeasible(AccountantError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error("checkpoint: {0}")]
    Checkpoint(NnError),
    #[error("report: {0}")]
    Report(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 accounting infeasible, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Data(_) | Self::Finetune(_) => 2,
            Self::Infeasible(_) => 3,
            Self::Numeric(_) => 4,
            Self::Checkpoint(_) | Self::Report(_) | Self::Io { .. } | Self::Internal(_) => 1,
        }
    }
}

impl From<AccountantError> for HarnessError {
    fn from(e: AccountantError) -> Self {
        match e {
            AccountantError::Infeasible { .. } => Self::Infeasible(e),
            other => Self::Config(other.to_string()),
        }
    }
}

fn nn_error(e: NnError) -> HarnessError {
    match e {
        NnError::NonFinite { .. } => HarnessError::Numeric(e.to_string()),
        other => HarnessError::Internal(other.to_string()),
    }
}

impl From<OptimError> for HarnessError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::NonFinite => Self::Numeric(e.to_string()),
            OptimError::Nn(inner) => nn_error(inner),
            OptimError::InvalidConfig(m) => Self::Config(m),
            other => Self::Internal(other.to_string()),
        }
    }
}

/// Load or generate the public, private and test splits.
pub fn load_task(cfg: &ExperimentConfig) -> Result<TransferTask, HarnessError> {
    use crate::data::SplitTag::*;
    let task = match &cfg.data {
        DataSource::Synthetic(s) => TransferTask::generate(s)?,
        DataSource::Idx {
            public,
            private,
            test,
            classes,
        } => {
            let p = data::load_idx(&public.0, &public.1, "idx-public", PublicPretrain, Some(*classes), 0)?;
            let off = p.len() as u64;
            let tr = data::load_idx(&private.0, &private.1, "idx-private", PrivateFinetune, Some(*classes), off)?;
            let off = off + tr.len() as u64;
            let te = data::load_idx(&test.0, &test.1, "idx-test", Test, Some(*classes), off)?;
            TransferTask {
                public: p,
                private_train: tr,
                private_test: te,
            }
        }
        DataSource::Csv {
            public,
            private,
            test,
            shape,
            classes,
        } => {
            let p = data::load_csv(public, *shape, "csv-public", PublicPretrain, Some(*classes), 0)?;
            let off = p.len() as u64;
            let tr = data::load_csv(private, *shape, "csv-private", PrivateFinetune, Some(*classes), off)?;
            let off = off + tr.len() as u64;
            let te = data::load_csv(test, *shape, "csv-test", Test, Some(*classes), off)?;
            TransferTask {
                public: p,
                private_train: tr,
                private_test: te,
            }
        }
    };
    let shapes = [
        task.public.item_shape(),
        task.private_train.item_shape(),
        task.private_test.item_shape(),
    ];
    if shapes[0] != shapes[1] || shapes[0] != shapes[2] {
        return Err(HarnessError::Config(format!("splits disagree on image shape: {shapes:?}")));
    }
    if task.private_train.is_empty() || task.private_test.is_empty() {
        return Err(HarnessError::Config("private train and test splits must be non-empty".into()));
    }
    if !data::disjoint(&task.public, &task.private_train) {
        return Err(HarnessError::Config("public and private splits share example ids".into()));
    }
    Ok(task)
}

fn architecture(cfg: &ExperimentConfig, task: &TransferTask) -> CnnSpec {
    let s = task.public.item_shape();
    CnnSpec {
        input: [s[0], s[1], s[2]],
        classes: task.public.classes,
        ..cfg.model.clone()
    }
}

/// Freshly initialized reference network for this config and task.
pub fn init_model(cfg: &ExperimentConfig, task: &TransferTask) -> Result<Model, HarnessError> {
    let mut rng = seed::stream(cfg.seed, &[tag::INIT]);
    reference_cnn(&architecture(cfg, task), &mut rng).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Where `pretrain` writes and `finetune` reads the checkpoint.
pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output.join("pretrained.ckpt"))
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Model,
    pub summary: PretrainSummary,
}

/// Non-private minibatch SGD on the public split. A fraction of the split
/// is held out to measure accuracy.
pub fn pretrain(cfg: &ExperimentConfig, task: &TransferTask) -> Result<Pretrained, HarnessError> {
    let mut model = init_model(cfg, task)?;
    let public = &task.public;
    let p = &cfg.pretrain;
    let mut order: Vec<usize> = (0..public.len()).collect();
    order.shuffle(&mut seed::stream(cfg.seed, &[tag::PRETRAIN_ORDER, 0]));
    let n_hold = (public.len() as f64 * p.holdout).floor() as usize;
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();
    if train.is_empty() && p.epochs > 0 {
        return Err(HarnessError::Config("no public examples left for pretraining".into()));
    }

    let d = model.num_params();
    let mut step = 0u64;
    let mut final_loss = None;
    for epoch in 0..p.epochs {
        train.shuffle(&mut seed::stream(cfg.seed, &[tag::PRETRAIN_ORDER, epoch as u64 + 1]));
        let mut epoch_loss = 0.0;
        for chunk in train.chunks(p.batch_size) {
            let eval = model.evaluator();
            let parts = chunk
                .par_iter()
                .map(|&i| {
                    let mut g = vec![0.0; d];
                    let loss = eval.gradient(public.images.item(i), public.labels[i], None, &mut g)?;
                    Ok((g, loss))
                })
                .collect::<Result<Vec<_>, NnError>>()
                .map_err(|e| match e {
                    NnError::NonFinite { layer } => {
                        HarnessError::Numeric(format!("pretraining diverged at step {step} (layer `{layer}`)"))
                    }
                    other => nn_error(other),
                })?;
            let mut grad = vec![0.0; d];
            let mut loss = 0.0;
            for (g, l) in &parts {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = p.learning_rate / chunk.len() as f64;
            let mut params = model.params_flat();
            for (w, g) in params.iter_mut().zip(&grad) {
                *w -= scale * g;
            }
            let mean = loss / chunk.len() as f64;
            if !mean.is_finite() || !params.iter().all(|v| v.is_finite()) {
                return Err(HarnessError::Numeric(format!("pretraining diverged at step {step}")));
            }
            model.set_params_flat(&params).map_err(nn_error)?;
            epoch_loss += loss;
            step += 1;
        }
        final_loss = Some(epoch_loss / train.len() as f64);
    }
    let holdout_accuracy = if hold.is_empty() {
        None
    } else {
        let sub = public.subset(hold);
        Some(model.accuracy(&sub.images, &sub.labels).map_err(nn_error)?)
    };
    Ok(Pretrained {
        model,
        summary: PretrainSummary {
            epochs: p.epochs,
            steps: step,
            final_loss,
            holdout_accuracy,
        },
    })
}

pub fn save_checkpoint(model: &Model, path: &std::path::Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    checkpoint::save(model, path).map_err(HarnessError::Checkpoint)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Model, HarnessError> {
    checkpoint::load(path).map_err(HarnessError::Checkpoint)
}

/// Seed of the (strategy, epsilon) cell; independent of the cell's position
/// in the sweep.
pub fn cell_seed(base: u64, strategy: &FineTuneStrategy, epsilon: f64) -> u64 {
    let name: Vec<u64> = strategy.to_string().bytes().map(u64::from).collect();
    seed::derive(base, &[tag::CELL, seed::derive(0, &name), epsilon.to_bits()])
}

/// Everything a private run produces.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub record: CellRecord,
    pub trace: Vec<TracePoint>,
    /// Raw final weights (not the EMA shadow).
    pub model: Model,
    pub ema_model: Model,
}

/// Privately fine-tune `pretrained` on the private split.
///
/// The noise multiplier is calibrated from `(epsilon, delta, q, T)` alone
/// before any private example is read. With `non_private` set the noise
/// multiplier is 0 and the accountant is bypassed.
pub fn finetune_dp(
    cfg: &ExperimentConfig,
    pretrained: &Model,
    task: &TransferTask,
    strategy: &FineTuneStrategy,
    epsilon: f64,
) -> Result<CellOutcome, HarnessError> {
    let started = Instant::now();
    let private = &task.private_train;
    let n = private.len();
    let q = cfg.sampling_rate(n)?;
    let steps = cfg.steps(q);
    if !(epsilon > 0.0) {
        return Err(HarnessError::Config(format!("epsilon must be positive, got {epsilon}")));
    }

    let sigma = if cfg.non_private {
        0.0
    } else {
        accountant::calibrate_sigma(epsilon, cfg.delta, q, steps)?
    };
    let tracker = if cfg.non_private {
        None
    } else {
        let spec = PrivacySpec {
            epsilon,
            delta: cfg.delta,
            sampling_rate: q,
            noise_multiplier: sigma,
            steps,
            dataset_size: n,
        };
        spec.validate()?;
        Some(BudgetTracker::new(&spec)?)
    };

    if pretrained.input_shape() != private.item_shape() {
        return Err(HarnessError::Config(format!(
            "checkpoint expects input {:?}, private data is {:?}",
            pretrained.input_shape(),
            private.item_shape()
        )));
    }
    if pretrained.num_classes() != private.classes {
        return Err(HarnessError::Config(format!(
            "checkpoint head has {} classes, private data has {}",
            pretrained.num_classes(),
            private.classes
        )));
    }
    let cell = cell_seed(cfg.seed, strategy, epsilon);
    let mut model = match cfg.head_init {
        Some(scheme) => finetune::reinit_head(pretrained, &mut seed::stream(cell, &[tag::HEAD]), scheme)?,
        None => pretrained.clone(),
    };
    let mask = select_trainable(&model, strategy)?;
    let clip = ClipConfig::new(cfg.clip_norm)?;
    let step_cfg = StepConfig::new(cfg.learning_rate, cfg.batch_size, cfg.augment.multiplicity)?;
    let mut ema = EmaState::new(cfg.ema_decay, model.params_flat())?;
    let mut sampler = seed::stream(cell, &[tag::SAMPLING]);
    let mut noise = NoiseStream::new(seed::derive(cell, &[tag::NOISE]));
    let augment_seed = seed::derive(cell, &[tag::AUGMENT]);
    let label = strategy.to_string();

    let mut trace = Vec::with_capacity(steps as usize);
    for t in 0..steps {
        let picked = crate::optim::poisson_sample(n, q, &mut sampler)?;
        let views = picked
            .par_iter()
            .map(|&i| augment_views(&private.example(i), &cfg.augment, private.ids[i], t, augment_seed))
            .collect::<Result<Vec<_>, DataError>>()?;
        let batch = PrivateBatch {
            views,
            labels: picked.iter().map(|&i| private.labels[i]).collect(),
        };
        let (next, stats) = dp_sgd_step(&model, &batch, mask.coords(), clip, sigma, step_cfg, &mut noise)
            .map_err(|e| match HarnessError::from(e) {
                HarnessError::Numeric(m) => HarnessError::Numeric(format!("step {t}: {m}")),
                other => other,
            })?;
        model = next;
        ema.update(&model.params_flat())?;
        trace.push(TracePoint {
            strategy: label.clone(),
            target_epsilon: epsilon,
            step: t + 1,
            epsilon_spent: tracker.as_ref().map_or(f64::INFINITY, |tr| tr.epsilon_at(t + 1)),
            train_loss: stats.mean_loss,
        });
    }

    let mut ema_model = model.clone();
    ema_model.set_params_flat(ema.shadow()).map_err(nn_error)?;
    let test = &task.private_test;
    let accuracy_raw = model.accuracy(&test.images, &test.labels).map_err(nn_error)?;
    let accuracy_ema = ema_model.accuracy(&test.images, &test.labels).map_err(nn_error)?;
    let (realized, alpha) = if cfg.non_private {
        (None, None)
    } else {
        let (e, a) = accountant::epsilon_for(q, sigma, steps, cfg.delta, &accountant::default_orders())?;
        (Some(e), Some(a))
    };
    let record = CellRecord {
        strategy: label,
        strategy_label: strategy.label(),
        target_epsilon: epsilon,
        status: CellStatus::Completed,
        accuracy_ema: Some(accuracy_ema),
        accuracy_raw: Some(accuracy_raw),
        realized_epsilon: realized,
        best_alpha: alpha,
        noise_multiplier: Some(sigma),
        trainable_params: effective_dimension(&mask),
        total_params: model.num_params(),
        steps,
        sampling_rate: q,
        seed: cell,
        private: !cfg.non_private,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(CellOutcome {
        record,
        trace,
        model,
        ema_model,
    })
}

fn failed_record(
    cfg: &ExperimentConfig,
    model: &Model,
    task: &TransferTask,
    strategy: &FineTuneStrategy,
    epsilon: f64,
    err: &HarnessError,
) -> CellRecord {
    let q = cfg.sampling_rate(task.private_train.len()).unwrap_or(f64::NAN);
    CellRecord {
        strategy: strategy.to_string(),
        strategy_label: strategy.label(),
        target_epsilon: epsilon,
        status: CellStatus::Failed {
            code: err.exit_code(),
            message: err.to_string(),
        },
        accuracy_ema: None,
        accuracy_raw: None,
        realized_epsilon: None,
        best_alpha: None,
        noise_multiplier: None,
        trainable_params: select_trainable(model, strategy).map_or(0, |m| effective_dimension(&m)),
        total_params: model.num_params(),
        steps: if q.is_finite() { cfg.steps(q) } else { 0 },
        sampling_rate: q,
        seed: cell_seed(cfg.seed, strategy, epsilon),
        private: !cfg.non_private,
        wall_time_secs: 0.0,
    }
}

/// Report skeleton shared by `finetune` and `sweep`.
pub fn empty_report(cfg: &ExperimentConfig, task: &TransferTask, pretrain: Option<PretrainSummary>) -> RunReport {
    RunReport {
        schema_version: SCHEMA_VERSION.into(),
        dataset: task.private_train.name.clone(),
        base_seed: cfg.seed,
        delta: cfg.delta,
        clip_norm: cfg.clip_norm,
        learning_rate: cfg.learning_rate,
        expected_batch_size: cfg.batch_size,
        augment_multiplicity: cfg.augment.multiplicity,
        ema_decay: cfg.ema_decay,
        private_examples: task.private_train.len(),
        test_examples: task.private_test.len(),
        pretrain,
        records: Vec::new(),
        reference: ReferenceValues::published(),
    }
}

/// Result of a sweep: the report plus all per-step traces.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub report: RunReport,
    pub trace: Vec<TracePoint>,
}

/// Every configured strategy at every configured epsilon, starting from the
/// same pretrained model. Failed cells are kept and marked.
pub fn sweep(
    cfg: &ExperimentConfig,
    pretrained: &Model,
    task: &TransferTask,
    pretrain: Option<PretrainSummary>,
) -> SweepOutput {
    let mut report = empty_report(cfg, task, pretrain);
    let mut trace = Vec::new();
    for strategy in &cfg.strategies {
        for &epsilon in &cfg.epsilons {
            match finetune_dp(cfg, pretrained, task, strategy, epsilon) {
                Ok(out) => {
                    report.records.push(out.record);
                    trace.extend(out.trace);
                }
                Err(e) => report
                    .records
                    .push(failed_record(cfg, pretrained, task, strategy, epsilon, &e)),
            }
        }
    }
    SweepOutput { report, trace }
}

/// Pretrain (or load the configured checkpoint) and sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput, HarnessError> {
    let task = load_task(cfg)?;
    let (model, summary) = match &cfg.checkpoint {
        Some(path) => (load_checkpoint(path)?, None),
        None => {
            let p = pretrain(cfg, &task)?;
            (p.model, Some(p.summary))
        }
    };
    Ok(sweep(cfg, &model, &task, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "seed = 3\nn_public = 200\nn_private = 100\nn_test = 50\nclasses = 4\nimage_size = 8\n\
             stem_channels = 4\ngroups = 2\nhidden = 8\npretrain_epochs = 1\nbatch_size = 20\nsteps = 4\n\
             epsilons = 2\nstrategies = last\n",
        )
        .unwrap()
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Numeric("x".into()).exit_code(), 4);
        let inf = AccountantError::Infeasible {
            target: 1e-9,
            sigma_lo: 0.01,
            sigma_hi: 1e4,
            eps_at_lo: 1.0,
            eps_at_hi: 1e-3,
        };
        assert_eq!(HarnessError::from(inf).exit_code(), 3);
    }

    #[test]
    fn cell_seeds_are_stable_and_distinct() {
        let s = FineTuneStrategy::LastLayer;
        assert_eq!(cell_seed(1, &s, 2.0), cell_seed(1, &s, 2.0));
        assert_ne!(cell_seed(1, &s, 2.0), cell_seed(1, &s, 4.0));
        assert_ne!(cell_seed(1, &s, 2.0), cell_seed(1, &FineTuneStrategy::WholeModel, 2.0));
        assert_ne!(cell_seed(1, &s, 2.0), cell_seed(2, &s, 2.0));
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let mut cfg = tiny();
        cfg.pretrain.epochs = 0;
        let task = load_task(&cfg).unwrap();
        let p = pretrain(&cfg, &task).unwrap();
        assert_eq!(p.model, init_model(&cfg, &task).unwrap());
        assert_eq!(p.summary.steps, 0);
    }

    #[test]
    fn infeasible_target_aborts_the_cell() {
        let cfg = tiny();
        let task = load_task(&cfg).unwrap();
        let model = init_model(&cfg, &task).unwrap();
        let err = finetune_dp(&cfg, &model, &task, &FineTuneStrategy::LastLayer, 1e-9).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let out = sweep(
            &ExperimentConfig {
                epsilons: vec![1e-9, 2.0],
                ..cfg
            },
            &model,
            &task,
            None,
        );
        assert_eq!(out.report.records.len(), 2);
        assert!(matches!(out.report.records[0].status, CellStatus::Failed { code: 3, .. }));
        assert_eq!(out.report.records[1].status, CellStatus::Completed);
        assert_eq!(out.report.first_failure(), Some(3));
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let cfg = tiny();
        let task = load_task(&cfg).unwrap();
        let other = ExperimentConfig {
            data: DataSource::Synthetic(crate::data::SyntheticTaskConfig {
                classes: 5,
                seed: 3,
                n_public: 200,
                n_private: 100,
                n_test: 50,
                dim: 8,
            }),
            ..cfg.clone()
        };
        let model = init_model(&other, &load_task(&other).unwrap()).unwrap();
        let err = finetune_dp(&cfg, &model, &task, &FineTuneStrategy::LastLayer, 2.0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
