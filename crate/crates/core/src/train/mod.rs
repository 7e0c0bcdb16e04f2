//! Optimization loop: AdamW with global-norm clipping, a warmup-stable-decay
//! schedule, optional EMA prototype updates, and per-step balance logging.

mod optimizer;
mod schedule;

pub use optimizer::{AdamWConfig, OptimizerState};
pub use schedule::LrSchedule;

use serde::{Deserialize, Serialize};

use crate::balance::{LoadMode, LoadVector};
use crate::error::{LprError, Result};
use crate::moe::{CorpusConfig, ModelConfig, MoeModel, Router, SyntheticCorpusSpec};
use crate::numerics::{Matrix, RngState};
use crate::router::{ema_update, EmaMode, LprLosses, LprWeights};

/// `task + β_rs(β_div·div + β_align·align + β_KL·KL)`.
pub fn total_loss(task: f64, lpr: &LprLosses, weights: &LprWeights) -> f64 {
    task + weights.combine(lpr.diversity, lpr.alignment, lpr.kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub mode: EmaMode,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            enabled: false,
            lambda: 0.99,
            mode: EmaMode::Hard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub ema: EmaConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    /// Evaluate every this many steps (and always at step 0 and the end);
    /// `0` evaluates only at the ends.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            ema: EmaConfig::default(),
            seed: 0,
            steps: 3000,
            batch_size: 256,
            eval_batch: 2048,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.ema.lambda) {
            return Err(LprError::param("ema.lambda must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(LprError::param(
                "batch_size and eval_batch must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Independent random streams derived from the run seed.
mod stream {
    pub const INIT: u64 = 0;
    pub const CORPUS: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const EVAL: u64 = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub task: f64,
    pub aux: f64,
    pub kl: f64,
    pub diversity: f64,
    pub alignment: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Per layer, hard counts on the training batch.
    pub gini: Vec<f64>,
    pub min_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of optimizer steps taken before this evaluation.
    pub step: usize,
    pub test_loss: f64,
    pub hard_loads: Vec<LoadVector>,
    pub soft_loads: Vec<LoadVector>,
    /// Means over layers of the per-layer metrics.
    pub gini_hard: f64,
    pub gini_soft: f64,
    pub min_max_hard: f64,
    pub min_max_soft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub divergence: Option<String>,
}

impl RunRecord {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Training state for one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: MoeModel,
    pub corpus: SyntheticCorpusSpec,
    optimizer: OptimizerState,
    batches: RngState,
    noise: RngState,
    eval_x: Matrix,
    eval_y: Matrix,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = RngState::derive(config.seed, stream::INIT);
        let mut model = MoeModel::init(config.model, &mut init)?;
        let corpus = SyntheticCorpusSpec::from_config(
            &config.corpus,
            config.model.d_model,
            &mut RngState::derive(config.seed, stream::CORPUS),
        )?;
        let eval = corpus.generate_batch(
            &mut RngState::derive(config.seed, stream::EVAL),
            config.eval_batch,
        );
        let optimizer = OptimizerState::for_model(config.optimizer, &mut model);
        Ok(Trainer {
            config,
            model,
            corpus,
            optimizer,
            batches: RngState::derive(config.seed, stream::BATCHES),
            noise: RngState::derive(config.seed, stream::NOISE),
            eval_x: eval.x,
            eval_y: eval.targets,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let cfg = self.config;
        let lr = cfg
            .schedule
            .lr_at(self.step, cfg.steps.max(self.step + 1))?;
        let batch = self
            .corpus
            .generate_batch(&mut self.batches, cfg.batch_size);
        let fwd = self
            .model
            .forward(&batch.x, cfg.model.train_mode(), &mut self.noise)?;
        let (losses, mut grads) = self.model.backward(&fwd, &batch.targets, None)?;
        if !losses.total.is_finite() {
            return Err(LprError::Divergence {
                step: self.step,
                reason: format!("non-finite loss {}", losses.total),
            });
        }
        let grad_norm = self
            .optimizer
            .step_model(&mut self.model, &mut grads, lr)
            .map_err(|e| match e {
                LprError::Divergence { reason, .. } => LprError::Divergence {
                    step: self.step,
                    reason,
                },
                other => other,
            })?;

        if cfg.ema.enabled {
            for (layer, lf) in self.model.layers.iter_mut().zip(&fwd.layers) {
                if let (Router::Lpr(r), Some(enc)) = (&mut layer.router, lf.router.encoded()) {
                    r.prototypes = ema_update(
                        &r.prototypes,
                        &enc.latent.mean,
                        lf.router.decision(),
                        cfg.ema.lambda,
                        cfg.ema.mode,
                    )?;
                }
            }
        }

        let mut gini = Vec::with_capacity(fwd.layers.len());
        let mut min_max = Vec::with_capacity(fwd.layers.len());
        for d in fwd.decisions() {
            let mut loads = LoadVector::zeros(cfg.model.experts);
            loads.add_decision(d, LoadMode::Hard)?;
            gini.push(loads.gini()?);
            min_max.push(loads.min_max_ratio());
        }
        let record = StepRecord {
            step: self.step,
            lr,
            task: losses.task,
            aux: losses.aux,
            kl: losses.lpr.kl,
            diversity: losses.lpr.diversity,
            alignment: losses.lpr.alignment,
            total: losses.total,
            grad_norm,
            gini,
            min_max,
        };
        self.step += 1;
        Ok(record)
    }

    /// Task loss and expert loads on the held-out batch, routed without
    /// sampling.
    pub fn evaluate(&self) -> Result<EvalRecord> {
        let mut unused = RngState::new(0);
        let fwd = self
            .model
            .forward(&self.eval_x, self.config.model.eval_mode(), &mut unused)?;
        let (test_loss, _) = crate::moe::mse_loss_grad(&fwd.output, &self.eval_y)?;
        let m = self.config.model.experts;
        let mut hard_loads = Vec::new();
        let mut soft_loads = Vec::new();
        for d in fwd.decisions() {
            let mut h = LoadVector::zeros(m);
            h.add_decision(d, LoadMode::Hard)?;
            let mut s = LoadVector::zeros(m);
            s.add_decision(d, LoadMode::Soft)?;
            hard_loads.push(h);
            soft_loads.push(s);
        }
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let gini_of = |ls: &[LoadVector]| -> Result<f64> {
            Ok(mean(
                ls.iter()
                    .map(LoadVector::gini)
                    .collect::<Result<Vec<_>>>()?,
            ))
        };
        Ok(EvalRecord {
            step: self.step,
            test_loss,
            gini_hard: gini_of(&hard_loads)?,
            gini_soft: gini_of(&soft_loads)?,
            min_max_hard: mean(hard_loads.iter().map(LoadVector::min_max_ratio).collect()),
            min_max_soft: mean(soft_loads.iter().map(LoadVector::min_max_ratio).collect()),
            hard_loads,
            soft_loads,
        })
    }
}

/// Runs `config.steps` optimizer steps, evaluating at step 0, every
/// `eval_every` steps, and at the end. A divergence stops the run and is
/// reported in the record rather than as an error.
pub fn train(config: TrainConfig) -> Result<RunRecord> {
    train_with(config, |_| {})
}

/// [`train`] with a callback invoked after each evaluation.
pub fn train_with(config: TrainConfig, mut on_eval: impl FnMut(&EvalRecord)) -> Result<RunRecord> {
    let mut trainer = Trainer::new(config)?;
    let mut record = RunRecord {
        steps: Vec::with_capacity(config.steps),
        evals: Vec::new(),
        divergence: None,
    };
    let mut push_eval = |trainer: &Trainer, record: &mut RunRecord| -> Result<()> {
        let e = trainer.evaluate()?;
        on_eval(&e);
        record.evals.push(e);
        Ok(())
    };
    push_eval(&trainer, &mut record)?;
    for s in 1..=config.steps {
        match trainer.step() {
            Ok(r) => record.steps.push(r),
            Err(LprError::Divergence { step, reason }) => {
                record.divergence = Some(format!("step {step}: {reason}"));
                return Ok(record);
            }
            Err(e) => return Err(e),
        }
        let due = config.eval_every > 0 && s % config.eval_every == 0;
        if due || s == config.steps {
            push_eval(&trainer, &mut record)?;
        }
    }
    Ok(record)
}
