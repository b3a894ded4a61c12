//! The deterministic epoch loop, hook orchestration and run artifacts.
//!
//! Hooks only ever read the live state or work on private copies of it, and
//! they draw randomness from their own named streams, so a run with every
//! hook enabled follows exactly the same trajectory as a run with none.

mod config;
mod run;
mod sink;

use std::sync::Arc;

pub use config::{EvalConfig, ExperimentConfig, Hook, HookSchedule, ProbeConfig};
pub use run::{
    list_checkpoints, load_reference, read_checkpoint_state, resume, run_experiment, sha256_hex, CheckpointState,
    RunManifest, RunOutcome, RunStatus, CHECKPOINTS_DIR, DATASET, FINAL_MODEL_DIR, MANIFEST, METRICS_DIR,
};
pub use sink::{jsonl_to_csv, read_jsonl, row_json, row_num, FileSink, MemorySink, MetricSink, NullSink, Row};

use serde::{Deserialize, Serialize};

use crate::counterfactual::{decompose, mean_epoch_gradient};
use crate::error::{Error, Result};
use crate::hessian::entanglement_step;
use crate::metrics::{
    adam_introspect, batch_dynamics, consecutive_cossim, grad_norm_metrics, parameter_delta,
    solution_projection_metrics, weight_tracking, AdamProbe, GradientWindow, MetricSet, PathTracker, ReferenceModel,
};
use crate::nn::{Mode, ParamVec, ParameterVector, Real, Transformer};
use crate::optim::{cosine_lr, AdamWState, RngCursors, TrainingSnapshot};
use crate::ordering::{shuffle_from_stream, Orderer};
use crate::rng;
use crate::spectral::FrequencyTracker;
use crate::task::{generate_dataset, Dataset, ExamplePair};

/// Metric stream for the per-epoch training summary.
pub const TRAINING_METRICS: &str = "training_metrics";

/// Runs `f` on the live state, then restores the state exactly as it was,
/// whether `f` succeeded or not.
pub fn with_isolated_state<S: Clone, R>(live: &mut S, f: impl FnOnce(&mut S) -> Result<R>) -> Result<R> {
    let saved = live.clone();
    let out = f(live);
    *live = saved;
    out
}

/// Cross-epoch state owned by the hooks. Persisted in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HookTracking {
    pub path: PathTracker,
    pub frequencies: FrequencyTracker,
}

/// What one epoch produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Completed epochs after this one (1-based epoch number).
    pub epoch: u64,
    pub lr: f64,
    /// Mean train-mode batch loss.
    pub loss: f64,
    /// Accuracy on the seeded test subsample.
    pub val_acc: f64,
    /// Full test accuracy, when it was computed.
    pub val_acc_full: Option<f64>,
    pub train_acc: Option<f64>,
    /// Full test accuracy reached the target.
    pub reached_target: bool,
}

/// A training run in memory, generic over the parameter precision.
pub struct Trainer<T: Real> {
    cfg: ExperimentConfig,
    model: Transformer,
    data: Arc<Dataset>,
    orderer: Orderer,
    eval_subset: Vec<ExamplePair>,
    /// The subsample is the whole evaluation pool.
    eval_is_full: bool,
    reference: Option<ReferenceModel>,
    theta0: ParameterVector,
    pub state: TrainingSnapshot<T>,
    /// Mean gradient of the last completed epoch.
    pub prev_grad: Option<ParameterVector>,
    pub tracking: HookTracking,
}

impl<T: Real> Trainer<T> {
    /// Fresh run at epoch 0. The dataset is generated from the task spec.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = Arc::new(generate_dataset(&cfg.task)?);
        Self::with_dataset(cfg, data, None)
    }

    /// Fresh run over an existing dataset, optionally with a reference.
    pub fn with_dataset(cfg: ExperimentConfig, data: Arc<Dataset>, reference: Option<ReferenceModel>) -> Result<Self> {
        cfg.validate()?;
        if T::PRECISION != cfg.model.precision {
            return Err(Error::Input(format!(
                "trainer precision {} does not match model.precision {}",
                T::PRECISION.as_str(),
                cfg.model.precision.as_str()
            )));
        }
        if data.spec != cfg.task {
            return Err(Error::Input("dataset was generated from a different task spec".into()));
        }
        if let Some(r) = &reference {
            r.check_compatible(&cfg.model)?;
        }
        let model = Transformer::new(cfg.model.clone())?;
        let orderer = Orderer::new(
            cfg.strategy,
            &data.train,
            cfg.task.p,
            cfg.stride,
            cfg.batch_size,
            cfg.master_seed,
        )?;
        let eval_pool = if data.test.is_empty() { &data.train } else { &data.test };
        let eval_is_full = cfg.eval.test_subset >= eval_pool.len();
        let eval_subset = if eval_is_full {
            eval_pool.clone()
        } else {
            shuffle_from_stream(eval_pool.len(), cfg.master_seed, rng::EVAL, &[])
                .into_iter()
                .take(cfg.eval.test_subset)
                .map(|i| eval_pool[i])
                .collect()
        };
        let params = model.init_params::<T>(cfg.master_seed);
        let theta0 = params.to_f64();
        let adam = AdamWState::new(Arc::clone(model.layout()), cfg.optimizer);
        Ok(Trainer {
            cfg,
            model,
            data,
            orderer,
            eval_subset,
            eval_is_full,
            reference,
            theta0,
            state: TrainingSnapshot {
                params,
                adam,
                cursors: RngCursors::default(),
            },
            prev_grad: None,
            tracking: HookTracking::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn epochs_completed(&self) -> u64 {
        self.state.cursors.epoch
    }

    /// The examples of each batch of `epoch` in plan order.
    fn batches(&self, order: &[usize]) -> Vec<Vec<ExamplePair>> {
        order
            .chunks(self.cfg.batch_size)
            .map(|idx| idx.iter().map(|&i| self.data.train[i]).collect())
            .collect()
    }

    /// One optimizer step on `state` with dropout from `stream`. Returns
    /// the loss and the gradient that was applied.
    fn step(
        &self,
        state: &mut TrainingSnapshot<T>,
        batch: &[ExamplePair],
        lr: f64,
        stream: &mut rng::StreamRng,
    ) -> Result<(f64, ParamVec<T>)> {
        let (loss, grad) = self.model.loss_and_grad(&state.params, batch, Mode::Train(stream))?;
        state.adam.step(&mut state.params, &grad, lr)?;
        state.cursors.step += 1;
        Ok((loss, grad))
    }

    /// Eval-mode gradient of `batch` in f64.
    fn probe_grad(&self, theta: &ParameterVector, batch: &[ExamplePair]) -> Result<ParameterVector> {
        Ok(self.model.loss_and_grad(theta, batch, Mode::Eval)?.1)
    }

    /// Mean gradients of `k` shuffled epochs run from `start`, each on a
    /// private copy. Permutations and dropout come from the counterfactual
    /// hook's own streams.
    pub fn counterfactual_gradients(
        &self,
        start: &TrainingSnapshot<T>,
        epoch: u64,
        lr: f64,
        k: usize,
    ) -> Result<Vec<ParameterVector>> {
        let seed = self.cfg.master_seed;
        let label = rng::hook_label(Hook::Counterfactual.as_str());
        let dropout_label = format!("{label}/dropout");
        (0..k as u64)
            .map(|kk| {
                let order = shuffle_from_stream(self.data.train.len(), seed, &label, &[epoch, kk]);
                let batches = self.batches(&order);
                mean_epoch_gradient(start, batches, |st, i, batch| {
                    let mut r = rng::stream(seed, &dropout_label, &[epoch, kk, i as u64]);
                    Ok(self.step(st, &batch, lr, &mut r)?.1.to_f64())
                })
            })
            .collect()
    }

    fn accuracy_on(&self, examples: &[ExamplePair]) -> Result<f64> {
        self.model.accuracy(&self.state.params, examples)
    }

    /// Full test accuracy (the training set when there is no test split).
    pub fn full_test_accuracy(&self) -> Result<f64> {
        let pool = if self.data.test.is_empty() {
            &self.data.train
        } else {
            &self.data.test
        };
        self.accuracy_on(pool)
    }

    /// Trains one epoch in plan order, evaluates, and runs the hooks due
    /// after it. Rows go to `sink`.
    pub fn run_epoch(&mut self, sink: &mut dyn MetricSink) -> Result<EpochReport> {
        let e = self.state.cursors.epoch;
        let n1 = e + 1;
        let hooks = self.cfg.hooks;
        let due = |h: Hook| hooks.due(h, n1);
        let lr = cosine_lr(e, &self.cfg.schedule);
        let seed = self.cfg.master_seed;
        let plan = self.orderer.plan(e as usize);
        let batches = self.batches(&plan.order);
        let nb = batches.len();

        let start = due(Hook::Counterfactual).then(|| self.state.clone());
        let theta_prev = self.state.params.to_f64();
        let burst = if due(Hook::Hessian) {
            self.cfg.probes.hessian_burst.min(nb.saturating_sub(1))
        } else {
            0
        };
        let mut window = due(Hook::BatchDynamics).then(|| GradientWindow::new(self.cfg.probes.batch_window));
        let mut g_sum = ParamVec::<f64>::zeros(Arc::clone(self.model.layout()));
        let mut loss_sum = 0.0;
        // (g_A, theta before A's step) for the next probe
        let mut probe_a: Option<(ParameterVector, ParameterVector)> = None;
        let mut prev_e: Option<ParameterVector> = None;
        let mut hessian_rows: Vec<(u64, MetricSet)> = Vec::new();
        let mut adam_probe: Option<AdamProbe> = None;

        for (i, batch) in batches.iter().enumerate() {
            let step_index = self.state.cursors.step;
            let mut r = rng::stream(seed, rng::DROPOUT, &[step_index]);
            let (loss, grad) = self
                .model
                .loss_and_grad(&self.state.params, batch, Mode::Train(&mut r))?;
            let g64 = grad.to_f64();

            if let Some((g_a, theta_before)) = probe_a.take() {
                let theta_after = self.state.params.to_f64();
                let probe = entanglement_step(
                    &g_a,
                    Some(&theta_before),
                    &theta_after,
                    &g64,
                    lr,
                    self.cfg.probes.hessian_variant,
                    prev_e.as_ref(),
                    |th| self.probe_grad(th, batch),
                )?;
                let delta = self.reference.as_ref().map(|r| r.delta_from(&theta_after));
                hessian_rows.push((step_index, probe.metrics(delta.as_ref())));
                prev_e = Some(probe.e);
            }
            if i < burst {
                probe_a = Some((g64.clone(), self.state.params.to_f64()));
            }
            if let Some(w) = &mut window {
                w.push(step_index, g64.as_slice());
            }
            let theta_before_last = (i + 1 == nb && due(Hook::AdamDynamics)).then(|| self.state.params.to_f64());

            self.state.adam.step(&mut self.state.params, &grad, lr)?;
            self.state.cursors.step += 1;
            loss_sum += loss;
            g_sum.axpy(1.0, &g64);

            if let Some(theta) = theta_before_last {
                adam_probe = Some(AdamProbe {
                    m: self.state.adam.m.to_f64(),
                    update: self.state.adam.adaptive_update(lr),
                    effective_lr: self.state.adam.effective_lr(lr),
                    lr,
                    theta,
                    grad: g64,
                });
            }
        }
        self.state.cursors.epoch += 1;
        let g_actual = g_sum.scaled(1.0 / nb as f64);
        let loss = loss_sum / nb as f64;

        // evaluation and the stop test
        let val_acc = self.accuracy_on(&self.eval_subset)?;
        let val_acc_full = if self.eval_is_full {
            Some(val_acc)
        } else if self.cfg.eval.full_every_epoch || val_acc >= self.cfg.target_accuracy {
            Some(self.full_test_accuracy()?)
        } else {
            None
        };
        let train_acc = if self.cfg.eval.train_accuracy {
            Some(self.accuracy_on(&self.data.train)?)
        } else {
            None
        };
        let reached_target = val_acc_full.is_some_and(|a| a >= self.cfg.target_accuracy);

        let mut tm = MetricSet::new();
        tm.put("loss", loss);
        tm.put("train_acc", train_acc.map(|a| 100.0 * a));
        tm.put("val_acc", 100.0 * val_acc);
        tm.put("val_acc_full", val_acc_full.map(|a| 100.0 * a));
        tm.put("lr", lr);
        tm.put("perplexity", loss.exp());
        sink.record(TRAINING_METRICS, n1, None, &tm)?;

        let theta_now = self.state.params.to_f64();
        let path_row = self.tracking.path.update(&self.theta0, &theta_prev, &theta_now);

        if due(Hook::Norms) {
            sink.record(Hook::Norms.as_str(), n1, None, &grad_norm_metrics(&g_actual))?;
        }
        if due(Hook::Consecutive) {
            if let Some(prev) = &self.prev_grad {
                sink.record(
                    Hook::Consecutive.as_str(),
                    n1,
                    None,
                    &consecutive_cossim(&g_actual, prev),
                )?;
            }
        }
        if due(Hook::Fourier) {
            let p = self.cfg.task.p as usize;
            let d = self.cfg.model.d_model;
            let row = self.tracking.frequencies.metrics(
                theta_now.segment("token_embedding"),
                theta_now.segment("decoder.weight"),
                p,
                d,
            );
            match row {
                Ok(row) => sink.record(Hook::Fourier.as_str(), n1, None, &row)?,
                Err(Error::Degenerate(_)) => {}
                Err(err) => return Err(err),
            }
        }
        if due(Hook::WeightTracking) {
            sink.record(
                Hook::WeightTracking.as_str(),
                n1,
                None,
                &weight_tracking(&theta_now, &g_actual),
            )?;
        }
        if due(Hook::ParameterDelta) {
            sink.record(
                Hook::ParameterDelta.as_str(),
                n1,
                None,
                &parameter_delta(&theta_now, &theta_prev),
            )?;
        }
        if due(Hook::PathLength) {
            sink.record(Hook::PathLength.as_str(), n1, None, &path_row)?;
        }
        if let Some(w) = &window {
            sink.record(Hook::BatchDynamics.as_str(), n1, None, &batch_dynamics(w))?;
        }
        if due(Hook::GradientProjection) {
            if let Some(r) = &self.reference {
                let row = solution_projection_metrics(&g_actual, &theta_prev, &theta_now, r);
                sink.record(Hook::GradientProjection.as_str(), n1, None, &row)?;
            }
        }
        if let Some(probe) = &adam_probe {
            sink.record(
                Hook::AdamDynamics.as_str(),
                n1,
                None,
                &adam_introspect(probe, self.reference.as_ref()),
            )?;
        }
        for (step, row) in &hessian_rows {
            sink.record(Hook::Hessian.as_str(), n1, Some(*step), row)?;
        }
        if let Some(start) = &start {
            let shuffled = self.counterfactual_gradients(start, e, lr, self.cfg.probes.counterfactual_k)?;
            match decompose(&g_actual, &shuffled) {
                Ok(d) => {
                    let delta = self.reference.as_ref().map(|r| r.delta_from(&theta_prev));
                    let mut row = d.metrics(delta.as_ref());
                    row.put("partition_residual", d.partition_residual());
                    sink.record(Hook::Counterfactual.as_str(), n1, None, &row)?;
                }
                Err(Error::Degenerate(_)) => {}
                Err(err) => return Err(err),
            }
        }

        self.prev_grad = Some(g_actual);
        Ok(EpochReport {
            epoch: n1,
            lr,
            loss,
            val_acc,
            val_acc_full,
            train_acc,
            reached_target,
        })
    }

    /// Trains until the target is reached or `max_epochs` have run.
    /// Returns the stop epoch, if any.
    pub fn train(&mut self, sink: &mut dyn MetricSink) -> Result<Option<u64>> {
        while self.epochs_completed() < self.cfg.max_epochs {
            let report = self.run_epoch(sink)?;
            if report.reached_target {
                return Ok(Some(report.epoch));
            }
        }
        Ok(None)
    }
}

/// Trains a fresh desk-style run in memory with the precision from the
/// config and returns the stop epoch plus all rows.
pub fn train_in_memory(cfg: &ExperimentConfig) -> Result<(Option<u64>, MemorySink)> {
    let mut sink = MemorySink::default();
    let stop = match cfg.model.precision {
        crate::nn::Precision::F32 => Trainer::<f32>::new(cfg.clone())?.train(&mut sink)?,
        crate::nn::Precision::F64 => Trainer::<f64>::new(cfg.clone())?.train(&mut sink)?,
    };
    Ok((stop, sink))
}
