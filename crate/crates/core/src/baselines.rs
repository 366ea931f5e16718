//! Reference training methods for side-by-side comparison.
//!
//! Three baselines share the exact same starting point as the main
//! protocol — backbone, client datasets, and initial prompt pair all come
//! from [`build_fixture`] under the same configuration — so any difference
//! in outcomes is attributable to the training rule alone:
//!
//! * **local**: every client trains its own prompt pair for the full
//!   schedule and never talks to anyone.
//! * **fedavg_prompt**: per round, every client trains both prompts from
//!   the current global pair; the server averages the uploads weighted by
//!   training-set size and the broadcast replaces both prompts everywhere.
//! * **fedprox_prompt**: as `fedavg_prompt`, but each local objective is
//!   augmented with a proximal pull `(mu/2)·‖θ − θ_global‖²` over the
//!   concatenated prompt vector `θ = [task; data]`.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agg::{aggregate_prompt_rows, WeightVector};
use crate::config::{ExperimentConfig, Method};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::fixture::{build_fixture, shuffle_seed_for, Fixture};
use crate::metrics::Metrics;
use crate::surrogate::{
    eval_loss, eval_metrics, loss_and_grad, run_sgd, train_local, Backbone, Batch, DataPrompt,
    TaskPrompt, TrainHyper,
};

/// One client's evaluation at the end of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundPoint {
    pub round: usize,
    pub client_id: usize,
    /// Loss on the client's own validation split under its current prompts.
    pub val_loss: f64,
    /// Metrics on the client's own test split under its current prompts.
    pub test_metrics: Metrics,
}

/// Complete trace of one baseline run.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutcome {
    pub method: Method,
    /// One point per (round, client): rounds ascending from 1, clients
    /// ascending within each round.
    pub points: Vec<ClientRoundPoint>,
    /// Each client's prompt pair after the final round. Under the averaging
    /// methods all entries are identical (the broadcast replaces them).
    pub final_prompts: Vec<(TaskPrompt, DataPrompt)>,
    /// Number of client↔server messages exchanged (uploads plus
    /// broadcasts); purely local training exchanges none.
    pub communication_events: usize,
}

impl BaselineOutcome {
    /// Mean test metrics over the last round's clients.
    pub fn final_mean_metrics(&self) -> Result<Metrics> {
        let last = self
            .points
            .iter()
            .map(|p| p.round)
            .max()
            .ok_or(Error::EmptySplit("baseline points"))?;
        let finals: Vec<Metrics> = self
            .points
            .iter()
            .filter(|p| p.round == last)
            .map(|p| p.test_metrics)
            .collect();
        Metrics::mean(&finals)
    }
}

/// Runs the named baseline from scratch under `config`.
pub fn run_baseline(config: &ExperimentConfig, method: Method) -> Result<BaselineOutcome> {
    let fixture = build_fixture(config)?;
    run_baseline_on(&fixture, method)
}

/// Runs the named baseline on an already-built fixture.
pub fn run_baseline_on(fixture: &Fixture, method: Method) -> Result<BaselineOutcome> {
    match method {
        Method::Local => run_local_only_on(fixture),
        Method::FedavgPrompt => run_averaged_on(fixture, Method::FedavgPrompt, 0.0),
        Method::FedproxPrompt => {
            run_averaged_on(fixture, Method::FedproxPrompt, fixture.config.baseline.mu)
        }
        Method::Dp2fl => Err(Error::InvalidConfig(
            "dp2fl is the primary protocol, not a baseline".into(),
        )),
    }
}

/// Independent local training: no aggregation, no communication.
pub fn run_local_only(config: &ExperimentConfig) -> Result<BaselineOutcome> {
    run_local_only_on(&build_fixture(config)?)
}

fn run_local_only_on(fixture: &Fixture) -> Result<BaselineOutcome> {
    let config = &fixture.config;
    let backbone = &fixture.backbone;
    let rounds = config.rounds;
    let per_client: Vec<(Vec<ClientRoundPoint>, (TaskPrompt, DataPrompt))> = fixture
        .datasets
        .par_iter()
        .map(|dataset| -> Result<_> {
            let k = dataset.client_id();
            let mut task = fixture.task_prompt.clone();
            let mut data = fixture.data_prompt.clone();
            let mut points = Vec::with_capacity(rounds);
            for round in 1..=rounds {
                let mut hyper = config.train;
                hyper.shuffle_seed = shuffle_seed_for(config, round, k);
                let (t, d) = train_local(backbone, &task, &data, dataset.train(), &hyper)?;
                task = t;
                data = d;
                points.push(ClientRoundPoint {
                    round,
                    client_id: k,
                    val_loss: eval_loss(backbone, &task, &data, dataset.validation())?,
                    test_metrics: eval_metrics(backbone, &task, &data, dataset.test())?,
                });
            }
            Ok((points, (task, data)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::with_capacity(fixture.datasets.len() * rounds);
    for r in 0..rounds {
        for (client_points, _) in &per_client {
            points.push(client_points[r].clone());
        }
    }
    Ok(BaselineOutcome {
        method: Method::Local,
        points,
        final_prompts: per_client.into_iter().map(|(_, pair)| pair).collect(),
        communication_events: 0,
    })
}

/// Size-weighted prompt averaging (every round replaces both prompts).
pub fn run_fedavg_prompt(config: &ExperimentConfig) -> Result<BaselineOutcome> {
    run_averaged_on(&build_fixture(config)?, Method::FedavgPrompt, 0.0)
}

/// Size-weighted prompt averaging with a proximal pull toward the
/// round's starting global prompts, with strength `config.baseline.mu`.
pub fn run_fedprox_prompt(config: &ExperimentConfig) -> Result<BaselineOutcome> {
    let fixture = build_fixture(config)?;
    let mu = fixture.config.baseline.mu;
    run_averaged_on(&fixture, Method::FedproxPrompt, mu)
}

/// Averaging weights proportional to each client's training-set size.
pub fn size_weights(datasets: &[ClientDataset]) -> Result<WeightVector> {
    let sizes: Vec<f64> = datasets.iter().map(|d| d.train().len() as f64).collect();
    let total: f64 = sizes.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidWeights(
            "total training-set size must be positive".into(),
        ));
    }
    WeightVector::global_task(sizes.into_iter().map(|s| s / total).collect())
}

/// The broadcast prompts a proximal step is pulled toward, with strength
/// `mu`.
pub(crate) struct ProximalPull<'a> {
    pub task: &'a TaskPrompt,
    pub data_flat: &'a Array1<f64>,
    pub mu: f64,
}

/// One local phase of the proximal objective: plain cross-entropy plus
/// `(mu/2)·‖θ − anchor‖²` over the concatenated prompt vector, whose
/// gradient adds `mu·(θ − anchor)` to each prompt block. `mu = 0` takes
/// the untouched plain path so the degenerate case is exactly ordinary
/// local training.
pub(crate) fn train_proximal(
    backbone: &Backbone,
    task_prompt: &TaskPrompt,
    data_prompt: &DataPrompt,
    pull: &ProximalPull<'_>,
    train: &Batch,
    hyper: &TrainHyper,
) -> Result<(TaskPrompt, DataPrompt)> {
    let mu = pull.mu;
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "proximal coefficient must be finite and non-negative, got {mu}"
        )));
    }
    if mu == 0.0 {
        return train_local(backbone, task_prompt, data_prompt, train, hyper);
    }
    run_sgd(task_prompt, data_prompt, train, hyper, |tp, dp, batch| {
        let (mut loss, mut grad_task, mut grad_data) = loss_and_grad(backbone, tp, dp, batch)?;
        let delta_task = tp.values() - pull.task.values();
        let delta_data = dp.flatten() - pull.data_flat;
        loss += 0.5 * mu * (delta_task.dot(&delta_task) + delta_data.dot(&delta_data));
        grad_task.scaled_add(mu, &delta_task);
        grad_data.scaled_add(mu, &delta_data);
        Ok((loss, grad_task, grad_data))
    })
}

fn run_averaged_on(fixture: &Fixture, method: Method, mu: f64) -> Result<BaselineOutcome> {
    let config = &fixture.config;
    let backbone = &fixture.backbone;
    let num_clients = fixture.datasets.len();
    let weights = size_weights(&fixture.datasets)?;
    let dims = *backbone.dims();
    let flat_len = dims.data_prompt_len();

    let mut global_task = fixture.task_prompt.clone();
    let mut global_data = fixture.data_prompt.clone();
    let mut points = Vec::with_capacity(num_clients * config.rounds);
    let mut communication_events = 0usize;

    for round in 1..=config.rounds {
        let anchor_task = global_task.clone();
        let anchor_data_flat = global_data.flatten();
        let trained: Vec<(TaskPrompt, DataPrompt)> = fixture
            .datasets
            .par_iter()
            .map(|dataset| -> Result<(TaskPrompt, DataPrompt)> {
                let mut hyper = config.train;
                hyper.shuffle_seed = shuffle_seed_for(config, round, dataset.client_id());
                train_proximal(
                    backbone,
                    &anchor_task,
                    &global_data,
                    &ProximalPull {
                        task: &anchor_task,
                        data_flat: &anchor_data_flat,
                        mu,
                    },
                    dataset.train(),
                    &hyper,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        communication_events += num_clients; // uploads

        let mut task_rows = Array2::<f64>::zeros((num_clients, dims.task_prompt_dim));
        let mut data_rows = Array2::<f64>::zeros((num_clients, flat_len));
        for (k, (task, data)) in trained.iter().enumerate() {
            task_rows.row_mut(k).assign(task.values());
            data_rows.row_mut(k).assign(&data.flatten());
        }
        global_task = TaskPrompt::new(aggregate_prompt_rows(task_rows.view(), &weights)?)?;
        global_data = DataPrompt::from_flat(
            aggregate_prompt_rows(data_rows.view(), &weights)?.view(),
            dims.image_prompt_dim,
            dims.task_prompt_dim,
        )?;
        communication_events += num_clients; // broadcasts replace both prompts

        for dataset in &fixture.datasets {
            points.push(ClientRoundPoint {
                round,
                client_id: dataset.client_id(),
                val_loss: eval_loss(backbone, &global_task, &global_data, dataset.validation())?,
                test_metrics: eval_metrics(backbone, &global_task, &global_data, dataset.test())?,
            });
        }
    }

    Ok(BaselineOutcome {
        method,
        points,
        final_prompts: vec![(global_task, global_data); num_clients],
        communication_events,
    })
}
