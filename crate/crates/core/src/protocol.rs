//! The round-based federation state machine.
//!
//! A federation is one server plus K clients exchanging typed messages over
//! a [`Transport`]. Each round runs in phases with two barriers: every
//! client trains locally and uploads its trained prompts plus a full row of
//! validation losses; the server aggregates the global prompts and
//! broadcasts; every client mixes the trained data prompts into its own and
//! reports its end-of-round self-loss. State commits only after the entire
//! round has succeeded, so a failed round leaves the federation untouched.
//!
//! Client-local work (training, evaluation, local aggregation) fans out
//! across worker threads; results are collected in client order, so the
//! outcome is bitwise independent of the schedule.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agg::{
    aggregate_prompt_rows, global_data_prompt, global_task_weights, local_aggregate,
    ClientPartition, LocalAggregation, LossMatrix,
};
use crate::config::ExperimentConfig;
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::fixture::{build_fixture, shuffle_seed_for};
use crate::metrics::Metrics;
use crate::surrogate::{
    eval_loss, eval_metrics, train_local, Backbone, Batch, DataPrompt, TaskPrompt,
};

/// A message destination (and, symmetrically, a receive address).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Server,
    Client(usize),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Server => write!(f, "server"),
            Endpoint::Client(id) => write!(f, "client {id}"),
        }
    }
}

/// Payload variants of the protocol.
///
/// `ValidationUpload` flows client → server during initialization and is
/// also reused server → clients to distribute a newcomer's validation set.
#[derive(Clone, Debug, PartialEq)]
pub enum MessageBody {
    /// A client's validation set, registered with everyone.
    ValidationUpload { client_id: usize, validation: Batch },
    /// Initialization package: starting prompts, every validation set, the
    /// initial self-losses, and the round budget.
    InitBroadcast {
        task_prompt: TaskPrompt,
        data_prompt: DataPrompt,
        validations: BTreeMap<usize, Batch>,
        initial_losses: BTreeMap<usize, f64>,
        rounds: usize,
    },
    /// A client's freshly trained prompts plus its loss on every
    /// registered validation set (one loss-matrix row).
    TrainedUpload {
        client_id: usize,
        task_prompt: TaskPrompt,
        data_prompt: DataPrompt,
        loss_row: Vec<f64>,
    },
    /// The server's end-of-aggregation broadcast: the new global task
    /// prompt, the full loss matrix, and every client's trained data prompt
    /// (flattened rows, indexed by client id).
    ServerBroadcast {
        task_prompt: TaskPrompt,
        loss_matrix: LossMatrix,
        trained_data_prompts: Vec<Vec<f64>>,
    },
    /// A client's self-loss after local aggregation; next round's baseline.
    SelfLossReport { client_id: usize, loss: f64 },
    /// A prospective client announcing itself with its validation set.
    NewClientHello { client_id: usize, validation: Batch },
    /// The server's welcome package for a new client.
    GlobalModelGrant {
        task_prompt: TaskPrompt,
        data_prompt: DataPrompt,
        validations: BTreeMap<usize, Batch>,
        prev_self_loss: f64,
    },
}

impl MessageBody {
    /// Variant name for diagnostics.
    fn kind(&self) -> &'static str {
        match self {
            MessageBody::ValidationUpload { .. } => "ValidationUpload",
            MessageBody::InitBroadcast { .. } => "InitBroadcast",
            MessageBody::TrainedUpload { .. } => "TrainedUpload",
            MessageBody::ServerBroadcast { .. } => "ServerBroadcast",
            MessageBody::SelfLossReport { .. } => "SelfLossReport",
            MessageBody::NewClientHello { .. } => "NewClientHello",
            MessageBody::GlobalModelGrant { .. } => "GlobalModelGrant",
        }
    }
}

/// A protocol message: the sender's round number plus the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub round: usize,
    pub body: MessageBody,
}

/// Message delivery between endpoints. Implementations must be lossless and
/// per-endpoint ordered; the engine depends on nothing else.
pub trait Transport {
    fn send(&mut self, to: Endpoint, message: Message) -> Result<()>;
    fn receive(&mut self, at: Endpoint) -> Result<Message>;
    /// Total messages sent so far (communication cost accounting).
    fn sent_count(&self) -> usize;
}

/// The provided transport: synchronous in-process FIFO queues.
#[derive(Clone, Debug, Default)]
pub struct InProcessTransport {
    queues: BTreeMap<Endpoint, VecDeque<Message>>,
    sent: usize,
}

impl InProcessTransport {
    pub fn new() -> InProcessTransport {
        InProcessTransport::default()
    }
}

impl Transport for InProcessTransport {
    fn send(&mut self, to: Endpoint, message: Message) -> Result<()> {
        self.queues.entry(to).or_default().push_back(message);
        self.sent += 1;
        Ok(())
    }

    fn receive(&mut self, at: Endpoint) -> Result<Message> {
        self.queues
            .get_mut(&at)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::Protocol(format!("no message waiting at {at}")))
    }

    fn sent_count(&self) -> usize {
        self.sent
    }
}

/// How a newly joining client's prompts are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Current global prompts — the full global model.
    Global,
    /// The experiment's original initialization, untouched by training.
    Init,
    /// Current global task prompt, original data prompt.
    Initglo,
}

impl InitMode {
    pub const ALL: [InitMode; 3] = [InitMode::Global, InitMode::Init, InitMode::Initglo];

    pub fn name(&self) -> &'static str {
        match self {
            InitMode::Global => "global",
            InitMode::Init => "init",
            InitMode::Initglo => "initglo",
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(text: &str) -> Result<InitMode> {
        InitMode::ALL
            .iter()
            .copied()
            .find(|mode| mode.name() == text)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown init mode {text:?}; expected global, init, or initglo"
                ))
            })
    }
}

/// Server-side state: the current global model plus everything needed to
/// weigh the next aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    round: usize,
    task_prompt: TaskPrompt,
    data_prompt: DataPrompt,
    init_task_prompt: TaskPrompt,
    init_data_prompt: DataPrompt,
    validation_registry: BTreeMap<usize, Batch>,
    last_self_losses: BTreeMap<usize, f64>,
    config: ExperimentConfig,
}

impl ServerState {
    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// The current global task prompt.
    pub fn task_prompt(&self) -> &TaskPrompt {
        &self.task_prompt
    }

    /// The current global data prompt.
    pub fn data_prompt(&self) -> &DataPrompt {
        &self.data_prompt
    }

    /// The experiment's original task prompt (round 0).
    pub fn init_task_prompt(&self) -> &TaskPrompt {
        &self.init_task_prompt
    }

    /// The experiment's original data prompt (round 0).
    pub fn init_data_prompt(&self) -> &DataPrompt {
        &self.init_data_prompt
    }

    /// Every registered client's validation set.
    pub fn validation_registry(&self) -> &BTreeMap<usize, Batch> {
        &self.validation_registry
    }

    /// The latest self-loss each client reported.
    pub fn last_self_losses(&self) -> &BTreeMap<usize, f64> {
        &self.last_self_losses
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }
}

/// One client's state between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    client_id: usize,
    task_prompt: TaskPrompt,
    data_prompt: DataPrompt,
    dataset: ClientDataset,
    peer_validations: BTreeMap<usize, Batch>,
    prev_self_loss: f64,
}

impl ClientState {
    pub fn client_id(&self) -> usize {
        self.client_id
    }

    /// The task prompt this client will train from next round. Equal to the
    /// last broadcast global task prompt, except for a newcomer before its
    /// first round, where it is whatever its init mode granted.
    pub fn task_prompt(&self) -> &TaskPrompt {
        &self.task_prompt
    }

    /// The client's personalized data prompt.
    pub fn data_prompt(&self) -> &DataPrompt {
        &self.data_prompt
    }

    pub fn dataset(&self) -> &ClientDataset {
        &self.dataset
    }

    /// Validation sets of every active client, the client's own included.
    pub fn peer_validations(&self) -> &BTreeMap<usize, Batch> {
        &self.peer_validations
    }

    /// The self-loss this client will judge the next round's updates by.
    pub fn prev_self_loss(&self) -> f64 {
        self.prev_self_loss
    }
}

/// Audit trail of one client's aggregation decisions in one round; enough
/// to replay every weight computation offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundAudit {
    pub client_id: usize,
    /// The self-loss the partition was judged against.
    pub prev_self_loss: f64,
    pub partition: ClientPartition,
    pub initial_weights: Vec<f64>,
    pub weights: Vec<f64>,
    pub gamma: Option<f64>,
    /// The client's data prompt before local aggregation, flattened.
    pub previous_data_prompt: Vec<f64>,
    /// The client's data prompt after local aggregation, flattened.
    pub data_prompt: Vec<f64>,
    /// Self-loss of (new global task prompt, new local data prompt) on the
    /// client's own validation set; next round's baseline.
    pub post_self_loss: f64,
    /// Personalized model on the client's own test split.
    pub test_metrics: Metrics,
    /// Global model on the client's own test split.
    pub global_test_metrics: Metrics,
}

/// Everything one round produced. Serialized one file per round; the
/// aggregation portions can be recomputed offline from the loss matrix and
/// the trained prompts recorded here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub loss_matrix: LossMatrix,
    pub task_weights: Vec<f64>,
    /// Freshly trained task prompts, one row per client.
    pub trained_task_prompts: Vec<Vec<f64>>,
    /// Freshly trained data prompts, flattened, one row per client.
    pub trained_data_prompts: Vec<Vec<f64>>,
    pub global_task_prompt: Vec<f64>,
    pub global_data_prompt: Vec<f64>,
    pub clients: Vec<ClientRoundAudit>,
}

/// What one client computes after receiving the server broadcast.
struct ClientRoundOutcome {
    aggregation: LocalAggregation,
    new_data_prompt: DataPrompt,
    post_self_loss: f64,
    test_metrics: Metrics,
    global_test_metrics: Metrics,
}

/// A fully initialized federation: server, clients, frozen backbone, and
/// the transport carrying their messages.
pub struct Federation<T: Transport = InProcessTransport> {
    server: ServerState,
    clients: Vec<ClientState>,
    backbone: Backbone,
    transport: T,
}

impl Federation<InProcessTransport> {
    /// Builds the fixture for `config` and runs the initialization flow
    /// over an in-process transport.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Federation::with_transport(config, InProcessTransport::new())
    }

    /// Initializes a federation and runs its full round budget.
    pub fn run_experiment(config: &ExperimentConfig) -> Result<(Self, Vec<RoundRecord>)> {
        let mut federation = Federation::new(config)?;
        let mut records = Vec::with_capacity(config.rounds);
        for _ in 0..config.rounds {
            records.push(federation.run_round()?);
        }
        Ok((federation, records))
    }
}

impl<T: Transport> Federation<T> {
    /// Initialization: every client uploads its validation set; the server
    /// registers them, computes each client's starting self-loss under the
    /// shared initial prompts, and broadcasts the full package back.
    pub fn with_transport(config: &ExperimentConfig, mut transport: T) -> Result<Self> {
        let fixture = build_fixture(config)?;
        let num_clients = fixture.datasets.len();

        for dataset in &fixture.datasets {
            transport.send(
                Endpoint::Server,
                Message {
                    round: 0,
                    body: MessageBody::ValidationUpload {
                        client_id: dataset.client_id(),
                        validation: dataset.validation().clone(),
                    },
                },
            )?;
        }

        let mut registry: BTreeMap<usize, Batch> = BTreeMap::new();
        for _ in 0..num_clients {
            let message = transport.receive(Endpoint::Server)?;
            let (client_id, validation) = match message.body {
                MessageBody::ValidationUpload {
                    client_id,
                    validation,
                } => (client_id, validation),
                other => {
                    return Err(Error::MalformedMessage(format!(
                        "expected ValidationUpload during initialization, got {}",
                        other.kind()
                    )))
                }
            };
            if message.round != 0 {
                return Err(Error::RoundMismatch {
                    expected: 0,
                    got: message.round,
                });
            }
            if validation.input_dim() != fixture.backbone.dims().input_dim {
                return Err(Error::DimensionMismatch {
                    what: "uploaded validation feature width",
                    expected: fixture.backbone.dims().input_dim,
                    got: validation.input_dim(),
                });
            }
            if registry.insert(client_id, validation).is_some() {
                return Err(Error::DuplicateClient(client_id));
            }
        }

        let mut initial_losses: BTreeMap<usize, f64> = BTreeMap::new();
        for (&client_id, validation) in &registry {
            let loss = eval_loss(
                &fixture.backbone,
                &fixture.task_prompt,
                &fixture.data_prompt,
                validation,
            )?;
            initial_losses.insert(client_id, loss);
        }

        for dataset in &fixture.datasets {
            transport.send(
                Endpoint::Client(dataset.client_id()),
                Message {
                    round: 0,
                    body: MessageBody::InitBroadcast {
                        task_prompt: fixture.task_prompt.clone(),
                        data_prompt: fixture.data_prompt.clone(),
                        validations: registry.clone(),
                        initial_losses: initial_losses.clone(),
                        rounds: config.rounds,
                    },
                },
            )?;
        }

        let mut clients = Vec::with_capacity(num_clients);
        for dataset in fixture.datasets {
            let client_id = dataset.client_id();
            let message = transport.receive(Endpoint::Client(client_id))?;
            let state = match message.body {
                MessageBody::InitBroadcast {
                    task_prompt,
                    data_prompt,
                    validations,
                    initial_losses,
                    ..
                } => {
                    let prev_self_loss = *initial_losses.get(&client_id).ok_or_else(|| {
                        Error::MalformedMessage(format!(
                            "initialization package lacks a loss for client {client_id}"
                        ))
                    })?;
                    ClientState {
                        client_id,
                        task_prompt,
                        data_prompt,
                        dataset,
                        peer_validations: validations,
                        prev_self_loss,
                    }
                }
                other => {
                    return Err(Error::MalformedMessage(format!(
                        "expected InitBroadcast during initialization, got {}",
                        other.kind()
                    )))
                }
            };
            clients.push(state);
        }

        Ok(Federation {
            server: ServerState {
                round: 0,
                task_prompt: fixture.task_prompt.clone(),
                data_prompt: fixture.data_prompt.clone(),
                init_task_prompt: fixture.task_prompt,
                init_data_prompt: fixture.data_prompt,
                validation_registry: registry,
                last_self_losses: initial_losses,
                config: config.clone(),
            },
            clients,
            backbone: fixture.backbone,
            transport,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn client(&self, client_id: usize) -> &ClientState {
        &self.clients[client_id]
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.server.config
    }

    /// Total messages sent since initialization.
    pub fn message_count(&self) -> usize {
        self.transport.sent_count()
    }

    /// The local phase of the next round, run for every client in parallel:
    /// train the prompt pair on local data, then evaluate the trained pair
    /// on every registered validation set. Returns the upload messages in
    /// client order without mutating any state, so a test can substitute a
    /// crafted upload before feeding them to [`Federation::run_round_with_uploads`].
    pub fn compute_trained_uploads(&self) -> Result<Vec<Message>> {
        let round = self.server.round + 1;
        let config = &self.server.config;
        let backbone = &self.backbone;
        self.clients
            .par_iter()
            .map(|client| -> Result<Message> {
                let mut hyper = config.train;
                hyper.shuffle_seed = shuffle_seed_for(config, round, client.client_id);
                let (trained_task, trained_data) = train_local(
                    backbone,
                    &client.task_prompt,
                    &client.data_prompt,
                    client.dataset.train(),
                    &hyper,
                )?;
                let mut loss_row = Vec::with_capacity(client.peer_validations.len());
                for validation in client.peer_validations.values() {
                    loss_row.push(eval_loss(
                        backbone,
                        &trained_task,
                        &trained_data,
                        validation,
                    )?);
                }
                Ok(Message {
                    round,
                    body: MessageBody::TrainedUpload {
                        client_id: client.client_id,
                        task_prompt: trained_task,
                        data_prompt: trained_data,
                        loss_row,
                    },
                })
            })
            .collect()
    }

    /// Runs one full round.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let uploads = self.compute_trained_uploads()?;
        self.run_round_with_uploads(uploads)
    }

    /// The server and client phases of a round, starting from the given
    /// upload messages. All state mutation happens after every fallible
    /// step, so an error leaves the federation exactly as it was.
    pub fn run_round_with_uploads(&mut self, uploads: Vec<Message>) -> Result<RoundRecord> {
        let round = self.server.round + 1;
        let num_clients = self.clients.len();
        for upload in uploads {
            self.transport.send(Endpoint::Server, upload)?;
        }

        // Server: collect one upload per client, strictly shape-checked.
        // Every expected message is drained from the transport before any
        // validation, so a rejected round leaves no stale messages queued.
        let mut received = Vec::with_capacity(num_clients);
        for _ in 0..num_clients {
            received.push(self.transport.receive(Endpoint::Server)?);
        }
        let mut trained_task_rows: Vec<Option<TaskPrompt>> = vec![None; num_clients];
        let mut trained_data_rows: Vec<Option<DataPrompt>> = vec![None; num_clients];
        let mut loss_rows: Vec<Option<Vec<f64>>> = vec![None; num_clients];
        for message in received {
            if message.round != round {
                return Err(Error::RoundMismatch {
                    expected: round,
                    got: message.round,
                });
            }
            let (client_id, task_prompt, data_prompt, loss_row) = match message.body {
                MessageBody::TrainedUpload {
                    client_id,
                    task_prompt,
                    data_prompt,
                    loss_row,
                } => (client_id, task_prompt, data_prompt, loss_row),
                other => {
                    return Err(Error::MalformedMessage(format!(
                        "expected TrainedUpload, got {}",
                        other.kind()
                    )))
                }
            };
            if client_id >= num_clients {
                return Err(Error::MalformedMessage(format!(
                    "trained upload from unknown client {client_id}"
                )));
            }
            let dims = self.backbone.dims();
            if task_prompt.len() != dims.task_prompt_dim {
                return Err(Error::DimensionMismatch {
                    what: "uploaded task prompt length",
                    expected: dims.task_prompt_dim,
                    got: task_prompt.len(),
                });
            }
            if data_prompt.image_prompt_dim() != dims.image_prompt_dim
                || data_prompt.task_prompt_dim() != dims.task_prompt_dim
            {
                return Err(Error::MalformedMessage(format!(
                    "uploaded data prompt of client {client_id} has the wrong shape"
                )));
            }
            if loss_row.len() != num_clients {
                return Err(Error::DimensionMismatch {
                    what: "uploaded loss row length",
                    expected: num_clients,
                    got: loss_row.len(),
                });
            }
            if trained_task_rows[client_id].is_some() {
                return Err(Error::DuplicateClient(client_id));
            }
            trained_task_rows[client_id] = Some(task_prompt);
            trained_data_rows[client_id] = Some(data_prompt);
            loss_rows[client_id] = Some(loss_row);
        }
        let trained_tasks: Vec<TaskPrompt> = trained_task_rows
            .into_iter()
            .map(|x| x.expect("all slots filled"))
            .collect();
        let trained_datas: Vec<DataPrompt> = trained_data_rows
            .into_iter()
            .map(|x| x.expect("all slots filled"))
            .collect();
        let entries: Vec<Vec<f64>> = loss_rows
            .into_iter()
            .map(|x| x.expect("all slots filled"))
            .collect();

        // Server: aggregate the global prompts.
        let loss_matrix = LossMatrix::new(entries, round)?;
        let params = &self.server.config.agg;
        let task_weights = global_task_weights(&loss_matrix, params.zero_sum_floor)?;

        let dims = self.backbone.dims();
        let mut task_rows = Array2::<f64>::zeros((num_clients, dims.task_prompt_dim));
        for (mut row, prompt) in task_rows.rows_mut().into_iter().zip(&trained_tasks) {
            row.assign(prompt.values());
        }
        let new_task_prompt =
            TaskPrompt::new(aggregate_prompt_rows(task_rows.view(), &task_weights)?)?;

        let flat_len = dims.data_prompt_len();
        let mut data_rows = Array2::<f64>::zeros((num_clients, flat_len));
        for (mut row, prompt) in data_rows.rows_mut().into_iter().zip(&trained_datas) {
            row.assign(&prompt.flatten());
        }
        let new_data_prompt = DataPrompt::from_flat(
            global_data_prompt(data_rows.view(), &task_weights)?.view(),
            dims.image_prompt_dim,
            dims.task_prompt_dim,
        )?;

        // Broadcast the aggregate and the trained data prompts to everyone.
        let flat_data_rows: Vec<Vec<f64>> = data_rows
            .rows()
            .into_iter()
            .map(|row| row.to_vec())
            .collect();
        for client in &self.clients {
            self.transport.send(
                Endpoint::Client(client.client_id),
                Message {
                    round,
                    body: MessageBody::ServerBroadcast {
                        task_prompt: new_task_prompt.clone(),
                        loss_matrix: loss_matrix.clone(),
                        trained_data_prompts: flat_data_rows.clone(),
                    },
                },
            )?;
        }

        // Clients: consume the broadcasts first (keeping the queues clean
        // even on failure), then aggregate in parallel.
        let client_ids: Vec<usize> = self.clients.iter().map(|c| c.client_id).collect();
        let mut broadcast_messages = Vec::with_capacity(num_clients);
        for id in client_ids {
            broadcast_messages.push(self.transport.receive(Endpoint::Client(id))?);
        }
        let mut broadcasts = Vec::with_capacity(num_clients);
        for message in broadcast_messages {
            if message.round != round {
                return Err(Error::RoundMismatch {
                    expected: round,
                    got: message.round,
                });
            }
            match message.body {
                MessageBody::ServerBroadcast {
                    task_prompt,
                    loss_matrix,
                    trained_data_prompts,
                } => {
                    if loss_matrix.num_clients() != num_clients
                        || trained_data_prompts.len() != num_clients
                        || trained_data_prompts.iter().any(|row| row.len() != flat_len)
                    {
                        return Err(Error::MalformedMessage(
                            "server broadcast shapes do not match the federation".into(),
                        ));
                    }
                    broadcasts.push((task_prompt, loss_matrix, trained_data_prompts));
                }
                other => {
                    return Err(Error::MalformedMessage(format!(
                        "expected ServerBroadcast, got {}",
                        other.kind()
                    )))
                }
            }
        }

        let backbone = &self.backbone;
        let global_task = &new_task_prompt;
        let global_data = &new_data_prompt;
        let outcomes: Vec<ClientRoundOutcome> = self
            .clients
            .par_iter()
            .zip(broadcasts.into_par_iter())
            .map(
                |(client, (task_prompt, loss_matrix, trained_rows))| -> Result<ClientRoundOutcome> {
                    let k = client.client_id;
                    let mut rows = Array2::<f64>::zeros((num_clients, flat_len));
                    for (mut row, flat) in rows.rows_mut().into_iter().zip(&trained_rows) {
                        row.assign(&Array1::from_vec(flat.clone()));
                    }
                    let pd_prev = client.data_prompt.flatten();
                    let aggregation = local_aggregate(
                        k,
                        client.prev_self_loss,
                        &loss_matrix.column(k),
                        rows.view(),
                        pd_prev.view(),
                        params,
                    )?;
                    let new_data_prompt = DataPrompt::from_flat(
                        aggregation.data_prompt.view(),
                        dims.image_prompt_dim,
                        dims.task_prompt_dim,
                    )?;
                    let post_self_loss = eval_loss(
                        backbone,
                        &task_prompt,
                        &new_data_prompt,
                        client.dataset.validation(),
                    )?;
                    let test_metrics = eval_metrics(
                        backbone,
                        &task_prompt,
                        &new_data_prompt,
                        client.dataset.test(),
                    )?;
                    let global_test_metrics =
                        eval_metrics(backbone, global_task, global_data, client.dataset.test())?;
                    Ok(ClientRoundOutcome {
                        aggregation,
                        new_data_prompt,
                        post_self_loss,
                        test_metrics,
                        global_test_metrics,
                    })
                },
            )
            .collect::<Result<Vec<_>>>()?;

        // Clients report their post-aggregation self-losses.
        for (client, outcome) in self.clients.iter().zip(&outcomes) {
            self.transport.send(
                Endpoint::Server,
                Message {
                    round,
                    body: MessageBody::SelfLossReport {
                        client_id: client.client_id,
                        loss: outcome.post_self_loss,
                    },
                },
            )?;
        }
        let mut reports = Vec::with_capacity(num_clients);
        for _ in 0..num_clients {
            reports.push(self.transport.receive(Endpoint::Server)?);
        }
        let mut reported: BTreeMap<usize, f64> = BTreeMap::new();
        for message in reports {
            if message.round != round {
                return Err(Error::RoundMismatch {
                    expected: round,
                    got: message.round,
                });
            }
            match message.body {
                MessageBody::SelfLossReport { client_id, loss } => {
                    if !loss.is_finite() || loss < 0.0 {
                        return Err(Error::InvalidLoss(format!(
                            "self-loss report of client {client_id} is {loss}"
                        )));
                    }
                    if reported.insert(client_id, loss).is_some() {
                        return Err(Error::DuplicateClient(client_id));
                    }
                }
                other => {
                    return Err(Error::MalformedMessage(format!(
                        "expected SelfLossReport, got {}",
                        other.kind()
                    )))
                }
            }
        }

        // Assemble the record, then commit everything at once.
        let record = RoundRecord {
            round,
            loss_matrix,
            task_weights: task_weights.values().to_vec(),
            trained_task_prompts: trained_tasks.iter().map(TaskPrompt::to_vec).collect(),
            trained_data_prompts: flat_data_rows,
            global_task_prompt: new_task_prompt.to_vec(),
            global_data_prompt: new_data_prompt.flatten().to_vec(),
            clients: self
                .clients
                .iter()
                .zip(&outcomes)
                .map(|(client, outcome)| ClientRoundAudit {
                    client_id: client.client_id,
                    prev_self_loss: client.prev_self_loss,
                    partition: outcome.aggregation.partition.clone(),
                    initial_weights: outcome.aggregation.initial_weights.clone(),
                    weights: outcome.aggregation.weights.values().to_vec(),
                    gamma: outcome.aggregation.gamma,
                    previous_data_prompt: client.data_prompt.flatten().to_vec(),
                    data_prompt: outcome.aggregation.data_prompt.to_vec(),
                    post_self_loss: outcome.post_self_loss,
                    test_metrics: outcome.test_metrics,
                    global_test_metrics: outcome.global_test_metrics,
                })
                .collect(),
        };

        self.server.round = round;
        self.server.task_prompt = new_task_prompt.clone();
        self.server.data_prompt = new_data_prompt;
        self.server.last_self_losses = reported;
        for (client, outcome) in self.clients.iter_mut().zip(outcomes) {
            client.task_prompt = new_task_prompt.clone();
            client.data_prompt = outcome.new_data_prompt;
            client.prev_self_loss = outcome.post_self_loss;
        }
        Ok(record)
    }

    /// Admits a new client between rounds: it announces itself with its
    /// validation set, the server distributes that set to every existing
    /// client and grants the newcomer prompts according to `mode`, and the
    /// newcomer's starting self-loss is computed under the granted pair.
    pub fn add_client(&mut self, dataset: ClientDataset, mode: InitMode) -> Result<()> {
        let client_id = dataset.client_id();
        let round = self.server.round;
        self.transport.send(
            Endpoint::Server,
            Message {
                round,
                body: MessageBody::NewClientHello {
                    client_id,
                    validation: dataset.validation().clone(),
                },
            },
        )?;

        let message = self.transport.receive(Endpoint::Server)?;
        let (new_id, validation) = match message.body {
            MessageBody::NewClientHello {
                client_id,
                validation,
            } => (client_id, validation),
            other => {
                return Err(Error::MalformedMessage(format!(
                    "expected NewClientHello, got {}",
                    other.kind()
                )))
            }
        };
        if self.server.validation_registry.contains_key(&new_id) {
            return Err(Error::DuplicateClient(new_id));
        }
        if new_id != self.clients.len() {
            return Err(Error::Protocol(format!(
                "new client id {new_id} must continue the sequence 0..{}",
                self.clients.len()
            )));
        }
        if validation.input_dim() != self.backbone.dims().input_dim {
            return Err(Error::DimensionMismatch {
                what: "new client validation feature width",
                expected: self.backbone.dims().input_dim,
                got: validation.input_dim(),
            });
        }

        let (granted_task, granted_data) = match mode {
            InitMode::Global => (
                self.server.task_prompt.clone(),
                self.server.data_prompt.clone(),
            ),
            InitMode::Init => (
                self.server.init_task_prompt.clone(),
                self.server.init_data_prompt.clone(),
            ),
            InitMode::Initglo => (
                self.server.task_prompt.clone(),
                self.server.init_data_prompt.clone(),
            ),
        };
        let prev_self_loss = eval_loss(&self.backbone, &granted_task, &granted_data, &validation)?;

        // All checks passed; mutate.
        self.server
            .validation_registry
            .insert(new_id, validation.clone());
        self.server.last_self_losses.insert(new_id, prev_self_loss);

        for client in &self.clients {
            self.transport.send(
                Endpoint::Client(client.client_id),
                Message {
                    round,
                    body: MessageBody::ValidationUpload {
                        client_id: new_id,
                        validation: validation.clone(),
                    },
                },
            )?;
        }
        for client in &mut self.clients {
            let message = self.transport.receive(Endpoint::Client(client.client_id))?;
            match message.body {
                MessageBody::ValidationUpload {
                    client_id,
                    validation,
                } => {
                    client.peer_validations.insert(client_id, validation);
                }
                other => {
                    return Err(Error::MalformedMessage(format!(
                        "expected forwarded ValidationUpload, got {}",
                        other.kind()
                    )))
                }
            }
        }

        self.transport.send(
            Endpoint::Client(new_id),
            Message {
                round,
                body: MessageBody::GlobalModelGrant {
                    task_prompt: granted_task,
                    data_prompt: granted_data,
                    validations: self.server.validation_registry.clone(),
                    prev_self_loss,
                },
            },
        )?;
        let message = self.transport.receive(Endpoint::Client(new_id))?;
        let state = match message.body {
            MessageBody::GlobalModelGrant {
                task_prompt,
                data_prompt,
                validations,
                prev_self_loss,
            } => ClientState {
                client_id: new_id,
                task_prompt,
                data_prompt,
                dataset,
                peer_validations: validations,
                prev_self_loss,
            },
            other => {
                return Err(Error::MalformedMessage(format!(
                    "expected GlobalModelGrant, got {}",
                    other.kind()
                )))
            }
        };
        self.clients.push(state);
        Ok(())
    }

    /// The global model (current global prompt pair) evaluated on every
    /// client's test split, in client order.
    pub fn evaluate_global_model(&self) -> Result<Vec<Metrics>> {
        self.clients
            .iter()
            .map(|client| {
                eval_metrics(
                    &self.backbone,
                    &self.server.task_prompt,
                    &self.server.data_prompt,
                    client.dataset.test(),
                )
            })
            .collect()
    }

    /// Each client's personalized model evaluated on its own test split, in
    /// client order.
    pub fn evaluate_personalized(&self) -> Result<Vec<Metrics>> {
        self.clients
            .iter()
            .map(|client| {
                eval_metrics(
                    &self.backbone,
                    &client.task_prompt,
                    &client.data_prompt,
                    client.dataset.test(),
                )
            })
            .collect()
    }
}
