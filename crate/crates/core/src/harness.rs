//! Experiment harness: runs one method end to end, writes the artifact
//! set (`round_*.json`, `summary.json`, `metrics.csv`, `data.csv`),
//! compares methods across seeds, and runs the new-client onboarding
//! experiment.
//!
//! Every number a report prints is recomputable from the emitted JSON:
//! `summary.json` carries the resolved configuration, the zero-shot
//! baseline, and every per-round per-client evaluation, while the main
//! protocol additionally archives one full `round_{r:04}.json` record per
//! round and `data.csv` holds the exact client datasets.

use std::env;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::run_baseline_on;
use crate::config::{ExperimentConfig, Method};
use crate::data::{make_new_client, write_datasets_csv, ClientDataset};
use crate::error::{Error, Result};
use crate::fixture::build_fixture;
use crate::metrics::Metrics;
use crate::protocol::{Federation, InitMode, RoundRecord};
use crate::seed;
use crate::surrogate::{eval_loss, eval_metrics, Batch};

/// One client's evaluation: loss on its own validation split and metrics
/// on its own test split, both under the prompts it holds at that moment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: usize,
    pub val_loss: f64,
    pub test: Metrics,
}

/// Every client's evaluation at the end of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    /// Per-client evaluations under each client's own (personalized)
    /// prompts, ascending by client id.
    pub personalized: Vec<ClientEval>,
    /// Metrics of the round's shared global model on each client's test
    /// split, aligned with `personalized`. Absent for purely local
    /// training, which has no global model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global: Option<Vec<Metrics>>,
}

/// The complete, self-contained result of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    /// The fully resolved configuration the run used.
    pub config: ExperimentConfig,
    /// Total client↔server messages exchanged.
    pub communication_events: usize,
    /// Zero-shot evaluations under the shared initial prompt pair,
    /// before any training.
    pub init: Vec<ClientEval>,
    pub rounds: Vec<RoundSummary>,
    /// Mean personalized test metrics at the final round (or at
    /// initialization when no rounds ran).
    pub final_personalized_mean: Metrics,
    /// Mean global-model test metrics at the final round, when a global
    /// model exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_global_mean: Option<Metrics>,
}

/// A run's summary plus the artifacts that cannot be derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub summary: RunSummary,
    /// Full per-round protocol records (empty for baselines, which have
    /// no aggregation audit trail).
    pub records: Vec<RoundRecord>,
    /// The exact client datasets the run consumed.
    pub datasets: Vec<ClientDataset>,
}

/// Runs `config.method` under `config` from scratch.
pub fn run_method(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let fixture = build_fixture(config)?;
    let init: Vec<ClientEval> = fixture
        .datasets
        .iter()
        .map(|dataset| -> Result<ClientEval> {
            Ok(ClientEval {
                client_id: dataset.client_id(),
                val_loss: eval_loss(
                    &fixture.backbone,
                    &fixture.task_prompt,
                    &fixture.data_prompt,
                    dataset.validation(),
                )?,
                test: eval_metrics(
                    &fixture.backbone,
                    &fixture.task_prompt,
                    &fixture.data_prompt,
                    dataset.test(),
                )?,
            })
        })
        .collect::<Result<_>>()?;

    let (rounds, communication_events, records) = match config.method {
        Method::Dp2fl => {
            let (federation, records) = Federation::run_experiment(config)?;
            let rounds = records
                .iter()
                .map(|record| RoundSummary {
                    round: record.round,
                    personalized: record
                        .clients
                        .iter()
                        .map(|audit| ClientEval {
                            client_id: audit.client_id,
                            val_loss: audit.post_self_loss,
                            test: audit.test_metrics,
                        })
                        .collect(),
                    global: Some(
                        record
                            .clients
                            .iter()
                            .map(|audit| audit.global_test_metrics)
                            .collect(),
                    ),
                })
                .collect();
            (rounds, federation.message_count(), records)
        }
        method => {
            let outcome = run_baseline_on(&fixture, method)?;
            let mut rounds = Vec::with_capacity(config.rounds);
            for r in 1..=config.rounds {
                let personalized: Vec<ClientEval> = outcome
                    .points
                    .iter()
                    .filter(|point| point.round == r)
                    .map(|point| ClientEval {
                        client_id: point.client_id,
                        val_loss: point.val_loss,
                        test: point.test_metrics,
                    })
                    .collect();
                // The averaging methods hold one shared model, which is
                // therefore also the global model; local training has none.
                let global = match method {
                    Method::Local => None,
                    _ => Some(personalized.iter().map(|eval| eval.test).collect()),
                };
                rounds.push(RoundSummary {
                    round: r,
                    personalized,
                    global,
                });
            }
            (rounds, outcome.communication_events, Vec::new())
        }
    };

    let rounds: Vec<RoundSummary> = rounds;
    let final_clients: &[ClientEval] = rounds
        .last()
        .map(|round| &round.personalized[..])
        .unwrap_or(&init[..]);
    let final_personalized_mean = Metrics::mean(
        &final_clients
            .iter()
            .map(|eval| eval.test)
            .collect::<Vec<_>>(),
    )?;
    let final_global_mean = match rounds.last().and_then(|round| round.global.as_ref()) {
        Some(global) => Some(Metrics::mean(global)?),
        None => None,
    };

    Ok(RunOutput {
        summary: RunSummary {
            method: config.method,
            seed: config.seed,
            config: config.clone(),
            communication_events,
            init,
            rounds,
            final_personalized_mean,
            final_global_mean,
        },
        records,
        datasets: fixture.datasets,
    })
}

fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Renders the run's `metrics.csv`: fixed column order, header always
/// present, `.` as the decimal separator regardless of locale. Round 0
/// carries the zero-shot evaluations under the initial prompts.
pub fn metrics_csv(summary: &RunSummary) -> String {
    let mut out =
        String::from("method,seed,round,client_id,split,accuracy,micro_f1,macro_f1,val_loss\n");
    {
        let mut push = |round: usize, eval: &ClientEval| {
            out.push_str(&format!(
                "{},{},{},{},test,{},{},{},{}\n",
                summary.method.name(),
                summary.seed,
                round,
                eval.client_id,
                eval.test.accuracy,
                eval.test.micro_f1,
                eval.test.macro_f1,
                eval.val_loss,
            ));
        };
        for eval in &summary.init {
            push(0, eval);
        }
        for round in &summary.rounds {
            for eval in &round.personalized {
                push(round.round, eval);
            }
        }
    }
    out
}

/// Writes the full artifact set for one run into `out_dir`.
pub fn write_run_artifacts(out_dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for record in &output.records {
        let path = out_dir.join(format!("round_{:04}.json", record.round));
        fs::write(path, pretty_json(record)?)?;
    }
    fs::write(out_dir.join("summary.json"), pretty_json(&output.summary)?)?;
    fs::write(out_dir.join("metrics.csv"), metrics_csv(&output.summary))?;
    write_datasets_csv(&out_dir.join("data.csv"), &output.datasets)?;
    Ok(())
}

/// One (method, seed) cell of a comparison: the run's final mean
/// personalized test metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub method: Method,
    pub seed: u64,
    pub mean_acc: f64,
    pub mean_micro_f1: f64,
    pub mean_macro_f1: f64,
}

/// Per-method mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_micro_f1: f64,
    pub std_micro_f1: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

/// Full comparison result: one cell per (method, seed) in method-major
/// order, plus one aggregate row per method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cells: Vec<ComparisonCell>,
    pub aggregates: Vec<MethodAggregate>,
}

impl ComparisonReport {
    pub fn aggregate(&self, method: Method) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the full (method × seed) cross product on top of `config` and,
/// when `out_dir` is given, writes every run's artifacts under
/// `out_dir/runs/<method>_seed<seed>/` plus `comparison.csv`,
/// `comparison_aggregate.csv`, and `comparison.json`.
pub fn compare(
    config: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<ComparisonReport> {
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods to compare".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("no seeds to compare over".into()));
    }
    let mut cells = Vec::with_capacity(methods.len() * seeds.len());
    for &method in methods {
        for &seed in seeds {
            let mut cell_config = config.clone();
            cell_config.method = method;
            cell_config.seed = seed;
            let output = run_method(&cell_config)?;
            if let Some(dir) = out_dir {
                let run_dir = dir
                    .join("runs")
                    .join(format!("{}_seed{}", method.name(), seed));
                write_run_artifacts(&run_dir, &output)?;
            }
            let mean = output.summary.final_personalized_mean;
            cells.push(ComparisonCell {
                method,
                seed,
                mean_acc: mean.accuracy,
                mean_micro_f1: mean.micro_f1,
                mean_macro_f1: mean.macro_f1,
            });
        }
    }

    let aggregates = methods
        .iter()
        .map(|&method| {
            let rows: Vec<&ComparisonCell> =
                cells.iter().filter(|cell| cell.method == method).collect();
            let column = |get: fn(&ComparisonCell) -> f64| -> (f64, f64) {
                let values: Vec<f64> = rows.iter().map(|cell| get(cell)).collect();
                mean_std(&values)
            };
            let (mean_acc, std_acc) = column(|c| c.mean_acc);
            let (mean_micro_f1, std_micro_f1) = column(|c| c.mean_micro_f1);
            let (mean_macro_f1, std_macro_f1) = column(|c| c.mean_macro_f1);
            MethodAggregate {
                method,
                seeds: rows.len(),
                mean_acc,
                std_acc,
                mean_micro_f1,
                std_micro_f1,
                mean_macro_f1,
                std_macro_f1,
            }
        })
        .collect();

    let report = ComparisonReport { cells, aggregates };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.csv"), comparison_csv(&report))?;
        fs::write(dir.join("comparison_aggregate.csv"), aggregate_csv(&report))?;
        fs::write(dir.join("comparison.json"), pretty_json(&report)?)?;
    }
    Ok(report)
}

/// Per-seed rows: `method,seed,mean_acc,mean_micro_f1,mean_macro_f1`.
pub fn comparison_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("method,seed,mean_acc,mean_micro_f1,mean_macro_f1\n");
    for cell in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.method.name(),
            cell.seed,
            cell.mean_acc,
            cell.mean_micro_f1,
            cell.mean_macro_f1,
        ));
    }
    out
}

/// Aggregate rows: per-method mean and sample standard deviation.
pub fn aggregate_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(
        "method,seeds,mean_acc,std_acc,mean_micro_f1,std_micro_f1,mean_macro_f1,std_macro_f1\n",
    );
    for agg in &report.aggregates {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            agg.method.name(),
            agg.seeds,
            agg.mean_acc,
            agg.std_acc,
            agg.mean_micro_f1,
            agg.std_micro_f1,
            agg.mean_macro_f1,
            agg.std_macro_f1,
        ));
    }
    out
}

/// Human-readable aggregate table for terminal output.
pub fn format_comparison(report: &ComparisonReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>5} {:>18} {:>18} {:>18}\n",
        "method", "seeds", "accuracy", "micro_f1", "macro_f1"
    ));
    for agg in &report.aggregates {
        out.push_str(&format!(
            "{:<16} {:>5} {:>9.4} ±{:<7.4} {:>9.4} ±{:<7.4} {:>9.4} ±{:<7.4}\n",
            agg.method.name(),
            agg.seeds,
            agg.mean_acc,
            agg.std_acc,
            agg.mean_micro_f1,
            agg.std_micro_f1,
            agg.mean_macro_f1,
            agg.std_macro_f1,
        ));
    }
    out
}

/// One initialization mode's outcome in the new-client experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewClientModeReport {
    pub mode: InitMode,
    /// The newcomer's granted model on its own test split, before it has
    /// trained at all.
    pub zero_shot: Metrics,
    /// The newcomer's personalized model after one round, on its own test.
    pub after_round_new: Metrics,
    /// Mean over the pre-existing clients after that round, each on its
    /// own test split.
    pub after_round_local_mean: Metrics,
    /// Mean over all clients (newcomer included) of each personalized
    /// model evaluated on the union of every client's test split.
    pub after_round_all_mean: Metrics,
}

/// The full new-client onboarding report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewClientReport {
    pub seed: u64,
    pub join_round: usize,
    pub new_client_id: usize,
    /// Mean of the pre-existing clients' personalized models evaluated on
    /// the newcomer's test split at join time — identical across modes.
    pub ave_local: Metrics,
    pub modes: Vec<NewClientModeReport>,
}

/// Trains the base federation for `join_round` rounds, admits one new
/// client under each requested mode (a fresh federation per mode), and
/// measures zero-shot and one-round-later quality.
pub fn new_client_experiment(
    config: &ExperimentConfig,
    join_round: usize,
    modes: &[InitMode],
) -> Result<NewClientReport> {
    config.validate()?;
    if join_round > config.rounds {
        return Err(Error::InvalidConfig(format!(
            "join round {join_round} exceeds the configured {} rounds",
            config.rounds
        )));
    }
    if modes.is_empty() {
        return Err(Error::InvalidConfig(
            "no initialization modes requested".into(),
        ));
    }

    let fixture = build_fixture(config)?;
    let new_client_id = fixture.datasets.len();
    let newcomer = make_new_client(
        &fixture.task,
        new_client_id,
        seed::stream(config.seed, "clients"),
        &config.sampler,
    )?;
    let union = {
        let mut parts: Vec<&Batch> = fixture.datasets.iter().map(|d| d.test()).collect();
        parts.push(newcomer.test());
        Batch::concat(&parts)?
    };

    let mut ave_local: Option<Metrics> = None;
    let mut mode_reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut federation = Federation::new(config)?;
        for _ in 0..join_round {
            federation.run_round()?;
        }

        let locals: Vec<Metrics> = federation
            .clients()
            .iter()
            .map(|client| {
                eval_metrics(
                    federation.backbone(),
                    client.task_prompt(),
                    client.data_prompt(),
                    newcomer.test(),
                )
            })
            .collect::<Result<_>>()?;
        let ave = Metrics::mean(&locals)?;
        if let Some(previous) = ave_local {
            debug_assert_eq!(previous, ave, "join-time state must not depend on the mode");
        }
        ave_local = Some(ave);

        federation.add_client(newcomer.clone(), mode)?;
        let granted = federation.client(new_client_id);
        let zero_shot = eval_metrics(
            federation.backbone(),
            granted.task_prompt(),
            granted.data_prompt(),
            newcomer.test(),
        )?;

        let record = federation.run_round()?;
        let after_round_new = record.clients[new_client_id].test_metrics;
        let existing: Vec<Metrics> = record.clients[..new_client_id]
            .iter()
            .map(|audit| audit.test_metrics)
            .collect();
        let after_round_local_mean = Metrics::mean(&existing)?;
        let on_union: Vec<Metrics> = federation
            .clients()
            .iter()
            .map(|client| {
                eval_metrics(
                    federation.backbone(),
                    client.task_prompt(),
                    client.data_prompt(),
                    &union,
                )
            })
            .collect::<Result<_>>()?;
        let after_round_all_mean = Metrics::mean(&on_union)?;

        mode_reports.push(NewClientModeReport {
            mode,
            zero_shot,
            after_round_new,
            after_round_local_mean,
            after_round_all_mean,
        });
    }

    Ok(NewClientReport {
        seed: config.seed,
        join_round,
        new_client_id,
        ave_local: ave_local.expect("at least one mode ran"),
        modes: mode_reports,
    })
}

/// Human-readable new-client table for terminal output.
pub fn format_new_client_report(report: &NewClientReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "new client {} joining after round {} (seed {})\n",
        report.new_client_id, report.join_round, report.seed
    ));
    out.push_str(&format!(
        "ave_local (existing models on the newcomer's test): accuracy {:.4}\n",
        report.ave_local.accuracy
    ));
    out.push_str(&format!(
        "{:<8} {:>10} {:>12} {:>12} {:>12}\n",
        "mode", "zero_shot", "new@+1", "local@+1", "all@+1"
    ));
    for row in &report.modes {
        out.push_str(&format!(
            "{:<8} {:>10.4} {:>12.4} {:>12.4} {:>12.4}\n",
            row.mode.name(),
            row.zero_shot.accuracy,
            row.after_round_new.accuracy,
            row.after_round_local_mean.accuracy,
            row.after_round_all_mean.accuracy,
        ));
    }
    out
}

/// Reads the `DP2FL_THREADS` override: unset or `0` means automatic.
pub fn thread_override() -> Result<Option<usize>> {
    match env::var("DP2FL_THREADS") {
        Err(env::VarError::NotPresent) => Ok(None),
        Err(err) => Err(Error::InvalidConfig(format!("DP2FL_THREADS: {err}"))),
        Ok(raw) => {
            let n: usize = raw.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!(
                    "DP2FL_THREADS must be a non-negative integer, got {raw:?}"
                ))
            })?;
            Ok(if n == 0 { None } else { Some(n) })
        }
    }
}

/// Runs `f` under the `DP2FL_THREADS` worker-count cap (automatic when
/// unset or 0). Results must not depend on the cap; only timing may.
pub fn with_thread_limit<T>(f: impl FnOnce() -> T + Send) -> Result<T>
where
    T: Send,
{
    match thread_override()? {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|err| Error::InvalidConfig(format!("thread pool: {err}")))?;
            Ok(pool.install(f))
        }
    }
}
